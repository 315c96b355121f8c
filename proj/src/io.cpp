#include "micro/io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "micro/error.hpp"

#ifndef MICRO_PREF_VERSION
#define MICRO_PREF_VERSION "unknown"
#endif

namespace micro {

namespace {

template <class T>
std::optional<T> optional_field(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::nullopt;
    return it->get<T>();
}

template <class T>
void put_optional(json& j, const char* key, const std::optional<T>& v) {
    if (v) j[key] = *v;
    else j[key] = nullptr;
}

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::io, "cannot open for writing: " + path.string());
    out << std::setprecision(17);
    return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io, "cannot open: " + path.string());
    return in;
}

void check_finite(const FeatureVector& v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw Error(ErrorCode::parse, std::string(what) + " contains a non-finite entry");
    }
}

} // namespace

void to_json(json& j, const Matrix& m) { j = json{{"rows", m.rows}, {"cols", m.cols}, {"data", m.data}}; }

void from_json(const json& j, Matrix& m) {
    m.rows = j.at("rows").get<std::size_t>();
    m.cols = j.at("cols").get<std::size_t>();
    m.data = j.at("data").get<std::vector<double>>();
    require_dim("matrix storage", m.rows * m.cols, m.data.size());
}

void to_json(json& j, const RewardHead& h) { j = json{{"weights", h.weights}, {"bias", h.bias}}; }

void from_json(const json& j, RewardHead& h) {
    h.weights = j.at("weights").get<FeatureVector>();
    h.bias = j.at("bias").get<double>();
}

void to_json(json& j, const RouterParams& r) {
    j = json{{"hidden_weights", r.hidden_weights},
             {"hidden_bias", r.hidden_bias},
             {"output_weights", r.output_weights},
             {"output_bias", r.output_bias}};
}

void from_json(const json& j, RouterParams& r) {
    r.hidden_weights = j.at("hidden_weights").get<Matrix>();
    r.hidden_bias = j.at("hidden_bias").get<FeatureVector>();
    r.output_weights = j.at("output_weights").get<Matrix>();
    r.output_bias = j.at("output_bias").get<FeatureVector>();
    r.validate();
}

void to_json(json& j, const MixtureModel& m) {
    j = json{{"k", m.k()},
             {"pair_dim", m.pair_dim()},
             {"router_input_dim", m.router_input_dim()},
             {"hidden_size", m.router.hidden_size()},
             {"heads", m.heads},
             {"router", m.router}};
}

void from_json(const json& j, MixtureModel& m) {
    m.heads = j.at("heads").get<std::vector<RewardHead>>();
    m.router = j.at("router").get<RouterParams>();
    m.validate();
    require_dim("checkpoint k", j.at("k").get<std::size_t>(), m.k());
}

void to_json(json& j, const PreferenceExample& ex) {
    j = json{{"prompt_ctx", ex.prompt_ctx}, {"winner", ex.winner}, {"loser", ex.loser}};
    put_optional(j, "group_id", ex.group_id);
    put_optional(j, "attribute", ex.attribute);
    if (ex.context_group) j["context_group"] = *ex.context_group;
}

void from_json(const json& j, PreferenceExample& ex) {
    ex.prompt_ctx = j.at("prompt_ctx").get<FeatureVector>();
    ex.winner = j.at("winner").get<FeatureVector>();
    ex.loser = j.at("loser").get<FeatureVector>();
    ex.group_id = optional_field<int>(j, "group_id");
    ex.attribute = optional_field<std::string>(j, "attribute");
    ex.context_group = optional_field<std::string>(j, "context_group");
    if (ex.winner.size() != ex.loser.size()) {
        throw Error::dimension("example loser features vs winner", ex.winner.size(), ex.loser.size());
    }
    check_finite(ex.prompt_ctx, "prompt_ctx");
    check_finite(ex.winner, "winner");
    check_finite(ex.loser, "loser");
}

void to_json(json& j, const PopulationSpec& s) {
    j = json{{"schema_version", kPopulationSchemaVersion},
             {"k", s.k},
             {"prompt_dim", s.prompt_dim},
             {"true_heads", s.true_heads},
             {"gating", {{"weights", s.gating.weights}, {"bias", s.gating.bias}}},
             {"rho", s.rho},
             {"pair_sampler", {{"dim", s.pair_sampler.dim}, {"scale", s.pair_sampler.scale}, {"shift", s.pair_sampler.shift}}},
             {"context_slots", s.context_slots},
             {"context_noise", s.context_noise},
             {"context_scale", s.context_scale},
             {"seed", s.seed}};
}

void from_json(const json& j, PopulationSpec& s) {
    const int version = j.at("schema_version").get<int>();
    if (version != kPopulationSchemaVersion) {
        throw Error(ErrorCode::parse, "unsupported population schema_version " + std::to_string(version));
    }
    s.k = j.at("k").get<std::size_t>();
    s.prompt_dim = j.at("prompt_dim").get<std::size_t>();
    s.true_heads = j.at("true_heads").get<std::vector<RewardHead>>();
    s.gating.weights = j.at("gating").at("weights").get<Matrix>();
    s.gating.bias = j.at("gating").at("bias").get<FeatureVector>();
    s.rho = j.at("rho").get<double>();
    const auto& ps = j.at("pair_sampler");
    s.pair_sampler.dim = ps.at("dim").get<std::size_t>();
    s.pair_sampler.scale = ps.at("scale").get<double>();
    s.pair_sampler.shift = ps.at("shift").get<FeatureVector>();
    s.context_slots = j.at("context_slots").get<bool>();
    s.context_noise = j.at("context_noise").get<double>();
    s.context_scale = j.value("context_scale", 1.0);
    s.seed = j.at("seed").get<std::uint64_t>();
    s.validate();
}

void to_json(json& j, const PopulationParams& p) {
    j = json{{"k", p.k},
             {"prompt_dim", p.prompt_dim},
             {"pair_dim", p.pair_dim},
             {"rho", p.rho},
             {"head_norm", p.head_norm},
             {"gating_scale", p.gating_scale},
             {"shift_norm", p.shift_norm},
             {"pair_scale", p.pair_scale},
             {"context_slots", p.context_slots},
             {"context_noise", p.context_noise},
             {"context_scale", p.context_scale},
             {"seed", p.seed}};
}

void from_json(const json& j, PopulationParams& p) {
    p.k = j.at("k").get<std::size_t>();
    p.prompt_dim = j.at("prompt_dim").get<std::size_t>();
    p.pair_dim = j.at("pair_dim").get<std::size_t>();
    p.rho = j.at("rho").get<double>();
    p.head_norm = j.at("head_norm").get<double>();
    p.gating_scale = j.at("gating_scale").get<double>();
    p.shift_norm = j.at("shift_norm").get<double>();
    p.pair_scale = j.at("pair_scale").get<double>();
    p.context_slots = j.at("context_slots").get<bool>();
    p.context_noise = j.at("context_noise").get<double>();
    p.context_scale = j.value("context_scale", 1.0);
    p.seed = j.at("seed").get<std::uint64_t>();
}

void to_json(json& j, const Stage1Config& c) {
    j = json{{"alpha", c.alpha},
             {"learning_rate", c.learning_rate},
             {"batch_size", c.batch_size},
             {"grad_accum_steps", c.grad_accum_steps},
             {"warmup_ratio", c.warmup_ratio},
             {"epochs", c.epochs},
             {"seed", c.seed},
             {"k", c.k},
             {"hidden_size", c.hidden_size},
             {"weight_decay", c.weight_decay}};
}

void from_json(const json& j, Stage1Config& c) {
    c.alpha = j.at("alpha").get<double>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.grad_accum_steps = j.at("grad_accum_steps").get<std::size_t>();
    c.warmup_ratio = j.at("warmup_ratio").get<double>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.k = j.at("k").get<std::size_t>();
    c.hidden_size = j.at("hidden_size").get<std::size_t>();
    c.weight_decay = j.at("weight_decay").get<double>();
}

void to_json(json& j, const Stage2Config& c) {
    j = json{{"tau", c.tau},
             {"budget_per_attribute", c.budget_per_attribute},
             {"batch_size", c.batch_size},
             {"epochs", c.epochs},
             {"recompute_weights_once_per_epoch", c.recompute_weights_once_per_epoch},
             {"router_lr", c.router_lr},
             {"seed", c.seed}};
}

void from_json(const json& j, Stage2Config& c) {
    c.tau = j.at("tau").get<double>();
    c.budget_per_attribute = j.at("budget_per_attribute").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.recompute_weights_once_per_epoch = j.at("recompute_weights_once_per_epoch").get<bool>();
    c.router_lr = j.at("router_lr").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
}

void to_json(json& j, const EvalParams& p) {
    j = json{{"mc_prompts", p.mc_prompts},
             {"pairs_per_prompt", p.pairs_per_prompt},
             {"train_examples", p.train_examples},
             {"restarts", p.restarts},
             {"mixture_k", p.mixture_k}};
}

void from_json(const json& j, EvalParams& p) {
    p.mc_prompts = j.at("mc_prompts").get<std::size_t>();
    p.pairs_per_prompt = j.at("pairs_per_prompt").get<std::size_t>();
    p.train_examples = j.at("train_examples").get<std::size_t>();
    p.restarts = j.at("restarts").get<std::size_t>();
    p.mixture_k = j.at("mixture_k").get<std::size_t>();
}

void to_json(json& j, const RunConfig& c) {
    j = json{{"command", c.command}, {"output_dir", c.output_dir}, {"seed", c.seed}, {"inputs", c.inputs}};
    put_optional(j, "population", c.population);
    put_optional(j, "stage1", c.stage1);
    put_optional(j, "stage2", c.stage2);
    put_optional(j, "eval", c.eval);
    j["options"] = c.options;
}

void from_json(const json& j, RunConfig& c) {
    c.command = j.at("command").get<std::string>();
    c.output_dir = j.at("output_dir").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.inputs = j.at("inputs").get<std::vector<std::string>>();
    c.population = optional_field<PopulationParams>(j, "population");
    c.stage1 = optional_field<Stage1Config>(j, "stage1");
    c.stage2 = optional_field<Stage2Config>(j, "stage2");
    c.eval = optional_field<EvalParams>(j, "eval");
    c.options = j.value("options", std::map<std::string, std::string>{});
}

void to_json(json& j, const EvalReport& r) {
    j = json{{"attributes", r.attributes},
             {"per_attribute_accuracy", r.per_attribute_accuracy},
             {"attribute_counts", r.attribute_counts},
             {"per_head_accuracy", r.per_head_accuracy},
             {"best_head_per_attribute", r.best_head_per_attribute},
             {"average_accuracy", r.average_accuracy},
             {"ce_loss", r.ce_loss},
             {"n_examples", r.n_examples}};
}

void to_json(json& j, const BoundReport& r) {
    j = json{{"rho", r.rho},
             {"variance_term", r.variance_term},
             {"entropy_term", r.entropy_term},
             {"bound", r.bound},
             {"mc_std_error", r.mc_std_error},
             {"mc_prompts", r.mc_prompts},
             {"pairs_per_prompt", r.pairs_per_prompt},
             {"satisfied", r.satisfied}};
    if (std::isfinite(r.single_bt_ce)) {
        j["single_bt_ce"] = r.single_bt_ce;
        j["single_bt_std_error"] = r.single_bt_std_error;
    } else {
        j["single_bt_ce"] = nullptr;
    }
    if (r.mixture_ce) {
        j["mixture_ce"] = *r.mixture_ce;
        j["mixture_gap_below_single_bt"] = r.single_bt_ce - *r.mixture_ce;
    }
}

std::string example_to_jsonl(const PreferenceExample& ex) { return json(ex).dump(); }

void write_corpus(const std::filesystem::path& path, const std::vector<PreferenceExample>& corpus) {
    auto out = open_out(path);
    for (const auto& ex : corpus) out << example_to_jsonl(ex) << '\n';
    if (!out) throw Error(ErrorCode::io, "write failed: " + path.string());
}

std::vector<PreferenceExample> read_corpus(const std::filesystem::path& path) {
    auto in = open_in(path);
    std::vector<PreferenceExample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(json::parse(line).get<PreferenceExample>());
        } catch (const json::exception& e) {
            throw Error(ErrorCode::parse, path.string() + ":" + std::to_string(line_no) + ": " + e.what(), line_no);
        } catch (const Error& e) {
            throw Error(e.code(), path.string() + ":" + std::to_string(line_no) + ": " + e.what(), line_no);
        }
    }
    return out;
}

std::vector<RatedItem> read_rated_items(const std::filesystem::path& path) {
    auto in = open_in(path);
    std::vector<RatedItem> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = json::parse(line);
            RatedItem item;
            item.prompt_ctx = j.at("prompt_ctx").get<FeatureVector>();
            item.response = j.at("response").get<FeatureVector>();
            item.ratings = j.at("ratings").get<std::map<std::string, long long>>();
            out.push_back(std::move(item));
        } catch (const json::exception& e) {
            throw Error(ErrorCode::parse, path.string() + ":" + std::to_string(line_no) + ": " + e.what(), line_no);
        }
    }
    return out;
}

void write_json(const std::filesystem::path& path, const json& j) {
    auto out = open_out(path);
    out << j.dump(2) << '\n';
    if (!out) throw Error(ErrorCode::io, "write failed: " + path.string());
}

json read_json(const std::filesystem::path& path) {
    auto in = open_in(path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::parse, path.string() + ": " + e.what());
    }
}

json checkpoint_json(const MixtureModel& model, const json& config, std::uint64_t seed) {
    json j = model;
    j["schema_version"] = kCheckpointSchemaVersion;
    j["config"] = config;
    j["seed"] = seed;
    return j;
}

MixtureModel model_from_checkpoint(const json& j) {
    try {
        const int version = j.at("schema_version").get<int>();
        if (version != kCheckpointSchemaVersion) {
            throw Error(ErrorCode::parse, "unsupported checkpoint schema_version " + std::to_string(version));
        }
        return j.get<MixtureModel>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::parse, std::string("malformed checkpoint: ") + e.what());
    }
}

void write_stage1_log(const std::filesystem::path& path, const std::vector<Stage1LogEntry>& log) {
    auto out = open_out(path);
    out << "step,mle_loss,reg_loss,total_loss,mean_router_entropy\n";
    for (const auto& e : log) {
        out << e.step << ',' << e.mle_loss << ',' << e.reg_loss << ',' << e.total_loss << ',' << e.mean_router_entropy << '\n';
    }
}

void write_stage2_log(const std::filesystem::path& path, const std::vector<Stage2LogEntry>& log) {
    auto out = open_out(path);
    out << "epoch,mean_soft_label_entropy,router_ce,heldout_accuracy\n";
    for (const auto& e : log) {
        out << e.epoch << ',' << e.mean_soft_label_entropy << ',' << e.router_ce << ',';
        if (std::isfinite(e.heldout_accuracy)) out << e.heldout_accuracy;
        out << '\n';
    }
}

void write_budget_curve(const std::filesystem::path& path, const std::vector<BudgetPoint>& curve) {
    auto out = open_out(path);
    out << "budget,mean_acc,std_acc\n";
    for (const auto& p : curve) out << p.budget << ',' << p.mean_accuracy << ',' << p.std_accuracy << '\n';
}

std::string fnv1a_hex(const std::string& data) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string version_string() { return MICRO_PREF_VERSION; }

json make_manifest(const RunConfig& config, double wall_seconds) {
    const json cfg = config;
    return json{{"command", config.command},
                {"config", cfg},
                {"config_hash", fnv1a_hex(cfg.dump())},
                {"version", version_string()},
                {"wall_time_seconds", wall_seconds}};
}

} // namespace micro
