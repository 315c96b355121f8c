#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "micro/error.hpp"
#include "micro/evaluation.hpp"
#include "micro/io.hpp"
#include "micro/population.hpp"
#include "micro/rng.hpp"
#include "micro/stage1.hpp"
#include "micro/stage2.hpp"

namespace fs = std::filesystem;
using namespace micro;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitBound = 4;

struct GenArgs {
    PopulationParams population;
    std::size_t dim = 8;
    std::size_t pair_dim = 0;
    std::size_t n = 1000;
    std::uint64_t stream = 0;
    std::string context = "blank";
    std::string spec_path;
    std::string rated_input;
    std::vector<std::string> attributes;
    bool exclude_unanimous = false;
    std::string out;
};

struct Train1Args {
    Stage1Config config;
    std::string corpus;
    std::string out;
};

struct Train2Args {
    Stage2Config config;
    std::string checkpoint;
    std::string corpus;
    std::string heldout;
    bool per_batch_weights = false;
    std::string out;
};

struct EvalArgs {
    std::string checkpoint;
    std::string corpus;
    std::string spec_path;
    std::size_t mc_prompts = 20000;
    std::string out;
};

struct BoundArgs {
    std::string spec_path;
    EvalParams eval;
    std::uint64_t seed = 0;
    std::string out;
};

struct SweepArgs {
    Stage2Config config;
    std::string checkpoint;
    std::string pool;
    std::string heldout;
    std::vector<std::size_t> budgets{5, 10, 20, 50, 100};
    std::size_t repeats = 5;
    std::string out;
};

std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& s : v) out += (out.empty() ? "" : ",") + s;
    return out;
}

void require_file(const std::string& path, const char* what) {
    if (path.empty()) throw Error(ErrorCode::io, std::string("missing ") + what);
    if (!fs::is_regular_file(path)) throw Error(ErrorCode::io, std::string(what) + " not found: " + path);
}

class Timer {
public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void finish(const RunConfig& config, const Timer& timer) {
    write_json(fs::path(config.output_dir) / "manifest.json", make_manifest(config, timer.seconds()));
}

int run_gen(const GenArgs& a) {
    Timer timer;
    RunConfig rc;
    rc.command = "gen";
    rc.output_dir = a.out;
    rc.seed = a.population.seed;
    const fs::path out(a.out);
    std::vector<PreferenceExample> corpus;

    if (!a.rated_input.empty()) {
        require_file(a.rated_input, "rated input");
        if (a.attributes.empty()) throw Error(ErrorCode::invalid_argument, "--attributes is required with --rated-input");
        const auto items = read_rated_items(a.rated_input);
        corpus = binarize_rated_corpus(items, a.attributes, a.exclude_unanimous);
        rc.inputs = {a.rated_input};
        rc.options = {{"attributes", join(a.attributes)}, {"exclude_unanimous", a.exclude_unanimous ? "true" : "false"}};
        write_corpus(out / "corpus.jsonl", corpus);

        std::map<std::string, std::size_t> counts;
        for (const auto& ex : corpus) ++counts[*ex.attribute];
        std::cout << "n=" << corpus.size() << " items=" << items.size() << " attributes=" << a.attributes.size() << '\n';
        for (const auto& [name, c] : counts) std::cout << "  " << name << ": " << c << '\n';
        finish(rc, timer);
        return kExitOk;
    }

    if (a.context != "blank" && a.context != "group" && a.context != "none") {
        throw Error(ErrorCode::invalid_argument, "--context must be one of none, blank, group");
    }
    PopulationSpec spec;
    if (!a.spec_path.empty()) {
        require_file(a.spec_path, "population spec");
        spec = read_json(a.spec_path).get<PopulationSpec>();
        rc.inputs = {a.spec_path};
        rc.seed = spec.seed;
    } else {
        PopulationParams p = a.population;
        p.prompt_dim = a.dim;
        p.pair_dim = a.pair_dim ? a.pair_dim : a.dim;
        p.context_slots = p.context_slots || a.context == "group";
        spec = make_population(p);
        rc.population = p;
    }
    rc.options = {{"n", std::to_string(a.n)}, {"stream", std::to_string(a.stream)}, {"context", a.context}};

    SampleOptions so;
    so.context = a.context == "group" ? ContextMode::group : ContextMode::blank;
    so.stream = a.stream;
    corpus = sample_corpus(spec, a.n, so);
    write_corpus(out / "corpus.jsonl", corpus);
    write_json(out / "population.json", spec);

    std::vector<std::size_t> counts(spec.k, 0);
    for (const auto& ex : corpus) ++counts[static_cast<std::size_t>(*ex.group_id)];
    std::cout << "n=" << corpus.size() << " K=" << spec.k << " rho=" << spec.rho << '\n';
    for (std::size_t k = 0; k < spec.k; ++k) {
        const double f = corpus.empty() ? 0.0 : static_cast<double>(counts[k]) / static_cast<double>(corpus.size());
        std::cout << "  " << group_tag(static_cast<int>(k)) << ": " << counts[k] << " (" << f << ")\n";
    }
    finish(rc, timer);
    return kExitOk;
}

int run_train1(const Train1Args& a) {
    Timer timer;
    require_file(a.corpus, "corpus");
    const auto corpus = read_corpus(a.corpus);
    const auto result = train_stage1(corpus, a.config);
    const fs::path out(a.out);
    write_json(out / "checkpoint.json", checkpoint_json(result.model, a.config, a.config.seed));
    write_stage1_log(out / "stage1_log.csv", result.log);

    RunConfig rc;
    rc.command = "train1";
    rc.output_dir = a.out;
    rc.seed = a.config.seed;
    rc.inputs = {a.corpus};
    rc.stage1 = a.config;
    if (!result.log.empty()) {
        const auto& last = result.log.back();
        std::cout << "steps=" << last.step + 1 << " mle_loss=" << last.mle_loss << " mean_router_entropy=" << last.mean_router_entropy
                  << '\n';
    }
    finish(rc, timer);
    return kExitOk;
}

int run_train2(const Train2Args& a) {
    Timer timer;
    require_file(a.checkpoint, "checkpoint");
    require_file(a.corpus, "context corpus");
    const auto model = model_from_checkpoint(read_json(a.checkpoint));
    Stage2Config cfg = a.config;
    cfg.recompute_weights_once_per_epoch = !a.per_batch_weights;
    const auto context = apply_budget(read_corpus(a.corpus), cfg.budget_per_attribute, cfg.seed);
    std::vector<PreferenceExample> heldout;
    if (!a.heldout.empty()) {
        require_file(a.heldout, "held-out corpus");
        heldout = read_corpus(a.heldout);
    }
    const auto result = run_algorithm1(model, context, cfg, heldout.empty() ? nullptr : &heldout);
    const fs::path out(a.out);
    write_json(out / "checkpoint.json", checkpoint_json(result.model, cfg, cfg.seed));
    write_stage2_log(out / "stage2_log.csv", result.log);

    RunConfig rc;
    rc.command = "train2";
    rc.output_dir = a.out;
    rc.seed = cfg.seed;
    rc.inputs = {a.checkpoint, a.corpus};
    if (!a.heldout.empty()) rc.inputs.push_back(a.heldout);
    rc.stage2 = cfg;
    std::cout << "examples=" << context.size() << " epochs=" << result.log.size();
    if (!result.log.empty() && std::isfinite(result.log.back().heldout_accuracy)) {
        std::cout << " heldout_accuracy=" << result.log.back().heldout_accuracy;
    }
    std::cout << '\n';
    finish(rc, timer);
    return kExitOk;
}

int run_eval(const EvalArgs& a) {
    Timer timer;
    require_file(a.checkpoint, "checkpoint");
    require_file(a.corpus, "corpus");
    const auto model = model_from_checkpoint(read_json(a.checkpoint));
    const auto corpus = read_corpus(a.corpus);
    const auto report = evaluate(model, corpus);
    json j = report;

    RunConfig rc;
    rc.command = "eval";
    rc.output_dir = a.out;
    rc.inputs = {a.checkpoint, a.corpus};
    if (!a.spec_path.empty()) {
        require_file(a.spec_path, "population spec");
        const auto spec = read_json(a.spec_path).get<PopulationSpec>();
        const auto ce = oracle_population_ce(spec, model, a.mc_prompts);
        const auto truth = oracle_population_ce(spec, predictor_for(spec), a.mc_prompts);
        j["population_ce"] = ce.mean;
        j["population_ce_std_error"] = ce.std_error;
        j["true_population_ce"] = truth.mean;
        rc.inputs.push_back(a.spec_path);
        EvalParams ep;
        ep.mc_prompts = a.mc_prompts;
        rc.eval = ep;
    }
    write_json(fs::path(a.out) / "eval.json", j);
    std::cout << "n=" << report.n_examples << " average_accuracy=" << report.average_accuracy << " ce_loss=" << report.ce_loss << '\n';
    for (const auto& name : report.attributes) {
        std::cout << "  " << name << ": " << report.per_attribute_accuracy.at(name) << " (n=" << report.attribute_counts.at(name)
                  << ", best head " << report.best_head_per_attribute.at(name) << ")\n";
    }
    finish(rc, timer);
    return kExitOk;
}

int run_bound(const BoundArgs& a) {
    Timer timer;
    require_file(a.spec_path, "population spec");
    const auto spec = read_json(a.spec_path).get<PopulationSpec>();
    IrreducibilityBudget budget;
    budget.train_examples = a.eval.train_examples;
    budget.restarts = a.eval.restarts;
    budget.trainer.seed = a.seed;
    BoundOptions opts;
    opts.pairs_per_prompt = a.eval.pairs_per_prompt;
    auto report = verify_irreducibility(spec, a.eval.mc_prompts, budget, opts);

    if (a.eval.mixture_k > 0) {
        Stage1Config cfg;
        cfg.k = a.eval.mixture_k;
        cfg.seed = a.seed;
        cfg.epochs = 10;
        cfg.hidden_size = 32;
        cfg.alpha = 0.1;
        const auto train = sample_corpus(spec, a.eval.train_examples, {ContextMode::blank, derive_seed(a.seed, {stream::restart, 99})});
        const auto mixture = train_stage1(train, cfg).model;
        report.mixture_ce = oracle_population_ce(spec, mixture, a.eval.mc_prompts, {opts.pairs_per_prompt, opts.stream}).mean;
    }
    write_json(fs::path(a.out) / "bound.json", report);

    RunConfig rc;
    rc.command = "bound";
    rc.output_dir = a.out;
    rc.seed = a.seed;
    rc.inputs = {a.spec_path};
    rc.eval = a.eval;
    std::cout << "variance_term=" << report.variance_term << " entropy_term=" << report.entropy_term << " bound=" << report.bound
              << " single_bt_ce=" << report.single_bt_ce << " se=" << report.mc_std_error << " satisfied=" << std::boolalpha
              << report.satisfied << '\n';
    if (report.mixture_ce) std::cout << "mixture_ce=" << *report.mixture_ce << '\n';
    finish(rc, timer);
    return report.satisfied ? kExitOk : kExitBound;
}

int run_sweep(const SweepArgs& a) {
    Timer timer;
    require_file(a.checkpoint, "checkpoint");
    require_file(a.pool, "context pool");
    require_file(a.heldout, "held-out corpus");
    const auto model = model_from_checkpoint(read_json(a.checkpoint));
    const auto pool = read_corpus(a.pool);
    const auto heldout = read_corpus(a.heldout);
    const auto curve = budget_sweep(model, pool, heldout, a.budgets, a.config, a.repeats);
    write_budget_curve(fs::path(a.out) / "curve.csv", curve);

    RunConfig rc;
    rc.command = "sweep";
    rc.output_dir = a.out;
    rc.seed = a.config.seed;
    rc.inputs = {a.checkpoint, a.pool, a.heldout};
    rc.stage2 = a.config;
    std::vector<std::string> b;
    for (auto v : a.budgets) b.push_back(std::to_string(v));
    rc.options = {{"budgets", join(b)}, {"repeats", std::to_string(a.repeats)}};
    for (const auto& p : curve) std::cout << p.budget << ": " << p.mean_accuracy << " +- " << p.std_accuracy << '\n';
    finish(rc, timer);
    return kExitOk;
}

int exit_code_for(const Error& e) {
    switch (e.code()) {
        case ErrorCode::divergence:
        case ErrorCode::non_finite:
            return kExitDivergence;
        default:
            return kExitInput;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mixture-of-Bradley-Terry preference modelling on planted populations"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "Draw a planted corpus, or binarize a rated corpus");
    g->add_option("--k", gen.population.k, "Number of annotator groups")->capture_default_str();
    g->add_option("--dim", gen.dim, "Prompt feature dimension")->capture_default_str();
    g->add_option("--pair-dim", gen.pair_dim, "Response feature dimension (default: --dim)");
    g->add_option("--n", gen.n, "Number of comparisons")->capture_default_str();
    g->add_option("--rho", gen.population.rho, "Minimum group weight")->capture_default_str();
    g->add_option("--seed", gen.population.seed, "Population seed")->capture_default_str();
    g->add_option("--stream", gen.stream, "Sample stream (independent corpora from one population)")->capture_default_str();
    g->add_option("--head-norm", gen.population.head_norm)->capture_default_str();
    g->add_option("--gating-scale", gen.population.gating_scale)->capture_default_str();
    g->add_option("--shift", gen.population.shift_norm, "Norm of the first-candidate mean shift")->capture_default_str();
    g->add_option("--pair-scale", gen.population.pair_scale)->capture_default_str();
    g->add_option("--context", gen.context, "none | blank | group")->capture_default_str();
    g->add_flag("--context-slots", gen.population.context_slots, "Reserve K context slots in the router input");
    g->add_option("--context-noise", gen.population.context_noise)->capture_default_str();
    g->add_option("--context-scale", gen.population.context_scale)->capture_default_str();
    g->add_option("--spec", gen.spec_path, "Reuse an existing population.json");
    g->add_option("--rated-input", gen.rated_input, "JSONL of rated items to binarize");
    g->add_option("--attributes", gen.attributes, "Attributes to binarize")->delimiter(',');
    g->add_flag("--exclude-unanimous", gen.exclude_unanimous, "Drop pairs whose attributes all agree");
    g->add_option("--out", gen.out, "Output directory")->required();

    Train1Args t1;
    auto* s1 = app.add_subcommand("train1", "Fit a K-component mixture by maximum likelihood");
    s1->add_option("--corpus", t1.corpus)->required();
    s1->add_option("--k", t1.config.k)->capture_default_str();
    s1->add_option("--alpha", t1.config.alpha)->capture_default_str();
    s1->add_option("--lr", t1.config.learning_rate)->capture_default_str();
    s1->add_option("--batch", t1.config.batch_size)->capture_default_str();
    s1->add_option("--accum", t1.config.grad_accum_steps)->capture_default_str();
    s1->add_option("--warmup", t1.config.warmup_ratio)->capture_default_str();
    s1->add_option("--epochs", t1.config.epochs)->capture_default_str();
    s1->add_option("--hidden", t1.config.hidden_size)->capture_default_str();
    s1->add_option("--weight-decay", t1.config.weight_decay)->capture_default_str();
    s1->add_option("--seed", t1.config.seed)->capture_default_str();
    s1->add_option("--out", t1.out)->required();

    Train2Args t2;
    auto* s2 = app.add_subcommand("train2", "Adapt the router to context with frozen heads");
    s2->add_option("--checkpoint", t2.checkpoint)->required();
    s2->add_option("--corpus", t2.corpus, "Context corpus (examples carry context_group)")->required();
    s2->add_option("--heldout", t2.heldout);
    s2->add_option("--tau", t2.config.tau)->capture_default_str();
    s2->add_option("--budget", t2.config.budget_per_attribute, "Labelled examples per context group")->capture_default_str();
    s2->add_option("--batch", t2.config.batch_size)->capture_default_str();
    s2->add_option("--epochs", t2.config.epochs)->capture_default_str();
    s2->add_option("--router-lr", t2.config.router_lr)->capture_default_str();
    s2->add_flag("--per-batch-weights", t2.per_batch_weights, "Recompute soft labels every minibatch");
    s2->add_option("--seed", t2.config.seed)->capture_default_str();
    s2->add_option("--out", t2.out)->required();

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Per-attribute accuracy of a checkpoint");
    e->add_option("--checkpoint", ev.checkpoint)->required();
    e->add_option("--corpus", ev.corpus)->required();
    e->add_option("--spec", ev.spec_path, "Also report population cross-entropy");
    e->add_option("--mc-prompts", ev.mc_prompts)->capture_default_str();
    e->add_option("--out", ev.out)->required();

    BoundArgs bd;
    auto* b = app.add_subcommand("bound", "Estimate the single-model loss floor and check it");
    b->add_option("--spec", bd.spec_path)->required();
    b->add_option("--mc-prompts", bd.eval.mc_prompts)->capture_default_str();
    b->add_option("--pairs", bd.eval.pairs_per_prompt)->capture_default_str();
    b->add_option("--train-examples", bd.eval.train_examples)->capture_default_str();
    b->add_option("--restarts", bd.eval.restarts)->capture_default_str();
    b->add_option("--mixture-k", bd.eval.mixture_k, "Also train a K-mixture and report its CE")->capture_default_str();
    b->add_option("--seed", bd.seed)->capture_default_str();
    b->add_option("--out", bd.out)->required();

    SweepArgs sw;
    auto* w = app.add_subcommand("sweep", "Accuracy against labelling budget");
    w->add_option("--checkpoint", sw.checkpoint)->required();
    w->add_option("--pool", sw.pool)->required();
    w->add_option("--heldout", sw.heldout)->required();
    w->add_option("--budgets", sw.budgets)->delimiter(',')->capture_default_str();
    w->add_option("--repeats", sw.repeats)->capture_default_str();
    w->add_option("--tau", sw.config.tau)->capture_default_str();
    w->add_option("--batch", sw.config.batch_size)->capture_default_str();
    w->add_option("--epochs", sw.config.epochs)->capture_default_str();
    w->add_option("--router-lr", sw.config.router_lr)->capture_default_str();
    w->add_option("--seed", sw.config.seed)->capture_default_str();
    w->add_option("--out", sw.out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        app.exit(ex);
        return kExitInput;
    }

    try {
        if (*g) return run_gen(gen);
        if (*s1) return run_train1(t1);
        if (*s2) return run_train2(t2);
        if (*e) return run_eval(ev);
        if (*b) return run_bound(bd);
        if (*w) return run_sweep(sw);
    } catch (const Error& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return exit_code_for(ex);
    } catch (const json::exception& ex) {
        std::cerr << "error: malformed input: " << ex.what() << '\n';
        return kExitInput;
    } catch (const fs::filesystem_error& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return kExitInput;
    }
    return kExitInput;
}
