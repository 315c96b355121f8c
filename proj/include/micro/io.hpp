#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "micro/core_model.hpp"
#include "micro/evaluation.hpp"
#include "micro/population.hpp"
#include "micro/stage1.hpp"
#include "micro/stage2.hpp"

namespace micro {

using json = nlohmann::json;

inline constexpr int kCheckpointSchemaVersion = 1;
inline constexpr int kPopulationSchemaVersion = 1;

// JSON conversions (ADL hooks for nlohmann::json).
void to_json(json& j, const Matrix& m);
void from_json(const json& j, Matrix& m);
void to_json(json& j, const RewardHead& h);
void from_json(const json& j, RewardHead& h);
void to_json(json& j, const RouterParams& r);
void from_json(const json& j, RouterParams& r);
void to_json(json& j, const MixtureModel& m);
void from_json(const json& j, MixtureModel& m);
void to_json(json& j, const PreferenceExample& ex);
void from_json(const json& j, PreferenceExample& ex);
void to_json(json& j, const PopulationSpec& s);
void from_json(const json& j, PopulationSpec& s);
void to_json(json& j, const PopulationParams& p);
void from_json(const json& j, PopulationParams& p);
void to_json(json& j, const Stage1Config& c);
void from_json(const json& j, Stage1Config& c);
void to_json(json& j, const Stage2Config& c);
void from_json(const json& j, Stage2Config& c);
void to_json(json& j, const EvalReport& r);
void to_json(json& j, const BoundReport& r);

/// Evaluation / bound parameters carried by RunConfig.
struct EvalParams {
    std::size_t mc_prompts = 20000;
    std::size_t pairs_per_prompt = 8;
    std::size_t train_examples = 20000;
    std::size_t restarts = 3;
    std::size_t mixture_k = 0;

    bool operator==(const EvalParams&) const = default;
};
void to_json(json& j, const EvalParams& p);
void from_json(const json& j, EvalParams& p);

/// Everything needed to rerun a command.
struct RunConfig {
    std::string command;
    std::string output_dir;
    std::uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::optional<PopulationParams> population;
    std::optional<Stage1Config> stage1;
    std::optional<Stage2Config> stage2;
    std::optional<EvalParams> eval;
    /// Remaining command-specific flags, stringified.
    std::map<std::string, std::string> options;

    bool operator==(const RunConfig&) const = default;
};
void to_json(json& j, const RunConfig& c);
void from_json(const json& j, RunConfig& c);

// Corpus JSON-Lines: one example per line.
std::string example_to_jsonl(const PreferenceExample& ex);
void write_corpus(const std::filesystem::path& path, const std::vector<PreferenceExample>& corpus);
std::vector<PreferenceExample> read_corpus(const std::filesystem::path& path);

/// Rated items, one JSON object per line:
/// {"prompt_ctx": [...], "response": [...], "ratings": {"attr": int, ...}}
std::vector<RatedItem> read_rated_items(const std::filesystem::path& path);

void write_json(const std::filesystem::path& path, const json& j);
json read_json(const std::filesystem::path& path);

/// Versioned checkpoint: parameters plus the producing config and seed.
json checkpoint_json(const MixtureModel& model, const json& config, std::uint64_t seed);
MixtureModel model_from_checkpoint(const json& j);

void write_stage1_log(const std::filesystem::path& path, const std::vector<Stage1LogEntry>& log);
void write_stage2_log(const std::filesystem::path& path, const std::vector<Stage2LogEntry>& log);
void write_budget_curve(const std::filesystem::path& path, const std::vector<BudgetPoint>& curve);

/// 64-bit FNV-1a of a string, as 16 hex digits.
std::string fnv1a_hex(const std::string& data);

/// Version string baked in at configure time (git describe).
std::string version_string();

/// manifest.json: command, config, config hash, version, wall time.
json make_manifest(const RunConfig& config, double wall_seconds);

} // namespace micro
