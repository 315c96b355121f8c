#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "helpers.hpp"
#include "micro/error.hpp"
#include "micro/io.hpp"

using namespace micro;
using micro::testing::random_batch;
using micro::testing::random_model;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("micro_pref_io_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Io, CorpusRoundTrip) {
    const auto dir = scratch("corpus");
    auto corpus = random_batch(25, 3, 4, 1);
    corpus[2].group_id = 1;
    corpus[2].attribute = "helpfulness";
    corpus[3].context_group = "g1";
    write_corpus(dir / "c.jsonl", corpus);
    EXPECT_EQ(read_corpus(dir / "c.jsonl"), corpus);
}

TEST(Io, CorpusParseErrorNamesLine) {
    const auto dir = scratch("parse");
    {
        std::ofstream out(dir / "bad.jsonl");
        out << example_to_jsonl(random_batch(1, 2, 2, 1)[0]) << "\n";
        out << "{not json\n";
    }
    try {
        read_corpus(dir / "bad.jsonl");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::parse);
        EXPECT_NE(std::string(e.what()).find("bad.jsonl:2"), std::string::npos);
    }
    {
        std::ofstream out(dir / "dims.jsonl");
        out << R"({"prompt_ctx":[0],"winner":[1,2],"loser":[1]})" << "\n";
    }
    EXPECT_THROW(read_corpus(dir / "dims.jsonl"), Error);
    try {
        read_corpus(dir / "missing.jsonl");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::io);
    }
}

TEST(Io, CheckpointRoundTripAndVersion) {
    const auto m = random_model(3, 4, 5, 6, 2);
    auto j = checkpoint_json(m, json{{"k", 3}}, 77);
    EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 77u);
    EXPECT_EQ(model_from_checkpoint(json::parse(j.dump())), m);
    j["schema_version"] = 99;
    EXPECT_THROW(model_from_checkpoint(j), Error);
    EXPECT_THROW(model_from_checkpoint(json{{"schema_version", 1}}), Error);
}

TEST(Io, PopulationRoundTrip) {
    PopulationParams p;
    p.k = 3;
    p.context_slots = true;
    p.context_scale = 2.5;
    p.shift_norm = 1.0;
    const auto spec = make_population(p);
    json j = spec;
    EXPECT_EQ(json::parse(j.dump()).get<PopulationSpec>(), spec);
    j["rho"] = 0.6;
    EXPECT_THROW(j.get<PopulationSpec>().validate(), Error);
}

TEST(Io, RunConfigRoundTrip) {
    RunConfig c;
    c.command = "train1";
    c.output_dir = "out";
    c.seed = 5;
    c.inputs = {"a.jsonl"};
    c.stage1 = Stage1Config{};
    c.stage2 = Stage2Config{};
    c.population = PopulationParams{};
    c.eval = EvalParams{};
    c.options["budgets"] = "0,5,10";
    const json j = c;
    EXPECT_EQ(json::parse(j.dump()).get<RunConfig>(), c);

    const auto m = make_manifest(c, 1.5);
    EXPECT_EQ(m.at("command"), "train1");
    EXPECT_EQ(m.at("wall_time_seconds"), 1.5);
    EXPECT_EQ(m.at("config_hash"), fnv1a_hex(j.dump()));
    EXPECT_FALSE(m.at("version").get<std::string>().empty());
}

TEST(Io, Fnv1aReferenceValues) {
    EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
    EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}

TEST(Io, CsvHeaders) {
    const auto dir = scratch("csv");
    write_stage1_log(dir / "s1.csv", {Stage1LogEntry{}});
    write_stage2_log(dir / "s2.csv", {Stage2LogEntry{0, 0.1, 0.2, std::numeric_limits<double>::quiet_NaN()}});
    write_budget_curve(dir / "curve.csv", {BudgetPoint{5, 0.7, 0.01, {}}});
    EXPECT_EQ(slurp(dir / "s1.csv").substr(0, 5), "step,");
    const auto s2 = slurp(dir / "s2.csv");
    EXPECT_EQ(s2.substr(0, s2.find('\n')), "epoch,mean_soft_label_entropy,router_ce,heldout_accuracy");
    EXPECT_EQ(s2.substr(s2.find('\n') + 1).back(), '\n');
    EXPECT_EQ(s2.substr(s2.size() - 2), ",\n");
    EXPECT_EQ(slurp(dir / "curve.csv").substr(0, 23), "budget,mean_acc,std_acc");
}

TEST(Io, RatedItems) {
    const auto dir = scratch("rated");
    {
        std::ofstream out(dir / "r.jsonl");
        out << R"({"prompt_ctx":[0.5],"response":[1,0],"ratings":{"a":3,"b":1}})" << "\n";
        out << R"({"prompt_ctx":[0.5],"response":[0,1],"ratings":{"a":1,"b":1}})" << "\n";
    }
    const auto items = read_rated_items(dir / "r.jsonl");
    ASSERT_EQ(items.size(), 2u);
    EXPECT_EQ(items[0].ratings.at("a"), 3);
    EXPECT_EQ(items[1].response, (FeatureVector{0.0, 1.0}));
}
