#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#ifndef MICRO_PREF_CLI
#error "MICRO_PREF_CLI must name the CLI binary"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("micro_pref_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

struct Run {
    int code = -1;
    std::string output;
};

Run run(const std::string& args, const fs::path& dir) {
    const auto log = dir / "stdout.txt";
    const std::string cmd = std::string(MICRO_PREF_CLI) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    r.output = ss.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t line_count(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) n += !line.empty();
    return n;
}

}  // namespace

TEST(Cli, GenWritesCorpusSpecAndManifest) {
    const auto dir = scratch("gen");
    const auto r = run("gen --k 2 --dim 4 --n 1000 --rho 0.3 --seed 3 --out " + (dir / "a").string(), dir);
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(line_count(dir / "a" / "corpus.jsonl"), 1000u);
    EXPECT_TRUE(fs::exists(dir / "a" / "population.json"));
    const auto manifest = json::parse(slurp(dir / "a" / "manifest.json"));
    EXPECT_EQ(manifest.at("command"), "gen");
    EXPECT_EQ(manifest.at("config_hash").get<std::string>().size(), 16u);
    EXPECT_TRUE(manifest.contains("version"));
    EXPECT_TRUE(manifest.contains("wall_time_seconds"));
    EXPECT_NE(r.output.find("K=2"), std::string::npos);

    ASSERT_EQ(run("gen --k 2 --dim 4 --n 1000 --rho 0.3 --seed 3 --out " + (dir / "b").string(), dir).code, 0);
    EXPECT_EQ(slurp(dir / "a" / "corpus.jsonl"), slurp(dir / "b" / "corpus.jsonl"));
    EXPECT_EQ(slurp(dir / "a" / "population.json"), slurp(dir / "b" / "population.json"));
}

TEST(Cli, BadInputsExitTwo) {
    const auto dir = scratch("bad");
    EXPECT_EQ(run("gen --rho 0.6 --k 2 --out " + (dir / "g").string(), dir).code, 2);
    EXPECT_EQ(run("gen --k 2 --bogus --out " + (dir / "g").string(), dir).code, 2);
    EXPECT_EQ(run("train1 --corpus " + (dir / "missing.jsonl").string() + " --out " + (dir / "t").string(), dir).code, 2);
    EXPECT_EQ(run("eval --checkpoint " + (dir / "none.json").string() + " --corpus x --out " + (dir / "e").string(), dir).code, 2);
    EXPECT_EQ(run("", dir).code, 2);
}

TEST(Cli, PipelineAndDimensionCheck) {
    const auto dir = scratch("pipe");
    const auto d = dir.string();
    ASSERT_EQ(run("gen --k 2 --dim 4 --n 800 --rho 0.1 --seed 1 --out " + d + "/pop", dir).code, 0);
    auto r = run("train1 --corpus " + d + "/pop/corpus.jsonl --k 2 --hidden 8 --epochs 2 --out " + d + "/s1", dir);
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_TRUE(fs::exists(dir / "s1" / "checkpoint.json"));
    EXPECT_EQ(line_count(dir / "s1" / "stage1_log.csv"), 1u + 800u / 32u * 2u);

    r = run("eval --checkpoint " + d + "/s1/checkpoint.json --corpus " + d + "/pop/corpus.jsonl --spec " + d +
                "/pop/population.json --mc-prompts 200 --out " + d + "/ev",
            dir);
    ASSERT_EQ(r.code, 0) << r.output;
    const auto report = json::parse(slurp(dir / "ev" / "eval.json"));
    EXPECT_TRUE(report.contains("population_ce"));

    ASSERT_EQ(run("gen --k 2 --dim 5 --n 50 --rho 0.1 --seed 1 --out " + d + "/wide", dir).code, 0);
    r = run("eval --checkpoint " + d + "/s1/checkpoint.json --corpus " + d + "/wide/corpus.jsonl --out " + d + "/ev2", dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("dimension"), std::string::npos) << r.output;
}

TEST(Cli, ContextPipeline) {
    const auto dir = scratch("ctx");
    const auto d = dir.string();
    ASSERT_EQ(run("gen --k 2 --dim 4 --n 800 --rho 0.1 --seed 1 --context-slots --out " + d + "/pop", dir).code, 0);
    ASSERT_EQ(run("gen --spec " + d + "/pop/population.json --context group --n 300 --stream 2 --out " + d + "/ctx", dir).code, 0);
    ASSERT_EQ(run("gen --spec " + d + "/pop/population.json --context group --n 300 --stream 3 --out " + d + "/held", dir).code, 0);
    ASSERT_EQ(run("train1 --corpus " + d + "/pop/corpus.jsonl --k 2 --hidden 8 --epochs 1 --out " + d + "/s1", dir).code, 0);
    auto r = run("train2 --checkpoint " + d + "/s1/checkpoint.json --corpus " + d + "/ctx/corpus.jsonl --heldout " + d +
                     "/held/corpus.jsonl --budget 20 --epochs 3 --out " + d + "/s2",
                 dir);
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(line_count(dir / "s2" / "stage2_log.csv"), 4u);
    EXPECT_EQ(json::parse(slurp(dir / "s2" / "manifest.json")).at("command"), "train2");
    r = run("sweep --checkpoint " + d + "/s1/checkpoint.json --pool " + d + "/ctx/corpus.jsonl --heldout " + d +
                "/held/corpus.jsonl --budgets 0,5,10 --repeats 2 --epochs 2 --out " + d + "/sw",
            dir);
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(line_count(dir / "sw" / "curve.csv"), 4u);
}

TEST(Cli, BoundOnIdenticalHeads) {
    const auto dir = scratch("bound");
    const auto d = dir.string();
    ASSERT_EQ(run("gen --k 2 --dim 4 --n 10 --rho 0.2 --shift 1 --seed 2 --out " + d + "/pop", dir).code, 0);
    auto spec = json::parse(slurp(dir / "pop" / "population.json"));
    spec["true_heads"][1] = spec["true_heads"][0];
    std::ofstream(dir / "same.json") << spec.dump();
    const auto r = run("bound --spec " + d + "/same.json --mc-prompts 2000 --train-examples 4000 --restarts 1 --out " + d + "/b", dir);
    ASSERT_EQ(r.code, 0) << r.output;
    const auto report = json::parse(slurp(dir / "b" / "bound.json"));
    EXPECT_NEAR(report.at("variance_term").get<double>(), 0.0, 1e-12);
    EXPECT_TRUE(report.at("satisfied").get<bool>());
}

TEST(Cli, DivergenceExitsThree) {
    const auto dir = scratch("div");
    {
        std::ofstream out(dir / "huge.jsonl");
        for (int i = 0; i < 4; ++i) {
            out << R"({"prompt_ctx":[0.0],"winner":[1e308,-1e308],"loser":[-1e308,1e308]})" << "\n";
            out << R"({"prompt_ctx":[0.0],"winner":[-1e308,1e308],"loser":[1e308,-1e308]})" << "\n";
        }
    }
    const auto r = run("train1 --corpus " + (dir / "huge.jsonl").string() + " --k 2 --hidden 2 --lr 10 --batch 4 --accum 1 --out " + (dir / "t").string(), dir);
    EXPECT_EQ(r.code, 3) << r.output;
}
