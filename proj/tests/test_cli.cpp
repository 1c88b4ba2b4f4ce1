#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("reasonrec_cli_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Result cli(const std::string& args, const fs::path& dir) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(REASONREC_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

nlohmann::json tiny_config(const fs::path& out_dir) {
  return {{"name", "cli-test"},
          {"output_dir", out_dir.string()},
          {"seed", 3},
          {"strict", true},
          {"log_every", 1},
          {"eval_split", "val"},
          {"corpus", {{"num_items", 20}, {"num_users", 30}, {"min_events", 3}, {"max_events", 4},
                      {"context_length", 400}}},
          {"model", {{"layers", 1}, {"heads", 2}, {"width", 8}, {"ff_width", 16}, {"max_context", 404}}},
          {"sampler", {{"temperature", 1.5}, {"top_k", 10}, {"group_size", 2}, {"reasoning_budget", 4}}},
          {"train", {{"batch_size", 3}, {"lr", 1e-3}, {"total_steps", 2}, {"refresh_period", 1},
                     {"reward_cutoff", 20}}},
          {"latency", {{"catalog_sizes", {10, 20}}, {"reps", 3}, {"queries", 2}, {"warmup", 1}}}};
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
  fs::create_directories(dir);
  const auto p = dir / "config.in.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  const auto dir = scratch("usage");
  EXPECT_EQ(cli("", dir).code, 1);
  EXPECT_EQ(cli("frobnicate --config x.json", dir).code, 1);
  EXPECT_EQ(cli("train", dir).code, 1);
  const auto missing = cli("train --config " + (dir / "nope.json").string(), dir);
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("nope.json"), std::string::npos);
  EXPECT_EQ(cli("--help", dir).code, 0);
}

TEST(Cli, UnknownConfigKeyIsNamed) {
  const auto dir = scratch("unknown_key");
  auto j = tiny_config(dir / "run");
  j["train"]["learning_rate"] = 0.1;
  const auto r = cli("train --config " + write_config(dir, j).string(), dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("train.learning_rate"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "run" / "metrics.jsonl"));
}

TEST(Cli, InvalidValuesRejected) {
  const auto dir = scratch("invalid");
  const auto cfg = write_config(dir, tiny_config(dir / "run")).string();
  const auto bad = cli("train --config " + cfg + " --ablation no_everything", dir);
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("ablation"), std::string::npos);
  auto j = tiny_config(dir / "run");
  j["train"]["beta"] = 2.0;
  const auto beta = cli("train --config " + write_config(dir, j).string(), dir);
  EXPECT_EQ(beta.code, 1);
  EXPECT_NE(beta.err.find("train.beta"), std::string::npos);
}

TEST(Cli, PlotCurvesNeedsMetrics) {
  const auto dir = scratch("empty_run");
  const auto r = cli("plot-curves --config " + write_config(dir, tiny_config(dir / "run")).string(), dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("metrics"), std::string::npos);
}

TEST(Cli, EndToEnd) {
  const auto dir = scratch("e2e");
  const auto run = dir / "run";
  const auto cfg = write_config(dir, tiny_config(run)).string();

  ASSERT_EQ(cli("gen-data --config " + cfg, dir).code, 0);
  for (const char* f : {"catalog.jsonl", "train.jsonl", "val.jsonl", "test.jsonl"}) EXPECT_TRUE(fs::exists(run / "data" / f));

  const auto train = cli("train --config " + cfg, dir);
  ASSERT_EQ(train.code, 0) << train.err;
  EXPECT_TRUE(fs::exists(run / "config.json"));
  EXPECT_TRUE(fs::exists(run / "checkpoints" / "last.ckpt"));
  EXPECT_TRUE(fs::exists(run / "checkpoints" / "step_000002.ckpt"));
  EXPECT_FALSE(fs::exists(run / ".lock"));
  int train_lines = 0, val_lines = 0;
  std::istringstream metrics(slurp(run / "metrics.jsonl"));
  for (std::string line; std::getline(metrics, line);) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_FALSE(j.contains("wall_time_s"));
    if (j["kind"] == "train") ++train_lines;
    if (j["kind"] == "val") ++val_lines;
  }
  EXPECT_EQ(train_lines, 2);
  EXPECT_EQ(val_lines, 2);

  const auto eval = cli("eval --config " + cfg + " --checkpoint last", dir);
  ASSERT_EQ(eval.code, 0) << eval.err;
  const auto report = nlohmann::json::parse(slurp(run / "reports" / "eval_val.json"));
  EXPECT_LE(report["hr"]["5"].get<double>(), report["hr"]["10"].get<double>());
  EXPECT_LE(report["hr"]["10"].get<double>(), report["hr"]["20"].get<double>());

  EXPECT_EQ(cli("eval --config " + cfg + " --checkpoint " + (dir / "missing.ckpt").string(), dir).code, 1);

  const auto inspect = cli("inspect-trajectory --config " + cfg + " --checkpoint last", dir);
  ASSERT_EQ(inspect.code, 0) << inspect.err;
  EXPECT_NE(inspect.out.find("\"advantage\""), std::string::npos);

  const auto bench = cli("bench-latency --config " + cfg, dir);
  ASSERT_EQ(bench.code, 0) << bench.err;
  const auto lat = nlohmann::json::parse(slurp(run / "reports" / "latency.json"));
  EXPECT_EQ(lat["rows"].size(), 2u);

  ASSERT_EQ(cli("plot-curves --config " + cfg, dir).code, 0);
  const auto first = slurp(run / "reports" / "plots" / "val_ndcg.svg");
  ASSERT_EQ(cli("plot-curves --config " + cfg, dir).code, 0);
  EXPECT_EQ(slurp(run / "reports" / "plots" / "val_ndcg.svg"), first);
  EXPECT_FALSE(first.empty());
}

TEST(Cli, LockedRunDirectoryRefused) {
  const auto dir = scratch("locked");
  const auto run = dir / "run";
  fs::create_directories(run);
  std::ofstream(run / ".lock") << "";
  const auto r = cli("gen-data --config " + write_config(dir, tiny_config(run)).string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("locked"), std::string::npos);
}

TEST(Cli, StrictRunsAreByteIdentical) {
  const auto dir = scratch("strict");
  auto a = tiny_config(dir / "a"), b = tiny_config(dir / "b");
  ASSERT_EQ(cli("train --config " + write_config(dir / "ca", a).string(), dir).code, 0);
  ASSERT_EQ(cli("train --config " + write_config(dir / "cb", b).string(), dir).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "metrics.jsonl"), slurp(dir / "b" / "metrics.jsonl"));
  EXPECT_EQ(slurp(dir / "a" / "checkpoints" / "last.ckpt"), slurp(dir / "b" / "checkpoints" / "last.ckpt"));
  EXPECT_EQ(cli("train --config " + write_config(dir / "cb", b).string() + " --seed 4", dir).code, 0);
  EXPECT_NE(slurp(dir / "a" / "checkpoints" / "last.ckpt"), slurp(dir / "b" / "checkpoints" / "last.ckpt"));
}
