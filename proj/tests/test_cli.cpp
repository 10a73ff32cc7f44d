// Runs the imdiff binary end to end on a tiny synthetic dataset.
#include "imdiff/checkpoint.hpp"
#include "imdiff/experiment.hpp"
#include "imdiff/synthetic.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <sstream>

using namespace imdiff;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

RunResult run_cli(const std::string& args, const std::string& env = "") {
  static int counter = 0;
  const fs::path err_file = fs::temp_directory_path() / ("imdiff_cli_err_" + std::to_string(::getpid()) + "_" +
                                                          std::to_string(counter++));
  const std::string cmd = env + " " + IMDIFF_CLI_PATH + " " + args + " 2>" + err_file.string();
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = read_text(err_file);
  fs::remove(err_file);
  return r;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    SyntheticSpec spec;
    spec.train_length = 400;
    spec.test_length = 240;
    spec.n_events = 3;
    write_dataset_dir(dir_ / "toy", make_synthetic(spec));
    write_text(dir_ / "cfg.json", R"({
      "dataset": {"path": ")" + (dir_ / "toy").string() + R"("},
      "window": 20,
      "mask": {"n_masked": 2, "n_unmasked": 2},
      "schedule": {"steps": 10},
      "model": {"n_blocks": 1, "hidden_dim": 8, "n_heads": 2, "step_embed_dim": 8, "time_embed_dim": 8,
                "feature_embed_dim": 2, "ff_dim": 8},
      "train": {"epochs": 5, "batch_size": 4, "stride": 20},
      "ensemble": {"xi": 2},
      "seeds": [0, 1],
      "out": ")" + (dir_ / "runs").string() + R"("
    })");
  }

  std::string base() const { return "--config " + (dir_ / "cfg.json").string(); }
  fs::path runs(const std::string& rel) const { return dir_ / "runs" / "toy" / rel; }

  TempDir dir_;
};

}  // namespace

TEST_F(CliTest, PrepareWritesSummary) {
  const RunResult r = run_cli(base() + " prepare");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("train_length=400"), std::string::npos);
  EXPECT_NE(r.out.find("events=3"), std::string::npos);
  EXPECT_TRUE(fs::exists(runs("stats.json")));
  EXPECT_NE(read_text(runs("summary.json")).find("\"features\": 3"), std::string::npos);
}

TEST_F(CliTest, TrainDetectEvaluate) {
  RunResult r = run_cli(base() + " train");
  ASSERT_EQ(r.code, 0) << r.err;
  for (int seed : {0, 1}) {
    const fs::path run = runs("imputation/seed" + std::to_string(seed));
    const auto log = lines_of(read_text(run / "train_log.csv"));
    ASSERT_EQ(log.size(), 6u);
    EXPECT_EQ(log[0], "epoch,loss,seconds");
    EXPECT_EQ(log[5].rfind("4,", 0), 0u);
    const Checkpoint ckpt = load_checkpoint(run / "final.ckpt");
    EXPECT_EQ(ckpt.seed, static_cast<std::uint64_t>(seed));
    EXPECT_EQ(ckpt.epochs_done, 5);
    EXPECT_TRUE(fs::exists(run / "best.ckpt"));
  }

  r = run_cli(base() + " detect");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto pred = lines_of(read_text(runs("imputation/seed0/predictions.csv")));
  ASSERT_EQ(pred.size(), 241u);
  EXPECT_EQ(pred[0], "timestamp,score,votes,label");

  r = run_cli(base() + " evaluate");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto out = lines_of(r.out);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0], kMetricsHeader);
  const auto agg = lines_of(read_text(runs("imputation/metrics.csv")));
  ASSERT_EQ(agg.size(), 5u);
  EXPECT_EQ(agg[0], kMetricsHeader);
  EXPECT_NE(agg[3].find(",mean"), std::string::npos);
  EXPECT_NE(agg[4].find(",std"), std::string::npos);
  EXPECT_TRUE(fs::exists(runs("imputation/seed1/plot.svg")));

  // Same seed, same predictions.
  const std::string before = read_text(runs("imputation/seed0/predictions.csv"));
  ASSERT_EQ(run_cli(base() + " --seed 0 detect").code, 0);
  EXPECT_EQ(read_text(runs("imputation/seed0/predictions.csv")), before);
}

TEST_F(CliTest, ResumeContinuesEpochs) {
  ASSERT_EQ(run_cli(base() + " --seed 0 train", "IMDIFF_TRAIN__EPOCHS=2").code, 0);
  ASSERT_EQ(lines_of(read_text(runs("imputation/seed0/train_log.csv"))).size(), 3u);
  const RunResult r = run_cli(base() + " --seed 0 train --resume", "IMDIFF_TRAIN__EPOCHS=4");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto log = lines_of(read_text(runs("imputation/seed0/train_log.csv")));
  ASSERT_EQ(log.size(), 5u);
  EXPECT_EQ(log[3].rfind("2,", 0), 0u);
  EXPECT_EQ(load_checkpoint(runs("imputation/seed0/final.ckpt")).epochs_done, 4);
}

TEST_F(CliTest, FailuresCarryCategories) {
  RunResult r = run_cli("--config " + (dir_ / "nope.json").string() + " prepare");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("error: category=io"), std::string::npos);

  r = run_cli(base() + " prepare", "IMDIFF_WINDOW=21");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("category=config"), std::string::npos);

  r = run_cli(base() + " --bogus prepare");
  EXPECT_EQ(r.code, 2);

  r = run_cli(base() + " --seed 0 detect");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("checkpoint not found"), std::string::npos);

  write_text(dir_ / "toy" / "test_label.csv", "label\n0\n2\n");
  r = run_cli(base() + " prepare");
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("category=data"), std::string::npos);

  r = run_cli("");
  EXPECT_EQ(r.code, 2);
}

TEST_F(CliTest, SynthWritesDataset) {
  const RunResult r = run_cli("--out " + (dir_ / "syn").string() + " synth --train-length 300 --test-length 200 --events 2");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines_of(read_text(dir_ / "syn" / "test_label.csv")).size(), 201u);
}
