#pragma once

#include "imdiff/checkpoint.hpp"
#include "imdiff/config.hpp"
#include "imdiff/dataset.hpp"
#include "imdiff/detector.hpp"
#include "imdiff/metrics.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace imdiff {

// Output layout under cfg.out:
//   <dataset>/stats.json, summary.json                 (prepare)
//   <dataset>/<variant>/seed<s>/final.ckpt, best.ckpt,
//                               train_log.csv          (train)
//   <dataset>/<variant>/seed<s>/predictions.csv        (detect)
//   <dataset>/<variant>/seed<s>/metrics.csv, plot.svg  (evaluate)
//   <dataset>/<variant>/metrics.csv                    (evaluate, all seeds + mean/std)
//   <dataset>/ablation.csv                             (ablate)
std::filesystem::path dataset_dir(const ExperimentConfig& cfg);
std::filesystem::path run_dir(const ExperimentConfig& cfg, std::string_view variant, std::uint64_t seed);

struct DatasetSummary {
  Eigen::Index train_length = 0;
  Eigen::Index test_length = 0;
  Eigen::Index features = 0;
  double anomaly_rate = 0.0;
  int n_events = 0;
  std::size_t replaced_cells = 0;
};

DatasetSummary summarize(const DatasetSplits& splits);

// Model/training settings for `variant` with everything else from cfg.
DenoiserConfig variant_model_config(const ExperimentConfig& cfg, Variant variant, Eigen::Index features);
TrainConfig variant_train_config(const ExperimentConfig& cfg, Variant variant, std::uint64_t seed);

using EpochCallback = std::function<void(const TrainRecord&, bool improved, const Checkpoint&)>;

// Trains the model `variant` needs on the training split, continuing from
// `resume_from` when given. The callback sees a snapshot after every epoch.
Checkpoint fit_variant(const ExperimentConfig& cfg, Variant variant, const RawSeries& train, std::uint64_t seed,
                       const std::optional<Checkpoint>& resume_from = std::nullopt, const EpochCallback& on_epoch = {});

// Mean score on anomalous timestamps minus mean score on normal ones.
double error_gap(const VectorXd& score, const LabelVector& truth);

DatasetSummary cmd_prepare(const ExperimentConfig& cfg);

// Returns the final checkpoint path. With `resume`, continues from an
// existing final.ckpt and appends to train_log.csv.
std::filesystem::path cmd_train(const ExperimentConfig& cfg, std::uint64_t seed, bool resume);

// Uses `checkpoint` or the run's final.ckpt. Returns the predictions path.
std::filesystem::path cmd_detect(const ExperimentConfig& cfg, std::uint64_t seed,
                                 const std::filesystem::path& checkpoint = {});

struct SeedMetrics {
  std::uint64_t seed = 0;
  MetricsReport report;
};

// Scores the predictions of every seed in cfg.seeds (or `predictions` for a
// single seed) and writes per-run and aggregate metrics CSVs.
std::vector<SeedMetrics> cmd_evaluate(const ExperimentConfig& cfg, const std::filesystem::path& predictions = {});

struct AblationRow {
  Variant variant = Variant::imputation;
  std::string status = "ok";  // or the error message
  std::vector<SeedMetrics> runs;
};

// Trains (reusing finished checkpoints), detects and evaluates every variant
// over the shared seed list. A failing variant is recorded and skipped.
std::vector<AblationRow> cmd_ablate(const ExperimentConfig& cfg);

// CSV helpers shared with the CLI.
void write_predictions(const std::filesystem::path& path, const DetectionResult& result);

struct Predictions {
  VectorXd score;
  Eigen::VectorXi votes;
  LabelVector labels;
};
Predictions read_predictions(const std::filesystem::path& path);

inline constexpr std::string_view kMetricsHeader = "dataset,mode,P,R,F1,F1_raw,R_AUC_PR,R_AUC_ROC,ADD,seed";

// Score, ground-truth events and votes over time.
void write_plot_svg(const std::filesystem::path& path, const Predictions& pred, const LabelVector& truth,
                    const std::string& title);

}  // namespace imdiff
