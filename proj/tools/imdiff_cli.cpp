// imdiff: prepare | train | detect | evaluate | ablate | synth
//
// Configuration precedence: --config file < IMDIFF_* environment < flags.
// Failures print one line `error: category=<name> message=<text>` on stderr
// and exit with the category's code (config 2, io 3, data 4, model 5,
// numeric 6, internal 1).

#include "imdiff/config.hpp"
#include "imdiff/error.hpp"
#include "imdiff/experiment.hpp"
#include "imdiff/synthetic.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>

extern char** environ;

namespace {

using namespace imdiff;

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string out;
  std::string dataset;
  std::string mode;
};

int fail(std::string_view category, std::string message, int code) {
  std::replace(message.begin(), message.end(), '\n', ' ');
  std::cerr << "error: category=" << category << " message=" << message << '\n';
  return code;
}

ExperimentConfig resolve(const GlobalFlags& g) {
  ExperimentConfig cfg = load_config(g.config, collect_env(environ));
  if (g.seed) cfg.seeds = {*g.seed};
  if (g.workers) cfg.workers = *g.workers;
  if (!g.out.empty()) cfg.out = g.out;
  if (!g.dataset.empty()) cfg.dataset = g.dataset;
  if (!g.mode.empty()) cfg.mode = variant_from_string(g.mode);
  cfg.validate();
  if (cfg.dataset.empty()) throw Error(ErrorCategory::config, "no dataset given (dataset.path or --dataset)");
  return cfg;
}

void print_metrics(const ExperimentConfig& cfg, std::string_view mode, const std::vector<SeedMetrics>& runs) {
  std::cout << kMetricsHeader << '\n';
  for (const auto& r : runs)
    std::printf("%s,%s,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.2f,%llu\n", cfg.name().c_str(), std::string(mode).c_str(),
                r.report.precision, r.report.recall, r.report.f1, r.report.f1_raw, r.report.r_auc_pr,
                r.report.r_auc_roc, r.report.add, static_cast<unsigned long long>(r.seed));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Imputation-based diffusion anomaly detection for multivariate time series"};
  app.require_subcommand(1);
  GlobalFlags g;
  app.add_option("--config", g.config, "JSON experiment config");
  app.add_option("--seed", g.seed, "Run a single seed instead of the configured list");
  app.add_option("--workers", g.workers, "Window-parallel worker threads for detection")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--dataset", g.dataset, "Dataset directory (train.csv, test.csv, test_label.csv)");
  app.add_option("--mode", g.mode, "Variant: imputation, forecasting, reconstruction, non_ensemble, conditional, "
                                   "random_mask, no_spatial, no_temporal");

  auto* prepare = app.add_subcommand("prepare", "Validate the dataset and write stats.json/summary.json");
  auto* train = app.add_subcommand("train", "Train a model per seed; writes checkpoints and train_log.csv");
  bool resume = false;
  train->add_flag("--resume", resume, "Continue from the run's final.ckpt");
  auto* detect = app.add_subcommand("detect", "Ensemble detection; writes predictions.csv per seed");
  std::string checkpoint;
  detect->add_option("--checkpoint", checkpoint, "Checkpoint to use instead of the run's final.ckpt");
  auto* evaluate = app.add_subcommand("evaluate", "Score predictions; writes metrics.csv and plot.svg");
  std::string predictions;
  evaluate->add_option("--predictions", predictions, "Predictions CSV (single seed)");
  auto* ablate = app.add_subcommand("ablate", "Run every variant over the shared seeds; writes ablation.csv");
  auto* synth = app.add_subcommand("synth", "Write the synthetic benchmark dataset to --out");
  SyntheticSpec spec;
  synth->add_option("--synth-seed", spec.seed, "Generator seed");
  synth->add_option("--train-length", spec.train_length);
  synth->add_option("--test-length", spec.test_length);
  synth->add_option("--events", spec.n_events);

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("config", e.what(), static_cast<int>(ErrorCategory::config));
  }

  try {
    if (synth->parsed()) {
      if (g.out.empty()) throw Error(ErrorCategory::config, "synth needs --out <dir>");
      const SyntheticData data = make_synthetic(spec);
      write_dataset_dir(g.out, data);
      std::cout << "wrote " << g.out << " (" << data.events.size() << " events)\n";
      return 0;
    }
    const ExperimentConfig cfg = resolve(g);
    if (prepare->parsed()) {
      const DatasetSummary s = cmd_prepare(cfg);
      std::printf("dataset=%s train_length=%lld test_length=%lld features=%lld anomaly_rate=%.6f events=%d\n",
                  cfg.name().c_str(), static_cast<long long>(s.train_length), static_cast<long long>(s.test_length),
                  static_cast<long long>(s.features), s.anomaly_rate, s.n_events);
    } else if (train->parsed()) {
      for (std::uint64_t seed : cfg.seeds) std::cout << cmd_train(cfg, seed, resume).string() << '\n';
    } else if (detect->parsed()) {
      if (!checkpoint.empty() && cfg.seeds.size() != 1)
        throw Error(ErrorCategory::config, "--checkpoint needs a single --seed");
      for (std::uint64_t seed : cfg.seeds) std::cout << cmd_detect(cfg, seed, checkpoint).string() << '\n';
    } else if (evaluate->parsed()) {
      print_metrics(cfg, to_string(cfg.mode), cmd_evaluate(cfg, predictions));
    } else if (ablate->parsed()) {
      const auto rows = cmd_ablate(cfg);
      std::cout << kMetricsHeader << '\n';
      bool any_ok = false;
      for (const auto& row : rows) {
        if (row.status != "ok") {
          std::cout << "# " << to_string(row.variant) << " failed: " << row.status << '\n';
          continue;
        }
        any_ok = true;
        print_metrics(cfg, to_string(row.variant), row.runs);
      }
      if (!any_ok) throw Error(ErrorCategory::model, "every ablation variant failed");
    }
  } catch (const Error& e) {
    return fail(to_string(e.category()), e.what(), static_cast<int>(e.category()));
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
