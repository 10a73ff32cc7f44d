#include "imdiff/experiment.hpp"

#include "imdiff/error.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace imdiff {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCategory::io, "cannot create " + dir.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode);
  if (!out) throw Error(ErrorCategory::io, "cannot write " + path.string());
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

const RawSeries& require_labels(const RawSeries& test) {
  if (!test.labels) throw Error(ErrorCategory::data, test.name + " has no labels");
  return test;
}

std::string metrics_row(const std::string& dataset, std::string_view mode, const MetricsReport& r,
                        const std::string& seed) {
  std::ostringstream row;
  row << dataset << ',' << mode << ',' << fmt(r.precision) << ',' << fmt(r.recall) << ',' << fmt(r.f1) << ','
      << fmt(r.f1_raw) << ',' << fmt(r.r_auc_pr) << ',' << fmt(r.r_auc_roc) << ',' << fmt(r.add) << ',' << seed;
  return row.str();
}

// Field-wise mean and sample standard deviation over runs.
std::pair<MetricsReport, MetricsReport> mean_std(const std::vector<SeedMetrics>& runs) {
  auto fields = [](const MetricsReport& r) {
    return std::array<double, 7>{r.precision, r.recall, r.f1, r.f1_raw, r.r_auc_pr, r.r_auc_roc, r.add};
  };
  auto assign = [](MetricsReport& r, const std::array<double, 7>& v) {
    r.precision = v[0], r.recall = v[1], r.f1 = v[2], r.f1_raw = v[3], r.r_auc_pr = v[4], r.r_auc_roc = v[5],
    r.add = v[6];
  };
  std::array<double, 7> mean{}, var{};
  const double n = static_cast<double>(runs.size());
  for (const auto& s : runs) {
    const auto f = fields(s.report);
    for (std::size_t i = 0; i < 7; ++i) mean[i] += f[i] / n;
  }
  for (const auto& s : runs) {
    const auto f = fields(s.report);
    for (std::size_t i = 0; i < 7; ++i) var[i] += (f[i] - mean[i]) * (f[i] - mean[i]);
  }
  for (auto& v : var) v = runs.size() > 1 ? std::sqrt(v / (n - 1)) : 0.0;
  MetricsReport m, s;
  assign(m, mean);
  assign(s, var);
  if (!runs.empty()) m.n_events = s.n_events = runs.front().report.n_events;
  return {m, s};
}

bool checkpoint_finished(const fs::path& path, int epochs) {
  if (!fs::exists(path)) return false;
  return load_checkpoint(path).epochs_done >= epochs;
}

fs::path train_run(const ExperimentConfig& cfg, Variant variant, std::uint64_t seed, bool resume,
                   const DatasetSplits& splits) {
  const VariantSpec spec = variant_spec(variant);
  const fs::path dir = run_dir(cfg, spec.trained_variant, seed);
  ensure_dir(dir);
  const fs::path final_path = dir / "final.ckpt";
  const fs::path log_path = dir / "train_log.csv";

  std::optional<Checkpoint> previous;
  if (resume && fs::exists(final_path)) previous = load_checkpoint(final_path);
  std::ofstream log = previous ? open_out(log_path, std::ios::app) : open_out(log_path);
  if (!previous) log << "epoch,loss,seconds\n";

  const std::string tag = cfg.name() + "/" + std::string(spec.trained_variant) + " seed=" + std::to_string(seed);
  auto on_epoch = [&](const TrainRecord& rec, bool improved, const Checkpoint& snapshot) {
    log << rec.epoch << ',' << rec.loss << ',' << rec.seconds << '\n';
    log.flush();
    if (improved) save_checkpoint(dir / "best.ckpt", snapshot);
    save_checkpoint(final_path, snapshot);
    std::cerr << "[train] " << tag << " epoch " << rec.epoch + 1 << '/' << cfg.train.epochs << " loss=" << rec.loss
              << " (" << fmt(rec.seconds) << "s)\n";
  };
  const Checkpoint ckpt = fit_variant(cfg, variant, splits.train, seed, previous, on_epoch);
  save_checkpoint(final_path, ckpt);
  return final_path;
}

fs::path detect_run(const ExperimentConfig& cfg, Variant variant, std::uint64_t seed, const fs::path& checkpoint,
                    const DatasetSplits& splits) {
  const fs::path ckpt_path =
      checkpoint.empty() ? run_dir(cfg, variant_spec(variant).trained_variant, seed) / "final.ckpt" : checkpoint;
  if (!fs::exists(ckpt_path)) throw Error(ErrorCategory::io, "checkpoint not found: " + ckpt_path.string());
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  if (ckpt.model.n_features != splits.test.features())
    throw Error(ErrorCategory::data, "checkpoint expects K=" + std::to_string(ckpt.model.n_features) +
                                         " but the test split has K=" + std::to_string(splits.test.features()));
  const DetectionResult result = detect_variant(variant, ckpt, splits.test, cfg.ensemble, seed, cfg.workers);
  const fs::path dir = run_dir(cfg, to_string(variant), seed);
  ensure_dir(dir);
  write_predictions(dir / "predictions.csv", result);
  return dir / "predictions.csv";
}

std::vector<SeedMetrics> evaluate_runs(const ExperimentConfig& cfg, Variant variant,
                                       const std::vector<std::uint64_t>& seeds, const fs::path& predictions,
                                       const DatasetSplits& splits) {
  const LabelVector& truth = *require_labels(splits.test).labels;
  const std::string mode(to_string(variant));
  std::vector<SeedMetrics> runs;
  for (std::uint64_t seed : seeds) {
    const fs::path dir = run_dir(cfg, mode, seed);
    const fs::path pred_path = predictions.empty() ? dir / "predictions.csv" : predictions;
    const Predictions pred = read_predictions(pred_path);
    if (pred.labels.size() != truth.size())
      throw Error(ErrorCategory::data, pred_path.string() + " has " + std::to_string(pred.labels.size()) +
                                           " rows but the labels have " + std::to_string(truth.size()));
    SeedMetrics sm{seed, evaluate_detection(pred.labels, pred.score, truth)};
    ensure_dir(dir);
    std::ofstream out = open_out(dir / "metrics.csv");
    out << kMetricsHeader << '\n' << metrics_row(cfg.name(), mode, sm.report, std::to_string(seed)) << '\n';
    if (cfg.plot) write_plot_svg(dir / "plot.svg", pred, truth, cfg.name() + " " + mode + " seed " + std::to_string(seed));
    runs.push_back(sm);
  }
  const auto [mean, sd] = mean_std(runs);
  const fs::path agg = dataset_dir(cfg) / mode / "metrics.csv";
  ensure_dir(agg.parent_path());
  std::ofstream out = open_out(agg);
  out << kMetricsHeader << '\n';
  for (const auto& r : runs) out << metrics_row(cfg.name(), mode, r.report, std::to_string(r.seed)) << '\n';
  out << metrics_row(cfg.name(), mode, mean, "mean") << '\n' << metrics_row(cfg.name(), mode, sd, "std") << '\n';
  return runs;
}

}  // namespace

fs::path dataset_dir(const ExperimentConfig& cfg) { return cfg.out / cfg.name(); }

fs::path run_dir(const ExperimentConfig& cfg, std::string_view variant, std::uint64_t seed) {
  return dataset_dir(cfg) / std::string(variant) / ("seed" + std::to_string(seed));
}

DatasetSummary summarize(const DatasetSplits& splits) {
  DatasetSummary s;
  s.train_length = splits.train.length();
  s.test_length = splits.test.length();
  s.features = splits.train.features();
  s.replaced_cells = splits.train.replaced_cells + splits.test.replaced_cells;
  if (splits.test.labels) {
    s.anomaly_rate = splits.test.labels->cast<double>().mean();
    s.n_events = static_cast<int>(events_from_labels(*splits.test.labels).size());
  }
  return s;
}

DenoiserConfig variant_model_config(const ExperimentConfig& cfg, Variant variant, Eigen::Index features) {
  const VariantSpec spec = variant_spec(variant);
  DenoiserConfig m = cfg.model;
  m.steps = cfg.schedule.steps;
  m.n_features = static_cast<int>(features);
  m.use_spatial = spec.use_spatial;
  m.use_temporal = spec.use_temporal;
  return m;
}

TrainConfig variant_train_config(const ExperimentConfig& cfg, Variant variant, std::uint64_t seed) {
  const VariantSpec spec = variant_spec(variant);
  TrainConfig t = cfg.train;
  t.seed = seed;
  t.mask = cfg.mask;
  t.mask.scheme = spec.scheme;
  t.conditioning = spec.conditioning;
  return t;
}

Checkpoint fit_variant(const ExperimentConfig& cfg, Variant variant, const RawSeries& train_split, std::uint64_t seed,
                       const std::optional<Checkpoint>& resume_from, const EpochCallback& on_epoch) {
  cfg.validate();
  const VariantSpec spec = variant_spec(variant);
  Checkpoint ckpt;
  ckpt.model = variant_model_config(cfg, variant, train_split.features());
  ckpt.schedule = cfg.schedule.build();
  ckpt.stats = fit_normalizer(train_split);
  ckpt.window = cfg.window;
  ckpt.seed = seed;
  ckpt.variant = std::string(spec.trained_variant);
  const TrainConfig tcfg = variant_train_config(cfg, variant, seed);
  ckpt.mask = tcfg.mask;
  ckpt.conditioning = tcfg.conditioning;

  std::optional<Denoiser<float>> model;
  AdamState<float> adam;
  TrainHooks hooks;
  if (resume_from) {
    const Checkpoint& prev = *resume_from;
    if (!(prev.model == ckpt.model) || prev.window != ckpt.window || prev.variant != ckpt.variant ||
        prev.seed != seed || prev.schedule.beta != ckpt.schedule.beta)
      throw Error(ErrorCategory::model, "cannot resume: checkpoint was trained with a different configuration");
    model.emplace(prev.model, prev.params);
    model->training_steps = prev.training_steps;
    if (prev.adam) adam = *prev.adam;
    ckpt.stats = prev.stats;
    hooks.start_epoch = prev.epochs_done;
    hooks.best_loss = prev.best_loss;
    ckpt.best_loss = prev.best_loss;
    ckpt.epochs_done = prev.epochs_done;
  } else {
    Rng init_rng(derive_seed(seed, 0x1417));
    model.emplace(ckpt.model, init_rng);
  }

  const Eigen::Index stride = tcfg.train_stride > 0 ? tcfg.train_stride : cfg.window;
  const WindowSet windows = windowize_strided(train_split, ckpt.stats, cfg.window, stride);

  auto snapshot = [&](int epochs_done) {
    ckpt.params = model->parameters();
    ckpt.adam = adam;
    ckpt.training_steps = model->training_steps;
    ckpt.epochs_done = epochs_done;
  };
  hooks.on_epoch = [&](const TrainRecord& rec, bool improved) {
    if (improved) ckpt.best_loss = rec.loss;
    snapshot(rec.epoch + 1);
    if (on_epoch) on_epoch(rec, improved, ckpt);
  };
  train<float>(*model, adam, windows.windows, tcfg, ckpt.schedule, hooks);
  snapshot(std::max(ckpt.epochs_done, cfg.train.epochs));
  return ckpt;
}

double error_gap(const VectorXd& score, const LabelVector& truth) {
  if (score.size() != truth.size()) throw Error(ErrorCategory::data, "error_gap: length mismatch");
  double abn = 0, nor = 0;
  Eigen::Index n_abn = 0, n_nor = 0;
  for (Eigen::Index l = 0; l < score.size(); ++l) {
    if (truth(l)) {
      abn += score(l);
      ++n_abn;
    } else {
      nor += score(l);
      ++n_nor;
    }
  }
  if (n_abn == 0 || n_nor == 0) throw Error(ErrorCategory::data, "error_gap needs both normal and anomalous timestamps");
  return abn / static_cast<double>(n_abn) - nor / static_cast<double>(n_nor);
}

DatasetSummary cmd_prepare(const ExperimentConfig& cfg) {
  cfg.validate();
  const DatasetSplits splits = load_dataset_dir(cfg.dataset);
  if (splits.train.length() < cfg.window || splits.test.length() < cfg.window)
    throw Error(ErrorCategory::data, "splits must be at least one window (" + std::to_string(cfg.window) + ") long");
  const NormStats stats = fit_normalizer(splits.train);
  const DatasetSummary s = summarize(splits);
  const fs::path dir = dataset_dir(cfg);
  ensure_dir(dir);

  json js;
  js["center"] = std::vector<double>(stats.center.data(), stats.center.data() + stats.center.size());
  js["scale"] = std::vector<double>(stats.scale.data(), stats.scale.data() + stats.scale.size());
  open_out(dir / "stats.json") << js.dump(2) << '\n';

  json sum = {{"dataset", cfg.name()},
              {"train_length", s.train_length},
              {"test_length", s.test_length},
              {"features", s.features},
              {"anomaly_rate", s.anomaly_rate},
              {"events", s.n_events},
              {"replaced_cells", s.replaced_cells}};
  open_out(dir / "summary.json") << sum.dump(2) << '\n';
  open_out(dir / "config.json") << to_json_string(cfg);
  return s;
}

fs::path cmd_train(const ExperimentConfig& cfg, std::uint64_t seed, bool resume) {
  cfg.validate();
  return train_run(cfg, cfg.mode, seed, resume, load_dataset_dir(cfg.dataset));
}

fs::path cmd_detect(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& checkpoint) {
  cfg.validate();
  return detect_run(cfg, cfg.mode, seed, checkpoint, load_dataset_dir(cfg.dataset));
}

std::vector<SeedMetrics> cmd_evaluate(const ExperimentConfig& cfg, const fs::path& predictions) {
  cfg.validate();
  if (!predictions.empty() && cfg.seeds.size() != 1)
    throw Error(ErrorCategory::config, "an explicit predictions file needs exactly one seed");
  return evaluate_runs(cfg, cfg.mode, cfg.seeds, predictions, load_dataset_dir(cfg.dataset));
}

std::vector<AblationRow> cmd_ablate(const ExperimentConfig& cfg) {
  cfg.validate();
  const DatasetSplits splits = load_dataset_dir(cfg.dataset);
  std::vector<AblationRow> rows;
  for (Variant v : kAllVariants) {
    AblationRow row;
    row.variant = v;
    try {
      for (std::uint64_t seed : cfg.seeds) {
        const fs::path ckpt = run_dir(cfg, variant_spec(v).trained_variant, seed) / "final.ckpt";
        if (!checkpoint_finished(ckpt, cfg.train.epochs)) train_run(cfg, v, seed, true, splits);
        detect_run(cfg, v, seed, {}, splits);
      }
      row.runs = evaluate_runs(cfg, v, cfg.seeds, {}, splits);
    } catch (const Error& e) {
      row.status = std::string(to_string(e.category())) + ": " + e.what();
      row.runs.clear();
      std::cerr << "[ablate] variant " << to_string(v) << " failed: " << row.status << '\n';
    }
    rows.push_back(std::move(row));
  }

  std::ofstream out = open_out(dataset_dir(cfg) / "ablation.csv");
  out << "variant,status,P,R,F1,F1_raw,R_AUC_PR,R_AUC_ROC,ADD,F1_std,seeds\n";
  for (const auto& row : rows) {
    out << to_string(row.variant) << ',' << (row.status == "ok" ? "ok" : "failed");
    if (row.runs.empty()) {
      out << ",,,,,,,,,," << '\n';
      continue;
    }
    const auto [m, sd] = mean_std(row.runs);
    out << ',' << fmt(m.precision) << ',' << fmt(m.recall) << ',' << fmt(m.f1) << ',' << fmt(m.f1_raw) << ','
        << fmt(m.r_auc_pr) << ',' << fmt(m.r_auc_roc) << ',' << fmt(m.add) << ',' << fmt(sd.f1) << ','
        << row.runs.size() << '\n';
  }
  return rows;
}

void write_predictions(const fs::path& path, const DetectionResult& result) {
  std::ofstream out = open_out(path);
  out << "timestamp,score,votes,label\n";
  char buf[64];
  for (Eigen::Index l = 0; l < result.labels.size(); ++l) {
    std::snprintf(buf, sizeof buf, "%.9g", result.score(l));
    out << l << ',' << buf << ',' << result.votes(l) << ',' << result.labels(l) << '\n';
  }
}

Predictions read_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::io, "missing predictions file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("timestamp,score,votes,label", 0) != 0)
    throw Error(ErrorCategory::data, path.string() + ": expected header timestamp,score,votes,label");
  std::vector<double> score;
  std::vector<int> votes, labels;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    long long ts = 0;
    double s = 0;
    int v = 0, y = 0;
    if (std::sscanf(line.c_str(), "%lld,%lf,%d,%d", &ts, &s, &v, &y) != 4 ||
        ts != static_cast<long long>(score.size()))
      throw Error(ErrorCategory::data, path.string() + ": malformed row " + std::to_string(score.size() + 2));
    score.push_back(s);
    votes.push_back(v);
    labels.push_back(y);
  }
  Predictions p;
  p.score = Eigen::Map<const VectorXd>(score.data(), static_cast<Eigen::Index>(score.size()));
  p.votes = Eigen::Map<const Eigen::VectorXi>(votes.data(), static_cast<Eigen::Index>(votes.size()));
  p.labels = Eigen::Map<const LabelVector>(labels.data(), static_cast<Eigen::Index>(labels.size()));
  return p;
}

void write_plot_svg(const fs::path& path, const Predictions& pred, const LabelVector& truth, const std::string& title) {
  constexpr double width = 1200, panel = 120, margin = 30;
  const Eigen::Index L = pred.score.size();
  if (L == 0) return;
  const double dx = (width - 2 * margin) / static_cast<double>(std::max<Eigen::Index>(L - 1, 1));
  const double smax = std::max(pred.score.maxCoeff(), 1e-12);
  const double vmax = std::max(pred.votes.maxCoeff(), 1);
  auto x = [&](Eigen::Index l) { return margin + dx * static_cast<double>(l); };

  std::ofstream out = open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << 2 * panel + 3 * margin
      << "\">\n<text x=\"" << margin << "\" y=\"18\" font-size=\"13\">" << title << "</text>\n";
  for (const Event& e : events_from_labels(truth))
    out << "<rect x=\"" << x(e.start) << "\" y=\"" << margin << "\" width=\"" << std::max(dx * e.length(), 1.0)
        << "\" height=\"" << 2 * panel + margin << "\" fill=\"#f4b6b6\"/>\n";
  auto polyline = [&](auto value, double top, const char* colour) {
    out << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1\" points=\"";
    for (Eigen::Index l = 0; l < L; ++l) out << x(l) << ',' << top + panel * (1.0 - value(l)) << ' ';
    out << "\"/>\n";
  };
  polyline([&](Eigen::Index l) { return pred.score(l) / smax; }, margin, "#1f4e9c");
  polyline([&](Eigen::Index l) { return pred.votes(l) / vmax; }, 2 * margin + panel, "#333333");
  for (Eigen::Index l = 0; l < L; ++l)
    if (pred.labels(l))
      out << "<rect x=\"" << x(l) << "\" y=\"" << 2 * margin + 2 * panel - 6 << "\" width=\"" << std::max(dx, 1.0)
          << "\" height=\"6\" fill=\"#c0392b\"/>\n";
  out << "</svg>\n";
}

}  // namespace imdiff
