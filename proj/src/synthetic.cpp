#include "imdiff/synthetic.hpp"

#include "imdiff/error.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

namespace imdiff {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double clean_value(Eigen::Index l, Eigen::Index k) {
  const double x = static_cast<double>(l);
  switch (k) {
    case 0: return std::sin(kTwoPi * x / 50.0);
    case 1: return 0.8 * std::sin(kTwoPi * x / 50.0 + 0.4);
    default: return 0.6 * std::cos(kTwoPi * x / 80.0) + 0.3 * std::sin(kTwoPi * x / 25.0);
  }
}

MatrixXd clean_block(Eigen::Index offset, Eigen::Index length, double noise, Rng& rng) {
  std::normal_distribution<double> n01;
  MatrixXd x(length, 3);
  for (Eigen::Index l = 0; l < length; ++l)
    for (Eigen::Index k = 0; k < 3; ++k) x(l, k) = clean_value(offset + l, k) + noise * n01(rng);
  return x;
}

}  // namespace

SyntheticData make_synthetic(const SyntheticSpec& spec) {
  if (spec.n_events < 0) throw Error(ErrorCategory::config, "synthetic n_events must be >= 0");
  if (spec.train_length < 2 || spec.test_length < 2)
    throw Error(ErrorCategory::config, "synthetic splits need at least 2 rows");
  const Eigen::Index usable = spec.test_length - spec.clean_prefix;
  const Eigen::Index slot = spec.n_events > 0 ? usable / spec.n_events : 0;
  if (spec.n_events > 0 && slot < 45)
    throw Error(ErrorCategory::config, "synthetic test split too short for " + std::to_string(spec.n_events) +
                                           " events");

  Rng rng(spec.seed);
  SyntheticData data;
  data.train.values = clean_block(0, spec.train_length, spec.noise, rng);
  data.train.name = "synthetic/train";
  data.test.values = clean_block(spec.train_length, spec.test_length, spec.noise, rng);
  data.test.name = "synthetic/test";
  LabelVector labels = LabelVector::Zero(spec.test_length);

  std::uniform_int_distribution<int> feature_pick(0, 2);
  std::bernoulli_distribution sign_pick(0.5);
  for (int i = 0; i < spec.n_events; ++i) {
    InjectedEvent ev;
    ev.kind = static_cast<AnomalyKind>(i % 3);
    const Eigen::Index length = ev.kind == AnomalyKind::spike ? 3 : ev.kind == AnomalyKind::level_shift ? 30 : 24;
    const Eigen::Index lo = spec.clean_prefix + i * slot + 5;
    const Eigen::Index hi = spec.clean_prefix + (i + 1) * slot - length - 5;
    const Eigen::Index start = std::uniform_int_distribution<Eigen::Index>(lo, std::max(lo, hi))(rng);
    ev.span = {start, start + length};
    const double sign = sign_pick(rng) ? 1.0 : -1.0;
    auto block = data.test.values.middleRows(start, length);
    switch (ev.kind) {
      case AnomalyKind::spike:
        ev.feature = feature_pick(rng);
        block.col(ev.feature).array() += sign * 3.0;
        break;
      case AnomalyKind::level_shift:
        ev.feature = feature_pick(rng);
        block.col(ev.feature).array() += sign * 1.5;
        break;
      case AnomalyKind::correlation_break:
        ev.feature = 1;
        for (Eigen::Index l = 0; l < length; ++l)
          block(l, 1) -= 2.0 * clean_value(spec.train_length + start + l, 1);
        break;
    }
    labels.segment(start, length).setOnes();
    data.events.push_back(ev);
  }
  data.test.labels = labels;
  return data;
}

void write_dataset_dir(const std::filesystem::path& dir, const SyntheticData& data) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCategory::io, "cannot create " + dir.string() + ": " + ec.message());
  RawSeries test = data.test;
  test.labels.reset();
  save_csv(dir / "train.csv", data.train);
  save_csv(dir / "test.csv", test);
  std::ofstream out(dir / "test_label.csv");
  if (!out) throw Error(ErrorCategory::io, "cannot write " + (dir / "test_label.csv").string());
  out << "label\n";
  if (data.test.labels)
    for (Eigen::Index l = 0; l < data.test.labels->size(); ++l) out << (*data.test.labels)(l) << '\n';
}

}  // namespace imdiff
