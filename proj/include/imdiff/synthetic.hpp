#pragma once

#include "imdiff/dataset.hpp"
#include "imdiff/metrics.hpp"

#include <filesystem>

namespace imdiff {

// Three correlated sinusoids with Gaussian noise; the test split carries
// injected anomalies cycling through spikes, level shifts and correlation
// breaks (feature 1 loses its coupling to feature 0).
struct SyntheticSpec {
  Eigen::Index train_length = 4000;
  Eigen::Index test_length = 2000;
  int n_events = 12;
  double noise = 0.1;
  Eigen::Index clean_prefix = 50;  // no events start before this
  std::uint64_t seed = 7;
};

enum class AnomalyKind { spike, level_shift, correlation_break };

struct InjectedEvent {
  Event span;
  AnomalyKind kind = AnomalyKind::spike;
  Eigen::Index feature = 0;
};

struct SyntheticData {
  RawSeries train;
  RawSeries test;  // labels set
  std::vector<InjectedEvent> events;
};

SyntheticData make_synthetic(const SyntheticSpec& spec);

// Writes train.csv, test.csv (no label column) and test_label.csv.
void write_dataset_dir(const std::filesystem::path& dir, const SyntheticData& data);

}  // namespace imdiff
