#pragma once

#include "imdiff/types.hpp"

#include <optional>
#include <vector>

namespace imdiff {

// A ground-truth anomaly segment [start, end).
struct Event {
  Eigen::Index start = 0;
  Eigen::Index end = 0;

  Eigen::Index length() const { return end - start; }
  bool operator==(const Event&) const = default;
};

using EventList = std::vector<Event>;

EventList events_from_labels(const LabelVector& truth);

struct PRF1 {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Point adjustment: an event counts as fully detected once any of its
// timestamps is flagged.
LabelVector point_adjust(const LabelVector& pred, const LabelVector& truth);

// Precision is 0 when nothing is predicted; F1 is 0 when P + R = 0.
PRF1 prf1(const LabelVector& pred, const LabelVector& truth, bool adjust);

// Average sequence detection delay. Undetected events count their full length.
double add_metric(const LabelVector& pred, const EventList& events);

// Continuous labels: 1 inside events, 1 - d/(buffer+1) at distance d <= buffer
// from the nearest event, 0 elsewhere.
VectorXd buffered_labels(const LabelVector& truth, int buffer);

struct RangeAuc {
  double roc = 0.0;
  double pr = 0.0;
};

// Threshold sweep over the distinct score values with buffered labels;
// trapezoidal areas. The PR curve starts at (recall 0, first precision).
// With no positive label mass both areas are 0; with no negative mass ROC is 1.
RangeAuc range_auc(const VectorXd& score, const LabelVector& truth, int buffer);

// Half the mean event length, capped at 50.
int default_buffer(const EventList& events);

struct MetricsReport {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;      // point-adjusted
  double f1_raw = 0.0;  // no adjustment
  double r_auc_pr = 0.0;
  double r_auc_roc = 0.0;
  double add = 0.0;
  int n_events = 0;
};

MetricsReport evaluate_detection(const LabelVector& pred, const VectorXd& score, const LabelVector& truth,
                                 std::optional<int> buffer = std::nullopt);

}  // namespace imdiff
