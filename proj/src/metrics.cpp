#include "imdiff/metrics.hpp"

#include "imdiff/error.hpp"

#include <algorithm>
#include <numeric>

namespace imdiff {
namespace {

void require_same_length(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b)
    throw Error(ErrorCategory::data, std::string(what) + ": length mismatch (" + std::to_string(a) + " vs " +
                                         std::to_string(b) + ")");
}

}  // namespace

EventList events_from_labels(const LabelVector& truth) {
  EventList events;
  Eigen::Index l = 0;
  const Eigen::Index n = truth.size();
  while (l < n) {
    if (truth(l) == 0) {
      ++l;
      continue;
    }
    Event e{l, l};
    while (l < n && truth(l) != 0) ++l;
    e.end = l;
    events.push_back(e);
  }
  return events;
}

LabelVector point_adjust(const LabelVector& pred, const LabelVector& truth) {
  require_same_length(pred.size(), truth.size(), "point_adjust");
  LabelVector adjusted = pred;
  for (const Event& e : events_from_labels(truth))
    if (pred.segment(e.start, e.length()).any()) adjusted.segment(e.start, e.length()).setOnes();
  return adjusted;
}

PRF1 prf1(const LabelVector& pred, const LabelVector& truth, bool adjust) {
  require_same_length(pred.size(), truth.size(), "prf1");
  const LabelVector p = adjust ? point_adjust(pred, truth) : pred;
  double tp = 0, fp = 0, fn = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const bool yp = p(i) != 0, yt = truth(i) != 0;
    tp += yp && yt;
    fp += yp && !yt;
    fn += !yp && yt;
  }
  PRF1 r;
  r.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  r.recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

double add_metric(const LabelVector& pred, const EventList& events) {
  if (events.empty()) throw Error(ErrorCategory::data, "ADD undefined: no anomalous events");
  double total = 0.0;
  for (const Event& e : events) {
    if (e.end > pred.size()) throw Error(ErrorCategory::data, "ADD: event extends past the prediction vector");
    Eigen::Index delay = e.length();
    for (Eigen::Index l = e.start; l < e.end; ++l)
      if (pred(l) != 0) {
        delay = l - e.start;
        break;
      }
    total += static_cast<double>(delay);
  }
  return total / static_cast<double>(events.size());
}

VectorXd buffered_labels(const LabelVector& truth, int buffer) {
  if (buffer < 0) throw Error(ErrorCategory::config, "range buffer must be >= 0");
  VectorXd labels = truth.cast<double>().cwiseMin(1.0).cwiseMax(0.0);
  const double denom = buffer + 1.0;
  for (const Event& e : events_from_labels(truth)) {
    for (int d = 1; d <= buffer; ++d) {
      const double v = 1.0 - d / denom;
      if (e.start - d >= 0) labels(e.start - d) = std::max(labels(e.start - d), v);
      if (e.end - 1 + d < truth.size()) labels(e.end - 1 + d) = std::max(labels(e.end - 1 + d), v);
    }
  }
  return labels;
}

RangeAuc range_auc(const VectorXd& score, const LabelVector& truth, int buffer) {
  require_same_length(score.size(), truth.size(), "range_auc");
  const VectorXd labels = buffered_labels(truth, buffer);
  const double pos_mass = labels.sum();
  const double neg_mass = static_cast<double>(labels.size()) - pos_mass;
  RangeAuc out;
  if (pos_mass <= 0.0) return out;

  std::vector<Eigen::Index> order(static_cast<std::size_t>(score.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return score(a) > score(b); });

  double tp = 0, fp = 0;
  double prev_fpr = 0, prev_tpr = 0, prev_recall = 0, prev_precision = -1;
  double roc = 0, pr = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double threshold = score(order[i]);
    while (i < order.size() && score(order[i]) == threshold) {
      tp += labels(order[i]);
      fp += 1.0 - labels(order[i]);
      ++i;
    }
    const double tpr = tp / pos_mass;
    const double fpr = neg_mass > 0 ? fp / neg_mass : 0.0;
    const double precision = tp / (tp + fp);
    if (prev_precision < 0) prev_precision = precision;
    roc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2;
    pr += (tpr - prev_recall) * (precision + prev_precision) / 2;
    prev_fpr = fpr;
    prev_tpr = tpr;
    prev_recall = tpr;
    prev_precision = precision;
  }
  out.roc = neg_mass > 0 ? roc : 1.0;
  out.pr = pr;
  return out;
}

int default_buffer(const EventList& events) {
  if (events.empty()) return 0;
  double total = 0;
  for (const Event& e : events) total += static_cast<double>(e.length());
  return std::min(50, static_cast<int>(total / static_cast<double>(events.size()) / 2.0));
}

MetricsReport evaluate_detection(const LabelVector& pred, const VectorXd& score, const LabelVector& truth,
                                 std::optional<int> buffer) {
  require_same_length(pred.size(), truth.size(), "evaluate");
  require_same_length(score.size(), truth.size(), "evaluate");
  const EventList events = events_from_labels(truth);
  MetricsReport r;
  const PRF1 adj = prf1(pred, truth, true);
  r.precision = adj.precision;
  r.recall = adj.recall;
  r.f1 = adj.f1;
  r.f1_raw = prf1(pred, truth, false).f1;
  const RangeAuc auc = range_auc(score, truth, buffer.value_or(default_buffer(events)));
  r.r_auc_pr = auc.pr;
  r.r_auc_roc = auc.roc;
  r.n_events = static_cast<int>(events.size());
  r.add = events.empty() ? 0.0 : add_metric(pred, events);
  return r;
}

}  // namespace imdiff
