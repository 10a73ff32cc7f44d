#pragma once

// Slow, independent re-implementations used as test oracles. They share no
// code with the library beyond plain Eigen containers.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

namespace oracle {

struct Counts {
  double p, r, f1;
};

inline Counts prf1(const std::vector<int>& pred_in, const std::vector<int>& truth, bool adjust) {
  std::vector<int> pred = pred_in;
  const int n = static_cast<int>(truth.size());
  if (adjust) {
    // Every positive timestamp inherits a hit anywhere in its own run.
    std::vector<int> adjusted = pred;
    for (int i = 0; i < n; ++i) {
      if (!truth[i]) continue;
      int lo = i, hi = i;
      while (lo > 0 && truth[lo - 1]) --lo;
      while (hi + 1 < n && truth[hi + 1]) ++hi;
      for (int j = lo; j <= hi; ++j)
        if (pred[j]) adjusted[i] = 1;
    }
    pred = adjusted;
  }
  int tp = 0, fp = 0, fn = 0;
  for (int i = 0; i < n; ++i) {
    if (pred[i] && truth[i]) ++tp;
    if (pred[i] && !truth[i]) ++fp;
    if (!pred[i] && truth[i]) ++fn;
  }
  const double p = tp + fp ? double(tp) / (tp + fp) : 0.0;
  const double r = tp + fn ? double(tp) / (tp + fn) : 0.0;
  return {p, r, p + r > 0 ? 2 * p * r / (p + r) : 0.0};
}

inline double add(const std::vector<int>& pred, const std::vector<int>& truth) {
  const int n = static_cast<int>(truth.size());
  double total = 0;
  int events = 0;
  for (int i = 0; i < n; ++i) {
    if (!truth[i] || (i > 0 && truth[i - 1])) continue;
    int end = i;
    while (end < n && truth[end]) ++end;
    int delay = end - i;
    for (int j = end - 1; j >= i; --j)
      if (pred[j]) delay = j - i;
    total += delay;
    ++events;
  }
  return events ? total / events : std::nan("");
}

inline std::vector<double> soft_labels(const std::vector<int>& truth, int buffer) {
  const int n = static_cast<int>(truth.size());
  std::vector<double> y(n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (truth[j]) y[i] = std::max(y[i], std::max(0.0, 1.0 - std::abs(i - j) / (buffer + 1.0)));
  return y;
}

struct Areas {
  double roc, pr;
};

inline Areas range_auc(const std::vector<double>& score, const std::vector<int>& truth, int buffer) {
  const std::vector<double> y = soft_labels(truth, buffer);
  double pos = 0, neg = 0;
  for (double v : y) pos += v, neg += 1 - v;
  if (pos <= 0) return {0, 0};
  std::set<double, std::greater<>> thresholds(score.begin(), score.end());
  std::vector<double> fpr{0}, tpr{0}, rec, prec;
  for (double th : thresholds) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < score.size(); ++i)
      if (score[i] >= th) tp += y[i], fp += 1 - y[i];
    tpr.push_back(tp / pos);
    fpr.push_back(neg > 0 ? fp / neg : 0);
    rec.push_back(tp / pos);
    prec.push_back(tp / (tp + fp));
  }
  double roc = 0, pr = 0;
  for (std::size_t i = 1; i < tpr.size(); ++i) roc += (fpr[i] - fpr[i - 1]) * (tpr[i] + tpr[i - 1]) / 2;
  rec.insert(rec.begin(), 0.0);
  prec.insert(prec.begin(), prec.front());
  for (std::size_t i = 1; i < rec.size(); ++i) pr += (rec[i] - rec[i - 1]) * (prec[i] + prec[i - 1]) / 2;
  return {neg > 0 ? roc : 1.0, pr};
}

}  // namespace oracle
