#include "imdiff/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <set>
#include <thread>

namespace imdiff {

std::vector<int> EnsembleConfig::default_vote_steps(int steps) {
  std::vector<int> out;
  for (int t = 28; t >= 1; t -= 3)
    if (t <= steps) out.push_back(t);
  return out;
}

int EnsembleConfig::final_step() const {
  if (vote_steps.empty()) throw Error(ErrorCategory::config, "ensemble has no vote steps");
  return *std::min_element(vote_steps.begin(), vote_steps.end());
}

void EnsembleConfig::validate(int steps) const {
  if (!(tau_quantile > 0.0 && tau_quantile < 1.0))
    throw Error(ErrorCategory::config, "ensemble.tau_quantile must lie in (0,1)");
  if (vote_steps.empty()) throw Error(ErrorCategory::config, "ensemble.vote_steps is empty");
  std::set<int> seen;
  for (int t : vote_steps) {
    if (t < 1 || t > steps)
      throw Error(ErrorCategory::config,
                  "vote step " + std::to_string(t) + " outside [1," + std::to_string(steps) + "]");
    if (!seen.insert(t).second) throw Error(ErrorCategory::config, "duplicate vote step " + std::to_string(t));
  }
  if (xi < 0 || xi >= n_vote_steps())
    throw Error(ErrorCategory::config, "ensemble.xi must satisfy 0 <= xi < number of vote steps (" +
                                           std::to_string(n_vote_steps()) + ")");
}

double quantile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw Error(ErrorCategory::data, "quantile of an empty span");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

template <typename Scalar>
ImputationTrace<Scalar> reverse_impute(const Denoiser<Scalar>& model, const Matrix<Scalar>& window,
                                       const Mask<Scalar>& mask, int policy, const NoiseSchedule& sched,
                                       const EnsembleConfig& cfg, Rng& rng, const ImputeOptions& opts) {
  if (model.training_steps == 0 && !opts.allow_untrained)
    throw Error(ErrorCategory::model, "refusing to impute with an untrained (zero-initialized) model");
  if (sched.steps != model.config().steps)
    throw Error(ErrorCategory::model, "schedule/model step count mismatch");
  if (mask.rows() != window.rows() || mask.cols() != window.cols())
    throw Error(ErrorCategory::data, "reverse_impute: mask shape differs from window");
  const std::set<int> wanted(cfg.vote_steps.begin(), cfg.vote_steps.end());
  const Matrix<Scalar> hidden = (Scalar(1) - mask.array()).matrix();

  const ForwardTrajectory<Scalar> traj = record_forward_trajectory(window, sched, rng);
  const int T = sched.steps;
  Matrix<Scalar> x = standard_normal<Scalar>(window.rows(), window.cols(), rng).cwiseProduct(hidden) +
                     traj.state_at(T).cwiseProduct(mask);
  ImputationTrace<Scalar> trace;
  DenoiserTape<Scalar> tape;
  for (int t = T; t >= 1; --t) {
    const Matrix<Scalar>& reference = opts.conditioning == Conditioning::unconditional ? traj.state_at(t) : window;
    const DenoiserInput<Scalar> in = make_denoiser_input(x, reference, mask, t, policy);
    const Matrix<Scalar> eps_hat = model.forward(in, tape);
    const Matrix<Scalar> z = t > 1 ? standard_normal<Scalar>(x.rows(), x.cols(), rng)
                                   : Matrix<Scalar>::Zero(x.rows(), x.cols());
    const Matrix<Scalar> stepped = reverse_step(x, eps_hat, t, sched, z);
    const Matrix<Scalar>& observed = t > 1 ? traj.state_at(t - 1) : window;
    x = stepped.cwiseProduct(hidden) + observed.cwiseProduct(mask);
    if (!x.allFinite())
      throw Error(ErrorCategory::numeric, "reverse chain diverged at step " + std::to_string(t));
    if (wanted.count(t)) trace.emplace(t, x);
  }
  return trace;
}

double StepErrorStack::total(int step) const {
  const MatrixXd& e = errors.at(step);
  return e.array().isNaN().select(0.0, e.array()).sum();
}

namespace {

void reduce_per_timestamp(StepErrorStack& stack) {
  for (const auto& [t, e] : stack.errors) {
    VectorXd r(e.rows());
    for (Eigen::Index l = 0; l < e.rows(); ++l) {
      double s = 0.0;
      int n = 0;
      for (Eigen::Index k = 0; k < e.cols(); ++k)
        if (!std::isnan(e(l, k))) {
          s += e(l, k);
          ++n;
        }
      r(l) = n ? s / n : 0.0;
    }
    stack.per_timestamp[t] = std::move(r);
  }
}

}  // namespace

template <typename Scalar>
StepErrorStack step_errors(const std::vector<ImputationTrace<Scalar>>& traces,
                           const std::vector<MaskPass<Scalar>>& passes, const Matrix<Scalar>& truth) {
  if (traces.size() != passes.size() || traces.empty())
    throw Error(ErrorCategory::data, "step_errors: every mask pass needs an imputation trace");
  StepErrorStack stack;
  for (const auto& [t, first] : traces.front()) {
    MatrixXd e = MatrixXd::Constant(truth.rows(), truth.cols(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t p = 0; p < passes.size(); ++p) {
      const auto it = traces[p].find(t);
      if (it == traces[p].end())
        throw Error(ErrorCategory::data, "step_errors: pass " + std::to_string(p) + " lacks step " + std::to_string(t));
      const Matrix<Scalar>& pred = it->second;
      for (Eigen::Index k = 0; k < truth.cols(); ++k)
        for (Eigen::Index l = 0; l < truth.rows(); ++l)
          if (passes[p].mask(l, k) == Scalar(0)) {
            const double d = static_cast<double>(truth(l, k)) - static_cast<double>(pred(l, k));
            e(l, k) = d * d;
          }
    }
    stack.errors.emplace(t, std::move(e));
  }
  reduce_per_timestamp(stack);
  return stack;
}

template <typename Scalar>
StepErrorStack step_errors(const ImputationTrace<Scalar>& pred0, const ImputationTrace<Scalar>& pred1,
                           const Matrix<Scalar>& truth, const MaskPair<Scalar>& pair) {
  if (pred0.empty() || pred1.empty()) throw Error(ErrorCategory::data, "step_errors: missing policy imputation");
  StepErrorStack stack;
  for (const auto& [t, p0] : pred0) {
    const auto it = pred1.find(t);
    if (it == pred1.end()) throw Error(ErrorCategory::data, "step_errors: policy 1 lacks step " + std::to_string(t));
    const Matrix<Scalar> merged = merge_imputations(p0, it->second, pair);
    stack.errors.emplace(t, (truth - merged).template cast<double>().array().square().matrix());
  }
  reduce_per_timestamp(stack);
  return stack;
}

std::map<int, double> step_thresholds(const StepErrorStack& stack, const EnsembleConfig& cfg) {
  const int final_t = cfg.final_step();
  const auto fin = stack.per_timestamp.find(final_t);
  if (fin == stack.per_timestamp.end())
    throw Error(ErrorCategory::data, "step_thresholds: final step " + std::to_string(final_t) + " missing");
  if (fin->second.size() == 0) throw Error(ErrorCategory::data, "step_thresholds: empty span");
  const VectorXd& e_final = fin->second;
  const double tau_final =
      quantile_linear(std::vector<double>(e_final.data(), e_final.data() + e_final.size()), 1.0 - cfg.tau_quantile);
  const double sum_final = stack.total(final_t);
  std::map<int, double> out;
  for (int t : cfg.vote_steps) {
    if (!stack.errors.count(t)) throw Error(ErrorCategory::data, "step_thresholds: step " + std::to_string(t) + " missing");
    const double sum_t = stack.total(t);
    if (sum_t > 0.0)
      out[t] = sum_final / sum_t * tau_final;
    else
      out[t] = sum_final > 0.0 ? std::numeric_limits<double>::infinity() : tau_final;
  }
  return out;
}

std::map<int, LabelVector> step_labels(const StepErrorStack& stack, const EnsembleConfig& cfg) {
  const auto tau = step_thresholds(stack, cfg);
  std::map<int, LabelVector> out;
  for (const auto& [t, th] : tau) {
    const VectorXd& e = stack.per_timestamp.at(t);
    out[t] = (e.array() >= th).cast<int>();
  }
  return out;
}

DetectionResult vote(const std::map<int, LabelVector>& labels, const EnsembleConfig& cfg) {
  DetectionResult r;
  Eigen::Index n = -1;
  for (int t : cfg.vote_steps) {
    const auto it = labels.find(t);
    if (it == labels.end()) throw Error(ErrorCategory::data, "vote: missing labels for step " + std::to_string(t));
    if (n < 0) {
      n = it->second.size();
      r.votes = Eigen::VectorXi::Zero(n);
    } else if (it->second.size() != n) {
      throw Error(ErrorCategory::data, "vote: label vectors differ in length");
    }
    r.votes += it->second;
    r.step_labels[t] = it->second;
  }
  r.labels = (r.votes.array() > cfg.xi).cast<int>();
  return r;
}

template <typename Scalar>
DetectionResult detect(const Denoiser<Scalar>& model, const RawSeries& test, const NormStats& stats,
                       const NoiseSchedule& sched, const EnsembleConfig& ecfg, const DetectOptions& opts,
                       StepErrorStack* stack_out) {
  ecfg.validate(sched.steps);
  if (test.features() != model.config().n_features)
    throw Error(ErrorCategory::data, "series has " + std::to_string(test.features()) +
                                         " features but the model was trained on " +
                                         std::to_string(model.config().n_features));
  const Eigen::Index W = std::min(opts.window, test.length());
  if (W != opts.window)
    throw Error(ErrorCategory::data, "series length " + std::to_string(test.length()) +
                                         " is shorter than the detection window " + std::to_string(opts.window));
  // Forecasting scores only the second half of each window, so windows advance by W/2.
  const Eigen::Index stride = opts.mask.scheme == MaskScheme::forecasting ? W / 2 : W;
  const WindowSet set = windowize_strided(test, stats, W, stride);

  std::vector<StepErrorStack> per_window(set.windows.size());
  auto run_window = [&](std::size_t i) {
    const MtsWindow& w = set.windows[i];
    Rng mask_rng(derive_seed(opts.seed, i, 0xa5a5));
    const Matrix<Scalar> truth = w.values.cast<Scalar>();
    const auto passes = mask_passes<Scalar>(opts.mask, W, test.features(), mask_rng);
    std::vector<ImputationTrace<Scalar>> traces;
    for (std::size_t p = 0; p < passes.size(); ++p) {
      Rng rng(derive_seed(opts.seed, i, p + 1));
      traces.push_back(
          reverse_impute(model, truth, passes[p].mask, passes[p].policy, sched, ecfg, rng, opts.impute));
    }
    per_window[i] = step_errors(traces, passes, truth);
  };
  const int workers = std::max(1, std::min<int>(opts.workers, static_cast<int>(set.windows.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < set.windows.size(); ++i) run_window(i);
  } else {
    std::vector<std::jthread> pool;
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (int wk = 0; wk < workers; ++wk)
      pool.emplace_back([&, wk] {
        for (std::size_t i = static_cast<std::size_t>(wk); i < set.windows.size(); i += static_cast<std::size_t>(workers)) {
          try {
            run_window(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            return;
          }
        }
      });
    pool.clear();
    if (failure) std::rethrow_exception(failure);
  }

  // Later windows overwrite earlier ones, so each cell is scored by the last
  // window that imputed it.
  StepErrorStack stack;
  const Eigen::Index L = test.length();
  for (int t : ecfg.vote_steps)
    stack.errors[t] = MatrixXd::Constant(L, test.features(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < set.windows.size(); ++i) {
    const Eigen::Index start = set.windows[i].start;
    for (auto& [t, e] : stack.errors) {
      const MatrixXd& we = per_window[i].errors.at(t);
      for (Eigen::Index k = 0; k < we.cols(); ++k)
        for (Eigen::Index l = 0; l < W; ++l)
          if (!std::isnan(we(l, k))) e(start + l, k) = we(l, k);
    }
  }
  reduce_per_timestamp(stack);

  DetectionResult result = vote(step_labels(stack, ecfg), ecfg);
  result.thresholds = step_thresholds(stack, ecfg);
  result.score = stack.per_timestamp.at(ecfg.final_step());
  result.untrained_model = model.training_steps == 0;
  if (stack_out) *stack_out = std::move(stack);
  return result;
}

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::imputation: return "imputation";
    case Variant::forecasting: return "forecasting";
    case Variant::reconstruction: return "reconstruction";
    case Variant::conditional: return "conditional";
    case Variant::non_ensemble: return "non_ensemble";
    case Variant::random_mask: return "random_mask";
    case Variant::no_spatial: return "no_spatial";
    case Variant::no_temporal: return "no_temporal";
  }
  return "imputation";
}

Variant variant_from_string(std::string_view name) {
  for (Variant v : kAllVariants)
    if (to_string(v) == name) return v;
  throw Error(ErrorCategory::config, "unknown variant '" + std::string(name) + "'");
}

VariantSpec variant_spec(Variant v) {
  VariantSpec s;
  s.trained_variant = to_string(v);
  switch (v) {
    case Variant::imputation: break;
    case Variant::forecasting: s.scheme = MaskScheme::forecasting; break;
    case Variant::reconstruction: s.scheme = MaskScheme::reconstruction; break;
    case Variant::conditional: s.conditioning = Conditioning::conditional; break;
    case Variant::non_ensemble: s.trained_variant = to_string(Variant::imputation); break;
    case Variant::random_mask: s.scheme = MaskScheme::random; break;
    case Variant::no_spatial: s.use_spatial = false; break;
    case Variant::no_temporal: s.use_temporal = false; break;
  }
  return s;
}

DetectionResult detect_variant(Variant v, const Checkpoint& ckpt, const RawSeries& test, EnsembleConfig ecfg,
                               std::uint64_t seed, int workers, StepErrorStack* stack_out) {
  const VariantSpec spec = variant_spec(v);
  if (ckpt.variant != spec.trained_variant || ckpt.mask.scheme != spec.scheme ||
      ckpt.conditioning != spec.conditioning || ckpt.model.use_spatial != spec.use_spatial ||
      ckpt.model.use_temporal != spec.use_temporal)
    throw Error(ErrorCategory::model, "variant '" + std::string(to_string(v)) + "' needs a '" +
                                          std::string(spec.trained_variant) + "' checkpoint, got '" + ckpt.variant + "'");
  if (v == Variant::non_ensemble) {
    ecfg.vote_steps = {1};
    ecfg.xi = 0;
  }
  DetectOptions opts;
  opts.mask = ckpt.mask;
  opts.impute.conditioning = ckpt.conditioning;
  opts.seed = seed;
  opts.workers = workers;
  opts.window = ckpt.window;
  const Denoiser<float> model = ckpt.make_model();
  return detect(model, test, ckpt.stats, ckpt.schedule, ecfg, opts, stack_out);
}

#define IMDIFF_INSTANTIATE_DETECTOR(S)                                                                          \
  template ImputationTrace<S> reverse_impute<S>(const Denoiser<S>&, const Matrix<S>&, const Mask<S>&, int,       \
                                                const NoiseSchedule&, const EnsembleConfig&, Rng&,               \
                                                const ImputeOptions&);                                           \
  template StepErrorStack step_errors<S>(const ImputationTrace<S>&, const ImputationTrace<S>&, const Matrix<S>&, \
                                         const MaskPair<S>&);                                                    \
  template StepErrorStack step_errors<S>(const std::vector<ImputationTrace<S>>&,                                 \
                                         const std::vector<MaskPass<S>>&, const Matrix<S>&);                     \
  template DetectionResult detect<S>(const Denoiser<S>&, const RawSeries&, const NormStats&,                    \
                                     const NoiseSchedule&, const EnsembleConfig&, const DetectOptions&,          \
                                     StepErrorStack*);

IMDIFF_INSTANTIATE_DETECTOR(float)
IMDIFF_INSTANTIATE_DETECTOR(double)

}  // namespace imdiff
