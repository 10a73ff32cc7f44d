#include "imdiff/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace imdiff {

std::string_view to_string(Conditioning c) {
  return c == Conditioning::unconditional ? "unconditional" : "conditional";
}

Conditioning conditioning_from_string(std::string_view name) {
  if (name == "unconditional") return Conditioning::unconditional;
  if (name == "conditional") return Conditioning::conditional;
  throw Error(ErrorCategory::config, "unknown conditioning '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(ErrorCategory::config, "train.epochs must be >= 1");
  if (batch_size < 1) throw Error(ErrorCategory::config, "train.batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw Error(ErrorCategory::config, "train.learning_rate must be > 0");
  if (train_stride < 0) throw Error(ErrorCategory::config, "train.train_stride must be >= 0");
  if (!(lr_decay.factor > 0.0)) throw Error(ErrorCategory::config, "train.lr_decay.factor must be > 0");
}

double learning_rate_at(const TrainConfig& cfg, int epoch) {
  double lr = cfg.learning_rate;
  for (double m : cfg.lr_decay.milestones)
    if (epoch >= static_cast<int>(std::floor(m * cfg.epochs))) lr *= cfg.lr_decay.factor;
  return lr;
}

template <typename Scalar>
void AdamState<Scalar>::apply(Vector<Scalar>& params, const Vector<Scalar>& grad, double lr) {
  if (m.size() != params.size()) {
    m = Vector<Scalar>::Zero(params.size());
    v = Vector<Scalar>::Zero(params.size());
  }
  ++step;
  const Scalar b1 = static_cast<Scalar>(beta1);
  const Scalar b2 = static_cast<Scalar>(beta2);
  m = b1 * m + (Scalar(1) - b1) * grad;
  v = b2 * v + (Scalar(1) - b2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  const Scalar step_size = static_cast<Scalar>(lr / c1);
  const Scalar inv_c2 = static_cast<Scalar>(1.0 / c2);
  const Scalar e = static_cast<Scalar>(eps);
  params.array() -= step_size * m.array() / ((v.array() * inv_c2).sqrt() + e);
}

template <typename Scalar>
DenoiserInput<Scalar> make_denoiser_input(const Matrix<Scalar>& state, const Matrix<Scalar>& reference,
                                          const Mask<Scalar>& mask, int step, int policy) {
  DenoiserInput<Scalar> in;
  in.masked_channel = state.cwiseProduct((Scalar(1) - mask.array()).matrix());
  in.reference_channel = reference.cwiseProduct(mask);
  in.mask = mask;
  in.step = step;
  in.policy = policy;
  in.default_indices();
  return in;
}

template <typename Scalar>
NoisedExample<Scalar> make_training_example(const Matrix<Scalar>& x0, const MaskPass<Scalar>& pass, int step,
                                            const NoiseSchedule& sched, Conditioning conditioning, Rng& rng) {
  NoisedExample<Scalar> ex;
  ex.noise = standard_normal<Scalar>(x0.rows(), x0.cols(), rng);
  const Matrix<Scalar> noised = forward_corrupt(x0, step, ex.noise, sched);
  const Matrix<Scalar>& reference = conditioning == Conditioning::unconditional ? noised : x0;
  ex.input = make_denoiser_input(noised, reference, pass.mask, step, pass.policy);
  return ex;
}

template <typename Scalar>
LossStats masked_noise_loss(const Denoiser<Scalar>& model, std::span<const NoisedExample<Scalar>> examples,
                            Vector<Scalar>* grad) {
  LossStats stats;
  for (const auto& ex : examples) stats.cells += static_cast<std::int64_t>((ex.input.mask.array() == Scalar(0)).count());
  if (stats.cells == 0) throw Error(ErrorCategory::data, "loss undefined: no hidden cells in the batch");
  const Scalar inv_cells = Scalar(1) / static_cast<Scalar>(stats.cells);

  DenoiserTape<Scalar> tape;
  for (const auto& ex : examples) {
    const Matrix<Scalar> eps_hat = model.forward(ex.input, tape);
    const Matrix<Scalar> hidden = (Scalar(1) - ex.input.mask.array()).matrix();
    const Matrix<Scalar> resid = (eps_hat - ex.noise).cwiseProduct(hidden);
    const double sq = resid.template cast<double>().squaredNorm();
    stats.sum_sq += sq;
    const auto p = static_cast<std::size_t>(ex.input.policy);
    stats.policy_sum_sq[p] += sq;
    stats.policy_cells[p] += static_cast<std::int64_t>((ex.input.mask.array() == Scalar(0)).count());
    if (grad) model.backward(tape, (Scalar(2) * inv_cells) * resid, *grad);
  }
  if (!std::isfinite(stats.sum_sq))
    throw Error(ErrorCategory::numeric, "non-finite training loss (sum of squares " + std::to_string(stats.sum_sq) + ")");
  return stats;
}

template <typename Scalar>
LossStats training_step(Denoiser<Scalar>& model, AdamState<Scalar>& adam, std::span<const MtsWindow* const> batch,
                        const TrainConfig& cfg, const NoiseSchedule& sched, double lr, Rng& rng) {
  if (sched.steps != model.config().steps)
    throw Error(ErrorCategory::model, "schedule has " + std::to_string(sched.steps) + " steps, model expects " +
                                          std::to_string(model.config().steps));
  std::uniform_int_distribution<int> pick_step(1, sched.steps);
  std::vector<NoisedExample<Scalar>> examples;
  for (const MtsWindow* w : batch) {
    const Matrix<Scalar> x0 = w->values.cast<Scalar>();
    for (const auto& pass : mask_passes<Scalar>(cfg.mask, x0.rows(), x0.cols(), rng)) {
      const int t = pick_step(rng);
      examples.push_back(make_training_example(x0, pass, t, sched, cfg.conditioning, rng));
    }
  }
  Vector<Scalar> grad = Vector<Scalar>::Zero(model.parameter_count());
  LossStats stats = masked_noise_loss<Scalar>(model, examples, &grad);
  if (!grad.allFinite()) throw Error(ErrorCategory::numeric, "non-finite gradient");
  adam.apply(model.parameters(), grad, lr);
  ++model.training_steps;
  return stats;
}

template <typename Scalar>
std::vector<TrainRecord> train(Denoiser<Scalar>& model, AdamState<Scalar>& adam, const std::vector<MtsWindow>& windows,
                               const TrainConfig& cfg, const NoiseSchedule& sched, const TrainHooks& hooks) {
  cfg.validate();
  if (windows.empty()) throw Error(ErrorCategory::data, "training set is empty");
  std::vector<TrainRecord> records;
  std::vector<const MtsWindow*> order(windows.size());
  double best = hooks.best_loss;
  for (int epoch = hooks.start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(derive_seed(cfg.seed, 0x7a11u, static_cast<std::uint64_t>(epoch)));
    std::transform(windows.begin(), windows.end(), order.begin(), [](const MtsWindow& w) { return &w; });
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = learning_rate_at(cfg, epoch);

    LossStats total;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t n = std::min(order.size() - i, static_cast<std::size_t>(cfg.batch_size));
      const LossStats s = training_step<Scalar>(model, adam, std::span(order).subspan(i, n), cfg, sched, lr, rng);
      total.sum_sq += s.sum_sq;
      total.cells += s.cells;
      for (std::size_t p = 0; p < 3; ++p) {
        total.policy_sum_sq[p] += s.policy_sum_sq[p];
        total.policy_cells[p] += s.policy_cells[p];
      }
    }
    TrainRecord rec;
    rec.epoch = epoch;
    rec.loss = total.mean();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (std::size_t p = 0; p < 3; ++p) {
      rec.policy_cells[p] = total.policy_cells[p];
      rec.policy_loss[p] = total.policy_cells[p] ? total.policy_sum_sq[p] / static_cast<double>(total.policy_cells[p]) : 0.0;
    }
    const bool improved = rec.loss < best;
    if (improved) best = rec.loss;
    records.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec, improved);
  }
  return records;
}

#define IMDIFF_INSTANTIATE_TRAINER(S)                                                                              \
  template struct AdamState<S>;                                                                                   \
  template DenoiserInput<S> make_denoiser_input<S>(const Matrix<S>&, const Matrix<S>&, const Mask<S>&, int, int); \
  template NoisedExample<S> make_training_example<S>(const Matrix<S>&, const MaskPass<S>&, int,                   \
                                                     const NoiseSchedule&, Conditioning, Rng&);                   \
  template LossStats masked_noise_loss<S>(const Denoiser<S>&, std::span<const NoisedExample<S>>, Vector<S>*);     \
  template LossStats training_step<S>(Denoiser<S>&, AdamState<S>&, std::span<const MtsWindow* const>,             \
                                      const TrainConfig&, const NoiseSchedule&, double, Rng&);                    \
  template std::vector<TrainRecord> train<S>(Denoiser<S>&, AdamState<S>&, const std::vector<MtsWindow>&,          \
                                             const TrainConfig&, const NoiseSchedule&, const TrainHooks&);

IMDIFF_INSTANTIATE_TRAINER(float)
IMDIFF_INSTANTIATE_TRAINER(double)

}  // namespace imdiff
