#pragma once

#include "imdiff/dataset.hpp"
#include "imdiff/denoiser.hpp"
#include "imdiff/diffusion.hpp"
#include "imdiff/masking.hpp"

#include <array>
#include <functional>
#include <span>
#include <vector>

namespace imdiff {

// How observed cells are presented to the denoiser. Unconditional: the
// forward-noised observed values (ground-truth noise applied to the data);
// conditional: the raw observed values.
enum class Conditioning { unconditional, conditional };

std::string_view to_string(Conditioning c);
Conditioning conditioning_from_string(std::string_view name);

struct LrDecay {
  std::vector<double> milestones{0.75, 0.9};  // fractions of total epochs
  double factor = 0.1;
};

struct TrainConfig {
  int epochs = 200;
  int batch_size = 16;
  double learning_rate = 1e-3;
  LrDecay lr_decay;
  std::uint64_t seed = 0;
  MaskSettings mask;
  Conditioning conditioning = Conditioning::unconditional;
  int train_stride = 0;  // window stride for the training split; 0 = window size

  void validate() const;
};

struct TrainRecord {
  int epoch = 0;
  double loss = 0.0;
  double seconds = 0.0;
  std::array<double, 3> policy_loss{};  // mean loss per policy id
  std::array<std::int64_t, 3> policy_cells{};
};

template <typename Scalar>
struct AdamState {
  Vector<Scalar> m, v;
  std::int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void apply(Vector<Scalar>& params, const Vector<Scalar>& grad, double lr);
};

// Builds the denoiser input for one pass: hidden cells carry `state`, observed
// cells carry `reference`.
template <typename Scalar>
DenoiserInput<Scalar> make_denoiser_input(const Matrix<Scalar>& state, const Matrix<Scalar>& reference,
                                          const Mask<Scalar>& mask, int step, int policy);

// One corrupted training example for a single mask pass.
template <typename Scalar>
struct NoisedExample {
  DenoiserInput<Scalar> input;
  Matrix<Scalar> noise;  // target eps on every cell; only hidden cells are scored
};

template <typename Scalar>
NoisedExample<Scalar> make_training_example(const Matrix<Scalar>& x0, const MaskPass<Scalar>& pass, int step,
                                            const NoiseSchedule& sched, Conditioning conditioning, Rng& rng);

struct LossStats {
  double sum_sq = 0.0;
  std::int64_t cells = 0;
  std::array<double, 3> policy_sum_sq{};
  std::array<std::int64_t, 3> policy_cells{};

  double mean() const { return cells ? sum_sq / static_cast<double>(cells) : 0.0; }
};

// Squared noise-prediction error over hidden cells of all examples, divided by
// the total hidden-cell count. When `grad` is non-null the gradient of that
// normalized loss is accumulated into it.
template <typename Scalar>
LossStats masked_noise_loss(const Denoiser<Scalar>& model, std::span<const NoisedExample<Scalar>> examples,
                            Vector<Scalar>* grad);

// Draws masks, steps and noise for every window in the batch, computes the loss,
// and applies one Adam update.
template <typename Scalar>
LossStats training_step(Denoiser<Scalar>& model, AdamState<Scalar>& adam, std::span<const MtsWindow* const> batch,
                        const TrainConfig& cfg, const NoiseSchedule& sched, double lr, Rng& rng);

struct TrainHooks {
  // Called after every epoch; `improved` is true when the epoch loss is a new best.
  std::function<void(const TrainRecord&, bool improved)> on_epoch;
  int start_epoch = 0;  // resume support: first epoch index to run
  double best_loss = std::numeric_limits<double>::infinity();
};

template <typename Scalar>
std::vector<TrainRecord> train(Denoiser<Scalar>& model, AdamState<Scalar>& adam, const std::vector<MtsWindow>& windows,
                               const TrainConfig& cfg, const NoiseSchedule& sched, const TrainHooks& hooks = {});

double learning_rate_at(const TrainConfig& cfg, int epoch);

}  // namespace imdiff
