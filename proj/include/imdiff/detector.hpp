#pragma once

#include "imdiff/checkpoint.hpp"
#include "imdiff/dataset.hpp"
#include "imdiff/denoiser.hpp"
#include "imdiff/diffusion.hpp"
#include "imdiff/masking.hpp"
#include "imdiff/trainer.hpp"

#include <array>
#include <map>
#include <optional>
#include <string_view>
#include <vector>

namespace imdiff {

struct EnsembleConfig {
  double tau_quantile = 0.02;  // upper-tail fraction for the final-step threshold
  int xi = 8;                  // a timestamp is anomalous with strictly more than xi votes
  std::vector<int> vote_steps = default_vote_steps(50);

  // Every third reverse iteration among the last 30 (closest to the clean
  // end), i.e. {28, 25, ..., 1} for T >= 28.
  static std::vector<int> default_vote_steps(int steps);

  int n_vote_steps() const { return static_cast<int>(vote_steps.size()); }
  // The most denoised recorded step; its errors define the base threshold.
  int final_step() const;
  void validate(int steps) const;
};

// Numpy-style linearly interpolated quantile, q in [0,1].
double quantile_linear(std::vector<double> values, double q);

// Snapshots of the full W x K state X_{t-1} after reverse iteration t, for
// every t in the ensemble's vote steps.
template <typename Scalar>
using ImputationTrace = std::map<int, Matrix<Scalar>>;

struct ImputeOptions {
  Conditioning conditioning = Conditioning::unconditional;
  bool allow_untrained = false;
};

// Runs the reverse chain from Gaussian noise on hidden cells while observed
// cells follow their recorded forward trajectory (unconditional) or stay at
// their raw values (conditional).
template <typename Scalar>
ImputationTrace<Scalar> reverse_impute(const Denoiser<Scalar>& model, const Matrix<Scalar>& window,
                                       const Mask<Scalar>& mask, int policy, const NoiseSchedule& sched,
                                       const EnsembleConfig& cfg, Rng& rng, const ImputeOptions& opts = {});

// Per-step squared imputation errors. Tensors are L x K; cells not imputed by
// any pass are NaN in `errors` and excluded from `per_timestamp`/sums.
struct StepErrorStack {
  std::map<int, MatrixXd> errors;
  std::map<int, VectorXd> per_timestamp;  // mean over imputed features

  double total(int step) const;
};

// Merges the two complementary imputations step by step and scores them
// against the normalized ground truth.
template <typename Scalar>
StepErrorStack step_errors(const ImputationTrace<Scalar>& pred0, const ImputationTrace<Scalar>& pred1,
                           const Matrix<Scalar>& truth, const MaskPair<Scalar>& pair);

// General form: each cell takes the imputation of the last pass hiding it.
template <typename Scalar>
StepErrorStack step_errors(const std::vector<ImputationTrace<Scalar>>& traces,
                           const std::vector<MaskPass<Scalar>>& passes, const Matrix<Scalar>& truth);

// tau_t = (sum E_final / sum E_t) * tau_final.
std::map<int, double> step_thresholds(const StepErrorStack& stack, const EnsembleConfig& cfg);
std::map<int, LabelVector> step_labels(const StepErrorStack& stack, const EnsembleConfig& cfg);

struct DetectionResult {
  Eigen::VectorXi votes;
  LabelVector labels;
  VectorXd score;  // final-step per-timestamp error
  std::map<int, LabelVector> step_labels;
  std::map<int, double> thresholds;
  bool untrained_model = false;
};

DetectionResult vote(const std::map<int, LabelVector>& labels, const EnsembleConfig& cfg);

struct DetectOptions {
  MaskSettings mask;
  ImputeOptions impute;
  std::uint64_t seed = 0;
  int workers = 1;
  Eigen::Index window = 100;
};

// Ensemble detection over a whole series: windowing, reverse imputation per
// window and pass, coverage assembly, global thresholds, voting.
template <typename Scalar>
DetectionResult detect(const Denoiser<Scalar>& model, const RawSeries& test, const NormStats& stats,
                       const NoiseSchedule& sched, const EnsembleConfig& ecfg, const DetectOptions& opts,
                       StepErrorStack* stack_out = nullptr);

enum class Variant {
  imputation,
  forecasting,
  reconstruction,
  conditional,
  non_ensemble,
  random_mask,
  no_spatial,
  no_temporal
};

inline constexpr std::array<Variant, 8> kAllVariants{Variant::imputation,     Variant::forecasting,
                                                     Variant::reconstruction, Variant::non_ensemble,
                                                     Variant::conditional,    Variant::random_mask,
                                                     Variant::no_spatial,     Variant::no_temporal};

std::string_view to_string(Variant v);
Variant variant_from_string(std::string_view name);

// What a model for `v` must be trained with.
struct VariantSpec {
  MaskScheme scheme = MaskScheme::grating;
  Conditioning conditioning = Conditioning::unconditional;
  bool use_spatial = true;
  bool use_temporal = true;
  // Name of the checkpoint variant the detection reuses (non_ensemble reuses imputation).
  std::string_view trained_variant;
};

VariantSpec variant_spec(Variant v);

// Detection with the variant's masking/conditioning/voting rules; throws when
// the checkpoint was trained for a different variant.
DetectionResult detect_variant(Variant v, const Checkpoint& ckpt, const RawSeries& test, EnsembleConfig ecfg,
                               std::uint64_t seed, int workers, StepErrorStack* stack_out = nullptr);

}  // namespace imdiff
