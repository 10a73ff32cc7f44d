#pragma once

#include "imdiff/error.hpp"
#include "imdiff/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace imdiff {

struct DenoiserConfig {
  int n_blocks = 4;
  int hidden_dim = 128;
  int n_heads = 8;
  int step_embed_dim = 128;
  int feature_embed_dim = 16;
  int time_embed_dim = 128;  // sinusoidal encoding of the in-window time index
  int ff_dim = 64;           // feed-forward width inside each transformer layer
  int steps = 50;            // diffusion steps T
  int n_features = 1;        // K, size of the feature-embedding table
  bool use_temporal = true;
  bool use_spatial = true;

  void validate() const;
  int side_dim() const { return time_embed_dim + feature_embed_dim + 1; }
};

bool operator==(const DenoiserConfig& a, const DenoiserConfig& b);

// One forward pass worth of inputs. Values are W x K; the reference channel
// carries the observed-cell information and is zero on hidden cells.
template <typename Scalar>
struct DenoiserInput {
  Matrix<Scalar> masked_channel;
  Matrix<Scalar> reference_channel;
  Matrix<Scalar> mask;
  int step = 1;
  int policy = 0;
  std::vector<int> time_index;     // length W
  std::vector<int> feature_index;  // length K

  // Fills time_index = 0..W-1 and feature_index = 0..K-1.
  void default_indices();
};

struct ParamInfo {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
};

namespace detail {

struct LinearSlot {
  Eigen::Index weight = 0;
  Eigen::Index bias = 0;
  int in = 0;
  int out = 0;
};

struct NormSlot {
  Eigen::Index gamma = 0;
  Eigen::Index beta = 0;
  int dim = 0;
};

struct TransformerSlots {
  LinearSlot qkv, proj, ff1, ff2;
  NormSlot ln1, ln2;
};

struct BlockSlots {
  LinearSlot step_proj, side_in, mid, cond, out;
  TransformerSlots temporal, spatial;
};

struct Layout {
  LinearSlot input, step1, step2, skip, output;
  Eigen::Index policy_embed = 0;
  Eigen::Index feature_embed = 0;
  std::vector<BlockSlots> blocks;
  std::vector<ParamInfo> table;
  Eigen::Index size = 0;
};

Layout make_layout(const DenoiserConfig& cfg);

template <typename Scalar>
struct TransformerTape {
  Matrix<Scalar> x, qkv, attn, ln1_hat, h1, ff_pre, ff_act, ln2_hat;
  Vector<Scalar> ln1_rstd, ln2_rstd;
  std::vector<Matrix<Scalar>> probs;  // [sequence * heads + head]
};

template <typename Scalar>
struct BlockTape {
  Matrix<Scalar> x;      // block input
  Matrix<Scalar> mixed;  // after temporal/spatial attention
  Matrix<Scalar> pre_gate, gated;
  TransformerTape<Scalar> temporal, spatial;
};

}  // namespace detail

// Intermediate activations of one forward pass, consumed by backward().
template <typename Scalar>
struct DenoiserTape {
  Eigen::Index W = 0, K = 0;
  int policy = 0;
  std::vector<int> feature_index;
  Matrix<Scalar> x_in, in_pre, side;
  RowVector<Scalar> step_sin, step_pre1, step_act1, step_pre2, emb;
  std::vector<detail::BlockTape<Scalar>> blocks;
  Matrix<Scalar> skip_sum, head_pre;
};

// Noise-prediction network: input projection, stacked residual blocks of
// temporal attention -> spatial attention -> gated activation, and a skip head.
// All parameters live in one flat vector so optimizers and checkpoints can
// treat them uniformly.
template <typename Scalar>
class Denoiser {
 public:
  using ParamVector = Vector<Scalar>;

  Denoiser() = default;
  // Variance-scaled initialization; the head's final projection starts at zero.
  Denoiser(const DenoiserConfig& cfg, Rng& rng);
  // Wraps existing parameters (checkpoint load); sizes must match the config.
  Denoiser(const DenoiserConfig& cfg, ParamVector params);

  const DenoiserConfig& config() const { return cfg_; }
  const ParamVector& parameters() const { return params_; }
  ParamVector& parameters() { return params_; }
  const std::vector<ParamInfo>& parameter_table() const { return layout_.table; }
  Eigen::Index parameter_count() const { return layout_.size; }

  Matrix<Scalar> predict_noise(const DenoiserInput<Scalar>& input) const;

  Matrix<Scalar> forward(const DenoiserInput<Scalar>& input, DenoiserTape<Scalar>& tape) const;

  // Accumulates d(loss)/d(params) into `grad` given d(loss)/d(output).
  void backward(const DenoiserTape<Scalar>& tape, const Matrix<Scalar>& d_out, ParamVector& grad) const;

  std::int64_t training_steps = 0;

 private:
  void check_input(const DenoiserInput<Scalar>& input) const;

  DenoiserConfig cfg_;
  detail::Layout layout_;
  ParamVector params_;
};

// Sinusoidal encoding: first half sin, second half cos, geometric frequencies.
template <typename Scalar>
RowVector<Scalar> sinusoidal_encoding(double position, int dim);

template <typename Scalar>
Denoiser<Scalar> build_denoiser(const DenoiserConfig& cfg, Rng& rng) {
  return Denoiser<Scalar>(cfg, rng);
}

extern template class Denoiser<float>;
extern template class Denoiser<double>;

}  // namespace imdiff
