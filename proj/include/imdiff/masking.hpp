#pragma once

#include "imdiff/error.hpp"
#include "imdiff/types.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace imdiff {

// Mask convention: 1 = observed, 0 = missing (to be imputed).
template <typename Scalar>
using Mask = Matrix<Scalar>;

// Policy ids fed to the denoiser. Grating uses 0/1; every other masking
// scheme shares one sentinel embedding.
inline constexpr int kSentinelPolicy = 2;
inline constexpr int kPolicyCount = 3;

template <typename Scalar>
struct MaskPair {
  Mask<Scalar> m0;
  Mask<Scalar> m1;
  int policy0 = 0;
  int policy1 = 1;
};

enum class AblationMask { forecasting, reconstruction };

// Splits time into n_masked + n_unmasked equal segments; m0 hides the even
// segments and m1 the odd ones, identically for every feature.
template <typename Scalar>
MaskPair<Scalar> grating_masks(Eigen::Index W, Eigen::Index K, int n_masked, int n_unmasked) {
  if (n_masked < 1 || n_masked != n_unmasked)
    throw Error(ErrorCategory::config, "grating masks need n_masked == n_unmasked >= 1 (got " +
                                           std::to_string(n_masked) + "+" + std::to_string(n_unmasked) + ")");
  const Eigen::Index segments = n_masked + n_unmasked;
  if (W % segments != 0)
    throw Error(ErrorCategory::config, "window length W=" + std::to_string(W) +
                                           " is not divisible by the segment count " +
                                           std::to_string(segments));
  const Eigen::Index seg_len = W / segments;
  MaskPair<Scalar> pair{Mask<Scalar>::Ones(W, K), Mask<Scalar>::Ones(W, K)};
  for (Eigen::Index s = 0; s < segments; ++s) {
    auto& target = (s % 2 == 0) ? pair.m0 : pair.m1;
    target.middleRows(s * seg_len, seg_len).setZero();
  }
  return pair;
}

// I.i.d. observed indicators with P(missing) = miss_prob; draws that are all
// missing or all observed are redrawn.
template <typename Scalar>
Mask<Scalar> random_mask(Eigen::Index W, Eigen::Index K, double miss_prob, Rng& rng) {
  if (!(miss_prob > 0.0 && miss_prob < 1.0))
    throw Error(ErrorCategory::config, "miss_prob must lie in (0,1)");
  if (W * K < 2) throw Error(ErrorCategory::config, "random mask needs at least two cells");
  std::bernoulli_distribution missing(miss_prob);
  Mask<Scalar> m(W, K);
  for (;;) {
    Eigen::Index n_missing = 0;
    for (Eigen::Index k = 0; k < K; ++k)
      for (Eigen::Index l = 0; l < W; ++l) {
        const bool miss = missing(rng);
        m(l, k) = miss ? Scalar(0) : Scalar(1);
        n_missing += miss;
      }
    if (n_missing > 0 && n_missing < W * K) return m;
  }
}

template <typename Scalar>
Mask<Scalar> ablation_mask(Eigen::Index W, Eigen::Index K, AblationMask mode) {
  if (mode == AblationMask::reconstruction) return Mask<Scalar>::Zero(W, K);
  if (W % 2 != 0)
    throw Error(ErrorCategory::config, "forecasting mask needs an even window, got W=" + std::to_string(W));
  Mask<Scalar> m = Mask<Scalar>::Ones(W, K);
  m.bottomRows(W / 2).setZero();
  return m;
}

// Takes pred0 on the cells hidden by m0 and pred1 on the cells hidden by m1.
template <typename Scalar>
Matrix<Scalar> merge_imputations(const Matrix<Scalar>& pred0, const Matrix<Scalar>& pred1,
                                 const MaskPair<Scalar>& pair) {
  if (pred0.rows() != pair.m0.rows() || pred0.cols() != pair.m0.cols() || pred1.rows() != pair.m1.rows() ||
      pred1.cols() != pair.m1.cols() || pair.m0.rows() != pair.m1.rows() || pair.m0.cols() != pair.m1.cols())
    throw Error(ErrorCategory::data, "merge_imputations: dimension mismatch");
  Matrix<Scalar> out(pred0.rows(), pred0.cols());
  for (Eigen::Index k = 0; k < out.cols(); ++k)
    for (Eigen::Index l = 0; l < out.rows(); ++l) {
      const bool hidden0 = pair.m0(l, k) == Scalar(0);
      const bool hidden1 = pair.m1(l, k) == Scalar(0);
      if (hidden0 == hidden1)
        throw Error(ErrorCategory::data, "merge_imputations: masks are not complementary at (" +
                                             std::to_string(l) + "," + std::to_string(k) + ")");
      out(l, k) = hidden0 ? pred0(l, k) : pred1(l, k);
    }
  return out;
}

enum class MaskScheme { grating, random, forecasting, reconstruction };

std::string_view to_string(MaskScheme scheme);
MaskScheme mask_scheme_from_string(std::string_view name);

struct MaskSettings {
  MaskScheme scheme = MaskScheme::grating;
  int n_masked = 5;
  int n_unmasked = 5;
  double miss_prob = 0.5;
};

// One imputation instance: a mask and the policy id handed to the denoiser.
template <typename Scalar>
struct MaskPass {
  Mask<Scalar> mask;
  int policy = 0;
};

// The imputation instances used for one window. Grating yields the two
// complementary policies, random yields a draw and its complement, and the
// forecasting/reconstruction ablations yield a single pass.
template <typename Scalar>
std::vector<MaskPass<Scalar>> mask_passes(const MaskSettings& settings, Eigen::Index W, Eigen::Index K, Rng& rng) {
  std::vector<MaskPass<Scalar>> passes;
  switch (settings.scheme) {
    case MaskScheme::grating: {
      auto pair = grating_masks<Scalar>(W, K, settings.n_masked, settings.n_unmasked);
      passes.push_back({std::move(pair.m0), pair.policy0});
      passes.push_back({std::move(pair.m1), pair.policy1});
      break;
    }
    case MaskScheme::random: {
      Mask<Scalar> m = random_mask<Scalar>(W, K, settings.miss_prob, rng);
      Mask<Scalar> complement = (Scalar(1) - m.array()).matrix();
      passes.push_back({std::move(m), kSentinelPolicy});
      passes.push_back({std::move(complement), kSentinelPolicy});
      break;
    }
    case MaskScheme::forecasting:
      passes.push_back({ablation_mask<Scalar>(W, K, AblationMask::forecasting), kSentinelPolicy});
      break;
    case MaskScheme::reconstruction:
      passes.push_back({ablation_mask<Scalar>(W, K, AblationMask::reconstruction), kSentinelPolicy});
      break;
  }
  return passes;
}

}  // namespace imdiff
