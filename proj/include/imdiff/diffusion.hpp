#pragma once

#include "imdiff/error.hpp"
#include "imdiff/types.hpp"

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

namespace imdiff {

enum class ScheduleShape { quadratic, linear };

std::string_view to_string(ScheduleShape shape);
ScheduleShape schedule_shape_from_string(std::string_view name);

// Variance schedule of the forward Markov chain. Steps are 1-based in the
// accessors; the vectors are stored 0-based.
struct NoiseSchedule {
  int steps = 0;
  ScheduleShape shape = ScheduleShape::quadratic;
  VectorXd beta;
  VectorXd alpha_bar;
  VectorXd tilde_beta;  // posterior variance of the reverse transition

  double beta_at(int t) const { return beta(t - 1); }
  double alpha_bar_at(int t) const { return alpha_bar(t - 1); }
  double tilde_beta_at(int t) const { return tilde_beta(t - 1); }

  void check_step(int t) const {
    if (t < 1 || t > steps)
      throw Error(ErrorCategory::config,
                  "diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
  }
};

NoiseSchedule build_schedule(int steps, double beta_min, double beta_max, ScheduleShape shape);

// Rebuilds the derived tables from an explicit beta vector (checkpoint load).
NoiseSchedule schedule_from_betas(const VectorXd& beta, ScheduleShape shape);

// Closed-form marginal q(x_t | x_0).
template <typename Derived, typename DerivedEps>
Matrix<typename Derived::Scalar> forward_corrupt(const Eigen::MatrixBase<Derived>& x0, int t,
                                                 const Eigen::MatrixBase<DerivedEps>& eps,
                                                 const NoiseSchedule& sched) {
  using Scalar = typename Derived::Scalar;
  sched.check_step(t);
  const double ab = sched.alpha_bar_at(t);
  return static_cast<Scalar>(std::sqrt(ab)) * x0 + static_cast<Scalar>(std::sqrt(1.0 - ab)) * eps;
}

template <typename Scalar>
struct ForwardTrajectory {
  std::vector<Matrix<Scalar>> noises;  // noises[t-1] = eps_t
  std::vector<Matrix<Scalar>> states;  // states[t-1] = X_t

  const Matrix<Scalar>& state_at(int t) const { return states[static_cast<std::size_t>(t - 1)]; }
  const Matrix<Scalar>& noise_at(int t) const { return noises[static_cast<std::size_t>(t - 1)]; }
};

// Runs the chain X_t = sqrt(1-beta_t) X_{t-1} + sqrt(beta_t) eps_t step by step.
template <typename Scalar>
ForwardTrajectory<Scalar> record_forward_trajectory(const Matrix<Scalar>& x0, const NoiseSchedule& sched,
                                                    Rng& rng) {
  ForwardTrajectory<Scalar> traj;
  traj.noises.reserve(static_cast<std::size_t>(sched.steps));
  traj.states.reserve(static_cast<std::size_t>(sched.steps));
  const Matrix<Scalar>* prev = &x0;
  for (int t = 1; t <= sched.steps; ++t) {
    traj.noises.push_back(standard_normal<Scalar>(x0.rows(), x0.cols(), rng));
    const double b = sched.beta_at(t);
    traj.states.push_back(static_cast<Scalar>(std::sqrt(1.0 - b)) * (*prev) +
                          static_cast<Scalar>(std::sqrt(b)) * traj.noises.back());
    prev = &traj.states.back();
  }
  return traj;
}

// One ancestral sampling step of the reverse chain:
//   mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(1 - beta_t)
//   x_{t-1} = mu + sqrt(tilde_beta_t) * z
template <typename DX, typename DE, typename DZ>
Matrix<typename DX::Scalar> reverse_step(const Eigen::MatrixBase<DX>& x_t, const Eigen::MatrixBase<DE>& eps_hat,
                                         int t, const NoiseSchedule& sched, const Eigen::MatrixBase<DZ>& z) {
  using Scalar = typename DX::Scalar;
  sched.check_step(t);
  const double b = sched.beta_at(t);
  const double eps_coef = b / std::sqrt(1.0 - sched.alpha_bar_at(t));
  const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - b);
  return static_cast<Scalar>(inv_sqrt_alpha) * (x_t - static_cast<Scalar>(eps_coef) * eps_hat) +
         static_cast<Scalar>(std::sqrt(sched.tilde_beta_at(t))) * z;
}

}  // namespace imdiff
