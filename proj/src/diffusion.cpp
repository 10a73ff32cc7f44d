#include "imdiff/diffusion.hpp"

namespace imdiff {

std::string_view to_string(ScheduleShape shape) {
  return shape == ScheduleShape::quadratic ? "quadratic" : "linear";
}

ScheduleShape schedule_shape_from_string(std::string_view name) {
  if (name == "quadratic") return ScheduleShape::quadratic;
  if (name == "linear") return ScheduleShape::linear;
  throw Error(ErrorCategory::config, "unknown schedule shape '" + std::string(name) + "'");
}

NoiseSchedule schedule_from_betas(const VectorXd& beta, ScheduleShape shape) {
  if (beta.size() < 1) throw Error(ErrorCategory::config, "schedule needs at least one step");
  NoiseSchedule s;
  s.steps = static_cast<int>(beta.size());
  s.shape = shape;
  s.beta = beta;
  s.alpha_bar.resize(beta.size());
  s.tilde_beta.resize(beta.size());
  double prod = 1.0;
  for (Eigen::Index i = 0; i < beta.size(); ++i) {
    if (!(beta(i) > 0.0 && beta(i) < 1.0))
      throw Error(ErrorCategory::config, "beta[" + std::to_string(i + 1) + "] outside (0,1)");
    prod *= 1.0 - beta(i);
    s.alpha_bar(i) = prod;
    s.tilde_beta(i) = i == 0 ? beta(0) : (1.0 - s.alpha_bar(i - 1)) / (1.0 - prod) * beta(i);
  }
  return s;
}

NoiseSchedule build_schedule(int steps, double beta_min, double beta_max, ScheduleShape shape) {
  if (steps < 1) throw Error(ErrorCategory::config, "schedule needs T >= 1");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
    throw Error(ErrorCategory::config, "schedule requires 0 < beta_min <= beta_max < 1");
  VectorXd beta(steps);
  if (steps == 1) {
    beta(0) = beta_max;
  } else {
    for (int t = 0; t < steps; ++t) {
      const double frac = static_cast<double>(t) / (steps - 1);
      if (shape == ScheduleShape::quadratic) {
        const double r = std::sqrt(beta_min) + frac * (std::sqrt(beta_max) - std::sqrt(beta_min));
        beta(t) = r * r;
      } else {
        beta(t) = beta_min + frac * (beta_max - beta_min);
      }
    }
  }
  return schedule_from_betas(beta, shape);
}

}  // namespace imdiff
