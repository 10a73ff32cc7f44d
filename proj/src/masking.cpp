#include "imdiff/masking.hpp"

namespace imdiff {

std::string_view to_string(MaskScheme scheme) {
  switch (scheme) {
    case MaskScheme::grating: return "grating";
    case MaskScheme::random: return "random";
    case MaskScheme::forecasting: return "forecasting";
    case MaskScheme::reconstruction: return "reconstruction";
  }
  return "grating";
}

MaskScheme mask_scheme_from_string(std::string_view name) {
  if (name == "grating") return MaskScheme::grating;
  if (name == "random") return MaskScheme::random;
  if (name == "forecasting") return MaskScheme::forecasting;
  if (name == "reconstruction") return MaskScheme::reconstruction;
  throw Error(ErrorCategory::config, "unknown mask scheme '" + std::string(name) + "'");
}

template MaskPair<float> grating_masks<float>(Eigen::Index, Eigen::Index, int, int);
template MaskPair<double> grating_masks<double>(Eigen::Index, Eigen::Index, int, int);
template Matrix<float> merge_imputations<float>(const Matrix<float>&, const Matrix<float>&, const MaskPair<float>&);
template Matrix<double> merge_imputations<double>(const Matrix<double>&, const Matrix<double>&,
                                                  const MaskPair<double>&);

}  // namespace imdiff
