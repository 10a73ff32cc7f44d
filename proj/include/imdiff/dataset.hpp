#pragma once

#include "imdiff/types.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace imdiff {

// An L x K multivariate series as read from disk (raw units).
struct RawSeries {
  MatrixXd values;
  std::optional<LabelVector> labels;
  std::string name;
  std::size_t replaced_cells = 0;  // non-finite cells repaired at load time

  Eigen::Index length() const { return values.rows(); }
  Eigen::Index features() const { return values.cols(); }
};

// Per-feature z-score parameters, fitted on the training split.
struct NormStats {
  VectorXd center;
  VectorXd scale;  // strictly positive
};

struct MtsWindow {
  MatrixXd values;  // W x K, normalized
  Eigen::Index start = 0;
  std::optional<LabelVector> labels;
};

struct WindowSet {
  std::vector<MtsWindow> windows;
  // For every timestamp of the source series, the index of the window that
  // supplies its score (the last window covering it).
  std::vector<std::size_t> coverage;
};

enum class SeriesFormat { csv, binary };

inline constexpr double kMinScale = 1e-8;

RawSeries load_raw(const std::filesystem::path& path, SeriesFormat format);

// Reads a single 0/1 column file (an optional non-numeric header line is skipped).
LabelVector load_label_column(const std::filesystem::path& path);

// Writes `series` as a dense row-major float64 matrix plus `<path>.meta`.
void save_binary(const std::filesystem::path& path, const RawSeries& series);
void save_csv(const std::filesystem::path& path, const RawSeries& series);

struct DatasetSplits {
  RawSeries train;
  RawSeries test;  // labels populated from test_label.csv
};

// Validates and loads `<dir>/train.csv`, `<dir>/test.csv`, `<dir>/test_label.csv`.
// Every layout violation is listed in the thrown error.
DatasetSplits load_dataset_dir(const std::filesystem::path& dir);

NormStats fit_normalizer(const RawSeries& train);

MatrixXd normalize(const MatrixXd& values, const NormStats& stats);
MatrixXd denormalize(const MatrixXd& values, const NormStats& stats);

// Non-overlapping windows from index 0, plus an end-aligned final window when
// L is not a multiple of `window`.
WindowSet windowize(const RawSeries& series, const NormStats& stats, Eigen::Index window);

// Windows every `stride` timestamps, again closing with an end-aligned window.
// Coverage records the last window containing each timestamp.
WindowSet windowize_strided(const RawSeries& series, const NormStats& stats, Eigen::Index window,
                            Eigen::Index stride);

}  // namespace imdiff
