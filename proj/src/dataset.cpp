#include "imdiff/dataset.hpp"

#include "imdiff/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace imdiff {
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    std::size_t lead = 0;
    while (lead < cell.size() && cell[lead] == ' ') ++lead;
    out.push_back(cell.substr(lead));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// Empty cells and textual nan/inf become NaN; they are repaired afterwards.
double parse_cell(const std::string& cell, const fs::path& path, std::size_t row) {
  if (cell.empty()) return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec == std::errc() && ptr == cell.data() + cell.size()) return v;
  std::string lower(cell);
  std::transform(lower.begin(), lower.end(), lower.begin(), ::tolower);
  if (lower == "nan" || lower == "-nan" || lower == "inf" || lower == "-inf" || lower == "+inf")
    return std::numeric_limits<double>::quiet_NaN();
  throw Error(ErrorCategory::data,
              path.string() + ": unparsable value '" + cell + "' at data row " + std::to_string(row));
}

std::size_t repair_non_finite(MatrixXd& values) {
  std::size_t replaced = 0;
  for (Eigen::Index k = 0; k < values.cols(); ++k) {
    double last = 0.0;
    bool have_last = false;
    for (Eigen::Index l = 0; l < values.rows(); ++l) {
      double& v = values(l, k);
      if (std::isfinite(v)) {
        last = v;
        have_last = true;
      } else {
        v = have_last ? last : 0.0;
        ++replaced;
      }
    }
  }
  return replaced;
}

LabelVector to_binary_labels(const std::vector<double>& raw, const fs::path& path) {
  LabelVector labels(static_cast<Eigen::Index>(raw.size()));
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] != 0.0 && raw[i] != 1.0)
      throw Error(ErrorCategory::data, path.string() + ": label column non-binary (value " +
                                           std::to_string(raw[i]) + " at row " +
                                           std::to_string(i) + ")");
    labels(static_cast<Eigen::Index>(i)) = static_cast<int>(raw[i]);
  }
  return labels;
}

RawSeries load_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCategory::data, path.string() + ": zero rows");
  const auto header = split_csv_line(line);
  std::optional<std::size_t> label_col;
  for (std::size_t c = 0; c < header.size(); ++c)
    if (header[c] == "label") label_col = c;
  const std::size_t n_cols = header.size();
  const std::size_t n_features = n_cols - (label_col ? 1 : 0);
  if (n_features == 0) throw Error(ErrorCategory::data, path.string() + ": no feature columns");

  std::vector<double> cells;
  std::vector<double> label_values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto parts = split_csv_line(line);
    if (parts.size() != n_cols)
      throw Error(ErrorCategory::data, path.string() + ": row " + std::to_string(rows) + " has " +
                                           std::to_string(parts.size()) + " cells, expected " +
                                           std::to_string(n_cols));
    for (std::size_t c = 0; c < n_cols; ++c) {
      const double v = parse_cell(parts[c], path, rows);
      if (label_col && c == *label_col)
        label_values.push_back(v);
      else
        cells.push_back(v);
    }
    ++rows;
  }
  if (rows == 0) throw Error(ErrorCategory::data, path.string() + ": zero rows");

  RawSeries series;
  series.name = path.stem().string();
  series.values = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      cells.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n_features));
  if (label_col) series.labels = to_binary_labels(label_values, path);
  series.replaced_cells = repair_non_finite(series.values);
  return series;
}

std::map<std::string, std::string> read_meta(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::io, "cannot open metadata " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCategory::data, path.string() + ": malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

RawSeries load_binary(const fs::path& path) {
  const fs::path meta_path = path.string() + ".meta";
  auto meta = read_meta(meta_path);
  for (const char* key : {"L", "K", "dtype"})
    if (!meta.count(key))
      throw Error(ErrorCategory::data, meta_path.string() + ": missing key '" + key + "'");
  const long rows = std::stol(meta["L"]);
  const long cols = std::stol(meta["K"]);
  const std::string dtype = meta["dtype"];
  if (rows <= 0) throw Error(ErrorCategory::data, path.string() + ": zero rows");
  if (cols <= 0) throw Error(ErrorCategory::data, path.string() + ": no feature columns");
  if (dtype != "float64" && dtype != "float32")
    throw Error(ErrorCategory::data, meta_path.string() + ": unsupported dtype " + dtype);

  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCategory::io, "cannot open " + path.string());
  const std::size_t n = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  std::vector<double> cells(n);
  if (dtype == "float64") {
    in.read(reinterpret_cast<char*>(cells.data()), static_cast<std::streamsize>(n * sizeof(double)));
  } else {
    std::vector<float> tmp(n);
    in.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * sizeof(float)));
    std::copy(tmp.begin(), tmp.end(), cells.begin());
  }
  if (!in) throw Error(ErrorCategory::data, path.string() + ": file shorter than L*K cells");

  RawSeries series;
  series.name = path.stem().string();
  series.values = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      cells.data(), rows, cols);
  series.replaced_cells = repair_non_finite(series.values);
  return series;
}

}  // namespace

RawSeries load_raw(const fs::path& path, SeriesFormat format) {
  if (!fs::exists(path)) throw Error(ErrorCategory::io, "missing file " + path.string());
  return format == SeriesFormat::csv ? load_csv(path) : load_binary(path);
}

LabelVector load_label_column(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::io, "missing file " + path.string());
  std::vector<double> raw;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty()) continue;
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), v);
    if (ec != std::errc() || ptr != line.data() + line.size()) {
      if (first) {
        first = false;
        continue;
      }
      throw Error(ErrorCategory::data, path.string() + ": unparsable label '" + line + "'");
    }
    first = false;
    raw.push_back(v);
  }
  if (raw.empty()) throw Error(ErrorCategory::data, path.string() + ": zero rows");
  return to_binary_labels(raw, path);
}

void save_binary(const fs::path& path, const RawSeries& series) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCategory::io, "cannot write " + path.string());
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = series.values;
  out.write(reinterpret_cast<const char*>(rm.data()),
            static_cast<std::streamsize>(rm.size() * sizeof(double)));
  std::ofstream meta(path.string() + ".meta");
  meta << "L=" << series.length() << "\nK=" << series.features() << "\ndtype=float64\n";
}

void save_csv(const fs::path& path, const RawSeries& series) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCategory::io, "cannot write " + path.string());
  out.precision(17);
  for (Eigen::Index k = 0; k < series.features(); ++k) out << (k ? "," : "") << 'f' << k;
  if (series.labels) out << ",label";
  out << '\n';
  for (Eigen::Index l = 0; l < series.length(); ++l) {
    for (Eigen::Index k = 0; k < series.features(); ++k) out << (k ? "," : "") << series.values(l, k);
    if (series.labels) out << ',' << (*series.labels)(l);
    out << '\n';
  }
}

DatasetSplits load_dataset_dir(const fs::path& dir) {
  std::vector<std::string> problems;
  if (!fs::is_directory(dir)) {
    throw Error(ErrorCategory::io, "dataset directory does not exist: " + dir.string());
  }
  for (const char* f : {"train.csv", "test.csv", "test_label.csv"})
    if (!fs::exists(dir / f)) problems.push_back("missing " + (dir / f).string());
  if (!problems.empty()) {
    std::string msg = "dataset layout invalid:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw Error(ErrorCategory::data, msg);
  }

  DatasetSplits splits{load_raw(dir / "train.csv", SeriesFormat::csv),
                       load_raw(dir / "test.csv", SeriesFormat::csv)};
  splits.train.name = dir.filename().string() + "/train";
  splits.test.name = dir.filename().string() + "/test";
  splits.test.labels = load_label_column(dir / "test_label.csv");
  if (splits.train.features() != splits.test.features())
    problems.push_back("train has " + std::to_string(splits.train.features()) +
                       " features but test has " + std::to_string(splits.test.features()));
  if (splits.test.labels->size() != splits.test.length())
    problems.push_back("test_label.csv has " + std::to_string(splits.test.labels->size()) +
                       " rows but test.csv has " + std::to_string(splits.test.length()));
  if (!problems.empty()) {
    std::string msg = "dataset layout invalid:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw Error(ErrorCategory::data, msg);
  }
  return splits;
}

NormStats fit_normalizer(const RawSeries& train) {
  if (train.length() < 2)
    throw Error(ErrorCategory::data, "fit_normalizer needs at least 2 rows, got " +
                                         std::to_string(train.length()));
  NormStats stats;
  stats.center = train.values.colwise().mean().transpose();
  const MatrixXd centered = train.values.rowwise() - stats.center.transpose();
  stats.scale = (centered.array().square().colwise().sum() / static_cast<double>(train.length()))
                    .sqrt()
                    .transpose();
  stats.scale = stats.scale.cwiseMax(kMinScale);
  return stats;
}

MatrixXd normalize(const MatrixXd& values, const NormStats& stats) {
  return ((values.rowwise() - stats.center.transpose()).array().rowwise() /
          stats.scale.transpose().array())
      .matrix();
}

MatrixXd denormalize(const MatrixXd& values, const NormStats& stats) {
  return ((values.array().rowwise() * stats.scale.transpose().array()).matrix().rowwise() +
          stats.center.transpose());
}

WindowSet windowize_strided(const RawSeries& series, const NormStats& stats, Eigen::Index window,
                            Eigen::Index stride) {
  const Eigen::Index L = series.length();
  if (window <= 0 || stride <= 0)
    throw Error(ErrorCategory::config, "window and stride must be positive");
  if (window > L)
    throw Error(ErrorCategory::data, "window " + std::to_string(window) +
                                         " exceeds series length " + std::to_string(L));
  if (stats.center.size() != series.features())
    throw Error(ErrorCategory::data, "normalizer has " + std::to_string(stats.center.size()) +
                                         " features, series has " +
                                         std::to_string(series.features()));

  std::vector<Eigen::Index> starts;
  for (Eigen::Index s = 0; s + window <= L; s += stride) starts.push_back(s);
  if (starts.back() + window < L) starts.push_back(L - window);

  const MatrixXd normalized = normalize(series.values, stats);
  WindowSet set;
  set.coverage.assign(static_cast<std::size_t>(L), 0);
  for (std::size_t i = 0; i < starts.size(); ++i) {
    MtsWindow w;
    w.start = starts[i];
    w.values = normalized.middleRows(w.start, window);
    if (series.labels) w.labels = series.labels->segment(w.start, window);
    for (Eigen::Index l = w.start; l < w.start + window; ++l) set.coverage[static_cast<std::size_t>(l)] = i;
    set.windows.push_back(std::move(w));
  }
  return set;
}

WindowSet windowize(const RawSeries& series, const NormStats& stats, Eigen::Index window) {
  return windowize_strided(series, stats, window, window);
}

}  // namespace imdiff
