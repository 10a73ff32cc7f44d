#pragma once

#include "imdiff/denoiser.hpp"
#include "imdiff/detector.hpp"
#include "imdiff/diffusion.hpp"
#include "imdiff/masking.hpp"
#include "imdiff/trainer.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace imdiff {

struct ScheduleConfig {
  int steps = 50;
  double beta_min = 1e-4;
  double beta_max = 0.5;
  ScheduleShape shape = ScheduleShape::quadratic;

  NoiseSchedule build() const { return build_schedule(steps, beta_min, beta_max, shape); }
};

// A whole experiment in one file. The mask scheme, conditioning and
// transformer switches are not stored: they follow from `mode`.
struct ExperimentConfig {
  std::filesystem::path dataset;  // directory holding train.csv/test.csv/test_label.csv
  std::string dataset_name;       // defaults to the directory name
  int window = 100;
  MaskSettings mask;
  ScheduleConfig schedule;
  DenoiserConfig model;
  TrainConfig train;
  EnsembleConfig ensemble;
  Variant mode = Variant::imputation;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5};
  int workers = 1;
  std::filesystem::path out = "runs";
  bool plot = true;

  void validate() const;
  std::string name() const;
};

// Serializes every field, defaults included.
std::string to_json_string(const ExperimentConfig& cfg);

// Parses a config document; absent keys keep their defaults, unknown keys are
// rejected so typos cannot silently fall back to defaults.
ExperimentConfig config_from_json_string(const std::string& text);

inline constexpr std::string_view kEnvPrefix = "IMDIFF_";

// Environment overrides: IMDIFF_TRAIN__EPOCHS=5 sets train.epochs. Values are
// parsed as JSON when possible, otherwise taken as strings.
using EnvMap = std::map<std::string, std::string>;
EnvMap collect_env(const char* const* envp);
std::string apply_env_overrides(const std::string& json_text, const EnvMap& env);

// File (optional) < environment < caller-applied flags.
ExperimentConfig load_config(const std::filesystem::path& path, const EnvMap& env);

}  // namespace imdiff
