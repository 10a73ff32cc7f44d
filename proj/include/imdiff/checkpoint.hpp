#pragma once

#include "imdiff/dataset.hpp"
#include "imdiff/denoiser.hpp"
#include "imdiff/diffusion.hpp"
#include "imdiff/masking.hpp"
#include "imdiff/trainer.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace imdiff {

// Everything inference needs to reproduce training: model config, schedule,
// normalizer, masking policy and parameters (float32), plus the optimizer
// state so training can resume.
//
// On disk: the 8-byte magic "IMDIFFCK", a little-endian u32 format version,
// a u64 header length, a JSON header, then the raw float32 blobs listed in
// the header ("blobs": [{"name", "count"}]).
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  DenoiserConfig model;
  NoiseSchedule schedule;
  NormStats stats;
  MaskSettings mask;
  Conditioning conditioning = Conditioning::unconditional;
  int window = 100;

  Vector<float> params;
  std::optional<AdamState<float>> adam;

  int epochs_done = 0;
  std::uint64_t seed = 0;
  std::int64_t training_steps = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  std::string variant = "imputation";

  Denoiser<float> make_model() const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace imdiff
