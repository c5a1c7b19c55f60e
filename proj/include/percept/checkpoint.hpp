// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint directory: manifest.json (format version, model/codec/schedule
// description, training step, tensor index, lineage) and weights.bin
// (little-endian float32 tensors, back to back).

#include "percept/diffusion.hpp"
#include "percept/dit.hpp"
#include "percept/latent_codec.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace percept {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  using Error::Error;
};

struct CheckpointMeta {
  CodecSpec codec;  // projection is regenerated from (factor, channels, seed)
  ScheduleKind schedule = ScheduleKind::linear;
  int timesteps = 1000;
  long step = 0;
  long adam_step = 0;
  std::string parent_hash;  // empty for a root checkpoint
  std::string note;
};

struct Checkpoint {
  ModelParameters<float> params;
  CheckpointMeta meta;
  /// Present when saved with optimizer state.
  std::optional<ModelParameters<float>> adam_m, adam_v;
  /// Content hash of weights.bin (FNV-1a 64, hex).
  std::string hash;
};

/// Writes into `dir` (created if needed) via a temporary directory and a
/// rename. Returns the weights hash.
std::string save_checkpoint(const std::filesystem::path& dir, const ModelParameters<float>& params, const CheckpointMeta& meta,
                            const ModelParameters<float>* adam_m = nullptr, const ModelParameters<float>* adam_v = nullptr);

Checkpoint load_checkpoint(const std::filesystem::path& dir);

std::string weights_hash(const std::filesystem::path& dir);
std::string fnv1a64_hex(const std::string& bytes);

}  // namespace percept
