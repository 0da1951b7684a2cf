#pragma once

#include <string>

#include "metadrop/metalearn.hpp"
#include "metadrop/params.hpp"

namespace metadrop {

/// Named-tensor container, one file, stable layout:
///   magic "MDTN0001"
///   u64 tensor count
///   per tensor: u32 name length, name bytes, u32 rank, i64 dims..., f64
///   values in row-major order. All integers and doubles little endian.
void write_tensors(const std::string& path, const ParamSet& tensors);
ParamSet read_tensors(const std::string& path, bool as_params = false);

struct CheckpointMeta {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::uint64_t iteration = 0;
  int consecutive_failures = 0;
  std::int64_t adam_t_theta = 0, adam_t_phi = 0, adam_t_alpha = 0;
  std::string noise_mode = "none";
};

/// Writes <path> (tensor container holding theta/phi/alpha and Adam moments
/// under prefixed names) and <path>.json (the manifest).
void save_checkpoint(const std::string& path, const MetaState& state,
                     const CheckpointMeta& meta);

/// Restores a state previously saved with save_checkpoint. The state must
/// already have the right parameter structure (same config); shapes are
/// checked.
CheckpointMeta load_checkpoint(const std::string& path, MetaState& state);

}  // namespace metadrop
