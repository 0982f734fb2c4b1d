#pragma once

// Binary checkpoints: named float64 arrays with shapes, schedule parameters,
// a model description and the hash of the producing configuration.

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "disco3d/editor.hpp"
#include "disco3d/nvs.hpp"

namespace disco3d::eval {

struct Checkpoint {
  /// "teacher" or "editor".
  std::string kind;
  /// JSON description of the network and its adapters.
  std::string model;
  ScheduleKind schedule_kind = ScheduleKind::DdpmLinear;
  int schedule_steps = 0;
  std::vector<double> schedule_params;
  uint64_t config_hash = 0;
  std::map<std::string, Tensor> arrays;
  std::map<std::string, bool> trainable;
};

/// Layout: "DC3K", u32 version, u64 config hash, u32 kind/model lengths and
/// bytes, schedule (u32 kind, u32 steps, u32 count, f64 params), u32 array
/// count, then per array: u32 name length, name, u8 dtype (0 = f64), u8
/// trainable, u32 ndim, u64 dims, raw little-endian data.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
/// Throws std::runtime_error on a malformed file. Logs a warning when
/// `expected_hash` is given and differs from the stored hash.
Checkpoint load_checkpoint(const std::string& path, std::optional<uint64_t> expected_hash = std::nullopt);

Checkpoint to_checkpoint(const nvs::Teacher& teacher, uint64_t config_hash);
Checkpoint to_checkpoint(const editor::Editor& editor, uint64_t config_hash);
nvs::Teacher teacher_from_checkpoint(const Checkpoint& ckpt);
editor::Editor editor_from_checkpoint(const Checkpoint& ckpt);

/// FNV-1a 64-bit hash of a string (used on canonical config JSON).
uint64_t fnv1a(const std::string& s);

}  // namespace disco3d::eval
