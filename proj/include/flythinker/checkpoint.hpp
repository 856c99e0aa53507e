// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

// Checkpoint container, little-endian throughout:
//   "FTCKPT\0\0" | u32 version | u64 config hash | u32 n + n bytes header JSON
//   | u32 tensor count | index entries | float32 payload | u64 FNV-1a of all
//   preceding bytes
// Index entry: u32 name length, name, u32 rank, u64 dims[rank], u64 payload
// offset, u64 byte count.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "flythinker/trainer.hpp"

namespace flythinker {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t config_hash = 0;
  ModelConfig generator;
  ModelConfig reasoner;
  FusionConfig fusion;
  Policy policy = Policy::flythinker;
  std::uint64_t step = 0;
  std::uint64_t adam_t = 0;
  std::string rng_state;
  // generator/..., reasoner/..., projection/..., adam.m/<group>/..., adam.v/<group>/...
  std::map<std::string, Tensor<float>> tensors;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

Checkpoint capture_checkpoint(const Trainer<float>& trainer, std::uint64_t config_hash);
// Everything is validated before the trainer is touched.
void restore_checkpoint(Trainer<float>& trainer, const Checkpoint& ckpt);
FlyThinkerModel<float> model_from_checkpoint(const Checkpoint& ckpt);

// Fails with ConfigMismatchError when either model config differs.
void check_model_configs(const Checkpoint& ckpt, const ModelConfig& generator, const ModelConfig& reasoner);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

std::uint64_t parse_hash(const std::string& hex);

}  // namespace flythinker
