// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: magic "UPRL", u32 LE format version, then per-tensor
// records of (u32 LE name length, name bytes, u32 LE rank, u32 LE dims,
// f64 LE values). Round-trips are bit-exact.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "uprl/tensor.hpp"

namespace uprl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Throws std::runtime_error on IO failure.
void save_checkpoint(const std::string& path, const NamedTensors& tensors);

// Throws std::runtime_error on IO failure or malformed content
// (bad magic, unsupported version, truncated records).
NamedTensors load_checkpoint(const std::string& path);

// Copies values into same-named destination tensors; every destination name
// must be present with matching shape, and no extra names may remain.
void load_checkpoint_into(const std::string& path, NamedTensors& dest);

}  // namespace uprl
