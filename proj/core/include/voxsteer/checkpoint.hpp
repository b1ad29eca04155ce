#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "voxsteer/param_store.hpp"
#include "voxsteer/tensor.hpp"

namespace voxsteer {

// "VSCK" checkpoint container: magic, format version u32, u64 record count,
// per-tensor records (u32 name length + UTF-8 name, u32 rank, extents as u64,
// elements as little-endian f32), then a footer carrying the config hash and
// the RNG seed. Round-trips bit-exactly.
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  std::map<std::string, TensorF> tensors;
  uint64_t config_hash = 0;
  uint64_t rng_seed = 0;
};

void save_checkpoint(const std::map<std::string, TensorF>& tensors, const std::string& path,
                     uint64_t config_hash, uint64_t rng_seed);

CheckpointData load_checkpoint(const std::string& path);

// Store <-> checkpoint adapters. Loading requires every store parameter to be
// present with a matching shape; extra entries (optimizer state and the like)
// are returned to the caller.
std::map<std::string, TensorF> store_tensors(const ParameterStore<float>& store);
std::map<std::string, TensorF> load_into_store(const CheckpointData& ckpt,
                                               ParameterStore<float>& store);

}  // namespace voxsteer
