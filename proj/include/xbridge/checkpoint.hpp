#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "xbridge/tensor.hpp"

namespace xbridge {

// In-memory image of a run's trainable state: the resolved config echo,
// named arrays in manifest order, and the counters needed to resume a
// deterministic run (per-step seeds are derived, never carried).
struct Checkpoint {
  std::uint32_t version = 1;
  std::string config_json;
  std::int64_t step = 0;
  std::uint64_t seed_state = 0;
  std::vector<std::pair<std::string, Tensor>> arrays;
};

// Wire format: magic "X2I1", u32 little-endian version, u64 little-endian
// JSON header length, UTF-8 JSON header (config echo, step, seed_state,
// array manifest with shapes/dtypes/offsets), then the raw little-endian
// array payloads in manifest order.
std::vector<std::uint8_t> checkpoint_serialize(const Checkpoint& ck);
void checkpoint_save(const Checkpoint& ck, const std::string& path);

// Parses into a fresh value; corrupt magic, unknown version, malformed
// header, or truncated payload throw std::runtime_error, leaving no
// partial state behind.
Checkpoint checkpoint_load(const std::string& path);

// FNV-1a over the serialized byte stream.
std::uint64_t checkpoint_hash(const Checkpoint& ck);

}  // namespace xbridge
