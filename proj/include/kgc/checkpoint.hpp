#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kgc/param.hpp"
#include "kgc/tensor.hpp"

namespace kgc {

// Versioned binary container: magic, format version, content checksum,
// free-form metadata, then name -> shape + little-endian float64 payload.
// Integers and floats are packed byte-by-byte, independent of host order.

constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::string metadata_json;
  std::map<std::string, CheckpointEntry> tensors;
};

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t len);

std::vector<std::uint8_t> serialize_params(const std::vector<const Parameter*>& params,
                                           const std::string& metadata_json);
void write_checkpoint(const std::string& path, const std::vector<const Parameter*>& params,
                      const std::string& metadata_json);
Checkpoint read_checkpoint(const std::string& path);
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

// Copies stored values into matching parameters. Missing entries or shape
// mismatches raise config_error (checkpoint/config version skew).
void apply_checkpoint(const Checkpoint& ckpt, const ParamList& params);

}  // namespace kgc
