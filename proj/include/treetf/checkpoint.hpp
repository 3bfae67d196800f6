#pragma once

// Checkpoint container, little-endian throughout:
//
//   magic    8 bytes  "TTFCKPT\0"
//   version  u32      kCheckpointVersion
//   meta     u64 length + UTF-8 bytes (free-form "key=value" lines)
//   count    u64      number of tensors
//   per tensor:
//     name   u32 length + bytes
//     rank   u32
//     dims   rank x u64
//     data   numel x f64 (IEEE-754 binary64)

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "treetf/tensor.hpp"

namespace treetf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::string metadata;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace treetf
