#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "texbridge/tensor.hpp"

namespace texbridge {

// Single-file checkpoint container:
//   magic "TXBC" | u32le header length | JSON header | raw float32 LE array data
// The header carries step/config_hash/extra plus array names, shapes and order;
// data follows in exactly the header's array order.
struct Checkpoint {
  int64_t step = 0;
  std::string config_hash;         // hash of the producing stage's resolved config
  std::string extra_json = "{}";   // stage-specific metadata (e.g. a diffusion schedule)
  std::vector<std::pair<std::string, TensorF>> arrays;

  const TensorF& array(const std::string& name) const;
  bool has(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);  // MissingArtifactError if absent

}  // namespace texbridge
