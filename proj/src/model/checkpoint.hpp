#pragma once

#include <cstdint>
#include <string>

#include "model/vlm.hpp"

namespace countlab {

struct Provenance {
  std::string phase;   // text_pretrain | vision_align | compare_text | compare_vision | init
  int epoch = 0;
  uint64_t seed = 0;
  std::string preset;  // paper | desk
};

// Container layout: 8-byte little-endian header length, JSON header (model
// config, vocab checksum, provenance, tensor directory), then each tensor as
// raw little-endian float32 rows in directory order. Writes are atomic
// (temp file + rename).
void save_checkpoint(const std::string& path, const Vlm<float>& model, uint64_t vocab_checksum,
                     const Provenance& prov);

struct LoadedCheckpoint {
  Vlm<float> model;
  uint64_t vocab_checksum = 0;
  Provenance provenance;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace countlab
