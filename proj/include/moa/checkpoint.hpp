#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "moa/tensor.hpp"

namespace moa::ckpt {

inline constexpr uint32_t kFormatVersion = 1;

// Single-file model artifact: a JSON metadata block (run provenance plus a
// named-tensor index) followed by a little-endian f32 payload. Keeping all
// tensors behind one index makes adding, removing, or extracting an expert
// a name-prefix operation.
struct TensorEntry {
  std::string name;
  std::vector<int64_t> shape;
  uint64_t offset = 0;  // bytes from payload start
  uint64_t bytes = 0;
  uint32_t crc = 0;     // crc32 of the payload slice
};

struct Checkpoint {
  uint32_t version = kFormatVersion;
  nlohmann::ordered_json info;     // config, stage, seed, step, tokenizer
  std::vector<TensorEntry> index;  // payload layout, in file order
  // Loaded tensor data; left empty by inspect_checkpoint.
  std::unordered_map<std::string, TensorPtr> tensors;

  // nullptr when the name is absent
  TensorPtr find(const std::string& name) const;
};

uint32_t crc32(const void* data, size_t len);

// Writes atomically: the file appears under `path` only once fully written.
// Tensor names must be unique; only f32 tensors can be stored. An empty
// tensor list is legal (metadata-only artifact).
void save_checkpoint(
    const std::string& path,
    const std::vector<std::pair<std::string, TensorPtr>>& tensors,
    const nlohmann::ordered_json& info);

// Full load: validates magic, version, index bounds, and every tensor's
// checksum, then materializes the tensors.
Checkpoint load_checkpoint(const std::string& path);

// Header-only read (metadata and index, no payload): enough to report
// configs and parameter counts without touching tensor data.
Checkpoint inspect_checkpoint(const std::string& path);

// Copies checkpoint values into every target whose name starts with prefix
// ("" selects all targets). Every selected target must exist in the
// checkpoint with a matching shape. Returns the number of tensors written.
int64_t attach_tensors(
    const Checkpoint& ck,
    const std::vector<std::pair<std::string, TensorPtr>>& targets,
    const std::string& prefix = "");

}  // namespace moa::ckpt
