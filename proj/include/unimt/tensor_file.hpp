#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "unimt/tensor.hpp"

namespace unimt {

/// Binary parameter file: 8-byte magic, u32 version, u64 header length, a
/// JSON header {config, step, tensors, extra}, then value, first moment and
/// second moment of every tensor as little-endian float32.
struct TensorFile {
  struct Entry {
    std::string name;
    Mat<float> value, m, v;
  };
  std::string config_json = "{}";
  std::int64_t step = 0;
  std::string extra_json = "{}";
  std::vector<Entry> entries;
};

/// Writes through a temporary file and a rename.
void write_tensor_file(const std::string& path, std::string_view magic, const TensorFile& file);
TensorFile read_tensor_file(const std::string& path, std::string_view magic);

}  // namespace unimt
