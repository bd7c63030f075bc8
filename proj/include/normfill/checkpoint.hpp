#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace normfill {

struct NamedArray {
  std::string name;
  std::vector<int> dims;
  std::vector<float> data;
};

/// Binary checkpoint: magic "NFCK", u32 version, u32 count, then per entry
/// u32 name length, name bytes, u32 rank, u32 dims, raw float32 payload.
/// All integers and floats little-endian.
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path);

}  // namespace normfill
