#include "normfill/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

namespace normfill {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'N', 'F', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

uint32_t get_u32(std::istream& in, const char* what) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (!in) throw std::runtime_error(std::string("checkpoint truncated reading ") + what);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& arrays) {
  std::set<std::string> names;
  for (const auto& a : arrays) {
    if (a.name.empty()) throw std::invalid_argument("checkpoint: empty parameter name");
    if (!names.insert(a.name).second)
      throw std::invalid_argument("checkpoint: duplicate parameter name " + a.name);
    size_t n = 1;
    for (int d : a.dims) {
      if (d <= 0) throw std::invalid_argument("checkpoint: bad dim in " + a.name);
      n *= size_t(d);
    }
    if (n != a.data.size())
      throw std::invalid_argument("checkpoint: dims do not match payload for " + a.name);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, uint32_t(arrays.size()));
  for (const auto& a : arrays) {
    put_u32(out, uint32_t(a.name.size()));
    out.write(a.name.data(), std::streamsize(a.name.size()));
    put_u32(out, uint32_t(a.dims.size()));
    for (int d : a.dims) put_u32(out, uint32_t(d));
    out.write(reinterpret_cast<const char*>(a.data.data()),
              std::streamsize(a.data.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("not a checkpoint file (bad magic): " + path.string());
  const uint32_t version = get_u32(in, "version");
  if (version != kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const uint32_t count = get_u32(in, "entry count");
  std::vector<NamedArray> arrays;
  arrays.reserve(count);
  std::set<std::string> names;
  for (uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    const uint32_t name_len = get_u32(in, "name length");
    if (name_len == 0 || name_len > 4096)
      throw std::runtime_error("checkpoint: implausible name length");
    a.name.resize(name_len);
    in.read(a.name.data(), name_len);
    if (!in) throw std::runtime_error("checkpoint truncated reading name");
    if (!names.insert(a.name).second)
      throw std::runtime_error("checkpoint: duplicate parameter name " + a.name);
    const uint32_t rank = get_u32(in, "rank");
    if (rank > 8) throw std::runtime_error("checkpoint: implausible rank for " + a.name);
    size_t n = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      const uint32_t dim = get_u32(in, "dim");
      if (dim == 0 || dim > (1u << 28)) throw std::runtime_error("checkpoint: bad dim in " + a.name);
      a.dims.push_back(int(dim));
      n *= dim;
    }
    a.data.resize(n);
    in.read(reinterpret_cast<char*>(a.data.data()), std::streamsize(n * sizeof(float)));
    if (!in) throw std::runtime_error("checkpoint truncated reading payload of " + a.name);
    arrays.push_back(std::move(a));
  }
  return arrays;
}

}  // namespace normfill
