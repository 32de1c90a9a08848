// Named parameter registry and its binary serialization.
//
// File layout (all integers little-endian):
//   magic    8 bytes  "RSERPRM1"
//   u64      length of the embedded header text, then that many bytes
//   u64      number of entries
//   per entry:
//     u32 name length, name bytes
//     u8  trainable flag
//     u32 rank, rank x u64 dims
//     numel x f64 values (IEEE-754 binary64, row-major)
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "rawser/tensor.hpp"

namespace rawser {

static_assert(std::endian::native == std::endian::little, "parameter files assume a little-endian host");

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool trainable = true;  // false for running statistics
};

using ParamList = std::vector<NamedParam>;

class SerializationError : public Error {
 public:
  using Error::Error;
};

inline constexpr char kParamMagic[9] = "RSERPRM1";

inline std::string serialize_params(const ParamList& params, const std::string& header = {}) {
  std::string out(kParamMagic, 8);
  auto put = [&out](const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); };
  const std::uint64_t hlen = header.size();
  put(&hlen, 8);
  out += header;
  const std::uint64_t count = params.size();
  put(&count, 8);
  for (const auto& p : params) {
    const auto nlen = static_cast<std::uint32_t>(p.name.size());
    put(&nlen, 4);
    out += p.name;
    const std::uint8_t tr = p.trainable ? 1 : 0;
    put(&tr, 1);
    const auto rank = static_cast<std::uint32_t>(p.tensor.rank());
    put(&rank, 4);
    for (std::size_t d : p.tensor.shape()) {
      const std::uint64_t dim = d;
      put(&dim, 8);
    }
    put(p.tensor.data().data(), p.tensor.size() * sizeof(double));
  }
  return out;
}

struct ParamFile {
  std::string header;
  ParamList params;
};

inline ParamFile deserialize_params(const std::string& bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size()) throw SerializationError("parameter file truncated at byte " + std::to_string(pos));
  };
  auto get = [&](void* p, std::size_t n) {
    need(n);
    std::memcpy(p, bytes.data() + pos, n);
    pos += n;
  };
  need(8);
  if (bytes.compare(0, 8, kParamMagic) != 0) throw SerializationError("not a parameter file (bad magic)");
  pos = 8;
  ParamFile f;
  std::uint64_t hlen = 0;
  get(&hlen, 8);
  need(hlen);
  f.header = bytes.substr(pos, hlen);
  pos += hlen;
  std::uint64_t count = 0;
  get(&count, 8);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t nlen = 0;
    get(&nlen, 4);
    need(nlen);
    NamedParam p;
    p.name = bytes.substr(pos, nlen);
    pos += nlen;
    std::uint8_t tr = 0;
    get(&tr, 1);
    p.trainable = tr != 0;
    std::uint32_t rank = 0;
    get(&rank, 4);
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint64_t dim = 0;
      get(&dim, 8);
      d = dim;
    }
    std::vector<double> values(shape_numel(shape));
    get(values.data(), values.size() * sizeof(double));
    p.tensor = Tensor::from(std::move(shape), std::move(values), p.trainable);
    f.params.push_back(std::move(p));
  }
  if (pos != bytes.size()) throw SerializationError("trailing bytes after parameter entries");
  return f;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace rawser
