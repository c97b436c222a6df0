#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "clan/tensor.hpp"

namespace clan {

// Container layout (all integers little-endian):
//   "CLAN" | u32 version | u32 count | count x { u32 name_len, name bytes,
//   u32 rank, rank x u32 extent, numel x f64 }
inline constexpr char kCheckpointMagic[4] = {'C', 'L', 'A', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Named tensor values in their double-precision on-disk representation.
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
  bool operator==(const NamedArray&) const = default;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(char((bits >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<NamedArray>& arrays) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, std::uint32_t(arrays.size()));
  for (const auto& a : arrays) {
    if (a.values.size() != numel_of(a.shape)) throw DimensionError("checkpoint entry '" + a.name + "' has inconsistent length");
    detail::put_u32(out, std::uint32_t(a.name.size()));
    out += a.name;
    detail::put_u32(out, std::uint32_t(a.shape.size()));
    for (auto e : a.shape) detail::put_u32(out, std::uint32_t(e));
    for (double v : a.values) detail::put_f64(out, v);
  }
  return out;
}

inline std::vector<NamedArray> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw DataError("not a CLAN checkpoint (bad magic)");
  detail::Reader r(bytes);
  r.str(4);
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.u32();
  std::vector<NamedArray> arrays;
  arrays.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.str(r.u32());
    const auto rank = r.u32();
    for (std::uint32_t d = 0; d < rank; ++d) a.shape.push_back(r.u32());
    const std::size_t n = numel_of(a.shape);
    a.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) a.values[k] = r.f64();
    arrays.push_back(std::move(a));
  }
  if (!r.done()) throw DataError("trailing bytes after checkpoint payload");
  return arrays;
}

inline void write_checkpoint(const std::string& path, const std::vector<NamedArray>& arrays) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw UsageError("cannot open '" + path + "' for writing");
  const std::string bytes = encode_checkpoint(arrays);
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw UsageError("failed writing '" + path + "'");
}

inline std::vector<NamedArray> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <typename T>
NamedArray to_named(const std::string& name, const Tensor<T>& t) {
  return {name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())};
}

/// Copies stored values into an existing tensor; shapes must agree.
template <typename T>
void assign_from(Tensor<T>& t, const NamedArray& a) {
  if (a.shape != t.shape())
    throw DimensionError("checkpoint entry '" + a.name + "' has shape " + to_string(a.shape) + ", expected " + to_string(t.shape()));
  for (std::size_t i = 0; i < a.values.size(); ++i) t[i] = T(a.values[i]);
}

}  // namespace clan
