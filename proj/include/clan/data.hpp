#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "clan/rng.hpp"
#include "clan/tensor.hpp"

namespace clan {

enum class Split { Train, Test };

/// Micro fine-grained task: every image shows a random class-independent
/// base shape; the label lives only in a small binary patch pattern placed
/// at a uniformly random location.
struct SyntheticSpec {
  std::size_t num_classes = 8;
  std::size_t image_size = 32;
  std::size_t base_shapes = 3;
  std::size_t patch_size = 4;
  double noise_std = 0.05;
  std::size_t samples_per_class = 200;
  std::size_t test_samples_per_class = 100;
  std::uint64_t seed = 1;

  bool operator==(const SyntheticSpec&) const = default;

  void validate() const {
    if (num_classes < 1) throw ConfigError("data: num_classes must be >= 1");
    if (image_size == 0) throw ConfigError("data: image_size must be positive");
    if (patch_size > image_size) throw ConfigError("data: patch_size larger than image");
    if (patch_size * 4 >= image_size && patch_size > 0)
      throw ConfigError("data: patch_size must stay below image_size / 4 to keep the cue local");
    if (base_shapes == 0) throw ConfigError("data: base_shapes must be >= 1");
    if (noise_std < 0) throw ConfigError("data: noise_std must be >= 0");
  }

  std::size_t count(Split split) const { return num_classes * (split == Split::Train ? samples_per_class : test_samples_per_class); }
};

struct Sample {
  Tensor<double> image;  // 3 x S x S, values in [0, 1]
  int label = 0;
  std::size_t patch_row = 0;
  std::size_t patch_col = 0;
};

inline constexpr double kPatchOn[3] = {0.95, 0.85, 0.10};
inline constexpr double kPatchOff[3] = {0.10, 0.10, 0.35};

/// Binary pattern (row-major, patch_size^2 cells) identifying class c.
/// Patterns are pairwise at least a quarter of the cells apart.
inline std::vector<std::vector<std::uint8_t>> class_patterns(const SyntheticSpec& spec) {
  const std::size_t cells = spec.patch_size * spec.patch_size;
  std::vector<std::vector<std::uint8_t>> out;
  if (cells == 0) return out;
  const std::size_t min_dist = std::max<std::size_t>(1, cells / 4);
  Rng rng(derive_seed(spec.seed, 0x7a77e54, spec.patch_size));
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100000) throw ConfigError("data: cannot find distinct patch patterns for this many classes");
      std::vector<std::uint8_t> p(cells);
      for (auto& v : p) v = std::uint8_t(rng.below(2));
      const std::size_t on = std::accumulate(p.begin(), p.end(), std::size_t{0});
      if (cells > 1 && (on == 0 || on == cells)) continue;
      bool distinct = true;
      for (const auto& q : out) {
        std::size_t d = 0;
        for (std::size_t i = 0; i < cells; ++i) d += p[i] != q[i];
        distinct = distinct && d >= min_dist;
      }
      if (distinct) {
        out.push_back(std::move(p));
        break;
      }
    }
  }
  return out;
}

namespace detail {

inline bool inside_shape(std::size_t kind, double dy, double dx, double r) {
  switch (kind % 5) {
    case 0: return dy * dy + dx * dx <= r * r;                                   // disc
    case 1: return std::abs(dy) <= r * 0.8 && std::abs(dx) <= r * 0.8;           // square
    case 2: return dy <= r * 0.7 && dy >= -r && std::abs(dx) <= (dy + r) * 0.55;  // triangle
    case 3: {
      const double d2 = dy * dy + dx * dx;
      return d2 <= r * r && d2 >= 0.36 * r * r;  // ring
    }
    default:  // cross
      return std::abs(dy) <= r && std::abs(dx) <= r && (std::abs(dy) <= r * 0.3 || std::abs(dx) <= r * 0.3);
  }
}

}  // namespace detail

/// Sample `index` of a split. Each sample owns a random stream keyed by
/// (seed, split, index), so generation order does not matter.
inline Sample synth_sample(const SyntheticSpec& spec, Split split, std::size_t index,
                           const std::vector<std::vector<std::uint8_t>>& patterns) {
  const std::size_t S = spec.image_size, P = spec.patch_size;
  Rng rng(derive_seed(spec.seed, split == Split::Train ? 1 : 2, index));
  Sample s;
  s.label = int(index % spec.num_classes);
  s.image = Tensor<double>({3, S, S});
  auto px = s.image.data();

  double bg[3], fg[3];
  for (double& v : bg) v = rng.uniform(0.25, 0.6);
  for (double& v : fg) v = rng.uniform(0.3, 0.9);
  const std::size_t kind = rng.below(spec.base_shapes);
  const double r = rng.uniform(0.25, 0.4) * double(S);
  const double cy = rng.uniform(0.35, 0.65) * double(S), cx = rng.uniform(0.35, 0.65) * double(S);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const bool in = detail::inside_shape(kind, double(y) + 0.5 - cy, double(x) + 0.5 - cx, r);
      for (std::size_t c = 0; c < 3; ++c) px[(c * S + y) * S + x] = in ? fg[c] : bg[c];
    }

  if (P > 0) {
    s.patch_row = rng.below(S - P + 1);
    s.patch_col = rng.below(S - P + 1);
    const auto& pat = patterns.at(std::size_t(s.label));
    for (std::size_t u = 0; u < P; ++u)
      for (std::size_t v = 0; v < P; ++v) {
        const bool on = pat[u * P + v] != 0;
        for (std::size_t c = 0; c < 3; ++c) px[(c * S + s.patch_row + u) * S + s.patch_col + v] = on ? kPatchOn[c] : kPatchOff[c];
      }
  }
  if (spec.noise_std > 0)
    for (auto& v : px) v += spec.noise_std * rng.normal();
  for (auto& v : px) v = std::clamp(v, 0.0, 1.0);
  return s;
}

/// Whole split, labels interleaved (index % num_classes) so every class has
/// exactly its per-class count.
inline std::vector<Sample> synth_generate(const SyntheticSpec& spec, Split split) {
  spec.validate();
  const auto patterns = class_patterns(spec);
  std::vector<Sample> out;
  const std::size_t n = spec.count(split);
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(synth_sample(spec, split, i, patterns));
  return out;
}

template <typename T>
struct Batch {
  Tensor<T> images;  // b x 3 x S x S
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

template <typename T>
Batch<T> make_batch(const std::vector<Sample>& data, std::span<const std::size_t> indices) {
  const Shape& s = data.at(indices.front()).image.shape();
  const std::size_t per = numel_of(s);
  Batch<T> b;
  b.images = Tensor<T>({indices.size(), s[0], s[1], s[2]});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& src = data.at(indices[i]).image;
    for (std::size_t q = 0; q < per; ++q) b.images[i * per + q] = T(src[q]);
    b.labels.push_back(data[indices[i]].label);
    b.indices.push_back(indices[i]);
  }
  return b;
}

/// Epoch-deterministic shuffle keyed by (seed, epoch); the last batch may be
/// partial.
template <typename T>
std::vector<Batch<T>> iterate_batches(const std::vector<Sample>& data, std::size_t batch, std::uint64_t seed, std::uint64_t epoch) {
  if (data.empty()) throw UsageError("iterate_batches: empty dataset");
  if (batch == 0) throw UsageError("iterate_batches: batch size must be >= 1");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0xba7c4, epoch));
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  std::vector<Batch<T>> out;
  for (std::size_t start = 0; start < order.size(); start += batch) {
    const std::size_t n = std::min(batch, order.size() - start);
    out.push_back(make_batch<T>(data, std::span<const std::size_t>(order.data() + start, n)));
  }
  return out;
}

/// Binary P6 with maxval 255; byte = floor(255 v + 0.5).
template <typename T>
std::string encode_ppm(const Tensor<T>& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw DimensionError("ppm: expected 3 x H x W image, got " + to_string(img.shape()));
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + 3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = double(img[(c * h + y) * w + x]);
        if (!(v >= 0.0 && v <= 1.0)) throw DataError("ppm: value " + std::to_string(v) + " outside [0, 1]");
        out.push_back(char(std::uint8_t(std::floor(255.0 * v + 0.5))));
      }
  return out;
}

template <typename T>
void write_image_ppm(const Tensor<T>& img, const std::string& path) {
  const std::string bytes = encode_ppm(img);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw UsageError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), std::streamsize(bytes.size()));
}

/// Decodes a P6 file written by encode_ppm (maxval 255, no comments).
inline Tensor<double> decode_ppm(const std::string& bytes) {
  std::istringstream is(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w == 0 || h == 0) throw DataError("ppm: unsupported header");
  is.get();
  const std::size_t off = std::size_t(is.tellg());
  if (bytes.size() < off + 3 * w * h) throw DataError("ppm: truncated pixel data");
  Tensor<double> img({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img[(c * h + y) * w + x] = double(std::uint8_t(bytes[off + (y * w + x) * 3 + c])) / 255.0;
  return img;
}

inline Tensor<double> read_image_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot open '" + path + "'");
  return decode_ppm(std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()));
}

}  // namespace clan
