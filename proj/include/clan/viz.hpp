#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "clan/data.hpp"
#include "clan/model.hpp"

namespace clan {

/// Min-max scales a single-channel map (any rank, 1 x 1 x h x w typical) to
/// [0, 1]. A constant map becomes all zeros.
template <typename T>
std::vector<double> normalize_minmax(const Tensor<T>& map) {
  std::vector<double> out(map.data().begin(), map.data().end());
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
  const double mn = *lo, mx = *hi;
  for (auto& v : out) v = mx > mn ? (v - mn) / (mx - mn) : 0.0;
  return out;
}

/// Gray h x w values -> 3 x size x size image by nearest replication.
inline Tensor<double> gray_to_rgb(const std::vector<double>& values, std::size_t h, std::size_t w, std::size_t size) {
  if (size % h || size % w) throw ConfigError("viz: map " + std::to_string(h) + "x" + std::to_string(w) + " does not divide image size");
  Tensor<double> img({3, size, size});
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double v = values[(y * h / size) * w + x * w / size];
      for (std::size_t c = 0; c < 3; ++c) img[(c * size + y) * size + x] = v;
    }
  return img;
}

/// 0.5 image + 0.5 map.
inline Tensor<double> blend(const Tensor<double>& image, const Tensor<double>& map_rgb) {
  if (image.shape() != map_rgb.shape()) throw DimensionError("viz: blend of " + to_string(image.shape()) + " and " + to_string(map_rgb.shape()));
  Tensor<double> out(image.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = 0.5 * image[i] + 0.5 * map_rgb[i];
  return out;
}

/// Writes stage{s}_input.ppm, stage{s}_attention.ppm and stage{s}_overlay.ppm
/// for every tapped stage; returns the written paths.
template <typename T>
std::vector<std::string> export_attention(const ClanModel<T>& model, const Sample& sample, const std::string& out_dir) {
  NoGradGuard no_grad;
  std::filesystem::create_directories(out_dir);
  const std::vector<std::size_t> idx{0};
  const Batch<T> batch = make_batch<T>(std::vector<Sample>{sample}, idx);
  const auto maps = clan_attention_maps(model, batch.images);
  const std::size_t size = sample.image.dim(1);
  std::vector<std::string> written;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const std::string base = out_dir + "/stage" + std::to_string(model.cfg.backbone.tap_stages[i]);
    const Tensor<double> map_rgb = gray_to_rgb(normalize_minmax(maps[i]), maps[i].dim(2), maps[i].dim(3), size);
    write_image_ppm(sample.image, base + "_input.ppm");
    write_image_ppm(map_rgb, base + "_attention.ppm");
    write_image_ppm(blend(sample.image, map_rgb), base + "_overlay.ppm");
    for (const char* suffix : {"_input.ppm", "_attention.ppm", "_overlay.ppm"}) written.push_back(base + suffix);
  }
  return written;
}

}  // namespace clan
