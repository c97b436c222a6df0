#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "clan/attention.hpp"
#include "clan/ops.hpp"
#include "clan/rng.hpp"

namespace clan {

/// Plain conv-relu stages, each closed by a 2x2 stride-2 max pool, so stage s
/// emits maps of extent input_size / 2^s.
struct BackboneConfig {
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::vector<std::size_t> stage_blocks{1, 1, 2};
  std::size_t input_size = 32;
  std::vector<int> tap_stages{2};
  int top_stage = 3;

  bool operator==(const BackboneConfig&) const = default;

  void validate() const {
    if (stage_channels.empty() || stage_channels.size() != stage_blocks.size())
      throw ConfigError("backbone: stage_channels and stage_blocks must be non-empty and equally long");
    for (auto c : stage_channels)
      if (c == 0) throw ConfigError("backbone: stage channel counts must be positive");
    if (top_stage < 1 || std::size_t(top_stage) > stage_channels.size())
      throw ConfigError("backbone: top_stage " + std::to_string(top_stage) + " outside 1.." + std::to_string(stage_channels.size()));
    for (std::size_t i = 0; i < tap_stages.size(); ++i) {
      if (tap_stages[i] < 1 || tap_stages[i] >= top_stage)
        throw ConfigError("backbone: tap stage " + std::to_string(tap_stages[i]) + " must lie in 1.." + std::to_string(top_stage - 1));
      if (i && tap_stages[i] <= tap_stages[i - 1]) throw ConfigError("backbone: tap stages must be strictly ascending");
    }
    if (input_size == 0 || input_size % (std::size_t{1} << top_stage))
      throw ConfigError("backbone: input size " + std::to_string(input_size) + " is not divisible by 2^" + std::to_string(top_stage));
  }

  std::size_t extent(int stage) const { return input_size >> stage; }
  std::size_t channels(int stage) const { return stage_channels.at(std::size_t(stage - 1)); }
};

template <typename T>
struct ConvWeights {
  Tensor<T> kernel;
  Tensor<T> bias;
};

/// blocks[s][k] is block k of stage s + 1.
template <typename T>
struct BackboneWeights {
  std::vector<std::vector<ConvWeights<T>>> blocks;

  /// He-uniform kernels, zero biases.
  static BackboneWeights init(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    BackboneWeights w;
    std::size_t cin = 3;
    for (int s = 0; s < cfg.top_stage; ++s) {
      std::vector<ConvWeights<T>> stage;
      for (std::size_t k = 0; k < cfg.stage_blocks[s]; ++k) {
        const std::size_t cout = cfg.stage_channels[s];
        const double bound = std::sqrt(6.0 / double(cin * 9));
        stage.push_back({detail::uniform_tensor<T>({cout, cin, 3, 3}, bound, rng), Tensor<T>::zeros({cout})});
        cin = cout;
      }
      w.blocks.push_back(std::move(stage));
    }
    return w;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t s = 0; s < blocks.size(); ++s)
      for (std::size_t k = 0; k < blocks[s].size(); ++k) {
        const std::string base = "backbone.s" + std::to_string(s + 1) + ".b" + std::to_string(k);
        out.emplace_back(base + ".kernel", blocks[s][k].kernel);
        out.emplace_back(base + ".bias", blocks[s][k].bias);
      }
    return out;
  }
};

/// Centres the input, then runs the stages up to the top stage and returns the tapped middle maps in
/// ascending stage order followed by the top map.
template <typename T>
std::vector<FeatureMap<T>> backbone_forward(const Tensor<T>& x, const BackboneConfig& cfg, const BackboneWeights<T>& w) {
  cfg.validate();
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != cfg.input_size || x.dim(3) != cfg.input_size)
    throw ConfigError("backbone: expected input b x 3 x " + std::to_string(cfg.input_size) + " x " +
                      std::to_string(cfg.input_size) + ", got " + to_string(x.shape()));
  if (w.blocks.size() != std::size_t(cfg.top_stage)) throw DimensionError("backbone: weights do not match configuration");
  std::vector<FeatureMap<T>> out;
  // [0, 1] pixels are centred to [-1, 1]; raw inputs leave every ReLU biased
  // positive and training sits on a long chance-level plateau.
  Tensor<T> h = affine(x, T(2), T(-1));
  for (int s = 1; s <= cfg.top_stage; ++s) {
    for (const auto& block : w.blocks[std::size_t(s - 1)]) h = relu(conv2d(h, block.kernel, block.bias, 1, 1));
    h = pool2d(h, PoolMode::Max, 2, 2);
    const bool tapped = std::find(cfg.tap_stages.begin(), cfg.tap_stages.end(), s) != cfg.tap_stages.end();
    if (tapped || s == cfg.top_stage) out.emplace_back(h, s);
  }
  return out;
}

/// Learnable scalar count of a parameter list.
template <typename T>
std::size_t count_parameters(const std::vector<std::pair<std::string, Tensor<T>>>& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

}  // namespace clan
