#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "clan/ops.hpp"
#include "clan/rng.hpp"
#include "clan/tensor.hpp"

namespace clan {

/// A rank-4 activation (batch, channels, height, width) tagged with the
/// backbone stage that produced it.
template <typename T>
struct FeatureMap {
  Tensor<T> tensor;
  int stage = 0;

  FeatureMap() = default;
  FeatureMap(Tensor<T> t, int s) : tensor(std::move(t)), stage(s) {
    if (tensor.rank() != 4) throw DimensionError("feature map must be rank 4, got " + to_string(tensor.shape()));
    if (stage < 1) throw ConfigError("feature map stage must be >= 1, got " + std::to_string(stage));
  }

  std::size_t batch() const { return tensor.dim(0); }
  std::size_t channels() const { return tensor.dim(1); }
  std::size_t height() const { return tensor.dim(2); }
  std::size_t width() const { return tensor.dim(3); }
  std::size_t spatial_positions() const { return height() * width(); }
};

enum class RelationMetric { Gaussian, EmbeddedGaussian, DotProduct };
enum class ClsaPooling { Avg, Max, AvgAndMax };
enum class Gate { Linear, Sigmoid };

inline std::string metric_label(RelationMetric m) {
  switch (m) {
    case RelationMetric::Gaussian: return "gaussian";
    case RelationMetric::EmbeddedGaussian: return "embedded_gaussian";
    case RelationMetric::DotProduct: return "dot_product";
  }
  return "?";
}

inline std::string pooling_label(ClsaPooling p) {
  switch (p) {
    case ClsaPooling::Avg: return "avg";
    case ClsaPooling::Max: return "max";
    case ClsaPooling::AvgAndMax: return "avg_max";
  }
  return "?";
}

inline bool uses_embeddings(RelationMetric m) { return m != RelationMetric::Gaussian; }
inline std::size_t pooled_channels(ClsaPooling p) { return p == ClsaPooling::AvgAndMax ? 2 : 1; }

/// C_int when not configured: half the middle channels, at least one.
inline std::size_t default_inner_channels(std::size_t mid_channels) { return std::max<std::size_t>(1, mid_channels / 2); }

namespace detail {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = T(rng.uniform(-bound, bound));
  return t;
}

}  // namespace detail

/// Weights of one cross-layer context attention block. Every projection is a
/// 1x1 convolution with bias; matrices are [out x in].
template <typename T>
struct ClcaParams {
  Tensor<T> W_l, b_l;          // C_s x C_s
  Tensor<T> W_g, b_g;          // C_s x C_g
  Tensor<T> W_theta, b_theta;  // C_int x C_s
  Tensor<T> W_phi, b_phi;      // C_int x C_s
  Tensor<T> W_k, b_k;          // C_int x C_s
  Tensor<T> W_y, b_y;          // C_s x C_int
  RelationMetric metric = RelationMetric::DotProduct;
  ResampleMode upsample = ResampleMode::Nearest;

  std::size_t mid_channels() const { return W_l.dim(0); }
  std::size_t top_channels() const { return W_g.dim(1); }
  std::size_t inner_channels() const { return W_k.dim(0); }

  /// Fan-in scaled uniform init; W_y and b_y start at zero so the block is
  /// the identity on its middle map until trained.
  static ClcaParams init(std::size_t c_s, std::size_t c_g, std::size_t c_int, RelationMetric metric, ResampleMode upsample,
                         Rng& rng) {
    ClcaParams p;
    auto w = [&](std::size_t out, std::size_t in) { return detail::uniform_tensor<T>({out, in}, 1.0 / std::sqrt(double(in)), rng); };
    p.W_l = w(c_s, c_s);
    p.b_l = Tensor<T>::zeros({c_s});
    p.W_g = w(c_s, c_g);
    p.b_g = Tensor<T>::zeros({c_s});
    p.W_theta = w(c_int, c_s);
    p.b_theta = Tensor<T>::zeros({c_int});
    p.W_phi = w(c_int, c_s);
    p.b_phi = Tensor<T>::zeros({c_int});
    p.W_k = w(c_int, c_s);
    p.b_k = Tensor<T>::zeros({c_int});
    p.W_y = Tensor<T>::zeros({c_s, c_int});
    p.b_y = Tensor<T>::zeros({c_s});
    p.metric = metric;
    p.upsample = upsample;
    return p;
  }

  /// (suffix, tensor) pairs in checkpoint order; theta/phi are listed but
  /// flagged so callers can leave them out of training under Gaussian.
  std::vector<std::pair<std::string, Tensor<T>>> named() const {
    return {{"W_l", W_l},         {"b_l", b_l},     {"W_g", W_g},     {"b_g", b_g}, {"W_theta", W_theta},
            {"b_theta", b_theta}, {"W_phi", W_phi}, {"b_phi", b_phi}, {"W_k", W_k}, {"b_k", b_k},
            {"W_y", W_y},         {"b_y", b_y}};
  }

  static bool is_embedding_param(const std::string& suffix) { return suffix.find("theta") != std::string::npos || suffix.find("phi") != std::string::npos; }
};

/// Weights of one cross-layer spatial attention block: a single-output 3x3
/// convolution over the channel-pooled refined middle map.
template <typename T>
struct ClsaParams {
  Tensor<T> kernel;  // 1 x pooled_channels x 3 x 3
  Tensor<T> bias;    // 1
  ClsaPooling pooling = ClsaPooling::AvgAndMax;
  Gate gate = Gate::Linear;

  /// Zero kernel and bias: the attention map starts at zero (linear gate)
  /// or one half (sigmoid gate).
  static ClsaParams init(ClsaPooling pooling, Gate gate) {
    ClsaParams p;
    p.kernel = Tensor<T>::zeros({1, pooled_channels(pooling), 3, 3});
    p.bias = Tensor<T>::zeros({1});
    p.pooling = pooling;
    p.gate = gate;
    return p;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named() const { return {{"kernel", kernel}, {"bias", bias}}; }
};

/// Pairwise position affinities for one fused map, per batch element.
template <typename T>
struct RelationMatrix {
  enum class Normalizer { SoftmaxRows, InverseCount };

  Tensor<T> values;  // b x n x n
  Normalizer normalizer = Normalizer::SoftmaxRows;

  std::size_t positions() const { return values.dim(1); }

  /// The matrix actually used for aggregation (softmax rows already
  /// normalized; dot-product values divided by the position count).
  Tensor<T> normalized() const {
    if (normalizer == Normalizer::SoftmaxRows) return values;
    return scale(values, T(1) / T(positions()));
  }
};

/// Fuses a middle map with the top map resampled to its resolution:
/// out_i = W_l l_i + W_g up(top)_i at every middle position i.
template <typename T>
FeatureMap<T> clca_fuse(const FeatureMap<T>& mid, const FeatureMap<T>& top, const ClcaParams<T>& p) {
  if (mid.stage >= top.stage)
    throw ConfigError("clca: middle stage " + std::to_string(mid.stage) + " must precede top stage " + std::to_string(top.stage));
  if (top.height() > mid.height() || top.width() > mid.width())
    throw ConfigError("clca: top map " + to_string(top.tensor.shape()) + " is larger than middle map " + to_string(mid.tensor.shape()));
  if (mid.channels() != p.mid_channels() || top.channels() != p.top_channels())
    throw DimensionError("clca: maps " + to_string(mid.tensor.shape()) + " / " + to_string(top.tensor.shape()) +
                         " do not match parameters (C_s=" + std::to_string(p.mid_channels()) +
                         ", C_g=" + std::to_string(p.top_channels()) + ")");
  Tensor<T> up = resample(top.tensor, mid.height(), mid.width(), p.upsample);
  return {add(pointwise(mid.tensor, p.W_l, p.b_l), pointwise(up, p.W_g, p.b_g)), mid.stage};
}

/// Relations between all position pairs of the fused map.
template <typename T>
RelationMatrix<T> relation_matrix(const FeatureMap<T>& fused, const ClcaParams<T>& p) {
  const std::size_t b = fused.batch(), n = fused.spatial_positions();
  RelationMatrix<T> r;
  if (p.metric == RelationMetric::Gaussian) {
    Tensor<T> x = reshape(fused.tensor, {b, fused.channels(), n});
    r.values = softmax_rows(bmm(x, x, true, false));
    return r;
  }
  const std::size_t c_int = p.inner_channels();
  Tensor<T> theta = reshape(pointwise(fused.tensor, p.W_theta, p.b_theta), {b, c_int, n});
  Tensor<T> phi = reshape(pointwise(fused.tensor, p.W_phi, p.b_phi), {b, c_int, n});
  Tensor<T> logits = bmm(theta, phi, true, false);
  if (p.metric == RelationMetric::EmbeddedGaussian) {
    r.values = softmax_rows(logits);
  } else {
    r.values = logits;
    r.normalizer = RelationMatrix<T>::Normalizer::InverseCount;
  }
  return r;
}

/// Context attention refined middle map: relations come from the fused map,
/// the aggregated values from the original middle vectors, then a residual.
template <typename T>
FeatureMap<T> clca_forward(const FeatureMap<T>& mid, const FeatureMap<T>& top, const ClcaParams<T>& p) {
  const FeatureMap<T> fused = clca_fuse(mid, top, p);
  const RelationMatrix<T> rel = relation_matrix(fused, p);
  const std::size_t b = mid.batch(), n = mid.spatial_positions(), c_int = p.inner_channels();
  Tensor<T> values = reshape(pointwise(mid.tensor, p.W_k, p.b_k), {b, c_int, n});
  // y[:, i] = sum_j A[i, j] * k[:, j]
  Tensor<T> y = bmm(values, rel.normalized(), false, true);
  Tensor<T> y4 = reshape(y, {b, c_int, mid.height(), mid.width()});
  return {add(pointwise(y4, p.W_y, p.b_y), mid.tensor), mid.stage};
}

/// Single-channel spatial attention map from a refined middle map.
template <typename T>
Tensor<T> clsa_attention_map(const FeatureMap<T>& refined_mid, const ClsaParams<T>& p) {
  if (p.kernel.rank() != 4 || p.kernel.dim(0) != 1 || p.kernel.dim(1) != pooled_channels(p.pooling))
    throw ConfigError("clsa: kernel " + to_string(p.kernel.shape()) + " does not match pooling mode (" +
                      std::to_string(pooled_channels(p.pooling)) + " input channel(s) expected)");
  Tensor<T> pooled;
  switch (p.pooling) {
    case ClsaPooling::Avg: pooled = channel_reduce(refined_mid.tensor, PoolMode::Avg); break;
    case ClsaPooling::Max: pooled = channel_reduce(refined_mid.tensor, PoolMode::Max); break;
    case ClsaPooling::AvgAndMax: pooled = channel_pool(refined_mid.tensor); break;
  }
  Tensor<T> m = conv2d(pooled, p.kernel, p.bias, 1, 1);
  return p.gate == Gate::Sigmoid ? sigmoid(m) : m;
}

/// Gates every channel of the top map with the attention map average-pooled
/// down to the top resolution.
template <typename T>
FeatureMap<T> clsa_apply(const Tensor<T>& attention_map, const FeatureMap<T>& top) {
  const std::size_t h = attention_map.dim(2), w = attention_map.dim(3);
  if (h % top.height() || w % top.width() || h / top.height() != w / top.width())
    throw ConfigError("clsa: attention map " + to_string(attention_map.shape()) + " is not an integer multiple of top map " +
                      to_string(top.tensor.shape()));
  Tensor<T> down = resample(attention_map, top.height(), top.width(), ResampleMode::Nearest);
  return {mul(top.tensor, down), top.stage};
}

template <typename T>
FeatureMap<T> clsa_forward(const FeatureMap<T>& refined_mid, const FeatureMap<T>& top, const ClsaParams<T>& p) {
  return clsa_apply(clsa_attention_map(refined_mid, p), top);
}

/// Concatenates per-stage attended top maps (ascending stage order expected).
template <typename T>
FeatureMap<T> refine_top(const std::vector<FeatureMap<T>>& attended) {
  if (attended.empty()) throw UsageError("refine_top: no attended maps");
  std::vector<Tensor<T>> parts;
  for (const auto& a : attended) parts.push_back(a.tensor);
  return {concat_channels(parts), attended.front().stage};
}

}  // namespace clan
