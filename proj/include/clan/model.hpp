#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "clan/attention.hpp"
#include "clan/backbone.hpp"
#include "clan/checkpoint.hpp"

namespace clan {

struct ModelConfig {
  BackboneConfig backbone;
  RelationMetric metric = RelationMetric::EmbeddedGaussian;
  ClsaPooling pooling = ClsaPooling::AvgAndMax;
  Gate gate = Gate::Linear;
  ResampleMode upsample = ResampleMode::Nearest;
  std::size_t c_int = 0;  // 0: default_inner_channels(C_s)
  bool attention = true;  // false: GAP baseline, raw stage maps and no CLSA branch
  std::vector<double> branch_weights;  // empty: 1 per branch
  std::size_t num_classes = 8;

  bool operator==(const ModelConfig&) const = default;
};

/// Branch names in output order: "A{stage}" per tapped stage, "G", then
/// "CLSA" when attention is enabled.
inline std::vector<std::string> branch_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  for (int s : cfg.backbone.tap_stages) names.push_back("A" + std::to_string(s));
  names.push_back("G");
  if (cfg.attention) names.push_back("CLSA");
  return names;
}

template <typename T>
struct LinearHead {
  Tensor<T> weight;  // K x in
  Tensor<T> bias;    // K
};

template <typename T>
struct BranchOutputs {
  std::vector<Tensor<T>> logits;
  std::vector<std::string> names;

  const Tensor<T>& at(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return logits[i];
    throw UsageError("unknown branch '" + name + "'");
  }
};

template <typename T>
struct ClanModel {
  ModelConfig cfg;
  BackboneWeights<T> backbone;
  std::vector<ClcaParams<T>> clca;  // one per tapped stage
  std::vector<ClsaParams<T>> clsa;  // one per tapped stage
  std::vector<LinearHead<T>> heads;  // one per branch
  std::vector<std::string> branches;

  /// Each component draws from its own stream of the seed, so a baseline and
  /// a full model built from one seed share backbone and A/G head weights.
  static ClanModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.backbone.validate();
    if (cfg.num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
    ClanModel m;
    m.cfg = cfg;
    m.branches = branch_names(cfg);
    if (!cfg.branch_weights.empty() && cfg.branch_weights.size() != m.branches.size())
      throw ConfigError("model: " + std::to_string(cfg.branch_weights.size()) + " branch weights for " +
                        std::to_string(m.branches.size()) + " branches");
    Rng backbone_rng(derive_seed(seed, 1));
    m.backbone = BackboneWeights<T>::init(cfg.backbone, backbone_rng);

    const auto& bb = cfg.backbone;
    const std::size_t c_g = bb.channels(bb.top_stage);
    if (cfg.attention)
      for (int s : bb.tap_stages) {
        const std::size_t c_s = bb.channels(s);
        Rng rng(derive_seed(seed, 2, std::uint64_t(s)));
        m.clca.push_back(ClcaParams<T>::init(c_s, c_g, cfg.c_int ? cfg.c_int : default_inner_channels(c_s), cfg.metric,
                                             cfg.upsample, rng));
        m.clsa.push_back(ClsaParams<T>::init(cfg.pooling, cfg.gate));
      }
    for (std::size_t i = 0; i < m.branches.size(); ++i) {
      const std::string& name = m.branches[i];
      std::size_t in = c_g;
      if (name == "CLSA") in = c_g * bb.tap_stages.size();
      else if (name != "G") in = bb.channels(std::stoi(name.substr(1)));
      std::uint64_t key = 0;
      for (char ch : name) key = key * 131 + std::uint64_t(std::uint8_t(ch));
      Rng rng(derive_seed(seed, 3, key));
      m.heads.push_back({detail::uniform_tensor<T>({cfg.num_classes, in}, 1.0 / std::sqrt(double(in)), rng),
                         Tensor<T>::zeros({cfg.num_classes})});
    }
    return m;
  }

  std::vector<double> loss_weights() const {
    return cfg.branch_weights.empty() ? std::vector<double>(branches.size(), 1.0) : cfg.branch_weights;
  }

  /// Every stored tensor under its checkpoint name.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    auto out = backbone.named();
    for (std::size_t i = 0; i < clca.size(); ++i) {
      const std::string stage = std::to_string(cfg.backbone.tap_stages[i]);
      for (auto& [suffix, t] : clca[i].named()) out.emplace_back("clca.s" + stage + "." + suffix, t);
      for (auto& [suffix, t] : clsa[i].named()) out.emplace_back("clsa.s" + stage + "." + suffix, t);
    }
    for (std::size_t i = 0; i < heads.size(); ++i) {
      out.emplace_back("head." + branches[i] + ".weight", heads[i].weight);
      out.emplace_back("head." + branches[i] + ".bias", heads[i].bias);
    }
    return out;
  }

  /// Parameters the optimizer updates. Gaussian relations never read the
  /// theta/phi embeddings, so those stay untouched.
  std::vector<std::pair<std::string, Tensor<T>>> trainable_parameters() const {
    auto all = named_parameters();
    if (cfg.metric != RelationMetric::Gaussian) return all;
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (auto& [name, t] : all)
      if (!(name.rfind("clca.", 0) == 0 && ClcaParams<T>::is_embedding_param(name))) out.emplace_back(name, t);
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& [name, t] : named_parameters()) t.set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& [name, t] : named_parameters()) t.zero_grad();
  }

  std::vector<NamedArray> state() const {
    std::vector<NamedArray> out;
    for (const auto& [name, t] : named_parameters()) out.push_back(to_named(name, t));
    return out;
  }

  /// Loads values by name; every parameter must be present with its shape.
  void load_state(const std::vector<NamedArray>& arrays) {
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays) by_name[a.name] = &a;
    auto params = named_parameters();
    if (arrays.size() != params.size())
      throw DimensionError("checkpoint holds " + std::to_string(arrays.size()) + " tensors, model expects " + std::to_string(params.size()));
    for (auto& [name, t] : params) {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw DimensionError("checkpoint lacks tensor '" + name + "'");
      assign_from(t, *it->second);
    }
  }
};

template <typename T>
std::size_t count_parameters(const ClanModel<T>& model) {
  return count_parameters(model.trainable_parameters());
}

/// Backbone, per-stage context attention, per-stage spatial attention onto
/// the top map, and one pooled linear head per branch.
template <typename T>
BranchOutputs<T> clan_forward(const ClanModel<T>& model, const Tensor<T>& x) {
  const auto maps = backbone_forward(x, model.cfg.backbone, model.backbone);
  const FeatureMap<T>& top = maps.back();
  const std::size_t taps = maps.size() - 1;

  std::vector<FeatureMap<T>> mids;
  for (std::size_t i = 0; i < taps; ++i) mids.push_back(model.cfg.attention ? clca_forward(maps[i], top, model.clca[i]) : maps[i]);

  BranchOutputs<T> out;
  out.names = model.branches;
  std::size_t head = 0;
  auto classify = [&](const Tensor<T>& fm) {
    const auto& h = model.heads[head++];
    out.logits.push_back(linear(global_avg_pool(fm), h.weight, h.bias));
  };
  for (const auto& m : mids) classify(m.tensor);
  classify(top.tensor);
  if (model.cfg.attention) {
    std::vector<FeatureMap<T>> attended;
    for (std::size_t i = 0; i < taps; ++i) attended.push_back(clsa_forward(mids[i], top, model.clsa[i]));
    classify(refine_top(attended).tensor);
  }
  return out;
}

/// CLSA attention maps (one per tapped stage) for visualization.
template <typename T>
std::vector<Tensor<T>> clan_attention_maps(const ClanModel<T>& model, const Tensor<T>& x) {
  if (!model.cfg.attention) throw UsageError("model has no attention modules");
  const auto maps = backbone_forward(x, model.cfg.backbone, model.backbone);
  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i + 1 < maps.size(); ++i)
    out.push_back(clsa_attention_map(clca_forward(maps[i], maps.back(), model.clca[i]), model.clsa[i]));
  return out;
}

/// Weighted sum of per-branch cross-entropies.
template <typename T>
Tensor<T> clan_loss(const BranchOutputs<T>& outputs, std::span<const int> labels, const std::vector<double>& weights) {
  if (weights.size() != outputs.logits.size())
    throw UsageError("clan_loss: " + std::to_string(weights.size()) + " weights for " + std::to_string(outputs.logits.size()) + " branches");
  Tensor<T> total;
  for (std::size_t i = 0; i < outputs.logits.size(); ++i) {
    Tensor<T> term = scale(cross_entropy(outputs.logits[i], labels), T(weights[i]));
    total = i == 0 ? term : add(total, term);
  }
  return total;
}

/// Per-sample argmax of the mean softmax probability over the chosen
/// branches; ties go to the lowest class index.
template <typename T>
std::vector<int> clan_predict(const BranchOutputs<T>& outputs, const std::vector<std::string>& subset) {
  if (subset.empty()) throw UsageError("clan_predict: empty branch subset");
  std::vector<const Tensor<T>*> chosen;
  for (const auto& name : subset) chosen.push_back(&outputs.at(name));
  const std::size_t batch = chosen.front()->dim(0), k = chosen.front()->dim(1);
  std::vector<int> pred(batch);
  std::vector<T> avg(k);
  for (std::size_t b = 0; b < batch; ++b) {
    std::fill(avg.begin(), avg.end(), T(0));
    for (const auto* logits : chosen) {
      const T* row = logits->data().data() + b * k;
      const T mx = *std::max_element(row, row + k);
      T s = 0;
      for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
      for (std::size_t j = 0; j < k; ++j) avg[j] += std::exp(row[j] - mx) / s;
    }
    for (auto& v : avg) v /= T(chosen.size());
    pred[b] = int(std::max_element(avg.begin(), avg.end()) - avg.begin());
  }
  return pred;
}

}  // namespace clan
