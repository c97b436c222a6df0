#pragma once

#include <functional>
#include <string>
#include <vector>

#include "clan/attention.hpp"
#include "clan/gradcheck.hpp"
#include "clan/model.hpp"
#include "clan/config.hpp"
#include "clan/ops.hpp"

namespace clan {

inline constexpr double kGradEps = 1e-4;
inline constexpr double kPrimitiveTolerance = 1e-5;
inline constexpr double kComposedTolerance = 1e-4;

struct GradCheck {
  std::string name;
  double threshold = kPrimitiveTolerance;
  std::function<double()> run;  // returns max relative error
};

struct GradCheckResult {
  std::string name;
  double error = 0;
  double threshold = 0;
  bool passed() const { return error < threshold; }
};

namespace detail {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Scalar probe sum(w * y) with fixed random w, so every output element
/// contributes a distinct weight to the gradient.
inline Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

/// Worst error and total kink count over checking f with respect to each
/// tensor in `inputs`.
inline FiniteDiffReport check_all(const std::function<Tensor<double>()>& f, const std::vector<Tensor<double>>& inputs) {
  FiniteDiffReport worst;
  for (const auto& x : inputs) {
    const auto r = finite_diff_report<double>([&](const Tensor<double>&) { return f(); }, x, kGradEps);
    worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
    worst.kinks += r.kinks;
  }
  return worst;
}

/// Redraws the test point (new stream per attempt) while a kink sits inside
/// the stencil; the last draw is reported if none is smooth.
inline double smooth_point_error(const std::function<FiniteDiffReport(std::uint64_t)>& draw, std::uint64_t seed) {
  FiniteDiffReport r;
  for (std::uint64_t attempt = 0; attempt < 8; ++attempt) {
    r = draw(derive_seed(seed, 0x6c0, attempt));
    if (r.kinks == 0) break;
  }
  return r.max_rel_error;
}

}  // namespace detail

/// One check per differentiable primitive (double precision, eps 1e-4).
inline std::vector<GradCheck> primitive_checks(std::uint64_t seed) {
  using detail::check_all;
  using detail::probe;
  using detail::random_tensor;
  using Td = Tensor<double>;
  std::vector<GradCheck> checks;
  auto add_check = [&](std::string name, std::function<FiniteDiffReport(Rng&)> body) {
    const std::uint64_t s = derive_seed(seed, checks.size());
    checks.push_back({std::move(name), kPrimitiveTolerance, [body, s] {
                        return detail::smooth_point_error(
                            [&](std::uint64_t point) {
                              Rng rng(point);
                              return body(rng);
                            },
                            s);
                      }});
  };

  add_check("matmul", [](Rng& r) {
    Td a = random_tensor({3, 4}, r), b = random_tensor({4, 5}, r);
    return check_all([&] { return probe(matmul(a, b), 7); }, {a, b});
  });
  for (int mode = 0; mode < 4; ++mode) {
    const bool ta = mode & 1, tb = mode & 2;
    add_check(std::string("bmm_") + (ta ? "t" : "n") + (tb ? "t" : "n"), [ta, tb](Rng& r) {
      Td a = random_tensor(ta ? Shape{2, 4, 3} : Shape{2, 3, 4}, r);
      Td b = random_tensor(tb ? Shape{2, 5, 4} : Shape{2, 4, 5}, r);
      return check_all([&] { return probe(bmm(a, b, ta, tb), 7); }, {a, b});
    });
  }
  add_check("pointwise", [](Rng& r) {
    Td x = random_tensor({2, 3, 2, 3}, r), w = random_tensor({4, 3}, r), b = random_tensor({4}, r);
    return check_all([&] { return probe(pointwise(x, w, b), 7); }, {x, w, b});
  });
  add_check("conv2d_pad1", [](Rng& r) {
    Td x = random_tensor({2, 2, 5, 5}, r), k = random_tensor({3, 2, 3, 3}, r), b = random_tensor({3}, r);
    return check_all([&] { return probe(conv2d(x, k, b, 1, 1), 7); }, {x, k, b});
  });
  add_check("conv2d_stride2", [](Rng& r) {
    Td x = random_tensor({1, 2, 5, 5}, r), k = random_tensor({2, 2, 3, 3}, r), b = random_tensor({2}, r);
    return check_all([&] { return probe(conv2d(x, k, b, 2, 0), 7); }, {x, k, b});
  });
  add_check("pool2d_avg", [](Rng& r) {
    Td x = random_tensor({2, 2, 4, 4}, r);
    return check_all([&] { return probe(pool2d(x, PoolMode::Avg, 2, 2), 7); }, {x});
  });
  add_check("pool2d_max", [](Rng& r) {
    Td x = random_tensor({2, 2, 4, 4}, r);
    return check_all([&] { return probe(pool2d(x, PoolMode::Max, 2, 2), 7); }, {x});
  });
  add_check("channel_pool", [](Rng& r) {
    Td x = random_tensor({2, 4, 3, 3}, r);
    return check_all([&] { return probe(channel_pool(x), 7); }, {x});
  });
  add_check("softmax_rows", [](Rng& r) {
    Td x = random_tensor({3, 5}, r, -2, 2);
    return check_all([&] { return probe(softmax_rows(x), 7); }, {x});
  });
  add_check("resample_nearest", [](Rng& r) {
    Td x = random_tensor({1, 2, 2, 2}, r);
    return check_all([&] { return probe(resample(x, 4, 4, ResampleMode::Nearest), 7); }, {x});
  });
  add_check("resample_bilinear", [](Rng& r) {
    Td x = random_tensor({1, 2, 3, 3}, r);
    return check_all([&] { return probe(resample(x, 6, 6, ResampleMode::Bilinear), 7); }, {x});
  });
  add_check("resample_down", [](Rng& r) {
    Td x = random_tensor({1, 2, 4, 4}, r);
    return check_all([&] { return probe(resample(x, 2, 2, ResampleMode::Nearest), 7); }, {x});
  });
  add_check("concat_channels", [](Rng& r) {
    Td a = random_tensor({2, 1, 2, 2}, r), b = random_tensor({2, 3, 2, 2}, r);
    return check_all([&] { return probe(concat_channels<double>({a, b}), 7); }, {a, b});
  });
  add_check("slice_channels", [](Rng& r) {
    Td x = random_tensor({2, 4, 2, 2}, r);
    return check_all([&] { return probe(slice_channels(x, 1, 2), 7); }, {x});
  });
  add_check("add", [](Rng& r) {
    Td a = random_tensor({2, 3, 2, 2}, r), b = random_tensor({2, 3, 2, 2}, r);
    return check_all([&] { return probe(add(a, b), 7); }, {a, b});
  });
  add_check("add_broadcast", [](Rng& r) {
    Td a = random_tensor({2, 3, 2, 2}, r), b = random_tensor({2, 1, 2, 2}, r);
    return check_all([&] { return probe(add(a, b), 7); }, {a, b});
  });
  add_check("mul", [](Rng& r) {
    Td a = random_tensor({2, 3, 2, 2}, r), b = random_tensor({2, 3, 2, 2}, r);
    return check_all([&] { return probe(mul(a, b), 7); }, {a, b});
  });
  add_check("mul_broadcast", [](Rng& r) {
    Td a = random_tensor({2, 3, 2, 2}, r), b = random_tensor({2, 1, 2, 2}, r);
    return check_all([&] { return probe(mul(a, b), 7); }, {a, b});
  });
  add_check("relu", [](Rng& r) {
    Td x = random_tensor({4, 6}, r);
    return check_all([&] { return probe(relu(x), 7); }, {x});
  });
  add_check("exp", [](Rng& r) {
    Td x = random_tensor({4, 6}, r);
    return check_all([&] { return probe(exp(x), 7); }, {x});
  });
  add_check("sigmoid", [](Rng& r) {
    Td x = random_tensor({4, 6}, r, -3, 3);
    return check_all([&] { return probe(sigmoid(x), 7); }, {x});
  });
  add_check("scale", [](Rng& r) {
    Td x = random_tensor({4, 6}, r);
    return check_all([&] { return probe(scale(x, 0.37), 7); }, {x});
  });
  add_check("affine", [](Rng& r) {
    Td x = random_tensor({4, 6}, r);
    return check_all([&] { return probe(affine(x, 2.0, -1.0), 7); }, {x});
  });
  add_check("reshape", [](Rng& r) {
    Td x = random_tensor({2, 3, 4}, r);
    return check_all([&] { return probe(reshape(x, {6, 4}), 7); }, {x});
  });
  add_check("global_avg_pool", [](Rng& r) {
    Td x = random_tensor({2, 3, 3, 3}, r);
    return check_all([&] { return probe(global_avg_pool(x), 7); }, {x});
  });
  add_check("linear", [](Rng& r) {
    Td x = random_tensor({3, 4}, r), w = random_tensor({2, 4}, r), b = random_tensor({2}, r);
    return check_all([&] { return probe(linear(x, w, b), 7); }, {x, w, b});
  });
  add_check("linear_toy_model", [](Rng& r) {
    Td x = random_tensor({3, 4}, r), w = random_tensor({2, 4}, r), b = random_tensor({2}, r);
    return check_all([&] { return sum(linear(x, w, b)); }, {x, w, b});
  });
  add_check("cross_entropy", [](Rng& r) {
    Td x = random_tensor({4, 5}, r, -2, 2);
    const std::vector<int> labels{0, 3, 4, 1};
    return check_all([&] { return cross_entropy(x, std::span<const int>(labels)); }, {x});
  });
  return checks;
}

/// Tiny model (8x8 input, two tapped stages) whose attention weights are all
/// randomized so no parameter sits at the zero-init identity. Backbone biases
/// are positive: a channel that ReLU kills almost everywhere leaves gradients
/// near 1e-8, below what central differences resolve on an O(1) loss.
inline ClanModel<double> tiny_clan(RelationMetric metric, ClsaPooling pooling, Gate gate, ResampleMode upsample, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.backbone.stage_channels = {2, 3, 4};
  cfg.backbone.stage_blocks = {1, 1, 1};
  cfg.backbone.input_size = 8;
  cfg.backbone.tap_stages = {1, 2};
  cfg.backbone.top_stage = 3;
  cfg.metric = metric;
  cfg.pooling = pooling;
  cfg.gate = gate;
  cfg.upsample = upsample;
  cfg.num_classes = 3;
  auto model = ClanModel<double>::init(cfg, seed);
  Rng rng(derive_seed(seed, 99));
  for (auto& [name, t] : model.named_parameters()) {
    if (name.rfind("backbone.", 0) == 0) {
      if (name.find("bias") != std::string::npos)
        for (auto& v : t.data()) v = rng.uniform(0.1, 0.5);
    } else if (name.rfind("head.", 0) != 0 || name.find("bias") != std::string::npos) {
      for (auto& v : t.data()) v = rng.uniform(-0.2, 0.2);
    }
  }
  return model;
}

/// Max error of the summed branch loss with respect to the input and every
/// trainable parameter of a freshly drawn tiny model.
inline double composed_loss_error(RelationMetric metric, ClsaPooling pooling, Gate gate, ResampleMode upsample, std::uint64_t seed) {
  return detail::smooth_point_error(
      [&](std::uint64_t s) {
        const auto model = tiny_clan(metric, pooling, gate, upsample, s);
        Rng rng(derive_seed(s, 5));
        Tensor<double> x = detail::random_tensor({2, 3, 8, 8}, rng, 0.0, 1.0);
        const std::vector<int> labels{0, 2};
        std::vector<Tensor<double>> inputs{x};
        for (auto& [name, t] : model.trainable_parameters()) inputs.push_back(t);
        return detail::check_all([&] { return clan_loss(clan_forward(model, x), std::span<const int>(labels), model.loss_weights()); },
                                 inputs);
      },
      seed);
}

inline std::vector<GradCheck> composed_checks(std::uint64_t seed) {
  std::vector<GradCheck> checks;
  for (auto metric : {RelationMetric::Gaussian, RelationMetric::EmbeddedGaussian, RelationMetric::DotProduct})
    for (auto pooling : {ClsaPooling::Avg, ClsaPooling::Max, ClsaPooling::AvgAndMax}) {
      const std::string name = "clan_loss_" + metric_label(metric) + "_" + pooling_label(pooling);
      checks.push_back({name, kComposedTolerance, [=] {
                          return composed_loss_error(metric, pooling, Gate::Linear, ResampleMode::Nearest, seed);
                        }});
    }
  checks.push_back({"clan_loss_sigmoid_bilinear", kComposedTolerance, [=] {
                      return composed_loss_error(RelationMetric::DotProduct, ClsaPooling::AvgAndMax, Gate::Sigmoid, ResampleMode::Bilinear, seed);
                    }});
  return checks;
}

inline std::vector<GradCheckResult> run_gradchecks(const std::vector<GradCheck>& checks) {
  std::vector<GradCheckResult> out;
  for (const auto& c : checks) out.push_back({c.name, c.run(), c.threshold});
  return out;
}

/// 0 when every check is under its threshold, else 1.
inline int gradcheck_exit_code(const std::vector<GradCheckResult>& results) {
  for (const auto& r : results)
    if (!r.passed()) return 1;
  return 0;
}

}  // namespace clan
