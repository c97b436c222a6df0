#include <gtest/gtest.h>

#include <numeric>

#include "oracles.hpp"

using namespace clan;
using Td = Tensor<double>;

namespace {

ModelConfig small_model(bool attention = true, RelationMetric metric = RelationMetric::DotProduct) {
  ModelConfig m;
  m.backbone.stage_channels = {4, 6, 8};
  m.backbone.stage_blocks = {1, 1, 1};
  m.backbone.input_size = 16;
  m.backbone.tap_stages = {1, 2};
  m.num_classes = 5;
  m.metric = metric;
  m.attention = attention;
  return m;
}

// Every weight of the model redrawn, so no zero-initialized path stays dead.
void randomize(ClanModel<double>& m, std::uint64_t seed, double bound = 0.4) {
  Rng rng(seed);
  for (auto& [name, t] : m.named_parameters())
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
}

std::size_t conv_params(std::size_t cin, std::size_t cout) { return cout * cin * 9 + cout; }

// C_s^2 + C_s C_g + 4 C_int C_s weights, 3 C_s + 3 C_int biases; theta/phi
// (2 C_int C_s + 2 C_int) drop out under Gaussian.
std::size_t clca_closed_form(std::size_t cs, std::size_t cg, std::size_t ci, bool embeddings) {
  std::size_t n = cs * cs + cs * cg + 4 * ci * cs + 3 * cs + 3 * ci;
  if (!embeddings) n -= 2 * ci * cs + 2 * ci;
  return n;
}

std::size_t head_params(std::size_t in, std::size_t k) { return k * in + k; }

Td run_model_input(const ModelConfig& cfg, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  return oracle::random({batch, 3, cfg.backbone.input_size, cfg.backbone.input_size}, rng, 0.0, 1.0);
}

double naive_ce(const Td& logits, const std::vector<int>& labels) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  double total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits[i * k + j]);
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(logits[i * k + j] - mx);
    total += -(logits[i * k + std::size_t(labels[i])] - mx - std::log(s));
  }
  return total / double(b);
}

}  // namespace

TEST(ParamCount, ClcaBlockClosedForm) {
  Rng rng(1);
  const auto dp = ClcaParams<double>::init(8, 16, 4, RelationMetric::DotProduct, ResampleMode::Nearest, rng);
  // 8*8 + 8*16 + 4*8 + 4*8 + 4*8 + 8*4 = 320 weights, 8+8+4+4+4+8 = 36 biases
  EXPECT_EQ(count_parameters(dp.named()), 356u);
  EXPECT_EQ(clca_closed_form(8, 16, 4, true), 356u);
  EXPECT_EQ(count_parameters(ClsaParams<double>::init(ClsaPooling::AvgAndMax, Gate::Linear).named()), 19u);
  EXPECT_EQ(count_parameters(ClsaParams<double>::init(ClsaPooling::Max, Gate::Sigmoid).named()), 10u);
}

TEST(ParamCount, BaselineBackboneAndHeads) {
  const auto cfg = small_model(false);
  const auto m = ClanModel<double>::init(cfg, 1);
  const std::size_t backbone = conv_params(3, 4) + conv_params(4, 6) + conv_params(6, 8);
  EXPECT_EQ(count_parameters(m.backbone.named()), backbone);
  EXPECT_EQ(count_parameters(m), backbone + head_params(4, 5) + head_params(6, 5) + head_params(8, 5));
}

TEST(ParamCount, AttentionAdditionPerMetric) {
  for (auto metric : {RelationMetric::DotProduct, RelationMetric::Gaussian}) {
    const auto base = ClanModel<double>::init(small_model(false, metric), 1);
    const auto full = ClanModel<double>::init(small_model(true, metric), 1);
    const bool emb = metric != RelationMetric::Gaussian;
    // taps at stages 1 (C=4) and 2 (C=6), top C=8; CLSA head sees 2 x 8 channels
    const std::size_t added = clca_closed_form(4, 8, 2, emb) + clca_closed_form(6, 8, 3, emb) + 2 * 19 + head_params(16, 5);
    EXPECT_EQ(count_parameters(full) - count_parameters(base), added) << metric_label(metric);
  }
}

TEST(ParamCount, DefaultAttentionStaysSmall) {
  RunConfig cfg;
  cfg.sync_and_validate();
  const auto m = ClanModel<double>::init(cfg.model, 1);
  const std::size_t backbone = count_parameters(m.backbone.named());
  EXPECT_EQ(backbone, conv_params(3, 16) + conv_params(16, 32) + conv_params(32, 64) + conv_params(64, 64));
  std::size_t attention = 0;
  for (const auto& p : m.clca) attention += count_parameters(p.named());
  for (const auto& p : m.clsa) attention += count_parameters(p.named());
  EXPECT_LT(double(attention), 0.15 * double(backbone)) << attention << " vs " << backbone;
}

TEST(Backbone, DefaultStageShapes) {
  RunConfig cfg;
  cfg.sync_and_validate();
  const auto m = ClanModel<double>::init(cfg.model, 1);
  const auto maps = backbone_forward(run_model_input(cfg.model, 2, 3), cfg.model.backbone, m.backbone);
  ASSERT_EQ(maps.size(), 2u);
  EXPECT_EQ(maps[0].tensor.shape(), (Shape{2, 32, 8, 8}));
  EXPECT_EQ(maps[1].tensor.shape(), (Shape{2, 64, 4, 4}));
  EXPECT_EQ(maps[0].stage, 2);
  EXPECT_THROW(backbone_forward(Td({1, 3, 30, 30}), cfg.model.backbone, m.backbone), ConfigError);
}

TEST(ZeroInit, GBranchMatchesBaselineBitwise) {
  const auto cfg = small_model();
  const auto full = ClanModel<double>::init(cfg, 9);
  const auto base = ClanModel<double>::init(small_model(false), 9);
  const Td x = run_model_input(cfg, 6, 4);
  const auto a = clan_forward(full, x), b = clan_forward(base, x);
  for (const char* name : {"G", "A1", "A2"}) EXPECT_EQ(a.at(name).values(), b.at(name).values()) << name;
  EXPECT_EQ(clan_predict(a, {"G"}), clan_predict(b, {"G"}));
  // Zero CLSA map under the linear gate: the branch outputs only its bias.
  const auto& clsa = a.at("CLSA");
  for (std::size_t i = 0; i < clsa.numel(); ++i) EXPECT_EQ(clsa[i], full.heads.back().bias[i % 5]);
}

TEST(Loss, UniformLogitsGiveBranchCountTimesLogK) {
  auto m = ClanModel<double>::init(small_model(), 2);
  for (auto& h : m.heads) h.weight = Td::zeros(h.weight.shape());
  const Td x = run_model_input(m.cfg, 4, 5);
  const std::vector<int> y{0, 1, 2, 4};
  const double loss = clan_loss(clan_forward(m, x), y, m.loss_weights()).item();
  EXPECT_NEAR(loss, 4 * std::log(5.0), 1e-12);
  EXPECT_EQ(clan_loss(clan_forward(m, x), y, std::vector<double>(4, 0.0)).item(), 0.0);
}

TEST(Loss, WeightedSumOfBranchCrossEntropies) {
  auto m = ClanModel<double>::init(small_model(), 2);
  randomize(m, 11);
  const Td x = run_model_input(m.cfg, 5, 6);
  const std::vector<int> y{3, 1, 0, 4, 2};
  const std::vector<double> w{0.5, 1.0, 2.0, 0.25};
  const auto out = clan_forward(m, x);
  double expected = 0;
  for (std::size_t i = 0; i < 4; ++i) expected += w[i] * naive_ce(out.logits[i], y);
  EXPECT_NEAR(clan_loss(out, y, w).item(), expected, 1e-10);
  EXPECT_THROW(clan_loss(out, y, std::vector<double>{1.0}), UsageError);
}

TEST(Loss, InvariantToBatchOrder) {
  auto m = ClanModel<double>::init(small_model(), 2);
  randomize(m, 12);
  const Td x = run_model_input(m.cfg, 4, 7);
  const std::vector<int> y{3, 1, 0, 4};
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  const std::size_t per = x.numel() / 4;
  Td xp(x.shape());
  std::vector<int> yp(4);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < per; ++j) xp[i * per + j] = x[perm[i] * per + j];
    yp[i] = y[perm[i]];
  }
  EXPECT_NEAR(clan_loss(clan_forward(m, x), y, m.loss_weights()).item(), clan_loss(clan_forward(m, xp), yp, m.loss_weights()).item(),
              1e-12);
}

TEST(Predict, MeanOfProbabilitiesWithLowestIndexTies) {
  // Row 0: logit mean (3, 4, 3) picks class 1; probability mean (0.155, 0.383, 0.461) picks 2.
  BranchOutputs<double> out;
  out.names = {"A", "B"};
  out.logits = {Td({2, 3}, std::vector<double>{0, 0, 3, 0, 0, 0}), Td({2, 3}, std::vector<double>{3, 4, 0, 0, 0, 0})};
  const auto pred = clan_predict(out, {"A", "B"});
  EXPECT_EQ(pred[0], 2);
  EXPECT_EQ(pred[1], 0);  // all-equal row: lowest index
  EXPECT_EQ(clan_predict(out, {"B"})[0], 1);
  EXPECT_THROW(clan_predict(out, {}), UsageError);
  EXPECT_THROW(clan_predict(out, {"C"}), UsageError);
}

TEST(Predict, MatchesNaiveProbabilityAverage) {
  Rng rng(21);
  BranchOutputs<double> out;
  out.names = {"A", "B", "C"};
  for (int i = 0; i < 3; ++i) out.logits.push_back(oracle::random({64, 6}, rng, -3, 3));
  const auto pred = clan_predict(out, {"A", "C"});
  int disagreements_with_logit_mean = 0;
  for (std::size_t b = 0; b < 64; ++b) {
    std::vector<double> avg(6, 0.0), lavg(6, 0.0);
    for (std::size_t br : {0u, 2u}) {
      double s = 0;
      for (std::size_t j = 0; j < 6; ++j) s += std::exp(out.logits[br][b * 6 + j]);
      for (std::size_t j = 0; j < 6; ++j) avg[j] += std::exp(out.logits[br][b * 6 + j]) / s, lavg[j] += out.logits[br][b * 6 + j];
    }
    const int want = int(std::max_element(avg.begin(), avg.end()) - avg.begin());
    EXPECT_EQ(pred[b], want);
    disagreements_with_logit_mean += want != int(std::max_element(lavg.begin(), lavg.end()) - lavg.begin());
  }
  RecordProperty("logit_mean_disagreements", disagreements_with_logit_mean);
}

TEST(Forward, SamplesDoNotInteract) {
  auto m = ClanModel<double>::init(small_model(), 3);
  randomize(m, 13);
  const Td one = run_model_input(m.cfg, 1, 8), other = run_model_input(m.cfg, 3, 9);
  const std::size_t per = one.numel();
  Td batch({4, 3, 16, 16});
  for (std::size_t i = 0; i < 3 * per; ++i) batch[i] = other[i];
  for (std::size_t i = 0; i < per; ++i) batch[3 * per + i] = one[i];
  const auto solo = clan_forward(m, one), mixed = clan_forward(m, batch);
  for (std::size_t br = 0; br < solo.logits.size(); ++br)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(mixed.logits[br][15 + j], solo.logits[br][j], 1e-12) << solo.names[br];

  Td same({3, 3, 16, 16});
  for (std::size_t i = 0; i < same.numel(); ++i) same[i] = one[i % per];
  const auto rows = clan_forward(m, same);
  for (const auto& l : rows.logits)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(l[j], l[10 + j]);
}

TEST(Gradients, ReachEveryTrainableParameter) {
  for (auto metric : {RelationMetric::DotProduct, RelationMetric::Gaussian}) {
    auto m = ClanModel<double>::init(small_model(true, metric), 4);
    randomize(m, 14);
    for (auto& [name, t] : m.backbone.named())
      if (name.find("bias") != std::string::npos)
        for (auto& v : t.data()) v = 0.2;  // keep ReLUs alive
    m.set_requires_grad(true);
    const Td x = run_model_input(m.cfg, 4, 10);
    backward(clan_loss(clan_forward(m, x), std::vector<int>{0, 1, 2, 3}, m.loss_weights()));
    std::set<std::string> trainable;
    for (auto& [name, t] : m.trainable_parameters()) {
      trainable.insert(name);
      double norm = 0;
      for (double g : t.grad()) norm += g * g;
      EXPECT_GT(norm, 0.0) << name << " " << metric_label(metric);
    }
    for (auto& [name, t] : m.named_parameters())
      if (!trainable.count(name)) {
        EXPECT_EQ(metric, RelationMetric::Gaussian) << name;
        for (double g : t.grad()) EXPECT_EQ(g, 0.0) << name;
      }
  }
}

TEST(Checkpoint, RoundTripReproducesLogitsBitwise) {
  auto m = ClanModel<double>::init(small_model(), 5);
  randomize(m, 15);
  const std::string bytes = encode_checkpoint(m.state());
  auto loaded = ClanModel<double>::init(small_model(), 99);
  loaded.load_state(decode_checkpoint(bytes));
  const Td x = run_model_input(m.cfg, 3, 11);
  const auto a = clan_forward(m, x), b = clan_forward(loaded, x);
  for (std::size_t i = 0; i < a.logits.size(); ++i) EXPECT_EQ(a.logits[i].values(), b.logits[i].values());
  EXPECT_EQ(encode_checkpoint(loaded.state()), bytes);

  auto f32 = ClanModel<float>::init(small_model(), 5);
  f32.load_state(decode_checkpoint(bytes));
  auto back = ClanModel<float>::init(small_model(), 7);
  back.load_state(decode_checkpoint(encode_checkpoint(f32.state())));
  const Tensor<float> xf(x.shape(), std::vector<float>(x.data().begin(), x.data().end()));
  const auto c = clan_forward(f32, xf), d = clan_forward(back, xf);
  for (std::size_t i = 0; i < c.logits.size(); ++i) EXPECT_EQ(c.logits[i].values(), d.logits[i].values());
}

TEST(Checkpoint, HeaderLayout) {
  const std::string bytes = encode_checkpoint({{"w", {2}, {1.0, -2.0}}});
  // magic, version 1, count 1, name_len 1, "w", rank 1, extent 2, two f64
  ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 4 + 1 + 4 + 4 + 16);
  EXPECT_EQ(bytes.substr(0, 8), std::string("CLAN\x01\x00\x00\x00", 8));
  EXPECT_EQ(bytes.substr(bytes.size() - 8), std::string("\x00\x00\x00\x00\x00\x00\x00\xC0", 8));  // -2.0 little-endian
}

TEST(Checkpoint, RejectsCorruptAndIncompatibleFiles) {
  auto m = ClanModel<double>::init(small_model(), 5);
  const std::string bytes = encode_checkpoint(m.state());
  EXPECT_THROW(decode_checkpoint("XLAN" + bytes.substr(4)), DataError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), DataError);
  std::string v2 = bytes;
  v2[4] = 2;
  EXPECT_THROW(decode_checkpoint(v2), DataError);

  auto base = ClanModel<double>::init(small_model(false), 5);
  EXPECT_THROW(base.load_state(m.state()), DimensionError);
  auto state = m.state();
  state[0].name = "backbone.s9.b0.kernel";
  EXPECT_THROW(m.load_state(state), DimensionError);
  state = m.state();
  state[0].shape = {1, 1, 1, 1};
  state[0].values = {0.0};
  EXPECT_THROW(m.load_state(state), DimensionError);
  EXPECT_THROW(read_checkpoint("/nonexistent/dir/c.clan"), UsageError);
}

// Tiny 8x8 model composed from the straight-loop references end to end.
TEST(Forward, MatchesOracleComposition) {
  ModelConfig cfg;
  cfg.backbone.stage_channels = {3, 4, 5};
  cfg.backbone.stage_blocks = {1, 1, 1};
  cfg.backbone.input_size = 8;
  cfg.backbone.tap_stages = {2};
  cfg.num_classes = 3;
  cfg.metric = RelationMetric::EmbeddedGaussian;
  auto m = ClanModel<double>::init(cfg, 6);
  randomize(m, 16);
  const Td x = run_model_input(cfg, 2, 12);

  Td h(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) h[i] = 2 * x[i] - 1;
  std::vector<Td> stages;
  for (std::size_t s = 0; s < 3; ++s) {
    const auto& blk = m.backbone.blocks[s][0];
    const std::size_t c = blk.kernel.dim(0), e = h.dim(2);
    oracle::Vec v = oracle::conv2d(h, blk.kernel, blk.bias, 1, 1);
    for (auto& t : v) t = std::max(t, 0.0);
    h = Td({2, c, e / 2, e / 2}, oracle::pool2d(Td({2, c, e, e}, v), true, 2, 2));
    stages.push_back(h);
  }
  const Td& mid = stages[1];
  const Td& top = stages[2];
  const Td refined(mid.shape(), oracle::clca(mid, top, m.clca[0]));
  const Td attended(top.shape(), oracle::clsa(refined, top, m.clsa[0]));

  auto head = [&](const Td& fm, std::size_t i) {
    const oracle::Vec g = oracle::gap(fm);
    const std::size_t c = fm.dim(1);
    oracle::Vec out(2 * 3);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t k = 0; k < 3; ++k) {
        double s = m.heads[i].bias[k];
        for (std::size_t j = 0; j < c; ++j) s += m.heads[i].weight[k * c + j] * g[b * c + j];
        out[b * 3 + k] = s;
      }
    return out;
  };
  const auto got = clan_forward(m, x);
  ASSERT_EQ(got.names, (std::vector<std::string>{"A2", "G", "CLSA"}));
  EXPECT_LT(oracle::max_abs_diff(got.logits[0], head(refined, 0)), 1e-9);
  EXPECT_LT(oracle::max_abs_diff(got.logits[1], head(top, 1)), 1e-9);
  EXPECT_LT(oracle::max_abs_diff(got.logits[2], head(attended, 2)), 1e-9);
}
