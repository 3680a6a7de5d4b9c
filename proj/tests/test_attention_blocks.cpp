#include "mambaseg/attention.hpp"
#include "mambaseg/errors.hpp"
#include "mambaseg/gradcheck.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace mambaseg;

namespace {

// Replaces every parameter with U(-0.5, 0.5) so biases are exercised too.
template <typename M>
void randomize(M& module, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> dist(-0.5, 0.5);
  for (auto& p : module.parameters()) {
    auto& d = p.tensor.mutable_data();
    for (Index i = 0; i < d.size(); ++i) d[i] = static_cast<typename std::decay_t<decltype(d)>::Scalar>(dist(gen));
  }
}

}  // namespace

TEST(Cbam, MatchesScalarOracle) {
  InitRng rng(1);
  const CbamConfig cfg{8, 4, 3};
  Cbam<double> cbam(cfg, rng);
  randomize(cbam, 2);
  std::mt19937_64 gen(3);
  const Shape s{1, 8, 4, 4};
  const auto x = oracle::random_tensor<double>(s, gen, -2, 2);
  const auto y = cbam.forward(x);
  ASSERT_EQ(y.shape(), s);

  const Index C = 8, Hd = cfg.hidden(), H = 4, W = 4, K = 3;
  const auto& w1 = cbam.fc1().weight().data();
  const auto& b1 = cbam.fc1().bias().data();
  const auto& w2 = cbam.fc2().weight().data();
  const auto& b2 = cbam.fc2().bias().data();
  auto mlp = [&](const std::vector<double>& d) {
    std::vector<double> hidden(static_cast<std::size_t>(Hd)), out(static_cast<std::size_t>(C));
    for (Index j = 0; j < Hd; ++j) {
      double acc = b1[j];
      for (Index c = 0; c < C; ++c) acc += w1[j * C + c] * d[static_cast<std::size_t>(c)];
      hidden[static_cast<std::size_t>(j)] = std::max(acc, 0.0);
    }
    for (Index c = 0; c < C; ++c) {
      double acc = b2[c];
      for (Index j = 0; j < Hd; ++j) acc += w2[c * Hd + j] * hidden[static_cast<std::size_t>(j)];
      out[static_cast<std::size_t>(c)] = acc;
    }
    return out;
  };
  std::vector<double> avg(static_cast<std::size_t>(C), 0.0), mx(static_cast<std::size_t>(C), -1e300);
  for (Index c = 0; c < C; ++c)
    for (Index i = 0; i < H * W; ++i) {
      const double v = x.data()[c * H * W + i];
      avg[static_cast<std::size_t>(c)] += v / (H * W);
      mx[static_cast<std::size_t>(c)] = std::max(mx[static_cast<std::size_t>(c)], v);
    }
  const auto ma = mlp(avg), mm = mlp(mx);
  std::vector<double> refined(static_cast<std::size_t>(C * H * W));
  for (Index c = 0; c < C; ++c) {
    const double a = oracle::sigmoid(ma[static_cast<std::size_t>(c)] + mm[static_cast<std::size_t>(c)]);
    for (Index i = 0; i < H * W; ++i) refined[static_cast<std::size_t>(c * H * W + i)] = a * x.data()[c * H * W + i];
  }
  std::vector<double> desc(static_cast<std::size_t>(2 * H * W));
  for (Index i = 0; i < H * W; ++i) {
    double m = 0, top = -1e300;
    for (Index c = 0; c < C; ++c) {
      m += refined[static_cast<std::size_t>(c * H * W + i)] / C;
      top = std::max(top, refined[static_cast<std::size_t>(c * H * W + i)]);
    }
    desc[static_cast<std::size_t>(i)] = m;
    desc[static_cast<std::size_t>(H * W + i)] = top;
  }
  const auto& ws = cbam.spatial().weight().data();
  const double bs = cbam.spatial().bias().data()[0];
  for (Index h = 0; h < H; ++h)
    for (Index w = 0; w < W; ++w) {
      double acc = bs;
      for (Index ch = 0; ch < 2; ++ch)
        for (Index kh = 0; kh < K; ++kh)
          for (Index kw = 0; kw < K; ++kw) {
            const Index ih = h + kh - K / 2, iw = w + kw - K / 2;
            if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
            acc += ws[(ch * K + kh) * K + kw] * desc[static_cast<std::size_t>(ch * H * W + ih * W + iw)];
          }
      const double gate = oracle::sigmoid(acc);
      for (Index c = 0; c < C; ++c) {
        EXPECT_NEAR(y.at(0, c, h, w), gate * refined[static_cast<std::size_t>(c * H * W + h * W + w)], 1e-12);
      }
    }
}

TEST(Cbam, BoundedByInputAndZeroPreserving) {
  InitRng rng(4);
  Cbam<float> cbam({32, 16, 7}, rng);
  std::mt19937_64 gen(5);
  const auto x = oracle::random_tensor<float>({2, 32, 8, 6}, gen, -3, 3);
  const auto y = cbam.forward(x);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_TRUE((y.data().abs() <= x.data().abs()).all());
  EXPECT_EQ(cbam.forward(Tensor<float>::zeros({1, 32, 4, 4})).data().abs().maxCoeff(), 0.0f);
  const auto cm = cbam.channel_map(x);
  EXPECT_EQ(cm.shape(), (Shape{2, 32, 1, 1}));
  EXPECT_TRUE((cm.data() > 0 && cm.data() < 1).all());
  EXPECT_EQ(cbam.spatial_map(x).shape(), (Shape{2, 1, 8, 6}));
}

TEST(Cbam, ParameterNamesAndCounts) {
  InitRng rng(6);
  Cbam<float> cbam({64, 16, 7}, rng);
  const auto params = cbam.parameters();
  ASSERT_EQ(params.size(), 6u);
  EXPECT_EQ(params[0].name, "mlp.0.weight");
  EXPECT_EQ(params[4].name, "spatial.weight");
  EXPECT_EQ(cbam.parameter_count(), 64 * 4 + 4 + 4 * 64 + 64 + 2 * 49 + 1);
  EXPECT_THROW(cbam.forward(Tensor<float>::zeros({1, 32, 4, 4})), DimensionError);
  EXPECT_THROW((Cbam<float>({8, 4, 4}, rng)), ConfigError);
}

TEST(AttentionGate, MatchesScalarOracle) {
  InitRng rng(7);
  const Index Cs = 4, Cg = 6, F = 3, H = 3, W = 5;
  AttentionGate<double> gate(Cs, Cg, F, rng);
  randomize(gate, 8);
  std::mt19937_64 gen(9);
  const Shape ss{2, Cs, H, W}, gs{2, Cg, H, W};
  const auto skip = oracle::random_tensor<double>(ss, gen, -2, 2);
  const auto g = oracle::random_tensor<double>(gs, gen, -2, 2);
  const auto y = gate.forward(skip, g);
  ASSERT_EQ(y.shape(), ss);
  const auto& wg = gate.w_gate().weight().data();
  const auto& bg = gate.w_gate().bias().data();
  const auto& wx = gate.w_skip().weight().data();
  const auto& bx = gate.w_skip().bias().data();
  const auto& wp = gate.psi().weight().data();
  const double bp = gate.psi().bias().data()[0];
  for (Index n = 0; n < 2; ++n)
    for (Index h = 0; h < H; ++h)
      for (Index w = 0; w < W; ++w) {
        double psi = bp;
        for (Index f = 0; f < F; ++f) {
          double acc = bg[f] + bx[f];
          for (Index c = 0; c < Cg; ++c) acc += wg[f * Cg + c] * g.data()[oracle::idx4(gs, n, c, h, w)];
          for (Index c = 0; c < Cs; ++c) acc += wx[f * Cs + c] * skip.data()[oracle::idx4(ss, n, c, h, w)];
          psi += wp[f] * std::max(acc, 0.0);
        }
        const double alpha = oracle::sigmoid(psi);
        for (Index c = 0; c < Cs; ++c) {
          EXPECT_NEAR(y.at(n, c, h, w), alpha * skip.data()[oracle::idx4(ss, n, c, h, w)], 1e-12);
        }
      }
}

TEST(AttentionGate, BoundedAndShapeChecked) {
  InitRng rng(10);
  AttentionGate<float> gate(16, 32, 8, rng);
  std::mt19937_64 gen(11);
  const auto skip = oracle::random_tensor<float>({1, 16, 6, 8}, gen, -4, 4);
  const auto g = oracle::random_tensor<float>({1, 32, 6, 8}, gen, -4, 4);
  EXPECT_TRUE((gate.forward(skip, g).data().abs() <= skip.data().abs()).all());
  const auto alpha = gate.coefficients(skip, g);
  EXPECT_EQ(alpha.shape(), (Shape{1, 1, 6, 8}));
  EXPECT_EQ(gate.forward(Tensor<float>::zeros({1, 16, 6, 8}), g).data().abs().maxCoeff(), 0.0f);
  EXPECT_THROW(gate.forward(skip, Tensor<float>::zeros({1, 32, 3, 4})), DimensionError);
}

TEST(SkBottleneck, ShapeAndFusionWeightsAtBottleneckScale) {
  InitRng rng(12);
  SkConfig cfg;
  cfg.channels = 512;
  SkBottleneck<float> sk(cfg, rng);
  std::mt19937_64 gen(13);
  const auto x = oracle::random_tensor<float>({2, 512, 6, 8}, gen);
  std::vector<Tensor<float>> weights;
  const auto y = sk.forward(x, &weights);
  EXPECT_EQ(y.shape(), x.shape());
  ASSERT_EQ(weights.size(), 2u);
  const Eigen::ArrayXf total = weights[0].data() + weights[1].data();
  EXPECT_LT((total - 1.0f).abs().maxCoeff(), 1e-6f);
  EXPECT_TRUE((weights[0].data() >= 0).all() && (weights[1].data() >= 0).all());
  EXPECT_EQ(cfg.hidden(), 32);
  EXPECT_EQ(cfg.branch_groups(), 32);
}

TEST(SkBottleneck, ZeroOutputProjectionIsIdentity) {
  InitRng rng(14);
  SkBottleneck<double> sk({16, {1, 2, 3}, 4, 4, 4}, rng);
  for (auto& p : sk.parameters()) {
    if (p.name.rfind("bn_out.", 0) == 0) p.tensor.mutable_data().setZero();
  }
  std::mt19937_64 gen(15);
  const auto x = oracle::random_tensor<double>({2, 16, 4, 4}, gen);
  std::vector<Tensor<double>> weights;
  const auto y = sk.forward(x, &weights);
  EXPECT_LT((y.data() - x.data()).abs().maxCoeff(), 1e-12);
  EXPECT_EQ(weights.size(), 3u);
}

TEST(SkBottleneck, ConfigValidation) {
  InitRng rng(16);
  EXPECT_THROW((SkBottleneck<float>({8, {1}, 4, 4, 4}, rng)), ConfigError);
  EXPECT_THROW((SkBottleneck<float>({8, {1, 0}, 4, 4, 4}, rng)), ConfigError);
  SkConfig odd{24, {1, 2}, 16, 32, 32};
  EXPECT_EQ(odd.branch_groups(), 8);
}

TEST(AttentionBlocks, GradientsMatchFiniteDifferences) {
  for (const char* name : {"cbam", "attention_gate", "sk_bottleneck"}) {
    for (const auto& r : run_gradcheck_suite(name)) {
      EXPECT_TRUE(r.passed()) << r.name << " " << r.max_rel_error << " " << r.worst;
    }
  }
}
