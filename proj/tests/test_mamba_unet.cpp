#include "mambaseg/checkpoint.hpp"
#include "mambaseg/errors.hpp"
#include "mambaseg/gradcheck.hpp"
#include "mambaseg/model.hpp"
#include "mambaseg/optim.hpp"
#include "mambaseg/profiler.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <map>
#include <random>

using namespace mambaseg;

namespace {

constexpr Variant kVariants[] = {Variant::full, Variant::no_attention, Variant::no_vss, Variant::plain};

ModelConfig small_config(Index base = 8, Index h = 64, Index w = 64) {
  ModelConfig cfg;
  cfg.input_h = h;
  cfg.input_w = w;
  cfg.base_channels = base;
  return cfg;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Biases feeding straight into a batch or instance normalization; their
// exact gradient is zero because the normalization removes per-channel shifts.
bool cancelled_by_norm(const std::string& name) {
  return ends_with(name, ".conv.bias") || ends_with(name, "dwconv.bias") || ends_with(name, "pw_in.bias") ||
         ends_with(name, "pw_out.bias");
}

}  // namespace

TEST(StagePlan, DefaultInputSchedule) {
  const auto plan = stage_plan(192, 256, 16);
  const std::vector<StageShape> expected{{16, 192, 256}, {32, 96, 128}, {64, 48, 64},
                                         {128, 24, 32},  {256, 12, 16}, {512, 6, 8}};
  EXPECT_EQ(plan.stages, expected);
  EXPECT_EQ(stage_plan(64, 64, 8).stages.back(), (StageShape{256, 2, 2}));
}

TEST(StagePlan, RejectsIndivisibleExtents) {
  EXPECT_THROW(stage_plan(190, 256, 16), ConfigError);
  EXPECT_THROW(stage_plan(192, 250, 16), ConfigError);
  EXPECT_THROW(stage_plan(192, 256, 0), ConfigError);
  ModelConfig cfg;
  cfg.input_h = 100;
  EXPECT_THROW(MambaSeg<float> model(cfg), ConfigError);
}

TEST(MambaSeg, TraceShapesFollowStagePlan) {
  ModelConfig cfg;
  MambaSeg<float> model(cfg);
  model.set_training(false);
  ForwardTrace<float> trace;
  Tensor<float> logits;
  {
    NoGradGuard guard;
    logits = model.forward(Tensor<float>::zeros({1, 3, 192, 256}), &trace);
  }
  EXPECT_EQ(logits.shape(), (Shape{1, 1, 192, 256}));
  const auto plan = cfg.plan();
  ASSERT_EQ(trace.features.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto& s = plan.stages[i];
    EXPECT_EQ(trace.features[i].shape(), (Shape{1, s.channels, s.height, s.width})) << "F" << i;
  }
  ASSERT_EQ(trace.skips.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(trace.skips[i].shape(),
              (Shape{1, plan.stages[i + 1].channels, plan.stages[i].height, plan.stages[i].width}));
  }
  EXPECT_EQ(trace.bottleneck.shape(), (Shape{1, 512, 6, 8}));
  // Decoder i restores the shape of F_{i-1}; outputs are stored deepest first.
  ASSERT_EQ(trace.decoder_outputs.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) {
    const auto& s = plan.stages[4 - k];
    EXPECT_EQ(trace.decoder_outputs[k].shape(), (Shape{1, s.channels, s.height, s.width}));
  }
  EXPECT_EQ(trace.decoder_outputs[0].shape(), (Shape{1, 256, 12, 16}));
  EXPECT_TRUE(logits.data().allFinite());
}

TEST(MambaSeg, RejectsWrongInput) {
  MambaSeg<float> model(small_config());
  EXPECT_THROW(model.forward(Tensor<float>::zeros({1, 1, 64, 64})), DimensionError);
  EXPECT_THROW(model.forward(Tensor<float>::zeros({1, 3, 48, 64})), ConfigError);
}

TEST(Variants, ParseAndPrint) {
  for (Variant v : kVariants) EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_EQ(parse_variant("no_vss"), Variant::no_vss);
  EXPECT_THROW(parse_variant("tiny"), ConfigError);
}

TEST(Variants, ParameterOrderingAndAttentionDifference) {
  const ModelConfig cfg;
  std::map<Variant, Index> counts;
  for (Variant v : kVariants) counts[v] = build_variant<float>(cfg, v)->parameter_count();
  EXPECT_LT(counts[Variant::plain], counts[Variant::no_attention]);
  EXPECT_LT(counts[Variant::no_attention], counts[Variant::no_vss]);
  EXPECT_LT(counts[Variant::no_vss], counts[Variant::full]);

  // CBAM on encoder skips 1..5 plus attention gates in decoders 1..5.
  Index attention = 0;
  for (int i = 1; i <= 5; ++i) {
    const Index c = cfg.base_channels << i;
    const Index hidden = std::max<Index>(c / cfg.cbam_reduction, 1);
    const Index k = cfg.cbam_spatial_kernel;
    attention += c * hidden + hidden + hidden * c + c + 2 * k * k + 1;
    const Index inter = c / 2;
    attention += c * inter + inter + c * inter + inter + inter + 1;
  }
  EXPECT_EQ(counts[Variant::full] - counts[Variant::no_attention], attention);
  EXPECT_EQ(counts[Variant::no_vss] - counts[Variant::plain], attention);
}

TEST(Variants, NoVssDiffersOnlyAtMixerSites) {
  const ModelConfig cfg = small_config();
  auto names = [](const MambaSeg<float>& m) {
    std::map<std::string, Shape> out;
    for (const auto& p : m.parameters()) {
      if (p.name.find(".mixer.") == std::string::npos) out[p.name] = p.tensor.shape();
    }
    return out;
  };
  EXPECT_EQ(names(*build_variant<float>(cfg, Variant::full)), names(*build_variant<float>(cfg, Variant::no_vss)));
  EXPECT_EQ(names(*build_variant<float>(cfg, Variant::no_attention)),
            names(*build_variant<float>(cfg, Variant::plain)));
}

TEST(Variants, AnalyticCountsMatchModulesAndCheckpoints) {
  const auto dir = oracle::scratch_dir("model_counts");
  for (Index base : {4, 8, 16}) {
    for (Variant v : kVariants) {
      const ModelConfig cfg = with_variant(small_config(base), v);
      MambaSeg<float> model(cfg);
      EXPECT_EQ(count_params(cfg), model.parameter_count()) << to_string(v) << " base " << base;
      if (base == 8) {
        save_checkpoint(dir / to_string(v), model);
        EXPECT_EQ(checkpoint_parameter_scalars(dir / to_string(v)), model.parameter_count());
      }
    }
  }
  const Profile p = profile_model(small_config());
  EXPECT_EQ(p.total_params(), count_params(small_config()));
  EXPECT_GT(p.total_flops(), 0);
}

TEST(Variants, AllBuildAndRunForwardBackward) {
  for (Variant v : kVariants) {
    auto model = build_variant<float>(small_config(4), v);
    std::mt19937_64 gen(1);
    const auto x = oracle::random_tensor<float>({2, 3, 64, 64}, gen, 0, 1);
    const auto y = model->forward(x);
    EXPECT_EQ(y.shape(), (Shape{2, 1, 64, 64}));
    sum(y).backward();
    EXPECT_TRUE(model->parameters().front().tensor.has_grad());
  }
}

TEST(MambaSeg, SameSeedSameWeights) {
  ModelConfig cfg = small_config();
  cfg.init_seed = 11;
  MambaSeg<float> a(cfg), b(cfg);
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE((pa[i].tensor.data() == pb[i].tensor.data()).all());
  cfg.init_seed = 12;
  MambaSeg<float> c(cfg);
  EXPECT_FALSE((pa[0].tensor.data() == c.parameters()[0].tensor.data()).all());
}

TEST(ResVssBlock, ZeroBranchIsResidualIdentity) {
  InitRng rng(2);
  SsmConfig ssm;
  ssm.state_dim = 4;
  ResVssBlock<double> block(6, ssm, 1.0, rng);
  for (auto& p : block.parameters()) {
    if (p.name != "scale") p.tensor.mutable_data().setZero();
  }
  std::mt19937_64 gen(3);
  const auto x = oracle::random_tensor<double>({2, 6, 4, 4}, gen);
  EXPECT_LT((block.forward(x).data() - x.data()).abs().maxCoeff(), 1e-12);
  EXPECT_EQ(block.inner_channels(), 8);
}

TEST(ResVssBlock, ScaleGradientIsChannelSumOfInput) {
  InitRng rng(4);
  SsmConfig ssm;
  ssm.state_dim = 4;
  ResVssBlock<double> block(5, ssm, 0.5, rng);
  std::mt19937_64 gen(5);
  const Shape s{2, 5, 3, 4};
  const auto x = oracle::random_tensor<double>(s, gen);
  sum(block.forward(x)).backward();
  for (Index c = 0; c < 5; ++c) {
    double expected = 0;
    for (Index n = 0; n < 2; ++n)
      for (Index i = 0; i < 12; ++i) expected += x.data()[oracle::idx4(s, n, c, i / 4, i % 4)];
    EXPECT_NEAR(block.scale().grad()[c], expected, 1e-10);
  }
}

TEST(ResVssBlock, OutputScaleStaysModest) {
  InitRng rng(6);
  ResVssBlock<float> block(32, SsmConfig{}, 1.0, rng);
  std::mt19937_64 gen(7);
  const auto x = oracle::random_tensor<float>({1, 32, 16, 16}, gen);
  const auto y = block.forward(x);
  EXPECT_TRUE(y.data().allFinite());
  EXPECT_LT(y.data().abs().maxCoeff(), 50.0f);
}

TEST(MambaSeg, EveryTrainableTensorReceivesGradient) {
  MambaSeg<float> model(small_config());
  std::vector<Tensor<float>> params;
  for (auto& p : model.parameters()) params.push_back(p.tensor);
  Adam<float> adam(params);
  std::mt19937_64 gen(8);
  const auto x = oracle::random_tensor<float>({2, 3, 64, 64}, gen, 0, 1);
  for (int step = 0; step < 2; ++step) {
    adam.zero_grad();
    sum(model.forward(x)).backward();
    if (step == 0) adam.step(1e-3);
  }
  std::map<std::string, double> weight_norm;
  for (const auto& p : model.parameters()) {
    ASSERT_TRUE(p.tensor.has_grad()) << p.name;
    const double norm = static_cast<double>(p.tensor.grad().matrix().norm());
    EXPECT_TRUE(std::isfinite(norm)) << p.name;
    if (ends_with(p.name, ".weight")) weight_norm[p.name.substr(0, p.name.size() - 7)] = norm;
  }
  for (const auto& p : model.parameters()) {
    const double norm = static_cast<double>(p.tensor.grad().matrix().norm());
    if (cancelled_by_norm(p.name)) {
      const double ref = weight_norm.at(p.name.substr(0, p.name.size() - 5));
      EXPECT_LT(norm, 1e-3 * ref) << p.name;
    } else {
      EXPECT_GT(norm, 0.0) << p.name;
    }
  }
}

TEST(MambaSeg, GradientsMatchFiniteDifferences) {
  for (const char* name : {"res_vss_block", "model"}) {
    for (const auto& r : run_gradcheck_suite(name)) {
      EXPECT_TRUE(r.passed()) << r.name << " " << r.max_rel_error << " " << r.worst;
    }
  }
}

TEST(Profiler, EmptyAndComponentCounts) {
  EXPECT_EQ(cbam_param_count({64, 16, 7}), 64 * 4 + 4 + 4 * 64 + 64 + 99);
  EXPECT_EQ(attention_gate_param_count(32, 32, 16), 32 * 16 + 16 + 32 * 16 + 16 + 17);
  const Profile empty;
  EXPECT_EQ(empty.total_params(), 0);
  EXPECT_EQ(empty.total_flops(), 0);
  const Profile p = profile_model(ModelConfig{});
  const auto tops = p.top_level();
  EXPECT_EQ(tops.front(), "conv_in");
  EXPECT_EQ(tops.back(), "conv_out");
  std::int64_t sum_params = 0;
  for (const auto& t : tops) sum_params += p.subtotal(t).params;
  EXPECT_EQ(sum_params, p.total_params());
}
