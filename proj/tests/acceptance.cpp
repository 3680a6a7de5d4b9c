// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include "mambaseg/checkpoint.hpp"
#include "mambaseg/gradcheck.hpp"
#include "mambaseg/model.hpp"
#include "mambaseg/objectives.hpp"
#include "mambaseg/profiler.hpp"
#include "mambaseg/ssm.hpp"
#include "mambaseg/trainer.hpp"
#include "oracles.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>

using namespace mambaseg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string fmt(const char* format, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c, d);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome stage_plan_fidelity() {
  const std::vector<StageShape> expected{{16, 192, 256}, {32, 96, 128}, {64, 48, 64},
                                         {128, 24, 32},  {256, 12, 16}, {512, 6, 8}};
  const ModelConfig cfg;
  if (stage_plan(192, 256, 16).stages != expected) return {false, "stage_plan differs"};
  MambaSeg<float> model(cfg);
  model.set_training(false);
  ForwardTrace<float> trace;
  NoGradGuard guard;
  const auto logits = model.forward(Tensor<float>::zeros({1, 3, 192, 256}), &trace);
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& s = expected[i];
    if (trace.features[i].shape() != Shape{1, s.channels, s.height, s.width}) {
      return {false, "F" + std::to_string(i) + " is " + to_string(trace.features[i].shape())};
    }
  }
  for (std::size_t k = 0; k < 5; ++k) {
    const auto& s = expected[4 - k];
    if (trace.decoder_outputs[k].shape() != Shape{1, s.channels, s.height, s.width}) {
      return {false, "decoder output " + std::to_string(k) + " is " + to_string(trace.decoder_outputs[k].shape())};
    }
  }
  if (logits.shape() != Shape{1, 1, 192, 256}) return {false, "logits " + to_string(logits.shape())};
  return {true, "6 stages, 5 decoder outputs and logits match"};
}

Outcome gradient_suite() {
  bool ok = true;
  double worst_block = 0, worst_loss = 0;
  std::string failures;
  for (const auto& r : run_gradcheck_suite("all")) {
    const bool loss = r.name.find("loss") != std::string::npos;
    const double tol = loss ? 1e-6 : 1e-4;
    (loss ? worst_loss : worst_block) = std::max(loss ? worst_loss : worst_block, r.max_rel_error);
    if (r.max_rel_error > tol) {
      ok = false;
      failures += " " + r.name;
    }
  }
  return {ok, fmt("max rel err blocks %.2e, losses %.2e", worst_block, worst_loss) + failures};
}

Outcome scan_oracle() {
  std::mt19937_64 gen(2024);
  std::uniform_int_distribution<Index> pick_l(1, 256), pick_n(1, 16), pick_e(1, 8), pick_b(1, 2);
  double worst = 0;
  const int instances = 128;
  for (int i = 0; i < instances; ++i) {
    const Index B = pick_b(gen), L = pick_l(gen), E = pick_e(gen), N = pick_n(gen);
    const auto u = oracle::random_tensor<float>({B, L, E}, gen);
    const auto delta = oracle::random_tensor<float>({B, L, E}, gen, 1e-3, 0.5);
    const auto A = oracle::random_tensor<float>({E, N}, gen, -4.0, -0.05);
    const auto b = oracle::random_tensor<float>({B, L, N}, gen);
    const auto c = oracle::random_tensor<float>({B, L, N}, gen);
    const auto d = oracle::random_tensor<float>({E}, gen);
    const auto expected = oracle::selective_scan(oracle::to_vec(u), oracle::to_vec(delta), oracle::to_vec(A),
                                                 oracle::to_vec(b), oracle::to_vec(c), oracle::to_vec(d), B, L, E, N);
    const auto y = selective_scan(u, delta, A, b, c, d);
    worst = std::max(worst, oracle::relative_error(oracle::to_vec(y), expected));
  }
  return {worst <= 1e-5, fmt("%.0f float32 instances, max relative error %.2e", instances, worst)};
}

Outcome loss_identities() {
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> prob(0.001, 0.999);
  std::bernoulli_distribution bit(0.4);
  const LossConfig cfg;
  double dice_gap = 0, linear_gap = 0, perfect = 0;
  for (int i = 0; i < 100; ++i) {
    auto p = Tensor<double>::zeros({1, 1, 8, 8}), y = Tensor<double>::zeros({1, 1, 8, 8});
    for (Index k = 0; k < 64; ++k) {
      p.mutable_data()[k] = prob(gen);
      y.mutable_data()[k] = bit(gen);
    }
    const double dice = dice_loss(p, y).item();
    dice_gap = std::max(dice_gap, std::abs(tversky_loss(p, y, 0.5, 0.5).item() - dice));
    const double combined = combined_loss(p, y, cfg).item();
    linear_gap =
        std::max(linear_gap, std::abs(combined - 0.5 * dice - 0.5 * tversky_loss(p, y, cfg.alpha, cfg.beta).item()));
    perfect = std::max(perfect, combined_loss(y, y, cfg).item());
  }
  const bool ok = dice_gap <= 1e-6 && linear_gap <= 1e-7 && perfect <= 2 * cfg.epsilon;
  return {ok, fmt("tversky(0.5,0.5)-dice %.1e, combined linearity %.1e, perfect %.1e", dice_gap, linear_gap, perfect)};
}

Outcome metric_identity() {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> density(0.05, 0.95);
  double gap = 0;
  for (int i = 0; i < 1000; ++i) {
    std::bernoulli_distribution a(density(gen)), b(density(gen));
    auto pred = Tensor<float>::zeros({1, 1, 16, 16}), gt = Tensor<float>::zeros({1, 1, 16, 16});
    for (Index k = 0; k < 256; ++k) {
      pred.mutable_data()[k] = a(gen);
      gt.mutable_data()[k] = b(gen);
    }
    const auto c = confusion_counts(pred, gt);
    const double j = iou(c, 0.0);
    gap = std::max(gap, std::abs(dsc(c, 0.0) - 2 * j / (1 + j)));
  }
  const ConfusionCounts example{3, 1, 1, 0};
  const double d = dsc(example, 0.0), j = iou(example, 0.0);
  const bool ok = gap <= 1e-9 && std::abs(d - 0.75) < 1e-12 && std::abs(j - 0.60) < 1e-12;
  return {ok, fmt("identity gap %.1e over 1000 pairs; example (%.2f, %.2f)", gap, d, j)};
}

Outcome profiler_vs_paper() {
  const ModelConfig base;
  std::map<Variant, std::int64_t> params;
  std::string detail;
  const auto dir = oracle::scratch_dir("acceptance_profiler");
  for (Variant v : {Variant::plain, Variant::no_attention, Variant::no_vss, Variant::full}) {
    const ModelConfig cfg = with_variant(base, v);
    params[v] = count_params(cfg);
    const ReportedCost paper = reported_cost(v);
    detail += std::string(to_string(v)) + fmt(" %.2fM/%.2fG (paper %.2fM/%.2fG); ", params[v] / 1e6,
                                              count_flops(cfg, 192, 256) / 1e9, paper.params / 1e6, paper.flops / 1e9);
  }
  const bool ordered = params[Variant::plain] < params[Variant::no_attention] &&
                       params[Variant::no_attention] < params[Variant::no_vss] &&
                       params[Variant::no_vss] < params[Variant::full];
  const double deviation = static_cast<double>(params[Variant::full]) / 8.00e6 - 1.0;
  MambaSeg<float> model(base);
  save_checkpoint(dir, model);
  const bool serialized = checkpoint_parameter_scalars(dir) == params[Variant::full] &&
                          model.parameter_count() == params[Variant::full];
  detail += fmt("full vs 8.00M %+.1f%%", 100 * deviation);
  if (!ordered) detail += "; ordering violated";
  if (!serialized) detail += "; checkpoint scalar count differs";
  return {ordered && std::abs(deviation) <= 0.20 && serialized, detail};
}

Outcome overfit_sanity() {
  const TrainConfig smoke = smoke_preset();
  const LoadedData smoke_data = load_data(smoke);
  const TrainResult s = train_on(smoke, smoke_data.train, smoke_data.test);
  const double first = s.iteration_losses.front();
  double lowest = first;
  for (std::size_t i = 0; i < s.iteration_losses.size() && i < 30; ++i) lowest = std::min(lowest, s.iteration_losses[i]);
  const TrainConfig overfit = overfit_preset();
  const LoadedData data = load_data(overfit);
  const TrainResult o = train_on(overfit, data.train, data.test);
  const bool ok = lowest <= 0.5 * first && s.iteration_losses.size() <= 30 && o.best_dsc >= 0.95 &&
                  o.iteration_losses.size() <= 200;
  return {ok, fmt("smoke loss %.4f -> %.4f in %.0f iterations; overfit train DSC %.4f", first, lowest,
                  static_cast<double>(s.iteration_losses.size()), o.best_dsc)};
}

Outcome determinism_and_round_trips() {
  const auto dir = oracle::scratch_dir("acceptance_determinism");
  TrainConfig cfg = smoke_preset();
  cfg.epochs = 4;
  cfg.max_iterations = 4;
  const LoadedData data = load_data(cfg);
  train_on(cfg, data.train, data.test, dir / "a");
  const TrainResult b = train_on(cfg, data.train, data.test, dir / "b");
  const bool logs_equal = read_file(dir / "a" / "log.jsonl") == read_file(dir / "b" / "log.jsonl") &&
                          !read_file(dir / "a" / "log.jsonl").empty();

  const MetricSummary direct = evaluate(*b.model, data.train);
  const LoadedCheckpoint loaded = load_checkpoint(dir / "b" / "final");
  const MetricSummary reloaded = evaluate(*loaded.model, data.train);
  bool eval_equal = direct.per_image.size() == reloaded.per_image.size() && direct.mean_dsc == reloaded.mean_dsc;
  for (std::size_t i = 0; eval_equal && i < direct.per_image.size(); ++i) {
    eval_equal = direct.per_image[i].dsc == reloaded.per_image[i].dsc && direct.per_image[i].iou == reloaded.per_image[i].iou;
  }

  write_synthetic_dataset(dir / "images", 2, 5, {64, 64});
  const auto paths = expand_glob((dir / "images" / "images" / "*.png").string());
  const PredictReport report = predict(*loaded.model, paths, dir / "pred");
  bool png_equal = report.errors.empty() && !paths.empty();
  for (const auto& path : paths) {
    const auto image = image_to_tensor(read_image(path), {64, 64});
    const auto mask = predict_masks(*loaded.model, reshape(image, {1, 3, 64, 64}));
    const auto back = mask_to_tensor(read_image(dir / "pred" / (path.stem().string() + "_mask.png")), {64, 64});
    png_equal = png_equal && (back.data() == mask.data()).all();
  }
  return {logs_equal && eval_equal && png_equal,
          std::string("log replay ") + (logs_equal ? "identical" : "DIFFERS") + ", save/load/evaluate " +
              (eval_equal ? "identical" : "DIFFERS") + ", predict PNG " + (png_equal ? "identical" : "DIFFERS")};
}

Outcome variant_integrity() {
  std::string detail;
  bool ok = true;
  std::map<Variant, Index> params;
  for (Variant v : {Variant::full, Variant::no_attention, Variant::no_vss, Variant::plain}) {
    TrainConfig cfg = smoke_preset();
    cfg.model.variant = v;
    cfg.epochs = 1;
    const LoadedData data = load_data(cfg);
    const TrainResult r = train_on(cfg, data.train, data.test);
    const auto logits = r.model->forward(collate(data.train, {0, 1}).images);
    const bool shape_ok = logits.shape() == Shape{2, 1, 64, 64} && r.epochs.size() == 1 &&
                          std::isfinite(r.epochs[0].train_loss);
    ok = ok && shape_ok;
    params[v] = build_variant<float>(ModelConfig{}, v)->parameter_count();
    detail += std::string(to_string(v)) + (shape_ok ? " ok; " : " BAD; ");
  }
  const ModelConfig cfg;
  std::int64_t attention = 0;
  for (int i = 1; i <= kEncoderStages; ++i) {
    const Index c = cfg.stage_channels(i);
    attention += cbam_param_count(cfg.cbam(c)) +
                 attention_gate_param_count(c, c, AttentionGate<float>::default_inter_channels(c));
  }
  const std::int64_t diff = params[Variant::full] - params[Variant::no_attention];
  ok = ok && diff == attention;
  detail += fmt("full - no-attention = %.0f, CBAM+AG sum = %.0f", static_cast<double>(diff),
                static_cast<double>(attention));
  return {ok, detail};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "stage-plan fidelity", 1.0, stage_plan_fidelity},
      {2, "gradient suite", 300.0, gradient_suite},
      {3, "scan-oracle equivalence", 60.0, scan_oracle},
      {4, "loss identities", 10.0, loss_identities},
      {5, "metric identity", 10.0, metric_identity},
      {6, "profiler vs paper", 10.0, profiler_vs_paper},
      {7, "overfit sanity", 600.0, overfit_sanity},
      {8, "determinism and round-trips", 120.0, determinism_and_round_trips},
      {9, "variant integrity", 300.0, variant_integrity},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = seconds <= c.budget_seconds;
    const bool passed = out.passed && in_time;
    failed += passed ? 0 : 1;
    std::printf("%s %d %s [%.2f s / %.0f s budget%s]: %s\n", passed ? "PASS" : "FAIL", c.id, c.name, seconds,
                c.budget_seconds, in_time ? "" : ", over budget", out.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
