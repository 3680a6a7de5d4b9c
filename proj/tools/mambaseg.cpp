#include "mambaseg/checkpoint.hpp"
#include "mambaseg/errors.hpp"
#include "mambaseg/gradcheck.hpp"
#include "mambaseg/profiler.hpp"
#include "mambaseg/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>

namespace fs = std::filesystem;
using namespace mambaseg;

namespace {

struct Extents {
  Index height = 192;
  Index width = 256;
};

Extents parse_extents(const std::string& text) {
  static const std::regex re(R"((\d+)[xX](\d+))");
  std::smatch m;
  if (!std::regex_match(text, m, re)) throw UsageError("expected HxW extents, got '" + text + "'");
  return {std::stoll(m[1]), std::stoll(m[2])};
}

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string dataset;
  std::string variant;
  std::string out;
  std::string preset;
  std::optional<int> epochs;
  std::optional<double> lr;
  std::optional<Index> batch_size;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg;
  if (a.preset == "smoke") cfg = smoke_preset();
  if (a.preset == "overfit") cfg = overfit_preset();
  if (!a.config.empty()) cfg = train_config_from_json(nlohmann::json::parse(std::ifstream(a.config), nullptr, true), cfg);
  if (a.seed) cfg.seed = *a.seed;
  if (!a.dataset.empty()) {
    cfg.dataset.root = a.dataset;
    cfg.dataset.synthetic_count = 0;
  }
  if (!a.variant.empty()) cfg.model.variant = parse_variant(a.variant);
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.lr) cfg.lr = *a.lr;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  cfg.validate();

  const TrainResult r = train(cfg);
  for (const auto& e : r.epochs) std::cout << to_json(e).dump() << '\n';
  std::cerr << "best test DSC " << r.best_dsc << " at epoch " << r.best_epoch << "; checkpoints in " << cfg.out_dir
            << '\n';
  return 0;
}

int run_evaluate(const std::string& checkpoint, const std::string& dataset, const std::string& which,
                 const std::string& out) {
  LoadedCheckpoint ckpt = load_checkpoint(checkpoint);
  const std::vector<Sample> samples = checkpoint_split(ckpt, dataset, which);
  const MetricSummary summary = evaluate(*ckpt.model, samples);
  if (out.empty()) {
    write_metrics_jsonl(std::cout, summary);
  } else {
    std::ofstream os(out);
    if (!os) throw IoError("cannot write " + out);
    write_metrics_jsonl(os, summary);
  }
  std::cerr << samples.size() << " images: mean DSC " << summary.mean_dsc << ", mean IoU " << summary.mean_iou << '\n';
  return 0;
}

int run_predict(const std::string& checkpoint, const std::string& images, const std::string& out) {
  LoadedCheckpoint ckpt = load_checkpoint(checkpoint);
  const auto paths = expand_glob(images);
  if (paths.empty()) throw UsageError("no images match '" + images + "'");
  const PredictReport report = predict(*ckpt.model, paths, out);
  for (const auto& p : report.written) std::cout << p.string() << '\n';
  for (const auto& e : report.errors) std::cerr << "error: " << e << '\n';
  return report.errors.empty() ? 0 : 1;
}

int run_profile(const std::string& variant, const std::string& input, Index base, const std::string& out) {
  ModelConfig cfg;
  cfg.variant = parse_variant(variant);
  const Extents e = parse_extents(input);
  cfg.input_h = e.height;
  cfg.input_w = e.width;
  cfg.base_channels = base;
  cfg.validate();
  const Profile profile = profile_model(cfg);
  if (out.empty()) {
    write_profile_csv(std::cout, profile, cfg.variant);
  } else {
    std::ofstream os(out);
    if (!os) throw IoError("cannot write " + out);
    write_profile_csv(os, profile, cfg.variant);
  }
  return 0;
}

int run_gradcheck(const std::string& module) {
  bool ok = true;
  for (const auto& r : run_gradcheck_suite(module)) {
    std::printf("%-5s %-28s max_rel_err=%.3e tol=%.0e coords=%lld  %s\n", r.passed() ? "PASS" : "FAIL", r.name.c_str(),
                r.max_rel_error, r.tolerance, static_cast<long long>(r.coordinates), r.worst.c_str());
    ok = ok && r.passed();
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skin lesion segmentation: training, evaluation, prediction and profiling"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a model; writes log.jsonl, config.json, best/ and final/");
  train_cmd->add_option("--config", train_args.config, "JSON training configuration")->check(CLI::ExistingFile);
  train_cmd->add_option("--preset", train_args.preset, "Start from a built-in configuration")
      ->check(CLI::IsMember({"smoke", "overfit"}));
  train_cmd->add_option("--seed", train_args.seed, "Overrides seed");
  train_cmd->add_option("--dataset", train_args.dataset, "Dataset root with images/ and masks/ (overrides dataset.root)");
  train_cmd->add_option("--variant", train_args.variant, "full | no-attention | no-vss | plain");
  train_cmd->add_option("--out", train_args.out, "Overrides out_dir");
  train_cmd->add_option("--epochs", train_args.epochs, "Overrides epochs");
  train_cmd->add_option("--lr", train_args.lr, "Overrides lr");
  train_cmd->add_option("--batch-size", train_args.batch_size, "Overrides batch_size");

  std::string checkpoint, dataset, split = "test", metrics_out;
  auto* eval_cmd = app.add_subcommand("evaluate", "Per-image DSC/IoU as JSONL followed by a summary row");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--dataset", dataset, "Dataset root with images/ and masks/")->required();
  eval_cmd->add_option("--split", split, "train | test | all")->check(CLI::IsMember({"train", "test", "all"}));
  eval_cmd->add_option("--out", metrics_out, "Write JSONL here instead of stdout");

  std::string images, predict_out;
  auto* predict_cmd = app.add_subcommand("predict", "Write <stem>_mask.png and <stem>_overlay.png per image");
  predict_cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  predict_cmd->add_option("--images", images, "Image path or file-name wildcard, e.g. data/images/*.jpg")->required();
  predict_cmd->add_option("--out", predict_out, "Output directory")->required();

  std::string variant = "full", input = "192x256", profile_out;
  Index base = 16;
  auto* profile_cmd = app.add_subcommand("profile", "Per-layer parameter and FLOP CSV");
  profile_cmd->add_option("--variant", variant, "full | no-attention | no-vss | plain");
  profile_cmd->add_option("--input", input, "Input extents HxW");
  profile_cmd->add_option("--base", base, "Base channel width");
  profile_cmd->add_option("--out", profile_out, "Write CSV here instead of stdout");

  std::string module = "all";
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks in double precision");
  grad_cmd->add_option("--module", module, "One of: all, " + [] {
    std::string s;
    for (const auto& n : gradcheck_suite_names()) s += (s.empty() ? "" : ", ") + n;
    return s;
  }());

  std::string synth_out;
  Index count = 20;
  std::uint64_t seed = 0;
  std::string synth_size = "192x256";
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic images/ + masks/ dataset");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--count", count, "Number of image/mask pairs");
  synth_cmd->add_option("--seed", seed, "Generator seed");
  synth_cmd->add_option("--size", synth_size, "Image extents HxW");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return run_train(train_args);
    if (*eval_cmd) return run_evaluate(checkpoint, dataset, split, metrics_out);
    if (*predict_cmd) return run_predict(checkpoint, images, predict_out);
    if (*profile_cmd) return run_profile(variant, input, base, profile_out);
    if (*grad_cmd) return run_gradcheck(module);
    if (*synth_cmd) {
      const Extents e = parse_extents(synth_size);
      write_synthetic_dataset(synth_out, count, seed, {e.height, e.width});
      std::cerr << "wrote " << count << " pairs to " << synth_out << '\n';
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
