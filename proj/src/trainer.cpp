#include "mambaseg/trainer.hpp"

#include "mambaseg/errors.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>

namespace mambaseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

json split_to_json(const SplitSpec& s) {
  return {{"train_count", s.train_count},
          {"test_count", s.test_count},
          {"seed", s.seed},
          {"ordering", s.ordering == SplitOrdering::lexicographic ? "lexicographic" : "seeded_shuffle"}};
}

SplitSpec split_from_json(const json& j) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name == "isic2018") return SplitSpec::isic2018();
    if (name == "ph2") return SplitSpec::ph2();
    throw ConfigError("unknown split preset '" + name + "' (expected isic2018 or ph2)");
  }
  SplitSpec s{};
  reject_unknown(j, {"preset", "train_count", "test_count", "seed", "ordering"}, "dataset.split");
  if (j.contains("preset")) s = split_from_json(j.at("preset"));
  read_key(j, "train_count", s.train_count, "dataset.split");
  read_key(j, "test_count", s.test_count, "dataset.split");
  read_key(j, "seed", s.seed, "dataset.split");
  if (j.contains("ordering")) {
    const auto o = j.at("ordering").get<std::string>();
    if (o == "lexicographic") {
      s.ordering = SplitOrdering::lexicographic;
    } else if (o == "seeded_shuffle" || o == "seeded-shuffle") {
      s.ordering = SplitOrdering::seeded_shuffle;
    } else {
      throw ConfigError("dataset.split.ordering must be lexicographic or seeded_shuffle");
    }
  }
  return s;
}

TargetSize target_of(const ModelConfig& m) { return {m.input_h, m.input_w}; }

void append_line(const fs::path& path, const json& row) {
  std::ofstream os(path, std::ios::app);
  if (!os) throw IoError("cannot append to " + path.string());
  os << row.dump() << '\n';
}

std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (early_stopping_patience < 0) throw ConfigError("early_stopping_patience must be >= 0");
  if (max_iterations < 0) throw ConfigError("max_iterations must be >= 0");
  PlateauConfig{lr, plateau_factor, plateau_patience, plateau_threshold, min_lr}.validate();
  loss.validate();
  model.validate();
  if (dataset.test_on_train && dataset.split.test_count != 0) {
    throw ConfigError("dataset.test_on_train requires split.test_count = 0");
  }
}

json to_json(const TrainConfig& c) {
  return {
      {"lr", c.lr},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"plateau_patience", c.plateau_patience},
      {"plateau_factor", c.plateau_factor},
      {"plateau_threshold", c.plateau_threshold},
      {"min_lr", c.min_lr},
      {"early_stopping_patience", c.early_stopping_patience},
      {"max_iterations", c.max_iterations},
      {"seed", c.seed},
      {"shuffle", c.shuffle},
      {"loss",
       {{"alpha", c.loss.alpha},
        {"beta", c.loss.beta},
        {"epsilon", c.loss.epsilon},
        {"dice_weight", c.loss.dice_weight},
        {"tversky_weight", c.loss.tversky_weight},
        {"allow_unnormalized_tversky", c.loss.allow_unnormalized_tversky}}},
      {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
      {"model", to_json(c.model)},
      {"dataset",
       {{"root", c.dataset.root},
        {"split", split_to_json(c.dataset.split)},
        {"synthetic_count", c.dataset.synthetic_count},
        {"synthetic_seed", c.dataset.synthetic_seed},
        {"test_on_train", c.dataset.test_on_train}}},
      {"out_dir", c.out_dir},
  };
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  const std::string w = "config";
  reject_unknown(j,
                 {"lr", "epochs", "batch_size", "plateau_patience", "plateau_factor", "plateau_threshold", "min_lr",
                  "early_stopping_patience", "max_iterations", "seed", "shuffle", "loss", "adam", "model", "dataset",
                  "out_dir"},
                 w);
  read_key(j, "lr", c.lr, w);
  read_key(j, "epochs", c.epochs, w);
  read_key(j, "batch_size", c.batch_size, w);
  read_key(j, "plateau_patience", c.plateau_patience, w);
  read_key(j, "plateau_factor", c.plateau_factor, w);
  read_key(j, "plateau_threshold", c.plateau_threshold, w);
  read_key(j, "min_lr", c.min_lr, w);
  read_key(j, "early_stopping_patience", c.early_stopping_patience, w);
  read_key(j, "max_iterations", c.max_iterations, w);
  read_key(j, "seed", c.seed, w);
  read_key(j, "shuffle", c.shuffle, w);
  read_key(j, "out_dir", c.out_dir, w);
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    reject_unknown(l, {"alpha", "beta", "epsilon", "dice_weight", "tversky_weight", "allow_unnormalized_tversky"},
                   "loss");
    read_key(l, "alpha", c.loss.alpha, "loss");
    read_key(l, "beta", c.loss.beta, "loss");
    read_key(l, "epsilon", c.loss.epsilon, "loss");
    read_key(l, "dice_weight", c.loss.dice_weight, "loss");
    read_key(l, "tversky_weight", c.loss.tversky_weight, "loss");
    read_key(l, "allow_unnormalized_tversky", c.loss.allow_unnormalized_tversky, "loss");
  }
  if (j.contains("adam")) {
    const json& a = j.at("adam");
    reject_unknown(a, {"beta1", "beta2", "eps"}, "adam");
    read_key(a, "beta1", c.adam.beta1, "adam");
    read_key(a, "beta2", c.adam.beta2, "adam");
    read_key(a, "eps", c.adam.eps, "adam");
  }
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"), c.model);
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    reject_unknown(d, {"root", "split", "synthetic_count", "synthetic_seed", "test_on_train"}, "dataset");
    read_key(d, "root", c.dataset.root, "dataset");
    if (d.contains("split")) c.dataset.split = split_from_json(d.at("split"));
    read_key(d, "synthetic_count", c.dataset.synthetic_count, "dataset");
    read_key(d, "synthetic_seed", c.dataset.synthetic_seed, "dataset");
    read_key(d, "test_on_train", c.dataset.test_on_train, "dataset");
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"test_dsc", r.test_dsc}, {"test_iou", r.test_iou},
          {"lr", r.lr}};
}

LoadedData load_data(const TrainConfig& cfg) {
  const TargetSize size = target_of(cfg.model);
  LoadedData out;
  if (cfg.dataset.synthetic_count > 0) {
    auto s = split(synthesize_samples(cfg.dataset.synthetic_seed, cfg.dataset.synthetic_count, size),
                   cfg.dataset.split);
    out.train = std::move(s.train);
    out.test = std::move(s.test);
  } else {
    if (cfg.dataset.root.empty()) throw ConfigError("dataset.root is empty and no synthetic data was requested");
    const auto s = split(scan_dataset(cfg.dataset.root), cfg.dataset.split);
    out.train = load_samples(s.train, size);
    out.test = load_samples(s.test, size);
  }
  if (cfg.dataset.test_on_train) out.test = out.train;
  return out;
}

MetricSummary evaluate(MambaSeg<float>& model, const std::vector<Sample>& samples, Index batch_size) {
  std::vector<ImageMetrics> per_image;
  if (samples.empty()) return summarize(per_image);
  const Batches batches(samples, batch_size, false, 0);
  for (Index i = 0; i < batches.count(); ++i) {
    const Batch batch = batches.get(i);
    const Tensor<float> pred = predict_masks(model, batch.images);
    const Index per = pred.numel() / pred.dim(0);
    for (Index b = 0; b < pred.dim(0); ++b) {
      const ConfusionCounts c = confusion_counts(pred.data().data() + b * per, batch.masks.data().data() + b * per, per);
      per_image.push_back({batch.ids[static_cast<std::size_t>(b)], dsc(c), iou(c)});
    }
  }
  return summarize(std::move(per_image));
}

Tensor<float> predict_masks(MambaSeg<float>& model, const Tensor<float>& images) {
  NoGradGuard guard;
  const bool was_training = model.training();
  model.set_training(false);
  Tensor<float> logits = model.forward(images);
  model.set_training(was_training);
  return threshold_logits(logits);
}

TrainResult train_on(const TrainConfig& cfg_in, const std::vector<Sample>& train_set, const std::vector<Sample>& test_set,
                     const fs::path& out_dir) {
  cfg_in.validate();
  TrainConfig cfg = cfg_in;
  cfg.model.init_seed = cfg.seed;
  if (train_set.empty() && cfg.epochs > 0) throw UsageError("training split is empty");

  TrainResult result;
  result.model = std::make_unique<MambaSeg<float>>(cfg.model);
  MambaSeg<float>& model = *result.model;
  std::vector<Tensor<float>> params;
  for (auto& p : model.parameters()) params.push_back(p.tensor);
  Adam<float> adam(params, cfg.adam);
  PlateauScheduler scheduler({cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold, cfg.min_lr});

  const bool persist = !out_dir.empty();
  const fs::path log_path = out_dir / "log.jsonl";
  json split_meta = split_to_json(cfg.dataset.split);
  split_meta["test_on_train"] = cfg.dataset.test_on_train;
  auto metadata = [&](int epoch, double dice) {
    return json{{"epoch", epoch}, {"test_dsc", dice}, {"split", split_meta}, {"train_config", to_json(cfg)}};
  };
  if (persist) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    std::ofstream(log_path, std::ios::trunc);
    std::ofstream(out_dir / "config.json", std::ios::trunc) << to_json(cfg).dump(2) << '\n';
  }

  std::int64_t iteration = 0;
  int stale_epochs = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.max_iterations > 0 && iteration >= cfg.max_iterations) break;
    model.set_training(true);
    const double lr = scheduler.lr();
    const Batches batches(train_set, cfg.batch_size, cfg.shuffle, cfg.seed, static_cast<std::uint64_t>(epoch));
    double loss_sum = 0;
    Index seen = 0;
    for (Index i = 0; i < batches.count(); ++i) {
      if (cfg.max_iterations > 0 && iteration >= cfg.max_iterations) break;
      const Batch batch = batches.get(i);
      adam.zero_grad();
      const Tensor<float> logits = model.forward(batch.images);
      const bool logits_finite = logits.data().allFinite();
      // Non-finite logits would be rejected by the loss's input validation.
      Tensor<float> loss;
      double value = std::numeric_limits<double>::quiet_NaN();
      if (logits_finite) {
        loss = combined_loss_from_logits(logits, batch.masks, cfg.loss);
        value = loss.item();
      }
      if (!std::isfinite(value)) {
        const json dump{{"epoch", epoch},
                        {"iteration", iteration + 1},
                        {"batch_index", i},
                        {"batch_ids", batch.ids},
                        {"loss", std::isnan(value) ? "nan" : "inf"},
                        {"logits_finite", logits_finite},
                        {"lr", lr}};
        if (persist) std::ofstream(out_dir / "nan_dump.json") << dump.dump(2) << '\n';
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(i) +
                           " (" + dump["batch_ids"].dump() + ")");
      }
      loss.backward();
      adam.step(lr);
      ++iteration;
      result.iteration_losses.push_back(value);
      loss_sum += value * static_cast<double>(batch.ids.size());
      seen += static_cast<Index>(batch.ids.size());
    }

    const MetricSummary metrics = evaluate(model, test_set, cfg.batch_size);
    EpochRecord rec{epoch, seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0, metrics.mean_dsc, metrics.mean_iou,
                    lr};
    result.epochs.push_back(rec);
    if (persist) append_line(log_path, to_json(rec));
    scheduler.step(rec.test_dsc);

    if (rec.test_dsc > result.best_dsc) {
      result.best_dsc = rec.test_dsc;
      result.best_epoch = epoch;
      stale_epochs = 0;
      if (persist) save_checkpoint(out_dir / "best", model, metadata(epoch, rec.test_dsc));
    } else if (cfg.early_stopping_patience > 0 && ++stale_epochs >= cfg.early_stopping_patience) {
      break;
    }
  }
  model.set_training(false);
  if (persist) {
    const double last = result.epochs.empty() ? 0.0 : result.epochs.back().test_dsc;
    save_checkpoint(out_dir / "final", model, metadata(result.epochs.empty() ? 0 : result.epochs.back().epoch, last));
  }
  return result;
}

TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  const LoadedData data = load_data(cfg);
  return train_on(cfg, data.train, data.test, cfg.out_dir);
}

std::vector<Sample> checkpoint_split(const LoadedCheckpoint& ckpt, const fs::path& dataset_root,
                                     const std::string& which) {
  if (which != "train" && which != "test" && which != "all") {
    throw UsageError("split must be train, test or all, got '" + which + "'");
  }
  const TargetSize size = target_of(ckpt.model->config());
  const auto items = scan_dataset(dataset_root);
  if (which == "all" || !ckpt.metadata.contains("split")) {
    if (which == "train") throw UsageError("checkpoint records no split; use --split test or all");
    return load_samples(items, size);
  }
  const json& meta = ckpt.metadata.at("split");
  json spec_json = meta;
  spec_json.erase("test_on_train");
  const auto parts = split(items, split_from_json(spec_json));
  if (which == "train" || meta.value("test_on_train", false)) return load_samples(parts.train, size);
  return load_samples(parts.test, size);
}

Image overlay_boundary(const Tensor<float>& image, const Tensor<float>& mask) {
  const Index H = image.dim(1), W = image.dim(2);
  Image out{H, W, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(H * W * 3))};
  const auto& px = image.data();
  const auto& m = mask.data();
  auto inside = [&](Index y, Index x) { return y >= 0 && y < H && x >= 0 && x < W && m(y * W + x) > 0.5f; };
  for (Index y = 0; y < H; ++y) {
    for (Index x = 0; x < W; ++x) {
      const bool edge = inside(y, x) && (!inside(y - 1, x) || !inside(y + 1, x) || !inside(y, x - 1) || !inside(y, x + 1));
      for (Index c = 0; c < 3; ++c) {
        out.at(y, x, c) = edge ? (c == 0 ? 255 : 0) : to_byte(px((c * H + y) * W + x));
      }
    }
  }
  return out;
}

PredictReport predict(MambaSeg<float>& model, const std::vector<fs::path>& images, const fs::path& out_dir) {
  PredictReport report;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const TargetSize size = target_of(model.config());
  for (const auto& path : images) {
    try {
      const Tensor<float> image = image_to_tensor(read_image(path), size);
      const Tensor<float> batch = reshape(image, {1, 3, size.height, size.width});
      const Tensor<float> mask = predict_masks(model, batch);
      Image mask_png{size.height, size.width, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(mask.numel()))};
      for (Index i = 0; i < mask.numel(); ++i) mask_png.pixels[static_cast<std::size_t>(i)] = mask.data()(i) > 0.5f ? 255 : 0;
      const std::string stem = path.stem().string();
      const fs::path mask_path = out_dir / (stem + "_mask.png");
      const fs::path overlay_path = out_dir / (stem + "_overlay.png");
      write_png(mask_path, mask_png);
      write_png(overlay_path, overlay_boundary(image, mask));
      report.written.push_back(mask_path);
      report.written.push_back(overlay_path);
    } catch (const Error& e) {
      report.errors.push_back(path.string() + ": " + e.what());
    }
  }
  return report;
}

std::vector<fs::path> expand_glob(const std::string& pattern) {
  const fs::path p(pattern);
  const std::string name = p.filename().string();
  if (name.find_first_of("*?") == std::string::npos) return {p};
  const fs::path dir = p.has_parent_path() ? p.parent_path() : fs::path(".");
  // Iterative wildcard match with single-star backtracking.
  auto match = [](const std::string& pat, const std::string& s) {
    std::size_t i = 0, j = 0, star = std::string::npos, mark = 0;
    while (j < s.size()) {
      if (i < pat.size() && (pat[i] == '?' || pat[i] == s[j])) {
        ++i;
        ++j;
      } else if (i < pat.size() && pat[i] == '*') {
        star = i++;
        mark = j;
      } else if (star != std::string::npos) {
        i = star + 1;
        j = ++mark;
      } else {
        return false;
      }
    }
    while (i < pat.size() && pat[i] == '*') ++i;
    return i == pat.size();
  };
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && match(name, entry.path().filename().string())) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

TrainConfig smoke_preset() {
  TrainConfig cfg;
  cfg.model.input_h = 64;
  cfg.model.input_w = 64;
  cfg.model.base_channels = 8;
  cfg.dataset.synthetic_count = 4;
  cfg.dataset.split = {4, 0, 0, SplitOrdering::lexicographic};
  cfg.dataset.test_on_train = true;
  cfg.batch_size = 4;
  cfg.epochs = 30;
  cfg.max_iterations = 30;
  cfg.lr = 1e-3;
  cfg.out_dir = "runs/smoke";
  return cfg;
}

TrainConfig overfit_preset() {
  TrainConfig cfg = smoke_preset();
  cfg.epochs = 200;
  cfg.max_iterations = 200;
  cfg.out_dir = "runs/overfit";
  return cfg;
}

}  // namespace mambaseg
