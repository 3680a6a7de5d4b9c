#pragma once

#include "mambaseg/checkpoint.hpp"
#include "mambaseg/data.hpp"
#include "mambaseg/model.hpp"
#include "mambaseg/objectives.hpp"
#include "mambaseg/optim.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace mambaseg {

struct DatasetConfig {
  /// Directory with images/ and masks/. Ignored when synthetic_count > 0.
  std::string root;
  SplitSpec split = SplitSpec::isic2018();
  /// When positive, samples are generated in memory instead of read from disk.
  Index synthetic_count = 0;
  std::uint64_t synthetic_seed = 0;
  /// Evaluate on the training samples (overfitting checks); split.test_count must be 0.
  bool test_on_train = false;
};

struct TrainConfig {
  double lr = 2e-4;
  int epochs = 200;
  Index batch_size = 8;
  int plateau_patience = 10;
  double plateau_factor = 0.5;
  double plateau_threshold = 1e-6;
  double min_lr = 0.0;
  int early_stopping_patience = 0;  // 0 disables
  std::int64_t max_iterations = 0;  // 0 means no cap
  /// Drives parameter initialization (overrides model.init_seed) and batch order.
  std::uint64_t seed = 0;
  bool shuffle = true;
  LossConfig loss;
  AdamConfig adam;
  ModelConfig model;
  DatasetConfig dataset;
  std::string out_dir = "runs/default";

  void validate() const;
};

/// Missing keys keep their defaults; unknown keys throw ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig load_train_config(const std::filesystem::path& path);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double test_dsc = 0;
  double test_iou = 0;
  double lr = 0;  // learning rate used during this epoch
};

nlohmann::json to_json(const EpochRecord& r);

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::vector<double> iteration_losses;
  double best_dsc = -1;
  int best_epoch = 0;
  std::unique_ptr<MambaSeg<float>> model;
};

struct LoadedData {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Resolves cfg.dataset into in-memory train/test samples at the model's
/// input extents.
LoadedData load_data(const TrainConfig& cfg);

/// Full training run on explicit samples. When `out_dir` is non-empty it
/// receives log.jsonl (one row per epoch), config.json, best/ (highest test
/// DSC) and final/ checkpoints. A non-finite loss writes nan_dump.json and
/// throws NumericError.
TrainResult train_on(const TrainConfig& cfg, const std::vector<Sample>& train, const std::vector<Sample>& test,
                     const std::filesystem::path& out_dir = {});

/// load_data + train_on into cfg.out_dir.
TrainResult train(const TrainConfig& cfg);

/// Per-image DSC/IoU in evaluation mode, averaged over images.
MetricSummary evaluate(MambaSeg<float>& model, const std::vector<Sample>& samples, Index batch_size = 8);

/// Logits -> {0,1} masks, [B,1,H,W], evaluation mode, no graph.
Tensor<float> predict_masks(MambaSeg<float>& model, const Tensor<float>& images);

/// Selects "train", "test" or "all" of `dataset_root`. The split stored in
/// the checkpoint metadata is used when present; otherwise every pair is
/// treated as test data.
std::vector<Sample> checkpoint_split(const LoadedCheckpoint& ckpt, const std::filesystem::path& dataset_root,
                                     const std::string& which);

struct PredictReport {
  std::vector<std::filesystem::path> written;
  std::vector<std::string> errors;  // one entry per failed input, processing continues
};

/// For every image writes <out>/<stem>_mask.png ({0,255}) and
/// <out>/<stem>_overlay.png (mask boundary in red on the resized image).
PredictReport predict(MambaSeg<float>& model, const std::vector<std::filesystem::path>& images,
                      const std::filesystem::path& out_dir);

/// Red boundary pixels: mask pixels with a 4-neighbour outside the mask.
Image overlay_boundary(const Tensor<float>& image, const Tensor<float>& mask);

/// Expands a single '*'/'?' pattern in the file-name component.
std::vector<std::filesystem::path> expand_glob(const std::string& pattern);

/// Synthetic 4-image, 64x64, base_channels = 8 configurations.
/// smoke: 30 iterations; overfit: 200 iterations with train == test.
TrainConfig smoke_preset();
TrainConfig overfit_preset();

}  // namespace mambaseg
