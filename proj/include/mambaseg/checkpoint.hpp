#pragma once

#include "mambaseg/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>

namespace mambaseg {

/// Keys absent from `j` keep their defaults; unknown keys throw ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
nlohmann::json to_json(const ModelConfig& cfg);

/// Checkpoint directory layout:
///   manifest.json  {"format", "version", "model": ModelConfig,
///                   "tensors": [{name, shape, dtype, byte_offset}],
///                   "buffers": [...same...], "metadata": {...}}
///   weights.bin    trainable parameters, little-endian float32, manifest order
///   buffers.bin    batch-norm running statistics, same encoding
void save_checkpoint(const std::filesystem::path& dir, const MambaSeg<float>& model,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct LoadedCheckpoint {
  std::unique_ptr<MambaSeg<float>> model;
  nlohmann::json metadata;
};

/// Rebuilds the model from the stored config and restores every tensor
/// bit-exactly. Any manifest/blob disagreement throws CheckpointError.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

/// Number of float32 scalars stored in weights.bin, as declared by the
/// manifest and confirmed against the file size.
std::int64_t checkpoint_parameter_scalars(const std::filesystem::path& dir);

}  // namespace mambaseg
