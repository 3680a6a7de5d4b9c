#include "mambaseg/checkpoint.hpp"

#include "mambaseg/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace mambaseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kFormat = "mambaseg-checkpoint";
constexpr int kVersion = 1;

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

const char* to_string(GateActivation g) { return g == GateActivation::silu ? "silu" : "relu"; }
const char* to_string(ScanExecution e) { return e == ScanExecution::reference ? "reference" : "chunked"; }

void write_floats(std::ofstream& os, const Array<float>& data) {
  static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * 4));
  } else {
    for (Index i = 0; i < data.size(); ++i) {
      const auto bits = __builtin_bswap32(std::bit_cast<std::uint32_t>(data(i)));
      os.write(reinterpret_cast<const char*>(&bits), 4);
    }
  }
}

void read_floats(const std::vector<char>& blob, std::int64_t offset, Array<float>& out) {
  std::memcpy(out.data(), blob.data() + offset, static_cast<std::size_t>(out.size()) * 4);
  if constexpr (std::endian::native == std::endian::big) {
    for (Index i = 0; i < out.size(); ++i) {
      out(i) = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(out(i))));
    }
  }
}

json describe(const std::vector<NamedTensor<float>>& tensors, const fs::path& blob_path) {
  json list = json::array();
  std::int64_t offset = 0;
  std::ofstream os(blob_path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + blob_path.string());
  for (const auto& t : tensors) {
    list.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"dtype", "float32"}, {"byte_offset", offset}});
    write_floats(os, t.tensor.data());
    offset += t.tensor.numel() * 4;
  }
  if (!os) throw IoError("short write to " + blob_path.string());
  return list;
}

std::vector<char> read_blob(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("missing " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(is), {});
}

json read_manifest(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw CheckpointError("missing " + (dir / "manifest.json").string());
  json m;
  try {
    is >> m;
  } catch (const json::exception& e) {
    throw CheckpointError("unparsable manifest in " + dir.string() + ": " + e.what());
  }
  if (m.value("format", "") != kFormat || m.value("version", 0) != kVersion) {
    throw CheckpointError(dir.string() + " is not a version " + std::to_string(kVersion) + " checkpoint");
  }
  return m;
}

// Verifies the manifest entries against `tensors` and copies the blob in.
void restore(const json& entries, const std::vector<char>& blob, std::vector<NamedTensor<float>> tensors,
             const std::string& what) {
  if (!entries.is_array() || entries.size() != tensors.size()) {
    throw CheckpointError(what + ": manifest lists " + std::to_string(entries.is_array() ? entries.size() : 0) +
                          " tensors, model has " + std::to_string(tensors.size()));
  }
  std::int64_t expected_offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const json& e = entries[i];
    auto& t = tensors[i];
    const auto name = e.value("name", std::string());
    if (name != t.name) throw CheckpointError(what + ": entry " + std::to_string(i) + " is '" + name + "', expected '" + t.name + "'");
    if (e.value("dtype", std::string()) != "float32") throw CheckpointError(what + ": " + name + " is not float32");
    if (e.at("shape").get<Shape>() != t.tensor.shape()) {
      throw CheckpointError(what + ": " + name + " has shape " + mambaseg::to_string(e.at("shape").get<Shape>()) +
                            ", model expects " + mambaseg::to_string(t.tensor.shape()));
    }
    const auto offset = e.at("byte_offset").get<std::int64_t>();
    if (offset != expected_offset) throw CheckpointError(what + ": " + name + " has a non-contiguous byte_offset");
    expected_offset += t.tensor.numel() * 4;
  }
  if (static_cast<std::int64_t>(blob.size()) != expected_offset) {
    throw CheckpointError(what + ": blob holds " + std::to_string(blob.size()) + " bytes, manifest declares " +
                          std::to_string(expected_offset));
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    read_floats(blob, entries[i].at("byte_offset").get<std::int64_t>(), tensors[i].tensor.mutable_data());
  }
}

}  // namespace

json to_json(const ModelConfig& cfg) {
  return {
      {"input_h", cfg.input_h},
      {"input_w", cfg.input_w},
      {"in_channels", cfg.in_channels},
      {"base_channels", cfg.base_channels},
      {"variant", mambaseg::to_string(cfg.variant)},
      {"ssm",
       {{"state_dim", cfg.ssm.state_dim},
        {"expand", cfg.ssm.expand},
        {"gate", to_string(cfg.ssm.gate)},
        {"dt_min", cfg.ssm.dt_min},
        {"dt_max", cfg.ssm.dt_max},
        {"execution", to_string(cfg.ssm.execution)}}},
      {"cbam", {{"reduction", cfg.cbam_reduction}, {"spatial_kernel", cfg.cbam_spatial_kernel}}},
      {"sk",
       {{"dilations", cfg.sk_dilations},
        {"reduction", cfg.sk_reduction},
        {"min_hidden", cfg.sk_min_hidden},
        {"groups", cfg.sk_groups}}},
      {"residual_scale_init", cfg.residual_scale_init},
      {"init_seed", cfg.init_seed},
  };
}

ModelConfig model_config_from_json(const json& j, ModelConfig cfg) {
  const std::string where = "model";
  reject_unknown(j,
                 {"input_h", "input_w", "in_channels", "base_channels", "variant", "ssm", "cbam", "sk",
                  "residual_scale_init", "init_seed"},
                 where);
  read_key(j, "input_h", cfg.input_h, where);
  read_key(j, "input_w", cfg.input_w, where);
  read_key(j, "in_channels", cfg.in_channels, where);
  read_key(j, "base_channels", cfg.base_channels, where);
  if (j.contains("variant")) cfg.variant = parse_variant(j.at("variant").get<std::string>());
  if (j.contains("ssm")) {
    const json& s = j.at("ssm");
    reject_unknown(s, {"state_dim", "expand", "gate", "dt_min", "dt_max", "execution"}, "model.ssm");
    read_key(s, "state_dim", cfg.ssm.state_dim, "model.ssm");
    read_key(s, "expand", cfg.ssm.expand, "model.ssm");
    read_key(s, "dt_min", cfg.ssm.dt_min, "model.ssm");
    read_key(s, "dt_max", cfg.ssm.dt_max, "model.ssm");
    if (s.contains("gate")) {
      const auto g = s.at("gate").get<std::string>();
      if (g != "silu" && g != "relu") throw ConfigError("model.ssm.gate must be silu or relu");
      cfg.ssm.gate = g == "silu" ? GateActivation::silu : GateActivation::relu;
    }
    if (s.contains("execution")) {
      const auto e = s.at("execution").get<std::string>();
      if (e != "reference" && e != "chunked") throw ConfigError("model.ssm.execution must be reference or chunked");
      cfg.ssm.execution = e == "reference" ? ScanExecution::reference : ScanExecution::chunked;
    }
  }
  if (j.contains("cbam")) {
    const json& c = j.at("cbam");
    reject_unknown(c, {"reduction", "spatial_kernel"}, "model.cbam");
    read_key(c, "reduction", cfg.cbam_reduction, "model.cbam");
    read_key(c, "spatial_kernel", cfg.cbam_spatial_kernel, "model.cbam");
  }
  if (j.contains("sk")) {
    const json& s = j.at("sk");
    reject_unknown(s, {"dilations", "reduction", "min_hidden", "groups"}, "model.sk");
    read_key(s, "dilations", cfg.sk_dilations, "model.sk");
    read_key(s, "reduction", cfg.sk_reduction, "model.sk");
    read_key(s, "min_hidden", cfg.sk_min_hidden, "model.sk");
    read_key(s, "groups", cfg.sk_groups, "model.sk");
  }
  read_key(j, "residual_scale_init", cfg.residual_scale_init, where);
  read_key(j, "init_seed", cfg.init_seed, where);
  cfg.validate();
  return cfg;
}

void save_checkpoint(const fs::path& dir, const MambaSeg<float>& model, const json& metadata) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  json manifest{{"format", kFormat}, {"version", kVersion}, {"model", to_json(model.config())}};
  manifest["tensors"] = describe(model.parameters(), dir / "weights.bin");
  manifest["buffers"] = describe(model.buffers(), dir / "buffers.bin");
  manifest["metadata"] = metadata;
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  const json manifest = read_manifest(dir);
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(manifest.at("model"));
  } catch (const ConfigError& e) {
    throw CheckpointError(dir.string() + ": invalid model config: " + e.what());
  }
  LoadedCheckpoint out;
  out.model = std::make_unique<MambaSeg<float>>(cfg);
  try {
    restore(manifest.at("tensors"), read_blob(dir / "weights.bin"), out.model->parameters(), "weights");
    restore(manifest.at("buffers"), read_blob(dir / "buffers.bin"), out.model->buffers(), "buffers");
  } catch (const json::exception& e) {
    throw CheckpointError(dir.string() + ": malformed manifest: " + e.what());
  }
  out.metadata = manifest.value("metadata", json::object());
  out.model->set_training(false);
  return out;
}

std::int64_t checkpoint_parameter_scalars(const fs::path& dir) {
  const json manifest = read_manifest(dir);
  std::int64_t scalars = 0;
  for (const auto& e : manifest.at("tensors")) scalars += shape_numel(e.at("shape").get<Shape>());
  const auto bytes = static_cast<std::int64_t>(fs::file_size(dir / "weights.bin"));
  if (bytes != scalars * 4) throw CheckpointError("weights.bin size disagrees with the manifest in " + dir.string());
  return scalars;
}

}  // namespace mambaseg
