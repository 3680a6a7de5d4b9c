#pragma once

#include "mambaseg/attention.hpp"
#include "mambaseg/module.hpp"
#include "mambaseg/ssm.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mambaseg {

inline constexpr int kEncoderStages = 5;
inline constexpr Index kSpatialDivisor = Index(1) << kEncoderStages;

struct StageShape {
  Index channels, height, width;
  bool operator==(const StageShape&) const = default;
};

/// Feature-map schedule F_0..F_5: channels double and extents halve per stage.
struct StagePlan {
  Index base_channels = 16;
  std::vector<StageShape> stages;
};

/// Throws ConfigError unless both extents are divisible by 32.
StagePlan stage_plan(Index input_h, Index input_w, Index base_channels);

enum class Variant { full, no_attention, no_vss, plain };

const char* to_string(Variant v);
/// Accepts "full", "no-attention"/"no_attention", "no-vss"/"no_vss", "plain".
Variant parse_variant(const std::string& name);

struct ModelConfig {
  Index input_h = 192;
  Index input_w = 256;
  Index in_channels = 3;
  Index base_channels = 16;
  Variant variant = Variant::full;
  SsmConfig ssm;
  Index cbam_reduction = 16;
  Index cbam_spatial_kernel = 7;
  std::vector<Index> sk_dilations{1, 2};
  Index sk_reduction = 16;
  Index sk_min_hidden = 32;
  Index sk_groups = 32;
  double residual_scale_init = 1.0;
  std::uint64_t init_seed = 0;

  bool has_attention() const { return variant == Variant::full || variant == Variant::no_vss; }
  bool has_vss() const { return variant == Variant::full || variant == Variant::no_attention; }
  StagePlan plan() const { return stage_plan(input_h, input_w, base_channels); }
  Index stage_channels(int i) const { return base_channels << i; }
  CbamConfig cbam(Index channels) const { return {channels, cbam_reduction, cbam_spatial_kernel}; }
  SkConfig sk(Index channels) const { return {channels, sk_dilations, sk_reduction, sk_min_hidden, sk_groups}; }
  void validate() const;
};

/// Same config with `variant` replaced.
ModelConfig with_variant(ModelConfig cfg, Variant v);

/// Residual visual state-space block:
///   y = VSS(relu(IN(dwconv3x3(x)))) + scale * x
///   VSS(t) = out_proj(SS2D(p) * act(p)), p = in_proj(IN(t))
template <typename Scalar>
class ResVssBlock : public FeatureBlock<Scalar> {
 public:
  ResVssBlock(Index channels, const SsmConfig& ssm, double residual_scale_init, InitRng& rng);
  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;

  Index channels() const { return channels_; }
  Index inner_channels() const { return inner_; }
  Tensor<Scalar>& scale() { return *scale_; }
  Conv2d<Scalar>& depthwise() { return dw_; }
  Conv2d<Scalar>& in_proj() { return in_proj_; }
  Conv2d<Scalar>& out_proj() { return out_proj_; }
  Ss2d<Scalar>& ss2d() { return ss2d_; }

 private:
  Index channels_, inner_;
  GateActivation gate_;
  Conv2d<Scalar> dw_;
  Norm2d<Scalar> dw_norm_;
  Norm2d<Scalar> norm_;
  Conv2d<Scalar> in_proj_;
  Ss2d<Scalar> ss2d_;
  Conv2d<Scalar> out_proj_;
  Tensor<Scalar>* scale_;
};

template <typename Scalar>
std::unique_ptr<FeatureBlock<Scalar>> make_feature_block(Index channels, const ModelConfig& cfg, InitRng& rng);

template <typename Scalar>
struct EncoderOutput {
  Tensor<Scalar> skip;  // [B,Cout,H,W], before pooling
  Tensor<Scalar> down;  // [B,Cout,H/2,W/2]
};

/// mixer (ResVSS or plain conv block) -> conv3x3+BN+ReLU (channel change)
/// -> skip; maxpool2(skip) -> down.
template <typename Scalar>
class EncoderBlock : public Module<Scalar> {
 public:
  EncoderBlock(Index in_channels, Index out_channels, const ModelConfig& cfg, InitRng& rng);
  EncoderOutput<Scalar> forward(const Tensor<Scalar>& x);

  FeatureBlock<Scalar>& mixer() { return *mixer_; }

 private:
  std::unique_ptr<FeatureBlock<Scalar>> mixer_;
  ConvBnRelu<Scalar> conv_;
};

/// upsample2(x) gates the skip (attention variants), both are concatenated,
/// reduced by conv3x3+BN+ReLU and refined by the mixer block.
template <typename Scalar>
class DecoderBlock : public Module<Scalar> {
 public:
  DecoderBlock(Index in_channels, Index skip_channels, Index out_channels, const ModelConfig& cfg, InitRng& rng);
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const Tensor<Scalar>& skip);

  AttentionGate<Scalar>* gate() { return gate_.get(); }
  FeatureBlock<Scalar>& mixer() { return *mixer_; }

 private:
  std::unique_ptr<AttentionGate<Scalar>> gate_;
  ConvBnRelu<Scalar> fuse_;
  std::unique_ptr<FeatureBlock<Scalar>> mixer_;
};

/// Intermediate activations of one forward pass.
template <typename Scalar>
struct ForwardTrace {
  std::vector<Tensor<Scalar>> features;         // F_0..F_5
  std::vector<Tensor<Scalar>> skips;            // per encoder stage 1..5, after CBAM
  Tensor<Scalar> bottleneck;
  std::vector<Tensor<Scalar>> decoder_outputs;  // decoder 5 first
};

/// U-shaped hybrid conv / state-space segmentation network. Emits logits.
template <typename Scalar>
class MambaSeg : public Module<Scalar> {
 public:
  explicit MambaSeg(const ModelConfig& cfg);
  Tensor<Scalar> forward(const Tensor<Scalar>& image, ForwardTrace<Scalar>* trace = nullptr);

  const ModelConfig& config() const { return cfg_; }
  EncoderBlock<Scalar>& encoder(int stage) { return *encoders_.at(static_cast<std::size_t>(stage - 1)); }
  DecoderBlock<Scalar>& decoder(int stage) { return *decoders_.at(static_cast<std::size_t>(stage - 1)); }
  Cbam<Scalar>* skip_attention(int stage) { return cbams_.at(static_cast<std::size_t>(stage - 1)).get(); }
  SkBottleneck<Scalar>& bottleneck() { return *bottleneck_; }

 private:
  ModelConfig cfg_;
  InitRng rng_;
  std::unique_ptr<ConvBnRelu<Scalar>> conv_in_;
  std::vector<std::unique_ptr<EncoderBlock<Scalar>>> encoders_;
  std::vector<std::unique_ptr<Cbam<Scalar>>> cbams_;
  std::unique_ptr<SkBottleneck<Scalar>> bottleneck_;
  std::vector<std::unique_ptr<DecoderBlock<Scalar>>> decoders_;
  std::unique_ptr<Conv2d<Scalar>> conv_out_;
};

template <typename Scalar>
std::unique_ptr<MambaSeg<Scalar>> build_variant(const ModelConfig& base, Variant v) {
  return std::make_unique<MambaSeg<Scalar>>(with_variant(base, v));
}

}  // namespace mambaseg
