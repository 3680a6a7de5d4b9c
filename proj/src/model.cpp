#include "mambaseg/model.hpp"

#include "mambaseg/errors.hpp"

namespace mambaseg {

StagePlan stage_plan(Index input_h, Index input_w, Index base_channels) {
  if (input_h <= 0 || input_w <= 0 || input_h % kSpatialDivisor != 0 || input_w % kSpatialDivisor != 0) {
    throw ConfigError("input extents " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                      " must both be positive multiples of " + std::to_string(kSpatialDivisor));
  }
  if (base_channels < 1) throw ConfigError("base_channels must be positive");
  StagePlan plan;
  plan.base_channels = base_channels;
  for (int i = 0; i <= kEncoderStages; ++i) {
    plan.stages.push_back({base_channels << i, input_h >> i, input_w >> i});
  }
  return plan;
}

const char* to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_attention: return "no-attention";
    case Variant::no_vss: return "no-vss";
    case Variant::plain: return "plain";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  if (name == "full") return Variant::full;
  if (name == "no-attention" || name == "no_attention") return Variant::no_attention;
  if (name == "no-vss" || name == "no_vss") return Variant::no_vss;
  if (name == "plain") return Variant::plain;
  throw ConfigError("unknown variant '" + name + "' (expected full, no-attention, no-vss or plain)");
}

void ModelConfig::validate() const {
  (void)plan();
  if (in_channels < 1) throw ConfigError("in_channels must be positive");
  if (ssm.state_dim < 1) throw ConfigError("ssm.state_dim must be positive");
  if (!(ssm.expand > 0)) throw ConfigError("ssm.expand must be positive");
  for (int i = 0; i <= kEncoderStages; ++i) cbam(stage_channels(i)).validate();
  sk(stage_channels(kEncoderStages)).validate();
}

ModelConfig with_variant(ModelConfig cfg, Variant v) {
  cfg.variant = v;
  return cfg;
}

template <typename Scalar>
ResVssBlock<Scalar>::ResVssBlock(Index channels, const SsmConfig& ssm, double residual_scale_init, InitRng& rng)
    : channels_(channels),
      inner_(ssm.inner_channels(channels)),
      gate_(ssm.gate),
      dw_(channels, channels, 3, rng, Conv2dOptions{1, 1, 1, channels}),
      dw_norm_(NormKind::instance, channels),
      norm_(NormKind::instance, channels),
      in_proj_(channels, inner_, 1, rng),
      ss2d_(inner_, ssm, rng),
      out_proj_(inner_, channels, 1, rng) {
  linear_uniform(in_proj_.weight(), channels, rng);
  linear_uniform(out_proj_.weight(), inner_, rng);
  this->register_module("dwconv", dw_);
  this->register_module("dwconv_norm", dw_norm_);
  this->register_module("norm", norm_);
  this->register_module("in_proj", in_proj_);
  this->register_module("ss2d", ss2d_);
  this->register_module("out_proj", out_proj_);
  scale_ = &this->register_parameter(
      "scale", Tensor<Scalar>::full({channels}, static_cast<Scalar>(residual_scale_init)));
}

template <typename Scalar>
Tensor<Scalar> ResVssBlock<Scalar>::forward(const Tensor<Scalar>& x) {
  if (x.rank() != 4 || x.dim(1) != channels_) {
    throw DimensionError("ResVSS block configured for " + std::to_string(channels_) + " channels, got " +
                         to_string(x.shape()));
  }
  const Tensor<Scalar> t = relu(dw_norm_.forward(dw_.forward(x)));
  const Tensor<Scalar> p = in_proj_.forward(norm_.forward(t));
  const Tensor<Scalar> g = gate_ == GateActivation::silu ? silu(p) : relu(p);
  const Tensor<Scalar> branch = out_proj_.forward(ss2d_.forward(p) * g);
  return branch + reshape(*scale_, {1, channels_, 1, 1}) * x;
}

template <typename Scalar>
std::unique_ptr<FeatureBlock<Scalar>> make_feature_block(Index channels, const ModelConfig& cfg, InitRng& rng) {
  if (cfg.has_vss()) return std::make_unique<ResVssBlock<Scalar>>(channels, cfg.ssm, cfg.residual_scale_init, rng);
  return std::make_unique<PlainBlock<Scalar>>(channels, rng);
}

template <typename Scalar>
EncoderBlock<Scalar>::EncoderBlock(Index in_channels, Index out_channels, const ModelConfig& cfg, InitRng& rng)
    : mixer_(make_feature_block<Scalar>(in_channels, cfg, rng)), conv_(in_channels, out_channels, 3, rng) {
  this->register_module("mixer", *mixer_);
  this->register_module("conv", conv_);
}

template <typename Scalar>
EncoderOutput<Scalar> EncoderBlock<Scalar>::forward(const Tensor<Scalar>& x) {
  EncoderOutput<Scalar> out;
  out.skip = conv_.forward(mixer_->forward(x));
  out.down = maxpool2(out.skip);
  return out;
}

template <typename Scalar>
DecoderBlock<Scalar>::DecoderBlock(Index in_channels, Index skip_channels, Index out_channels,
                                   const ModelConfig& cfg, InitRng& rng)
    : gate_(cfg.has_attention() ? std::make_unique<AttentionGate<Scalar>>(
                                      skip_channels, in_channels,
                                      AttentionGate<Scalar>::default_inter_channels(skip_channels), rng)
                                : nullptr),
      fuse_(in_channels + skip_channels, out_channels, 3, rng),
      mixer_(make_feature_block<Scalar>(out_channels, cfg, rng)) {
  if (gate_) this->register_module("attention_gate", *gate_);
  this->register_module("fuse", fuse_);
  this->register_module("mixer", *mixer_);
}

template <typename Scalar>
Tensor<Scalar> DecoderBlock<Scalar>::forward(const Tensor<Scalar>& x, const Tensor<Scalar>& skip) {
  if (x.rank() != 4 || skip.rank() != 4 || skip.dim(2) != 2 * x.dim(2) || skip.dim(3) != 2 * x.dim(3)) {
    throw DimensionError("decoder: skip " + to_string(skip.shape()) + " must have twice the resolution of input " +
                         to_string(x.shape()));
  }
  const Tensor<Scalar> u = upsample2(x);
  const Tensor<Scalar> g = gate_ ? gate_->forward(skip, u) : skip;
  return mixer_->forward(fuse_.forward(concat<Scalar>({u, g}, 1)));
}

template <typename Scalar>
MambaSeg<Scalar>::MambaSeg(const ModelConfig& cfg) : cfg_((cfg.validate(), cfg)), rng_(cfg.init_seed) {
  conv_in_ = std::make_unique<ConvBnRelu<Scalar>>(cfg.in_channels, cfg.base_channels, 3, rng_);
  this->register_module("conv_in", *conv_in_);
  for (int i = 1; i <= kEncoderStages; ++i) {
    encoders_.push_back(
        std::make_unique<EncoderBlock<Scalar>>(cfg.stage_channels(i - 1), cfg.stage_channels(i), cfg, rng_));
    this->register_module("encoder" + std::to_string(i), *encoders_.back());
  }
  for (int i = 1; i <= kEncoderStages; ++i) {
    if (cfg.has_attention()) {
      cbams_.push_back(std::make_unique<Cbam<Scalar>>(cfg.cbam(cfg.stage_channels(i)), rng_));
      this->register_module("skip_attention" + std::to_string(i), *cbams_.back());
    } else {
      cbams_.push_back(nullptr);
    }
  }
  bottleneck_ = std::make_unique<SkBottleneck<Scalar>>(cfg.sk(cfg.stage_channels(kEncoderStages)), rng_);
  this->register_module("bottleneck", *bottleneck_);
  decoders_.resize(kEncoderStages);
  for (int i = kEncoderStages; i >= 1; --i) {
    const Index c = cfg.stage_channels(i);
    auto& slot = decoders_[static_cast<std::size_t>(i - 1)];
    slot = std::make_unique<DecoderBlock<Scalar>>(c, c, cfg.stage_channels(i - 1), cfg, rng_);
    this->register_module("decoder" + std::to_string(i), *slot);
  }
  conv_out_ = std::make_unique<Conv2d<Scalar>>(cfg.base_channels, 1, 1, rng_);
  this->register_module("conv_out", *conv_out_);
}

template <typename Scalar>
Tensor<Scalar> MambaSeg<Scalar>::forward(const Tensor<Scalar>& image, ForwardTrace<Scalar>* trace) {
  if (image.rank() != 4 || image.dim(1) != cfg_.in_channels) {
    throw DimensionError("model expects [B," + std::to_string(cfg_.in_channels) + ",H,W] input, got " +
                         to_string(image.shape()));
  }
  (void)stage_plan(image.dim(2), image.dim(3), cfg_.base_channels);

  Tensor<Scalar> x = conv_in_->forward(image);
  if (trace) trace->features.push_back(x);
  std::vector<Tensor<Scalar>> skips;
  for (int i = 1; i <= kEncoderStages; ++i) {
    EncoderOutput<Scalar> e = encoder(i).forward(x);
    Cbam<Scalar>* cbam = skip_attention(i);
    skips.push_back(cbam ? cbam->forward(e.skip) : e.skip);
    x = e.down;
    if (trace) {
      trace->features.push_back(x);
      trace->skips.push_back(skips.back());
    }
  }
  x = bottleneck_->forward(x);
  if (trace) trace->bottleneck = x;
  for (int i = kEncoderStages; i >= 1; --i) {
    x = decoder(i).forward(x, skips[static_cast<std::size_t>(i - 1)]);
    if (trace) trace->decoder_outputs.push_back(x);
  }
  return conv_out_->forward(x);
}

#define MAMBASEG_INSTANTIATE_MODEL(S)                                                                   \
  template class ResVssBlock<S>;                                                                        \
  template std::unique_ptr<FeatureBlock<S>> make_feature_block<S>(Index, const ModelConfig&, InitRng&); \
  template class EncoderBlock<S>;                                                                       \
  template class DecoderBlock<S>;                                                                       \
  template class MambaSeg<S>;

MAMBASEG_INSTANTIATE_MODEL(float)
MAMBASEG_INSTANTIATE_MODEL(double)

}  // namespace mambaseg
