#include "mambaseg/profiler.hpp"

#include <algorithm>
#include <ostream>

namespace mambaseg {

namespace {

using i64 = std::int64_t;

class Builder {
 public:
  explicit Builder(Profile& out) : out_(out) {}

  struct Scope {
    Builder& b;
    std::size_t saved;
    ~Scope() { b.prefix_.resize(saved); }
  };
  [[nodiscard]] Scope push(const std::string& name) {
    const std::size_t saved = prefix_.size();
    prefix_ += prefix_.empty() ? name : "." + name;
    return Scope{*this, saved};
  }

  void add(const std::string& name, i64 params, i64 flops) {
    out_.layers.push_back({prefix_.empty() ? name : prefix_ + "." + name, params, flops});
  }

  void conv(const std::string& name, i64 cin, i64 cout, i64 k, i64 groups, i64 h, i64 w) {
    add(name, cout * (cin / groups) * k * k + cout, 2 * cout * (cin / groups) * k * k * h * w);
  }
  void norm(const std::string& name, i64 c, i64 h, i64 w) { add(name, 2 * c, c * h * w); }
  void op(const std::string& name, i64 elements) { add(name, 0, elements); }

  void conv_bn_relu(const std::string& name, i64 cin, i64 cout, i64 k, i64 h, i64 w) {
    auto s = push(name);
    conv("conv", cin, cout, k, 1, h, w);
    norm("bn", cout, h, w);
    op("relu", cout * h * w);
  }

 private:
  Profile& out_;
  std::string prefix_;
};

void res_vss(Builder& b, const ModelConfig& cfg, i64 c, i64 h, i64 w) {
  const i64 e = cfg.ssm.inner_channels(c), n = cfg.ssm.state_dim, l = h * w;
  b.conv("dwconv", c, c, 3, c, h, w);
  b.norm("dwconv_norm", c, h, w);
  b.op("dwconv_relu", c * l);
  b.norm("norm", c, h, w);
  b.conv("in_proj", c, e, 1, 1, h, w);
  {
    auto s = b.push("ss2d");
    for (ScanDirection dir : kScanDirections) {
      auto d = b.push(to_string(dir));
      b.add("proj", (e + 2 * n) * e + (e + 2 * n), 2 * e * (e + 2 * n) * l);
      b.op("softplus", e * l);
      b.add("scan", e * n + e, kScanFlopsPerStateStep * e * n * l + 2 * e * l);
    }
    b.op("merge", 3 * e * l);
  }
  b.op("gate", 2 * e * l);
  b.conv("out_proj", e, c, 1, 1, h, w);
  b.add("scale", c, 2 * c * l);
}

void feature_block(Builder& b, const ModelConfig& cfg, i64 c, i64 h, i64 w) {
  auto s = b.push("mixer");
  if (cfg.has_vss()) {
    res_vss(b, cfg, c, h, w);
  } else {
    b.conv_bn_relu("block", c, c, 3, h, w);
  }
}

void cbam(Builder& b, const CbamConfig& cfg, i64 h, i64 w) {
  const i64 c = cfg.channels, r = cfg.hidden(), k = cfg.spatial_kernel, hw = h * w;
  b.op("pool", 2 * c * hw);
  // The shared MLP runs on both pooled descriptors.
  b.add("mlp.0", c * r + r, 2 * 2 * c * r + 2 * r);
  b.add("mlp.1", r * c + c, 2 * 2 * r * c);
  b.op("channel_gate", 2 * c + c * hw);
  b.op("channel_pool", 2 * c * hw);
  b.conv("spatial", 2, 1, k, 1, h, w);
  b.op("spatial_gate", hw + c * hw);
}

void attention_gate(Builder& b, i64 cs, i64 cg, i64 inter, i64 h, i64 w) {
  const i64 hw = h * w;
  b.conv("w_gate", cg, inter, 1, 1, h, w);
  b.conv("w_skip", cs, inter, 1, 1, h, w);
  b.op("combine", 2 * inter * hw);
  b.conv("psi", inter, 1, 1, 1, h, w);
  b.op("gate", hw + cs * hw);
}

void sk_bottleneck(Builder& b, const SkConfig& cfg, i64 h, i64 w) {
  const i64 c = cfg.channels, hidden = cfg.hidden(), hw = h * w;
  const i64 k = static_cast<i64>(cfg.branch_dilations.size());
  b.conv("pw_in", c, c, 1, 1, h, w);
  b.norm("bn_in", c, h, w);
  b.op("relu_in", c * hw);
  for (i64 i = 0; i < k; ++i) {
    const std::string name = "branch" + std::to_string(i);
    b.conv(name + ".conv", c, c, 3, cfg.branch_groups(), h, w);
    b.norm(name + ".bn", c, h, w);
    b.op(name + ".relu", c * hw);
  }
  b.op("fuse", (k - 1) * c * hw + c * hw);
  b.conv("squeeze", c, hidden, 1, 1, 1, 1);
  b.op("squeeze_relu", hidden);
  for (i64 i = 0; i < k; ++i) b.conv("select" + std::to_string(i), hidden, c, 1, 1, 1, 1);
  b.op("softmax", k * c);
  b.op("select", k * c * hw + (k - 1) * c * hw);
  b.conv("pw_out", c, c, 1, 1, h, w);
  b.norm("bn_out", c, h, w);
  b.op("residual", c * hw);
}

}  // namespace

i64 Profile::total_params() const {
  i64 n = 0;
  for (const auto& l : layers) n += l.params;
  return n;
}

i64 Profile::total_flops() const {
  i64 n = 0;
  for (const auto& l : layers) n += l.flops;
  return n;
}

LayerCost Profile::subtotal(const std::string& prefix) const {
  LayerCost sum{prefix, 0, 0};
  for (const auto& l : layers) {
    if (l.layer == prefix || l.layer.rfind(prefix + ".", 0) == 0) {
      sum.params += l.params;
      sum.flops += l.flops;
    }
  }
  return sum;
}

std::vector<std::string> Profile::top_level() const {
  std::vector<std::string> names;
  for (const auto& l : layers) {
    std::string head = l.layer.substr(0, l.layer.find('.'));
    if (std::find(names.begin(), names.end(), head) == names.end()) names.push_back(std::move(head));
  }
  return names;
}

Profile profile_model(const ModelConfig& cfg) {
  cfg.validate();
  const StagePlan plan = cfg.plan();
  Profile profile;
  Builder b(profile);
  const auto& f = plan.stages;

  b.conv_bn_relu("conv_in", cfg.in_channels, f[0].channels, 3, f[0].height, f[0].width);
  for (int i = 1; i <= kEncoderStages; ++i) {
    const StageShape& in = f[static_cast<std::size_t>(i - 1)];
    const i64 cout = f[static_cast<std::size_t>(i)].channels;
    auto s = b.push("encoder" + std::to_string(i));
    feature_block(b, cfg, in.channels, in.height, in.width);
    b.conv_bn_relu("conv", in.channels, cout, 3, in.height, in.width);
    b.op("pool", cout * in.height * in.width);
  }
  if (cfg.has_attention()) {
    for (int i = 1; i <= kEncoderStages; ++i) {
      const StageShape& in = f[static_cast<std::size_t>(i - 1)];
      auto s = b.push("skip_attention" + std::to_string(i));
      cbam(b, cfg.cbam(f[static_cast<std::size_t>(i)].channels), in.height, in.width);
    }
  }
  {
    const StageShape& deep = f.back();
    auto s = b.push("bottleneck");
    sk_bottleneck(b, cfg.sk(deep.channels), deep.height, deep.width);
  }
  for (int i = kEncoderStages; i >= 1; --i) {
    const StageShape& out = f[static_cast<std::size_t>(i - 1)];
    const i64 c = f[static_cast<std::size_t>(i)].channels, h = out.height, w = out.width;
    auto s = b.push("decoder" + std::to_string(i));
    b.op("upsample", c * h * w);
    if (cfg.has_attention()) {
      auto g = b.push("attention_gate");
      attention_gate(b, c, c, AttentionGate<float>::default_inter_channels(c), h, w);
    }
    b.conv_bn_relu("fuse", 2 * c, out.channels, 3, h, w);
    feature_block(b, cfg, out.channels, h, w);
  }
  b.conv("conv_out", f[0].channels, 1, 1, 1, f[0].height, f[0].width);
  return profile;
}

i64 count_params(const ModelConfig& cfg) { return profile_model(cfg).total_params(); }

i64 count_flops(const ModelConfig& cfg, Index input_h, Index input_w) {
  ModelConfig sized = cfg;
  sized.input_h = input_h;
  sized.input_w = input_w;
  return profile_model(sized).total_flops();
}

i64 cbam_param_count(const CbamConfig& cfg) {
  const i64 c = cfg.channels, r = cfg.hidden(), k = cfg.spatial_kernel;
  return (c * r + r) + (r * c + c) + (2 * k * k + 1);
}

i64 attention_gate_param_count(Index skip_channels, Index gate_channels, Index inter_channels) {
  return (gate_channels * inter_channels + inter_channels) + (skip_channels * inter_channels + inter_channels) +
         (inter_channels + 1);
}

ReportedCost reported_cost(Variant v) {
  switch (v) {
    case Variant::full: return {8.00e6, 2.09e9, true};
    case Variant::no_vss: return {7.92e6, 0.33e9, true};
    case Variant::no_attention: return {7.60e6, 1.82e9, true};
    case Variant::plain: return {7.52e6, 0.06e9, false};
  }
  return {0, 0, false};
}

void write_profile_csv(std::ostream& os, const Profile& profile, Variant variant) {
  os << "layer,params,flops\n";
  for (const auto& l : profile.layers) os << l.layer << ',' << l.params << ',' << l.flops << '\n';
  for (const auto& name : profile.top_level()) {
    const LayerCost s = profile.subtotal(name);
    os << "sum:" << name << ',' << s.params << ',' << s.flops << '\n';
  }
  os << "total," << profile.total_params() << ',' << profile.total_flops() << '\n';
  const ReportedCost r = reported_cost(variant);
  os << "paper-reported:" << to_string(variant) << (r.flops_reproducible ? "" : " (flops not reproducible)") << ','
     << static_cast<i64>(r.params) << ',' << static_cast<i64>(r.flops) << '\n';
}

}  // namespace mambaseg
