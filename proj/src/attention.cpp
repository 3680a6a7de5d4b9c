#include "mambaseg/attention.hpp"

#include "mambaseg/errors.hpp"

#include <numeric>

namespace mambaseg {

void CbamConfig::validate() const {
  if (channels < 1) throw ConfigError("CBAM: channels must be positive");
  if (reduction < 1) throw ConfigError("CBAM: reduction must be positive");
  if (spatial_kernel < 1 || spatial_kernel % 2 == 0) throw ConfigError("CBAM: spatial kernel must be odd");
}

Index SkConfig::branch_groups() const { return std::gcd(std::max<Index>(groups, 1), channels); }

void SkConfig::validate() const {
  if (channels < 1) throw ConfigError("SK: channels must be positive");
  if (branch_dilations.size() < 2) throw ConfigError("SK: at least two branches are required");
  for (Index d : branch_dilations) {
    if (d < 1) throw ConfigError("SK: dilations must be >= 1");
  }
  if (reduction < 1) throw ConfigError("SK: reduction must be positive");
}

template <typename Scalar>
Cbam<Scalar>::Cbam(const CbamConfig& cfg, InitRng& rng)
    : cfg_((cfg.validate(), cfg)),
      fc1_(cfg.channels, cfg.hidden(), 1, rng),
      fc2_(cfg.hidden(), cfg.channels, 1, rng),
      spatial_(2, 1, cfg.spatial_kernel, rng, Conv2dOptions{1, cfg.spatial_kernel / 2, 1, 1}) {
  this->register_module("mlp.0", fc1_);
  this->register_module("mlp.1", fc2_);
  this->register_module("spatial", spatial_);
}

template <typename Scalar>
Tensor<Scalar> Cbam<Scalar>::channel_map(const Tensor<Scalar>& x) const {
  if (x.rank() != 4 || x.dim(1) != cfg_.channels) {
    throw DimensionError("CBAM configured for " + std::to_string(cfg_.channels) + " channels, got input " +
                         to_string(x.shape()));
  }
  auto mlp = [&](const Tensor<Scalar>& d) { return fc2_.forward(relu(fc1_.forward(d))); };
  return sigmoid(mlp(global_avg_pool(x)) + mlp(global_max_pool(x)));
}

template <typename Scalar>
Tensor<Scalar> Cbam<Scalar>::spatial_map(const Tensor<Scalar>& x) const {
  return sigmoid(spatial_.forward(concat<Scalar>({channel_mean(x), channel_max(x)}, 1)));
}

template <typename Scalar>
Tensor<Scalar> Cbam<Scalar>::forward(const Tensor<Scalar>& x) const {
  const Tensor<Scalar> refined = channel_map(x) * x;
  return spatial_map(refined) * refined;
}

template <typename Scalar>
AttentionGate<Scalar>::AttentionGate(Index skip_channels, Index gate_channels, Index inter_channels, InitRng& rng)
    : w_gate_(gate_channels, inter_channels, 1, rng),
      w_skip_(skip_channels, inter_channels, 1, rng),
      psi_(inter_channels, 1, 1, rng) {
  this->register_module("w_gate", w_gate_);
  this->register_module("w_skip", w_skip_);
  this->register_module("psi", psi_);
}

template <typename Scalar>
Tensor<Scalar> AttentionGate<Scalar>::coefficients(const Tensor<Scalar>& skip, const Tensor<Scalar>& gate) const {
  if (skip.rank() != 4 || gate.rank() != 4 || skip.dim(0) != gate.dim(0) || skip.dim(2) != gate.dim(2) ||
      skip.dim(3) != gate.dim(3)) {
    throw DimensionError("attention gate: skip " + to_string(skip.shape()) + " and gate " + to_string(gate.shape()) +
                         " must share batch and spatial extents");
  }
  return sigmoid(psi_.forward(relu(w_gate_.forward(gate) + w_skip_.forward(skip))));
}

template <typename Scalar>
Tensor<Scalar> AttentionGate<Scalar>::forward(const Tensor<Scalar>& skip, const Tensor<Scalar>& gate) const {
  return coefficients(skip, gate) * skip;
}

template <typename Scalar>
SkBottleneck<Scalar>::SkBottleneck(const SkConfig& cfg, InitRng& rng)
    : cfg_((cfg.validate(), cfg)),
      pw_in_(cfg.channels, cfg.channels, 1, rng),
      bn_in_(NormKind::batch, cfg.channels),
      squeeze_(cfg.channels, cfg.hidden(), 1, rng),
      pw_out_(cfg.channels, cfg.channels, 1, rng),
      bn_out_(NormKind::batch, cfg.channels) {
  this->register_module("pw_in", pw_in_);
  this->register_module("bn_in", bn_in_);
  const Index groups = cfg.branch_groups();
  for (std::size_t k = 0; k < cfg.branch_dilations.size(); ++k) {
    const Index d = cfg.branch_dilations[k];
    Branch br;
    br.conv = std::make_unique<Conv2d<Scalar>>(cfg.channels, cfg.channels, 3, rng, Conv2dOptions{1, d, d, groups});
    br.bn = std::make_unique<Norm2d<Scalar>>(NormKind::batch, cfg.channels);
    const std::string name = "branch" + std::to_string(k);
    this->register_module(name + ".conv", *br.conv);
    this->register_module(name + ".bn", *br.bn);
    branches_.push_back(std::move(br));
  }
  this->register_module("squeeze", squeeze_);
  for (std::size_t k = 0; k < branches_.size(); ++k) {
    branches_[k].select = std::make_unique<Conv2d<Scalar>>(cfg.hidden(), cfg.channels, 1, rng);
    this->register_module("select" + std::to_string(k), *branches_[k].select);
  }
  this->register_module("pw_out", pw_out_);
  this->register_module("bn_out", bn_out_);
}

template <typename Scalar>
Tensor<Scalar> SkBottleneck<Scalar>::forward(const Tensor<Scalar>& x, std::vector<Tensor<Scalar>>* weights) {
  if (x.rank() != 4 || x.dim(1) != cfg_.channels) {
    throw DimensionError("SK bottleneck configured for " + std::to_string(cfg_.channels) + " channels, got " +
                         to_string(x.shape()));
  }
  const Tensor<Scalar> p = relu(bn_in_.forward(pw_in_.forward(x)));
  std::vector<Tensor<Scalar>> feats;
  for (auto& br : branches_) feats.push_back(relu(br.bn->forward(br.conv->forward(p))));
  Tensor<Scalar> fused = feats[0];
  for (std::size_t k = 1; k < feats.size(); ++k) fused = fused + feats[k];
  const Tensor<Scalar> z = relu(squeeze_.forward(global_avg_pool(fused)));

  const Index B = x.dim(0), C = x.dim(1), K = static_cast<Index>(branches_.size());
  std::vector<Tensor<Scalar>> logits;
  for (auto& br : branches_) logits.push_back(br.select->forward(z));
  const Tensor<Scalar> w = softmax(reshape(concat(logits, 1), {B, K, C, 1}), 1);

  Tensor<Scalar> selected;
  for (Index k = 0; k < K; ++k) {
    const Tensor<Scalar> wk = reshape(narrow(w, 1, k, 1), {B, C, 1, 1});
    if (weights) weights->push_back(wk);
    const Tensor<Scalar> term = wk * feats[static_cast<std::size_t>(k)];
    selected = selected.defined() ? selected + term : term;
  }
  return bn_out_.forward(pw_out_.forward(selected)) + x;
}

template class Cbam<float>;
template class Cbam<double>;
template class AttentionGate<float>;
template class AttentionGate<double>;
template class SkBottleneck<float>;
template class SkBottleneck<double>;

}  // namespace mambaseg
