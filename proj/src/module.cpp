#include "mambaseg/module.hpp"

#include "mambaseg/errors.hpp"

#include <cmath>

namespace mambaseg {

std::uint64_t InitRng::next_u64() {
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double InitRng::uniform(double lo, double hi) {
  const double u = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

template <typename Scalar>
std::vector<NamedTensor<Scalar>> Module<Scalar>::parameters() const {
  std::vector<NamedTensor<Scalar>> out;
  collect("", true, out);
  return out;
}

template <typename Scalar>
std::vector<NamedTensor<Scalar>> Module<Scalar>::buffers() const {
  std::vector<NamedTensor<Scalar>> out;
  collect("", false, out);
  return out;
}

template <typename Scalar>
Index Module<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename Scalar>
void Module<Scalar>::collect(const std::string& prefix, bool params, std::vector<NamedTensor<Scalar>>& out) const {
  for (const auto& e : params ? params_ : buffers_) out.push_back({prefix + e.name, *e.tensor});
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", params, out);
}

template <typename Scalar>
void Module<Scalar>::set_training(bool on) {
  training_ = on;
  for (auto& [name, child] : children_) child->set_training(on);
}

template <typename Scalar>
void Module<Scalar>::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template <typename Scalar>
Tensor<Scalar>& Module<Scalar>::register_parameter(const std::string& name, Tensor<Scalar> t) {
  t.set_requires_grad(true);
  params_.push_back({name, std::make_unique<Tensor<Scalar>>(std::move(t))});
  return *params_.back().tensor;
}

template <typename Scalar>
Tensor<Scalar>& Module<Scalar>::register_buffer(const std::string& name, Tensor<Scalar> t) {
  buffers_.push_back({name, std::make_unique<Tensor<Scalar>>(std::move(t))});
  return *buffers_.back().tensor;
}

template <typename Scalar>
void Module<Scalar>::register_module(const std::string& name, Module& child) {
  children_.emplace_back(name, &child);
}

template <typename Scalar>
void kaiming_uniform(Tensor<Scalar>& weight, Index fan_in, InitRng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<Index>(fan_in, 1)));
  auto& w = weight.mutable_data();
  for (Index i = 0; i < w.size(); ++i) w(i) = static_cast<Scalar>(rng.uniform(-bound, bound));
}

template <typename Scalar>
void linear_uniform(Tensor<Scalar>& weight, Index fan_in, InitRng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Index>(fan_in, 1)));
  auto& w = weight.mutable_data();
  for (Index i = 0; i < w.size(); ++i) w(i) = static_cast<Scalar>(rng.uniform(-bound, bound));
}

template <typename Scalar>
Conv2d<Scalar>::Conv2d(Index in_channels, Index out_channels, Index kernel, InitRng& rng, Conv2dOptions opt,
                       bool with_bias)
    : in_(in_channels), out_(out_channels), kernel_(kernel), opt_(opt) {
  if (in_channels % opt.groups || out_channels % opt.groups) {
    throw ConfigError("Conv2d: channels " + std::to_string(in_channels) + "->" + std::to_string(out_channels) +
                      " not divisible by groups " + std::to_string(opt.groups));
  }
  const Index cin_g = in_channels / opt.groups;
  Tensor<Scalar> w({out_channels, cin_g, kernel, kernel});
  kaiming_uniform(w, cin_g * kernel * kernel, rng);
  weight_ = &this->register_parameter("weight", std::move(w));
  if (with_bias) bias_ = &this->register_parameter("bias", Tensor<Scalar>::zeros({out_channels}));
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::forward(const Tensor<Scalar>& x) const {
  return conv2d(x, *weight_, bias_ ? *bias_ : Tensor<Scalar>(), opt_);
}

template <typename Scalar>
Norm2d<Scalar>::Norm2d(NormKind kind, Index channels) : kind_(kind) {
  gamma_ = &this->register_parameter("weight", Tensor<Scalar>::ones({channels}));
  beta_ = &this->register_parameter("bias", Tensor<Scalar>::zeros({channels}));
  stats_.momentum = static_cast<Scalar>(kMomentum);
  if (kind == NormKind::batch) {
    stats_.mean = this->register_buffer("running_mean", Tensor<Scalar>::zeros({channels}));
    stats_.var = this->register_buffer("running_var", Tensor<Scalar>::ones({channels}));
  }
}

template <typename Scalar>
Tensor<Scalar> Norm2d<Scalar>::forward(const Tensor<Scalar>& x) {
  RunningStats<Scalar>* stats = kind_ == NormKind::batch ? &stats_ : nullptr;
  return normalize(x, kind_, *gamma_, *beta_, static_cast<Scalar>(kEps), stats, this->training());
}

template <typename Scalar>
ConvBnRelu<Scalar>::ConvBnRelu(Index in_channels, Index out_channels, Index kernel, InitRng& rng)
    : conv_(in_channels, out_channels, kernel, rng, Conv2dOptions{1, kernel / 2, 1, 1}),
      bn_(NormKind::batch, out_channels) {
  this->register_module("conv", conv_);
  this->register_module("bn", bn_);
}

template <typename Scalar>
Tensor<Scalar> ConvBnRelu<Scalar>::forward(const Tensor<Scalar>& x) {
  return relu(bn_.forward(conv_.forward(x)));
}

template <typename Scalar>
PlainBlock<Scalar>::PlainBlock(Index channels, InitRng& rng) : body_(channels, channels, 3, rng) {
  this->register_module("block", body_);
}

template class Module<float>;
template class Module<double>;
template void kaiming_uniform<float>(Tensor<float>&, Index, InitRng&);
template void kaiming_uniform<double>(Tensor<double>&, Index, InitRng&);
template void linear_uniform<float>(Tensor<float>&, Index, InitRng&);
template void linear_uniform<double>(Tensor<double>&, Index, InitRng&);
template class Conv2d<float>;
template class Conv2d<double>;
template class Norm2d<float>;
template class Norm2d<double>;
template class ConvBnRelu<float>;
template class ConvBnRelu<double>;
template class PlainBlock<float>;
template class PlainBlock<double>;

}  // namespace mambaseg
