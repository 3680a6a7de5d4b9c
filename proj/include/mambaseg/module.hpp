#pragma once

#include "mambaseg/ops.hpp"
#include "mambaseg/tensor.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace mambaseg {

/// Deterministic parameter initialization stream (SplitMix64). Independent of
/// the standard library's distribution implementations.
class InitRng {
 public:
  explicit InitRng(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next_u64();
  /// Uniform in [lo, hi).
  double uniform(double lo, double hi);

 private:
  std::uint64_t state_;
};

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
};

/// Base for layers with named parameters, buffers, and child modules.
/// Modules are neither copyable nor movable: children are registered by
/// address.
template <typename Scalar>
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  /// Trainable tensors in registration order, names dot-joined.
  std::vector<NamedTensor<Scalar>> parameters() const;
  /// Non-trainable state (batch-norm running statistics).
  std::vector<NamedTensor<Scalar>> buffers() const;
  Index parameter_count() const;

  void set_training(bool on);
  bool training() const { return training_; }
  void zero_grad();

 protected:
  Tensor<Scalar>& register_parameter(const std::string& name, Tensor<Scalar> t);
  Tensor<Scalar>& register_buffer(const std::string& name, Tensor<Scalar> t);
  void register_module(const std::string& name, Module& child);

 private:
  void collect(const std::string& prefix, bool params, std::vector<NamedTensor<Scalar>>& out) const;

  struct Entry {
    std::string name;
    std::unique_ptr<Tensor<Scalar>> tensor;
  };
  std::vector<Entry> params_;
  std::vector<Entry> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
  bool training_ = true;
};

/// Fills `weight` with Kaiming-uniform values, bound sqrt(6 / fan_in).
template <typename Scalar>
void kaiming_uniform(Tensor<Scalar>& weight, Index fan_in, InitRng& rng);

/// Bound 1 / sqrt(fan_in); for linear projections not followed by a ReLU.
template <typename Scalar>
void linear_uniform(Tensor<Scalar>& weight, Index fan_in, InitRng& rng);

template <typename Scalar>
class Conv2d : public Module<Scalar> {
 public:
  Conv2d(Index in_channels, Index out_channels, Index kernel, InitRng& rng, Conv2dOptions opt = {},
         bool with_bias = true);
  Tensor<Scalar> forward(const Tensor<Scalar>& x) const;

  Index in_channels() const { return in_; }
  Index out_channels() const { return out_; }
  Index kernel() const { return kernel_; }
  const Conv2dOptions& options() const { return opt_; }
  Tensor<Scalar>& weight() { return *weight_; }
  Tensor<Scalar>& bias() { return *bias_; }

 private:
  Index in_, out_, kernel_;
  Conv2dOptions opt_;
  Tensor<Scalar>* weight_;
  Tensor<Scalar>* bias_ = nullptr;
};

/// Batch or instance normalization with affine parameters.
template <typename Scalar>
class Norm2d : public Module<Scalar> {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  Norm2d(NormKind kind, Index channels);
  Tensor<Scalar> forward(const Tensor<Scalar>& x);

  NormKind kind() const { return kind_; }
  Tensor<Scalar>& gamma() { return *gamma_; }
  Tensor<Scalar>& beta() { return *beta_; }

 private:
  NormKind kind_;
  Tensor<Scalar>* gamma_;
  Tensor<Scalar>* beta_;
  RunningStats<Scalar> stats_;
};

/// conv (k x k, same padding) -> batch norm -> ReLU.
template <typename Scalar>
class ConvBnRelu : public Module<Scalar> {
 public:
  ConvBnRelu(Index in_channels, Index out_channels, Index kernel, InitRng& rng);
  Tensor<Scalar> forward(const Tensor<Scalar>& x);

  Conv2d<Scalar>& conv() { return conv_; }

 private:
  Conv2d<Scalar> conv_;
  Norm2d<Scalar> bn_;
};

/// Channel-preserving feature extractor at an encoder/decoder site.
template <typename Scalar>
class FeatureBlock : public Module<Scalar> {
 public:
  virtual Tensor<Scalar> forward(const Tensor<Scalar>& x) = 0;
};

/// conv3x3 + BN + ReLU stand-in used by the variants without state-space blocks.
template <typename Scalar>
class PlainBlock : public FeatureBlock<Scalar> {
 public:
  PlainBlock(Index channels, InitRng& rng);
  Tensor<Scalar> forward(const Tensor<Scalar>& x) override { return body_.forward(x); }

 private:
  ConvBnRelu<Scalar> body_;
};

extern template class Module<float>;
extern template class Module<double>;

}  // namespace mambaseg
