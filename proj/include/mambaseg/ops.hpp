#pragma once

#include "mambaseg/tensor.hpp"

#include <vector>

namespace mambaseg {

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
  Index dilation = 1;
  Index groups = 1;
};

/// floor((in + 2 pad - dil (k - 1) - 1) / stride) + 1; throws ConfigError
/// when the result is not positive.
Index conv_output_extent(Index in, Index kernel, const Conv2dOptions& opt);

/// x [B,Cin,H,W], weight [Cout,Cin/groups,k,k], optional bias [Cout].
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                      const Conv2dOptions& opt = {});

enum class NormKind { instance, batch };

template <typename Scalar>
struct RunningStats {
  Tensor<Scalar> mean;  // [C]
  Tensor<Scalar> var;   // [C], unbiased
  Scalar momentum = Scalar(0.1);
};

/// Instance norm normalizes each (sample, channel) plane; batch norm each
/// channel over (B, H, W). gamma/beta may be undefined (no affine). In
/// training mode batch norm updates `stats` when given; in evaluation mode it
/// normalizes with them.
template <typename Scalar>
Tensor<Scalar> normalize(const Tensor<Scalar>& x, NormKind kind, const Tensor<Scalar>& gamma,
                         const Tensor<Scalar>& beta, Scalar eps, RunningStats<Scalar>* stats = nullptr,
                         bool training = true);

enum class Activation { relu, sigmoid, silu, softplus };

template <typename Scalar>
Tensor<Scalar> activation(const Tensor<Scalar>& x, Activation kind);
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return activation(x, Activation::relu);
}
template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return activation(x, Activation::sigmoid);
}
template <typename Scalar>
Tensor<Scalar> silu(const Tensor<Scalar>& x) {
  return activation(x, Activation::silu);
}
template <typename Scalar>
Tensor<Scalar> softplus(const Tensor<Scalar>& x) {
  return activation(x, Activation::softplus);
}
template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis);

enum class Resample { maxpool2, upsample2 };

/// maxpool2: 2x2 windows, stride 2, even extents only. upsample2: bilinear,
/// half-pixel centers (align_corners off).
template <typename Scalar>
Tensor<Scalar> resample(const Tensor<Scalar>& x, Resample kind);
template <typename Scalar>
Tensor<Scalar> maxpool2(const Tensor<Scalar>& x) {
  return resample(x, Resample::maxpool2);
}
template <typename Scalar>
Tensor<Scalar> upsample2(const Tensor<Scalar>& x) {
  return resample(x, Resample::upsample2);
}

// Elementwise arithmetic with numpy-style broadcasting (shapes right-aligned).
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
/// scale * x + shift
template <typename Scalar>
Tensor<Scalar> affine(const Tensor<Scalar>& x, Scalar scale, Scalar shift);

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return sub(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return mul(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return div(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& x) {
  return affine(x, Scalar(-1), Scalar(0));
}
template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& x) {
  return affine(x, s, Scalar(0));
}
template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& x, Scalar s) {
  return affine(x, Scalar(1), s);
}
template <typename Scalar>
Tensor<Scalar> operator-(Scalar s, const Tensor<Scalar>& x) {
  return affine(x, Scalar(-1), s);
}

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis);
template <typename Scalar>
Tensor<Scalar> narrow(const Tensor<Scalar>& x, int axis, Index start, Index length);
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape);

/// Sum / mean of all elements, shape [1].
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x);

/// [B,C,H,W] -> [B,C,1,1]
template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> global_max_pool(const Tensor<Scalar>& x);
/// [B,C,H,W] -> [B,1,H,W]
template <typename Scalar>
Tensor<Scalar> channel_mean(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> channel_max(const Tensor<Scalar>& x);

/// Affine map over the last axis: x [..., in], weight [out, in], bias [out].
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias);

}  // namespace mambaseg
