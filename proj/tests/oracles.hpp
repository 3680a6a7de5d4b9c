#pragma once

// Straightforward scalar-loop implementations used as test oracles. They
// share no code with the library beyond the tensor container.

#include "mambaseg/module.hpp"
#include "mambaseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace oracle {

using mambaseg::Index;
using mambaseg::Shape;
using mambaseg::Tensor;

template <typename Scalar>
Tensor<Scalar> random_tensor(const Shape& shape, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<Scalar> t = Tensor<Scalar>::zeros(shape);
  for (Index i = 0; i < t.numel(); ++i) t.mutable_data()[i] = static_cast<Scalar>(dist(gen));
  return t;
}

inline Index idx4(const Shape& s, Index n, Index c, Index h, Index w) {
  return ((n * s[1] + c) * s[2] + h) * s[3] + w;
}

/// Direct convolution with zero padding, stride, dilation and groups.
inline std::vector<double> conv2d(const std::vector<double>& x, const Shape& xs, const std::vector<double>& w,
                                  const Shape& ws, const std::vector<double>& bias, Index stride, Index pad,
                                  Index dil, Index groups, Shape& out_shape) {
  const Index B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
  const Index Cout = ws[0], Cg = ws[1], K = ws[2];
  const Index Ho = (H + 2 * pad - dil * (K - 1) - 1) / stride + 1;
  const Index Wo = (W + 2 * pad - dil * (K - 1) - 1) / stride + 1;
  const Index out_per_group = Cout / groups;
  out_shape = {B, Cout, Ho, Wo};
  std::vector<double> y(static_cast<std::size_t>(B * Cout * Ho * Wo), 0.0);
  for (Index n = 0; n < B; ++n)
    for (Index co = 0; co < Cout; ++co) {
      const Index g = co / out_per_group;
      for (Index oh = 0; oh < Ho; ++oh)
        for (Index ow = 0; ow < Wo; ++ow) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
          for (Index ci = 0; ci < Cg; ++ci)
            for (Index kh = 0; kh < K; ++kh)
              for (Index kw = 0; kw < K; ++kw) {
                const Index ih = oh * stride - pad + kh * dil;
                const Index iw = ow * stride - pad + kw * dil;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                const Index cin = g * Cg + ci;
                acc += x[static_cast<std::size_t>(((n * Cin + cin) * H + ih) * W + iw)] *
                       w[static_cast<std::size_t>(((co * Cg + ci) * K + kh) * K + kw)];
              }
          y[static_cast<std::size_t>(((n * Cout + co) * Ho + oh) * Wo + ow)] = acc;
        }
    }
  return y;
}

template <typename Scalar>
std::vector<double> to_vec(const Tensor<Scalar>& t) {
  std::vector<double> v(static_cast<std::size_t>(t.numel()));
  for (Index i = 0; i < t.numel(); ++i) v[static_cast<std::size_t>(i)] = static_cast<double>(t.data()[i]);
  return v;
}

/// Recurrence over [B,L,E] inputs evaluated literally in double precision.
inline std::vector<double> selective_scan(const std::vector<double>& u, const std::vector<double>& delta,
                                          const std::vector<double>& A, const std::vector<double>& b,
                                          const std::vector<double>& c, const std::vector<double>& d, Index B,
                                          Index L, Index E, Index N) {
  std::vector<double> y(static_cast<std::size_t>(B * L * E), 0.0);
  std::vector<double> h(static_cast<std::size_t>(N));
  for (Index n = 0; n < B; ++n)
    for (Index e = 0; e < E; ++e) {
      std::fill(h.begin(), h.end(), 0.0);
      for (Index t = 0; t < L; ++t) {
        const std::size_t ue = static_cast<std::size_t>((n * L + t) * E + e);
        double acc = 0;
        for (Index s = 0; s < N; ++s) {
          const std::size_t bs = static_cast<std::size_t>((n * L + t) * N + s);
          const double a = A[static_cast<std::size_t>(e * N + s)];
          h[static_cast<std::size_t>(s)] =
              std::exp(delta[ue] * a) * h[static_cast<std::size_t>(s)] + delta[ue] * b[bs] * u[ue];
          acc += c[bs] * h[static_cast<std::size_t>(s)];
        }
        y[ue] = acc + d[static_cast<std::size_t>(e)] * u[ue];
      }
    }
  return y;
}

/// max |a - ref| / max |ref|
inline double relative_error(const std::vector<double>& a, const std::vector<double>& ref) {
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - ref[i]));
    scale = std::max(scale, std::abs(ref[i]));
  }
  return scale > 0 ? diff / scale : diff;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// Per-test scratch directory, recreated empty.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mambaseg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace oracle
