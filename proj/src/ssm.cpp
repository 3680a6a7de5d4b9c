#include "mambaseg/ssm.hpp"

#include "mambaseg/errors.hpp"
#include "mambaseg/ops.hpp"

#include <cmath>

namespace mambaseg {

const char* to_string(ScanDirection dir) {
  switch (dir) {
    case ScanDirection::row_forward: return "row_forward";
    case ScanDirection::row_backward: return "row_backward";
    case ScanDirection::col_forward: return "col_forward";
    case ScanDirection::col_backward: return "col_backward";
  }
  return "?";
}

std::vector<Index> scan_order(ScanDirection dir, Index height, Index width) {
  const Index L = height * width;
  std::vector<Index> order(static_cast<std::size_t>(L));
  for (Index p = 0; p < L; ++p) {
    const bool reversed = dir == ScanDirection::row_backward || dir == ScanDirection::col_backward;
    const Index q = reversed ? L - 1 - p : p;
    Index s = q;
    if (dir == ScanDirection::col_forward || dir == ScanDirection::col_backward) {
      const Index w = q / height, h = q % height;
      s = h * width + w;
    }
    order[static_cast<std::size_t>(p)] = s;
  }
  return order;
}

std::vector<Index> inverse_scan_order(ScanDirection dir, Index height, Index width) {
  const auto order = scan_order(dir, height, width);
  std::vector<Index> inv(order.size());
  for (std::size_t p = 0; p < order.size(); ++p) inv[static_cast<std::size_t>(order[p])] = static_cast<Index>(p);
  return inv;
}

template <typename Scalar>
Tensor<Scalar> sequence_from_map(const Tensor<Scalar>& x, ScanDirection dir) {
  if (x.rank() != 4) throw DimensionError("cross_scan expects [B,C,H,W], got " + to_string(x.shape()));
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), L = H * W;
  const auto order = scan_order(dir, H, W);
  const auto& X = x.data();
  Array<Scalar> out(B * L * C);
  for (Index b = 0; b < B; ++b) {
    for (Index c = 0; c < C; ++c) {
      for (Index p = 0; p < L; ++p) out((b * L + p) * C + c) = X((b * C + c) * L + order[static_cast<std::size_t>(p)]);
    }
  }
  Tensor<Scalar> result({B, L, C}, std::move(out));
  detail::record(result, "cross_scan", {&x}, [xi = x.impl(), order, B, C, L](const TensorImpl<Scalar>& o) {
    auto& G = xi->grad_buffer();
    for (Index b = 0; b < B; ++b) {
      for (Index c = 0; c < C; ++c) {
        for (Index p = 0; p < L; ++p) G((b * C + c) * L + order[static_cast<std::size_t>(p)]) += o.grad((b * L + p) * C + c);
      }
    }
  });
  return result;
}

template <typename Scalar>
Tensor<Scalar> map_from_sequence(const Tensor<Scalar>& y, ScanDirection dir, Index height, Index width) {
  if (y.rank() != 3) throw DimensionError("cross_merge expects [B,L,C], got " + to_string(y.shape()));
  const Index B = y.dim(0), L = y.dim(1), C = y.dim(2);
  if (L != height * width) {
    throw DimensionError("cross_merge: sequence length " + std::to_string(L) + " != H*W = " +
                         std::to_string(height * width));
  }
  const auto order = scan_order(dir, height, width);
  const auto& Y = y.data();
  Array<Scalar> out(B * C * L);
  for (Index b = 0; b < B; ++b) {
    for (Index c = 0; c < C; ++c) {
      for (Index p = 0; p < L; ++p) out((b * C + c) * L + order[static_cast<std::size_t>(p)]) = Y((b * L + p) * C + c);
    }
  }
  Tensor<Scalar> result({B, C, height, width}, std::move(out));
  detail::record(result, "cross_merge", {&y}, [yi = y.impl(), order, B, C, L](const TensorImpl<Scalar>& o) {
    auto& G = yi->grad_buffer();
    for (Index b = 0; b < B; ++b) {
      for (Index c = 0; c < C; ++c) {
        for (Index p = 0; p < L; ++p) G((b * L + p) * C + c) += o.grad((b * C + c) * L + order[static_cast<std::size_t>(p)]);
      }
    }
  });
  return result;
}

template <typename Scalar>
std::array<Tensor<Scalar>, 4> cross_scan(const Tensor<Scalar>& x) {
  std::array<Tensor<Scalar>, 4> out;
  for (std::size_t k = 0; k < 4; ++k) out[k] = sequence_from_map(x, kScanDirections[k]);
  return out;
}

template <typename Scalar>
Tensor<Scalar> cross_merge(const std::array<Tensor<Scalar>, 4>& ys, Index height, Index width) {
  Tensor<Scalar> total = map_from_sequence(ys[0], kScanDirections[0], height, width);
  for (std::size_t k = 1; k < 4; ++k) {
    if (ys[k].shape() != ys[0].shape()) throw DimensionError("cross_merge: direction shapes differ");
    total = total + map_from_sequence(ys[k], kScanDirections[k], height, width);
  }
  return total;
}

namespace {

struct ScanDims {
  Index batch, length, channels, state;
};

ScanDims check_scan_inputs(const Shape& u, const Shape& delta, const Shape& A, const Shape& b, const Shape& c,
                           const Shape& d) {
  if (u.size() != 3) throw DimensionError("selective_scan: u must be [B,L,E], got " + to_string(u));
  ScanDims dims{u[0], u[1], u[2], A.size() == 2 ? A[1] : 0};
  if (dims.state <= 0) throw ConfigError("selective_scan: state_dim must be positive");
  if (dims.length < 1) throw DimensionError("selective_scan: empty sequence");
  if (delta != u) throw DimensionError("selective_scan: delta shape " + to_string(delta) + " != u " + to_string(u));
  if (A != Shape{dims.channels, dims.state}) throw DimensionError("selective_scan: A must be [E,N], got " + to_string(A));
  const Shape bc{dims.batch, dims.length, dims.state};
  if (b != bc || c != bc) throw DimensionError("selective_scan: B and C must be [B,L,N]");
  if (d != Shape{dims.channels}) throw DimensionError("selective_scan: D must be [E]");
  return dims;
}

// Plain nested loops; defines the semantics.
template <typename Scalar>
void scan_reference(const ScanDims& s, const Scalar* U, const Scalar* DT, const Scalar* A, const Scalar* Bm,
                    const Scalar* Cm, const Scalar* D, Scalar* Y) {
  std::vector<Scalar> h(static_cast<std::size_t>(s.state));
  for (Index b = 0; b < s.batch; ++b) {
    for (Index e = 0; e < s.channels; ++e) {
      std::fill(h.begin(), h.end(), Scalar(0));
      for (Index t = 0; t < s.length; ++t) {
        const Index ue = (b * s.length + t) * s.channels + e;
        const Index bn = (b * s.length + t) * s.state;
        Scalar y = D[e] * U[ue];
        for (Index n = 0; n < s.state; ++n) {
          const auto ni = static_cast<std::size_t>(n);
          h[ni] = std::exp(DT[ue] * A[e * s.state + n]) * h[ni] + DT[ue] * Bm[bn + n] * U[ue];
          y += Cm[bn + n] * h[ni];
        }
        Y[ue] = y;
      }
    }
  }
}

// Time-blocked scan. For each block of `chunk` steps the discretized decays
// exp(delta * A) are computed in one contiguous pass, then the recurrence runs
// with the whole [E,N] state updated per step.
template <typename Scalar>
void scan_chunked(const ScanDims& s, Index chunk, const Scalar* U, const Scalar* DT, const Scalar* A,
                  const Scalar* Bm, const Scalar* Cm, const Scalar* D, Scalar* Y) {
  using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  const Index E = s.channels, N = s.state;
  const Eigen::Map<const RowMat> a_mat(A, E, N);
  const Eigen::Map<const Vec> d_vec(D, E);
  RowMat h(E, N), abar(chunk * E, N);
  Vec dtu(E);
  for (Index b = 0; b < s.batch; ++b) {
    h.setZero();
    for (Index t0 = 0; t0 < s.length; t0 += chunk) {
      const Index len = std::min(chunk, s.length - t0);
      for (Index k = 0; k < len; ++k) {
        const Eigen::Map<const Vec> dt(DT + (b * s.length + t0 + k) * E, E);
        abar.middleRows(k * E, E) = dt.asDiagonal() * a_mat;
      }
      auto block = abar.topRows(len * E).array();
      block = block.exp();
      for (Index k = 0; k < len; ++k) {
        const Index t = t0 + k;
        const Eigen::Map<const Vec> u(U + (b * s.length + t) * E, E);
        const Eigen::Map<const Vec> dt(DT + (b * s.length + t) * E, E);
        const Eigen::Map<const Vec> b_t(Bm + (b * s.length + t) * N, N);
        const Eigen::Map<const Vec> c_t(Cm + (b * s.length + t) * N, N);
        Eigen::Map<Vec> y(Y + (b * s.length + t) * E, E);
        dtu = dt.cwiseProduct(u);
        h.array() *= abar.middleRows(k * E, E).array();
        h.noalias() += dtu * b_t.transpose();
        y.noalias() = h * c_t;
        y += d_vec.cwiseProduct(u);
      }
    }
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> selective_scan(const Tensor<Scalar>& u, const Tensor<Scalar>& delta, const Tensor<Scalar>& A,
                              const Tensor<Scalar>& b, const Tensor<Scalar>& c, const Tensor<Scalar>& d,
                              ScanExecution execution, Index chunk) {
  const ScanDims s = check_scan_inputs(u.shape(), delta.shape(), A.shape(), b.shape(), c.shape(), d.shape());
  if (chunk < 1) throw ConfigError("selective_scan: chunk must be >= 1");
  Array<Scalar> out(u.numel());
  if (execution == ScanExecution::reference) {
    scan_reference(s, u.data().data(), delta.data().data(), A.data().data(), b.data().data(), c.data().data(),
                   d.data().data(), out.data());
  } else {
    scan_chunked(s, chunk, u.data().data(), delta.data().data(), A.data().data(), b.data().data(),
                 c.data().data(), d.data().data(), out.data());
  }
  detail::check_finite_debug("selective_scan", out.data(), out.size());
  Tensor<Scalar> result(u.shape(), std::move(out));
  detail::record(
      result, "selective_scan", {&u, &delta, &A, &b, &c, &d},
      [ui = u.impl(), dti = delta.impl(), ai = A.impl(), bi = b.impl(), ci = c.impl(), di = d.impl(),
       s](const TensorImpl<Scalar>& o) {
        using Vec = Array<Scalar>;
        const Scalar* U = ui->data.data();
        const Scalar* DT = dti->data.data();
        const Scalar* Am = ai->data.data();
        const Scalar* Bm = bi->data.data();
        const Scalar* Cm = ci->data.data();
        const Scalar* D = di->data.data();
        const Scalar* G = o.grad.data();
        Scalar* GU = detail::wants_grad(ui) ? ui->grad_buffer().data() : nullptr;
        Scalar* GDT = detail::wants_grad(dti) ? dti->grad_buffer().data() : nullptr;
        Scalar* GA = detail::wants_grad(ai) ? ai->grad_buffer().data() : nullptr;
        Scalar* GB = detail::wants_grad(bi) ? bi->grad_buffer().data() : nullptr;
        Scalar* GC = detail::wants_grad(ci) ? ci->grad_buffer().data() : nullptr;
        Scalar* GD = detail::wants_grad(di) ? di->grad_buffer().data() : nullptr;

        // States are recomputed per row instead of being kept from the forward pass.
        Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> hs(s.length, s.state);
        Vec h(s.state), gh(s.state), abar(s.state), g_abar(s.state);
        for (Index bb = 0; bb < s.batch; ++bb) {
          for (Index e = 0; e < s.channels; ++e) {
            const Eigen::Map<const Vec> a_row(Am + e * s.state, s.state);
            h.setZero();
            for (Index t = 0; t < s.length; ++t) {
              const Index ue = (bb * s.length + t) * s.channels + e;
              const Eigen::Map<const Vec> b_t(Bm + (bb * s.length + t) * s.state, s.state);
              h = (a_row * DT[ue]).exp() * h + (DT[ue] * U[ue]) * b_t;
              hs.row(t) = h.matrix().transpose();
            }
            gh.setZero();
            for (Index t = s.length - 1; t >= 0; --t) {
              const Index ue = (bb * s.length + t) * s.channels + e;
              const Index bn = (bb * s.length + t) * s.state;
              const Eigen::Map<const Vec> b_t(Bm + bn, s.state);
              const Eigen::Map<const Vec> c_t(Cm + bn, s.state);
              const Scalar gy = G[ue];
              const auto h_t = hs.row(t).transpose().array();
              if (GD) GD[e] += gy * U[ue];
              if (GU) GU[ue] += gy * D[e];
              if (GC) Eigen::Map<Vec>(GC + bn, s.state) += gy * h_t;
              gh += gy * c_t;
              abar = (a_row * DT[ue]).exp();
              if (t > 0) {
                g_abar = gh * hs.row(t - 1).transpose().array();
              } else {
                g_abar.setZero();
              }
              const Scalar dtu = DT[ue] * U[ue];
              if (GDT) GDT[ue] += (g_abar * abar * a_row).sum() + ((gh * b_t).sum()) * U[ue];
              if (GA) Eigen::Map<Vec>(GA + e * s.state, s.state) += g_abar * abar * DT[ue];
              if (GB) Eigen::Map<Vec>(GB + bn, s.state) += gh * dtu;
              if (GU) GU[ue] += DT[ue] * (gh * b_t).sum();
              gh *= abar;
            }
          }
        }
      });
  return result;
}

Index SsmConfig::inner_channels(Index channels) const {
  return std::max<Index>(1, static_cast<Index>(std::lround(expand * static_cast<double>(channels))));
}

template <typename Scalar>
DirectionalSsm<Scalar>::DirectionalSsm(Index channels, const SsmConfig& cfg, InitRng& rng)
    : channels_(channels), state_dim_(cfg.state_dim), execution_(cfg.execution) {
  if (cfg.state_dim <= 0) throw ConfigError("SSM state_dim must be positive");
  if (!(cfg.dt_min > 0 && cfg.dt_max >= cfg.dt_min)) throw ConfigError("SSM needs 0 < dt_min <= dt_max");
  const Index E = channels, N = cfg.state_dim;
  Tensor<Scalar> w({E + 2 * N, E});
  linear_uniform(w, E, rng);
  Tensor<Scalar> bias = Tensor<Scalar>::zeros({E + 2 * N});
  // softplus(bias) log-uniform in [dt_min, dt_max]; bias = dt + log(1 - exp(-dt)).
  const double lo = std::log(cfg.dt_min), hi = std::log(cfg.dt_max);
  for (Index e = 0; e < E; ++e) {
    const double dt = std::exp(rng.uniform(lo, hi));
    bias.mutable_data()(e) = static_cast<Scalar>(dt + std::log(-std::expm1(-dt)));
  }
  Tensor<Scalar> a_log({E, N});
  for (Index e = 0; e < E; ++e) {
    for (Index n = 0; n < N; ++n) a_log.mutable_data()(e * N + n) = static_cast<Scalar>(std::log(double(n + 1)));
  }
  proj_w_ = &this->register_parameter("proj.weight", std::move(w));
  proj_b_ = &this->register_parameter("proj.bias", std::move(bias));
  a_log_ = &this->register_parameter("a_log", std::move(a_log));
  d_ = &this->register_parameter("d", Tensor<Scalar>::ones({E}));
}

template <typename Scalar>
Tensor<Scalar> DirectionalSsm<Scalar>::A() const {
  return -exp(*a_log_);
}

template <typename Scalar>
Tensor<Scalar> DirectionalSsm<Scalar>::forward(const Tensor<Scalar>& seq) const {
  const Index E = channels_, N = state_dim_;
  const Tensor<Scalar> proj = linear(seq, *proj_w_, *proj_b_);
  const Tensor<Scalar> delta = softplus(narrow(proj, 2, 0, E));
  const Tensor<Scalar> b = narrow(proj, 2, E, N);
  const Tensor<Scalar> c = narrow(proj, 2, E + N, N);
  return selective_scan(seq, delta, A(), b, c, *d_, execution_);
}

template <typename Scalar>
Ss2d<Scalar>::Ss2d(Index channels, const SsmConfig& cfg, InitRng& rng) {
  for (std::size_t k = 0; k < 4; ++k) {
    dirs_[k] = std::make_unique<DirectionalSsm<Scalar>>(channels, cfg, rng);
    this->register_module(to_string(kScanDirections[k]), *dirs_[k]);
  }
}

template <typename Scalar>
Tensor<Scalar> Ss2d<Scalar>::forward(const Tensor<Scalar>& x) const {
  const Index H = x.dim(2), W = x.dim(3);
  std::array<Tensor<Scalar>, 4> seqs = cross_scan(x);
  for (std::size_t k = 0; k < 4; ++k) seqs[k] = dirs_[k]->forward(seqs[k]);
  return cross_merge(seqs, H, W);
}

#define MAMBASEG_INSTANTIATE_SSM(S)                                                                     \
  template Tensor<S> sequence_from_map<S>(const Tensor<S>&, ScanDirection);                             \
  template Tensor<S> map_from_sequence<S>(const Tensor<S>&, ScanDirection, Index, Index);               \
  template std::array<Tensor<S>, 4> cross_scan<S>(const Tensor<S>&);                                    \
  template Tensor<S> cross_merge<S>(const std::array<Tensor<S>, 4>&, Index, Index);                     \
  template Tensor<S> selective_scan<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,            \
                                       const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, ScanExecution, \
                                       Index);                                                          \
  template class DirectionalSsm<S>;                                                                     \
  template class Ss2d<S>;

MAMBASEG_INSTANTIATE_SSM(float)
MAMBASEG_INSTANTIATE_SSM(double)

}  // namespace mambaseg
