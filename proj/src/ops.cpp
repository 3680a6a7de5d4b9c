#include "mambaseg/ops.hpp"

#include "mambaseg/errors.hpp"

#include <array>
#include <cmath>
#include <limits>

namespace mambaseg {

namespace {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMatrix<Scalar>>;

template <typename Scalar>
Tensor<Scalar> make_output(Shape shape, Array<Scalar> data, const char* op) {
  detail::check_finite_debug(op, data.data(), data.size());
  return Tensor<Scalar>(std::move(shape), std::move(data));
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " +
                         to_string(s));
  }
}

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw DimensionError("axis " + std::to_string(axis) + " out of range");
  return a;
}

// ---------------------------------------------------------------------------
// conv2d

struct ConvGeometry {
  Index batch, cin, h, w, cout, k, ho, wo, groups, cin_g, cout_g, rows, plane;
  Conv2dOptions opt;
};

// Column chunk so a K x chunk im2col buffer stays near 4M scalars.
Index column_chunk(const ConvGeometry& g) {
  const Index budget = Index(1) << 22;
  return std::max<Index>(1, std::min<Index>(g.plane, budget / std::max<Index>(g.rows, 1)));
}

bool is_pointwise(const ConvGeometry& g) {
  return g.k == 1 && g.opt.stride == 1 && g.opt.padding == 0;
}

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, Index p0, Index pc, Scalar* cols) {
  const Index s = g.opt.stride, pad = g.opt.padding, d = g.opt.dilation;
  Index r = 0;
  for (Index ci = 0; ci < g.cin_g; ++ci) {
    const Scalar* xc = x + ci * g.h * g.w;
    for (Index ky = 0; ky < g.k; ++ky) {
      for (Index kx = 0; kx < g.k; ++kx, ++r) {
        Scalar* row = cols + r * pc;
        Index oy = p0 / g.wo, ox = p0 % g.wo;
        for (Index j = 0; j < pc; ++j) {
          const Index iy = oy * s - pad + ky * d;
          const Index ix = ox * s - pad + kx * d;
          row[j] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? xc[iy * g.w + ix] : Scalar(0);
          if (++ox == g.wo) {
            ox = 0;
            ++oy;
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* cols, const ConvGeometry& g, Index p0, Index pc, Scalar* gx) {
  const Index s = g.opt.stride, pad = g.opt.padding, d = g.opt.dilation;
  Index r = 0;
  for (Index ci = 0; ci < g.cin_g; ++ci) {
    Scalar* gc = gx + ci * g.h * g.w;
    for (Index ky = 0; ky < g.k; ++ky) {
      for (Index kx = 0; kx < g.k; ++kx, ++r) {
        const Scalar* row = cols + r * pc;
        Index oy = p0 / g.wo, ox = p0 % g.wo;
        for (Index j = 0; j < pc; ++j) {
          const Index iy = oy * s - pad + ky * d;
          const Index ix = ox * s - pad + kx * d;
          if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) gc[iy * g.w + ix] += row[j];
          if (++ox == g.wo) {
            ox = 0;
            ++oy;
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// broadcasting

struct Broadcast {
  Shape out;
  std::array<Index, 4> dims{1, 1, 1, 1};
  std::array<Index, 4> stride_a{0, 0, 0, 0};
  std::array<Index, 4> stride_b{0, 0, 0, 0};
  bool same = false;
};

std::array<Index, 4> padded(const Shape& s) {
  std::array<Index, 4> p{1, 1, 1, 1};
  const std::size_t off = 4 - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) p[off + i] = s[i];
  return p;
}

std::array<Index, 4> broadcast_strides(const std::array<Index, 4>& in, const std::array<Index, 4>& out) {
  std::array<Index, 4> st{};
  Index acc = 1;
  for (int i = 3; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = (in[static_cast<std::size_t>(i)] == 1 && out[static_cast<std::size_t>(i)] != 1) ? 0 : acc;
    acc *= in[static_cast<std::size_t>(i)];
  }
  return st;
}

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const auto pa = padded(a), pb = padded(b);
  for (std::size_t i = 0; i < 4; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    bc.dims[i] = std::max(pa[i], pb[i]);
  }
  const std::size_t rank = std::max(a.size(), b.size());
  bc.out.assign(bc.dims.begin() + static_cast<std::ptrdiff_t>(4 - rank), bc.dims.end());
  bc.stride_a = broadcast_strides(pa, bc.dims);
  bc.stride_b = broadcast_strides(pb, bc.dims);
  return bc;
}

// Calls fn(out_index, a_index, b_index) over the broadcast iteration space.
template <typename Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  const auto& d = bc.dims;
  const auto& sa = bc.stride_a;
  const auto& sb = bc.stride_b;
  Index o = 0;
  for (Index i0 = 0; i0 < d[0]; ++i0) {
    for (Index i1 = 0; i1 < d[1]; ++i1) {
      for (Index i2 = 0; i2 < d[2]; ++i2) {
        Index ia = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
        Index ib = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
        for (Index i3 = 0; i3 < d[3]; ++i3, ++o, ia += sa[3], ib += sb[3]) fn(o, ia, ib);
      }
    }
  }
}

enum class BinaryOp { add, sub, mul, div };

template <typename Scalar>
Scalar apply_binary(BinaryOp op, Scalar x, Scalar y) {
  switch (op) {
    case BinaryOp::add: return x + y;
    case BinaryOp::sub: return x - y;
    case BinaryOp::mul: return x * y;
    case BinaryOp::div: return x / y;
  }
  return Scalar(0);
}

template <typename Scalar>
Tensor<Scalar> binary(const Tensor<Scalar>& a, const Tensor<Scalar>& b, BinaryOp op, const char* name) {
  const Broadcast bc = broadcast(a.shape(), b.shape(), name);
  Array<Scalar> out(shape_numel(bc.out));
  const auto& A = a.data();
  const auto& B = b.data();
  if (bc.same) {
    switch (op) {
      case BinaryOp::add: out = A + B; break;
      case BinaryOp::sub: out = A - B; break;
      case BinaryOp::mul: out = A * B; break;
      case BinaryOp::div: out = A / B; break;
    }
  } else {
    for_each_broadcast(bc, [&](Index o, Index ia, Index ib) { out(o) = apply_binary(op, A(ia), B(ib)); });
  }
  Tensor<Scalar> result = make_output(bc.out, std::move(out), name);
  detail::record(result, name, {&a, &b}, [ai = a.impl(), bi = b.impl(), bc, op](const TensorImpl<Scalar>& o) {
    const auto& g = o.grad;
    const bool ga = detail::wants_grad(ai), gb = detail::wants_grad(bi);
    if (bc.same) {
      switch (op) {
        case BinaryOp::add:
          if (ga) ai->grad_buffer() += g;
          if (gb) bi->grad_buffer() += g;
          break;
        case BinaryOp::sub:
          if (ga) ai->grad_buffer() += g;
          if (gb) bi->grad_buffer() -= g;
          break;
        case BinaryOp::mul:
          if (ga) ai->grad_buffer() += g * bi->data;
          if (gb) bi->grad_buffer() += g * ai->data;
          break;
        case BinaryOp::div:
          if (ga) ai->grad_buffer() += g / bi->data;
          if (gb) bi->grad_buffer() -= g * ai->data / bi->data.square();
          break;
      }
      return;
    }
    Scalar* GA = ga ? ai->grad_buffer().data() : nullptr;
    Scalar* GB = gb ? bi->grad_buffer().data() : nullptr;
    const Scalar* A = ai->data.data();
    const Scalar* B = bi->data.data();
    for_each_broadcast(bc, [&](Index oi, Index ia, Index ib) {
      const Scalar go = g(oi);
      switch (op) {
        case BinaryOp::add:
          if (GA) GA[ia] += go;
          if (GB) GB[ib] += go;
          break;
        case BinaryOp::sub:
          if (GA) GA[ia] += go;
          if (GB) GB[ib] -= go;
          break;
        case BinaryOp::mul:
          if (GA) GA[ia] += go * B[ib];
          if (GB) GB[ib] += go * A[ia];
          break;
        case BinaryOp::div:
          if (GA) GA[ia] += go / B[ib];
          if (GB) GB[ib] -= go * A[ia] / (B[ib] * B[ib]);
          break;
      }
    });
  });
  return result;
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar stable_softplus(Scalar x) {
  if (x > Scalar(20)) return x;
  return std::log1p(std::exp(x));
}

}  // namespace

Index conv_output_extent(Index in, Index kernel, const Conv2dOptions& opt) {
  const Index span = opt.dilation * (kernel - 1) + 1;
  const Index numer = in + 2 * opt.padding - span;
  if (numer < 0) {
    throw ConfigError("conv2d: kernel span " + std::to_string(span) + " exceeds padded input extent " +
                      std::to_string(in + 2 * opt.padding));
  }
  const Index out = numer / opt.stride + 1;
  if (out <= 0) throw ConfigError("conv2d: non-positive output extent");
  return out;
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                      const Conv2dOptions& opt) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  if (opt.stride < 1 || opt.dilation < 1 || opt.groups < 1 || opt.padding < 0) {
    throw ConfigError("conv2d: stride, dilation and groups must be >= 1 and padding >= 0");
  }
  ConvGeometry g;
  g.opt = opt;
  g.batch = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = weight.dim(0);
  g.k = weight.dim(2);
  g.groups = opt.groups;
  if (weight.dim(3) != g.k || g.k < 1) throw ConfigError("conv2d: kernel must be square with k >= 1");
  if (g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    throw DimensionError("conv2d: channels (" + std::to_string(g.cin) + " in, " + std::to_string(g.cout) +
                         " out) not divisible by groups " + std::to_string(g.groups));
  }
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (weight.dim(1) != g.cin_g) {
    throw DimensionError("conv2d: weight " + to_string(weight.shape()) + " expects " +
                         std::to_string(weight.dim(1) * g.groups) + " input channels, input has " +
                         std::to_string(g.cin));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw DimensionError("conv2d: bias shape " + to_string(bias.shape()) + " does not match " +
                         std::to_string(g.cout) + " output channels");
  }
  g.ho = conv_output_extent(g.h, g.k, opt);
  g.wo = conv_output_extent(g.w, g.k, opt);
  g.rows = g.cin_g * g.k * g.k;
  g.plane = g.ho * g.wo;

  Array<Scalar> out(g.batch * g.cout * g.plane);
  const Scalar* X = x.data().data();
  const Scalar* Wt = weight.data().data();
  const bool pointwise = is_pointwise(g);
  const Index chunk = column_chunk(g);
  RowMatrix<Scalar> cols;
  for (Index b = 0; b < g.batch; ++b) {
    for (Index gi = 0; gi < g.groups; ++gi) {
      ConstMatMap<Scalar> wg(Wt + gi * g.cout_g * g.rows, g.cout_g, g.rows);
      const Scalar* xg = X + (b * g.cin + gi * g.cin_g) * g.h * g.w;
      MatMap<Scalar> og(out.data() + (b * g.cout + gi * g.cout_g) * g.plane, g.cout_g, g.plane);
      if (pointwise) {
        og.noalias() = wg * ConstMatMap<Scalar>(xg, g.rows, g.plane);
        continue;
      }
      for (Index p0 = 0; p0 < g.plane; p0 += chunk) {
        const Index pc = std::min(chunk, g.plane - p0);
        cols.resize(g.rows, pc);
        im2col(xg, g, p0, pc, cols.data());
        og.middleCols(p0, pc).noalias() = wg * cols;
      }
    }
    if (bias.defined()) {
      MatMap<Scalar> ob(out.data() + b * g.cout * g.plane, g.cout, g.plane);
      ob.colwise() += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias.data().data(), g.cout);
    }
  }

  Tensor<Scalar> result = make_output({g.batch, g.cout, g.ho, g.wo}, std::move(out), "conv2d");
  detail::record(result, "conv2d", {&x, &weight, &bias},
                 [xi = x.impl(), wi = weight.impl(), bi = bias.impl(), g](const TensorImpl<Scalar>& o) {
                   const bool gx = detail::wants_grad(xi), gw = detail::wants_grad(wi),
                              gb = detail::wants_grad(bi);
                   const Scalar* G = o.grad.data();
                   const Scalar* X = xi->data.data();
                   const Scalar* Wt = wi->data.data();
                   Scalar* GX = gx ? xi->grad_buffer().data() : nullptr;
                   Scalar* GW = gw ? wi->grad_buffer().data() : nullptr;
                   const bool pointwise = is_pointwise(g);
                   const Index chunk = column_chunk(g);
                   RowMatrix<Scalar> cols, gcols;
                   for (Index b = 0; b < g.batch; ++b) {
                     for (Index gi = 0; gi < g.groups; ++gi) {
                       ConstMatMap<Scalar> wg(Wt + gi * g.cout_g * g.rows, g.cout_g, g.rows);
                       ConstMatMap<Scalar> og(G + (b * g.cout + gi * g.cout_g) * g.plane, g.cout_g, g.plane);
                       const Index xoff = (b * g.cin + gi * g.cin_g) * g.h * g.w;
                       if (pointwise) {
                         if (gw) {
                           MatMap<Scalar>(GW + gi * g.cout_g * g.rows, g.cout_g, g.rows).noalias() +=
                               og * ConstMatMap<Scalar>(X + xoff, g.rows, g.plane).transpose();
                         }
                         if (gx) MatMap<Scalar>(GX + xoff, g.rows, g.plane).noalias() += wg.transpose() * og;
                         continue;
                       }
                       for (Index p0 = 0; p0 < g.plane; p0 += chunk) {
                         const Index pc = std::min(chunk, g.plane - p0);
                         if (gw) {
                           cols.resize(g.rows, pc);
                           im2col(X + xoff, g, p0, pc, cols.data());
                           MatMap<Scalar>(GW + gi * g.cout_g * g.rows, g.cout_g, g.rows).noalias() +=
                               og.middleCols(p0, pc) * cols.transpose();
                         }
                         if (gx) {
                           gcols.noalias() = wg.transpose() * og.middleCols(p0, pc);
                           col2im(gcols.data(), g, p0, pc, GX + xoff);
                         }
                       }
                     }
                     if (gb) {
                       ConstMatMap<Scalar> ob(G + b * g.cout * g.plane, g.cout, g.plane);
                       bi->grad_buffer().matrix() += ob.rowwise().sum();
                     }
                   }
                 });
  return result;
}

template <typename Scalar>
Tensor<Scalar> normalize(const Tensor<Scalar>& x, NormKind kind, const Tensor<Scalar>& gamma,
                         const Tensor<Scalar>& beta, Scalar eps, RunningStats<Scalar>* stats, bool training) {
  require_rank(x.shape(), 4, "normalize");
  if (!(eps > Scalar(0))) throw ConfigError("normalize: eps must be positive (division guard)");
  const Index B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.defined() && gamma.numel() != C) throw DimensionError("normalize: gamma must have C entries");
  if (beta.defined() && beta.numel() != C) throw DimensionError("normalize: beta must have C entries");
  const bool batch = kind == NormKind::batch;
  const bool use_running = batch && !training;
  if (use_running && (stats == nullptr || !stats->mean.defined())) {
    throw UsageError("normalize: batch norm in evaluation mode needs running statistics");
  }
  const Index groups = batch ? C : B * C;
  const Index group_size = batch ? B * HW : HW;
  if (batch && training && group_size < 2) {
    throw ConfigError("normalize: batch norm in training mode needs B*H*W >= 2 per channel");
  }

  const Scalar* X = x.data().data();
  Array<Scalar> xhat(x.numel());
  Array<Scalar> inv_std(groups);
  auto for_group = [&](Index gidx, auto&& fn) {
    // batch: channel gidx across all samples; instance: plane gidx.
    if (batch) {
      for (Index b = 0; b < B; ++b) fn((b * C + gidx) * HW);
    } else {
      fn(gidx * HW);
    }
  };
  for (Index gi = 0; gi < groups; ++gi) {
    Scalar mu, var;
    if (use_running) {
      mu = stats->mean.data()(gi);
      var = stats->var.data()(gi);
    } else {
      Scalar s = 0;
      for_group(gi, [&](Index off) { s += Eigen::Map<const Array<Scalar>>(X + off, HW).sum(); });
      mu = s / Scalar(group_size);
      Scalar ss = 0;
      for_group(gi, [&](Index off) { ss += (Eigen::Map<const Array<Scalar>>(X + off, HW) - mu).square().sum(); });
      var = ss / Scalar(group_size);
      if (batch && stats != nullptr && stats->mean.defined()) {
        const Scalar m = stats->momentum;
        const Scalar unbiased = ss / Scalar(group_size - 1);
        stats->mean.mutable_data()(gi) = (Scalar(1) - m) * stats->mean.data()(gi) + m * mu;
        stats->var.mutable_data()(gi) = (Scalar(1) - m) * stats->var.data()(gi) + m * unbiased;
      }
    }
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    inv_std(gi) = is;
    for_group(gi, [&](Index off) {
      xhat.segment(off, HW) = (Eigen::Map<const Array<Scalar>>(X + off, HW) - mu) * is;
    });
  }

  Array<Scalar> out(x.numel());
  for (Index b = 0; b < B; ++b) {
    for (Index c = 0; c < C; ++c) {
      const Index off = (b * C + c) * HW;
      const Scalar gm = gamma.defined() ? gamma.data()(c) : Scalar(1);
      const Scalar bt = beta.defined() ? beta.data()(c) : Scalar(0);
      out.segment(off, HW) = xhat.segment(off, HW) * gm + bt;
    }
  }

  Tensor<Scalar> result = make_output(x.shape(), std::move(out), "normalize");
  detail::record(result, "normalize", {&x, &gamma, &beta},
                 [xi = x.impl(), gi_ = gamma.impl(), bi = beta.impl(), xhat = std::move(xhat),
                  inv_std = std::move(inv_std), B, C, HW, batch, use_running, group_size](const TensorImpl<Scalar>& o) {
                   const auto& G = o.grad;
                   if (detail::wants_grad(gi_) || detail::wants_grad(bi)) {
                     for (Index b = 0; b < B; ++b) {
                       for (Index c = 0; c < C; ++c) {
                         const Index off = (b * C + c) * HW;
                         if (detail::wants_grad(gi_)) {
                           gi_->grad_buffer()(c) += (G.segment(off, HW) * xhat.segment(off, HW)).sum();
                         }
                         if (detail::wants_grad(bi)) bi->grad_buffer()(c) += G.segment(off, HW).sum();
                       }
                     }
                   }
                   if (!detail::wants_grad(xi)) return;
                   auto& GX = xi->grad_buffer();
                   // dxhat = g * gamma, grouped as in the forward pass.
                   auto gamma_of = [&](Index c) { return gi_ ? gi_->data(c) : Scalar(1); };
                   const Index groups = batch ? C : B * C;
                   for (Index grp = 0; grp < groups; ++grp) {
                     const Scalar is = inv_std(grp);
                     std::vector<Index> offs;
                     if (batch) {
                       for (Index b = 0; b < B; ++b) offs.push_back((b * C + grp) * HW);
                     } else {
                       offs.push_back(grp * HW);
                     }
                     const Scalar gm = gamma_of(batch ? grp : grp % C);
                     if (use_running) {
                       for (Index off : offs) GX.segment(off, HW) += G.segment(off, HW) * (gm * is);
                       continue;
                     }
                     Scalar sum_d = 0, sum_dx = 0;
                     for (Index off : offs) {
                       sum_d += G.segment(off, HW).sum() * gm;
                       sum_dx += (G.segment(off, HW) * xhat.segment(off, HW)).sum() * gm;
                     }
                     const Scalar n = Scalar(group_size);
                     for (Index off : offs) {
                       GX.segment(off, HW) +=
                           (is / n) * (n * gm * G.segment(off, HW) - sum_d - xhat.segment(off, HW) * sum_dx);
                     }
                   }
                 });
  return result;
}

template <typename Scalar>
Tensor<Scalar> activation(const Tensor<Scalar>& x, Activation kind) {
  const auto& X = x.data();
  Array<Scalar> out(X.size());
  switch (kind) {
    case Activation::relu: out = X.max(Scalar(0)); break;
    case Activation::sigmoid: out = X.unaryExpr([](Scalar v) { return stable_sigmoid(v); }); break;
    case Activation::silu: out = X * X.unaryExpr([](Scalar v) { return stable_sigmoid(v); }); break;
    case Activation::softplus: out = X.unaryExpr([](Scalar v) { return stable_softplus(v); }); break;
  }
  static constexpr const char* names[] = {"relu", "sigmoid", "silu", "softplus"};
  const char* name = names[static_cast<int>(kind)];
  Tensor<Scalar> result = make_output(x.shape(), std::move(out), name);
  detail::record(result, name, {&x}, [xi = x.impl(), kind](const TensorImpl<Scalar>& o) {
    const auto& G = o.grad;
    const auto& X = xi->data;
    auto& GX = xi->grad_buffer();
    switch (kind) {
      case Activation::relu: GX += (X > Scalar(0)).select(G, Scalar(0)); break;
      case Activation::sigmoid: GX += G * o.data * (Scalar(1) - o.data); break;
      case Activation::silu: {
        const Array<Scalar> s = X.unaryExpr([](Scalar v) { return stable_sigmoid(v); });
        GX += G * s * (Scalar(1) + X * (Scalar(1) - s));
        break;
      }
      case Activation::softplus:
        GX += G * X.unaryExpr([](Scalar v) { return stable_sigmoid(v); });
        break;
    }
  });
  return result;
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x) {
  Tensor<Scalar> result = make_output(x.shape(), Array<Scalar>(x.data().exp()), "exp");
  detail::record(result, "exp", {&x},
                 [xi = x.impl()](const TensorImpl<Scalar>& o) { xi->grad_buffer() += o.grad * o.data; });
  return result;
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis) {
  const int a = normalize_axis(axis, x.rank());
  Index outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= x.dim(i);
  for (int i = a + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const Index n = x.dim(a);
  const auto& X = x.data();
  Array<Scalar> out(X.size());
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * n * inner + i;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index k = 0; k < n; ++k) mx = std::max(mx, X(base + k * inner));
      Scalar z = 0;
      for (Index k = 0; k < n; ++k) z += (out(base + k * inner) = std::exp(X(base + k * inner) - mx));
      for (Index k = 0; k < n; ++k) out(base + k * inner) /= z;
    }
  }
  Tensor<Scalar> result = make_output(x.shape(), std::move(out), "softmax");
  detail::record(result, "softmax", {&x}, [xi = x.impl(), outer, inner, n](const TensorImpl<Scalar>& o) {
    auto& GX = xi->grad_buffer();
    for (Index oo = 0; oo < outer; ++oo) {
      for (Index i = 0; i < inner; ++i) {
        const Index base = oo * n * inner + i;
        Scalar dot = 0;
        for (Index k = 0; k < n; ++k) dot += o.grad(base + k * inner) * o.data(base + k * inner);
        for (Index k = 0; k < n; ++k) {
          GX(base + k * inner) += o.data(base + k * inner) * (o.grad(base + k * inner) - dot);
        }
      }
    }
  });
  return result;
}

template <typename Scalar>
Tensor<Scalar> resample(const Tensor<Scalar>& x, Resample kind) {
  require_rank(x.shape(), 4, "resample");
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto& X = x.data();
  if (kind == Resample::maxpool2) {
    if (H % 2 || W % 2) {
      throw ConfigError("maxpool2 needs even spatial extents, got " + to_string(x.shape()));
    }
    const Index Ho = H / 2, Wo = W / 2;
    Array<Scalar> out(B * C * Ho * Wo);
    std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
    Index o = 0;
    for (Index p = 0; p < B * C; ++p) {
      const Index base = p * H * W;
      for (Index y = 0; y < Ho; ++y) {
        for (Index xw = 0; xw < Wo; ++xw, ++o) {
          Index best = base + 2 * y * W + 2 * xw;
          for (Index dy = 0; dy < 2; ++dy) {
            for (Index dx = 0; dx < 2; ++dx) {
              const Index idx = base + (2 * y + dy) * W + 2 * xw + dx;
              if (X(idx) > X(best)) best = idx;
            }
          }
          out(o) = X(best);
          argmax[static_cast<std::size_t>(o)] = best;
        }
      }
    }
    Tensor<Scalar> result = make_output({B, C, Ho, Wo}, std::move(out), "maxpool2");
    detail::record(result, "maxpool2", {&x}, [xi = x.impl(), argmax = std::move(argmax)](const TensorImpl<Scalar>& o) {
      auto& GX = xi->grad_buffer();
      for (std::size_t i = 0; i < argmax.size(); ++i) GX(argmax[i]) += o.grad(static_cast<Index>(i));
    });
    return result;
  }

  // Bilinear x2 with source coordinate (i + 0.5) / 2 - 0.5, clamped at 0.
  struct Tap {
    Index i0, i1;
    Scalar w1;
  };
  auto taps = [](Index in, Index out_n) {
    std::vector<Tap> t(static_cast<std::size_t>(out_n));
    for (Index i = 0; i < out_n; ++i) {
      Scalar src = (Scalar(i) + Scalar(0.5)) / Scalar(2) - Scalar(0.5);
      if (src < 0) src = 0;
      const Index i0 = std::min<Index>(static_cast<Index>(src), in - 1);
      const Index i1 = std::min<Index>(i0 + 1, in - 1);
      t[static_cast<std::size_t>(i)] = {i0, i1, src - Scalar(i0)};
    }
    return t;
  };
  const Index Ho = 2 * H, Wo = 2 * W;
  auto ty = taps(H, Ho), tx = taps(W, Wo);
  Array<Scalar> out(B * C * Ho * Wo);
  for (Index p = 0; p < B * C; ++p) {
    const Scalar* src = X.data() + p * H * W;
    Scalar* dst = out.data() + p * Ho * Wo;
    for (Index y = 0; y < Ho; ++y) {
      const Tap& a = ty[static_cast<std::size_t>(y)];
      for (Index xw = 0; xw < Wo; ++xw) {
        const Tap& b = tx[static_cast<std::size_t>(xw)];
        const Scalar top = src[a.i0 * W + b.i0] * (1 - b.w1) + src[a.i0 * W + b.i1] * b.w1;
        const Scalar bot = src[a.i1 * W + b.i0] * (1 - b.w1) + src[a.i1 * W + b.i1] * b.w1;
        dst[y * Wo + xw] = top * (1 - a.w1) + bot * a.w1;
      }
    }
  }
  Tensor<Scalar> result = make_output({B, C, Ho, Wo}, std::move(out), "upsample2");
  detail::record(result, "upsample2", {&x},
                 [xi = x.impl(), ty = std::move(ty), tx = std::move(tx), B, C, H, W](const TensorImpl<Scalar>& o) {
                   auto& GX = xi->grad_buffer();
                   const Index Ho = 2 * H, Wo = 2 * W;
                   for (Index p = 0; p < B * C; ++p) {
                     Scalar* gsrc = GX.data() + p * H * W;
                     const Scalar* g = o.grad.data() + p * Ho * Wo;
                     for (Index y = 0; y < Ho; ++y) {
                       const Tap& a = ty[static_cast<std::size_t>(y)];
                       for (Index xw = 0; xw < Wo; ++xw) {
                         const Tap& b = tx[static_cast<std::size_t>(xw)];
                         const Scalar v = g[y * Wo + xw];
                         gsrc[a.i0 * W + b.i0] += v * (1 - a.w1) * (1 - b.w1);
                         gsrc[a.i0 * W + b.i1] += v * (1 - a.w1) * b.w1;
                         gsrc[a.i1 * W + b.i0] += v * a.w1 * (1 - b.w1);
                         gsrc[a.i1 * W + b.i1] += v * a.w1 * b.w1;
                       }
                     }
                   }
                 });
  return result;
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(a, b, BinaryOp::add, "add");
}
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(a, b, BinaryOp::sub, "sub");
}
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(a, b, BinaryOp::mul, "mul");
}
template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(a, b, BinaryOp::div, "div");
}

template <typename Scalar>
Tensor<Scalar> affine(const Tensor<Scalar>& x, Scalar scale, Scalar shift) {
  Tensor<Scalar> result = make_output(x.shape(), Array<Scalar>(x.data() * scale + shift), "affine");
  detail::record(result, "affine", {&x},
                 [xi = x.impl(), scale](const TensorImpl<Scalar>& o) { xi->grad_buffer() += o.grad * scale; });
  return result;
}

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  if (parts.empty()) throw UsageError("concat of an empty list");
  const int rank = parts.front().rank();
  const int a = normalize_axis(axis, rank);
  Shape out_shape = parts.front().shape();
  out_shape[static_cast<std::size_t>(a)] = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw DimensionError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != a && p.dim(i) != parts.front().dim(i)) {
        throw DimensionError("concat: extent mismatch between " + to_string(parts.front().shape()) + " and " +
                             to_string(p.shape()) + " outside axis " + std::to_string(a));
      }
    }
    out_shape[static_cast<std::size_t>(a)] += p.dim(a);
  }
  Index outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  for (int i = a + 1; i < rank; ++i) inner *= out_shape[static_cast<std::size_t>(i)];
  const Index out_row = out_shape[static_cast<std::size_t>(a)] * inner;
  Array<Scalar> out(shape_numel(out_shape));
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const Index row = p.dim(a) * inner;
    for (Index o = 0; o < outer; ++o) out.segment(o * out_row + off, row) = p.data().segment(o * row, row);
    off += row;
  }
  Tensor<Scalar> result = make_output(out_shape, std::move(out), "concat");
  std::vector<std::shared_ptr<TensorImpl<Scalar>>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  detail::record_many(result, "concat", parts,
                      [impls, offsets, outer, out_row](const TensorImpl<Scalar>& o) {
                        for (std::size_t k = 0; k < impls.size(); ++k) {
                          if (!detail::wants_grad(impls[k])) continue;
                          auto& G = impls[k]->grad_buffer();
                          const Index row = impls[k]->data.size() / outer;
                          for (Index oo = 0; oo < outer; ++oo) {
                            G.segment(oo * row, row) += o.grad.segment(oo * out_row + offsets[k], row);
                          }
                        }
                      });
  return result;
}

template <typename Scalar>
Tensor<Scalar> narrow(const Tensor<Scalar>& x, int axis, Index start, Index length) {
  const int a = normalize_axis(axis, x.rank());
  if (start < 0 || length < 1 || start + length > x.dim(a)) {
    throw DimensionError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside extent " + std::to_string(x.dim(a)));
  }
  Index outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= x.dim(i);
  for (int i = a + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const Index in_row = x.dim(a) * inner, row = length * inner, off = start * inner;
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(a)] = length;
  Array<Scalar> out(outer * row);
  for (Index o = 0; o < outer; ++o) out.segment(o * row, row) = x.data().segment(o * in_row + off, row);
  Tensor<Scalar> result = make_output(out_shape, std::move(out), "narrow");
  detail::record(result, "narrow", {&x}, [xi = x.impl(), outer, in_row, row, off](const TensorImpl<Scalar>& o) {
    auto& G = xi->grad_buffer();
    for (Index oo = 0; oo < outer; ++oo) G.segment(oo * in_row + off, row) += o.grad.segment(oo * row, row);
  });
  return result;
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor<Scalar> result = make_output(std::move(shape), Array<Scalar>(x.data()), "reshape");
  detail::record(result, "reshape", {&x}, [xi = x.impl()](const TensorImpl<Scalar>& o) { xi->grad_buffer() += o.grad; });
  return result;
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Tensor<Scalar> result = make_output<Scalar>({1}, Array<Scalar>::Constant(1, x.data().sum()), "sum");
  detail::record(result, "sum", {&x}, [xi = x.impl()](const TensorImpl<Scalar>& o) { xi->grad_buffer() += o.grad(0); });
  return result;
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  if (x.numel() == 0) throw UsageError("mean of an empty tensor");
  const Scalar n = Scalar(x.numel());
  Tensor<Scalar> result = make_output<Scalar>({1}, Array<Scalar>::Constant(1, x.data().sum() / n), "mean");
  detail::record(result, "mean", {&x},
                 [xi = x.impl(), n](const TensorImpl<Scalar>& o) { xi->grad_buffer() += o.grad(0) / n; });
  return result;
}

namespace {

// Reduce [B,C,H,W] either over space (per channel) or over channels (per pixel).
template <typename Scalar>
Tensor<Scalar> reduce4(const Tensor<Scalar>& x, bool over_space, bool take_max, const char* name) {
  require_rank(x.shape(), 4, name);
  const Index B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const auto& X = x.data();
  const Shape out_shape = over_space ? Shape{B, C, 1, 1} : Shape{B, 1, x.dim(2), x.dim(3)};
  Array<Scalar> out(shape_numel(out_shape));
  std::vector<Index> argmax;
  if (take_max) argmax.resize(static_cast<std::size_t>(out.size()));
  if (over_space) {
    for (Index p = 0; p < B * C; ++p) {
      if (take_max) {
        Index best;
        out(p) = X.segment(p * HW, HW).maxCoeff(&best);
        argmax[static_cast<std::size_t>(p)] = p * HW + best;
      } else {
        out(p) = X.segment(p * HW, HW).mean();
      }
    }
  } else {
    for (Index b = 0; b < B; ++b) {
      for (Index s = 0; s < HW; ++s) {
        Scalar acc = take_max ? X(b * C * HW + s) : Scalar(0);
        Index best = b * C * HW + s;
        for (Index c = 0; c < C; ++c) {
          const Index idx = (b * C + c) * HW + s;
          if (take_max) {
            if (X(idx) > acc) {
              acc = X(idx);
              best = idx;
            }
          } else {
            acc += X(idx);
          }
        }
        out(b * HW + s) = take_max ? acc : acc / Scalar(C);
        if (take_max) argmax[static_cast<std::size_t>(b * HW + s)] = best;
      }
    }
  }
  Tensor<Scalar> result = make_output(out_shape, std::move(out), name);
  detail::record(result, name, {&x},
                 [xi = x.impl(), argmax = std::move(argmax), over_space, take_max, B, C, HW](const TensorImpl<Scalar>& o) {
                   auto& GX = xi->grad_buffer();
                   if (take_max) {
                     for (std::size_t i = 0; i < argmax.size(); ++i) GX(argmax[i]) += o.grad(static_cast<Index>(i));
                     return;
                   }
                   if (over_space) {
                     for (Index p = 0; p < B * C; ++p) GX.segment(p * HW, HW) += o.grad(p) / Scalar(HW);
                   } else {
                     for (Index b = 0; b < B; ++b) {
                       for (Index c = 0; c < C; ++c) {
                         GX.segment((b * C + c) * HW, HW) += o.grad.segment(b * HW, HW) / Scalar(C);
                       }
                     }
                   }
                 });
  return result;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  return reduce4(x, true, false, "global_avg_pool");
}
template <typename Scalar>
Tensor<Scalar> global_max_pool(const Tensor<Scalar>& x) {
  return reduce4(x, true, true, "global_max_pool");
}
template <typename Scalar>
Tensor<Scalar> channel_mean(const Tensor<Scalar>& x) {
  return reduce4(x, false, false, "channel_mean");
}
template <typename Scalar>
Tensor<Scalar> channel_max(const Tensor<Scalar>& x) {
  return reduce4(x, false, true, "channel_max");
}

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  require_rank(weight.shape(), 2, "linear weight");
  const Index in = weight.dim(1), out_f = weight.dim(0);
  if (x.dim(-1) != in) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " last axis != weight in-features " +
                         std::to_string(in));
  }
  if (bias.defined() && bias.numel() != out_f) throw DimensionError("linear: bias size mismatch");
  const Index rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Array<Scalar> out(rows * out_f);
  MatMap<Scalar> Y(out.data(), rows, out_f);
  Y.noalias() = ConstMatMap<Scalar>(x.data().data(), rows, in) * ConstMatMap<Scalar>(weight.data().data(), out_f, in).transpose();
  if (bias.defined()) {
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.data().data(), out_f);
  }
  Tensor<Scalar> result = make_output(out_shape, std::move(out), "linear");
  detail::record(result, "linear", {&x, &weight, &bias},
                 [xi = x.impl(), wi = weight.impl(), bi = bias.impl(), rows, in, out_f](const TensorImpl<Scalar>& o) {
                   ConstMatMap<Scalar> G(o.grad.data(), rows, out_f);
                   if (detail::wants_grad(xi)) {
                     MatMap<Scalar>(xi->grad_buffer().data(), rows, in).noalias() +=
                         G * ConstMatMap<Scalar>(wi->data.data(), out_f, in);
                   }
                   if (detail::wants_grad(wi)) {
                     MatMap<Scalar>(wi->grad_buffer().data(), out_f, in).noalias() +=
                         G.transpose() * ConstMatMap<Scalar>(xi->data.data(), rows, in);
                   }
                   if (detail::wants_grad(bi)) bi->grad_buffer().matrix() += G.colwise().sum().transpose();
                 });
  return result;
}

#define MAMBASEG_INSTANTIATE_OPS(S)                                                                        \
  template Tensor<S> conv2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Conv2dOptions&); \
  template Tensor<S> normalize<S>(const Tensor<S>&, NormKind, const Tensor<S>&, const Tensor<S>&, S,       \
                                  RunningStats<S>*, bool);                                                 \
  template Tensor<S> activation<S>(const Tensor<S>&, Activation);                                          \
  template Tensor<S> exp<S>(const Tensor<S>&);                                                             \
  template Tensor<S> softmax<S>(const Tensor<S>&, int);                                                    \
  template Tensor<S> resample<S>(const Tensor<S>&, Resample);                                              \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                                           \
  template Tensor<S> sub<S>(const Tensor<S>&, const Tensor<S>&);                                           \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                                           \
  template Tensor<S> div<S>(const Tensor<S>&, const Tensor<S>&);                                           \
  template Tensor<S> affine<S>(const Tensor<S>&, S, S);                                                    \
  template Tensor<S> concat<S>(const std::vector<Tensor<S>>&, int);                                        \
  template Tensor<S> narrow<S>(const Tensor<S>&, int, Index, Index);                                       \
  template Tensor<S> reshape<S>(const Tensor<S>&, Shape);                                                  \
  template Tensor<S> sum<S>(const Tensor<S>&);                                                             \
  template Tensor<S> mean<S>(const Tensor<S>&);                                                            \
  template Tensor<S> global_avg_pool<S>(const Tensor<S>&);                                                 \
  template Tensor<S> global_max_pool<S>(const Tensor<S>&);                                                 \
  template Tensor<S> channel_mean<S>(const Tensor<S>&);                                                    \
  template Tensor<S> channel_max<S>(const Tensor<S>&);                                                     \
  template Tensor<S> linear<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);

MAMBASEG_INSTANTIATE_OPS(float)
MAMBASEG_INSTANTIATE_OPS(double)

}  // namespace mambaseg
