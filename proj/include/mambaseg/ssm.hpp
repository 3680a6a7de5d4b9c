#pragma once

#include "mambaseg/module.hpp"
#include "mambaseg/tensor.hpp"

#include <array>
#include <vector>

namespace mambaseg {

enum class ScanDirection { row_forward, row_backward, col_forward, col_backward };

inline constexpr std::array<ScanDirection, 4> kScanDirections = {
    ScanDirection::row_forward, ScanDirection::row_backward, ScanDirection::col_forward,
    ScanDirection::col_backward};

const char* to_string(ScanDirection dir);

/// order[p] = row-major spatial index visited at sequence position p.
std::vector<Index> scan_order(ScanDirection dir, Index height, Index width);
/// Inverse permutation of scan_order: spatial index -> sequence position.
std::vector<Index> inverse_scan_order(ScanDirection dir, Index height, Index width);

/// [B,C,H,W] -> [B,H*W,C] in the traversal order of `dir`.
template <typename Scalar>
Tensor<Scalar> sequence_from_map(const Tensor<Scalar>& x, ScanDirection dir);
/// [B,H*W,C] -> [B,C,H,W], undoing sequence_from_map for the same `dir`.
template <typename Scalar>
Tensor<Scalar> map_from_sequence(const Tensor<Scalar>& y, ScanDirection dir, Index height, Index width);

/// The four directional flattenings, in kScanDirections order.
template <typename Scalar>
std::array<Tensor<Scalar>, 4> cross_scan(const Tensor<Scalar>& x);
/// Inverse-rearranges each directional sequence and sums the four maps.
template <typename Scalar>
Tensor<Scalar> cross_merge(const std::array<Tensor<Scalar>, 4>& ys, Index height, Index width);

enum class ScanExecution {
  reference,  // scalar loop per (batch, channel, state, step)
  chunked,    // chunk summaries -> carry propagation -> per-chunk replay, vectorized over state
};

/// Selective scan over a [B,L,E] sequence:
///   h_t = exp(delta_t * A) h_{t-1} + delta_t * B_t * u_t,  h_{-1} = 0
///   y_t = <C_t, h_t> + D * u_t
/// u, delta: [B,L,E]; A: [E,N]; b, c: [B,L,N]; d: [E]. Differentiable in all
/// six inputs. delta is expected positive (callers pass softplus output).
template <typename Scalar>
Tensor<Scalar> selective_scan(const Tensor<Scalar>& u, const Tensor<Scalar>& delta, const Tensor<Scalar>& A,
                              const Tensor<Scalar>& b, const Tensor<Scalar>& c, const Tensor<Scalar>& d,
                              ScanExecution execution = ScanExecution::chunked, Index chunk = 64);

enum class GateActivation { silu, relu };

struct SsmConfig {
  Index state_dim = 16;
  double expand = 1.25;
  GateActivation gate = GateActivation::silu;
  double dt_min = 1e-3;
  double dt_max = 1e-1;
  ScanExecution execution = ScanExecution::chunked;

  Index inner_channels(Index channels) const;
};

/// One direction's scan parameters: a dense projection of the sequence to
/// (delta_raw, B, C), A = -exp(a_log), and the skip coefficient D.
template <typename Scalar>
class DirectionalSsm : public Module<Scalar> {
 public:
  DirectionalSsm(Index channels, const SsmConfig& cfg, InitRng& rng);
  /// seq [B,L,E] -> [B,L,E]
  Tensor<Scalar> forward(const Tensor<Scalar>& seq) const;

  Tensor<Scalar> A() const;
  Tensor<Scalar>& projection_weight() { return *proj_w_; }
  Tensor<Scalar>& projection_bias() { return *proj_b_; }
  Tensor<Scalar>& a_log() { return *a_log_; }
  Tensor<Scalar>& skip() { return *d_; }

 private:
  Index channels_, state_dim_;
  ScanExecution execution_;
  Tensor<Scalar>* proj_w_;
  Tensor<Scalar>* proj_b_;
  Tensor<Scalar>* a_log_;
  Tensor<Scalar>* d_;
};

/// Four-direction selective scan with independent parameters per direction.
template <typename Scalar>
class Ss2d : public Module<Scalar> {
 public:
  Ss2d(Index channels, const SsmConfig& cfg, InitRng& rng);
  Tensor<Scalar> forward(const Tensor<Scalar>& x) const;

  DirectionalSsm<Scalar>& direction(std::size_t k) { return *dirs_[k]; }

 private:
  std::array<std::unique_ptr<DirectionalSsm<Scalar>>, 4> dirs_;
};

}  // namespace mambaseg
