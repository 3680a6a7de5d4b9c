#pragma once

#include "mambaseg/module.hpp"

#include <vector>

namespace mambaseg {

struct CbamConfig {
  Index channels = 0;
  Index reduction = 16;
  Index spatial_kernel = 7;

  Index hidden() const { return std::max<Index>(channels / reduction, 1); }
  void validate() const;
};

struct SkConfig {
  Index channels = 0;
  std::vector<Index> branch_dilations{1, 2};
  Index reduction = 16;
  Index min_hidden = 32;  // lower bound on the fusion descriptor width
  Index groups = 32;      // branch conv groups, clamped to gcd(groups, channels)

  Index hidden() const { return std::max(channels / reduction, min_hidden); }
  Index branch_groups() const;
  void validate() const;
};

/// Channel attention (shared MLP over avg- and max-pooled descriptors)
/// followed by spatial attention (k x k conv over channel mean/max maps).
template <typename Scalar>
class Cbam : public Module<Scalar> {
 public:
  Cbam(const CbamConfig& cfg, InitRng& rng);
  Tensor<Scalar> forward(const Tensor<Scalar>& x) const;

  /// sigmoid(MLP(avgpool x) + MLP(maxpool x)), [B,C,1,1]
  Tensor<Scalar> channel_map(const Tensor<Scalar>& x) const;
  /// sigmoid(conv([mean_c x; max_c x])), [B,1,H,W]
  Tensor<Scalar> spatial_map(const Tensor<Scalar>& x) const;

  const CbamConfig& config() const { return cfg_; }
  Conv2d<Scalar>& fc1() { return fc1_; }
  Conv2d<Scalar>& fc2() { return fc2_; }
  Conv2d<Scalar>& spatial() { return spatial_; }

 private:
  CbamConfig cfg_;
  Conv2d<Scalar> fc1_, fc2_, spatial_;
};

/// Gates a skip feature with a single-channel map computed from the skip and
/// a same-resolution gating signal: skip * sigmoid(psi(relu(Wg g + Ws s))).
template <typename Scalar>
class AttentionGate : public Module<Scalar> {
 public:
  AttentionGate(Index skip_channels, Index gate_channels, Index inter_channels, InitRng& rng);
  Tensor<Scalar> forward(const Tensor<Scalar>& skip, const Tensor<Scalar>& gate) const;
  Tensor<Scalar> coefficients(const Tensor<Scalar>& skip, const Tensor<Scalar>& gate) const;

  static Index default_inter_channels(Index skip_channels) { return std::max<Index>(skip_channels / 2, 1); }

  Conv2d<Scalar>& w_gate() { return w_gate_; }
  Conv2d<Scalar>& w_skip() { return w_skip_; }
  Conv2d<Scalar>& psi() { return psi_; }

 private:
  Conv2d<Scalar> w_gate_, w_skip_, psi_;
};

/// Selective-kernel bottleneck: PW conv -> dilated 3x3 branches fused by a
/// per-channel softmax over branches -> PW conv -> + input.
template <typename Scalar>
class SkBottleneck : public Module<Scalar> {
 public:
  SkBottleneck(const SkConfig& cfg, InitRng& rng);
  /// When `weights` is given it receives the per-branch fusion weights, each [B,C,1,1].
  Tensor<Scalar> forward(const Tensor<Scalar>& x, std::vector<Tensor<Scalar>>* weights = nullptr);

  const SkConfig& config() const { return cfg_; }

 private:
  struct Branch {
    std::unique_ptr<Conv2d<Scalar>> conv;
    std::unique_ptr<Norm2d<Scalar>> bn;
    std::unique_ptr<Conv2d<Scalar>> select;  // hidden -> C logits
  };

  SkConfig cfg_;
  Conv2d<Scalar> pw_in_;
  Norm2d<Scalar> bn_in_;
  std::vector<Branch> branches_;
  Conv2d<Scalar> squeeze_;
  Conv2d<Scalar> pw_out_;
  Norm2d<Scalar> bn_out_;
};

}  // namespace mambaseg
