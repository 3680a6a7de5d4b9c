#pragma once

#include "mambaseg/model.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mambaseg {

/// Counting conventions:
///   conv / linear      2 * MACs (bias adds not counted)
///   norm, activation   1 per output element
///   elementwise ops    1 per output element (gating, residual adds, branch sums)
///   pooling            1 per input element; bilinear upsampling 1 per output element
///   selective scan     kScanFlopsPerStateStep per (step, channel, state) plus 2 per (step, channel) for D*u
inline constexpr std::int64_t kScanFlopsPerStateStep = 8;

struct LayerCost {
  std::string layer;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct Profile {
  std::vector<LayerCost> layers;

  std::int64_t total_params() const;
  std::int64_t total_flops() const;
  /// Sum over layers whose name equals `prefix` or starts with `prefix + "."`.
  LayerCost subtotal(const std::string& prefix) const;
  /// Distinct first name components, in order of appearance.
  std::vector<std::string> top_level() const;
};

/// Analytic per-layer costs for one image of cfg.input_h x cfg.input_w,
/// derived from the configuration alone (no module is constructed).
Profile profile_model(const ModelConfig& cfg);

std::int64_t count_params(const ModelConfig& cfg);
std::int64_t count_flops(const ModelConfig& cfg, Index input_h, Index input_w);

/// Analytic parameter counts of the attention components alone.
std::int64_t cbam_param_count(const CbamConfig& cfg);
std::int64_t attention_gate_param_count(Index skip_channels, Index gate_channels, Index inter_channels);

struct ReportedCost {
  double params;
  double flops;
  bool flops_reproducible;
};

/// Published figures for each variant at 192x256 input.
ReportedCost reported_cost(Variant v);

/// CSV with header layer,params,flops: one row per layer, one "sum:<module>"
/// row per top-level module, a "total" row, then a row labeled
/// "paper-reported:<variant>" carrying the published figures.
void write_profile_csv(std::ostream& os, const Profile& profile, Variant variant);

}  // namespace mambaseg
