#pragma once

#include "mambaseg/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace mambaseg {

struct GradCheckOptions {
  double step = 1e-6;             // central-difference half step
  bool fourth_order = false;      // five-point stencil instead of the two-point one
  double tolerance = 1e-4;        // on |analytic - numeric| / max(|numeric|, floor)
  double floor = 1e-8;
  // floor is raised to relative_floor * RMS(analytic) over the whole check.
  double relative_floor = 1e-3;
  Index max_coords_per_input = 12;  // sampled coordinates per checked tensor
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  Index coordinates = 0;
  double tolerance = 0;
  std::string worst;  // "<input>[<flat index>] analytic=.. numeric=.."

  bool passed() const { return max_rel_error <= tolerance; }
};

/// Compares reverse-mode gradients of the scalar `loss()` with respect to
/// each tensor in `inputs` against central differences. Every call of
/// `loss` must rebuild the graph from the current input values.
GradCheckResult check_gradients(const std::string& name, const std::function<Tensor<double>()>& loss,
                                std::vector<Tensor<double>> inputs, const std::vector<std::string>& input_names,
                                const GradCheckOptions& opt = {});

/// sum(out * R) for a fixed pseudo-random R drawn from `seed`; projects a
/// tensor-valued block onto a scalar with a generic cotangent.
Tensor<double> random_projection(const Tensor<double>& out, std::uint64_t seed);

/// Names accepted by run_gradcheck_suite: conv, norms, resample, activations,
/// selective_scan, ss2d, cbam, attention_gate, sk_bottleneck, res_vss_block,
/// model, dice_loss, tversky_loss, combined_loss.
std::vector<std::string> gradcheck_suite_names();

/// Runs the named check ("all" for every one). Unknown names throw UsageError.
std::vector<GradCheckResult> run_gradcheck_suite(const std::string& which = "all");

}  // namespace mambaseg
