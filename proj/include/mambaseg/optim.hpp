#pragma once

#include "mambaseg/tensor.hpp"

#include <cstdint>
#include <vector>

namespace mambaseg {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Standard bias-corrected Adam without weight decay.
template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<Tensor<Scalar>> params, AdamConfig cfg = {});

  /// One update with learning rate `lr`. Parameters without an accumulated
  /// gradient are treated as having a zero gradient. A parameter whose size
  /// changed since construction throws StateError.
  void step(double lr);
  void zero_grad();

  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<Array<Scalar>>& first_moments() const { return m_; }
  const std::vector<Array<Scalar>>& second_moments() const { return v_; }

 private:
  std::vector<Tensor<Scalar>> params_;
  AdamConfig cfg_;
  std::vector<Array<Scalar>> m_, v_;
  std::int64_t t_ = 0;
};

struct PlateauConfig {
  double initial_lr = 2e-4;
  double factor = 0.5;
  int patience = 10;
  double threshold = 1e-6;  // absolute improvement required on the monitored score
  double min_lr = 0.0;

  void validate() const;
};

/// Multiplies the learning rate by `factor` whenever the monitored score
/// (higher is better) fails to improve by more than `threshold` for
/// `patience` consecutive epochs.
class PlateauScheduler {
 public:
  explicit PlateauScheduler(PlateauConfig cfg);

  /// Consumes one epoch's score and returns the learning rate to use next.
  double step(double score);

  double lr() const { return lr_; }
  double best() const { return best_; }
  int epochs_since_improvement() const { return since_; }
  int reductions() const { return reductions_; }

 private:
  PlateauConfig cfg_;
  double lr_;
  double best_;
  int since_ = 0;
  int reductions_ = 0;
};

}  // namespace mambaseg
