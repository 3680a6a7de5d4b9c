#pragma once

#include "mambaseg/tensor.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace mambaseg {

struct LossConfig {
  double alpha = 0.3;  // Tversky false-negative weight
  double beta = 0.7;   // Tversky false-positive weight
  double epsilon = 1e-6;
  double dice_weight = 0.5;
  double tversky_weight = 0.5;
  /// Permits alpha + beta != 1.
  bool allow_unnormalized_tversky = false;

  void validate() const;
};

/// Throws UsageError unless p and y are non-empty, equally shaped, y is
/// binary and p lies in [0, 1].
template <typename Scalar>
void validate_mask_pair(const Tensor<Scalar>& p, const Tensor<Scalar>& y);

/// 1 - (2 sum(y p) + eps) / (sum(y + p) + eps), differentiable in p.
template <typename Scalar>
Tensor<Scalar> dice_loss(const Tensor<Scalar>& p, const Tensor<Scalar>& y, double epsilon = 1e-6);

/// 1 - (sum(y p) + eps) / (sum(y p) + alpha sum(y (1-p)) + beta sum((1-y) p) + eps).
/// The numerator carries no factor 2, so alpha = beta = 0.5 reduces to Dice.
template <typename Scalar>
Tensor<Scalar> tversky_loss(const Tensor<Scalar>& p, const Tensor<Scalar>& y, double alpha, double beta,
                            double epsilon = 1e-6);

template <typename Scalar>
Tensor<Scalar> combined_loss(const Tensor<Scalar>& p, const Tensor<Scalar>& y, const LossConfig& cfg);

/// combined_loss(sigmoid(logits), y).
template <typename Scalar>
Tensor<Scalar> combined_loss_from_logits(const Tensor<Scalar>& logits, const Tensor<Scalar>& y,
                                         const LossConfig& cfg);

struct ConfusionCounts {
  double tp = 0, fp = 0, fn = 0, tn = 0;
  double total() const { return tp + fp + fn + tn; }
};

/// Exact counts over two binary tensors of equal shape. Non-binary values
/// throw UsageError.
ConfusionCounts confusion_counts(const Tensor<float>& pred, const Tensor<float>& gt);
ConfusionCounts confusion_counts(const float* pred, const float* gt, Index n);

/// 2TP / (2TP + FP + FN + eps). When TP = FP = FN = 0 both masks are empty
/// and the score is 1.
double dsc(const ConfusionCounts& c, double epsilon = 1e-6);
/// TP / (TP + FP + FN + eps), same empty convention.
double iou(const ConfusionCounts& c, double epsilon = 1e-6);

/// sigmoid(logits) > 0.5, i.e. logits > 0, as a {0,1} tensor.
Tensor<float> threshold_logits(const Tensor<float>& logits);

struct ImageMetrics {
  std::string image_id;
  double dsc = 0;
  double iou = 0;
};

struct MetricSummary {
  std::vector<ImageMetrics> per_image;
  double mean_dsc = 0;
  double mean_iou = 0;
};

/// Averages per-image scores.
MetricSummary summarize(std::vector<ImageMetrics> per_image);

/// One JSON object per image, then {"summary": true, "count", "mean_dsc", "mean_iou"}.
void write_metrics_jsonl(std::ostream& os, const MetricSummary& summary);

}  // namespace mambaseg
