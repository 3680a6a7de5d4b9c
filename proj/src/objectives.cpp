#include "mambaseg/objectives.hpp"

#include "mambaseg/errors.hpp"
#include "mambaseg/ops.hpp"

#include <json.hpp>

#include <cmath>
#include <ostream>

namespace mambaseg {

void LossConfig::validate() const {
  if (!(alpha >= 0 && alpha <= 1 && beta >= 0 && beta <= 1)) throw ConfigError("loss: alpha and beta must lie in [0,1]");
  if (!allow_unnormalized_tversky && std::abs(alpha + beta - 1.0) > 1e-9) {
    throw ConfigError("loss: alpha + beta must equal 1 (set allow_unnormalized_tversky to override)");
  }
  if (!(epsilon > 0)) throw ConfigError("loss: epsilon must be positive");
  if (!(dice_weight >= 0 && tversky_weight >= 0)) throw ConfigError("loss: weights must be non-negative");
}

template <typename Scalar>
void validate_mask_pair(const Tensor<Scalar>& p, const Tensor<Scalar>& y) {
  if (!p.defined() || !y.defined() || p.numel() == 0 || y.numel() == 0) throw UsageError("loss on empty tensors");
  if (p.shape() != y.shape()) {
    throw UsageError("prediction " + to_string(p.shape()) + " and target " + to_string(y.shape()) + " differ in shape");
  }
  if (((y.data() != Scalar(0)) && (y.data() != Scalar(1))).any()) throw UsageError("target mask is not binary");
  if ((p.data() < Scalar(0)).any() || (p.data() > Scalar(1)).any() || !p.data().allFinite()) {
    throw UsageError("predicted probabilities must lie in [0,1]");
  }
}

template <typename Scalar>
Tensor<Scalar> dice_loss(const Tensor<Scalar>& p, const Tensor<Scalar>& y, double epsilon) {
  validate_mask_pair(p, y);
  const Scalar eps = static_cast<Scalar>(epsilon);
  const Tensor<Scalar> inter = sum(p * y);
  const Tensor<Scalar> total = sum(p) + sum(y);
  return Scalar(1) - (Scalar(2) * inter + eps) / (total + eps);
}

template <typename Scalar>
Tensor<Scalar> tversky_loss(const Tensor<Scalar>& p, const Tensor<Scalar>& y, double alpha, double beta,
                            double epsilon) {
  validate_mask_pair(p, y);
  const Scalar eps = static_cast<Scalar>(epsilon);
  const Tensor<Scalar> tp = sum(p * y);
  const Tensor<Scalar> sum_y = sum(y), sum_p = sum(p);
  // sum(y (1-p)) = sum(y) - tp, sum((1-y) p) = sum(p) - tp
  const Tensor<Scalar> fn = sum_y - tp;
  const Tensor<Scalar> fp = sum_p - tp;
  const Tensor<Scalar> denom = tp + static_cast<Scalar>(alpha) * fn + static_cast<Scalar>(beta) * fp;
  return Scalar(1) - (tp + eps) / (denom + eps);
}

template <typename Scalar>
Tensor<Scalar> combined_loss(const Tensor<Scalar>& p, const Tensor<Scalar>& y, const LossConfig& cfg) {
  cfg.validate();
  return static_cast<Scalar>(cfg.dice_weight) * dice_loss(p, y, cfg.epsilon) +
         static_cast<Scalar>(cfg.tversky_weight) * tversky_loss(p, y, cfg.alpha, cfg.beta, cfg.epsilon);
}

template <typename Scalar>
Tensor<Scalar> combined_loss_from_logits(const Tensor<Scalar>& logits, const Tensor<Scalar>& y,
                                         const LossConfig& cfg) {
  return combined_loss(sigmoid(logits), y, cfg);
}

ConfusionCounts confusion_counts(const float* pred, const float* gt, Index n) {
  ConfusionCounts c;
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (Index i = 0; i < n; ++i) {
    const float a = pred[i], b = gt[i];
    if ((a != 0.0f && a != 1.0f) || (b != 0.0f && b != 1.0f)) throw UsageError("confusion_counts: masks must be binary");
    if (a == 1.0f) {
      (b == 1.0f ? tp : fp) += 1;
    } else {
      (b == 1.0f ? fn : tn) += 1;
    }
  }
  c.tp = static_cast<double>(tp);
  c.fp = static_cast<double>(fp);
  c.fn = static_cast<double>(fn);
  c.tn = static_cast<double>(tn);
  return c;
}

ConfusionCounts confusion_counts(const Tensor<float>& pred, const Tensor<float>& gt) {
  if (pred.shape() != gt.shape()) {
    throw UsageError("confusion_counts: shapes " + to_string(pred.shape()) + " and " + to_string(gt.shape()) + " differ");
  }
  return confusion_counts(pred.data().data(), gt.data().data(), pred.numel());
}

double dsc(const ConfusionCounts& c, double epsilon) {
  if (c.tp == 0 && c.fp == 0 && c.fn == 0) return 1.0;
  return 2 * c.tp / (2 * c.tp + c.fp + c.fn + epsilon);
}

double iou(const ConfusionCounts& c, double epsilon) {
  if (c.tp == 0 && c.fp == 0 && c.fn == 0) return 1.0;
  return c.tp / (c.tp + c.fp + c.fn + epsilon);
}

Tensor<float> threshold_logits(const Tensor<float>& logits) {
  return Tensor<float>(logits.shape(), (logits.data() > 0.0f).cast<float>());
}

MetricSummary summarize(std::vector<ImageMetrics> per_image) {
  MetricSummary s;
  s.per_image = std::move(per_image);
  for (const auto& m : s.per_image) {
    s.mean_dsc += m.dsc;
    s.mean_iou += m.iou;
  }
  if (!s.per_image.empty()) {
    s.mean_dsc /= static_cast<double>(s.per_image.size());
    s.mean_iou /= static_cast<double>(s.per_image.size());
  }
  return s;
}

void write_metrics_jsonl(std::ostream& os, const MetricSummary& summary) {
  for (const auto& m : summary.per_image) {
    os << nlohmann::json{{"image_id", m.image_id}, {"dsc", m.dsc}, {"iou", m.iou}}.dump() << '\n';
  }
  os << nlohmann::json{{"summary", true},
                       {"count", summary.per_image.size()},
                       {"mean_dsc", summary.mean_dsc},
                       {"mean_iou", summary.mean_iou}}
            .dump()
     << '\n';
}

#define MAMBASEG_INSTANTIATE_OBJECTIVES(S)                                                                   \
  template void validate_mask_pair<S>(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> dice_loss<S>(const Tensor<S>&, const Tensor<S>&, double);                              \
  template Tensor<S> tversky_loss<S>(const Tensor<S>&, const Tensor<S>&, double, double, double);           \
  template Tensor<S> combined_loss<S>(const Tensor<S>&, const Tensor<S>&, const LossConfig&);               \
  template Tensor<S> combined_loss_from_logits<S>(const Tensor<S>&, const Tensor<S>&, const LossConfig&);

MAMBASEG_INSTANTIATE_OBJECTIVES(float)
MAMBASEG_INSTANTIATE_OBJECTIVES(double)

}  // namespace mambaseg
