#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "floodseg/tensor.hpp"

namespace floodseg {

/// Pixel-level counts where "positive" means water.
struct ConfusionMatrix {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o);
  bool operator==(const ConfusionMatrix&) const = default;
};

struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double iou = 0.0;
  double dice = 0.0;
  double loss = 0.0;
};

/// pred = prob >= threshold, counted over every pixel of every sample.
ConfusionMatrix confusion(const Tensor& pred_probs, const Tensor& masks, float threshold = 0.5f);
/// Same counts from logits: sigmoid(z) >= threshold.
ConfusionMatrix confusion_from_logits(const Tensor& logits, const Tensor& masks, float threshold = 0.5f);

/// Micro-averaged metrics from one confusion matrix. A ratio whose denominator
/// is zero is 1 when TP = FP = FN = 0 and 0 otherwise. Throws on an empty matrix.
MetricsReport compute_metrics(const ConfusionMatrix& cm);

/// Harmonic mean 2PR/(P+R); 0 when P + R = 0.
double f1_from(double precision, double recall);

/// Keys accuracy, precision, recall, f1, iou, dice, loss with 6-decimal fixed values.
std::string to_json(const MetricsReport& report);

enum class LossKind { kBce, kDice, kBceDice };

std::string_view loss_name(LossKind kind);
LossKind parse_loss(std::string_view name);

struct LossResult {
  double value = 0.0;
  Tensor grad;  // d(loss)/d(logits)
};

/// Mean binary cross-entropy on logits, stable form max(z,0) - z*y + log(1 + e^-|z|).
LossResult bce_loss(const Tensor& logits, const Tensor& masks);

/// Soft Dice on probabilities: 1 - (2 sum(p*y) + eps) / (sum p + sum y + eps),
/// summed over the whole batch. Gradient is with respect to the probabilities.
LossResult dice_loss(const Tensor& probs, const Tensor& masks, double eps = 1.0);

/// Dispatch on LossKind; dice is applied to sigmoid(logits) and chained back to logits.
LossResult segmentation_loss(LossKind kind, const Tensor& logits, const Tensor& masks);

}  // namespace floodseg
