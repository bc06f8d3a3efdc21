#include "floodseg/metrics.hpp"

#include <cmath>
#include <cstdio>

#include "floodseg/error.hpp"

namespace floodseg {

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

ConfusionMatrix count(const Tensor& values, const Tensor& masks, auto&& positive) {
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const bool pred = positive(values[i]);
    const bool truth = masks[i] > 0.5f;
    if (pred && truth) {
      ++cm.tp;
    } else if (pred) {
      ++cm.fp;
    } else if (truth) {
      ++cm.fn;
    } else {
      ++cm.tn;
    }
  }
  return cm;
}

double ratio(std::uint64_t num, std::uint64_t den, bool nothing_to_find) {
  if (den == 0) return nothing_to_find ? 1.0 : 0.0;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
  tp += o.tp;
  tn += o.tn;
  fp += o.fp;
  fn += o.fn;
  return *this;
}

ConfusionMatrix confusion(const Tensor& pred_probs, const Tensor& masks, float threshold) {
  check_pair(pred_probs, masks, "confusion");
  return count(pred_probs, masks, [threshold](float p) { return p >= threshold; });
}

ConfusionMatrix confusion_from_logits(const Tensor& logits, const Tensor& masks, float threshold) {
  check_pair(logits, masks, "confusion");
  const Tensor probs = sigmoid(logits);
  return confusion(probs, masks, threshold);
}

MetricsReport compute_metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw DomainError("compute_metrics: empty evaluation (no pixels)");
  const bool empty = cm.tp == 0 && cm.fp == 0 && cm.fn == 0;
  MetricsReport r;
  r.accuracy = static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());
  r.precision = ratio(cm.tp, cm.tp + cm.fp, empty);
  r.recall = ratio(cm.tp, cm.tp + cm.fn, empty);
  r.iou = ratio(cm.tp, cm.tp + cm.fp + cm.fn, empty);
  r.dice = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn, empty);
  // 2PR/(P+R) reduces to 2TP/(2TP+FP+FN); the count form is exact in the
  // degenerate cases where P or R is zero.
  r.f1 = r.dice;
  return r;
}

double f1_from(double precision, double recall) {
  const double denom = precision + recall;
  return denom == 0.0 ? 0.0 : 2.0 * precision * recall / denom;
}

std::string to_json(const MetricsReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "{\n  \"accuracy\": %.6f,\n  \"precision\": %.6f,\n  \"recall\": %.6f,\n  \"f1\": %.6f,\n"
                "  \"iou\": %.6f,\n  \"dice\": %.6f,\n  \"loss\": %.6f\n}\n",
                r.accuracy, r.precision, r.recall, r.f1, r.iou, r.dice, r.loss);
  return buf;
}

std::string_view loss_name(LossKind kind) {
  switch (kind) {
    case LossKind::kBce: return "bce";
    case LossKind::kDice: return "dice";
    case LossKind::kBceDice: return "bce+dice";
  }
  return "?";
}

LossKind parse_loss(std::string_view name) {
  if (name == "bce") return LossKind::kBce;
  if (name == "dice") return LossKind::kDice;
  if (name == "bce+dice") return LossKind::kBceDice;
  throw ConfigError("unknown loss '" + std::string(name) + "'; valid: bce, dice, bce+dice");
}

LossResult bce_loss(const Tensor& logits, const Tensor& masks) {
  check_pair(logits, masks, "bce_loss");
  const double count = static_cast<double>(logits.size());
  LossResult r{0.0, Tensor(logits.shape())};
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    const double y = masks[i];
    total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    r.grad[i] = static_cast<float>((s - y) / count);
  }
  r.value = total / count;
  return r;
}

LossResult dice_loss(const Tensor& probs, const Tensor& masks, double eps) {
  check_pair(probs, masks, "dice_loss");
  double inter = 0.0, sum_p = 0.0, sum_y = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    inter += static_cast<double>(probs[i]) * masks[i];
    sum_p += probs[i];
    sum_y += masks[i];
  }
  const double num = 2.0 * inter + eps;
  const double den = sum_p + sum_y + eps;
  LossResult r{1.0 - num / den, Tensor(probs.shape())};
  // d/dp_i of -(num/den) = -(2 y_i den - num) / den^2
  for (std::size_t i = 0; i < probs.size(); ++i) {
    r.grad[i] = static_cast<float>(-(2.0 * masks[i] * den - num) / (den * den));
  }
  return r;
}

LossResult segmentation_loss(LossKind kind, const Tensor& logits, const Tensor& masks) {
  auto dice_on_logits = [&] {
    const Tensor probs = sigmoid(logits);
    auto d = dice_loss(probs, masks);
    for (std::size_t i = 0; i < probs.size(); ++i) d.grad[i] *= probs[i] * (1.0f - probs[i]);
    return d;
  };
  switch (kind) {
    case LossKind::kBce: return bce_loss(logits, masks);
    case LossKind::kDice: return dice_on_logits();
    case LossKind::kBceDice: {
      auto b = bce_loss(logits, masks);
      auto d = dice_on_logits();
      add_inplace(b.grad, d.grad);
      b.value += d.value;
      return b;
    }
  }
  throw ConfigError("segmentation_loss: unknown loss kind");
}

}  // namespace floodseg
