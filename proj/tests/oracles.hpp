#pragma once

// Independent double-precision reference implementations used as test
// oracles. Nothing here calls the library's kernels.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "floodseg/layers.hpp"
#include "floodseg/metrics.hpp"
#include "floodseg/tensor.hpp"

namespace oracle {

using Vec = std::vector<double>;

struct Dims {
  std::int64_t n = 1, c = 1, h = 1, w = 1;
  std::int64_t count() const { return n * c * h * w; }
};

Vec to_double(const floodseg::Tensor& t);
floodseg::Tensor random_tensor(const floodseg::Shape& shape, floodseg::Rng& rng, float lo = -1.0f, float hi = 1.0f);
double dot(const Vec& a, const Vec& b);

/// Direct sliding-window cross-correlation; weight [cout, cin, k, k]; bias may be empty.
Vec conv2d(const Vec& x, Dims xd, const Vec& weight, std::int64_t cout, std::int64_t k, const Vec& bias,
           const floodseg::ConvParams& p, Dims* out);

/// Stamping definition of the k = s = 2 transposed convolution; weight [cin, cout, 2, 2].
Vec conv_transpose2d(const Vec& x, Dims xd, const Vec& weight, std::int64_t cout, const Vec& bias, Dims* out);

/// Train-mode batch normalisation with biased batch variance.
Vec batchnorm_train(const Vec& x, Dims xd, const Vec& gamma, const Vec& beta, double eps);

double bce(const Vec& logits, const Vec& masks);
double dice(const Vec& probs, const Vec& masks, double eps);
double sigmoid(double z);

struct GradCheck {
  double max_rel_error = 0.0;  // |a - n| / max(|a|, |n|, abs_floor)
  double max_abs_error = 0.0;
  std::size_t components = 0;
  bool pass = true;
  std::string worst;
};

/// Central differences of f at v (step h) against `analytic`. A component
/// passes when |a - n| <= abs_floor or |a - n| / max(|a|, |n|) <= rel_tol.
GradCheck check_gradient(const std::function<double(const Vec&)>& f, const Vec& v, const floodseg::Tensor& analytic,
                         const std::string& label, double h = 1e-3, double rel_tol = 1e-2, double abs_floor = 1e-4);

void merge(GradCheck& into, const GradCheck& part);

/// Per-pixel confusion counts by explicit case analysis.
floodseg::ConfusionMatrix brute_confusion(const std::vector<float>& probs, const std::vector<float>& gt,
                                          float threshold);

struct ClosedForm {
  double accuracy, precision, recall, f1, iou, dice;
};

/// Metric formulas substituted directly from the counts, with the
/// zero-denominator convention; f1 uses the harmonic mean when defined.
ClosedForm closed_form(const floodseg::ConfusionMatrix& cm);

}  // namespace oracle
