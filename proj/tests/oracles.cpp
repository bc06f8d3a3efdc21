#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace oracle {

using floodseg::ConfusionMatrix;
using floodseg::Tensor;

Vec to_double(const Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

Tensor random_tensor(const floodseg::Shape& shape, floodseg::Rng& rng, float lo, float hi) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Vec conv2d(const Vec& x, Dims xd, const Vec& weight, std::int64_t cout, std::int64_t k, const Vec& bias,
           const floodseg::ConvParams& p, Dims* out) {
  const std::int64_t ho = (xd.h + 2 * p.padding - p.dilation * (k - 1) - 1) / p.stride + 1;
  const std::int64_t wo = (xd.w + 2 * p.padding - p.dilation * (k - 1) - 1) / p.stride + 1;
  *out = {xd.n, cout, ho, wo};
  Vec y(static_cast<std::size_t>(out->count()), 0.0);
  for (std::int64_t n = 0; n < xd.n; ++n)
    for (std::int64_t co = 0; co < cout; ++co)
      for (std::int64_t i = 0; i < ho; ++i)
        for (std::int64_t j = 0; j < wo; ++j) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
          for (std::int64_t ci = 0; ci < xd.c; ++ci)
            for (std::int64_t a = 0; a < k; ++a)
              for (std::int64_t b = 0; b < k; ++b) {
                const std::int64_t r = i * p.stride - p.padding + a * p.dilation;
                const std::int64_t c = j * p.stride - p.padding + b * p.dilation;
                if (r < 0 || r >= xd.h || c < 0 || c >= xd.w) continue;
                acc += weight[static_cast<std::size_t>(((co * xd.c + ci) * k + a) * k + b)] *
                       x[static_cast<std::size_t>(((n * xd.c + ci) * xd.h + r) * xd.w + c)];
              }
          y[static_cast<std::size_t>(((n * cout + co) * ho + i) * wo + j)] = acc;
        }
  return y;
}

Vec conv_transpose2d(const Vec& x, Dims xd, const Vec& weight, std::int64_t cout, const Vec& bias, Dims* out) {
  *out = {xd.n, cout, 2 * xd.h, 2 * xd.w};
  Vec y(static_cast<std::size_t>(out->count()), 0.0);
  for (std::int64_t n = 0; n < xd.n; ++n)
    for (std::int64_t co = 0; co < cout; ++co)
      for (std::int64_t i = 0; i < out->h; ++i)
        for (std::int64_t j = 0; j < out->w; ++j) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
          for (std::int64_t ci = 0; ci < xd.c; ++ci) {
            acc += x[static_cast<std::size_t>(((n * xd.c + ci) * xd.h + i / 2) * xd.w + j / 2)] *
                   weight[static_cast<std::size_t>(((ci * cout + co) * 2 + i % 2) * 2 + j % 2)];
          }
          y[static_cast<std::size_t>(((n * cout + co) * out->h + i) * out->w + j)] = acc;
        }
  return y;
}

Vec batchnorm_train(const Vec& x, Dims xd, const Vec& gamma, const Vec& beta, double eps) {
  Vec y(x.size());
  const double m = static_cast<double>(xd.n * xd.h * xd.w);
  for (std::int64_t c = 0; c < xd.c; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::int64_t n = 0; n < xd.n; ++n)
      for (std::int64_t i = 0; i < xd.h * xd.w; ++i) mean += x[static_cast<std::size_t>((n * xd.c + c) * xd.h * xd.w + i)];
    mean /= m;
    for (std::int64_t n = 0; n < xd.n; ++n)
      for (std::int64_t i = 0; i < xd.h * xd.w; ++i) {
        const double d = x[static_cast<std::size_t>((n * xd.c + c) * xd.h * xd.w + i)] - mean;
        var += d * d;
      }
    var /= m;
    for (std::int64_t n = 0; n < xd.n; ++n)
      for (std::int64_t i = 0; i < xd.h * xd.w; ++i) {
        const auto idx = static_cast<std::size_t>((n * xd.c + c) * xd.h * xd.w + i);
        y[idx] = gamma[static_cast<std::size_t>(c)] * (x[idx] - mean) / std::sqrt(var + eps) +
                 beta[static_cast<std::size_t>(c)];
      }
  }
  return y;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double bce(const Vec& logits, const Vec& masks) {
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = sigmoid(logits[i]);
    s += -(masks[i] * std::log(p) + (1.0 - masks[i]) * std::log(1.0 - p));
  }
  return s / static_cast<double>(logits.size());
}

double dice(const Vec& probs, const Vec& masks, double eps) {
  double inter = 0.0, sp = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    inter += probs[i] * masks[i];
    sp += probs[i];
    sy += masks[i];
  }
  return 1.0 - (2.0 * inter + eps) / (sp + sy + eps);
}

GradCheck check_gradient(const std::function<double(const Vec&)>& f, const Vec& v, const Tensor& analytic,
                         const std::string& label, double h, double rel_tol, double abs_floor) {
  GradCheck r;
  Vec probe = v;
  for (std::size_t i = 0; i < v.size(); ++i) {
    probe[i] = v[i] + h;
    const double up = f(probe);
    probe[i] = v[i] - h;
    const double down = f(probe);
    probe[i] = v[i];
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic[i];
    const double abs_err = std::abs(a - numeric);
    r.max_abs_error = std::max(r.max_abs_error, abs_err);
    ++r.components;
    const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), abs_floor});
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s[%zu]: analytic %.6g numeric %.6g", label.c_str(), i, a, numeric);
      r.worst = buf;
    }
    if (abs_err > abs_floor && rel > rel_tol) r.pass = false;
  }
  return r;
}

void merge(GradCheck& into, const GradCheck& part) {
  if (part.max_rel_error > into.max_rel_error) {
    into.max_rel_error = part.max_rel_error;
    into.worst = part.worst;
  }
  into.max_abs_error = std::max(into.max_abs_error, part.max_abs_error);
  into.components += part.components;
  into.pass = into.pass && part.pass;
}

ConfusionMatrix brute_confusion(const std::vector<float>& probs, const std::vector<float>& gt, float threshold) {
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool predicted_water = !(probs[i] < threshold);
    const bool is_water = gt[i] == 1.0f;
    if (predicted_water && is_water) {
      ++cm.tp;
    } else if (predicted_water && !is_water) {
      ++cm.fp;
    } else if (!predicted_water && is_water) {
      ++cm.fn;
    } else {
      ++cm.tn;
    }
  }
  return cm;
}

ClosedForm closed_form(const ConfusionMatrix& cm) {
  const double tp = static_cast<double>(cm.tp), tn = static_cast<double>(cm.tn);
  const double fp = static_cast<double>(cm.fp), fn = static_cast<double>(cm.fn);
  const double fallback = (cm.tp == 0 && cm.fp == 0 && cm.fn == 0) ? 1.0 : 0.0;
  ClosedForm c{};
  c.accuracy = (tp + tn) / (tp + tn + fp + fn);
  c.precision = tp + fp > 0 ? tp / (tp + fp) : fallback;
  c.recall = tp + fn > 0 ? tp / (tp + fn) : fallback;
  c.iou = tp + fp + fn > 0 ? tp / (tp + fp + fn) : fallback;
  c.dice = 2 * tp + fp + fn > 0 ? 2 * tp / (2 * tp + fp + fn) : fallback;
  if (c.precision + c.recall > 0 && tp + fp > 0 && tp + fn > 0) {
    c.f1 = 2 * c.precision * c.recall / (c.precision + c.recall);
  } else {
    c.f1 = c.dice;
  }
  return c;
}

}  // namespace oracle
