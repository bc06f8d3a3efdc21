#include "floodseg/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "floodseg/error.hpp"

namespace floodseg {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

void require_nchw(const Tensor& t, const char* what) {
  if (t.rank() != 4) throw ShapeError(std::string(what) + ": expected a 4-D NCHW tensor, got " + to_string(t.shape()));
}

struct ConvGeometry {
  std::int64_t cin, h, w, cout, k, ho, wo;
  ConvParams p;

  std::int64_t col_rows() const { return cin * k * k; }
  std::int64_t col_cols() const { return ho * wo; }
  bool pointwise() const { return k == 1 && p.stride == 1 && p.padding == 0; }
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& weight, const ConvParams& p) {
  require_nchw(x, "conv2d input");
  require_nchw(weight, "conv2d weight");
  if (p.stride < 1 || p.dilation < 1 || p.padding < 0) {
    throw ConfigError("conv2d: requires stride >= 1, dilation >= 1, padding >= 0");
  }
  if (weight.dim(2) != weight.dim(3)) throw ShapeError("conv2d: only square kernels are supported");
  if (weight.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) + " input channels, input has " +
                     std::to_string(x.dim(1)));
  }
  ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), 0, 0, p};
  g.ho = conv_output_size(g.h, g.k, p);
  g.wo = conv_output_size(g.w, g.k, p);
  return g;
}

// Output columns [lo, hi) whose input column ow*s - pad + off lies inside [0, w).
std::pair<std::int64_t, std::int64_t> valid_cols(std::int64_t wo, std::int64_t w, std::int64_t s, std::int64_t pad,
                                                 std::int64_t off) {
  const std::int64_t shift = pad - off;  // iw = ow*s - shift
  std::int64_t lo = shift <= 0 ? 0 : (shift + s - 1) / s;
  std::int64_t hi = w + shift <= 0 ? 0 : (w + shift - 1) / s + 1;
  lo = std::min(lo, wo);
  hi = std::clamp(hi, lo, wo);
  return {lo, hi};
}

// col[(c*k + ki)*k + kj, oh*wo + ow] = x[c, oh*s - p + ki*d, ow*s - p + kj*d]
void im2col(const float* x, const ConvGeometry& g, float* col) {
  const auto s = g.p.stride, pad = g.p.padding, d = g.p.dilation;
  for (std::int64_t c = 0; c < g.cin; ++c) {
    const float* plane = x + c * g.h * g.w;
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        float* row = col + ((c * g.k + ki) * g.k + kj) * g.ho * g.wo;
        const auto [lo, hi] = valid_cols(g.wo, g.w, s, pad, kj * d);
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * s - pad + ki * d;
          float* dst = row + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(dst, dst + g.wo, 0.0f);
            continue;
          }
          const float* src = plane + ih * g.w - pad + kj * d;
          std::fill(dst, dst + lo, 0.0f);
          if (s == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::int64_t ow = lo; ow < hi; ++ow) dst[ow] = src[ow * s];
          }
          std::fill(dst + hi, dst + g.wo, 0.0f);
        }
      }
    }
  }
}

void col2im(const float* col, const ConvGeometry& g, float* x) {
  const auto s = g.p.stride, pad = g.p.padding, d = g.p.dilation;
  std::fill(x, x + g.cin * g.h * g.w, 0.0f);
  for (std::int64_t c = 0; c < g.cin; ++c) {
    float* plane = x + c * g.h * g.w;
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        const float* row = col + ((c * g.k + ki) * g.k + kj) * g.ho * g.wo;
        const auto [lo, hi] = valid_cols(g.wo, g.w, s, pad, kj * d);
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * s - pad + ki * d;
          if (ih < 0 || ih >= g.h) continue;
          const float* src = row + oh * g.wo;
          float* dst = plane + ih * g.w - pad + kj * d;
          for (std::int64_t ow = lo; ow < hi; ++ow) dst[ow * s] += src[ow];
        }
      }
    }
  }
}

void check_bias(const Tensor& bias, std::int64_t channels, const char* what) {
  if (bias.empty()) return;
  if (bias.rank() != 1 || bias.dim(0) != channels) {
    throw ShapeError(std::string(what) + ": bias shape " + to_string(bias.shape()) + " does not match " +
                     std::to_string(channels) + " output channels");
  }
}

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased
};

// Eight fixed partial sums per channel keep the reduction order independent
// of the compiler while letting it vectorise.
double lane_sum(const float* p, std::int64_t n, double centre, bool squared) {
  double lanes[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) {
      const double dv = static_cast<double>(p[i + l]) - centre;
      lanes[l] += squared ? dv * dv : dv;
    }
  }
  for (; i < n; ++i) {
    const double dv = static_cast<double>(p[i]) - centre;
    lanes[i % 8] += squared ? dv * dv : dv;
  }
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
}

ChannelStats channel_stats(const Tensor& x) {
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const double count = static_cast<double>(n * hw);
  ChannelStats st{std::vector<double>(static_cast<std::size_t>(c), 0.0),
                  std::vector<double>(static_cast<std::size_t>(c), 0.0)};
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::int64_t b = 0; b < n; ++b) s += lane_sum(x.ptr() + (b * c + ch) * hw, hw, 0.0, false);
    const double m = s / count;
    double v = 0.0;
    for (std::int64_t b = 0; b < n; ++b) v += lane_sum(x.ptr() + (b * c + ch) * hw, hw, m, true);
    st.mean[static_cast<std::size_t>(ch)] = m;
    st.var[static_cast<std::size_t>(ch)] = v / count;
  }
  return st;
}

/// (x - centre[c]) * mul[c] + add[c]; centring first keeps constant channels exact.
Tensor centred_affine(const Tensor& x, const std::vector<float>& centre, const std::vector<float>& mul,
                      const std::vector<float>& add) {
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y(x.shape());
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const auto k = static_cast<std::size_t>(ch);
      const float* src = x.ptr() + (b * c + ch) * hw;
      float* dst = y.ptr() + (b * c + ch) * hw;
      for (std::int64_t i = 0; i < hw; ++i) dst[i] = (src[i] - centre[k]) * mul[k] + add[k];
    }
  return y;
}

void check_bn_params(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  require_nchw(x, "batchnorm2d input");
  const auto c = x.dim(1);
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c)) {
    throw ShapeError("batchnorm2d: gamma/beta length does not match " + std::to_string(c) + " channels");
  }
}

}  // namespace

std::int64_t conv_output_size(std::int64_t in, std::int64_t kernel, const ConvParams& p) {
  const std::int64_t span = in + 2 * p.padding - p.dilation * (kernel - 1) - 1;
  if (span < 0) {
    throw ShapeError("convolution output would be empty (in=" + std::to_string(in) + ", k=" + std::to_string(kernel) +
                     ", p=" + std::to_string(p.padding) + ", d=" + std::to_string(p.dilation) + ")");
  }
  return span / p.stride + 1;
}

// ---------------------------------------------------------------- conv2d

Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvParams& p) {
  const auto g = conv_geometry(x, weight, p);
  check_bias(bias, g.cout, "conv2d");
  const auto n = x.dim(0);
  Tensor out({n, g.cout, g.ho, g.wo});
  ConstMatMap wm(weight.ptr(), g.cout, g.col_rows());
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t b) {
    const float* xb = x.ptr() + static_cast<std::int64_t>(b) * g.cin * g.h * g.w;
    MatMap ob(out.ptr() + static_cast<std::int64_t>(b) * g.cout * g.col_cols(), g.cout, g.col_cols());
    if (g.pointwise()) {
      ob.noalias() = wm * ConstMatMap(xb, g.cin, g.col_cols());
    } else {
      FloatBuffer col(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
      im2col(xb, g, col.data());
      ob.noalias() = wm * ConstMatMap(col.data(), g.col_rows(), g.col_cols());
    }
    if (!bias.empty()) {
      for (std::int64_t o = 0; o < g.cout; ++o) ob.row(o).array() += bias[static_cast<std::size_t>(o)];
    }
  });
  return out;
}

ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& x, const Tensor& weight, bool has_bias,
                          const ConvParams& p) {
  const auto g = conv_geometry(x, weight, p);
  const auto n = x.dim(0);
  if (grad_out.shape() != Shape{n, g.cout, g.ho, g.wo}) {
    throw ShapeError("conv2d_backward: grad_out " + to_string(grad_out.shape()) + " does not match forward output " +
                     to_string(Shape{n, g.cout, g.ho, g.wo}));
  }
  ConvGrads grads{Tensor(x.shape()), Tensor(weight.shape()), has_bias ? Tensor({g.cout}) : Tensor()};
  ConstMatMap wm(weight.ptr(), g.cout, g.col_rows());

  // Data gradient: independent per sample.
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t b) {
    ConstMatMap gb(grad_out.ptr() + static_cast<std::int64_t>(b) * g.cout * g.col_cols(), g.cout, g.col_cols());
    float* gx = grads.x.ptr() + static_cast<std::int64_t>(b) * g.cin * g.h * g.w;
    if (g.pointwise()) {
      MatMap(gx, g.cin, g.col_cols()).noalias() = wm.transpose() * gb;
    } else {
      FloatBuffer col(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
      MatMap(col.data(), g.col_rows(), g.col_cols()).noalias() = wm.transpose() * gb;
      col2im(col.data(), g, gx);
    }
  });

  // Parameter gradients accumulate over the batch in index order.
  MatMap gw(grads.weight.ptr(), g.cout, g.col_rows());
  FloatBuffer col;
  for (std::int64_t b = 0; b < n; ++b) {
    ConstMatMap gb(grad_out.ptr() + b * g.cout * g.col_cols(), g.cout, g.col_cols());
    const float* xb = x.ptr() + b * g.cin * g.h * g.w;
    if (g.pointwise()) {
      gw.noalias() += gb * ConstMatMap(xb, g.cin, g.col_cols()).transpose();
    } else {
      col.resize(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
      im2col(xb, g, col.data());
      gw.noalias() += gb * ConstMatMap(col.data(), g.col_rows(), g.col_cols()).transpose();
    }
    if (has_bias) {
      for (std::int64_t o = 0; o < g.cout; ++o) {
        grads.bias[static_cast<std::size_t>(o)] += gb.row(o).sum();
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------- conv_transpose2d

Tensor conv_transpose2d_forward(const Tensor& x, const Tensor& weight, const Tensor& bias, std::int64_t kernel,
                                std::int64_t stride) {
  if (kernel != 2 || stride != 2) {
    throw ConfigError("conv_transpose2d: only kernel=2, stride=2 is supported (got k=" + std::to_string(kernel) +
                      ", s=" + std::to_string(stride) + ")");
  }
  require_nchw(x, "conv_transpose2d input");
  require_nchw(weight, "conv_transpose2d weight");
  if (weight.dim(0) != x.dim(1) || weight.dim(2) != 2 || weight.dim(3) != 2) {
    throw ShapeError("conv_transpose2d: weight " + to_string(weight.shape()) + " incompatible with input " +
                     to_string(x.shape()));
  }
  const auto n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3), cout = weight.dim(1);
  check_bias(bias, cout, "conv_transpose2d");
  Tensor out({n, cout, 2 * h, 2 * w});
  ConstMatMap wm(weight.ptr(), cin, cout * 4);
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t b) {
    ConstMatMap xb(x.ptr() + static_cast<std::int64_t>(b) * cin * h * w, cin, h * w);
    RowMatrix taps = wm.transpose() * xb;  // (cout*4, h*w)
    float* ob = out.ptr() + static_cast<std::int64_t>(b) * cout * 4 * h * w;
    for (std::int64_t o = 0; o < cout; ++o) {
      const float bo = bias.empty() ? 0.0f : bias[static_cast<std::size_t>(o)];
      float* plane = ob + o * 4 * h * w;
      for (std::int64_t a = 0; a < 2; ++a) {
        for (std::int64_t c = 0; c < 2; ++c) {
          const float* src = taps.data() + (o * 4 + a * 2 + c) * h * w;
          for (std::int64_t i = 0; i < h; ++i) {
            for (std::int64_t j = 0; j < w; ++j) {
              plane[(2 * i + a) * 2 * w + 2 * j + c] = src[i * w + j] + bo;
            }
          }
        }
      }
    }
  });
  return out;
}

ConvGrads conv_transpose2d_backward(const Tensor& grad_out, const Tensor& x, const Tensor& weight, bool has_bias) {
  require_nchw(x, "conv_transpose2d input");
  const auto n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3), cout = weight.dim(1);
  if (grad_out.shape() != Shape{n, cout, 2 * h, 2 * w}) {
    throw ShapeError("conv_transpose2d_backward: grad_out " + to_string(grad_out.shape()) + " does not match");
  }
  ConvGrads grads{Tensor(x.shape()), Tensor(weight.shape()), has_bias ? Tensor({cout}) : Tensor()};
  ConstMatMap wm(weight.ptr(), cin, cout * 4);

  auto gather = [&](std::int64_t b, RowMatrix& taps) {
    taps.resize(cout * 4, h * w);
    const float* gb = grad_out.ptr() + b * cout * 4 * h * w;
    for (std::int64_t o = 0; o < cout; ++o) {
      const float* plane = gb + o * 4 * h * w;
      for (std::int64_t a = 0; a < 2; ++a) {
        for (std::int64_t c = 0; c < 2; ++c) {
          float* dst = taps.data() + (o * 4 + a * 2 + c) * h * w;
          for (std::int64_t i = 0; i < h; ++i) {
            for (std::int64_t j = 0; j < w; ++j) dst[i * w + j] = plane[(2 * i + a) * 2 * w + 2 * j + c];
          }
        }
      }
    }
  };

  parallel_for(static_cast<std::size_t>(n), [&](std::size_t b) {
    RowMatrix taps;
    gather(static_cast<std::int64_t>(b), taps);
    MatMap(grads.x.ptr() + static_cast<std::int64_t>(b) * cin * h * w, cin, h * w).noalias() = wm * taps;
  });

  MatMap gw(grads.weight.ptr(), cin, cout * 4);
  RowMatrix taps;
  for (std::int64_t b = 0; b < n; ++b) {
    gather(b, taps);
    gw.noalias() += ConstMatMap(x.ptr() + b * cin * h * w, cin, h * w) * taps.transpose();
    if (has_bias) {
      for (std::int64_t o = 0; o < cout; ++o) {
        grads.bias[static_cast<std::size_t>(o)] += taps.middleRows(o * 4, 4).sum();
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------- batchnorm2d

Tensor batchnorm2d_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, Mode mode, Tensor& running_mean,
                           Tensor& running_var, const BatchNormConfig& cfg) {
  if (mode == Mode::kEval) return batchnorm2d_infer(x, gamma, beta, running_mean, running_var, cfg);
  check_bn_params(x, gamma, beta);
  const auto c = x.dim(1);
  const std::int64_t count = x.dim(0) * x.dim(2) * x.dim(3);
  if (count == 1) throw ShapeError("batchnorm2d: degenerate batch (N*H*W == 1) in train mode");
  const auto st = channel_stats(x);
  std::vector<float> centre(static_cast<std::size_t>(c)), mul(centre.size()), add(centre.size());
  const double unbias = static_cast<double>(count) / static_cast<double>(count - 1);
  for (std::size_t ch = 0; ch < mul.size(); ++ch) {
    const double invstd = 1.0 / std::sqrt(st.var[ch] + cfg.eps);
    centre[ch] = static_cast<float>(st.mean[ch]);
    mul[ch] = static_cast<float>(gamma[ch] * invstd);
    add[ch] = beta[ch];
    running_mean[ch] = (1.0f - cfg.momentum) * running_mean[ch] + cfg.momentum * static_cast<float>(st.mean[ch]);
    running_var[ch] =
        (1.0f - cfg.momentum) * running_var[ch] + cfg.momentum * static_cast<float>(st.var[ch] * unbias);
  }
  return centred_affine(x, centre, mul, add);
}

Tensor batchnorm2d_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                         const Tensor& running_var, const BatchNormConfig& cfg) {
  check_bn_params(x, gamma, beta);
  const auto c = static_cast<std::size_t>(x.dim(1));
  std::vector<float> centre(c), mul(c), add(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    centre[ch] = running_mean[ch];
    mul[ch] = gamma[ch] / std::sqrt(running_var[ch] + cfg.eps);
    add[ch] = beta[ch];
  }
  return centred_affine(x, centre, mul, add);
}

BatchNormGrads batchnorm2d_backward(const Tensor& grad_out, const Tensor& x, const Tensor& gamma,
                                    const BatchNormConfig& cfg) {
  require_nchw(x, "batchnorm2d input");
  if (grad_out.shape() != x.shape()) throw ShapeError("batchnorm2d_backward: grad_out shape mismatch");
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const double count = static_cast<double>(n * hw);
  const auto st = channel_stats(x);
  BatchNormGrads grads{Tensor(x.shape()), Tensor({c}), Tensor({c})};
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const auto ci = static_cast<std::size_t>(ch);
    const double m = st.mean[ci];
    const double invstd = 1.0 / std::sqrt(st.var[ci] + cfg.eps);
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::int64_t b = 0; b < n; ++b) {
      const float* g = grad_out.ptr() + (b * c + ch) * hw;
      const float* xp = x.ptr() + (b * c + ch) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        sum_g += g[i];
        sum_gx += g[i] * ((xp[i] - m) * invstd);
      }
    }
    grads.beta[ci] = static_cast<float>(sum_g);
    grads.gamma[ci] = static_cast<float>(sum_gx);
    const double k = gamma[ci] * invstd / count;
    for (std::int64_t b = 0; b < n; ++b) {
      const float* g = grad_out.ptr() + (b * c + ch) * hw;
      const float* xp = x.ptr() + (b * c + ch) * hw;
      float* dx = grads.x.ptr() + (b * c + ch) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        const double xhat = (xp[i] - m) * invstd;
        dx[i] = static_cast<float>(k * (count * g[i] - sum_g - xhat * sum_gx));
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------- pooling

namespace {

struct PoolGeometry {
  std::int64_t h, w, ho, wo, k, s, p;
};

PoolGeometry pool_geometry(const Tensor& x, std::int64_t kernel, std::int64_t stride, std::int64_t padding) {
  require_nchw(x, "maxpool2d input");
  const auto h = x.dim(2), w = x.dim(3);
  if (kernel < 1 || stride < 1 || padding < 0 || 2 * padding > kernel) {
    throw ConfigError("maxpool2d: invalid kernel/stride/padding");
  }
  if (h + 2 * padding < kernel || w + 2 * padding < kernel) {
    throw ShapeError("maxpool2d: input " + to_string(x.shape()) + " smaller than kernel");
  }
  const ConvParams p{stride, padding, 1};
  return {h, w, conv_output_size(h, kernel, p), conv_output_size(w, kernel, p), kernel, stride, padding};
}

// Row-major index of the first maximum inside window (i, j); padding excluded.
std::int64_t window_argmax(const float* src, const PoolGeometry& g, std::int64_t i, std::int64_t j) {
  std::int64_t arg = -1;
  for (std::int64_t a = 0; a < g.k; ++a) {
    const std::int64_t r = i * g.s - g.p + a;
    if (r < 0 || r >= g.h) continue;
    for (std::int64_t b = 0; b < g.k; ++b) {
      const std::int64_t c = j * g.s - g.p + b;
      if (c < 0 || c >= g.w) continue;
      const std::int64_t idx = r * g.w + c;
      if (arg < 0 || src[idx] > src[arg]) arg = idx;
    }
  }
  return arg;
}

}  // namespace

Tensor maxpool2d_forward(const Tensor& x, std::int64_t kernel, std::int64_t stride, std::int64_t padding) {
  const auto g = pool_geometry(x, kernel, stride, padding);
  const auto planes = x.dim(0) * x.dim(1);
  Tensor out({x.dim(0), x.dim(1), g.ho, g.wo});
  for (std::int64_t plane = 0; plane < planes; ++plane) {
    const float* src = x.ptr() + plane * g.h * g.w;
    float* dst = out.ptr() + plane * g.ho * g.wo;
    for (std::int64_t i = 0; i < g.ho; ++i) {
      for (std::int64_t j = 0; j < g.wo; ++j) dst[i * g.wo + j] = src[window_argmax(src, g, i, j)];
    }
  }
  return out;
}

Tensor maxpool2d_backward(const Tensor& grad_out, const Tensor& x, std::int64_t kernel, std::int64_t stride,
                          std::int64_t padding) {
  const auto g = pool_geometry(x, kernel, stride, padding);
  const auto planes = x.dim(0) * x.dim(1);
  if (grad_out.shape() != Shape{x.dim(0), x.dim(1), g.ho, g.wo}) {
    throw ShapeError("maxpool2d_backward: grad_out shape mismatch");
  }
  Tensor grad(x.shape());
  for (std::int64_t plane = 0; plane < planes; ++plane) {
    const float* src = x.ptr() + plane * g.h * g.w;
    const float* go = grad_out.ptr() + plane * g.ho * g.wo;
    float* dst = grad.ptr() + plane * g.h * g.w;
    for (std::int64_t i = 0; i < g.ho; ++i) {
      for (std::int64_t j = 0; j < g.wo; ++j) dst[window_argmax(src, g, i, j)] += go[i * g.wo + j];
    }
  }
  return grad;
}

Tensor global_avg_pool_forward(const Tensor& x) {
  require_nchw(x, "global_avg_pool input");
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, c, 1, 1});
  for (std::int64_t plane = 0; plane < n * c; ++plane) {
    const float* src = x.ptr() + plane * hw;
    double s = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) s += src[i];
    out[static_cast<std::size_t>(plane)] = static_cast<float>(s / static_cast<double>(hw));
  }
  return out;
}

Tensor global_avg_pool_backward(const Tensor& grad_out, const Shape& in_shape) {
  if (in_shape.size() != 4 || grad_out.shape() != Shape{in_shape[0], in_shape[1], 1, 1}) {
    throw ShapeError("global_avg_pool_backward: grad_out shape mismatch");
  }
  const auto hw = in_shape[2] * in_shape[3];
  Tensor grad(in_shape);
  const float inv = 1.0f / static_cast<float>(hw);
  for (std::int64_t plane = 0; plane < in_shape[0] * in_shape[1]; ++plane) {
    const float v = grad_out[static_cast<std::size_t>(plane)] * inv;
    std::fill(grad.ptr() + plane * hw, grad.ptr() + (plane + 1) * hw, v);
  }
  return grad;
}

// ---------------------------------------------------------------- channel concat

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_nchw(a, "concat_channels");
  require_nchw(b, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: mismatched N/H/W " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const auto n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor out({n, ca + cb, a.dim(2), a.dim(3)});
  for (std::int64_t i = 0; i < n; ++i) {
    float* dst = out.ptr() + i * (ca + cb) * hw;
    std::copy_n(a.ptr() + i * ca * hw, ca * hw, dst);
    std::copy_n(b.ptr() + i * cb * hw, cb * hw, dst + ca * hw);
  }
  return out;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& x, std::int64_t first_channels) {
  require_nchw(x, "split_channels");
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (first_channels < 1 || first_channels >= c) throw ShapeError("split_channels: split point out of range");
  const auto cb = c - first_channels;
  Tensor a({n, first_channels, x.dim(2), x.dim(3)});
  Tensor b({n, cb, x.dim(2), x.dim(3)});
  for (std::int64_t i = 0; i < n; ++i) {
    const float* src = x.ptr() + i * c * hw;
    std::copy_n(src, first_channels * hw, a.ptr() + i * first_channels * hw);
    std::copy_n(src + first_channels * hw, cb * hw, b.ptr() + i * cb * hw);
  }
  return {std::move(a), std::move(b)};
}

Tensor relu_backward(const Tensor& grad_out, const Tensor& x) {
  if (grad_out.shape() != x.shape()) throw ShapeError("relu_backward: shape mismatch");
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) grad[i] = x[i] > 0.0f ? grad_out[i] : 0.0f;
  return grad;
}

}  // namespace floodseg
