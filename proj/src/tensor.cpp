#include "floodseg/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numbers>
#include <sstream>
#include <exception>
#include <thread>

#include "floodseg/error.hpp"

namespace floodseg {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

#ifndef NDEBUG
void debug_check_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericalError(std::string(op) + " produced a non-finite value", op);
}
#else
void debug_check_finite(const Tensor&, const char*) {}
#endif

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, const char* op, F f) {
  check_same_shape(a, b, op);
  Tensor out(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i]);
  return out;
}

void check_nchw(const Tensor& x, const char* op) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + ": expected NCHW tensor, got " + to_string(x.shape()));
}

// Reduction over a subset of axes. Accumulation walks the input buffer once in
// row-major order, so every output element sums its inputs left to right.
enum class ReduceKind { kSum, kMean, kMax };

Tensor reduce(const Tensor& a, const ReduceOptions& opts, ReduceKind kind) {
  const std::size_t rank = a.rank();
  std::vector<bool> reduced(rank, opts.axes.has_value() ? false : true);
  if (opts.axes) {
    for (std::size_t axis : *opts.axes) {
      if (axis >= rank) {
        throw AxisError("reduce: axis " + std::to_string(axis) + " out of range for " + to_string(a.shape()));
      }
      reduced[axis] = true;
    }
  }
  Shape out_shape;
  Shape kept_shape;
  for (std::size_t i = 0; i < rank; ++i) {
    if (reduced[i]) {
      if (opts.keepdims) out_shape.push_back(1);
      kept_shape.push_back(1);
    } else {
      out_shape.push_back(a.dim(i));
      kept_shape.push_back(a.dim(i));
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);

  const std::size_t out_count = element_count(kept_shape);
  std::vector<double> acc(out_count, kind == ReduceKind::kMax ? -std::numeric_limits<double>::infinity() : 0.0);

  std::vector<std::size_t> out_strides(rank, 0);
  {
    std::size_t stride = 1;
    for (std::size_t i = rank; i-- > 0;) {
      if (!reduced[i]) {
        out_strides[i] = stride;
        stride *= static_cast<std::size_t>(a.dim(i));
      }
    }
  }
  std::vector<std::int64_t> idx(rank, 0);
  auto src = a.data();
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < rank; ++i) o += static_cast<std::size_t>(idx[i]) * out_strides[i];
    if (kind == ReduceKind::kMax) {
      acc[o] = std::max(acc[o], static_cast<double>(src[flat]));
    } else {
      acc[o] += src[flat];
    }
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < a.dim(i)) break;
      idx[i] = 0;
    }
  }
  const double per_out = static_cast<double>(src.size()) / static_cast<double>(out_count);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < out_count; ++i) {
    out[i] = static_cast<float>(kind == ReduceKind::kMean ? acc[i] / per_out : acc[i]);
  }
  return out;
}

struct LinearTap {
  std::int64_t i0;
  std::int64_t i1;
  float w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<LinearTap> linear_taps(std::int64_t in, std::int64_t out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(i)] = {i0, i1, static_cast<float>(src - static_cast<double>(i0))};
  }
  return taps;
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("invalid shape: no dimensions");
  for (auto d : shape) {
    if (d < 1) throw ShapeError("invalid shape " + to_string(shape) + ": dimensions must be >= 1");
  }
}

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

// ---------------------------------------------------------------- Rng

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t x = seed;
  for (auto& s : s_) s = splitmix64(x);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

float Rng::uniform() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

float Rng::uniform(float a, float b) { return a + (b - a) * uniform(); }

double Rng::normal() {
  double u1 = 0.0;
  while (u1 <= 0.0) u1 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r >= limit);
  return r % n;
}

Rng Rng::fork(std::uint64_t stream) const {
  std::uint64_t x = seed_ ^ 0xD1B54A32D192ED03ull;
  std::uint64_t mixed = splitmix64(x);
  std::uint64_t y = mixed + stream * 0x9E3779B97F4A7C15ull;
  return Rng(splitmix64(y));
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape, float value) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(element_count(shape_), value);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  validate_shape(shape_);
  if (data_.size() != element_count(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     to_string(shape_));
  }
}

float& Tensor::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
  assert(rank() == 4);
  return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

float Tensor::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
  assert(rank() == 4);
  return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  validate_shape(shape);
  if (element_count(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Tensor create(const Shape& shape, const Fill& init) {
  Tensor out(shape);
  auto d = out.data();
  std::visit(
      [&](const auto& f) {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, fill::Zeros>) {
        } else if constexpr (std::is_same_v<T, fill::Ones>) {
          out.fill(1.0f);
        } else if constexpr (std::is_same_v<T, fill::Constant>) {
          out.fill(f.value);
        } else if constexpr (std::is_same_v<T, fill::HeNormal>) {
          if (f.fan_in < 1) throw ConfigError("he_normal: fan_in must be >= 1");
          const double stddev = std::sqrt(2.0 / static_cast<double>(f.fan_in));
          for (auto& v : d) v = static_cast<float>(f.rng->normal() * stddev);
        } else if constexpr (std::is_same_v<T, fill::Uniform>) {
          for (auto& v : d) v = f.rng->uniform(f.a, f.b);
        }
      },
      init);
  return out;
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  auto out = map_binary(a, b, "add", [](float x, float y) { return x + y; });
  debug_check_finite(out, "add");
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto out = map_binary(a, b, "sub", [](float x, float y) { return x - y; });
  debug_check_finite(out, "sub");
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto out = map_binary(a, b, "mul", [](float x, float y) { return x * y; });
  debug_check_finite(out, "mul");
  return out;
}

Tensor scale(const Tensor& a, float c) {
  auto out = map_unary(a, [c](float x) { return x * c; });
  debug_check_finite(out, "scale");
  return out;
}

Tensor relu(const Tensor& a) {
  return map_unary(a, [](float x) { return x > 0.0f ? x : 0.0f; });
}

Tensor sigmoid(const Tensor& a) {
  return map_unary(a, [](float x) {
    // Evaluate on the side where exp cannot overflow.
    if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
    const float e = std::exp(x);
    return e / (1.0f + e);
  });
}

Tensor exp(const Tensor& a) {
  auto out = map_unary(a, [](float x) { return std::exp(x); });
  debug_check_finite(out, "exp");
  return out;
}

Tensor log(const Tensor& a) {
  for (float v : a.data()) {
    if (!(v > 0.0f)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return map_unary(a, [](float x) { return std::log(x); });
}

void add_inplace(Tensor& acc, const Tensor& b) {
  check_same_shape(acc, b, "add_inplace");
  auto dst = acc.data();
  auto src = b.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Tensor channel_affine(const Tensor& x, std::span<const float> mul, std::span<const float> add) {
  check_nchw(x, "channel_affine");
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if ((!mul.empty() && static_cast<std::int64_t>(mul.size()) != c) ||
      (!add.empty() && static_cast<std::int64_t>(add.size()) != c)) {
    throw ShapeError("channel_affine: per-channel vector length does not match " + to_string(x.shape()));
  }
  Tensor out(x.shape());
  const float* src = x.ptr();
  float* dst = out.ptr();
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const float m = mul.empty() ? 1.0f : mul[static_cast<std::size_t>(ch)];
      const float s = add.empty() ? 0.0f : add[static_cast<std::size_t>(ch)];
      const std::size_t base = static_cast<std::size_t>((b * c + ch) * hw);
      for (std::int64_t i = 0; i < hw; ++i) dst[base + i] = src[base + i] * m + s;
    }
  }
  debug_check_finite(out, "channel_affine");
  return out;
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a, const ReduceOptions& opts) { return reduce(a, opts, ReduceKind::kSum); }
Tensor mean(const Tensor& a, const ReduceOptions& opts) { return reduce(a, opts, ReduceKind::kMean); }
Tensor max(const Tensor& a, const ReduceOptions& opts) { return reduce(a, opts, ReduceKind::kMax); }

// ---------------------------------------------------------------- resampling

Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  check_nchw(x, "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output size must be >= 1");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h == h && out_w == w) return x;
  const auto rows = linear_taps(h, out_h);
  const auto cols = linear_taps(w, out_w);
  Tensor out({n, c, out_h, out_w});
  for (std::int64_t p = 0; p < n * c; ++p) {
    const float* src = x.ptr() + p * h * w;
    float* dst = out.ptr() + p * out_h * out_w;
    for (std::int64_t i = 0; i < out_h; ++i) {
      const auto& r = rows[static_cast<std::size_t>(i)];
      const float* r0 = src + r.i0 * w;
      const float* r1 = src + r.i1 * w;
      for (std::int64_t j = 0; j < out_w; ++j) {
        const auto& q = cols[static_cast<std::size_t>(j)];
        const float top = r0[q.i0] + (r0[q.i1] - r0[q.i0]) * q.w1;
        const float bot = r1[q.i0] + (r1[q.i1] - r1[q.i0]) * q.w1;
        dst[i * out_w + j] = top + (bot - top) * r.w1;
      }
    }
  }
  return out;
}

Tensor bilinear_resize_backward(const Tensor& grad_out, const Shape& in_shape) {
  check_nchw(grad_out, "bilinear_resize_backward");
  if (in_shape.size() != 4 || in_shape[0] != grad_out.dim(0) || in_shape[1] != grad_out.dim(1)) {
    throw ShapeError("bilinear_resize_backward: incompatible shapes " + to_string(grad_out.shape()) + " / " +
                     to_string(in_shape));
  }
  const auto n = in_shape[0], c = in_shape[1], h = in_shape[2], w = in_shape[3];
  const auto out_h = grad_out.dim(2), out_w = grad_out.dim(3);
  if (out_h == h && out_w == w) return grad_out;
  const auto rows = linear_taps(h, out_h);
  const auto cols = linear_taps(w, out_w);
  Tensor grad(in_shape);
  for (std::int64_t p = 0; p < n * c; ++p) {
    const float* g = grad_out.ptr() + p * out_h * out_w;
    float* dst = grad.ptr() + p * h * w;
    for (std::int64_t i = 0; i < out_h; ++i) {
      const auto& r = rows[static_cast<std::size_t>(i)];
      float* r0 = dst + r.i0 * w;
      float* r1 = dst + r.i1 * w;
      for (std::int64_t j = 0; j < out_w; ++j) {
        const auto& q = cols[static_cast<std::size_t>(j)];
        const float v = g[i * out_w + j];
        const float top = v * (1.0f - r.w1);
        const float bot = v * r.w1;
        r0[q.i0] += top * (1.0f - q.w1);
        r0[q.i1] += top * q.w1;
        r1[q.i0] += bot * (1.0f - q.w1);
        r1[q.i1] += bot * q.w1;
      }
    }
  }
  return grad;
}

Tensor nearest_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  check_nchw(x, "nearest_resize");
  if (out_h < 1 || out_w < 1) throw ShapeError("nearest_resize: output size must be >= 1");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto src_index = [](std::int64_t i, std::int64_t in, std::int64_t out) {
    auto s = static_cast<std::int64_t>(std::floor((static_cast<double>(i) + 0.5) * static_cast<double>(in) /
                                                  static_cast<double>(out)));
    return std::clamp<std::int64_t>(s, 0, in - 1);
  };
  std::vector<std::int64_t> rows(static_cast<std::size_t>(out_h)), cols(static_cast<std::size_t>(out_w));
  for (std::int64_t i = 0; i < out_h; ++i) rows[static_cast<std::size_t>(i)] = src_index(i, h, out_h);
  for (std::int64_t j = 0; j < out_w; ++j) cols[static_cast<std::size_t>(j)] = src_index(j, w, out_w);
  Tensor out({n, c, out_h, out_w});
  for (std::int64_t p = 0; p < n * c; ++p) {
    const float* src = x.ptr() + p * h * w;
    float* dst = out.ptr() + p * out_h * out_w;
    for (std::int64_t i = 0; i < out_h; ++i) {
      for (std::int64_t j = 0; j < out_w; ++j) {
        dst[i * out_w + j] = src[rows[static_cast<std::size_t>(i)] * w + cols[static_cast<std::size_t>(j)]];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- threading

std::size_t worker_threads() {
  const char* env = std::getenv("FLOODSEG_THREADS");
  if (env == nullptr) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || v < 1) return 1;
  return static_cast<std::size_t>(v);
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min(worker_threads(), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  pool.reserve(threads);
  const std::size_t block = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * block;
    const std::size_t end = std::min(n, begin + block);
    if (begin >= end) break;
    pool.emplace_back([&fn, &errors, t, begin, end] {
      try {
        for (std::size_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace floodseg
