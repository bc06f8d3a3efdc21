#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace floodseg {

using Shape = std::vector<std::int64_t>;

std::string to_string(const Shape& shape);

/// Throws ShapeError unless the shape is non-empty with every dimension >= 1.
void validate_shape(const Shape& shape);

std::size_t element_count(const Shape& shape);

/// xoshiro256** seeded through splitmix64. Draw sequences depend only on the
/// seed, never on the platform's <random> implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 24 bits of resolution.
  float uniform();
  float uniform(float a, float b);
  /// Standard normal via Box-Muller on 53-bit uniforms.
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  /// Independent child stream, a pure function of (seed, stream).
  Rng fork(std::uint64_t stream) const;

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

/// Allocator with a fixed alignment, so vectorised kernels see the same
/// pointer alignment on every run.
template <typename T, std::size_t Align>
struct AlignedAllocator {
  using value_type = T;
  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{Align})); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{Align}); }
  template <typename U>
  bool operator==(const AlignedAllocator<U, Align>&) const noexcept {
    return true;
  }
};

inline constexpr std::size_t kBufferAlignment = 64;
using FloatBuffer = std::vector<float, AlignedAllocator<float, kBufferAlignment>>;

/// Dense float32 tensor, row-major. 4-D tensors are NCHW.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float value = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  float* ptr() noexcept { return data_.data(); }
  const float* ptr() const noexcept { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w);
  float at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const;

  /// Same buffer, new shape; element counts must agree.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(float value);
  bool all_finite() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  FloatBuffer data_;
};

namespace fill {
struct Zeros {};
struct Ones {};
struct Constant {
  float value;
};
/// Normal(0, sqrt(2 / fan_in)).
struct HeNormal {
  std::int64_t fan_in;
  Rng* rng;
};
struct Uniform {
  float a;
  float b;
  Rng* rng;
};
}  // namespace fill

using Fill = std::variant<fill::Zeros, fill::Ones, fill::Constant, fill::HeNormal, fill::Uniform>;

Tensor create(const Shape& shape, const Fill& init);

// Elementwise. Binary ops require equal shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
/// Throws DomainError on any non-positive element.
Tensor log(const Tensor& a);

void add_inplace(Tensor& acc, const Tensor& b);

/// Per-channel broadcast over NCHW: out[n,c,h,w] = x[n,c,h,w] * mul[c] + add[c].
/// Either vector may be empty (identity for that part).
Tensor channel_affine(const Tensor& x, std::span<const float> mul, std::span<const float> add);

struct ReduceOptions {
  std::optional<std::vector<std::size_t>> axes;  // nullopt = all axes
  bool keepdims = false;
};

Tensor sum(const Tensor& a, const ReduceOptions& opts = {});
Tensor mean(const Tensor& a, const ReduceOptions& opts = {});
Tensor max(const Tensor& a, const ReduceOptions& opts = {});

/// Half-pixel-centre bilinear resampling of an NCHW tensor. Source coordinates
/// are clamped to the valid range, so constants are preserved exactly and
/// out == in is the identity.
Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w);
/// Adjoint of bilinear_resize; `in_shape` is the forward input shape.
Tensor bilinear_resize_backward(const Tensor& grad_out, const Shape& in_shape);
/// Nearest-neighbour resampling: source index floor((i + 0.5) * in / out).
Tensor nearest_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

/// Worker count from FLOODSEG_THREADS; 1 when unset or invalid.
std::size_t worker_threads();
/// Runs fn(i) for i in [0, n). Work is split into fixed contiguous blocks so
/// every index is handled by exactly the same code path for any thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace floodseg
