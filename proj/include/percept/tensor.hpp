#pragma once

// Dense row-major tensors, shape algebra, and the deterministic PRNG used for
// every random draw in the library.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "percept/error.hpp"

namespace percept {

// Reductions accumulate in double regardless of the storage type.
using accum_t = double;

class Shape {
 public:
  // A rank-0 shape denotes an empty (default-constructed) tensor.
  Shape() = default;

  Shape(std::initializer_list<std::size_t> dims) : dims_(dims) { validate(); }

  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) { validate(); }

  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  const std::vector<std::size_t>& dims() const noexcept { return dims_; }

  std::size_t size() const noexcept {
    if (dims_.empty()) return 0;
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
  }

  // Same dims with the leading (batch) extent replaced.
  Shape with_batch(std::size_t n) const {
    std::vector<std::size_t> d = dims_;
    require(!d.empty(), ErrorKind::Shape, "with_batch on empty shape");
    d[0] = n;
    return Shape(std::move(d));
  }

  // Dims after the leading extent.
  Shape tail() const {
    if (dims_.size() < 2) fail(ErrorKind::Shape, "tail of rank<2 shape " + str());
    return Shape(std::vector<std::size_t>(dims_.begin() + 1, dims_.end()));
  }

  Shape prepend(std::size_t n) const {
    std::vector<std::size_t> d{n};
    d.insert(d.end(), dims_.begin(), dims_.end());
    return Shape(std::move(d));
  }

  std::string str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(dims_[i]);
    }
    return s + "]";
  }

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  void validate() const {
    std::size_t count = 1;
    for (std::size_t d : dims_) {
      if (d < 1) fail(ErrorKind::Shape, "shape extents must be >= 1, got " + str());
      require(count <= std::numeric_limits<std::size_t>::max() / d, ErrorKind::Shape,
              "shape element count overflows");
      count *= d;
    }
  }

  std::vector<std::size_t> dims_;
};

template <typename T>
class BasicTensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T value = T(0))
      : shape_(std::move(shape)), data_(shape_.size(), value) {
    require(shape_.rank() > 0, ErrorKind::Shape, "tensor needs rank >= 1");
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(shape_.rank() > 0, ErrorKind::Shape, "tensor needs rank >= 1");
    if (data_.size() != shape_.size())
      fail(ErrorKind::Shape, "data length " + std::to_string(data_.size()) + " does not match shape " + shape_.str());
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.rank(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& vec() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  // Row-major element access for rank >= 3; unchecked like the 2-D form.
  template <std::convertible_to<std::size_t>... I>
    requires(sizeof...(I) >= 3)
  T& at(I... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <std::convertible_to<std::size_t>... I>
    requires(sizeof...(I) >= 3)
  const T& at(I... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  BasicTensor reshaped(Shape s) const {
    if (s.size() != size()) fail(ErrorKind::Shape, "cannot reshape " + shape_.str() + " to " + s.str());
    return BasicTensor(std::move(s), data_);
  }

  // Contiguous block of the leading axis [begin, begin + count).
  BasicTensor rows(std::size_t begin, std::size_t count) const {
    require(begin + count <= shape_[0] && count > 0, ErrorKind::Shape, "row range out of bounds");
    const std::size_t stride = size() / shape_[0];
    std::vector<T> out(data_.begin() + begin * stride, data_.begin() + (begin + count) * stride);
    return BasicTensor(shape_.with_batch(count), std::move(out));
  }

  // Gathers leading-axis slices in the order given.
  BasicTensor gather(std::span<const std::size_t> idx) const {
    require(!idx.empty(), ErrorKind::Shape, "gather with no indices");
    const std::size_t stride = size() / shape_[0];
    std::vector<T> out(idx.size() * stride);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      require(idx[i] < shape_[0], ErrorKind::Shape, "gather index out of range");
      std::copy_n(data_.begin() + idx[i] * stride, stride, out.begin() + i * stride);
    }
    return BasicTensor(shape_.with_batch(idx.size()), std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    std::size_t off = 0, axis = 0;
    for (std::size_t i : idx) off = off * shape_[axis++] + i;
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename U, typename T>
BasicTensor<U> tensor_cast(const BasicTensor<T>& t) {
  if (t.empty()) return {};
  std::vector<U> out(t.size());
  std::transform(t.data().begin(), t.data().end(), out.begin(), [](T v) { return static_cast<U>(v); });
  return BasicTensor<U>(t.shape(), std::move(out));
}

template <typename T = float>
BasicTensor<T> tensor_filled(const Shape& shape, T value) {
  return BasicTensor<T>(shape, value);
}

// SplitMix64. The state advances by the golden-ratio increment and each output
// is the standard 64-bit finalizer of the new state.
class Prng {
 public:
  using result_type = std::uint64_t;

  explicit Prng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() noexcept {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t operator()() noexcept { return next_u64(); }
  static constexpr std::uint64_t min() { return 0; }
  static constexpr std::uint64_t max() { return ~std::uint64_t{0}; }

  // 53-bit uniform in [0, 1).
  double next_double() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) {
    require(lo < hi, ErrorKind::Argument, "uniform requires lo < hi");
    return lo + (hi - lo) * next_double();
  }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    require(n > 0, ErrorKind::Argument, "below(0)");
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Box-Muller, one value per call (the second one is discarded).
  double normal() noexcept {
    double u1 = next_double();
    const double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Independent child stream.
  Prng split() noexcept { return Prng(next_u64()); }

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

// Fisher-Yates driven by Prng so shuffles are identical across standard libraries.
template <typename It>
void shuffle(It first, It last, Prng& prng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const std::uint64_t j = prng.below(i);
    std::iter_swap(first + (i - 1), first + j);
  }
}

template <typename T = float>
BasicTensor<T> prng_uniform(Prng& prng, const Shape& shape, double lo, double hi) {
  require(lo < hi, ErrorKind::Argument, "prng_uniform requires lo < hi");
  BasicTensor<T> t(shape);
  const T top = std::nextafter(static_cast<T>(hi), static_cast<T>(lo));
  for (T& v : t.data()) {
    T s = static_cast<T>(lo + (hi - lo) * prng.next_double());
    v = std::min(s, top);
  }
  return t;
}

namespace detail {

// out[m x n] = row_bias[i] or col_bias[j] (or 0) + a[m x k] * b[k x n],
// row-major, double accumulators. Each output element adds its k products in
// increasing k order, so the result does not depend on the blocking below.
// Steps where the whole row block of `a` is zero are skipped.
template <typename T>
void gemm_bias(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n, const T* row_bias,
               const T* col_bias) {
  constexpr std::size_t R = 4, J = 256;
  alignas(64) accum_t acc[R][J];
  for (std::size_t i0 = 0; i0 < m; i0 += R) {
    const std::size_t rn = std::min(R, m - i0);
    for (std::size_t j0 = 0; j0 < n; j0 += J) {
      const std::size_t jn = std::min(J, n - j0);
      for (std::size_t r = 0; r < rn; ++r)
        for (std::size_t j = 0; j < jn; ++j)
          acc[r][j] = row_bias ? static_cast<accum_t>(row_bias[i0 + r])
                               : col_bias ? static_cast<accum_t>(col_bias[j0 + j]) : 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        accum_t av[R] = {0, 0, 0, 0};
        bool any = false;
        for (std::size_t r = 0; r < rn; ++r) {
          av[r] = a[(i0 + r) * k + p];
          any |= av[r] != 0.0;
        }
        if (!any) continue;
        const T* brow = b + p * n + j0;
        if (rn == R) {
          for (std::size_t j = 0; j < jn; ++j) {
            const accum_t bv = brow[j];
            acc[0][j] += av[0] * bv;
            acc[1][j] += av[1] * bv;
            acc[2][j] += av[2] * bv;
            acc[3][j] += av[3] * bv;
          }
        } else {
          for (std::size_t r = 0; r < rn; ++r)
            for (std::size_t j = 0; j < jn; ++j) acc[r][j] += av[r] * static_cast<accum_t>(brow[j]);
        }
      }
      for (std::size_t r = 0; r < rn; ++r)
        for (std::size_t j = 0; j < jn; ++j) out[(i0 + r) * n + j0 + j] = static_cast<T>(acc[r][j]);
    }
  }
}

template <typename T>
void gemm(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
  gemm_bias(a, b, out, m, k, n, static_cast<const T*>(nullptr), static_cast<const T*>(nullptr));
}

template <typename T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

}  // namespace detail

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  require(a.rank() == 2, ErrorKind::Shape, "transpose needs rank 2");
  return BasicTensor<T>(Shape{a.dim(1), a.dim(0)}, detail::transpose(a.data().data(), a.dim(0), a.dim(1)));
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2, ErrorKind::Shape, "matmul needs rank-2 operands");
  require(a.dim(1) == b.dim(0), ErrorKind::Shape,
          "matmul inner dimensions differ: " + a.shape().str() + " x " + b.shape().str());
  BasicTensor<T> out(Shape{a.dim(0), b.dim(1)});
  detail::gemm(a.data().data(), b.data().data(), out.data().data(), a.dim(0), a.dim(1), b.dim(1));
  return out;
}

template <typename T, typename F>
BasicTensor<T> map(const BasicTensor<T>& a, F&& f) {
  BasicTensor<T> out = a;
  for (T& v : out.data()) v = static_cast<T>(f(v));
  return out;
}

template <typename T, typename F>
BasicTensor<T> zip(const BasicTensor<T>& a, const BasicTensor<T>& b, F&& f) {
  require(a.shape() == b.shape(), ErrorKind::Shape,
          "zip shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
  BasicTensor<T> out = a;
  auto bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = static_cast<T>(f(od[i], bd[i]));
  return out;
}

// Index of the maximum; ties go to the lowest index.
template <typename T>
std::size_t argmax(std::span<const T> v) {
  require(!v.empty(), ErrorKind::Argument, "argmax of empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

template <typename T>
std::size_t argmax(const BasicTensor<T>& v) {
  require(v.rank() == 1, ErrorKind::Shape, "argmax expects rank 1");
  return argmax(v.data());
}

}  // namespace percept
