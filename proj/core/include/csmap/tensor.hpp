// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "csmap/error.hpp"

namespace csmap {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string to_string(const Shape& shape);

/// Cache-line aligned allocator. SIMD kernels peel loops differently depending
/// on where a buffer starts, so unaligned heap blocks make float sums depend on
/// malloc's mood. Fixing the alignment keeps results bit-reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array. Image batches inside the network use NCHW; the
/// dataset-facing API uses HWC per sample.
template <typename Scalar>
class Tensor {
 public:
  using value_type = Scalar;
  using Storage = AlignedVector<Scalar>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), values_(element_count(shape_), Scalar{0}) {}
  Tensor(Shape shape, const std::vector<Scalar>& values)
      : Tensor(std::move(shape), Storage(values.begin(), values.end())) {}
  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Storage(values.begin(), values.end())) {}
  Tensor(Shape shape, Storage values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (element_count(shape_) != values_.size()) {
      throw DataError("tensor of shape " + to_string(shape_) + " cannot hold " +
                      std::to_string(values_.size()) + " values");
    }
  }

  static Tensor filled(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    std::fill(t.values_.begin(), t.values_.end(), value);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  Scalar* data() noexcept { return values_.data(); }
  const Scalar* data() const noexcept { return values_.data(); }
  std::span<Scalar> values() noexcept { return values_; }
  std::span<const Scalar> values() const noexcept { return values_; }
  Storage& storage() noexcept { return values_; }
  const Storage& storage() const noexcept { return values_; }
  std::vector<Scalar> to_vector() const { return {values_.begin(), values_.end()}; }

  Scalar& operator[](std::size_t i) noexcept { return values_[i]; }
  const Scalar& operator[](std::size_t i) const noexcept { return values_[i]; }

  void reshape(Shape shape) {
    if (element_count(shape) != values_.size()) {
      throw DataError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    shape_ = std::move(shape);
  }

  void fill(Scalar value) { std::fill(values_.begin(), values_.end(), value); }

  template <typename Other>
  Tensor<Other> cast() const {
    typename Tensor<Other>::Storage out(values_.begin(), values_.end());
    return Tensor<Other>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  Storage values_;
};

/// [N,H,W,C] -> [N,C,H,W]; a rank-3 [H,W,C] input becomes [1,C,H,W].
template <typename Out, typename In>
Tensor<Out> nhwc_to_nchw(const Tensor<In>& x) {
  Shape s = x.shape();
  if (s.size() == 3) s.insert(s.begin(), 1);
  if (s.size() != 4) throw DataError("expected [N,H,W,C] or [H,W,C], got " + to_string(x.shape()));
  const std::size_t n = s[0], h = s[1], w = s[2], c = s[3];
  Tensor<Out> y({n, c, h, w});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t k = 0; k < c; ++k)
          y[((b * c + k) * h + i) * w + j] = static_cast<Out>(x[((b * h + i) * w + j) * c + k]);
  return y;
}

template <typename Out, typename In>
Tensor<Out> nchw_to_nhwc(const Tensor<In>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DataError("expected [N,C,H,W], got " + to_string(s));
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  Tensor<Out> y({n, h, w, c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
          y[((b * h + i) * w + j) * c + k] = static_cast<Out>(x[((b * c + k) * h + i) * w + j]);
  return y;
}

}  // namespace csmap
