#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <initializer_list>
#include <new>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace maggie {

using Index = Eigen::Index;

/// Raised when an input violates a documented shape or value contract.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace memory {

// Live and peak bytes held by tensor storage. Used by the complexity benchmark.
inline std::atomic<std::size_t>& live_counter() {
  static std::atomic<std::size_t> live{0};
  return live;
}
inline std::atomic<std::size_t>& peak_counter() {
  static std::atomic<std::size_t> peak{0};
  return peak;
}
inline std::size_t live_bytes() { return live_counter().load(); }
inline std::size_t peak_bytes() { return peak_counter().load(); }
inline void reset_peak() { peak_counter().store(live_counter().load()); }

// Storage starts on a cache-line boundary so vectorised reductions, whose
// summation order depends on alignment, give the same result on every run.
inline constexpr std::size_t kAlignment = 64;

template <typename T>
struct TrackedAllocator {
  using value_type = T;
  TrackedAllocator() = default;
  template <typename U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    T* p = static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlignment}));
    const std::size_t now = live_counter().fetch_add(n * sizeof(T)) + n * sizeof(T);
    std::size_t prev = peak_counter().load();
    while (now > prev && !peak_counter().compare_exchange_weak(prev, now)) {
    }
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    live_counter().fetch_sub(n * sizeof(T));
    ::operator delete(p, std::align_val_t{kAlignment});
  }
  template <typename U>
  bool operator==(const TrackedAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace memory

using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (k) out += ",";
    out += std::to_string(s[k]);
  }
  return out + ")";
}

/// Dense row-major tensor of rank <= 4 backed by tracked storage.
///
/// Layout conventions used across the library:
///   feature maps   [T, C, H, W]
///   alpha / masks  [T, N, H, W]
///   row matrices   [rows, cols]
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Storage = std::vector<Scalar, memory::TrackedAllocator<Scalar>>;
  using FlatMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstFlatMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<RowMatrix>;
  using ConstMatMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}
  Tensor(std::initializer_list<Index> shape) : Tensor(Shape(shape)) {}

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int k) const { return shape_.at(static_cast<std::size_t>(k)); }
  Index size() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  FlatMap flat() { return FlatMap(data_.data(), size()); }
  ConstFlatMap flat() const { return ConstFlatMap(data_.data(), size()); }

  // Views the trailing dims as columns: [prod(shape[0:split]), prod(shape[split:])].
  MatMap mat() { return MatMap(data_.data(), rows2d(), cols2d()); }
  ConstMatMap mat() const { return ConstMatMap(data_.data(), rows2d(), cols2d()); }

  Scalar& operator[](Index k) { return data_[static_cast<std::size_t>(k)]; }
  Scalar operator[](Index k) const { return data_[static_cast<std::size_t>(k)]; }

  Scalar& operator()(Index a, Index b) { return data_[static_cast<std::size_t>(a * shape_[1] + b)]; }
  Scalar operator()(Index a, Index b) const { return data_[static_cast<std::size_t>(a * shape_[1] + b)]; }
  Scalar& operator()(Index a, Index b, Index c) { return data_[offset(a, b, c)]; }
  Scalar operator()(Index a, Index b, Index c) const { return data_[offset(a, b, c)]; }
  Scalar& operator()(Index a, Index b, Index c, Index d) { return data_[offset(a, b, c, d)]; }
  Scalar operator()(Index a, Index b, Index c, Index d) const { return data_[offset(a, b, c, d)]; }

  /// Pointer to the contiguous H×W plane (a, b, :, :) of a rank-4 tensor.
  Scalar* plane(Index a, Index b) { return data_.data() + (a * shape_[1] + b) * shape_[2] * shape_[3]; }
  const Scalar* plane(Index a, Index b) const {
    return data_.data() + (a * shape_[1] + b) * shape_[2] * shape_[3];
  }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != size()) throw ValidationError("reshape: element count mismatch " + shape_str(s));
    Tensor out = *this;
    out.shape_ = std::move(s);
    return out;
  }
  void reshape_inplace(Shape s) {
    if (shape_numel(s) != size()) throw ValidationError("reshape: element count mismatch " + shape_str(s));
    shape_ = std::move(s);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    for (Index k = 0; k < size(); ++k) out[k] = static_cast<Other>(data_[static_cast<std::size_t>(k)]);
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  Index rows2d() const { return shape_.empty() ? 1 : shape_[0]; }
  Index cols2d() const { return shape_.empty() ? 1 : shape_numel(Shape(shape_.begin() + 1, shape_.end())); }
  std::size_t offset(Index a, Index b, Index c) const {
    return static_cast<std::size_t>((a * shape_[1] + b) * shape_[2] + c);
  }
  std::size_t offset(Index a, Index b, Index c, Index d) const {
    return static_cast<std::size_t>(((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d);
  }

  Shape shape_;
  Storage data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

}  // namespace maggie
