#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <map>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace slnet {

using Shape = std::vector<std::size_t>;

/// Thrown when operand shapes do not conform.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// ---------------------------------------------------------------------------
// Allocation tracking
// ---------------------------------------------------------------------------

/// Bytes held by live tensor buffers and the high-water mark of the current
/// measurement window.
struct AllocStats {
  std::int64_t current_bytes = 0;
  std::int64_t peak_bytes = 0;
};

AllocStats alloc_stats();

/// Starts a new measurement window: peak is set to the current live size.
void reset_alloc_peak();

/// Keeps freed tensor buffers in the heap instead of returning them to the OS.
/// Training reallocates the same activation sizes every step, and on glibc the
/// default mmap/trim thresholds turn that into page faults. No-op elsewhere.
void tune_allocator();

namespace detail {
void note_alloc(std::size_t bytes);
void note_free(std::size_t bytes);
}  // namespace detail

template <typename T>
struct TrackedAllocator {
  using value_type = T;

  TrackedAllocator() = default;
  template <typename U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

  // Cache-line alignment keeps vectorized kernels on the same code path (and
  // so the same rounding) whatever the heap history.
  static constexpr std::align_val_t alignment{64};

  T* allocate(std::size_t n) {
    T* p = static_cast<T*>(::operator new(n * sizeof(T), alignment));
    detail::note_alloc(n * sizeof(T));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    detail::note_free(n * sizeof(T));
    ::operator delete(p, n * sizeof(T), alignment);
  }

  /// Value-less construction default-initializes, so Tensor::uninitialized
  /// can skip the zero fill for buffers that are overwritten anyway.
  template <typename U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <typename U>
  bool operator==(const TrackedAllocator<U>&) const noexcept {
    return true;
  }
};

// ---------------------------------------------------------------------------
// FLOP accounting
// ---------------------------------------------------------------------------

/// Accumulates declared FLOP counts per operation category. Operations report
/// into the counter installed by the innermost FlopScope on this thread.
class FlopCounter {
 public:
  void add(std::string_view category, double flops);
  double total() const { return total_; }
  const std::map<std::string, double, std::less<>>& by_category() const { return by_category_; }

 private:
  double total_ = 0.0;
  std::map<std::string, double, std::less<>> by_category_;
};

class FlopScope {
 public:
  explicit FlopScope(FlopCounter& counter);
  ~FlopScope();
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopCounter* previous_;
};

namespace detail {
void count_flops(std::string_view category, double flops);
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Dense row-major array. Two-dimensional tensors are read as rows x channels
/// throughout the library.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, TrackedAllocator<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{});
  Tensor(Shape shape, std::initializer_list<T> values);
  Tensor(Shape shape, std::span<const T> values);
  /// Contents are indeterminate; every entry must be written before use.
  static Tensor uninitialized(Shape shape);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Leading extent; the remaining extents are flattened into cols().
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const { return rows() == 0 ? 0 : size() / rows(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return {data_.data(), data_.size()}; }
  std::span<const T> values() const { return {data_.data(), data_.size()}; }
  std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  /// Same data under a new shape of equal size.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(T v);
  Tensor& operator+=(const Tensor& other);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  Storage data_;
};

/// True when all entries are finite.
template <typename T>
bool all_finite(const Tensor<T>& t);

template <typename T>
Tensor<T> cast_tensor(const Tensor<float>& t);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace slnet
