#include "slnet/tensor.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <algorithm>
#include <cmath>
#include <sstream>

namespace slnet {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::atomic<std::int64_t> g_current{0};
std::atomic<std::int64_t> g_peak{0};

thread_local FlopCounter* t_flop_counter = nullptr;

}  // namespace

namespace detail {

void note_alloc(std::size_t bytes) {
  const auto now = g_current.fetch_add(static_cast<std::int64_t>(bytes)) +
                   static_cast<std::int64_t>(bytes);
  auto peak = g_peak.load();
  while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
  }
}

void note_free(std::size_t bytes) { g_current.fetch_sub(static_cast<std::int64_t>(bytes)); }

void count_flops(std::string_view category, double flops) {
  if (t_flop_counter) t_flop_counter->add(category, flops);
}

}  // namespace detail

AllocStats alloc_stats() { return {g_current.load(), g_peak.load()}; }

void reset_alloc_peak() { g_peak.store(g_current.load()); }

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

void FlopCounter::add(std::string_view category, double flops) {
  total_ += flops;
  auto it = by_category_.find(category);
  if (it == by_category_.end()) {
    by_category_.emplace(std::string(category), flops);
  } else {
    it->second += flops;
  }
}

FlopScope::FlopScope(FlopCounter& counter) : previous_(t_flop_counter) { t_flop_counter = &counter; }

FlopScope::~FlopScope() { t_flop_counter = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::initializer_list<T> values)
    : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::span<const T> values) : shape_(std::move(shape)) {
  if (shape_size(shape_) != values.size()) {
    throw DimensionError("tensor of shape " + shape_str(shape_) + " cannot hold " +
                         std::to_string(values.size()) + " values");
  }
  data_.assign(values.begin(), values.end());
}

template <typename T>
Tensor<T> Tensor<T>::uninitialized(Shape shape) {
  Tensor t;
  t.data_ = Storage(shape_size(shape));
  t.shape_ = std::move(shape);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  if (shape_size(shape) != size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
Tensor<T>& Tensor<T>::operator+=(const Tensor& other) {
  if (other.size() != size()) {
    throw DimensionError("cannot accumulate " + shape_str(other.shape_) + " into " + shape_str(shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
Tensor<T> cast_tensor(const Tensor<float>& t) {
  Tensor<T> out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<T>(t[i]);
  return out;
}

template class Tensor<float>;
template class Tensor<double>;
template bool all_finite(const Tensor<float>&);
template bool all_finite(const Tensor<double>&);
template Tensor<float> cast_tensor(const Tensor<float>&);
template Tensor<double> cast_tensor(const Tensor<float>&);

}  // namespace slnet
