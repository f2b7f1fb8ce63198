#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "slnet/tensor.hpp"

namespace slnet {

/// A learnable tensor with its gradient accumulator.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string name_, Tensor<T> value_)
      : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

  std::size_t size() const { return value.size(); }
  void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct Node;

}  // namespace detail

/// Handle to a value produced by an operation. Copies share the same node.
template <typename T>
class Var {
 public:
  Var() = default;

  /// A constant that owns its value.
  static Var constant(Tensor<T> value);
  /// A constant that refers to a tensor owned elsewhere; the referent must
  /// outlive every use of the returned Var.
  static Var view(const Tensor<T>& value);

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
  bool defined() const { return node_ != nullptr; }
  Tape<T>* tape() const;

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  friend class Tape<T>;
  explicit Var(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node<T>> node_;
};

/// Gradient of one op with respect to each input. grad_in[i] is null when
/// input i does not require a gradient; otherwise the op accumulates into it.
template <typename T>
using BackwardFn = std::function<void(const Tensor<T>& grad_out, std::span<Tensor<T>* const> grad_in)>;

namespace detail {

template <typename T>
struct Node {
  Tensor<T> owned;
  const Tensor<T>* external = nullptr;
  Tensor<T> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn<T> backward;
  Param<T>* param = nullptr;
  Tape<T>* tape = nullptr;

  const Tensor<T>& value() const { return external ? *external : owned; }
};

}  // namespace detail

/// Records differentiable operations in execution order and replays them in
/// reverse to accumulate parameter gradients.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf for a parameter; repeated calls for the same Param return the same leaf.
  Var<T> watch(Param<T>& param);
  void watch_all(std::span<Param<T>* const> params);
  /// The leaf bound to `param`, or an undefined Var.
  Var<T> bound(const Param<T>& param) const;

  /// Output of an op whose inputs may require gradients. When none of them do,
  /// the result is an untracked constant and `fn` is dropped.
  static Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn<T> fn);
  static Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn<T> fn);

  /// Accumulates d(loss)/d(param) into every watched Param reachable from
  /// `loss`. Intermediate gradients are recomputed from scratch on each call.
  void backward(const Var<T>& loss);

  std::size_t size() const { return nodes_.size(); }
  void clear();

 private:
  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
  std::unordered_map<const Param<T>*, Var<T>> leaves_;
};

/// Per-call forward state: the tape (absent for inference), the train/eval
/// switch, and the random source used by stochastic layers.
template <typename T>
struct Context {
  Tape<T>* tape = nullptr;
  bool training = false;
  std::mt19937_64* rng = nullptr;

  /// The tape leaf for `p` when it is watched, otherwise a non-owning constant.
  Var<T> param(const Param<T>& p) const;
};

/// The single entry of a scalar-shaped Var.
template <typename T>
double scalar_value(const Var<T>& v);

// ---------------------------------------------------------------------------
// Differentiable operations
// ---------------------------------------------------------------------------

namespace ops {

/// [n x k] . [k x m]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

/// x . w + b applied along the last axis: x [... x in], w [in x out], b [out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& a, T s);

/// Elementwise max(0, x); the subgradient at 0 is 0.
template <typename T>
Var<T> relu(const Var<T>& x);

/// Sum of all entries, as a [1] tensor.
template <typename T>
Var<T> sum(const Var<T>& x);

template <typename T>
Var<T> mean(const Var<T>& x);

/// Running statistics of a batch-norm layer.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels, T momentum_ = T(0.1), T eps_ = T(1e-5))
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)), momentum(momentum_), eps(eps_) {}
};

/// Normalizes each channel (last axis) over all other axes. In training mode batch statistics
/// are used and the running statistics updated (unbiased variance); in eval
/// mode the running statistics are used and nothing is written.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state,
                  bool training);

template <typename T>
struct MaxResult {
  Var<T> values;
  std::vector<std::size_t> argmax;  ///< flat offsets into the input
};

/// Maximum along `axis`; ties resolve to the first index and the gradient is
/// routed only to the selected entries.
template <typename T>
MaxResult<T> max_reduce(const Var<T>& x, std::size_t axis);

/// Rows of x [n x c] selected by `index`.
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> index);

/// out[i] = x[plus[i]] - x[minus[i]] (+ bias), laid out as `shape`.
template <typename T>
Var<T> gather_diff(const Var<T>& x, std::span<const std::size_t> plus, std::span<const std::size_t> minus, Shape shape,
                   const Var<T>* bias = nullptr);

/// out[i] = sum_j weights[i*k + j] * x[index[i*k + j]] for fixed weights.
template <typename T>
Var<T> weighted_gather(const Var<T>& x, std::span<const std::size_t> index, std::span<const T> weights,
                       std::size_t k);

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts);

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);

/// x * alpha per channel (last axis).
template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& alpha);

/// x + beta per channel (last axis).
template <typename T>
Var<T> channel_shift(const Var<T>& x, const Var<T>& beta);

/// Inverted dropout with keep probability 1-p; identity when p == 0.
template <typename T>
Var<T> dropout(const Var<T>& x, double p, std::mt19937_64& rng);

}  // namespace ops

extern template class Var<float>;
extern template class Var<double>;
extern template class Tape<float>;
extern template class Tape<double>;
extern template struct Context<float>;
extern template struct Context<double>;

}  // namespace slnet
