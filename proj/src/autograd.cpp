#include "slnet/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace slnet {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MatMap<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename Msg>
void require(bool ok, Msg&& what) {
  if (!ok) throw DimensionError(what());
}

void require_matrix(const Shape& s, const char* op) {
  require(s.size() == 2, [&] { return std::string(op) + ": expected a 2-D tensor, got " + shape_str(s); });
}

// Batch-norm kernels over an [n x c] row-major block, kept out of line so the
// per-row channel loops vectorize.
template <typename T>
[[gnu::noinline]] void bn_moments(const T* __restrict x, std::size_t n, std::size_t c, double* __restrict mean,
                                  double* __restrict sq) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* __restrict xr = x + r * c;
    for (std::size_t j = 0; j < c; ++j) mean[j] += static_cast<double>(xr[j]);
  }
  for (std::size_t j = 0; j < c; ++j) mean[j] /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    const T* __restrict xr = x + r * c;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = static_cast<double>(xr[j]) - mean[j];
      sq[j] += d * d;
    }
  }
}

template <typename T>
[[gnu::noinline]] void bn_normalize(const T* __restrict x, std::size_t n, std::size_t c, const T* __restrict mu,
                                    const T* __restrict inv_std, const T* __restrict gamma, const T* __restrict beta,
                                    T* __restrict xhat, T* __restrict y) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* __restrict xr = x + r * c;
    T* __restrict hr = xhat + r * c;
    T* __restrict yr = y + r * c;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xr[j] - mu[j]) * inv_std[j];
      hr[j] = h;
      yr[j] = gamma[j] * h + beta[j];
    }
  }
}

template <typename T>
[[gnu::noinline]] void bn_grad_sums(const T* __restrict dy, const T* __restrict xhat, std::size_t n, std::size_t c,
                                    T* __restrict sum_g, T* __restrict sum_gh) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* __restrict gr = dy + r * c;
    const T* __restrict hr = xhat + r * c;
    for (std::size_t j = 0; j < c; ++j) {
      sum_g[j] += gr[j];
      sum_gh[j] += gr[j] * hr[j];
    }
  }
}

/// dx += a * (dy - m1 - xhat * m2), per channel.
template <typename T>
[[gnu::noinline]] void bn_grad_input(const T* __restrict dy, const T* __restrict xhat, std::size_t n, std::size_t c,
                                     const T* __restrict a, const T* __restrict m1, const T* __restrict m2,
                                     T* __restrict dx) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* __restrict gr = dy + r * c;
    const T* __restrict hr = xhat + r * c;
    T* __restrict out = dx + r * c;
    for (std::size_t j = 0; j < c; ++j) out[j] += a[j] * (gr[j] - m1[j] - hr[j] * m2[j]);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape
// ---------------------------------------------------------------------------

template <typename T>
Var<T> Var<T>::constant(Tensor<T> value) {
  auto node = std::make_shared<detail::Node<T>>();
  node->owned = std::move(value);
  return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::view(const Tensor<T>& value) {
  auto node = std::make_shared<detail::Node<T>>();
  node->external = &value;
  return Var(std::move(node));
}

template <typename T>
const Tensor<T>& Var<T>::value() const {
  if (!node_) throw std::logic_error("value() on an undefined Var");
  return node_->value();
}

template <typename T>
bool Var<T>::requires_grad() const {
  return node_ && node_->tape != nullptr;
}

template <typename T>
Tape<T>* Var<T>::tape() const {
  return node_ ? node_->tape : nullptr;
}

template <typename T>
Var<T> Tape<T>::watch(Param<T>& param) {
  if (auto it = leaves_.find(&param); it != leaves_.end()) return it->second;
  auto node = std::make_shared<detail::Node<T>>();
  node->external = &param.value;
  node->param = &param;
  node->tape = this;
  nodes_.push_back(node);
  Var<T> v(std::move(node));
  leaves_.emplace(&param, v);
  return v;
}

template <typename T>
void Tape<T>::watch_all(std::span<Param<T>* const> params) {
  for (auto* p : params) watch(*p);
}

template <typename T>
Var<T> Tape<T>::bound(const Param<T>& param) const {
  auto it = leaves_.find(&param);
  return it == leaves_.end() ? Var<T>{} : it->second;
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn<T> fn) {
  return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn<T> fn) {
  Tape* tape = nullptr;
  for (const auto& in : inputs) {
    if (!in.requires_grad()) continue;
    if (tape && tape != in.tape()) throw std::logic_error("op inputs recorded on different tapes");
    tape = in.tape();
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->owned = std::move(value);
  if (!tape) return Var<T>(std::move(node));
  node->inputs.reserve(inputs.size());
  for (const auto& in : inputs) node->inputs.push_back(in.node());
  node->backward = std::move(fn);
  node->tape = tape;
  tape->nodes_.push_back(node);
  return Var<T>(std::move(node));
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (loss.value().size() != 1) {
    throw DimensionError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  if (loss.tape() != this) throw std::logic_error("loss was recorded on a different tape");

  for (auto& n : nodes_) n->grad = Tensor<T>();
  loss.node()->grad = Tensor<T>(loss.shape(), T(1));

  std::vector<Tensor<T>*> grad_in;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto& n = **it;
    if (n.grad.empty()) continue;
    if (n.backward) {
      grad_in.assign(n.inputs.size(), nullptr);
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        auto& in = *n.inputs[i];
        if (!in.tape) continue;
        if (in.grad.empty()) in.grad = Tensor<T>(in.value().shape(), T(0));
        grad_in[i] = &in.grad;
      }
      n.backward(n.grad, grad_in);
    }
    if (n.param) n.param->grad += n.grad;
  }
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  leaves_.clear();
}

template <typename T>
Var<T> Context<T>::param(const Param<T>& p) const {
  if (tape) {
    if (auto v = tape->bound(p); v.defined()) return v;
  }
  return Var<T>::view(p.value);
}

template <typename T>
double scalar_value(const Var<T>& v) {
  if (v.value().size() != 1) throw DimensionError("expected a scalar, got " + shape_str(v.shape()));
  return static_cast<double>(v.value()[0]);
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace ops {

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_matrix(av.shape(), "matmul");
  require_matrix(bv.shape(), "matmul");
  const std::size_t n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  require(bv.dim(0) == k, [&] { return std::string("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape())); });

  auto out = Tensor<T>::uninitialized(Shape{n, m});
  as_matrix(out, n, m).noalias() = as_matrix(av, n, k) * as_matrix(bv, k, m);
  detail::count_flops("matmul", 2.0 * n * k * m);

  return Tape<T>::record(std::move(out), {a, b}, [a, b, n, k, m](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
    auto gm = as_matrix(g, n, m);
    if (gi[0]) as_matrix(*gi[0], n, k).noalias() += gm * as_matrix(b.value(), k, m).transpose();
    if (gi[1]) as_matrix(*gi[1], k, m).noalias() += as_matrix(a.value(), n, k).transpose() * gm;
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  require(xv.rank() >= 2, [&] { return std::string("linear: expected rows x features, got " + shape_str(xv.shape())); });
  require_matrix(wv.shape(), "linear");
  const std::size_t in = xv.shape().back(), out_dim = wv.dim(1);
  const std::size_t n = xv.size() / in;
  require(wv.dim(0) == in, [&] { return std::string("linear: input " + shape_str(xv.shape()) + " vs weight " + shape_str(wv.shape())); });
  require(b.value().size() == out_dim, [&] { return std::string("linear: bias " + shape_str(b.shape()) + " vs weight " + shape_str(wv.shape())); });

  Shape out_shape = xv.shape();
  out_shape.back() = out_dim;
  auto out = Tensor<T>::uninitialized(std::move(out_shape));
  auto om = as_matrix(out, n, out_dim);
  om.noalias() = as_matrix(xv, n, in) * as_matrix(wv, in, out_dim);
  om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data(), static_cast<Eigen::Index>(out_dim));
  detail::count_flops("linear", 2.0 * n * in * out_dim);

  return Tape<T>::record(std::move(out), {x, w, b},
                         [x, w, n, in, out_dim](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                           auto gm = as_matrix(g, n, out_dim);
                           if (gi[0]) {
                             as_matrix(*gi[0], n, in).noalias() += gm * as_matrix(w.value(), in, out_dim).transpose();
                           }
                           if (gi[1]) {
                             as_matrix(*gi[1], in, out_dim).noalias() += as_matrix(x.value(), n, in).transpose() * gm;
                           }
                           if (gi[2]) {
                             Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gi[2]->data(), static_cast<Eigen::Index>(out_dim)) +=
                                 gm.colwise().sum();
                           }
                         });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), [&] { return "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()); });
  const auto& av = a.value();
  const auto& bv = b.value();
  auto out = Tensor<T>::uninitialized(av.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
  detail::count_flops("elementwise", static_cast<double>(n));
  return Tape<T>::record(std::move(out), {a, b}, [](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
    if (gi[0]) *gi[0] += g;
    if (gi[1]) *gi[1] += g;
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), [&] { return "sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()); });
  const auto& av = a.value();
  const auto& bv = b.value();
  auto out = Tensor<T>::uninitialized(av.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
  detail::count_flops("elementwise", static_cast<double>(n));
  return Tape<T>::record(std::move(out), {a, b}, [](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
    if (gi[0]) *gi[0] += g;
    if (gi[1]) {
      T* d = gi[1]->data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  detail::count_flops("elementwise", static_cast<double>(out.size()));
  return Tape<T>::record(std::move(out), {a}, [s](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += s * g[i];
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  const auto& xv = x.value();
  auto out = Tensor<T>::uninitialized(xv.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  detail::count_flops("relu", static_cast<double>(n));
  return Tape<T>::record(std::move(out), {x}, [x](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
    const T* xv = x.value().data();
    T* gx = gi[0]->data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xv[i] > T(0) ? g[i] : T(0);
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T total = 0;
  for (auto v : x.value().values()) total += v;
  return Tape<T>::record(Tensor<T>(Shape{1}, {total}), {x},
                         [](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                           for (auto& v : gi[0]->values()) v += g[0];
                         });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const auto n = x.value().size();
  require(n > 0, [&] { return std::string("mean of an empty tensor"); });
  return scale(sum(x), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state, bool training) {
  const auto& xv = x.value();
  require(xv.rank() >= 1 && xv.size() > 0, [&] { return std::string("batch_norm: empty input"); });
  const std::size_t c = xv.shape().back();
  const std::size_t n = xv.size() / c;
  require(gamma.value().size() == c && beta.value().size() == c, [&] { return std::string("batch_norm: " + std::to_string(c) + " channels vs gamma " + shape_str(gamma.shape())); });
  require(state.running_mean.size() == c && state.running_var.size() == c, [&] { return std::string("batch_norm: running statistics size"); });

  std::vector<T> mu(c), inv_std(c);
  if (training) {
    std::vector<double> s1(c, 0.0), s2(c, 0.0);
    bn_moments(xv.data(), n, c, s1.data(), s2.data());
    const T m = state.momentum;
    for (std::size_t j = 0; j < c; ++j) {
      const double var = s2[j] / static_cast<double>(n);
      const double unbiased = n > 1 ? s2[j] / static_cast<double>(n - 1) : var;
      mu[j] = static_cast<T>(s1[j]);
      inv_std[j] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.eps)));
      state.running_mean[j] = (T(1) - m) * state.running_mean[j] + m * static_cast<T>(s1[j]);
      state.running_var[j] = (T(1) - m) * state.running_var[j] + m * static_cast<T>(unbiased);
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mu[j] = state.running_mean[j];
      inv_std[j] = T(1) / std::sqrt(state.running_var[j] + state.eps);
    }
  }

  auto xhat = Tensor<T>::uninitialized(xv.shape());
  auto out = Tensor<T>::uninitialized(xv.shape());
  bn_normalize(xv.data(), n, c, mu.data(), inv_std.data(), gamma.value().data(), beta.value().data(), xhat.data(),
               out.data());
  detail::count_flops("batch_norm", 4.0 * n * c);

  return Tape<T>::record(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), gamma, n, c, training](
          const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        const T* __restrict gp = gamma.value().data();
        const T* __restrict sp = inv_std.data();
        const T* __restrict dy = g.data();
        const T* __restrict hp = xhat.data();
        std::vector<T> sum_g(c, T(0)), sum_gh(c, T(0));
        bn_grad_sums(dy, hp, n, c, sum_g.data(), sum_gh.data());
        if (gi[1]) {
          for (std::size_t j = 0; j < c; ++j) (*gi[1])[j] += sum_gh[j];
        }
        if (gi[2]) {
          for (std::size_t j = 0; j < c; ++j) (*gi[2])[j] += sum_g[j];
        }
        if (!gi[0]) return;
        T* __restrict dx = gi[0]->data();
        // Batch statistics: dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)), dxhat = dy * gamma.
        // Running statistics are constants, leaving dx = dy * gamma * inv_std.
        const T inv_n = training ? T(1) / static_cast<T>(n) : T(0);
        std::vector<T> scale(c), mean_g(c), mean_gh(c);
        for (std::size_t j = 0; j < c; ++j) {
          scale[j] = gp[j] * sp[j];
          mean_g[j] = inv_n * sum_g[j];
          mean_gh[j] = inv_n * sum_gh[j];
        }
        bn_grad_input(dy, hp, n, c, scale.data(), mean_g.data(), mean_gh.data(), dx);
      });
}

template <typename T>
MaxResult<T> max_reduce(const Var<T>& x, std::size_t axis) {
  const auto& shape = x.shape();
  require(axis < shape.size(), [&] { return std::string("max_reduce: axis " + std::to_string(axis) + " out of range for " + shape_str(shape)); });
  const std::size_t k = shape[axis];
  require(k > 0, [&] { return std::string("max_reduce: empty axis"); });
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];

  Shape out_shape;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out_shape.push_back(shape[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);

  const auto& xv = x.value();
  auto out = Tensor<T>::uninitialized(out_shape);
  std::vector<std::size_t> arg(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    const T* base = xv.data() + o * k * inner;
    T* dst = out.data() + o * inner;
    std::size_t* adst = arg.data() + o * inner;
    for (std::size_t i = 0; i < inner; ++i) {
      dst[i] = base[i];
      adst[i] = o * k * inner + i;
    }
    for (std::size_t j = 1; j < k; ++j) {
      const T* row = base + j * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        if (row[i] > dst[i]) {
          dst[i] = row[i];
          adst[i] = o * k * inner + j * inner + i;
        }
      }
    }
  }
  detail::count_flops("max", static_cast<double>(outer) * k * inner);

  Var<T> values = Tape<T>::record(std::move(out), {x}, [arg](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
    auto& gx = *gi[0];
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
  });
  return {std::move(values), std::move(arg)};
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> index) {
  const auto& xv = x.value();
  const std::size_t n = xv.rows(), c = xv.cols();
  auto out = Tensor<T>::uninitialized(Shape{index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) {
      throw std::out_of_range("gather_rows: index " + std::to_string(index[i]) + " >= " + std::to_string(n));
    }
    std::copy_n(xv.data() + index[i] * c, c, out.data() + i * c);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return Tape<T>::record(std::move(out), {x}, [idx = std::move(idx), c](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
    T* gx = gi[0]->data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      T* dst = gx + idx[i] * c;
      const T* src = g.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var<T> gather_diff(const Var<T>& x, std::span<const std::size_t> plus, std::span<const std::size_t> minus, Shape shape,
                   const Var<T>* bias) {
  const auto& xv = x.value();
  const std::size_t n = xv.rows(), c = xv.cols();
  require(plus.size() == minus.size(), [] { return std::string("gather_diff: index lists differ in length"); });
  require(shape_size(shape) == plus.size() * c && !shape.empty() && shape.back() == c,
          [&] { return "gather_diff: output shape " + shape_str(shape) + " for " + std::to_string(plus.size()) + " rows of " + std::to_string(c); });
  require(!bias || bias->value().size() == c, [&] { return "gather_diff: bias " + shape_str(bias->shape()); });
  const std::size_t rows = plus.size();
  auto out = Tensor<T>::uninitialized(std::move(shape));
  const T* b = bias ? bias->value().data() : nullptr;
  for (std::size_t i = 0; i < rows; ++i) {
    if (plus[i] >= n || minus[i] >= n) {
      throw std::out_of_range("gather_diff: index " + std::to_string(std::max(plus[i], minus[i])) + " >= " +
                              std::to_string(n));
    }
    const T* p = xv.data() + plus[i] * c;
    const T* q = xv.data() + minus[i] * c;
    T* y = out.data() + i * c;
    if (b) {
      for (std::size_t j = 0; j < c; ++j) y[j] = p[j] - q[j] + b[j];
    } else {
      for (std::size_t j = 0; j < c; ++j) y[j] = p[j] - q[j];
    }
  }
  detail::count_flops("elementwise", static_cast<double>((b ? 2 : 1) * rows * c));
  std::vector<std::size_t> pi(plus.begin(), plus.end()), mi(minus.begin(), minus.end());
  std::vector<Var<T>> inputs{x};
  if (bias) inputs.push_back(*bias);
  return Tape<T>::record(std::move(out), inputs,
                         [pi = std::move(pi), mi = std::move(mi), c](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                           if (gi[0]) {
                             T* gx = gi[0]->data();
                             for (std::size_t i = 0; i < pi.size(); ++i) {
                               const T* src = g.data() + i * c;
                               T* dp = gx + pi[i] * c;
                               T* dm = gx + mi[i] * c;
                               for (std::size_t j = 0; j < c; ++j) {
                                 dp[j] += src[j];
                                 dm[j] -= src[j];
                               }
                             }
                           }
                           if (gi.size() > 1 && gi[1]) {
                             T* gb = gi[1]->data();
                             for (std::size_t i = 0; i < pi.size(); ++i) {
                               for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                             }
                           }
                         });
}

template <typename T>
Var<T> weighted_gather(const Var<T>& x, std::span<const std::size_t> index, std::span<const T> weights, std::size_t k) {
  require(k > 0 && index.size() % k == 0 && weights.size() == index.size(), [&] { return std::string("weighted_gather: index/weight sizes"); });
  const auto& xv = x.value();
  const std::size_t n_src = xv.rows(), c = xv.cols();
  const std::size_t n = index.size() / k;
  Tensor<T> out(Shape{n, c}, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    T* dst = out.data() + i * c;
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t src_row = index[i * k + j];
      if (src_row >= n_src) {
        throw std::out_of_range("weighted_gather: index " + std::to_string(src_row) + " >= " + std::to_string(n_src));
      }
      const T w = weights[i * k + j];
      const T* src = xv.data() + src_row * c;
      for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += w * src[ch];
    }
  }
  detail::count_flops("interpolate", 2.0 * n * k * c);
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<T> wts(weights.begin(), weights.end());
  return Tape<T>::record(std::move(out), {x},
                         [idx = std::move(idx), wts = std::move(wts), c](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                           auto& gx = *gi[0];
                           const std::size_t k_total = idx.size();
                           const std::size_t per_row = k_total / (g.size() / c);
                           for (std::size_t e = 0; e < k_total; ++e) {
                             const T* src = g.data() + (e / per_row) * c;
                             T* dst = gx.data() + idx[e] * c;
                             for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += wts[e] * src[ch];
                           }
                         });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), [&] { return std::string("concat_cols: no inputs"); });
  const std::size_t n = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.rows() == n, [&] { return std::string("concat_cols: row mismatch " + shape_str(p.shape()) + " vs " + std::to_string(n) + " rows"); });
    widths.push_back(p.cols());
    total += p.cols();
  }
  auto out = Tensor<T>::uninitialized(Shape{n, total});
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = parts[p].value();
    for (std::size_t r = 0; r < n; ++r) std::copy_n(v.data() + r * widths[p], widths[p], out.data() + r * total + offset);
    offset += widths[p];
  }
  return Tape<T>::record(std::move(out), parts,
                         [widths, n, total](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                           std::size_t off = 0;
                           for (std::size_t p = 0; p < widths.size(); ++p) {
                             if (gi[p]) {
                               for (std::size_t r = 0; r < n; ++r) {
                                 const T* src = g.data() + r * total + off;
                                 T* dst = gi[p]->data() + r * widths[p];
                                 for (std::size_t j = 0; j < widths[p]; ++j) dst[j] += src[j];
                               }
                             }
                             off += widths[p];
                           }
                         });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return Tape<T>::record(std::move(out), {x}, [](const Tensor<T>& g, std::span<Tensor<T>* const> gi) { *gi[0] += g; });
}

template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& alpha) {
  const auto& xv = x.value();
  require(xv.rank() >= 1, [] { return std::string("channel_scale: scalar input"); });
  const std::size_t c = xv.shape().back();
  require(alpha.value().size() == c, [&] {
    return "channel_scale: " + std::to_string(c) + " channels vs scale " + shape_str(alpha.shape());
  });
  const std::size_t rows = c ? xv.size() / c : 0;
  const T* av = alpha.value().data();
  auto out = Tensor<T>::uninitialized(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * c;
    T* yr = out.data() + r * c;
    for (std::size_t j = 0; j < c; ++j) yr[j] = xr[j] * av[j];
  }
  detail::count_flops("affine", static_cast<double>(out.size()));
  return Tape<T>::record(std::move(out), {x, alpha},
                         [x, alpha, rows, c](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                           if (gi[0]) {
                             const T* av = alpha.value().data();
                             T* gx = gi[0]->data();
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[r * c + j] * av[j];
                             }
                           }
                           if (gi[1]) {
                             const T* xv = x.value().data();
                             T* ga = gi[1]->data();
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t j = 0; j < c; ++j) ga[j] += g[r * c + j] * xv[r * c + j];
                             }
                           }
                         });
}

template <typename T>
Var<T> channel_shift(const Var<T>& x, const Var<T>& beta) {
  const auto& xv = x.value();
  require(xv.rank() >= 1, [] { return std::string("channel_shift: scalar input"); });
  const std::size_t c = xv.shape().back();
  require(beta.value().size() == c, [&] {
    return "channel_shift: " + std::to_string(c) + " channels vs shift " + shape_str(beta.shape());
  });
  const std::size_t rows = c ? xv.size() / c : 0;
  const T* bv = beta.value().data();
  auto out = Tensor<T>::uninitialized(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * c;
    T* yr = out.data() + r * c;
    for (std::size_t j = 0; j < c; ++j) yr[j] = xr[j] + bv[j];
  }
  detail::count_flops("affine", static_cast<double>(out.size()));
  return Tape<T>::record(std::move(out), {x, beta}, [rows, c](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
    if (gi[0]) *gi[0] += g;
    if (gi[1]) {
      T* gb = gi[1]->data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
      }
    }
  });
}

template <typename T>
Var<T> dropout(const Var<T>& x, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::bernoulli_distribution keep(1.0 - p);
  Tensor<T> mask(x.shape());
  for (auto& m : mask.values()) m = keep(rng) ? keep_scale : T(0);
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return Tape<T>::record(std::move(out), {x}, [mask = std::move(mask)](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * mask[i];
  });
}

#define SLNET_INSTANTIATE_OPS(T)                                                                           \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                     \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                       \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                       \
  template Var<T> scale(const Var<T>&, T);                                                                 \
  template Var<T> relu(const Var<T>&);                                                                     \
  template Var<T> sum(const Var<T>&);                                                                      \
  template Var<T> mean(const Var<T>&);                                                                     \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormState<T>&, bool);       \
  template MaxResult<T> max_reduce(const Var<T>&, std::size_t);                                            \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>);                                \
  template Var<T> gather_diff(const Var<T>&, std::span<const std::size_t>, std::span<const std::size_t>, Shape, \
                              const Var<T>*);                                                              \
  template Var<T> weighted_gather(const Var<T>&, std::span<const std::size_t>, std::span<const T>,         \
                                  std::size_t);                                                            \
  template Var<T> concat_cols(const std::vector<Var<T>>&);                                                 \
  template Var<T> reshape(const Var<T>&, Shape);                                                           \
  template Var<T> channel_scale(const Var<T>&, const Var<T>&);                                             \
  template Var<T> channel_shift(const Var<T>&, const Var<T>&);                                             \
  template Var<T> dropout(const Var<T>&, double, std::mt19937_64&);

SLNET_INSTANTIATE_OPS(float)
SLNET_INSTANTIATE_OPS(double)
#undef SLNET_INSTANTIATE_OPS

}  // namespace ops

template class Var<float>;
template class Var<double>;
template class Tape<float>;
template class Tape<double>;
template struct Context<float>;
template struct Context<double>;
template double scalar_value(const Var<float>&);
template double scalar_value(const Var<double>&);

}  // namespace slnet
