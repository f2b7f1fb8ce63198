#pragma once

// Learnable building blocks shared by the encoder and the heads.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "slnet/autograd.hpp"

namespace slnet {

/// Non-learnable tensor that is still part of the model state (BN running stats).
template <typename T>
struct Buffer {
  std::string name;
  Tensor<T>* value;
};

/// Every learnable and persistent tensor of a module tree, in a stable order.
template <typename T>
struct StateRefs {
  std::vector<Param<T>*> params;
  std::vector<Buffer<T>> buffers;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  /// Weights and bias drawn from U(-1/sqrt(in), 1/sqrt(in)).
  Linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng);

  Var<T> forward(const Var<T>& x, const Context<T>& ctx) const;
  std::size_t in_features() const { return weight.value.dim(0); }
  std::size_t out_features() const { return weight.value.dim(1); }
  void collect(StateRefs<T>& s) {
    s.params.push_back(&weight);
    s.params.push_back(&bias);
  }

  Param<T> weight;  ///< [in x out]
  Param<T> bias;    ///< [out]
};

template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(const std::string& name, std::size_t channels, T momentum = T(0.1), T eps = T(1e-5));

  /// Running statistics are updated only when ctx.training is set.
  Var<T> forward(const Var<T>& x, const Context<T>& ctx) const;
  void collect(StateRefs<T>& s);

  Param<T> gamma;
  Param<T> beta;
  mutable ops::BatchNormState<T> state;

 private:
  std::string name_;
};

/// Residual bottleneck: ReLU(h + W2 ReLU(BN(W1 h))).
template <typename T>
class Lrb {
 public:
  Lrb() = default;
  Lrb(const std::string& name, std::size_t channels, std::size_t hidden, std::mt19937_64& rng, T bn_momentum,
      T bn_eps);

  Var<T> forward(const Var<T>& h, const Context<T>& ctx) const;
  void collect(StateRefs<T>& s);

  Linear<T> w1;
  BatchNorm<T> bn;
  Linear<T> w2;
};

/// Shared linear + BN + ReLU.
template <typename T>
class ConvBnRelu {
 public:
  ConvBnRelu() = default;
  ConvBnRelu(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng, T bn_momentum,
             T bn_eps);

  Var<T> forward(const Var<T>& x, const Context<T>& ctx) const;
  void collect(StateRefs<T>& s);

  Linear<T> lin;
  BatchNorm<T> bn;
};

}  // namespace slnet
