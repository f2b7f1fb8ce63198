#include "slnet/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace slnet {

template <typename T>
Linear<T>::Linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
  if (in == 0 || out == 0) throw std::invalid_argument("linear layer " + name + " needs positive sizes");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<T> w(Shape{in, out});
  for (auto& v : w.values()) v = static_cast<T>(u(rng));
  Tensor<T> b(Shape{out});
  for (auto& v : b.values()) v = static_cast<T>(u(rng));
  weight = Param<T>(name + ".weight", std::move(w));
  bias = Param<T>(name + ".bias", std::move(b));
}

template <typename T>
Var<T> Linear<T>::forward(const Var<T>& x, const Context<T>& ctx) const {
  return ops::linear(x, ctx.param(weight), ctx.param(bias));
}

template <typename T>
BatchNorm<T>::BatchNorm(const std::string& name, std::size_t channels, T momentum, T eps)
    : gamma(name + ".gamma", Tensor<T>(Shape{channels}, T(1))),
      beta(name + ".beta", Tensor<T>(Shape{channels}, T(0))),
      state(channels, momentum, eps),
      name_(name) {}

template <typename T>
Var<T> BatchNorm<T>::forward(const Var<T>& x, const Context<T>& ctx) const {
  return ops::batch_norm(x, ctx.param(gamma), ctx.param(beta), state, ctx.training);
}

template <typename T>
void BatchNorm<T>::collect(StateRefs<T>& s) {
  s.params.push_back(&gamma);
  s.params.push_back(&beta);
  s.buffers.push_back({name_ + ".running_mean", &state.running_mean});
  s.buffers.push_back({name_ + ".running_var", &state.running_var});
}

template <typename T>
Lrb<T>::Lrb(const std::string& name, std::size_t channels, std::size_t hidden, std::mt19937_64& rng, T bn_momentum,
            T bn_eps)
    : w1(name + ".w1", channels, hidden, rng),
      bn(name + ".bn", hidden, bn_momentum, bn_eps),
      w2(name + ".w2", hidden, channels, rng) {}

template <typename T>
Var<T> Lrb<T>::forward(const Var<T>& h, const Context<T>& ctx) const {
  auto branch = w2.forward(ops::relu(bn.forward(w1.forward(h, ctx), ctx)), ctx);
  return ops::relu(ops::add(h, branch));
}

template <typename T>
void Lrb<T>::collect(StateRefs<T>& s) {
  w1.collect(s);
  bn.collect(s);
  w2.collect(s);
}

template <typename T>
ConvBnRelu<T>::ConvBnRelu(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng,
                          T bn_momentum, T bn_eps)
    : lin(name + ".linear", in, out, rng), bn(name + ".bn", out, bn_momentum, bn_eps) {}

template <typename T>
Var<T> ConvBnRelu<T>::forward(const Var<T>& x, const Context<T>& ctx) const {
  return ops::relu(bn.forward(lin.forward(x, ctx), ctx));
}

template <typename T>
void ConvBnRelu<T>::collect(StateRefs<T>& s) {
  lin.collect(s);
  bn.collect(s);
}

template class Linear<float>;
template class Linear<double>;
template class BatchNorm<float>;
template class BatchNorm<double>;
template class Lrb<float>;
template class Lrb<double>;
template class ConvBnRelu<float>;
template class ConvBnRelu<double>;

}  // namespace slnet
