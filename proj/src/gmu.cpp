#include "slnet/gmu.hpp"

#include <stdexcept>

namespace slnet {

template <typename T>
Gmu<T>::Gmu(const std::string& name, std::size_t channels, GmuOrder order_)
    : alpha(name + ".alpha", Tensor<T>(Shape{channels}, T(1))),
      beta(name + ".beta", Tensor<T>(Shape{channels}, T(0))),
      order(order_) {
  if (channels == 0) throw std::invalid_argument("gmu " + name + " needs at least one channel");
}

template <typename T>
Var<T> Gmu<T>::forward(const Var<T>& x, const Context<T>& ctx) const {
  auto a = ctx.param(alpha);
  auto b = ctx.param(beta);
  if (order == GmuOrder::scale_shift) return ops::channel_shift(ops::channel_scale(x, a), b);
  return ops::channel_scale(ops::channel_shift(x, b), a);
}

template class Gmu<float>;
template class Gmu<double>;

}  // namespace slnet
