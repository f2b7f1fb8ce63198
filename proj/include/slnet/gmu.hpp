#pragma once

#include <string>

#include "slnet/layers.hpp"

namespace slnet {

/// scale_shift: alpha * x + beta.  shift_scale: alpha * (x + beta).
enum class GmuOrder { scale_shift, shift_scale };

/// Geometric modulation unit: a per-channel affine with 2 * channels scalars,
/// initialized to the identity.
template <typename T>
class Gmu {
 public:
  Gmu() = default;
  Gmu(const std::string& name, std::size_t channels, GmuOrder order = GmuOrder::scale_shift);

  /// Channels are the last axis of x.
  Var<T> forward(const Var<T>& x, const Context<T>& ctx) const;
  std::size_t channels() const { return alpha.size(); }
  void collect(StateRefs<T>& s) {
    s.params.push_back(&alpha);
    s.params.push_back(&beta);
  }

  Param<T> alpha;
  Param<T> beta;
  GmuOrder order = GmuOrder::scale_shift;
};

}  // namespace slnet
