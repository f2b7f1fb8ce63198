#include "slnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace slnet {

namespace {

std::vector<std::size_t> all_or(std::span<const std::size_t> entries, std::size_t n) {
  if (!entries.empty()) return {entries.begin(), entries.end()};
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

}  // namespace

Tensor<double> finite_diff_grad(const std::function<double()>& f, Param<double>& param, double h,
                                std::span<const std::size_t> entries) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
  Tensor<double> out(param.value.shape());
  for (std::size_t i : all_or(entries, param.size())) {
    if (i >= param.size()) throw std::out_of_range("finite_diff_grad: entry out of range");
    const double saved = param.value[i];
    param.value[i] = saved + h;
    const double up = f();
    param.value[i] = saved - h;
    const double down = f();
    param.value[i] = saved;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

double max_rel_error(const Tensor<double>& analytic, const Tensor<double>& numeric,
                     std::span<const std::size_t> entries, double floor) {
  if (analytic.shape() != numeric.shape()) throw DimensionError("max_rel_error: shape mismatch");
  double worst = 0.0;
  for (std::size_t i : all_or(entries, analytic.size())) {
    const double a = analytic[i], n = numeric[i];
    worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
  }
  return worst;
}

}  // namespace slnet
