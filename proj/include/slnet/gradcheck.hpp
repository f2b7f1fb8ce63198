#pragma once

// Central-difference gradients for checking the tape against.

#include <cstddef>
#include <functional>
#include <span>

#include "slnet/autograd.hpp"

namespace slnet {

/// (f(p + h e_i) - f(p - h e_i)) / 2h for every listed entry of `param`
/// (all of them when `entries` is empty). Unlisted entries are left at 0 and
/// the parameter value is restored afterwards.
Tensor<double> finite_diff_grad(const std::function<double()>& f, Param<double>& param, double h = 1e-4,
                                std::span<const std::size_t> entries = {});

/// Largest |a - n| / max(|a|, |n|, floor) over the listed entries (all when empty).
double max_rel_error(const Tensor<double>& analytic, const Tensor<double>& numeric,
                     std::span<const std::size_t> entries = {}, double floor = 1e-6);

}  // namespace slnet
