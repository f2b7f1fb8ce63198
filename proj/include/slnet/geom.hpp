#pragma once

// Parameter-free geometry on flat N x 3 coordinate buffers: sampling,
// neighbor search, relative grouping and inverse-distance interpolation.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "slnet/autograd.hpp"

namespace slnet {

/// K neighbors for each of m query points. Row i of `neighbors`/`sq_dists`
/// holds entries [i*k, (i+1)*k), sorted by distance then index.
struct NeighborIndex {
  std::vector<std::size_t> centers;  ///< query indices into the searched cloud (empty for free queries)
  std::vector<std::size_t> neighbors;
  std::vector<double> sq_dists;
  std::size_t k = 0;

  std::size_t size() const { return k ? neighbors.size() / k : 0; }
};

template <typename T>
std::size_t point_count(std::span<const T> coords);

/// Greedy farthest-point sampling. The seed is the point farthest from the
/// centroid; every tie resolves to the lowest index.
template <typename T>
std::vector<std::size_t> fps(std::span<const T> coords, std::size_t m);

/// m distinct indices in [0, n) from a seeded partial Fisher-Yates shuffle.
std::vector<std::size_t> random_sample(std::size_t n, std::size_t m, std::uint64_t seed);

/// K nearest points of `ref` for every point of `query`. When ref has fewer
/// than K points the nearest one is repeated.
template <typename T>
NeighborIndex knn(std::span<const T> query, std::span<const T> ref, std::size_t k);

/// knn of coords[centers] against coords, with `centers` recorded.
template <typename T>
NeighborIndex group_neighbors(std::span<const T> coords, std::span<const std::size_t> centers, std::size_t k);

/// Rows of a flat N x 3 buffer.
template <typename T>
std::vector<T> gather_points(std::span<const T> coords, std::span<const std::size_t> index);

/// [f_ij || x_ij] - [f_i || x_i] for every (center, neighbor) pair, shape m x K x (C+3).
template <typename T>
Tensor<T> relative_group(const Tensor<T>& feats, std::span<const T> coords, const NeighborIndex& nbr);

/// Differentiable in `feats`.
template <typename T>
Var<T> relative_group(const Var<T>& feats, std::span<const T> coords, const NeighborIndex& nbr);

/// Fixed interpolation stencil: out[i] = sum_j weights[i*k+j] * in[index[i*k+j]].
struct IdwStencil {
  std::vector<std::size_t> index;
  std::vector<double> weights;
  std::size_t k = 0;
};

/// Normalized weights 1/(d^power + eps) over the min(k, M) nearest coarse points.
template <typename T>
IdwStencil idw_stencil(std::span<const T> coarse, std::span<const T> fine, std::size_t k = 3, double power = 2.0,
                       double eps = 1e-8);

template <typename T>
Tensor<T> idw_interpolate(std::span<const T> coarse, const Tensor<T>& coarse_feats, std::span<const T> fine,
                          std::size_t k = 3, double power = 2.0, double eps = 1e-8);

/// Differentiable in the coarse features.
template <typename T>
Var<T> apply_stencil(const Var<T>& coarse_feats, const IdwStencil& stencil);

/// Centers on the centroid and scales the largest radius to 1 (a single
/// point or a fully degenerate cloud is only centered).
template <typename T>
void normalize_unit_sphere(std::span<T> coords);

}  // namespace slnet
