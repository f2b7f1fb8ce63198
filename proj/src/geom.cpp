#include "slnet/geom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace slnet {

namespace {

template <typename T>
double sq_dist(const T* a, const T* b) {
  const double dx = static_cast<double>(a[0]) - b[0];
  const double dy = static_cast<double>(a[1]) - b[1];
  const double dz = static_cast<double>(a[2]) - b[2];
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

template <typename T>
std::size_t point_count(std::span<const T> coords) {
  if (coords.size() % 3 != 0) {
    throw DimensionError("coordinate buffer of " + std::to_string(coords.size()) + " values is not N x 3");
  }
  return coords.size() / 3;
}

template <typename T>
std::vector<std::size_t> fps(std::span<const T> coords, std::size_t m) {
  const std::size_t n = point_count(coords);
  if (m == 0) throw std::invalid_argument("fps: m must be positive");
  if (m > n) throw std::invalid_argument("fps: m=" + std::to_string(m) + " exceeds N=" + std::to_string(n));

  double c[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) c[a] += coords[3 * i + a];
  }
  for (double& v : c) v /= static_cast<double>(n);

  std::size_t seed = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0;
    for (int a = 0; a < 3; ++a) {
      const double diff = coords[3 * i + a] - c[a];
      d += diff * diff;
    }
    if (d > best) {
      best = d;
      seed = i;
    }
  }

  std::vector<std::size_t> out;
  out.reserve(m);
  out.push_back(seed);
  std::vector<double> min_d(n);
  const T* p = coords.data();
  for (std::size_t i = 0; i < n; ++i) min_d[i] = sq_dist(p + 3 * i, p + 3 * seed);
  for (std::size_t t = 1; t < m; ++t) {
    std::size_t pick = 0;
    double far = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_d[i] > far) {
        far = min_d[i];
        pick = i;
      }
    }
    out.push_back(pick);
    for (std::size_t i = 0; i < n; ++i) min_d[i] = std::min(min_d[i], sq_dist(p + 3 * i, p + 3 * pick));
  }
  detail::count_flops("fps", 4.0 * n * m);
  return out;
}

std::vector<std::size_t> random_sample(std::size_t n, std::size_t m, std::uint64_t seed) {
  if (m == 0) throw std::invalid_argument("random_sample: m must be positive");
  if (m > n) throw std::invalid_argument("random_sample: m=" + std::to_string(m) + " exceeds N=" + std::to_string(n));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(m);
  return idx;
}

template <typename T>
NeighborIndex knn(std::span<const T> query, std::span<const T> ref, std::size_t k) {
  const std::size_t q = point_count(query);
  const std::size_t n = point_count(ref);
  if (n == 0) throw std::invalid_argument("knn: empty reference set");
  if (k == 0) throw std::invalid_argument("knn: k must be positive");

  NeighborIndex out;
  out.k = k;
  out.neighbors.resize(q * k);
  out.sq_dists.resize(q * k);
  const std::size_t take = std::min(k, n);
  std::vector<std::pair<double, std::size_t>> cand(n);
  for (std::size_t i = 0; i < q; ++i) {
    const T* qi = query.data() + 3 * i;
    for (std::size_t j = 0; j < n; ++j) cand[j] = {sq_dist(qi, ref.data() + 3 * j), j};
    // (distance, index) ordering breaks ties toward the lower index
    const auto mid = cand.begin() + static_cast<std::ptrdiff_t>(take);
    if (take < n) std::nth_element(cand.begin(), mid - 1, cand.end());
    std::sort(cand.begin(), mid);
    for (std::size_t j = 0; j < k; ++j) {
      const auto& c = cand[j < take ? j : 0];
      out.neighbors[i * k + j] = c.second;
      out.sq_dists[i * k + j] = c.first;
    }
  }
  detail::count_flops("knn", 8.0 * q * n);
  return out;
}

template <typename T>
std::vector<T> gather_points(std::span<const T> coords, std::span<const std::size_t> index) {
  const std::size_t n = point_count(coords);
  std::vector<T> out(index.size() * 3);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) throw std::out_of_range("point index " + std::to_string(index[i]) + " >= " + std::to_string(n));
    std::copy_n(coords.data() + 3 * index[i], 3, out.data() + 3 * i);
  }
  return out;
}

template <typename T>
NeighborIndex group_neighbors(std::span<const T> coords, std::span<const std::size_t> centers, std::size_t k) {
  const auto q = gather_points(coords, centers);
  NeighborIndex out = knn(std::span<const T>(q), coords, k);
  out.centers.assign(centers.begin(), centers.end());
  return out;
}

namespace {

void check_grouping(const NeighborIndex& nbr, std::size_t n) {
  if (nbr.k == 0 || nbr.centers.size() * nbr.k != nbr.neighbors.size()) {
    throw DimensionError("relative_group: neighbor index needs centers and k neighbors per center");
  }
  for (auto i : nbr.centers) {
    if (i >= n) throw std::out_of_range("relative_group: center " + std::to_string(i) + " >= " + std::to_string(n));
  }
  for (auto i : nbr.neighbors) {
    if (i >= n) throw std::out_of_range("relative_group: neighbor " + std::to_string(i) + " >= " + std::to_string(n));
  }
}

std::vector<std::size_t> repeat_centers(const NeighborIndex& nbr) {
  std::vector<std::size_t> out(nbr.neighbors.size());
  for (std::size_t i = 0; i < nbr.centers.size(); ++i) {
    std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * nbr.k), nbr.k, nbr.centers[i]);
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> relative_group(const Tensor<T>& feats, std::span<const T> coords, const NeighborIndex& nbr) {
  return relative_group(Var<T>::view(feats), coords, nbr).value();
}

template <typename T>
Var<T> relative_group(const Var<T>& feats, std::span<const T> coords, const NeighborIndex& nbr) {
  const std::size_t n = point_count(coords);
  if (feats.rows() != n) {
    throw DimensionError("relative_group: " + std::to_string(feats.rows()) + " feature rows for " + std::to_string(n) +
                         " points");
  }
  check_grouping(nbr, n);
  const std::size_t c = feats.cols() + 3;
  auto xyz = Var<T>::constant(Tensor<T>(Shape{n, 3}, coords));
  auto joint = feats.cols() == 0 ? xyz : ops::concat_cols(std::vector<Var<T>>{feats, xyz});
  const auto centers = repeat_centers(nbr);
  return ops::gather_diff(joint, std::span<const std::size_t>(nbr.neighbors), std::span<const std::size_t>(centers),
                          Shape{nbr.centers.size(), nbr.k, c});
}

template <typename T>
IdwStencil idw_stencil(std::span<const T> coarse, std::span<const T> fine, std::size_t k, double power, double eps) {
  const std::size_t m = point_count(coarse);
  if (m == 0) throw std::invalid_argument("idw: no coarse points");
  const std::size_t kk = std::min(k, m);
  const NeighborIndex nn = knn(fine, coarse, kk);
  IdwStencil st;
  st.k = kk;
  st.index = nn.neighbors;
  st.weights.resize(nn.sq_dists.size());
  const std::size_t n = nn.size();
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < kk; ++j) {
      const double w = 1.0 / (std::pow(nn.sq_dists[i * kk + j], power / 2.0) + eps);
      st.weights[i * kk + j] = w;
      total += w;
    }
    for (std::size_t j = 0; j < kk; ++j) st.weights[i * kk + j] /= total;
  }
  return st;
}

template <typename T>
Var<T> apply_stencil(const Var<T>& coarse_feats, const IdwStencil& stencil) {
  std::vector<T> w(stencil.weights.begin(), stencil.weights.end());
  return ops::weighted_gather(coarse_feats, std::span<const std::size_t>(stencil.index), std::span<const T>(w),
                              stencil.k);
}

template <typename T>
Tensor<T> idw_interpolate(std::span<const T> coarse, const Tensor<T>& coarse_feats, std::span<const T> fine,
                          std::size_t k, double power, double eps) {
  if (coarse_feats.rows() != point_count(coarse)) {
    throw DimensionError("idw_interpolate: feature rows do not match coarse points");
  }
  const auto st = idw_stencil(coarse, fine, k, power, eps);
  return apply_stencil(Var<T>::view(coarse_feats), st).value();
}

template <typename T>
void normalize_unit_sphere(std::span<T> coords) {
  const std::size_t n = point_count(std::span<const T>(coords));
  if (n == 0) return;
  double c[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) c[a] += coords[3 * i + a];
  }
  for (double& v : c) v /= static_cast<double>(n);
  double r2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double v = coords[3 * i + a] - c[a];
      d += v * v;
    }
    r2 = std::max(r2, d);
  }
  const double s = r2 > 0.0 ? 1.0 / std::sqrt(r2) : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) coords[3 * i + a] = static_cast<T>((coords[3 * i + a] - c[a]) * s);
  }
}

#define SLNET_INSTANTIATE_GEOM(T)                                                                              \
  template std::size_t point_count(std::span<const T>);                                                        \
  template std::vector<std::size_t> fps(std::span<const T>, std::size_t);                                      \
  template NeighborIndex knn(std::span<const T>, std::span<const T>, std::size_t);                             \
  template NeighborIndex group_neighbors(std::span<const T>, std::span<const std::size_t>, std::size_t);       \
  template std::vector<T> gather_points(std::span<const T>, std::span<const std::size_t>);                     \
  template Tensor<T> relative_group(const Tensor<T>&, std::span<const T>, const NeighborIndex&);               \
  template Var<T> relative_group(const Var<T>&, std::span<const T>, const NeighborIndex&);                     \
  template IdwStencil idw_stencil(std::span<const T>, std::span<const T>, std::size_t, double, double);         \
  template Tensor<T> idw_interpolate(std::span<const T>, const Tensor<T>&, std::span<const T>, std::size_t,    \
                                     double, double);                                                          \
  template Var<T> apply_stencil(const Var<T>&, const IdwStencil&);                                             \
  template void normalize_unit_sphere(std::span<T>);

SLNET_INSTANTIATE_GEOM(float)
SLNET_INSTANTIATE_GEOM(double)
#undef SLNET_INSTANTIATE_GEOM

}  // namespace slnet
