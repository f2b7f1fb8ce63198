#pragma once

// Shared by the unit tests and the acceptance binary: random inputs, scalar
// reference implementations, and the gradient/oracle sweeps.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "slnet/backbone.hpp"
#include "slnet/geom.hpp"
#include "slnet/nape.hpp"

namespace testkit {

using slnet::Tensor;

std::vector<double> uniform(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0);
std::vector<float> uniform_f(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0);
Tensor<double> random_tensor(slnet::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0);

// --- scalar references ------------------------------------------------------

std::vector<std::size_t> fps_reference(const std::vector<double>& pts, std::size_t m);
/// Full sort of (squared distance, index); pads with the nearest when N < K.
void knn_reference(const std::vector<double>& query, const std::vector<double>& ref, std::size_t k,
                   std::vector<std::size_t>& idx, std::vector<double>& d2);
std::vector<double> nape_reference(const std::vector<double>& pts, std::size_t dim);
std::vector<double> relative_group_reference(const std::vector<double>& feats, std::size_t c,
                                             const std::vector<double>& pts, const slnet::NeighborIndex& nbr);
std::vector<double> idw_reference(const std::vector<double>& coarse, const std::vector<double>& feats, std::size_t c,
                                  const std::vector<double>& fine, std::size_t k);

// --- sweeps -----------------------------------------------------------------

/// Outcome of one gradient check: the worst relative error over the sampled
/// entries and how many of them had to be re-tested at the finer step.
struct Tally {
  double worst = 0.0;
  double worst_direct = 0.0;     ///< over entries that passed at h = 1e-4
  double worst_rechecked = 0.0;  ///< over entries that needed the finer steps
  std::size_t entries = 0;
  std::size_t rechecked = 0;
};

struct CaseResult {
  std::string name;
  double worst = 0.0;  ///< max relative error (gradients) or mismatch count (oracles)
  double worst_direct = 0.0;
  double worst_rechecked = 0.0;
  std::size_t runs = 0;
  std::size_t entries = 0;
  std::size_t rechecked = 0;

  void add(const Tally& t) {
    worst = std::max(worst, t.worst);
    worst_direct = std::max(worst_direct, t.worst_direct);
    worst_rechecked = std::max(worst_rechecked, t.worst_rechecked);
    entries += t.entries;
    rechecked += t.rechecked;
    ++runs;
  }
};

/// Every differentiable op, layer and loss, plus full-model passes, over
/// `seeds` random instances each, in f64 with h = 1e-4.
std::vector<CaseResult> gradient_sweep(std::size_t seeds, std::uint64_t base = 1, bool with_models = true);

/// Reduced tiny model (n = 64, K = 8) forward + smoothed CE, f64.
Tally model_gradient_check(std::uint64_t seed, slnet::HeadKind head);

/// FPS, kNN, NAPE, relative grouping and IDW against the references on
/// `instances` random clouds of at most 128 points. `worst` holds the number
/// of failing instances.
std::vector<CaseResult> oracle_sweep(std::size_t instances, std::uint64_t base = 1);

/// Largest |logit difference| under a random point permutation, f32 eval mode.
double permutation_gap(const slnet::SLNet<float>& model, std::size_t clouds, std::uint64_t seed);

}  // namespace testkit
