#pragma once

// Nonparametric adaptive point embedding: XYZ -> D channels from a blend of
// Gaussian RBF and cosine bases whose width and mix follow the cloud's spread.

#include <cstddef>
#include <span>
#include <vector>

#include "slnet/tensor.hpp"

namespace slnet {

/// Which basis the embedding uses. The pure variants pin the blend gate.
enum class NapeBasis { adaptive, gaussian, cosine };

struct NapeConfig {
  std::size_t dim = 16;
  double sigma0 = 0.4;
  double gate_sharpness = 10.0;
  double gate_threshold = 0.1;
  NapeBasis basis = NapeBasis::adaptive;

  std::size_t grid_size() const { return (dim + 2) / 3; }
  /// Interior points of an inclusive (M+2)-point linspace over [-1, 1].
  std::vector<double> grid() const;
  void validate() const;
};

/// Mean of the three per-axis population standard deviations.
template <typename T>
double global_dispersion(std::span<const T> coords);

double adaptive_bandwidth(double sigma_global, const NapeConfig& cfg);

/// sigmoid(gamma * (sigma_global - b)); 1 or 0 for the pure-basis variants.
double blend_gate(double sigma_global, const NapeConfig& cfg);

/// N x dim embedding of one cloud. Features are laid out x-block, y-block,
/// z-block (grid_size() each) and truncated to the first `dim`.
template <typename T>
Tensor<T> nape_embed(std::span<const T> coords, const NapeConfig& cfg);

/// FLOPs declared for embedding n points.
double nape_flops(std::size_t n, const NapeConfig& cfg);

}  // namespace slnet
