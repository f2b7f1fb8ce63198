#include "slnet/nape.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "slnet/geom.hpp"

namespace slnet {

std::vector<double> NapeConfig::grid() const {
  const std::size_t m = grid_size();
  std::vector<double> g(m);
  for (std::size_t j = 0; j < m; ++j) g[j] = -1.0 + 2.0 * static_cast<double>(j + 1) / static_cast<double>(m + 1);
  return g;
}

void NapeConfig::validate() const {
  if (dim == 0) throw std::invalid_argument("nape: dim must be positive");
  if (!(sigma0 > 0.0)) throw std::invalid_argument("nape: sigma0 must be positive");
}

template <typename T>
double global_dispersion(std::span<const T> coords) {
  const std::size_t n = point_count(coords);
  if (n == 0) throw std::invalid_argument("global_dispersion: empty cloud");
  double total = 0.0;
  for (int a = 0; a < 3; ++a) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += coords[3 * i + a];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = coords[3 * i + a] - mean;
      var += d * d;
    }
    total += std::sqrt(var / static_cast<double>(n));
  }
  return total / 3.0;
}

double adaptive_bandwidth(double sigma_global, const NapeConfig& cfg) { return cfg.sigma0 * (1.0 + sigma_global); }

double blend_gate(double sigma_global, const NapeConfig& cfg) {
  switch (cfg.basis) {
    case NapeBasis::gaussian:
      return 1.0;
    case NapeBasis::cosine:
      return 0.0;
    case NapeBasis::adaptive:
      break;
  }
  return 1.0 / (1.0 + std::exp(-cfg.gate_sharpness * (sigma_global - cfg.gate_threshold)));
}

template <typename T>
Tensor<T> nape_embed(std::span<const T> coords, const NapeConfig& cfg) {
  cfg.validate();
  const std::size_t n = point_count(coords);
  const double sg = global_dispersion(coords);
  const double s = adaptive_bandwidth(sg, cfg);
  const double beta = blend_gate(sg, cfg);
  const auto g = cfg.grid();
  const std::size_t m = g.size();
  const double inv_2s2 = 1.0 / (2.0 * s * s);

  Tensor<T> out(Shape{n, cfg.dim});
  for (std::size_t i = 0; i < n; ++i) {
    T* row = out.data() + i * cfg.dim;
    for (std::size_t a = 0; a < 3; ++a) {
      const double x = coords[3 * i + a];
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t ch = a * m + j;
        if (ch >= cfg.dim) break;
        const double d = x - g[j];
        const double rbf = std::exp(-d * d * inv_2s2);
        const double cosv = std::cos(d / s);
        row[ch] = static_cast<T>(beta * rbf + (1.0 - beta) * cosv);
      }
    }
  }
  detail::count_flops("nape", nape_flops(n, cfg));
  return out;
}

double nape_flops(std::size_t n, const NapeConfig& cfg) {
  return 3.0 * static_cast<double>(cfg.grid_size()) * static_cast<double>(n) * (4.0 + 3.0 + 3.0);
}

template double global_dispersion(std::span<const float>);
template double global_dispersion(std::span<const double>);
template Tensor<float> nape_embed(std::span<const float>, const NapeConfig&);
template Tensor<double> nape_embed(std::span<const double>, const NapeConfig&);

}  // namespace slnet
