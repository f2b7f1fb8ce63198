#include <cmath>
#include <random>

#include "doctest.h"
#include "slnet/nape.hpp"
#include "testkit.hpp"

using namespace slnet;

namespace {

std::span<const double> cs(const std::vector<double>& v) { return v; }

}  // namespace

TEST_CASE("config and grid") {
  NapeConfig cfg;
  CHECK(cfg.grid_size() == 6);
  const auto g = cfg.grid();
  REQUIRE(g.size() == 6);
  for (std::size_t j = 0; j < 6; ++j) {
    CHECK(g[j] > -1.0);
    CHECK(g[j] < 1.0);
    CHECK(g[j] == doctest::Approx(-g[5 - j]));
    if (j) CHECK(g[j] > g[j - 1]);
  }
  CHECK(g[0] == doctest::Approx(-5.0 / 7.0));
  cfg.dim = 32;
  CHECK(cfg.grid_size() == 11);
  cfg.sigma0 = 0.0;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("global dispersion") {
  CHECK(global_dispersion(cs({1, 2, 3, 1, 2, 3, 1, 2, 3})) == 0.0);
  CHECK(global_dispersion(cs({0, 0, 0, 2, 0, 0})) == doctest::Approx(1.0 / 3.0));

  std::mt19937_64 rng(41);
  const auto p = testkit::uniform(300, rng, -2, 3);
  double ref = 0;
  for (int a = 0; a < 3; ++a) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 100; ++i) m += p[3 * i + a] / 100;
    for (std::size_t i = 0; i < 100; ++i) v += (p[3 * i + a] - m) * (p[3 * i + a] - m) / 100;
    ref += std::sqrt(v) / 3;
  }
  CHECK(global_dispersion(cs(p)) == doctest::Approx(ref).epsilon(1e-7));

  auto moved = p, scaled = p;
  for (std::size_t i = 0; i < p.size(); ++i) {
    moved[i] += (i % 3 == 1 ? 7.5 : -3.0);
    scaled[i] *= 2.5;
  }
  CHECK(global_dispersion(cs(moved)) == doctest::Approx(ref).epsilon(1e-6));
  CHECK(global_dispersion(cs(scaled)) == doctest::Approx(2.5 * ref).epsilon(1e-6));
}

TEST_CASE("bandwidth and gate") {
  NapeConfig cfg;
  CHECK(adaptive_bandwidth(0.0, cfg) == doctest::Approx(0.4));
  CHECK(adaptive_bandwidth(1.0, cfg) == doctest::Approx(0.8));
  CHECK(adaptive_bandwidth(0.25, cfg) == doctest::Approx(0.5));

  CHECK(blend_gate(0.1, cfg) == 0.5);
  CHECK(blend_gate(0.0, cfg) == doctest::Approx(1.0 / (1.0 + std::exp(1.0))));
  CHECK(blend_gate(0.0, cfg) == doctest::Approx(0.26894).epsilon(1e-5));
  CHECK(blend_gate(5.0, cfg) > 0.999);
  double prev = 0;
  for (double s = 0; s < 2; s += 0.05) {
    CHECK(blend_gate(s, cfg) > prev);
    prev = blend_gate(s, cfg);
  }

  cfg.basis = NapeBasis::gaussian;
  CHECK(blend_gate(0.0, cfg) == 1.0);
  cfg.basis = NapeBasis::cosine;
  CHECK(blend_gate(3.0, cfg) == 0.0);
}

TEST_CASE("embedding") {
  NapeConfig cfg;
  const auto grid = cfg.grid();

  // x on a grid node: both bases peak, so that channel is exactly 1
  std::vector<double> p{grid[2], 0.3, -0.1, 0.5, -0.5, 0.9, -0.7, 0.2, 0.4};
  const auto e = nape_embed(cs(p), cfg);
  CHECK(e.shape() == Shape{3, 16});
  CHECK(e(0, 2) == doctest::Approx(1.0).epsilon(1e-12));

  // 18 features, the last two (z-block) dropped
  std::mt19937_64 rng(43);
  const auto q = testkit::uniform(30, rng);
  const auto got = nape_embed(cs(q), cfg);
  const auto ref = testkit::nape_reference(q, 16);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-6));
  for (double v : got.values()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  CHECK(nape_embed(cs(q), cfg) == got);

  // pure Gaussian basis lies in (0, 1]
  cfg.basis = NapeBasis::gaussian;
  const auto g = nape_embed(cs(q), cfg);
  for (double v : g.values()) {
    CHECK(v > 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("single point") {
  NapeConfig cfg;
  cfg.dim = 32;
  const auto e = nape_embed(cs({0.1, 0.2, 0.3}), cfg);
  CHECK(e.shape() == Shape{1, 32});
  CHECK(all_finite(e));
  const auto ref = testkit::nape_reference({0.1, 0.2, 0.3}, 32);
  for (std::size_t i = 0; i < 32; ++i) CHECK(e[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}
