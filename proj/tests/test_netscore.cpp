#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "doctest.h"
#include "slnet/netscore.hpp"

using namespace slnet;

namespace {

constexpr double nan_v = std::numeric_limits<double>::quiet_NaN();

}  // namespace

TEST_CASE("netscore") {
  CHECK(std::abs(netscore({"m", 84.25, 0.48, 1.02, nan_v, nan_v}, 0) - 80.12) < 0.05);
  CHECK(std::abs(netscore({"s", 93.64, 0.14, 0.31, 0.76, 11.49}, 1) - 87.71) < 0.5);
  CHECK(std::abs(netscore({"s", 93.64, 0.14, 0.31, nan_v, nan_v}, 0) - 92.42) < 0.1);

  // a = 10 with unit costs: 20 log10(100) = 40
  CHECK(netscore({"u", 10, 1, 1, 1, 1}, 0) == doctest::Approx(40.0));
  CHECK(netscore({"u", 10, 1, 1, 1, 1}, 1) == doctest::Approx(40.0));
  // 100x the parameters costs 20 log10(10) = 20
  CHECK(netscore({"u", 10, 100, 1, 1, 1}, 0) == doctest::Approx(20.0));
  // 10^4 x (t r) costs 20 under delta = 1
  CHECK(netscore({"u", 10, 1, 1, 100, 100}, 1) == doctest::Approx(20.0));

  EfficiencyRecord base{"b", 80, 1, 1, 2, 3};
  double prev = -INFINITY;
  for (double a : {20.0, 40.0, 60.0, 80.0, 100.0}) {
    base.a = a;
    CHECK(netscore(base, 1) > prev);
    prev = netscore(base, 1);
  }
  base.a = 80;
  prev = INFINITY;
  for (double m : {0.1, 1.0, 10.0}) {
    base.m = m;
    CHECK(netscore(base, 0) < prev);
    prev = netscore(base, 0);
  }

  CHECK_THROWS(netscore({"x", 0, 1, 1, 1, 1}, 0));
  CHECK_THROWS(netscore({"x", 101, 1, 1, 1, 1}, 0));
  CHECK_THROWS(netscore({"x", 50, 0, 1, 1, 1}, 0));
  CHECK_THROWS(netscore({"x", 50, 1, 1, nan_v, nan_v}, 1));
  CHECK_THROWS(netscore({"x", 50, 1, 1, 1, 1}, 2));
  CHECK_NOTHROW(netscore({"x", 50, 1, 1, nan_v, nan_v}, 0));
}

TEST_CASE("spearman") {
  const std::vector<double> x{1, 2, 3, 4, 5};
  CHECK(spearman(x, std::vector<double>{10, 20, 30, 40, 50}) == doctest::Approx(1.0));
  CHECK(spearman(x, std::vector<double>{5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman(x, std::vector<double>{1, 3, 2, 4, 5}) == doctest::Approx(0.9));
  CHECK(spearman(x, std::vector<double>{2, 1, 4, 3, 5}) == doctest::Approx(0.8));
  // ties take the average rank: ranks (1.5, 1.5, 3) against (1, 2, 3)
  CHECK(spearman(std::vector<double>{1, 1, 2}, std::vector<double>{1, 2, 3}) == doctest::Approx(std::sqrt(0.75)));
  CHECK_THROWS(spearman(std::vector<double>{1}, std::vector<double>{1}));
  CHECK_THROWS(spearman(x, std::vector<double>{1, 2}));
}

TEST_CASE("flop counting") {
  std::mt19937_64 rng(1);
  Linear<float> lin("l", 16, 32, rng);
  const Tensor<float> x(Shape{1024, 16}, 0.5f);
  const double f = count_flops([&] { lin.forward(Var<float>::view(x), {}); });
  CHECK(f == 2.0 * 1024 * 16 * 32);
  CHECK(f == 1048576.0);
  CHECK(count_flops([] {}) == 0.0);

  const SLNet<float> s(slnet_s()), m(slnet_m());
  const double fs = estimate_flops(s, 1024), fm = estimate_flops(m, 1024);
  CHECK(fs > 0.1e9);
  CHECK(fs < 0.5e9);
  CHECK(fm / fs > 2.5);
  CHECK(fm / fs < 6.0);
  CHECK(estimate_flops(s, 1024, 2) == doctest::Approx(2 * fs).epsilon(1e-9));
}

TEST_CASE("latency and memory") {
  auto cfg = slnet_s_tiny(4);
  const SLNet<float> model(cfg, 1);
  BenchConfig bc;
  bc.n_points = 256;
  bc.warmup_iters = 1;
  bc.timed_iters = 10;
  CHECK(measure_latency(model, bc) > 0.0);
  const double mem = measure_peak_memory(model, bc);
  CHECK(mem > count_params(model) * 4.0 / (1 << 20));
  bc.batch = 4;
  CHECK(measure_peak_memory(model, bc) > mem);
  bc.timed_iters = 0;
  CHECK_THROWS(bc.validate());
}

TEST_CASE("record csv") {
  std::stringstream ss;
  write_record_header(ss);
  write_record(ss, {"SLNet-S", 93.64, 0.14, 0.31, 0.76, 11.49});
  write_record(ss, {"bare", 90.0, 1.0, 2.0, nan_v, nan_v});
  const auto recs = read_records(ss);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].name == "SLNet-S");
  CHECK(recs[0].a == 93.64);
  CHECK(recs[0].r == 11.49);
  CHECK(recs[0].has_runtime());
  CHECK_FALSE(recs[1].has_runtime());

  std::stringstream bad("name,acc,params_m,flops_g,latency_ms,mem_mb\nx,ninety,1,1,,\n");
  try {
    read_records(bad);
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::stringstream header("nom,acc\n");
  CHECK_THROWS(read_records(header));

  const auto ranked = rank_records(recs);
  CHECK(ranked[0].rec.name == "SLNet-S");
  CHECK(std::isnan(ranked[1].netscore_plus));
  std::stringstream table, csv;
  write_ranked_table(table, ranked);
  write_scores_csv(csv, ranked);
  CHECK(table.str().find("92.4") != std::string::npos);
  CHECK(csv.str().rfind("name,netscore,netscore_plus\n", 0) == 0);
}
