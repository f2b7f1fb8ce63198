#include <cmath>
#include <random>

#include "doctest.h"
#include "slnet/autograd.hpp"
#include "slnet/gradcheck.hpp"
#include "testkit.hpp"

using namespace slnet;
using testkit::random_tensor;

namespace {

Var<double> cst(Shape s, std::initializer_list<double> v) { return Var<double>::constant(Tensor<double>(std::move(s), v)); }

/// Reads the gradient of sum(f(x)) with respect to x.
template <typename F>
Tensor<double> grad_of_sum(const Tensor<double>& x0, F f) {
  Param<double> x("x", x0);
  Tape<double> tape;
  tape.backward(ops::sum(f(tape.watch(x))));
  return x.grad;
}

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
  Tensor<float> t(Shape{2, 3, 4}, 1.5f);
  CHECK(t.size() == 24);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 12);
  CHECK(t.reshaped({6, 4}).shape() == Shape{6, 4});
  CHECK_THROWS_AS(t.reshaped({5, 5}), DimensionError);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 2}, {1.f, 2.f, 3.f}), DimensionError);
  Tensor<float> u(Shape{2, 3, 4}, 0.5f);
  t += u;
  CHECK(t[7] == 2.0f);
  CHECK_THROWS_AS(t += Tensor<float>(Shape{3}), DimensionError);
  CHECK(all_finite(t));
  t[3] = NAN;
  CHECK_FALSE(all_finite(t));
}

TEST_CASE("allocation statistics") {
  reset_alloc_peak();
  const auto before = alloc_stats();
  CHECK(before.peak_bytes == before.current_bytes);
  {
    Tensor<float> big(Shape{1000});
    const auto mid = alloc_stats();
    CHECK(mid.current_bytes >= before.current_bytes + 4000);
    CHECK(mid.peak_bytes >= mid.current_bytes);
  }
  const auto after = alloc_stats();
  CHECK(after.current_bytes == before.current_bytes);
  CHECK(after.peak_bytes >= before.current_bytes + 4000);  // the window remembers
  reset_alloc_peak();
  CHECK(alloc_stats().peak_bytes == alloc_stats().current_bytes);
}

TEST_CASE("linear") {
  auto x = cst({1, 2}, {1, 2});
  CHECK(ops::linear(x, cst({2, 2}, {1, 0, 0, 1}), cst({2}, {0, 0})).value() == Tensor<double>(Shape{1, 2}, {1, 2}));
  CHECK(ops::linear(x, cst({2, 2}, {0, 0, 0, 0}), cst({2}, {3, 4})).value() == Tensor<double>(Shape{1, 2}, {3, 4}));
  CHECK_THROWS_AS(ops::linear(x, cst({3, 1}, {1, 1, 1}), cst({1}, {0})), DimensionError);

  std::mt19937_64 rng(3);
  const auto xv = random_tensor({4, 3}, rng), wv = random_tensor({3, 5}, rng), bv = random_tensor({5}, rng);
  const auto y = ops::linear(Var<double>::constant(xv), Var<double>::constant(wv), Var<double>::constant(bv)).value();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double s = bv[j];
      for (std::size_t k = 0; k < 3; ++k) s += xv(i, k) * wv(k, j);
      CHECK(y(i, j) == doctest::Approx(s).epsilon(1e-6));
    }
  }
}

TEST_CASE("relu") {
  CHECK(ops::relu(cst({3}, {-1, 0, 2})).value() == Tensor<double>(Shape{3}, {0, 0, 2}));
  CHECK(ops::relu(cst({2}, {-3, -0.5})).value() == Tensor<double>(Shape{2}, {0, 0}));
  // the mask, including the zero subgradient at 0
  const auto g = grad_of_sum(Tensor<double>(Shape{4}, {-1, 0, 0.5, 3}), [](const Var<double>& v) { return ops::relu(v); });
  CHECK(g == Tensor<double>(Shape{4}, {0, 0, 1, 1}));
}

TEST_CASE("batch norm") {
  std::mt19937_64 rng(5);
  ops::BatchNormState<double> st(3);
  auto gamma = Var<double>::constant(Tensor<double>(Shape{3}, 1.0));
  auto beta = Var<double>::constant(Tensor<double>(Shape{3}, {0.0, 0.5, -1.0}));

  SUBCASE("train statistics") {
    auto x = random_tensor({50, 3}, rng, -4, 9);
    x(0, 2) = 7;  // make column 2 constant
    for (std::size_t i = 0; i < 50; ++i) x(i, 2) = 7;
    const auto y = ops::batch_norm(Var<double>::constant(x), gamma, Var<double>::constant(Tensor<double>(Shape{3})), st, true).value();
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0, v = 0;
      for (std::size_t i = 0; i < 50; ++i) m += y(i, c);
      m /= 50;
      for (std::size_t i = 0; i < 50; ++i) v += (y(i, c) - m) * (y(i, c) - m);
      v /= 50;
      CHECK(std::abs(m) < 1e-5);
      CHECK(std::abs(v - 1) < 1e-4);
    }
    for (std::size_t i = 0; i < 50; ++i) CHECK(y(i, 2) == 0.0);
    // running stats moved by momentum 0.1 toward the batch statistics
    CHECK(st.running_mean[2] == doctest::Approx(0.7));
    CHECK(st.running_var[2] == doctest::Approx(0.9));
  }
  SUBCASE("constant column gives beta") {
    Tensor<double> x(Shape{4, 3}, 2.0);
    const auto y = ops::batch_norm(Var<double>::constant(x), gamma, beta, st, true).value();
    for (std::size_t i = 0; i < 4; ++i) CHECK(y(i, 1) == 0.5);
  }
  SUBCASE("eval uses running statistics and writes nothing") {
    st.running_mean = Tensor<double>(Shape{3}, {1, 2, 3});
    st.running_var = Tensor<double>(Shape{3}, {4, 4, 4});
    const auto y = ops::batch_norm(cst({1, 3}, {3, 2, 1}), gamma, beta, st, false).value();
    CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(y[1] == doctest::Approx(0.5));
    CHECK(y[2] == doctest::Approx(-2.0).epsilon(1e-5));
    CHECK(st.running_mean == Tensor<double>(Shape{3}, {1, 2, 3}));
  }
  SUBCASE("unit input passes through") {
    Tensor<double> x(Shape{2, 3}, {1, 1, 1, -1, -1, -1});
    const auto y = ops::batch_norm(Var<double>::constant(x), gamma, Var<double>::constant(Tensor<double>(Shape{3})), st, true).value();
    for (std::size_t i = 0; i < 6; ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-5));
  }
}

TEST_CASE("max reduce") {
  const auto r = ops::max_reduce(cst({2, 2}, {1, 5, 3, 2}), 1);
  CHECK(r.values.value() == Tensor<double>(Shape{2}, {5, 3}));
  CHECK(r.argmax == std::vector<std::size_t>{1, 2});
  CHECK(ops::max_reduce(cst({1, 3}, {4, 4, 4}), 1).argmax == std::vector<std::size_t>{0});
  CHECK_THROWS_AS(ops::max_reduce(cst({2}, {1, 2}), 1), DimensionError);
  CHECK_THROWS_AS(ops::max_reduce(Var<double>::constant(Tensor<double>(Shape{2, 0})), 1), DimensionError);

  const auto g = grad_of_sum(Tensor<double>(Shape{2, 3}, {1, 9, 9, 0, -1, -2}),
                             [](const Var<double>& v) { return ops::max_reduce(v, 1).values; });
  CHECK(g == Tensor<double>(Shape{2, 3}, {0, 1, 0, 1, 0, 0}));
}

TEST_CASE("backward") {
  Param<double> alpha("alpha", Tensor<double>(Shape{2}, {0.5, -2}));
  Param<double> unused("unused", Tensor<double>(Shape{3}, 7.0));
  const Tensor<double> x(Shape{3, 2}, {1, 2, 3, 4, 5, 6});

  SUBCASE("linear in the parameter") {
    Tape<double> tape;
    tape.watch(unused);
    tape.backward(ops::sum(ops::channel_scale(Var<double>::view(x), tape.watch(alpha))));
    CHECK(alpha.grad == Tensor<double>(Shape{2}, {9, 12}));
    CHECK(unused.grad == Tensor<double>(Shape{3}));
  }
  SUBCASE("constant loss") {
    Tape<double> tape;
    tape.watch(alpha);
    tape.backward(cst({1}, {3.0}));
    CHECK(alpha.grad == Tensor<double>(Shape{2}));
  }
  SUBCASE("non-scalar loss") {
    Tape<double> tape;
    CHECK_THROWS_AS(tape.backward(ops::channel_scale(Var<double>::view(x), tape.watch(alpha))), DimensionError);
  }
  SUBCASE("two passes accumulate twice") {
    auto run = [&] {
      Tape<double> tape;
      auto y = ops::relu(ops::channel_scale(Var<double>::view(x), tape.watch(alpha)));
      tape.backward(ops::mean(y));
    };
    alpha.zero_grad();
    run();
    const auto once = alpha.grad;
    run();
    for (std::size_t i = 0; i < 2; ++i) CHECK(alpha.grad[i] == 2 * once[i]);
    alpha.zero_grad();
    CHECK(alpha.grad == Tensor<double>(Shape{2}));
  }
}

TEST_CASE("tape determinism") {
  std::mt19937_64 rng(9);
  Param<double> w("w", random_tensor({4, 3}, rng)), b("b", random_tensor({3}, rng));
  const auto x = random_tensor({6, 4}, rng);
  auto run = [&] {
    w.zero_grad();
    b.zero_grad();
    Tape<double> tape;
    auto h = ops::relu(ops::linear(Var<double>::view(x), tape.watch(w), tape.watch(b)));
    tape.backward(ops::sum(ops::max_reduce(h, 0).values));
    return std::pair{w.grad, b.grad};
  };
  CHECK(run() == run());
}

TEST_CASE("finite differences") {
  Param<double> p("p", Tensor<double>(Shape{1}, 3.0));
  CHECK(finite_diff_grad([&] { return p.value[0] * p.value[0]; }, p)[0] == doctest::Approx(6.0).epsilon(1e-9));
  CHECK(p.value[0] == 3.0);
  Param<double> q("q", Tensor<double>(Shape{4}, 1.0));
  CHECK(finite_diff_grad([] { return 2.5; }, q) == Tensor<double>(Shape{4}));
  CHECK_THROWS(finite_diff_grad([] { return 0.0; }, q, 0.0));

  // against backward on a random two-layer MLP
  std::mt19937_64 rng(11);
  Param<double> w1("w1", random_tensor({3, 5}, rng)), b1("b1", random_tensor({5}, rng));
  Param<double> w2("w2", random_tensor({5, 2}, rng)), b2("b2", random_tensor({2}, rng));
  const auto x = random_tensor({4, 3}, rng);
  auto loss = [&](Tape<double>& t) {
    auto h = ops::relu(ops::linear(Var<double>::view(x), t.watch(w1), t.watch(b1)));
    return ops::sum(ops::linear(h, t.watch(w2), t.watch(b2)));
  };
  {
    Tape<double> t;
    t.backward(loss(t));
  }
  for (auto* p : {&w1, &b1, &w2, &b2}) {
    const auto num = finite_diff_grad([&] { Tape<double> t; return scalar_value(loss(t)); }, *p);
    CHECK(max_rel_error(p->grad, num) < 1e-6);
  }
}

TEST_CASE("gradient sweep over every op (short)") {
  for (const auto& r : testkit::gradient_sweep(3, 5, false)) {
    INFO(r.name);
    CHECK(r.worst < 1e-4);
  }
}
