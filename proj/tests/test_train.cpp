#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "slnet/synth.hpp"
#include "slnet/train.hpp"
#include "testkit.hpp"

using namespace slnet;

namespace {

Var<double> logits(std::size_t n, std::size_t c, std::initializer_list<double> v) {
  return Var<double>::constant(Tensor<double>(Shape{n, c}, v));
}

double log_softmax(const std::vector<double>& z, std::size_t k) {
  double s = 0;
  for (double v : z) s += std::exp(v);
  return z[k] - std::log(s);
}

SynthDataset small_synth(std::size_t per_class, std::uint64_t seed) {
  SynthSpec spec;
  spec.n_points = 128;
  spec.per_class = per_class;
  spec.seed = seed;
  return synth_generate(spec);
}

}  // namespace

TEST_CASE("cross entropy") {
  const std::vector<int> t0{0};
  CHECK(scalar_value(cross_entropy(logits(1, 4, {0, 0, 0, 0}), t0)) == doctest::Approx(std::log(4.0)));
  CHECK(scalar_value(cross_entropy(logits(1, 4, {0, 0, 0, 0}), t0)) == doctest::Approx(1.3863).epsilon(1e-4));

  // smoothed target: 0.9 on the true class and 0.05 on the other two
  const std::vector<double> z{2, 1, 0};
  const double want = -(0.9 * log_softmax(z, 0) + 0.05 * log_softmax(z, 1) + 0.05 * log_softmax(z, 2));
  CHECK(scalar_value(cross_entropy(logits(1, 3, {2, 1, 0}), t0, 0.1)) == doctest::Approx(want).epsilon(1e-12));

  // weighted mean: two samples, weights by target
  const std::vector<int> t{0, 1};
  const std::vector<double> w{1.0, 3.0};
  const double l0 = -log_softmax({1, 0}, 0), l1 = -log_softmax({2, 0}, 1);
  CHECK(scalar_value(cross_entropy(logits(2, 2, {1, 0, 2, 0}), t, 0.0, w)) ==
        doctest::Approx((l0 + 3 * l1) / 4).epsilon(1e-12));
  CHECK(scalar_value(cross_entropy(logits(2, 2, {1, 0, 2, 0}), t)) == doctest::Approx((l0 + l1) / 2).epsilon(1e-12));

  CHECK_THROWS(cross_entropy(logits(1, 3, {0, 0, 0}), std::vector<int>{3}));
  CHECK_THROWS(cross_entropy(logits(1, 3, {0, 0, 0}), std::vector<int>{0, 1}));

  CHECK(class_weights(std::vector<double>{1, 4}) == std::vector<double>{4.0 / 3.0, 2.0 / 3.0});
}

TEST_CASE("focal loss") {
  const std::vector<int> t{2, 0};
  auto z = logits(2, 3, {0.3, -1, 0.7, 2, 0.1, -0.4});
  CHECK(scalar_value(focal_loss(z, t, 0.0)) == doctest::Approx(scalar_value(cross_entropy(z, t))).epsilon(1e-12));

  const double p0 = std::exp(log_softmax({0.3, -1, 0.7}, 2)), p1 = std::exp(log_softmax({2, 0.1, -0.4}, 0));
  const double want = ((1 - p0) * (1 - p0) * -std::log(p0) + (1 - p1) * (1 - p1) * -std::log(p1)) / 2;
  CHECK(scalar_value(focal_loss(z, t, 2.0)) == doctest::Approx(want).epsilon(1e-12));
  CHECK(scalar_value(focal_loss(z, t, 2.0)) < scalar_value(cross_entropy(z, t)));

  LossConfig cfg;
  cfg.kind = LossKind::wce;
  CHECK_THROWS(cfg.validate());
  cfg.class_freqs = {0.5, 0.5};
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("cosine schedule") {
  OptimConfig cfg;
  cfg.lr0 = 0.1;
  cfg.lr_min = 0.001;
  cfg.epochs = 60;
  CHECK(cosine_lr(0, cfg) == doctest::Approx(0.1));
  CHECK(cosine_lr(30, cfg) == doctest::Approx(0.0505));
  CHECK(cosine_lr(60, cfg) == doctest::Approx(0.001));
  CHECK(cosine_lr(15, cfg) == doctest::Approx(0.001 + 0.099 * (1 + std::cos(std::numbers::pi / 4)) / 2));
  for (int e = 1; e <= 60; ++e) CHECK(cosine_lr(e, cfg) < cosine_lr(e - 1, cfg));
}

TEST_CASE("sgd with momentum and weight decay") {
  Tensor<double> p(Shape{1}, 1.0), v(Shape{1}), g(Shape{1}, 0.5);
  sgd_step(p, g, v, 0.1, 0.9, 0.1);
  CHECK(v[0] == doctest::Approx(0.6));
  CHECK(p[0] == doctest::Approx(0.94));
  sgd_step(p, g, v, 0.1, 0.9, 0.1);
  CHECK(v[0] == doctest::Approx(1.134));
  CHECK(p[0] == doctest::Approx(0.8266));

  Param<double> w("w", Tensor<double>(Shape{2}, {1, -1}));
  Sgd<double> opt({&w}, 0.0, 0.0);
  w.grad = Tensor<double>(Shape{2}, {2, 4});
  opt.step(0.5);
  CHECK(w.value == Tensor<double>(Shape{2}, {0, -3}));
  opt.zero_grad();
  CHECK(w.grad == Tensor<double>(Shape{2}));
}

TEST_CASE("weight averaging") {
  Tensor<double> s(Shape{1}, 0.0);
  ema_update(s, Tensor<double>(Shape{1}, 1.0), 0.999);
  CHECK(s[0] == doctest::Approx(0.001));
  ema_update(s, Tensor<double>(Shape{1}, 5.0), 1.0);
  CHECK(s[0] == doctest::Approx(0.001));
  ema_update(s, Tensor<double>(Shape{1}, 5.0), 0.0);
  CHECK(s[0] == 5.0);
  // contraction toward a fixed target
  double gap = 5.0;
  for (int i = 0; i < 10; ++i) {
    ema_update(s, Tensor<double>(Shape{1}, 0.0), 0.9);
    CHECK(std::abs(s[0]) < gap);
    gap = std::abs(s[0]);
  }

  SLNet<float> model(slnet_s_tiny(4), 1);
  Ema<float> ema(model, 0.999);
  auto* p = model.find_param("head.fc2.bias");
  REQUIRE(p);
  const auto before = p->value;
  p->value.fill(1.0f);
  ema.update(model);  // warm-up rate 1/10 at the first step
  CHECK(ema.steps() == 1);
  ema.swap(model);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(p->value[i] == doctest::Approx(0.1f * before[i] + 0.9f));
  ema.swap(model);
  CHECK(p->value == Tensor<float>(before.shape(), 1.0f));
}

TEST_CASE("metrics") {
  ConfusionMatrix c(2);
  c.add(0, 0, 2);
  c.add(0, 1);
  c.add(1, 1);
  CHECK(c.total() == 4);
  const auto acc = metrics(c);
  CHECK(acc.oa == doctest::Approx(0.75));
  CHECK(acc.macc == doctest::Approx(5.0 / 6.0));
  CHECK(mean_iou(c) == doctest::Approx((2.0 / 3.0 + 0.5) / 2));

  // a class absent from the ground truth does not count toward mAcc
  ConfusionMatrix d(3);
  d.add(0, 0);
  d.add(1, 2);
  CHECK(metrics(d).macc == doctest::Approx(0.5));
  c.merge(ConfusionMatrix(2));
  CHECK(c.total() == 4);
  CHECK_THROWS(c.merge(d));
  CHECK_THROWS(c.add(2, 0));

  const std::vector<std::pair<int, int>> ranges{{0, 2}, {2, 4}};
  const std::vector<std::vector<int>> pred{{0, 0, 1, 1}, {2, 2, 2}}, truth{{0, 1, 1, 1}, {2, 2, 2}};
  const std::vector<int> cats{0, 1};
  const auto iou = iou_metrics(pred, truth, cats, ranges);
  const double shape0 = (0.5 + 2.0 / 3.0) / 2;  // part 3 is absent from both in shape 1, so it counts as 1
  CHECK(iou.ins_iou == doctest::Approx((shape0 + 1.0) / 2));
  CHECK(iou.cls_iou == doctest::Approx((shape0 + 1.0) / 2));
}

TEST_CASE("log line") {
  CHECK(format_log({3, 0.0975, 0.6123, 0.8125}) == "epoch=3 lr=0.0975 loss=0.6123 oa=0.8125");
}

TEST_CASE("training smoke") {
  const auto data = small_synth(10, 3);
  auto cfg = slnet_s_tiny(4);
  cfg.n_points = 128;
  TrainConfig tc;
  tc.optim.epochs = 2;
  tc.optim.lr0 = 0.01;
  tc.batch = 8;

  auto run = [&](std::size_t threads) {
    SLNet<float> model(cfg, 1);
    Ema<float> ema(model, 0.999);
    auto t = tc;
    t.prefetch_threads = threads;
    std::size_t calls = 0;
    auto logs = train(model, &ema, data.train, t, [&](const EpochLog&) { ++calls; });
    CHECK(calls == 2);
    CHECK(ema.steps() == 2 * ((data.train.size() + 7) / 8));
    return std::pair{logs, model.forward(make_batch<float>({data.test[0].coords}, 128), {}).value()};
  };
  const auto [a, la] = run(0);
  const auto [b, lb] = run(1);
  REQUIRE(a.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(std::isfinite(a[e].loss));
    CHECK(format_log(a[e]) == format_log(b[e]));
    CHECK(a[e].loss == b[e].loss);
  }
  CHECK(a[1].lr < a[0].lr);
  CHECK(la == lb);

  SLNet<float> model(cfg, 1);
  const auto ev = evaluate_classifier(model, data.test, 7);
  CHECK(ev.conf.total() == data.test.size());

  auto bad = tc;
  bad.optim.lr0 = 1e30;
  bad.optim.epochs = 3;
  SLNet<float> boom(cfg, 1);
  CHECK_THROWS_AS(train(boom, nullptr, data.train, bad), NumericError);
}

TEST_CASE("segmentation training smoke") {
  const auto data = small_synth(4, 5);
  auto cfg = slnet_s_tiny(4);
  cfg.n_points = 128;
  cfg.head = HeadKind::part_segment;
  cfg.n_categories = 4;
  cfg.seg_parts = static_cast<std::size_t>(data.part_ranges.back().second);
  cfg.class_embed_dim = 8;
  cfg.seg_hidden = 16;
  SLNet<float> model(cfg, 2);
  TrainConfig tc;
  tc.optim.epochs = 1;
  tc.optim.lr0 = 0.01;
  tc.batch = 4;
  const auto logs = train(model, nullptr, data.train, tc);
  CHECK(std::isfinite(logs[0].loss));
  const auto ev = evaluate_segmenter(model, data.test, data.part_ranges);
  CHECK(ev.conf.total() == data.test.size() * 128);
  CHECK(ev.iou.ins_iou >= 0.0);
  CHECK(ev.iou.ins_iou <= 1.0);
}
