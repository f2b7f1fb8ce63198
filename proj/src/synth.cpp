#include "slnet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace slnet {

namespace {

constexpr double kPi = std::numbers::pi;

struct Sampler {
  std::mt19937_64& rng;
  std::uniform_real_distribution<double> u{0.0, 1.0};
  double operator()() { return u(rng); }
  double range(double lo, double hi) { return lo + (hi - lo) * u(rng); }
};

void push(LabeledCloud& c, double x, double y, double z, int part) {
  c.coords.push_back(static_cast<float>(x));
  c.coords.push_back(static_cast<float>(y));
  c.coords.push_back(static_cast<float>(z));
  c.parts.push_back(part);
}

void sphere(LabeledCloud& c, std::size_t n, Sampler& s) {
  std::normal_distribution<double> g;
  for (std::size_t i = 0; i < n; ++i) {
    double x, y, z, r;
    do {
      x = g(s.rng);
      y = g(s.rng);
      z = g(s.rng);
      r = std::sqrt(x * x + y * y + z * z);
    } while (r < 1e-12);
    push(c, x / r, y / r, z / r, z / r >= 0.0 ? 0 : 1);
  }
}

// Parts: faces normal to x, y, z.
void cube(LabeledCloud& c, std::size_t n, Sampler& s) {
  for (std::size_t i = 0; i < n; ++i) {
    const int face = std::min(5, static_cast<int>(s() * 6.0));
    const double a = s.range(-1.0, 1.0), b = s.range(-1.0, 1.0), side = face % 2 ? 1.0 : -1.0;
    switch (face / 2) {
      case 0: push(c, side, a, b, 0); break;
      case 1: push(c, a, side, b, 1); break;
      default: push(c, a, b, side, 2); break;
    }
  }
}

// Parts: side wall, caps.
void cylinder(LabeledCloud& c, std::size_t n, Sampler& s) {
  const double r = s.range(0.5, 0.7), h = s.range(0.7, 0.9);
  const double side = 2.0 * kPi * r * 2.0 * h, caps = 2.0 * kPi * r * r;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = s.range(0.0, 2.0 * kPi);
    if (s() * (side + caps) < side) {
      push(c, r * std::cos(t), r * std::sin(t), s.range(-h, h), 0);
    } else {
      const double rr = r * std::sqrt(s());
      push(c, rr * std::cos(t), rr * std::sin(t), s() < 0.5 ? -h : h, 1);
    }
  }
}

// Parts: outer and inner half of the tube.
void torus(LabeledCloud& c, std::size_t n, Sampler& s) {
  const double big = s.range(0.65, 0.75), small = s.range(0.25, 0.32);
  for (std::size_t i = 0; i < n; ++i) {
    double u, v;
    do {  // area element is proportional to big + small * cos(v)
      v = s.range(0.0, 2.0 * kPi);
    } while (s() * (big + small) > big + small * std::cos(v));
    u = s.range(0.0, 2.0 * kPi);
    const double rho = big + small * std::cos(v);
    push(c, rho * std::cos(u), rho * std::sin(u), small * std::sin(v), std::cos(v) >= 0.0 ? 0 : 1);
  }
}

// Parts: slanted surface, base.
void cone(LabeledCloud& c, std::size_t n, Sampler& s) {
  const double r = s.range(0.6, 0.8), h = s.range(1.4, 1.8);
  const double slant = kPi * r * std::sqrt(r * r + h * h), base = kPi * r * r;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = s.range(0.0, 2.0 * kPi);
    if (s() * (slant + base) < slant) {
      const double f = std::sqrt(s());  // distance from the apex, area-uniform
      push(c, f * r * std::cos(t), f * r * std::sin(t), h / 2.0 - f * h, 0);
    } else {
      const double rr = r * std::sqrt(s());
      push(c, rr * std::cos(t), rr * std::sin(t), -h / 2.0, 1);
    }
  }
}

// FNV-1a: stable across platforms, unlike std::hash.
std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) h = (h ^ ch) * 1099511628211ull;
  return h;
}

void rotate_z(LabeledCloud& c, double angle) {
  const double cs = std::cos(angle), sn = std::sin(angle);
  for (std::size_t i = 0; i + 2 < c.coords.size(); i += 3) {
    const double x = c.coords[i], y = c.coords[i + 1];
    c.coords[i] = static_cast<float>(cs * x - sn * y);
    c.coords[i + 1] = static_cast<float>(sn * x + cs * y);
  }
}

}  // namespace

const std::vector<std::string>& synth_shape_names() {
  static const std::vector<std::string> names{"sphere", "cube", "cylinder", "torus", "cone"};
  return names;
}

std::size_t synth_part_count(const std::string& shape) {
  if (shape == "cube") return 3;
  if (shape == "sphere" || shape == "cylinder" || shape == "torus" || shape == "cone") return 2;
  throw std::invalid_argument("unknown synthetic shape '" + shape + "'");
}

LabeledCloud synth_shape(const std::string& shape, std::size_t n_points, std::mt19937_64& rng) {
  LabeledCloud c;
  c.coords.reserve(n_points * 3);
  c.parts.reserve(n_points);
  Sampler s{rng};
  if (shape == "sphere") sphere(c, n_points, s);
  else if (shape == "cube") cube(c, n_points, s);
  else if (shape == "cylinder") cylinder(c, n_points, s);
  else if (shape == "torus") torus(c, n_points, s);
  else if (shape == "cone") cone(c, n_points, s);
  else throw std::invalid_argument("unknown synthetic shape '" + shape + "'");
  return c;
}

SynthDataset synth_generate(const SynthSpec& spec) {
  if (spec.classes.empty()) throw std::invalid_argument("synth: no classes requested");
  if (spec.n_points < 64) throw std::invalid_argument("synth: n_points must be at least 64");
  if (spec.per_class == 0) throw std::invalid_argument("synth: per-class count must be positive");
  if (!(spec.noise >= 0.0)) throw std::invalid_argument("synth: noise must be non-negative");
  if (!(spec.test_fraction >= 0.0 && spec.test_fraction < 1.0)) {
    throw std::invalid_argument("synth: test fraction must lie in [0, 1)");
  }

  SynthDataset out;
  out.class_names = spec.classes;
  int next_part = 0;
  for (const auto& name : spec.classes) {
    const auto parts = static_cast<int>(synth_part_count(name));
    out.part_ranges.emplace_back(next_part, next_part + parts);
    next_part += parts;
  }

  const auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(spec.per_class)));
  for (std::size_t c = 0; c < spec.classes.size(); ++c) {
    std::vector<LabeledCloud> clouds;
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      // Each cloud has its own stream, so a cloud does not depend on the class list before it.
      std::seed_seq seq{spec.seed, name_hash(spec.classes[c]), static_cast<std::uint64_t>(i)};
      std::mt19937_64 rng(seq);
      auto cloud = synth_shape(spec.classes[c], spec.n_points, rng);
      rotate_z(cloud, std::uniform_real_distribution<double>(0.0, 2.0 * kPi)(rng));
      std::normal_distribution<double> jitter(0.0, spec.noise);
      if (spec.noise > 0.0) {
        for (auto& v : cloud.coords) v = static_cast<float>(v + jitter(rng));
      }
      normalize_unit_sphere(std::span<float>(cloud.coords));
      cloud.label = static_cast<int>(c);
      for (auto& p : cloud.parts) p += out.part_ranges[c].first;
      clouds.push_back(std::move(cloud));
    }
    std::vector<std::size_t> order(clouds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 split_rng(spec.seed * 7919ull + name_hash(spec.classes[c]));
    std::shuffle(order.begin(), order.end(), split_rng);
    for (std::size_t i = 0; i < order.size(); ++i) {
      (i < n_test ? out.test : out.train).push_back(std::move(clouds[order[i]]));
    }
  }
  return out;
}

}  // namespace slnet
