#include "slnet/netscore.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace slnet {

bool EfficiencyRecord::has_runtime() const { return std::isfinite(t) && std::isfinite(r); }

double netscore(const EfficiencyRecord& rec, int delta) {
  if (delta != 0 && delta != 1) throw std::invalid_argument("netscore: delta must be 0 or 1");
  if (!(rec.a > 0.0 && rec.a <= 100.0)) throw std::invalid_argument("netscore: accuracy must lie in (0, 100]");
  if (!(rec.p > 0.0) || !(rec.m > 0.0)) throw std::invalid_argument("netscore: params and FLOPs must be positive");
  double denom = std::sqrt(rec.p * rec.m);
  if (delta == 1) {
    if (!(rec.t > 0.0) || !(rec.r > 0.0)) {
      throw std::invalid_argument("netscore+: latency and memory must be positive");
    }
    denom *= std::pow(rec.t * rec.r, 0.25);
  }
  return 20.0 * std::log10(rec.a * rec.a / denom);
}

void BenchConfig::validate() const {
  if (warmup_iters < 1) throw std::invalid_argument("benchmark needs at least one warmup iteration");
  if (timed_iters < 10) throw std::invalid_argument("benchmark needs at least 10 timed iterations");
  if (batch == 0 || n_points == 0) throw std::invalid_argument("benchmark batch and points must be positive");
}

std::mutex& benchmark_mutex() {
  static std::mutex m;
  return m;
}

double count_flops(const std::function<void()>& fn) {
  FlopCounter counter;
  {
    FlopScope scope(counter);
    fn();
  }
  return counter.total();
}

Batch<float> bench_batch(std::size_t batch, std::size_t n_points, std::uint64_t seed, std::size_t n_categories) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g;
  std::vector<std::vector<float>> clouds(batch);
  for (auto& c : clouds) {
    c.resize(n_points * 3);
    for (std::size_t i = 0; i < n_points; ++i) {
      float x = g(rng), y = g(rng), z = g(rng);
      const float r = std::max(1e-6f, std::sqrt(x * x + y * y + z * z));
      c[3 * i] = x / r + 0.01f * g(rng);
      c[3 * i + 1] = y / r + 0.01f * g(rng);
      c[3 * i + 2] = z / r + 0.01f * g(rng);
    }
  }
  std::vector<int> cats;
  if (n_categories > 0) {
    for (std::size_t b = 0; b < batch; ++b) cats.push_back(static_cast<int>(b % n_categories));
  }
  return make_batch(clouds, n_points, std::move(cats));
}

namespace {

Batch<float> model_batch(const SLNet<float>& model, std::size_t batch, std::size_t n_points, std::uint64_t seed) {
  const auto& c = model.config();
  return bench_batch(batch, n_points, seed, c.head == HeadKind::part_segment ? c.n_categories : 0);
}

}  // namespace

double estimate_flops(const SLNet<float>& model, std::size_t n_points, std::size_t batch) {
  const auto b = model_batch(model, batch, n_points, 0);
  return count_flops([&] {
    Context<float> ctx;
    model.forward(b, ctx);
  });
}

double measure_latency(const SLNet<float>& model, const BenchConfig& cfg) {
  cfg.validate();
  std::lock_guard lock(benchmark_mutex());
  const auto b = model_batch(model, cfg.batch, cfg.n_points, cfg.seed);
  Context<float> ctx;
  for (std::size_t i = 0; i < cfg.warmup_iters; ++i) model.forward(b, ctx);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < cfg.timed_iters; ++i) model.forward(b, ctx);
  const auto t1 = std::chrono::steady_clock::now();
  const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  return ms / static_cast<double>(cfg.timed_iters * cfg.batch);
}

double measure_peak_memory(const SLNet<float>& model, const BenchConfig& cfg) {
  cfg.validate();
  std::lock_guard lock(benchmark_mutex());
  const auto b = model_batch(model, cfg.batch, cfg.n_points, cfg.seed);
  Context<float> ctx;
  reset_alloc_peak();
  const auto before = alloc_stats().current_bytes;
  model.forward(b, ctx);
  const auto peak = alloc_stats().peak_bytes;
  double param_bytes = 0.0;
  for (auto* p : model.parameters()) param_bytes += static_cast<double>(p->value.size() * sizeof(float));
  return (param_bytes + static_cast<double>(peak - before)) / (1024.0 * 1024.0);
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("spearman: sequences differ in length");
  if (xs.size() < 2) throw std::invalid_argument("spearman: needs at least two observations");
  const auto rx = average_ranks(xs), ry = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("spearman: a sequence is constant");
  return sxy / std::sqrt(sxx * syy);
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  for (auto& f : out) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? std::string() : f.substr(b, e - b + 1);
  }
  return out;
}

double parse_field(const std::string& f, const char* what, std::size_t line, bool optional) {
  if (f.empty()) {
    if (optional) return std::numeric_limits<double>::quiet_NaN();
    throw std::runtime_error("line " + std::to_string(line) + ": missing " + what);
  }
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(f, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != f.size()) throw std::runtime_error("line " + std::to_string(line) + ": bad " + what + " '" + f + "'");
  return v;
}

}  // namespace

std::vector<EfficiencyRecord> read_records(std::istream& in) {
  static const std::vector<std::string> header{"name", "acc", "params_m", "flops_g", "latency_ms", "mem_mb"};
  std::vector<EfficiencyRecord> out;
  std::string line;
  std::size_t no = 0;
  bool seen_header = false;
  while (std::getline(in, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto f = split_csv(line);
    if (!seen_header) {
      if (f != header) throw std::runtime_error("line " + std::to_string(no) + ": expected header name,acc,params_m,flops_g,latency_ms,mem_mb");
      seen_header = true;
      continue;
    }
    if (f.size() != header.size()) {
      throw std::runtime_error("line " + std::to_string(no) + ": expected 6 fields, got " + std::to_string(f.size()));
    }
    EfficiencyRecord r;
    r.name = f[0];
    r.a = parse_field(f[1], "acc", no, false);
    r.p = parse_field(f[2], "params_m", no, false);
    r.m = parse_field(f[3], "flops_g", no, false);
    r.t = parse_field(f[4], "latency_ms", no, true);
    r.r = parse_field(f[5], "mem_mb", no, true);
    out.push_back(r);
  }
  if (!seen_header) throw std::runtime_error("empty record file");
  return out;
}

void write_record_header(std::ostream& out) { out << "name,acc,params_m,flops_g,latency_ms,mem_mb\n"; }

void write_record(std::ostream& out, const EfficiencyRecord& rec) {
  auto num = [](double v) {
    if (!std::isfinite(v)) return std::string();
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
  };
  out << rec.name << ',' << num(rec.a) << ',' << num(rec.p) << ',' << num(rec.m) << ',' << num(rec.t) << ','
      << num(rec.r) << '\n';
}

std::vector<ScoredRecord> rank_records(const std::vector<EfficiencyRecord>& recs) {
  std::vector<ScoredRecord> rows;
  for (const auto& r : recs) {
    ScoredRecord s{r, netscore(r, 0), std::numeric_limits<double>::quiet_NaN()};
    if (r.has_runtime()) s.netscore_plus = netscore(r, 1);
    rows.push_back(s);
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const ScoredRecord& a, const ScoredRecord& b) { return a.netscore > b.netscore; });
  return rows;
}

void write_ranked_table(std::ostream& out, const std::vector<ScoredRecord>& rows) {
  std::size_t w = 4;
  for (const auto& r : rows) w = std::max(w, r.rec.name.size());
  out << std::left << std::setw(5) << "rank" << std::setw(static_cast<int>(w + 2)) << "name" << std::right
      << std::setw(10) << "netscore" << std::setw(14) << "netscore_plus" << '\n';
  std::size_t rank = 1;
  for (const auto& r : rows) {
    out << std::left << std::setw(5) << rank++ << std::setw(static_cast<int>(w + 2)) << r.rec.name << std::right
        << std::fixed << std::setprecision(2) << std::setw(10) << r.netscore << std::setw(14);
    if (std::isfinite(r.netscore_plus)) {
      out << r.netscore_plus;
    } else {
      out << "-";
    }
    out << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

void write_scores_csv(std::ostream& out, const std::vector<ScoredRecord>& rows) {
  out << "name,netscore,netscore_plus\n";
  for (const auto& r : rows) {
    out << r.rec.name << ',' << std::fixed << std::setprecision(4) << r.netscore << ',';
    if (std::isfinite(r.netscore_plus)) out << r.netscore_plus;
    out << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

}  // namespace slnet
