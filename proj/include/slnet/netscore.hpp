#pragma once

// Accuracy-vs-cost scoring and the efficiency measurements that feed it.

#include <functional>
#include <iosfwd>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "slnet/backbone.hpp"

namespace slnet {

/// a: accuracy in percent; p: parameters in millions; m: FLOPs in billions;
/// t: latency in ms; r: peak memory in MB. t and r may be NaN when unknown.
struct EfficiencyRecord {
  std::string name;
  double a = 0.0;
  double p = 0.0;
  double m = 0.0;
  double t = 0.0;
  double r = 0.0;

  bool has_runtime() const;
};

/// 20 log10(a^2 / (sqrt(p m) * (t r)^(delta/4))). delta = 0 gives NetScore,
/// delta = 1 NetScore+.
double netscore(const EfficiencyRecord& rec, int delta);

struct BenchConfig {
  std::size_t warmup_iters = 10;
  std::size_t timed_iters = 100;
  std::size_t batch = 1;
  std::size_t n_points = 1024;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Serializes latency and memory measurements process-wide.
std::mutex& benchmark_mutex();

/// Declared FLOPs reported while `fn` runs.
double count_flops(const std::function<void()>& fn);

/// FLOPs of one eval-mode forward over `batch` clouds of `n_points` points.
double estimate_flops(const SLNet<float>& model, std::size_t n_points, std::size_t batch = 1);

/// A fixed random batch (points on the unit sphere, jittered) for benchmarking.
Batch<float> bench_batch(std::size_t batch, std::size_t n_points, std::uint64_t seed, std::size_t n_categories = 0);

/// Mean wall-clock milliseconds per sample over the timed forwards.
double measure_latency(const SLNet<float>& model, const BenchConfig& cfg);

/// Parameter bytes plus the high-water mark of tensor allocations made during
/// one forward, in MB (1 MB = 2^20 bytes).
double measure_peak_memory(const SLNet<float>& model, const BenchConfig& cfg);

/// Rank correlation with average ranks for ties.
double spearman(std::span<const double> xs, std::span<const double> ys);

/// CSV with header `name,acc,params_m,flops_g,latency_ms,mem_mb`; the last two
/// fields may be empty. Throws std::runtime_error naming the line on bad input.
std::vector<EfficiencyRecord> read_records(std::istream& in);
void write_record_header(std::ostream& out);
void write_record(std::ostream& out, const EfficiencyRecord& rec);

struct ScoredRecord {
  EfficiencyRecord rec;
  double netscore = 0.0;
  double netscore_plus = 0.0;  ///< NaN without runtime figures
};

/// Sorted by NetScore, best first.
std::vector<ScoredRecord> rank_records(const std::vector<EfficiencyRecord>& recs);
void write_ranked_table(std::ostream& out, const std::vector<ScoredRecord>& rows);
/// Columns `name,netscore,netscore_plus`.
void write_scores_csv(std::ostream& out, const std::vector<ScoredRecord>& rows);

}  // namespace slnet
