#include "slnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <optional>
#include <sstream>
#include <thread>

namespace slnet {

void LossConfig::validate() const {
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw std::invalid_argument("label smoothing must lie in [0, 1)");
  }
  if (!(gamma >= 0.0)) throw std::invalid_argument("focal gamma must be non-negative");
  if (kind == LossKind::wce) {
    if (class_freqs.empty()) throw std::invalid_argument("weighted cross-entropy needs class frequencies");
    for (double f : class_freqs) {
      if (!(f > 0.0)) throw std::invalid_argument("class frequencies must be positive");
    }
  }
}

std::vector<double> class_weights(std::span<const double> freqs) {
  if (freqs.empty()) throw std::invalid_argument("class_weights: no classes");
  std::vector<double> w(freqs.size());
  double total = 0.0;
  for (std::size_t c = 0; c < freqs.size(); ++c) {
    if (!(freqs[c] > 0.0)) {
      throw std::invalid_argument("class_weights: frequency of class " + std::to_string(c) + " is not positive");
    }
    w[c] = 1.0 / std::sqrt(freqs[c]);
    total += w[c];
  }
  const double scale = static_cast<double>(w.size()) / total;
  for (auto& v : w) v *= scale;
  return w;
}

namespace {

template <typename T>
void check_targets(const Var<T>& logits, std::span<const int> targets, const char* what) {
  const auto& z = logits.value();
  if (z.rank() != 2) throw DimensionError(std::string(what) + ": logits must be [n x C], got " + shape_str(z.shape()));
  if (z.rows() != targets.size()) {
    throw DimensionError(std::string(what) + ": " + std::to_string(z.rows()) + " rows vs " +
                         std::to_string(targets.size()) + " targets");
  }
  if (z.rows() == 0) throw DimensionError(std::string(what) + ": empty batch");
  const auto classes = static_cast<int>(z.cols());
  for (int t : targets) {
    if (t < 0 || t >= classes) {
      throw std::out_of_range(std::string(what) + ": target " + std::to_string(t) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
  }
}

/// Row-wise softmax in double.
template <typename T>
std::vector<double> softmax_rows(const Tensor<T>& z, std::vector<double>* log_probs) {
  const std::size_t n = z.rows(), c = z.cols();
  std::vector<double> p(n * c);
  if (log_probs) log_probs->resize(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) {
      const double lp = static_cast<double>(row[j]) - lse;
      p[i * c + j] = std::exp(lp);
      if (log_probs) (*log_probs)[i * c + j] = lp;
    }
  }
  return p;
}

}  // namespace

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets, double eps, std::span<const double> weights) {
  check_targets(logits, targets, "cross_entropy");
  if (!(eps >= 0.0 && eps < 1.0)) throw std::invalid_argument("cross_entropy: smoothing must lie in [0, 1)");
  const auto& z = logits.value();
  const std::size_t n = z.rows(), c = z.cols();
  if (!weights.empty() && weights.size() != c) {
    throw DimensionError("cross_entropy: " + std::to_string(weights.size()) + " weights for " + std::to_string(c) +
                         " classes");
  }
  const double off = c > 1 ? eps / static_cast<double>(c - 1) : 0.0;
  const double on = c > 1 ? 1.0 - eps : 1.0;

  std::vector<double> lp;
  auto p = softmax_rows(z, &lp);
  std::vector<double> w(n, 1.0);
  if (!weights.empty()) {
    for (std::size_t i = 0; i < n; ++i) w[i] = weights[static_cast<std::size_t>(targets[i])];
  }
  double wsum = 0.0, loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto t = static_cast<std::size_t>(targets[i]);
    double li = 0.0;
    for (std::size_t j = 0; j < c; ++j) li -= (j == t ? on : off) * lp[i * c + j];
    loss += w[i] * li;
    wsum += w[i];
  }
  loss /= wsum;

  Tensor<T> out(Shape{1}, static_cast<T>(loss));
  std::vector<int> tg(targets.begin(), targets.end());
  return Tape<T>::record(std::move(out), {logits},
                         [p = std::move(p), w = std::move(w), tg = std::move(tg), wsum, on, off, n, c](
                             const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                           auto& gz = *gi[0];
                           const double g0 = static_cast<double>(g[0]);
                           for (std::size_t i = 0; i < n; ++i) {
                             const double s = g0 * w[i] / wsum;
                             const auto t = static_cast<std::size_t>(tg[i]);
                             for (std::size_t j = 0; j < c; ++j) {
                               gz[i * c + j] += static_cast<T>(s * (p[i * c + j] - (j == t ? on : off)));
                             }
                           }
                         });
}

template <typename T>
Var<T> focal_loss(const Var<T>& logits, std::span<const int> targets, double gamma) {
  check_targets(logits, targets, "focal_loss");
  if (!(gamma >= 0.0)) throw std::invalid_argument("focal_loss: gamma must be non-negative");
  const auto& z = logits.value();
  const std::size_t n = z.rows(), c = z.cols();
  std::vector<double> lp;
  auto p = softmax_rows(z, &lp);
  // d loss_i / d z_j = coef_i * (1[j == t] - p_j)
  std::vector<double> coef(n);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto t = static_cast<std::size_t>(targets[i]);
    const double pt = p[i * c + t], lpt = lp[i * c + t];
    const double q = std::max(0.0, 1.0 - pt);
    const double mod = gamma == 0.0 ? 1.0 : std::pow(q, gamma);
    loss -= mod * lpt;
    const double dmod = (gamma == 0.0 || q == 0.0) ? 0.0 : gamma * std::pow(q, gamma - 1.0) * pt;
    coef[i] = dmod * lpt - mod;
  }
  loss /= static_cast<double>(n);

  Tensor<T> out(Shape{1}, static_cast<T>(loss));
  std::vector<int> tg(targets.begin(), targets.end());
  return Tape<T>::record(std::move(out), {logits},
                         [p = std::move(p), coef = std::move(coef), tg = std::move(tg), n, c](
                             const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                           auto& gz = *gi[0];
                           const double g0 = static_cast<double>(g[0]) / static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i) {
                             const auto t = static_cast<std::size_t>(tg[i]);
                             for (std::size_t j = 0; j < c; ++j) {
                               gz[i * c + j] +=
                                   static_cast<T>(g0 * coef[i] * ((j == t ? 1.0 : 0.0) - p[i * c + j]));
                             }
                           }
                         });
}

template <typename T>
Var<T> compute_loss(const LossConfig& cfg, const Var<T>& logits, std::span<const int> targets) {
  switch (cfg.kind) {
    case LossKind::ce:
      return cross_entropy(logits, targets, cfg.label_smoothing);
    case LossKind::wce: {
      const auto w = class_weights(cfg.class_freqs);
      return cross_entropy(logits, targets, cfg.label_smoothing, std::span<const double>(w));
    }
    case LossKind::focal:
      return focal_loss(logits, targets, cfg.gamma);
  }
  throw std::logic_error("unknown loss kind");
}

// ---------------------------------------------------------------------------

void OptimConfig::validate() const {
  if (!(lr0 > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(lr_min >= 0.0 && lr_min <= lr0)) throw std::invalid_argument("lr_min must lie in [0, lr0]");
  if (epochs == 0) throw std::invalid_argument("epochs must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be non-negative");
  if (!(ema_rho >= 0.0 && ema_rho <= 1.0)) throw std::invalid_argument("ema_rho must lie in [0, 1]");
}

double cosine_lr(double epoch, const OptimConfig& cfg) {
  const double e = std::clamp(epoch, 0.0, static_cast<double>(cfg.epochs));
  const double cosv = std::cos(std::numbers::pi * e / static_cast<double>(cfg.epochs));
  return cfg.lr_min + (cfg.lr0 - cfg.lr_min) * 0.5 * (1.0 + cosv);
}

template <typename T>
void sgd_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, double lr, double momentum,
              double weight_decay) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw DimensionError("sgd_step: parameter " + shape_str(param.shape()) + ", gradient " + shape_str(grad.shape()) +
                         ", velocity " + shape_str(velocity.shape()));
  }
  const T mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), a = static_cast<T>(lr);
  T* __restrict p = param.data();
  T* __restrict v = velocity.data();
  const T* __restrict g = grad.data();
  for (std::size_t i = 0; i < param.size(); ++i) {
    v[i] = mu * v[i] + g[i] + wd * p[i];
    p[i] -= a * v[i];
  }
}

template <typename T>
Sgd<T>::Sgd(std::vector<Param<T>*> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.reserve(params_.size());
  for (auto* p : params_) velocity_.emplace_back(p->value.shape());
}

template <typename T>
void Sgd<T>::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    sgd_step(params_[i]->value, params_[i]->grad, velocity_[i], lr, momentum_, weight_decay_);
  }
}

template <typename T>
void Sgd<T>::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

template <typename T>
void ema_update(Tensor<T>& shadow, const Tensor<T>& value, double rho) {
  if (shadow.size() != value.size()) {
    throw DimensionError("ema_update: shadow " + shape_str(shadow.shape()) + " vs " + shape_str(value.shape()));
  }
  const T r = static_cast<T>(rho), q = static_cast<T>(1.0 - rho);
  T* __restrict s = shadow.data();
  const T* __restrict v = value.data();
  for (std::size_t i = 0; i < shadow.size(); ++i) s[i] = r * s[i] + q * v[i];
}

template <typename T>
Ema<T>::Ema(const SLNet<T>& model, double rho) : rho_(rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("ema: rho must lie in [0, 1]");
  for (auto* p : model.parameters()) shadow_.push_back(p->value);
  for (const auto& b : model.buffers()) shadow_.push_back(*b.value);
}

template <typename T>
void Ema<T>::update(const SLNet<T>& model) {
  const double t = static_cast<double>(steps_);
  const double r = std::min(rho_, (1.0 + t) / (10.0 + t));
  std::size_t i = 0;
  for (auto* p : model.parameters()) ema_update(shadow_[i++], p->value, r);
  for (const auto& b : model.buffers()) ema_update(shadow_[i++], *b.value, r);
  ++steps_;
}

template <typename T>
void Ema<T>::swap(SLNet<T>& model) {
  std::size_t i = 0;
  for (auto* p : model.parameters()) std::swap(p->value, shadow_[i++]);
  for (const auto& b : model.buffers()) std::swap(*b.value, shadow_[i++]);
}

template <typename T>
void Ema<T>::restore(std::vector<Tensor<T>> shadow, std::size_t steps) {
  if (shadow.size() != shadow_.size()) {
    throw DimensionError("ema restore: " + std::to_string(shadow.size()) + " tensors for " +
                         std::to_string(shadow_.size()) + " state entries");
  }
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    if (shadow[i].shape() != shadow_[i].shape()) {
      throw DimensionError("ema restore: entry " + std::to_string(i) + " has shape " + shape_str(shadow[i].shape()) +
                           ", expected " + shape_str(shadow_[i].shape()));
    }
  }
  shadow_ = std::move(shadow);
  steps_ = steps;
}

// ---------------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : n_(classes), counts_(classes * classes, 0) {}

void ConfusionMatrix::add(int truth, int predicted, std::uint64_t count) {
  const auto n = static_cast<int>(n_);
  if (truth < 0 || truth >= n || predicted < 0 || predicted >= n) {
    throw std::out_of_range("confusion matrix: label pair (" + std::to_string(truth) + ", " +
                            std::to_string(predicted) + ") outside " + std::to_string(n_) + " classes");
  }
  counts_[static_cast<std::size_t>(truth) * n_ + static_cast<std::size_t>(predicted)] += count;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw DimensionError("confusion matrix merge: class counts differ");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto v : counts_) t += v;
  return t;
}

Accuracy metrics(const ConfusionMatrix& conf) {
  const auto total = conf.total();
  if (total == 0) throw std::invalid_argument("metrics: empty confusion matrix");
  std::uint64_t diag = 0;
  double recall = 0.0;
  std::size_t present = 0;
  for (std::size_t i = 0; i < conf.classes(); ++i) {
    diag += conf.at(i, i);
    std::uint64_t row = 0;
    for (std::size_t j = 0; j < conf.classes(); ++j) row += conf.at(i, j);
    if (row == 0) continue;
    recall += static_cast<double>(conf.at(i, i)) / static_cast<double>(row);
    ++present;
  }
  return {static_cast<double>(diag) / static_cast<double>(total), recall / static_cast<double>(present)};
}

double mean_iou(const ConfusionMatrix& conf) {
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < conf.classes(); ++i) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < conf.classes(); ++j) {
      row += conf.at(i, j);
      col += conf.at(j, i);
    }
    const auto uni = row + col - conf.at(i, i);
    if (uni == 0) continue;
    sum += static_cast<double>(conf.at(i, i)) / static_cast<double>(uni);
    ++counted;
  }
  return counted ? sum / static_cast<double>(counted) : 0.0;
}

IouScores iou_metrics(std::span<const std::vector<int>> preds, std::span<const std::vector<int>> truth,
                      std::span<const int> categories, std::span<const std::pair<int, int>> part_ranges) {
  if (preds.size() != truth.size() || preds.size() != categories.size()) {
    throw DimensionError("iou_metrics: predictions, truth and categories must cover the same shapes");
  }
  if (preds.empty()) throw std::invalid_argument("iou_metrics: no shapes");
  std::vector<double> cat_sum(part_ranges.size(), 0.0);
  std::vector<std::size_t> cat_count(part_ranges.size(), 0);
  double ins = 0.0;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    const int cat = categories[s];
    if (cat < 0 || static_cast<std::size_t>(cat) >= part_ranges.size()) {
      throw std::out_of_range("iou_metrics: unknown category " + std::to_string(cat));
    }
    if (preds[s].size() != truth[s].size()) {
      throw DimensionError("iou_metrics: shape " + std::to_string(s) + " has mismatched point counts");
    }
    const auto [first, last] = part_ranges[static_cast<std::size_t>(cat)];
    if (last <= first) throw std::invalid_argument("iou_metrics: empty part range for category " + std::to_string(cat));
    double shape_iou = 0.0;
    for (int part = first; part < last; ++part) {
      std::size_t inter = 0, uni = 0;
      for (std::size_t i = 0; i < preds[s].size(); ++i) {
        const bool a = preds[s][i] == part, b = truth[s][i] == part;
        inter += a && b;
        uni += a || b;
      }
      shape_iou += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    }
    shape_iou /= static_cast<double>(last - first);
    ins += shape_iou;
    cat_sum[static_cast<std::size_t>(cat)] += shape_iou;
    ++cat_count[static_cast<std::size_t>(cat)];
  }
  IouScores out;
  out.ins_iou = ins / static_cast<double>(preds.size());
  std::size_t cats = 0;
  for (std::size_t c = 0; c < part_ranges.size(); ++c) {
    if (cat_count[c] == 0) continue;
    out.cls_iou += cat_sum[c] / static_cast<double>(cat_count[c]);
    ++cats;
  }
  out.cls_iou /= static_cast<double>(cats);
  return out;
}

// ---------------------------------------------------------------------------

std::string format_log(const EpochLog& e) {
  std::ostringstream os;
  os << "epoch=" << e.epoch << " lr=" << std::setprecision(6) << e.lr << " loss=" << std::fixed << std::setprecision(4)
     << e.loss << " oa=" << e.oa;
  return os.str();
}

Batch<float> assemble_batch(std::span<const LabeledCloud> data, std::span<const std::size_t> order,
                            std::size_t n_points, bool with_categories, std::vector<int>* point_targets) {
  std::vector<std::vector<float>> clouds;
  std::vector<int> cats;
  clouds.reserve(order.size());
  if (point_targets) point_targets->clear();
  for (auto i : order) {
    const auto& s = data[i];
    clouds.push_back(s.coords);
    if (with_categories) cats.push_back(s.label);
    if (point_targets) {
      const auto n = s.coords.size() / 3;
      if (s.parts.size() != n) {
        throw DimensionError("cloud " + std::to_string(i) + " has " + std::to_string(s.parts.size()) +
                             " part labels for " + std::to_string(n) + " points");
      }
      for (auto j : resample_indices(n, n_points)) point_targets->push_back(s.parts[j]);
    }
  }
  return make_batch(clouds, n_points, std::move(cats));
}

namespace {

constexpr std::uint64_t kAugmentStream = 0x9e3779b97f4a7c15ull;
constexpr std::uint64_t kDropoutStream = 0xd1b54a32d192ed03ull;

struct PreparedBatch {
  Batch<float> batch;
  std::vector<int> targets;
};

void augment_batch(Batch<float>& b, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> scale(2.0f / 3.0f, 1.5f), shift(-0.2f, 0.2f);
  for (std::size_t c = 0; c < b.clouds; ++c) {
    float s[3], t[3];
    for (int a = 0; a < 3; ++a) s[a] = scale(rng);
    for (int a = 0; a < 3; ++a) t[a] = shift(rng);
    float* p = b.coords.data() + c * b.points * 3;
    for (std::size_t i = 0; i < b.points; ++i) {
      for (int a = 0; a < 3; ++a) p[3 * i + a] = p[3 * i + a] * s[a] + t[a];
    }
  }
}

/// Builds the batches of one epoch, optionally on a worker thread feeding a
/// bounded queue. Batch contents depend only on (seed, epoch, index), so the
/// result is the same with or without the worker.
class EpochBatches {
 public:
  EpochBatches(std::span<const LabeledCloud> data, const ModelConfig& mcfg, const TrainConfig& cfg, std::size_t epoch)
      : data_(data), mcfg_(mcfg), cfg_(cfg), epoch_(epoch) {
    order_.resize(data.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    std::mt19937_64 rng(cfg.seed * 1000003ull + epoch);
    std::shuffle(order_.begin(), order_.end(), rng);
    // Drop a trailing batch of one: training-mode batch norm needs more than one cloud.
    count_ = (order_.size() + cfg.batch - 1) / cfg.batch;
    if (count_ > 1 && order_.size() % cfg.batch == 1) --count_;
    if (cfg.prefetch_threads > 0 && count_ > 1) worker_ = std::thread([this] { produce(); });
  }
  EpochBatches(const EpochBatches&) = delete;
  EpochBatches& operator=(const EpochBatches&) = delete;

  ~EpochBatches() {
    if (!worker_.joinable()) return;
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }

  std::size_t count() const { return count_; }

  PreparedBatch next() {
    if (!worker_.joinable()) return build(next_index_++);
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !queue_.empty() || error_; });
    if (queue_.empty()) std::rethrow_exception(error_);
    auto b = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return b;
  }

 private:
  static constexpr std::size_t kCapacity = 2;

  PreparedBatch build(std::size_t k) const {
    const std::size_t first = k * cfg_.batch;
    const std::size_t last = k + 1 == count_ ? order_.size() : std::min(order_.size(), first + cfg_.batch);
    std::span<const std::size_t> idx(order_.data() + first, last - first);
    PreparedBatch out;
    const bool seg = mcfg_.head == HeadKind::part_segment;
    out.batch = assemble_batch(data_, idx, mcfg_.n_points, seg, seg ? &out.targets : nullptr);
    if (!seg) {
      for (auto i : idx) out.targets.push_back(data_[i].label);
    }
    if (cfg_.augment) {
      std::mt19937_64 rng((cfg_.seed ^ kAugmentStream) + epoch_ * 65537ull + k);
      augment_batch(out.batch, rng);
    }
    return out;
  }

  void produce() {
    try {
      for (std::size_t k = 0; k < count_; ++k) {
        auto b = build(k);
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return queue_.size() < kCapacity || stop_; });
        if (stop_) return;
        queue_.push_back(std::move(b));
        cv_.notify_all();
      }
    } catch (...) {
      std::lock_guard lock(mu_);
      error_ = std::current_exception();
      cv_.notify_all();
    }
  }

  std::span<const LabeledCloud> data_;
  const ModelConfig& mcfg_;
  const TrainConfig& cfg_;
  std::size_t epoch_;
  std::vector<std::size_t> order_;
  std::size_t count_ = 0;
  std::size_t next_index_ = 0;

  std::thread worker_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<PreparedBatch> queue_;
  std::exception_ptr error_;
  bool stop_ = false;
};

std::vector<int> argmax_rows(const Tensor<float>& z) {
  std::vector<int> out(z.rows());
  const std::size_t c = z.cols();
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const float* row = z.data() + i * c;
    out[i] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

}  // namespace

std::vector<EpochLog> train(SLNet<float>& model, Ema<float>* ema, std::span<const LabeledCloud> data,
                            const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.loss.validate();
  cfg.optim.validate();
  if (cfg.batch < 2) throw std::invalid_argument("training batch must hold at least 2 clouds");
  if (data.size() < 2) throw std::invalid_argument("training needs at least 2 clouds");
  const auto& mcfg = model.config();

  Sgd<float> opt(model.parameters(), cfg.optim.momentum, cfg.optim.weight_decay);
  std::mt19937_64 rng(cfg.seed ^ kDropoutStream);
  std::vector<EpochLog> history;
  for (std::size_t epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    EpochBatches batches(data, mcfg, cfg, epoch);
    const double lr = cosine_lr(static_cast<double>(epoch), cfg.optim);
    double loss_sum = 0.0;
    std::size_t loss_n = 0, correct = 0, seen = 0;
    for (std::size_t k = 0; k < batches.count(); ++k) {
      auto pb = batches.next();
      Tape<float> tape;
      tape.watch_all(std::span<Param<float>* const>(model.parameters()));
      Context<float> ctx{&tape, true, &rng};
      auto logits = model.forward(pb.batch, ctx);
      auto loss = compute_loss(cfg.loss, logits, std::span<const int>(pb.targets));
      const double lv = scalar_value(loss);
      if (!std::isfinite(lv)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(k));
      }
      opt.zero_grad();
      tape.backward(loss);
      opt.step(lr);
      if (ema) ema->update(model);

      const auto pred = argmax_rows(logits.value());
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == pb.targets[i];
      seen += pred.size();
      loss_sum += lv * static_cast<double>(pb.batch.clouds);
      loss_n += pb.batch.clouds;
    }
    EpochLog log{epoch + 1, lr, loss_sum / static_cast<double>(loss_n),
                 static_cast<double>(correct) / static_cast<double>(seen)};
    history.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return history;
}

namespace {

template <typename Fn>
void for_each_batch(std::size_t total, std::size_t batch, Fn&& fn) {
  if (batch == 0) throw std::invalid_argument("evaluation batch must be positive");
  std::vector<std::size_t> idx;
  for (std::size_t first = 0; first < total; first += batch) {
    const std::size_t last = std::min(total, first + batch);
    idx.resize(last - first);
    for (std::size_t i = first; i < last; ++i) idx[i - first] = i;
    fn(std::span<const std::size_t>(idx));
  }
}

}  // namespace

ClassifierEval evaluate_classifier(const SLNet<float>& model, std::span<const LabeledCloud> data, std::size_t batch) {
  const auto& mcfg = model.config();
  if (mcfg.head != HeadKind::classify) throw std::invalid_argument("evaluate_classifier: model has no classifier head");
  ClassifierEval out{ConfusionMatrix(mcfg.n_classes), {}};
  for_each_batch(data.size(), batch, [&](std::span<const std::size_t> idx) {
    auto b = assemble_batch(data, idx, mcfg.n_points, false, nullptr);
    Context<float> ctx;
    const auto pred = argmax_rows(model.forward(b, ctx).value());
    for (std::size_t i = 0; i < idx.size(); ++i) out.conf.add(data[idx[i]].label, pred[i]);
  });
  if (out.conf.total() > 0) out.acc = metrics(out.conf);
  return out;
}

SegmenterEval evaluate_segmenter(const SLNet<float>& model, std::span<const LabeledCloud> data,
                                 std::span<const std::pair<int, int>> part_ranges, std::size_t batch) {
  const auto& mcfg = model.config();
  if (mcfg.head != HeadKind::part_segment) throw std::invalid_argument("evaluate_segmenter: model has no part head");
  SegmenterEval out{ConfusionMatrix(mcfg.seg_parts), {}, 0.0};
  std::vector<std::vector<int>> preds, truth;
  std::vector<int> cats;
  for_each_batch(data.size(), batch, [&](std::span<const std::size_t> idx) {
    std::vector<int> targets;
    auto b = assemble_batch(data, idx, mcfg.n_points, true, &targets);
    Context<float> ctx;
    const auto pred = argmax_rows(model.forward(b, ctx).value());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto first = pred.begin() + static_cast<std::ptrdiff_t>(i * mcfg.n_points);
      preds.emplace_back(first, first + static_cast<std::ptrdiff_t>(mcfg.n_points));
      const auto tfirst = targets.begin() + static_cast<std::ptrdiff_t>(i * mcfg.n_points);
      truth.emplace_back(tfirst, tfirst + static_cast<std::ptrdiff_t>(mcfg.n_points));
      cats.push_back(data[idx[i]].label);
      for (std::size_t j = 0; j < mcfg.n_points; ++j) out.conf.add(truth.back()[j], preds.back()[j]);
    }
  });
  if (!preds.empty()) {
    out.iou = iou_metrics(preds, truth, cats, part_ranges);
    out.miou = mean_iou(out.conf);
  }
  return out;
}

#define SLNET_TRAIN_INSTANTIATE(T)                                                                             \
  template Var<T> cross_entropy(const Var<T>&, std::span<const int>, double, std::span<const double>);        \
  template Var<T> focal_loss(const Var<T>&, std::span<const int>, double);                                    \
  template Var<T> compute_loss(const LossConfig&, const Var<T>&, std::span<const int>);                       \
  template void sgd_step(Tensor<T>&, const Tensor<T>&, Tensor<T>&, double, double, double);                   \
  template void ema_update(Tensor<T>&, const Tensor<T>&, double);                                             \
  template class Sgd<T>;                                                                                      \
  template class Ema<T>;

SLNET_TRAIN_INSTANTIATE(float)
SLNET_TRAIN_INSTANTIATE(double)

}  // namespace slnet
