#pragma once

// Losses, optimizer, weight averaging, metrics and the training loop.

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "slnet/backbone.hpp"

namespace slnet {

/// Raised when training produces a non-finite loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

enum class LossKind { ce, wce, focal };

struct LossConfig {
  LossKind kind = LossKind::ce;
  double label_smoothing = 0.0;
  double gamma = 2.0;              ///< focal exponent
  std::vector<double> class_freqs;  ///< required by wce

  void validate() const;
};

/// w_c = 1/sqrt(f_c), rescaled to unit mean.
std::vector<double> class_weights(std::span<const double> freqs);

/// Softmax cross-entropy of logits [n x C] against integer targets. The target
/// distribution puts 1-eps on the true class and eps/(C-1) on the others.
/// With weights, sample i contributes w[t_i] and the sum is divided by
/// sum_i w[t_i]; otherwise the mean over samples is returned.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets, double eps = 0.0,
                     std::span<const double> weights = {});

/// mean_i (1 - p_t)^gamma * -log p_t.
template <typename T>
Var<T> focal_loss(const Var<T>& logits, std::span<const int> targets, double gamma);

template <typename T>
Var<T> compute_loss(const LossConfig& cfg, const Var<T>& logits, std::span<const int> targets);

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct OptimConfig {
  double lr0 = 0.1;
  double lr_min = 0.0;
  std::size_t epochs = 60;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double ema_rho = 0.999;  ///< 0 disables weight averaging

  void validate() const;
};

/// lr_min + (lr0 - lr_min) * (1 + cos(pi * epoch / epochs)) / 2.
double cosine_lr(double epoch, const OptimConfig& cfg);

/// v <- momentum * v + g + wd * p;  p <- p - lr * v.
template <typename T>
void sgd_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, double lr, double momentum,
              double weight_decay);

template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Param<T>*> params, double momentum, double weight_decay);
  void step(double lr);
  void zero_grad();

 private:
  std::vector<Param<T>*> params_;
  std::vector<Tensor<T>> velocity_;
  double momentum_;
  double weight_decay_;
};

/// shadow <- rho * shadow + (1 - rho) * value.
template <typename T>
void ema_update(Tensor<T>& shadow, const Tensor<T>& value, double rho);

/// Averaged copy of a model's parameters and batch-norm statistics. Early
/// steps use rho_t = min(rho, (1 + t) / (10 + t)) so the average is not
/// dominated by the initialization.
template <typename T>
class Ema {
 public:
  Ema(const SLNet<T>& model, double rho);

  void update(const SLNet<T>& model);
  /// Exchanges the model's values with the averaged ones; calling it twice restores the model.
  void swap(SLNet<T>& model);
  /// Replaces the averaged values (e.g. from a checkpoint); shapes must match.
  void restore(std::vector<Tensor<T>> shadow, std::size_t steps);

  double rho() const { return rho_; }
  std::size_t steps() const { return steps_; }
  /// Parameters first, then buffers, in the model's state order.
  std::vector<Tensor<T>>& shadow() { return shadow_; }
  const std::vector<Tensor<T>>& shadow() const { return shadow_; }

 private:
  double rho_;
  std::size_t steps_ = 0;
  std::vector<Tensor<T>> shadow_;
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// counts[true][predicted].
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0);

  void add(int truth, int predicted, std::uint64_t count = 1);
  void merge(const ConfusionMatrix& other);
  std::size_t classes() const { return n_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * n_ + predicted]; }
  std::uint64_t total() const;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

struct Accuracy {
  double oa = 0.0;
  double macc = 0.0;  ///< mean recall over classes present in the ground truth
};

Accuracy metrics(const ConfusionMatrix& conf);

/// Mean over classes with a non-empty union of TP / (TP + FP + FN).
double mean_iou(const ConfusionMatrix& conf);

struct IouScores {
  double ins_iou = 0.0;  ///< mean over shapes
  double cls_iou = 0.0;  ///< mean over categories of the mean shape IoU
};

/// Part ranges are [first, last) label intervals per category. A shape's IoU is
/// the mean over its category's parts, counting a part absent from both
/// prediction and truth as 1.
IouScores iou_metrics(std::span<const std::vector<int>> preds, std::span<const std::vector<int>> truth,
                      std::span<const int> categories, std::span<const std::pair<int, int>> part_ranges);

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct LabeledCloud {
  std::vector<float> coords;  ///< N x 3
  int label = 0;              ///< object class, or category for part segmentation
  std::vector<int> parts;     ///< per-point part labels (segmentation only)
};

struct TrainConfig {
  LossConfig loss;
  OptimConfig optim;
  std::size_t batch = 16;
  std::uint64_t seed = 1;
  bool augment = false;  ///< random anisotropic scale and shift per cloud
  std::size_t eval_batch = 32;
  std::size_t prefetch_threads = 1;  ///< 0 assembles batches on the training thread
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double oa = 0.0;  ///< training accuracy over the epoch (per point for segmentation)
};

/// `epoch=3 lr=0.0975 loss=0.6123 oa=0.8125`.
std::string format_log(const EpochLog& e);

struct ClassifierEval {
  ConfusionMatrix conf;
  Accuracy acc;
};

struct SegmenterEval {
  ConfusionMatrix conf;  ///< over part labels
  IouScores iou;
  double miou = 0.0;
};

/// Per-shape logits of a classifier evaluated in eval mode.
ClassifierEval evaluate_classifier(const SLNet<float>& model, std::span<const LabeledCloud> data,
                                   std::size_t batch = 32);
SegmenterEval evaluate_segmenter(const SLNet<float>& model, std::span<const LabeledCloud> data,
                                 std::span<const std::pair<int, int>> part_ranges, std::size_t batch = 32);

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains in place with SGD + cosine decay and, when enabled, keeps `ema`
/// updated after every step. Throws NumericError on a non-finite loss.
std::vector<EpochLog> train(SLNet<float>& model, Ema<float>* ema, std::span<const LabeledCloud> data,
                            const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Stacks the given clouds at the model's input size. Part labels follow the
/// same resampling.
Batch<float> assemble_batch(std::span<const LabeledCloud> data, std::span<const std::size_t> order,
                            std::size_t n_points, bool with_categories, std::vector<int>* point_targets);

}  // namespace slnet
