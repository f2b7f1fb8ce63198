#pragma once

// Four-stage hierarchical encoder with classification and part-segmentation
// heads.  Batches are processed as B clouds of n points stacked row-wise.

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "slnet/geom.hpp"
#include "slnet/gmu.hpp"
#include "slnet/layers.hpp"
#include "slnet/nape.hpp"

namespace slnet {

enum class Embedding { nape, mlp, gaussian, cosine };
enum class GmuPlacement { none, after_embedding, after_grouping, both };
enum class Sampling { fps, random };
enum class HeadKind { classify, part_segment };

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  std::size_t embed_dim = 16;
  Embedding embedding = Embedding::nape;
  GmuPlacement gmu_placement = GmuPlacement::after_embedding;
  GmuOrder gmu_order = GmuOrder::scale_shift;
  std::size_t neighbors = 32;
  std::array<std::size_t, 4> stage_depths{1, 1, 2, 1};
  std::array<std::size_t, 4> expansion{2, 2, 2, 1};
  double lrb_ratio = 0.25;
  Sampling sampling = Sampling::fps;
  std::size_t n_points = 1024;
  std::size_t n_classes = 40;
  HeadKind head = HeadKind::classify;
  std::size_t seg_parts = 0;     ///< part-segmentation output classes
  std::size_t n_categories = 0;  ///< object categories feeding the class-label embedding
  std::size_t class_embed_dim = 64;
  std::size_t classifier_hidden = 0;  ///< 0 selects 4 x final stage width
  std::size_t seg_hidden = 128;
  double dropout = 0.5;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  /// Apply the expansion layer before grouping (same result, fewer FLOPs).
  bool fuse_expansion = true;

  std::array<std::size_t, 4> widths() const;
  std::array<std::size_t, 4> level_points() const;  ///< points after each stage
  std::size_t lrb_hidden(std::size_t width) const;
  std::size_t head_hidden() const;
  bool gmu_after_embedding() const;
  bool gmu_after_grouping() const;
  NapeConfig nape() const;
  /// Throws ConfigError describing the first violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Presets for the compact and medium variants and the desk-scale tiny model.
ModelConfig slnet_s(std::size_t n_classes = 40);
ModelConfig slnet_m(std::size_t n_classes = 40);
ModelConfig slnet_s_tiny(std::size_t n_classes = 4);
/// ScanObjectNN presets: K=24, depths [1,1,3,1], no GMU.
ModelConfig slnet_s_scanobject(std::size_t n_classes = 15);
ModelConfig slnet_m_scanobject(std::size_t n_classes = 15);

/// Serialized as `key = value` lines; parse accepts exactly the keys written.
std::string to_text(const ModelConfig& cfg);
ModelConfig config_from_text(const std::string& text);
/// Applies one key/value pair; unknown keys and malformed values throw ConfigError.
void set_config_value(ModelConfig& cfg, const std::string& key, const std::string& value);
bool is_config_key(const std::string& key);

/// Value parsers shared by config readers; failures throw ConfigError naming `key`.
std::size_t parse_size_value(const std::string& key, const std::string& value);
double parse_double_value(const std::string& key, const std::string& value);
bool parse_bool_value(const std::string& key, const std::string& value);

template <typename T>
struct Batch {
  std::vector<T> coords;  ///< clouds * points * 3
  std::size_t clouds = 0;
  std::size_t points = 0;
  std::vector<int> categories;  ///< per-cloud object category (segmentation only)

  std::span<const T> cloud(std::size_t b) const {
    return std::span<const T>(coords).subspan(b * points * 3, points * 3);
  }
};

/// Resamples a cloud to exactly `n` points: truncation, or cyclic repetition
/// when shorter. Returns the chosen source indices.
std::vector<std::size_t> resample_indices(std::size_t available, std::size_t n);

/// Stacks clouds (each a flat N_i x 3 buffer) into a batch of n points each.
template <typename T>
Batch<T> make_batch(const std::vector<std::vector<T>>& clouds, std::size_t n, std::vector<int> categories = {});

/// One encoder level: stacked coordinates and features of every cloud.
template <typename T>
struct Level {
  std::vector<T> coords;  ///< clouds * points * 3
  std::size_t points = 0;
  Var<T> feats;  ///< [clouds * points x channels]
};

template <typename T>
struct EncoderOutput {
  std::vector<Level<T>> levels;  ///< level 0 is the embedding, then one per stage
  Var<T> global;                 ///< [clouds x final width]
};

template <typename T>
class Stage {
 public:
  Stage() = default;
  Stage(const std::string& name, const ModelConfig& cfg, std::size_t in_width, std::size_t width, std::size_t depth,
        bool gmu, std::mt19937_64& rng);

  /// prev -> next level. `seed` drives random sampling.
  Level<T> forward(const Level<T>& prev, std::size_t clouds, const Context<T>& ctx, std::uint64_t seed) const;
  void collect(StateRefs<T>& s);

  std::size_t in_width = 0;
  std::size_t width = 0;

 private:
  Var<T> expand(const Var<T>& feats, std::span<const T> coords, const NeighborIndex& nbr,
                const Context<T>& ctx) const;

  std::size_t k_ = 0;
  Sampling sampling_ = Sampling::fps;
  bool fuse_ = true;
  std::optional<Gmu<T>> gmu_;
  Linear<T> expand_;
  BatchNorm<T> expand_bn_;
  std::vector<Lrb<T>> blocks_;
};

template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const ModelConfig& cfg, std::mt19937_64& rng);

  EncoderOutput<T> forward(const Batch<T>& batch, const Context<T>& ctx) const;
  void collect(StateRefs<T>& s);

 private:
  Var<T> embed(const Batch<T>& batch, const Context<T>& ctx) const;

  ModelConfig cfg_;
  std::optional<Linear<T>> mlp_embed_;
  std::optional<Gmu<T>> gmu_;
  std::vector<Stage<T>> stages_;
};

template <typename T>
class ClassifierHead {
 public:
  ClassifierHead() = default;
  ClassifierHead(const ModelConfig& cfg, std::mt19937_64& rng);
  Var<T> forward(const Var<T>& global, const Context<T>& ctx) const;
  void collect(StateRefs<T>& s);

  Linear<T> fc1;
  Linear<T> fc2;
  double dropout = 0.5;
};

/// Feature propagation: interpolate coarse features to the finer level,
/// concatenate the skip features and apply a shared linear + BN + ReLU.
template <typename T>
class FpBlock {
 public:
  FpBlock() = default;
  FpBlock(const std::string& name, std::size_t coarse_width, std::size_t skip_width, std::size_t out, const ModelConfig& cfg,
          std::mt19937_64& rng);
  Var<T> forward(const Level<T>& coarse, const Var<T>& coarse_feats, const Level<T>& fine, std::size_t clouds,
                 const Context<T>& ctx) const;
  void collect(StateRefs<T>& s) { mlp.collect(s); }

  ConvBnRelu<T> mlp;
};

template <typename T>
class SegmentationHead {
 public:
  SegmentationHead() = default;
  SegmentationHead(const ModelConfig& cfg, std::mt19937_64& rng);
  /// Per-point logits [clouds * points x seg_parts].
  Var<T> forward(const EncoderOutput<T>& enc, const Batch<T>& batch, const Context<T>& ctx) const;
  void collect(StateRefs<T>& s);

 private:
  ModelConfig cfg_;
  std::vector<FpBlock<T>> fp_;
  Linear<T> class_embed_;
  ConvBnRelu<T> fuse_;
  Linear<T> out_;
};

template <typename T>
class SLNet {
 public:
  explicit SLNet(ModelConfig cfg, std::uint64_t seed = 0);
  SLNet(const SLNet&) = delete;
  SLNet& operator=(const SLNet&) = delete;

  /// Logits: [clouds x n_classes] or [clouds * points x seg_parts].
  Var<T> forward(const Batch<T>& batch, const Context<T>& ctx) const;
  EncoderOutput<T> encode(const Batch<T>& batch, const Context<T>& ctx) const;

  const ModelConfig& config() const { return cfg_; }
  const std::vector<Param<T>*>& parameters() const { return state_.params; }
  const std::vector<Buffer<T>>& buffers() const { return state_.buffers; }
  Param<T>* find_param(const std::string& name) const;

 private:
  ModelConfig cfg_;
  Encoder<T> encoder_;
  std::optional<ClassifierHead<T>> cls_;
  std::optional<SegmentationHead<T>> seg_;
  StateRefs<T> state_;
};

std::size_t count_params(const std::vector<Param<float>*>& params);
std::size_t count_params(const std::vector<Param<double>*>& params);

template <typename T>
std::size_t count_params(const SLNet<T>& model) {
  return count_params(model.parameters());
}

/// Copies parameter and buffer values between models with identical configs.
template <typename To, typename From>
void copy_state(SLNet<To>& dst, const SLNet<From>& src);

}  // namespace slnet
