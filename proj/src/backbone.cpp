#include "slnet/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <unordered_set>

namespace slnet {

// ---------------------------------------------------------------------------
// ModelConfig
// ---------------------------------------------------------------------------

std::array<std::size_t, 4> ModelConfig::widths() const {
  std::array<std::size_t, 4> w{};
  std::size_t prev = embed_dim;
  for (std::size_t s = 0; s < 4; ++s) {
    w[s] = prev * expansion[s];
    prev = w[s];
  }
  return w;
}

std::array<std::size_t, 4> ModelConfig::level_points() const {
  return {n_points / 2, n_points / 4, n_points / 8, n_points / 16};
}

std::size_t ModelConfig::lrb_hidden(std::size_t width) const {
  return static_cast<std::size_t>(std::lround(static_cast<double>(width) * lrb_ratio));
}

std::size_t ModelConfig::head_hidden() const { return classifier_hidden ? classifier_hidden : 4 * widths()[3]; }

bool ModelConfig::gmu_after_embedding() const {
  return gmu_placement == GmuPlacement::after_embedding || gmu_placement == GmuPlacement::both;
}

bool ModelConfig::gmu_after_grouping() const {
  return gmu_placement == GmuPlacement::after_grouping || gmu_placement == GmuPlacement::both;
}

NapeConfig ModelConfig::nape() const {
  NapeConfig n;
  n.dim = embed_dim;
  n.basis = embedding == Embedding::gaussian ? NapeBasis::gaussian
            : embedding == Embedding::cosine ? NapeBasis::cosine
                                             : NapeBasis::adaptive;
  return n;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (embed_dim == 0) fail("embed_dim must be positive");
  if (neighbors == 0) fail("neighbors must be positive");
  for (auto e : expansion) {
    if (e == 0) fail("expansion factors must be positive");
  }
  bool ratio_ok = false;
  for (double r : {0.125, 0.25, 0.5, 1.0}) ratio_ok |= std::abs(lrb_ratio - r) < 1e-9;
  if (!ratio_ok) fail("lrb_ratio must be one of 0.125, 0.25, 0.5, 1");
  for (auto w : widths()) {
    if (lrb_hidden(w) < 1) fail("lrb bottleneck width rounds to zero for stage width " + std::to_string(w));
  }
  if (n_points < 16 || n_points % 16 != 0) fail("n_points must be a positive multiple of 16");
  if (head == HeadKind::classify && n_classes < 2) fail("n_classes must be at least 2");
  if (head == HeadKind::part_segment) {
    if (seg_parts < 2) fail("seg_parts must be at least 2 for part segmentation");
    if (n_categories < 1) fail("n_categories must be positive for part segmentation");
    if (class_embed_dim == 0 || seg_hidden == 0) fail("segmentation head widths must be positive");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) fail("bn_momentum must lie in (0, 1]");
  if (!(bn_eps > 0.0)) fail("bn_eps must be positive");
}

ModelConfig slnet_s(std::size_t n_classes) {
  ModelConfig c;
  c.n_classes = n_classes;
  return c;
}

ModelConfig slnet_m(std::size_t n_classes) {
  ModelConfig c = slnet_s(n_classes);
  c.embed_dim = 32;
  return c;
}

ModelConfig slnet_s_tiny(std::size_t n_classes) {
  ModelConfig c = slnet_s(n_classes);
  c.n_points = 256;
  c.neighbors = 8;
  return c;
}

ModelConfig slnet_s_scanobject(std::size_t n_classes) {
  ModelConfig c = slnet_s(n_classes);
  c.neighbors = 24;
  c.stage_depths = {1, 1, 3, 1};
  c.gmu_placement = GmuPlacement::none;
  return c;
}

ModelConfig slnet_m_scanobject(std::size_t n_classes) {
  ModelConfig c = slnet_s_scanobject(n_classes);
  c.embed_dim = 32;
  return c;
}

// ---------------------------------------------------------------------------
// Config text
// ---------------------------------------------------------------------------

namespace {

template <typename E>
struct EnumNames;

template <>
struct EnumNames<Embedding> {
  static constexpr std::array<std::pair<Embedding, const char*>, 4> values{
      {{Embedding::nape, "nape"}, {Embedding::mlp, "mlp"}, {Embedding::gaussian, "gaussian"}, {Embedding::cosine, "cosine"}}};
};
template <>
struct EnumNames<GmuPlacement> {
  static constexpr std::array<std::pair<GmuPlacement, const char*>, 4> values{{{GmuPlacement::none, "none"},
                                                                               {GmuPlacement::after_embedding, "after_embedding"},
                                                                               {GmuPlacement::after_grouping, "after_grouping"},
                                                                               {GmuPlacement::both, "both"}}};
};
template <>
struct EnumNames<GmuOrder> {
  static constexpr std::array<std::pair<GmuOrder, const char*>, 2> values{
      {{GmuOrder::scale_shift, "scale_shift"}, {GmuOrder::shift_scale, "shift_scale"}}};
};
template <>
struct EnumNames<Sampling> {
  static constexpr std::array<std::pair<Sampling, const char*>, 2> values{{{Sampling::fps, "fps"}, {Sampling::random, "random"}}};
};
template <>
struct EnumNames<HeadKind> {
  static constexpr std::array<std::pair<HeadKind, const char*>, 2> values{
      {{HeadKind::classify, "classify"}, {HeadKind::part_segment, "part_segment"}}};
};

template <typename E>
std::string enum_name(E e) {
  for (const auto& [v, name] : EnumNames<E>::values) {
    if (v == e) return name;
  }
  return "?";
}

template <typename E>
E parse_enum(const std::string& key, const std::string& s) {
  std::string options;
  for (const auto& [v, name] : EnumNames<E>::values) {
    if (s == name) return v;
    options += options.empty() ? name : std::string("|") + name;
  }
  throw ConfigError(key + ": expected " + options + ", got '" + s + "'");
}

std::size_t parse_size(const std::string& key, const std::string& s) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
  }
  if (pos != s.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
  return static_cast<std::size_t>(v);
}

double parse_double(const std::string& key, const std::string& s) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  }
  if (pos != s.size() || !std::isfinite(v)) throw ConfigError(key + ": expected a number, got '" + s + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": expected true|false, got '" + s + "'");
}

std::array<std::size_t, 4> parse_quad(const std::string& key, const std::string& s) {
  std::array<std::size_t, 4> out{};
  std::stringstream ss(s);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (i >= 4) throw ConfigError(key + ": expected 4 comma-separated integers");
    out[i++] = parse_size(key, item);
  }
  if (i != 4) throw ConfigError(key + ": expected 4 comma-separated integers");
  return out;
}

std::string quad_str(const std::array<std::size_t, 4>& q) {
  return std::to_string(q[0]) + "," + std::to_string(q[1]) + "," + std::to_string(q[2]) + "," + std::to_string(q[3]);
}

std::string num_str(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "embed_dim", "embedding",    "gmu_placement", "gmu_order",       "neighbors",    "stage_depths",
      "expansion", "lrb_ratio",    "sampling",      "n_points",        "n_classes",    "head",
      "seg_parts", "n_categories", "class_embed_dim", "classifier_hidden", "seg_hidden", "dropout",
      "bn_momentum", "bn_eps",     "fuse_expansion"};
  return keys;
}

}  // namespace

bool is_config_key(const std::string& key) {
  const auto& keys = config_keys();
  return std::find(keys.begin(), keys.end(), key) != keys.end();
}

std::size_t parse_size_value(const std::string& key, const std::string& value) { return parse_size(key, value); }
double parse_double_value(const std::string& key, const std::string& value) { return parse_double(key, value); }
bool parse_bool_value(const std::string& key, const std::string& value) { return parse_bool(key, value); }

void set_config_value(ModelConfig& c, const std::string& key, const std::string& v) {
  if (key == "embed_dim") c.embed_dim = parse_size(key, v);
  else if (key == "embedding") c.embedding = parse_enum<Embedding>(key, v);
  else if (key == "gmu_placement") c.gmu_placement = parse_enum<GmuPlacement>(key, v);
  else if (key == "gmu_order") c.gmu_order = parse_enum<GmuOrder>(key, v);
  else if (key == "neighbors") c.neighbors = parse_size(key, v);
  else if (key == "stage_depths") c.stage_depths = parse_quad(key, v);
  else if (key == "expansion") c.expansion = parse_quad(key, v);
  else if (key == "lrb_ratio") c.lrb_ratio = parse_double(key, v);
  else if (key == "sampling") c.sampling = parse_enum<Sampling>(key, v);
  else if (key == "n_points") c.n_points = parse_size(key, v);
  else if (key == "n_classes") c.n_classes = parse_size(key, v);
  else if (key == "head") c.head = parse_enum<HeadKind>(key, v);
  else if (key == "seg_parts") c.seg_parts = parse_size(key, v);
  else if (key == "n_categories") c.n_categories = parse_size(key, v);
  else if (key == "class_embed_dim") c.class_embed_dim = parse_size(key, v);
  else if (key == "classifier_hidden") c.classifier_hidden = parse_size(key, v);
  else if (key == "seg_hidden") c.seg_hidden = parse_size(key, v);
  else if (key == "dropout") c.dropout = parse_double(key, v);
  else if (key == "bn_momentum") c.bn_momentum = parse_double(key, v);
  else if (key == "bn_eps") c.bn_eps = parse_double(key, v);
  else if (key == "fuse_expansion") c.fuse_expansion = parse_bool(key, v);
  else throw ConfigError("unknown model key '" + key + "'");
}

std::string to_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "embed_dim = " << c.embed_dim << '\n'
     << "embedding = " << enum_name(c.embedding) << '\n'
     << "gmu_placement = " << enum_name(c.gmu_placement) << '\n'
     << "gmu_order = " << enum_name(c.gmu_order) << '\n'
     << "neighbors = " << c.neighbors << '\n'
     << "stage_depths = " << quad_str(c.stage_depths) << '\n'
     << "expansion = " << quad_str(c.expansion) << '\n'
     << "lrb_ratio = " << num_str(c.lrb_ratio) << '\n'
     << "sampling = " << enum_name(c.sampling) << '\n'
     << "n_points = " << c.n_points << '\n'
     << "n_classes = " << c.n_classes << '\n'
     << "head = " << enum_name(c.head) << '\n'
     << "seg_parts = " << c.seg_parts << '\n'
     << "n_categories = " << c.n_categories << '\n'
     << "class_embed_dim = " << c.class_embed_dim << '\n'
     << "classifier_hidden = " << c.classifier_hidden << '\n'
     << "seg_hidden = " << c.seg_hidden << '\n'
     << "dropout = " << num_str(c.dropout) << '\n'
     << "bn_momentum = " << num_str(c.bn_momentum) << '\n'
     << "bn_eps = " << num_str(c.bn_eps) << '\n'
     << "fuse_expansion = " << (c.fuse_expansion ? "true" : "false") << '\n';
  return os.str();
}

ModelConfig config_from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t\r"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    set_config_value(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

std::vector<std::size_t> resample_indices(std::size_t available, std::size_t n) {
  if (available == 0) throw std::invalid_argument("cannot resample an empty cloud");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i % available;
  return idx;
}

template <typename T>
Batch<T> make_batch(const std::vector<std::vector<T>>& clouds, std::size_t n, std::vector<int> categories) {
  Batch<T> b;
  b.clouds = clouds.size();
  b.points = n;
  b.coords.reserve(clouds.size() * n * 3);
  for (const auto& c : clouds) {
    const auto idx = resample_indices(point_count(std::span<const T>(c)), n);
    const auto pts = gather_points(std::span<const T>(c), std::span<const std::size_t>(idx));
    b.coords.insert(b.coords.end(), pts.begin(), pts.end());
  }
  b.categories = std::move(categories);
  return b;
}

namespace {

template <typename T>
std::size_t distinct_points(std::span<const T> coords) {
  std::vector<std::array<T, 3>> pts(coords.size() / 3);
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = {coords[3 * i], coords[3 * i + 1], coords[3 * i + 2]};
  std::sort(pts.begin(), pts.end());
  return static_cast<std::size_t>(std::unique(pts.begin(), pts.end()) - pts.begin());
}

/// Row index of the owning cloud, repeated `per` times for each cloud.
std::vector<std::size_t> broadcast_index(std::size_t clouds, std::size_t per) {
  std::vector<std::size_t> idx(clouds * per);
  for (std::size_t b = 0; b < clouds; ++b) std::fill_n(idx.begin() + static_cast<std::ptrdiff_t>(b * per), per, b);
  return idx;
}

/// Max over the points of each cloud: [clouds * per x c] -> [clouds x c].
template <typename T>
Var<T> pool_clouds(const Var<T>& feats, std::size_t clouds, std::size_t per) {
  return ops::max_reduce(ops::reshape(feats, Shape{clouds, per, feats.cols()}), 1).values;
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage
// ---------------------------------------------------------------------------

template <typename T>
Stage<T>::Stage(const std::string& name, const ModelConfig& cfg, std::size_t in_width_, std::size_t width_,
                std::size_t depth, bool gmu, std::mt19937_64& rng)
    : in_width(in_width_),
      width(width_),
      k_(cfg.neighbors),
      sampling_(cfg.sampling),
      fuse_(cfg.fuse_expansion && !gmu) {
  const T mom = static_cast<T>(cfg.bn_momentum), eps = static_cast<T>(cfg.bn_eps);
  if (gmu) gmu_.emplace(name + ".gmu", in_width + 3, cfg.gmu_order);
  expand_ = Linear<T>(name + ".expand", in_width + 3, width, rng);
  expand_bn_ = BatchNorm<T>(name + ".expand_bn", width, mom, eps);
  for (std::size_t d = 0; d < depth; ++d) {
    blocks_.emplace_back(name + ".lrb" + std::to_string(d), width, cfg.lrb_hidden(width), rng, mom, eps);
  }
}

template <typename T>
Var<T> Stage<T>::expand(const Var<T>& feats, std::span<const T> coords, const NeighborIndex& nbr,
                        const Context<T>& ctx) const {
  const std::size_t m = nbr.centers.size();
  if (!fuse_) {
    auto h1 = relative_group(feats, coords, nbr);
    if (gmu_) h1 = gmu_->forward(h1, ctx);
    return expand_.forward(h1, ctx);
  }
  // The expansion is linear, so W([f_j||x_j] - [f_i||x_i]) + b equals
  // Wz_j - Wz_i + b: project every source point once, then group.
  const std::size_t n = point_count(coords);
  auto xyz = Var<T>::constant(Tensor<T>(Shape{n, 3}, coords));
  auto joint = ops::concat_cols(std::vector<Var<T>>{feats, xyz});
  auto proj = ops::matmul(joint, ctx.param(expand_.weight));
  std::vector<std::size_t> centers(nbr.neighbors.size());
  for (std::size_t i = 0; i < m; ++i) {
    std::fill_n(centers.begin() + static_cast<std::ptrdiff_t>(i * nbr.k), nbr.k, nbr.centers[i]);
  }
  const auto bias = ctx.param(expand_.bias);
  return ops::gather_diff(proj, std::span<const std::size_t>(nbr.neighbors), std::span<const std::size_t>(centers),
                          Shape{m, nbr.k, width}, &bias);
}

template <typename T>
Level<T> Stage<T>::forward(const Level<T>& prev, std::size_t clouds, const Context<T>& ctx,
                           std::uint64_t seed) const {
  const std::size_t n_prev = prev.points;
  const std::size_t m = n_prev / 2;
  if (prev.feats.cols() != in_width) {
    throw DimensionError("stage expects " + std::to_string(in_width) + " input channels, got " +
                         std::to_string(prev.feats.cols()));
  }
  NeighborIndex all;
  all.k = k_;
  all.centers.reserve(clouds * m);
  all.neighbors.reserve(clouds * m * k_);
  Level<T> next;
  next.points = m;
  next.coords.reserve(clouds * m * 3);
  for (std::size_t b = 0; b < clouds; ++b) {
    auto cloud = std::span<const T>(prev.coords).subspan(b * n_prev * 3, n_prev * 3);
    const auto centers = sampling_ == Sampling::fps ? fps(cloud, m) : random_sample(n_prev, m, seed + b);
    const auto nbr = group_neighbors(cloud, std::span<const std::size_t>(centers), k_);
    const std::size_t off = b * n_prev;
    for (auto c : centers) all.centers.push_back(off + c);
    for (auto j : nbr.neighbors) all.neighbors.push_back(off + j);
    all.sq_dists.insert(all.sq_dists.end(), nbr.sq_dists.begin(), nbr.sq_dists.end());
    const auto pts = gather_points(cloud, std::span<const std::size_t>(centers));
    next.coords.insert(next.coords.end(), pts.begin(), pts.end());
  }

  auto h = ops::relu(expand_bn_.forward(expand(prev.feats, std::span<const T>(prev.coords), all, ctx), ctx));
  for (const auto& blk : blocks_) h = blk.forward(h, ctx);
  next.feats = ops::max_reduce(h, 1).values;
  return next;
}

template <typename T>
void Stage<T>::collect(StateRefs<T>& s) {
  if (gmu_) gmu_->collect(s);
  expand_.collect(s);
  expand_bn_.collect(s);
  for (auto& b : blocks_) b.collect(s);
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

template <typename T>
Encoder<T>::Encoder(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  if (cfg.embedding == Embedding::mlp) mlp_embed_.emplace("embed.mlp", 3, cfg.embed_dim, rng);
  if (cfg.gmu_after_embedding()) gmu_.emplace("embed.gmu", cfg.embed_dim, cfg.gmu_order);
  const auto w = cfg.widths();
  std::size_t in = cfg.embed_dim;
  for (std::size_t s = 0; s < 4; ++s) {
    stages_.emplace_back("stage" + std::to_string(s + 1), cfg, in, w[s], cfg.stage_depths[s],
                         s == 0 && cfg.gmu_after_grouping(), rng);
    in = w[s];
  }
}

template <typename T>
Var<T> Encoder<T>::embed(const Batch<T>& batch, const Context<T>& ctx) const {
  const std::size_t total = batch.clouds * batch.points;
  Var<T> x;
  if (mlp_embed_) {
    auto xyz = Var<T>::constant(Tensor<T>(Shape{total, 3}, std::span<const T>(batch.coords)));
    x = ops::relu(mlp_embed_->forward(xyz, ctx));
  } else {
    const auto nc = cfg_.nape();
    Tensor<T> e(Shape{total, cfg_.embed_dim});
    for (std::size_t b = 0; b < batch.clouds; ++b) {
      const auto part = nape_embed(batch.cloud(b), nc);
      std::copy(part.values().begin(), part.values().end(), e.data() + b * batch.points * cfg_.embed_dim);
    }
    x = Var<T>::constant(std::move(e));
  }
  if (gmu_) x = gmu_->forward(x, ctx);
  return x;
}

template <typename T>
EncoderOutput<T> Encoder<T>::forward(const Batch<T>& batch, const Context<T>& ctx) const {
  if (batch.points != cfg_.n_points) {
    throw DimensionError("batch has " + std::to_string(batch.points) + " points per cloud, model expects " +
                         std::to_string(cfg_.n_points));
  }
  if (batch.clouds == 0) throw DimensionError("empty batch");
  if (batch.coords.size() != batch.clouds * batch.points * 3) throw DimensionError("batch coordinate buffer size");
  for (std::size_t b = 0; b < batch.clouds; ++b) {
    if (distinct_points(batch.cloud(b)) < cfg_.n_points / 16) {
      throw std::invalid_argument("cloud " + std::to_string(b) + " has fewer than " + std::to_string(cfg_.n_points / 16) +
                                  " distinct points");
    }
  }

  std::uint64_t seed = 0x51e7;
  if (cfg_.sampling == Sampling::random && ctx.rng) seed = (*ctx.rng)();

  EncoderOutput<T> out;
  Level<T> level0;
  level0.coords = batch.coords;
  level0.points = batch.points;
  level0.feats = embed(batch, ctx);
  out.levels.push_back(std::move(level0));
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    out.levels.push_back(stages_[s].forward(out.levels.back(), batch.clouds, ctx, seed + 7919 * s * batch.clouds));
  }
  const auto& last = out.levels.back();
  out.global = pool_clouds(last.feats, batch.clouds, last.points);
  return out;
}

template <typename T>
void Encoder<T>::collect(StateRefs<T>& s) {
  if (mlp_embed_) mlp_embed_->collect(s);
  if (gmu_) gmu_->collect(s);
  for (auto& st : stages_) st.collect(s);
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

namespace {

template <typename T>
Var<T> maybe_dropout(const Var<T>& x, double p, const Context<T>& ctx) {
  if (!ctx.training || p == 0.0) return x;
  if (!ctx.rng) throw std::logic_error("training-mode dropout needs a random source in the context");
  return ops::dropout(x, p, *ctx.rng);
}

}  // namespace

template <typename T>
ClassifierHead<T>::ClassifierHead(const ModelConfig& cfg, std::mt19937_64& rng)
    : fc1("head.fc1", cfg.widths()[3], cfg.head_hidden(), rng),
      fc2("head.fc2", cfg.head_hidden(), cfg.n_classes, rng),
      dropout(cfg.dropout) {}

template <typename T>
Var<T> ClassifierHead<T>::forward(const Var<T>& global, const Context<T>& ctx) const {
  return fc2.forward(maybe_dropout(ops::relu(fc1.forward(global, ctx)), dropout, ctx), ctx);
}

template <typename T>
void ClassifierHead<T>::collect(StateRefs<T>& s) {
  fc1.collect(s);
  fc2.collect(s);
}

template <typename T>
FpBlock<T>::FpBlock(const std::string& name, std::size_t coarse_width, std::size_t skip_width, std::size_t out,
                    const ModelConfig& cfg, std::mt19937_64& rng)
    : mlp(name, coarse_width + skip_width, out, rng, static_cast<T>(cfg.bn_momentum), static_cast<T>(cfg.bn_eps)) {}

template <typename T>
Var<T> FpBlock<T>::forward(const Level<T>& coarse, const Var<T>& coarse_feats, const Level<T>& fine,
                           std::size_t clouds, const Context<T>& ctx) const {
  IdwStencil all;
  for (std::size_t b = 0; b < clouds; ++b) {
    auto c = std::span<const T>(coarse.coords).subspan(b * coarse.points * 3, coarse.points * 3);
    auto f = std::span<const T>(fine.coords).subspan(b * fine.points * 3, fine.points * 3);
    auto st = idw_stencil(c, f);
    all.k = st.k;
    for (auto i : st.index) all.index.push_back(b * coarse.points + i);
    all.weights.insert(all.weights.end(), st.weights.begin(), st.weights.end());
  }
  auto up = apply_stencil(coarse_feats, all);
  return mlp.forward(ops::concat_cols(std::vector<Var<T>>{fine.feats, up}), ctx);
}

template <typename T>
SegmentationHead<T>::SegmentationHead(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  const auto w = cfg.widths();
  const std::array<std::size_t, 5> level_w{cfg.embed_dim, w[0], w[1], w[2], w[3]};
  const std::array<std::size_t, 4> out_w{w[2], w[1], w[0], w[0]};
  std::size_t coarse = w[3];
  for (std::size_t j = 0; j < 4; ++j) {
    fp_.emplace_back("seg.fp" + std::to_string(j + 1), coarse, level_w[3 - j], out_w[j], cfg, rng);
    coarse = out_w[j];
  }
  std::size_t pooled = 0;
  for (auto c : level_w) pooled += c;
  class_embed_ = Linear<T>("seg.class_embed", cfg.n_categories, cfg.class_embed_dim, rng);
  fuse_ = ConvBnRelu<T>("seg.fuse", pooled + cfg.class_embed_dim + out_w[3], cfg.seg_hidden, rng,
                        static_cast<T>(cfg.bn_momentum), static_cast<T>(cfg.bn_eps));
  out_ = Linear<T>("seg.out", cfg.seg_hidden, cfg.seg_parts, rng);
}

template <typename T>
Var<T> SegmentationHead<T>::forward(const EncoderOutput<T>& enc, const Batch<T>& batch, const Context<T>& ctx) const {
  const std::size_t B = batch.clouds;
  if (batch.categories.size() != B) {
    throw std::invalid_argument("part segmentation needs one category label per cloud");
  }
  Tensor<T> onehot(Shape{B, cfg_.n_categories}, T(0));
  for (std::size_t b = 0; b < B; ++b) {
    const int c = batch.categories[b];
    if (c < 0 || static_cast<std::size_t>(c) >= cfg_.n_categories) {
      throw std::invalid_argument("category " + std::to_string(c) + " outside [0, " + std::to_string(cfg_.n_categories) +
                                  ")");
    }
    onehot(b, static_cast<std::size_t>(c)) = T(1);
  }

  const auto& lv = enc.levels;
  Var<T> dec = lv[4].feats;
  for (std::size_t j = 0; j < 4; ++j) dec = fp_[j].forward(lv[4 - j], dec, lv[3 - j], B, ctx);

  std::vector<Var<T>> global;
  for (const auto& l : lv) global.push_back(pool_clouds(l.feats, B, l.points));
  global.push_back(class_embed_.forward(Var<T>::constant(std::move(onehot)), ctx));
  auto per_cloud = ops::concat_cols(global);
  const auto idx = broadcast_index(B, batch.points);
  auto fused = ops::concat_cols(
      std::vector<Var<T>>{ops::gather_rows(per_cloud, std::span<const std::size_t>(idx)), dec});
  auto h = maybe_dropout(fuse_.forward(fused, ctx), cfg_.dropout, ctx);
  return out_.forward(h, ctx);
}

template <typename T>
void SegmentationHead<T>::collect(StateRefs<T>& s) {
  for (auto& f : fp_) f.collect(s);
  class_embed_.collect(s);
  fuse_.collect(s);
  out_.collect(s);
}

// ---------------------------------------------------------------------------
// SLNet
// ---------------------------------------------------------------------------

template <typename T>
SLNet<T>::SLNet(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  encoder_ = Encoder<T>(cfg_, rng);
  if (cfg_.head == HeadKind::classify) {
    cls_.emplace(cfg_, rng);
  } else {
    seg_.emplace(cfg_, rng);
  }
  encoder_.collect(state_);
  if (cls_) cls_->collect(state_);
  if (seg_) seg_->collect(state_);
  std::unordered_set<std::string> names;
  for (auto* p : state_.params) {
    if (!names.insert(p->name).second) throw std::logic_error("duplicate parameter name " + p->name);
  }
}

template <typename T>
EncoderOutput<T> SLNet<T>::encode(const Batch<T>& batch, const Context<T>& ctx) const {
  return encoder_.forward(batch, ctx);
}

template <typename T>
Var<T> SLNet<T>::forward(const Batch<T>& batch, const Context<T>& ctx) const {
  auto enc = encoder_.forward(batch, ctx);
  if (cls_) return cls_->forward(enc.global, ctx);
  return seg_->forward(enc, batch, ctx);
}

template <typename T>
Param<T>* SLNet<T>::find_param(const std::string& name) const {
  for (auto* p : state_.params) {
    if (p->name == name) return p;
  }
  return nullptr;
}

namespace {
template <typename T>
std::size_t count_impl(const std::vector<Param<T>*>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->size();
  return n;
}
}  // namespace

std::size_t count_params(const std::vector<Param<float>*>& params) { return count_impl(params); }
std::size_t count_params(const std::vector<Param<double>*>& params) { return count_impl(params); }

template <typename To, typename From>
void copy_state(SLNet<To>& dst, const SLNet<From>& src) {
  const auto& dp = dst.parameters();
  const auto& sp = src.parameters();
  const auto& db = dst.buffers();
  const auto& sb = src.buffers();
  if (dp.size() != sp.size() || db.size() != sb.size()) throw std::invalid_argument("copy_state: model layouts differ");
  auto copy = [](Tensor<To>& d, const Tensor<From>& s, const std::string& name) {
    if (d.shape() != s.shape()) throw std::invalid_argument("copy_state: shape mismatch for " + name);
    for (std::size_t i = 0; i < s.size(); ++i) d[i] = static_cast<To>(s[i]);
  };
  for (std::size_t i = 0; i < dp.size(); ++i) copy(dp[i]->value, sp[i]->value, sp[i]->name);
  for (std::size_t i = 0; i < db.size(); ++i) copy(*db[i].value, *sb[i].value, sb[i].name);
}

template Batch<float> make_batch(const std::vector<std::vector<float>>&, std::size_t, std::vector<int>);
template Batch<double> make_batch(const std::vector<std::vector<double>>&, std::size_t, std::vector<int>);
template class Stage<float>;
template class Stage<double>;
template class Encoder<float>;
template class Encoder<double>;
template class ClassifierHead<float>;
template class ClassifierHead<double>;
template class FpBlock<float>;
template class FpBlock<double>;
template class SegmentationHead<float>;
template class SegmentationHead<double>;
template class SLNet<float>;
template class SLNet<double>;
template void copy_state(SLNet<float>&, const SLNet<float>&);
template void copy_state(SLNet<double>&, const SLNet<float>&);
template void copy_state(SLNet<float>&, const SLNet<double>&);
template void copy_state(SLNet<double>&, const SLNet<double>&);

}  // namespace slnet
