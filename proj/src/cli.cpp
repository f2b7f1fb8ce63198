#include "slnet/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

#include "slnet/io.hpp"
#include "slnet/netscore.hpp"
#include "slnet/synth.hpp"

namespace slnet {

namespace {

/// Bad command-line input detected after parsing.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string trim(std::string s) {
  s.erase(0, s.find_first_not_of(" \t\r"));
  s.erase(s.find_last_not_of(" \t\r") + 1);
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

LossKind parse_loss(const std::string& key, const std::string& v) {
  if (v == "ce") return LossKind::ce;
  if (v == "wce") return LossKind::wce;
  if (v == "focal") return LossKind::focal;
  throw ConfigError(key + ": expected ce|wce|focal, got '" + v + "'");
}

void set_run_value(RunSpec& r, const std::string& key, const std::string& v) {
  auto& t = r.train;
  if (key == "preset") r.preset = v;
  else if (key == "data") r.data = v;
  else if (key == "out") r.out = v;
  else if (key == "log") r.log = v;
  else if (key == "normalize") r.normalize = parse_bool_value(key, v);
  else if (key == "epochs") t.optim.epochs = parse_size_value(key, v);
  else if (key == "lr") t.optim.lr0 = parse_double_value(key, v);
  else if (key == "lr_min") t.optim.lr_min = parse_double_value(key, v);
  else if (key == "momentum") t.optim.momentum = parse_double_value(key, v);
  else if (key == "weight_decay") t.optim.weight_decay = parse_double_value(key, v);
  else if (key == "ema_rho") t.optim.ema_rho = parse_double_value(key, v);
  else if (key == "batch") t.batch = parse_size_value(key, v);
  else if (key == "eval_batch") t.eval_batch = parse_size_value(key, v);
  else if (key == "seed") t.seed = parse_size_value(key, v);
  else if (key == "augment") t.augment = parse_bool_value(key, v);
  else if (key == "loss") t.loss.kind = parse_loss(key, v);
  else if (key == "label_smoothing") t.loss.label_smoothing = parse_double_value(key, v);
  else if (key == "focal_gamma") t.loss.gamma = parse_double_value(key, v);
  else set_config_value(r.model, key, v);
}

std::uint64_t parse_seed(const std::string& s) {
  return static_cast<std::uint64_t>(parse_size_value("--seed", s));
}

}  // namespace

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys{
      "preset", "data", "out", "log", "normalize", "epochs", "lr", "lr_min", "momentum", "weight_decay",
      "ema_rho", "batch", "eval_batch", "seed", "augment", "loss", "label_smoothing", "focal_gamma"};
  return keys;
}

ModelConfig preset_config(const std::string& name) {
  if (name == "s") return slnet_s();
  if (name == "m") return slnet_m();
  if (name == "s_tiny") return slnet_s_tiny();
  if (name == "s_scanobject") return slnet_s_scanobject();
  if (name == "m_scanobject") return slnet_m_scanobject();
  throw ConfigError("preset: expected s|m|s_tiny|s_scanobject|m_scanobject, got '" + name + "'");
}

RunSpec parse_run_config(const std::string& text) {
  std::vector<std::tuple<std::size_t, std::string, std::string>> entries;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  std::string preset;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto& rk = run_config_keys();
    if (std::find(rk.begin(), rk.end(), key) == rk.end() && !is_config_key(key)) {
      throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    if (key == "preset") preset = value;
    entries.emplace_back(lineno, std::move(key), std::move(value));
  }
  RunSpec r;
  if (!preset.empty()) r.model = preset_config(preset);
  for (const auto& [no, key, value] : entries) {
    try {
      set_run_value(r, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(no) + ": " + e.what());
    }
    r.explicit_keys.insert(key);
  }
  return r;
}

std::size_t thread_cap() {
  if (const char* env = std::getenv("SLNET_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

/// Evaluation summary for either head.
std::string eval_summary(const SLNet<float>& model, std::span<const LabeledCloud> data, const DatasetInfo& info,
                         std::size_t batch, const std::string& prefix = "") {
  if (model.config().head == HeadKind::classify) {
    const auto e = evaluate_classifier(model, data, batch);
    return prefix + "oa=" + fixed(e.acc.oa) + " " + prefix + "macc=" + fixed(e.acc.macc);
  }
  const auto e = evaluate_segmenter(model, data, info.part_ranges, batch);
  return prefix + "ins_iou=" + fixed(e.iou.ins_iou) + " " + prefix + "cls_iou=" + fixed(e.iou.cls_iou) + " " +
         prefix + "miou=" + fixed(e.miou);
}

void check_labels(const std::vector<LabeledCloud>& data, const ModelConfig& cfg, const std::string& split) {
  const bool seg = cfg.head == HeadKind::part_segment;
  const std::size_t classes = seg ? cfg.n_categories : cfg.n_classes;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].label < 0 || static_cast<std::size_t>(data[i].label) >= classes) {
      throw std::runtime_error(split + " cloud " + std::to_string(i) + ": label " + std::to_string(data[i].label) +
                               " outside the model's " + std::to_string(classes) + " classes");
    }
    if (seg) {
      for (int p : data[i].parts) {
        if (p < 0 || static_cast<std::size_t>(p) >= cfg.seg_parts) {
          throw std::runtime_error(split + " cloud " + std::to_string(i) + ": part label " + std::to_string(p) +
                                   " outside the model's " + std::to_string(cfg.seg_parts) + " parts");
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::string& classes, std::size_t n, std::size_t per_class, std::uint64_t seed, double noise,
              double test_fraction, const std::string& out_dir, std::ostream& out) {
  SynthSpec spec;
  spec.classes = split_list(classes);
  spec.n_points = n;
  spec.per_class = per_class;
  spec.seed = seed;
  spec.noise = noise;
  spec.test_fraction = test_fraction;
  for (const auto& c : spec.classes) {
    const auto& known = synth_shape_names();
    if (std::find(known.begin(), known.end(), c) == known.end()) throw UsageError("unknown synthetic class '" + c + "'");
  }
  SynthDataset ds;
  try {
    ds = synth_generate(spec);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  write_dataset(out_dir, ds.class_names, ds.part_ranges, ds.train, ds.test);
  out << "wrote " << ds.train.size() << " train and " << ds.test.size() << " test clouds to " << out_dir << '\n';
  return exit_ok;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides, std::ostream& out) {
  std::string text = read_text(config_path);
  for (const auto& o : overrides) text += "\n" + o;
  RunSpec spec = parse_run_config(text);
  if (spec.data.empty()) throw UsageError("train: the config must name a dataset directory (data = ...)");
  spec.train.loss.validate();
  spec.train.optim.validate();
  if (spec.train.batch < 2) throw UsageError("train: batch must be at least 2");

  const auto info = read_dataset_info(spec.data);
  auto train_set = read_split(spec.data, "train", spec.normalize);
  std::vector<LabeledCloud> test_set;
  if (std::filesystem::exists(std::filesystem::path(spec.data) / "test.lst")) {
    test_set = read_split(spec.data, "test", spec.normalize);
  }
  auto& m = spec.model;
  if (m.head == HeadKind::classify) {
    if (!spec.explicit_keys.count("n_classes")) m.n_classes = info.class_names.size();
  } else {
    if (!spec.explicit_keys.count("n_categories")) m.n_categories = info.class_names.size();
    if (!spec.explicit_keys.count("seg_parts")) {
      int parts = 0;
      for (const auto& pr : info.part_ranges) parts = std::max(parts, pr.second);
      m.seg_parts = static_cast<std::size_t>(parts);
    }
    if (info.part_ranges.size() != m.n_categories) {
      throw std::runtime_error("dataset part ranges cover " + std::to_string(info.part_ranges.size()) +
                               " categories, model expects " + std::to_string(m.n_categories));
    }
  }
  m.validate();
  check_labels(train_set, m, "train");
  check_labels(test_set, m, "test");

  if (spec.train.loss.kind == LossKind::wce && spec.train.loss.class_freqs.empty()) {
    const std::size_t classes = m.head == HeadKind::classify ? m.n_classes : m.seg_parts;
    std::vector<double> freqs(classes, 0.0);
    for (const auto& c : train_set) {
      if (m.head == HeadKind::classify) {
        freqs[static_cast<std::size_t>(c.label)] += 1.0;
      } else {
        for (int p : c.parts) freqs[static_cast<std::size_t>(p)] += 1.0;
      }
    }
    for (auto& f : freqs) f = std::max(f, 1.0);  // unseen classes get the rarest weight
    spec.train.loss.class_freqs = freqs;
  }
  spec.train.prefetch_threads = thread_cap() > 1 ? 1 : 0;

  const std::string log_path = spec.log.empty() ? spec.out + ".log" : spec.log;
  std::ofstream log(log_path);
  if (!log) throw std::runtime_error("cannot write " + log_path);

  SLNet<float> model(m, spec.train.seed);
  std::unique_ptr<Ema<float>> ema;
  if (spec.train.optim.ema_rho > 0.0) ema = std::make_unique<Ema<float>>(model, spec.train.optim.ema_rho);
  out << "params=" << count_params(model) << " train=" << train_set.size() << " test=" << test_set.size() << '\n';
  train(model, ema.get(), train_set, spec.train, [&](const EpochLog& e) {
    const auto line = format_log(e);
    out << line << '\n' << std::flush;
    log << line << '\n' << std::flush;
  });
  save_checkpoint(spec.out, model, ema.get());

  if (!test_set.empty()) {
    std::string line = "test " + eval_summary(model, test_set, info, spec.train.eval_batch, "raw_");
    if (ema) {
      ema->swap(model);
      line += " " + eval_summary(model, test_set, info, spec.train.eval_batch, "ema_");
      ema->swap(model);
    }
    out << line << '\n';
    log << line << '\n';
  }
  out << "checkpoint=" << spec.out << " log=" << log_path << '\n';
  return exit_ok;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& split, bool raw, bool normalize,
             std::size_t batch, std::ostream& out) {
  auto loaded = load_checkpoint(ckpt);
  auto& model = *loaded.model;
  const auto info = read_dataset_info(data);
  const auto set = read_split(data, split, normalize);
  if (set.empty()) throw std::runtime_error("split '" + split + "' is empty");
  check_labels(set, model.config(), split);
  const bool use_ema = loaded.ema && !raw;
  if (use_ema) loaded.ema->swap(model);
  out << "weights=" << (use_ema ? "ema" : "raw") << ' ' << eval_summary(model, set, info, batch) << '\n';
  return exit_ok;
}

int cmd_infer(const std::string& ckpt, const std::string& points, std::size_t top_k, const std::string& classes_file,
              bool raw, bool normalize, int category, std::ostream& out) {
  auto loaded = load_checkpoint(ckpt);
  auto& model = *loaded.model;
  if (loaded.ema && !raw) loaded.ema->swap(model);
  const auto& cfg = model.config();
  const auto pc = load_points(points);
  auto xyz = pc.xyz();
  if (xyz.empty()) throw std::runtime_error(points + ": no points");
  if (normalize) normalize_unit_sphere(std::span<float>(xyz));
  std::vector<std::string> names;
  if (!classes_file.empty()) {
    std::istringstream ss(read_text(classes_file));
    for (std::string l; std::getline(ss, l);) {
      if (!trim(l).empty()) names.push_back(trim(l));
    }
  }
  std::vector<int> cats;
  if (cfg.head == HeadKind::part_segment) {
    if (category < 0 || static_cast<std::size_t>(category) >= cfg.n_categories) {
      throw UsageError("infer: a part-segmentation model needs --category in [0, " + std::to_string(cfg.n_categories) + ")");
    }
    cats.push_back(category);
  }
  const auto batch = make_batch(std::vector<std::vector<float>>{xyz}, cfg.n_points, cats);
  Context<float> ctx;
  const auto z = model.forward(batch, ctx).value();
  if (cfg.head == HeadKind::part_segment) {
    out << "point,part\n";
    const auto idx = resample_indices(xyz.size() / 3, cfg.n_points);
    for (std::size_t i = 0; i < z.rows(); ++i) {
      const float* row = z.data() + i * z.cols();
      out << idx[i] << ',' << (std::max_element(row, row + z.cols()) - row) << '\n';
    }
    return exit_ok;
  }
  std::vector<double> p(z.cols());
  const double mx = *std::max_element(z.data(), z.data() + z.cols());
  double s = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) s += p[j] = std::exp(static_cast<double>(z[j]) - mx);
  std::vector<std::size_t> order(p.size());
  for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  for (std::size_t r = 0; r < std::min(top_k, order.size()); ++r) {
    const auto c = order[r];
    out << r + 1 << ' ' << c;
    if (c < names.size()) out << ' ' << names[c];
    out << ' ' << fixed(p[c] / s) << '\n';
  }
  return exit_ok;
}

int cmd_bench(const std::string& ckpt, const std::string& name, double acc, const std::string& data,
              const BenchConfig& bc, bool header, std::ostream& out) {
  auto loaded = load_checkpoint(ckpt);
  auto& model = *loaded.model;
  if (loaded.ema) loaded.ema->swap(model);
  EfficiencyRecord rec;
  rec.name = name.empty() ? std::filesystem::path(ckpt).stem().string() : name;
  if (std::isfinite(acc)) {
    rec.a = acc;
  } else if (!data.empty()) {
    const auto info = read_dataset_info(data);
    const auto set = read_split(data, "test", true);
    check_labels(set, model.config(), "test");
    if (model.config().head == HeadKind::classify) {
      rec.a = 100.0 * evaluate_classifier(model, set).acc.oa;
    } else {
      rec.a = 100.0 * evaluate_segmenter(model, set, info.part_ranges).iou.ins_iou;
    }
  } else {
    throw UsageError("bench: give --acc or --data to supply the accuracy");
  }
  rec.p = static_cast<double>(count_params(model)) / 1e6;
  rec.m = estimate_flops(model, bc.n_points, 1) / 1e9;
  rec.t = measure_latency(model, bc);
  rec.r = measure_peak_memory(model, bc);
  if (header) write_record_header(out);
  write_record(out, rec);
  return exit_ok;
}

int cmd_netscore(const std::string& in_path, const std::string& out_path, std::ostream& out) {
  std::ifstream in(in_path);
  if (!in) throw std::runtime_error("cannot open " + in_path);
  const auto rows = rank_records(read_records(in));
  write_ranked_table(out, rows);
  if (!out_path.empty()) {
    std::ofstream f(out_path);
    if (!f) throw std::runtime_error("cannot write " + out_path);
    write_scores_csv(f, rows);
  }
  return exit_ok;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"SLNet point-cloud backbone: data synthesis, training, evaluation and benchmarking", "slnet"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Generate a labelled synthetic shape dataset");
  std::string classes = "sphere,cube,cylinder,torus", synth_out;
  std::size_t n_points = 256, per_class = 125;
  std::string seed_str = "1";
  double noise = 0.01, test_fraction = 0.2;
  synth->add_option("--classes", classes, "Comma-separated subset of sphere,cube,cylinder,torus,cone");
  synth->add_option("--n", n_points, "Points per cloud");
  synth->add_option("--per-class", per_class, "Clouds per class");
  synth->add_option("--seed", seed_str, "Random seed");
  synth->add_option("--noise", noise, "Gaussian jitter sigma");
  synth->add_option("--test-fraction", test_fraction, "Share of each class held out for testing");
  synth->add_option("--out", synth_out, "Output directory")->required();

  auto* trn = app.add_subcommand("train", "Train a model described by a config file");
  std::string config_path;
  std::vector<std::string> overrides;
  trn->add_option("--config", config_path, "Config file (key = value lines)")->required();
  trn->add_option("--set", overrides, "Extra `key=value` entries applied after the file");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  std::string ckpt, data, split = "test";
  bool raw = false, no_normalize = false;
  std::size_t eval_batch = 32;
  ev->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  ev->add_option("--data", data, "Dataset directory")->required();
  ev->add_option("--split", split, "Split name");
  ev->add_option("--batch", eval_batch, "Evaluation batch size");
  ev->add_flag("--raw", raw, "Use the raw weights even if averaged weights are stored");
  ev->add_flag("--no-normalize", no_normalize, "Do not rescale clouds into the unit sphere");

  auto* inf = app.add_subcommand("infer", "Classify one point file");
  std::string points, classes_file;
  std::size_t top_k = 3;
  int category = -1;
  inf->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  inf->add_option("--points", points, "Point file (binary or CSV)")->required();
  inf->add_option("--top-k", top_k, "Number of classes to print");
  inf->add_option("--classes", classes_file, "File with one class name per line");
  inf->add_option("--category", category, "Object category (part-segmentation models)");
  inf->add_flag("--raw", raw, "Use the raw weights even if averaged weights are stored");
  inf->add_flag("--no-normalize", no_normalize, "Do not rescale the cloud into the unit sphere");

  auto* bench = app.add_subcommand("bench", "Measure params, FLOPs, latency and peak memory of a checkpoint");
  std::string name;
  double acc = std::nan("");
  BenchConfig bc;
  bool no_header = false;
  bench->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  bench->add_option("--name", name, "Record name (default: checkpoint stem)");
  bench->add_option("--acc", acc, "Accuracy in percent");
  bench->add_option("--data", data, "Dataset directory whose test split supplies the accuracy");
  bench->add_option("--batch", bc.batch, "Clouds per forward");
  bench->add_option("--points", bc.n_points, "Points per cloud");
  bench->add_option("--warmup", bc.warmup_iters, "Untimed forwards");
  bench->add_option("--iters", bc.timed_iters, "Timed forwards");
  bench->add_flag("--no-header", no_header, "Omit the CSV header line");

  auto* ns = app.add_subcommand("netscore", "Score efficiency records");
  std::string ns_in, ns_out;
  ns->add_option("--in", ns_in, "CSV with name,acc,params_m,flops_g,latency_ms,mem_mb")->required();
  ns->add_option("--out", ns_out, "Optional CSV of name,netscore,netscore_plus");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_ok : exit_usage;
  }

  try {
    if (*synth) {
      return cmd_synth(classes, n_points, per_class, parse_seed(seed_str), noise, test_fraction, synth_out, out);
    }
    if (*trn) return cmd_train(config_path, overrides, out);
    if (*ev) return cmd_eval(ckpt, data, split, raw, !no_normalize, eval_batch, out);
    if (*inf) return cmd_infer(ckpt, points, top_k, classes_file, raw, !no_normalize, category, out);
    if (*bench) {
      if (bc.n_points == 0) bc.n_points = 1024;
      try {
        bc.validate();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      return cmd_bench(ckpt, name, acc, data, bc, !no_header, out);
    }
    if (*ns) return cmd_netscore(ns_in, ns_out, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return exit_usage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return exit_usage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return exit_numeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_data;
  }
  return exit_usage;
}

}  // namespace slnet
