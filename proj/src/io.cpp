#include "slnet/io.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <limits>
#include <sstream>

namespace slnet {

namespace {

static_assert(std::numeric_limits<float>::is_iec559 && sizeof(float) == 4);
static_assert(std::numeric_limits<double>::is_iec559 && sizeof(double) == 8);

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) out = (out << 8) | ((v >> (8 * i)) & 0xff);
    return out;
  }
}

class ByteWriter {
 public:
  explicit ByteWriter(std::ostream& out) : out_(out) {}

  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw std::runtime_error("write failed");
  }
  void u32(std::uint32_t v) {
    v = to_little(v);
    bytes(&v, 4);
  }
  void u64(std::uint64_t v) {
    v = to_little(v);
    bytes(&v, 8);
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void f32s(std::span<const float> v) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes(v.data(), v.size() * 4);
    } else {
      for (float x : v) f32(x);
    }
  }

 private:
  std::ostream& out_;
};

/// Reads from an in-memory copy of the input so truncation can be reported
/// against the total length.
class ByteReader {
 public:
  ByteReader(std::string data, std::string what) : data_(std::move(data)), what_(std::move(what)) {}

  std::uint64_t offset() const { return pos_; }
  std::uint64_t size() const { return data_.size(); }
  std::uint64_t remaining() const { return data_.size() - pos_; }

  void need(std::uint64_t n, const char* field) const {
    if (remaining() < n) {
      throw FormatError("truncated " + what_ + ": " + field + " needs " + std::to_string(n) + " bytes, " +
                            std::to_string(remaining()) + " left",
                        pos_);
    }
  }
  void bytes(void* p, std::size_t n, const char* field) {
    need(n, field);
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32(const char* field) {
    std::uint32_t v;
    bytes(&v, 4, field);
    return to_little(v);
  }
  std::uint64_t u64(const char* field) {
    std::uint64_t v;
    bytes(&v, 8, field);
    return to_little(v);
  }
  std::int32_t i32(const char* field) { return static_cast<std::int32_t>(u32(field)); }
  float f32(const char* field) { return std::bit_cast<float>(u32(field)); }
  double f64(const char* field) { return std::bit_cast<double>(u64(field)); }
  std::string str(const char* field, std::uint32_t max_len) {
    const auto n = u32(field);
    if (n > max_len) throw FormatError(what_ + ": " + field + " length " + std::to_string(n) + " is implausible", pos_ - 4);
    std::string s(n, '\0');
    bytes(s.data(), n, field);
    return s;
  }
  void f32s(std::span<float> out, const char* field) {
    need(static_cast<std::uint64_t>(out.size()) * 4, field);
    if constexpr (std::endian::native == std::endian::little) {
      bytes(out.data(), out.size() * 4, field);
    } else {
      for (auto& x : out) x = f32(field);
    }
  }
  void expect_magic(const char (&magic)[5]) {
    char got[4];
    need(4, "magic");
    bytes(got, 4, "magic");
    if (std::memcmp(got, magic, 4) != 0) throw FormatError(what_ + ": bad magic, expected \"" + magic + "\"", 0);
  }
  void expect_end() const {
    if (remaining() != 0) {
      throw FormatError(what_ + ": " + std::to_string(remaining()) + " unexpected trailing bytes", pos_);
    }
  }

 private:
  std::string data_;
  std::string what_;
  std::uint64_t pos_ = 0;
};

/// Whole-field parse; surrounding blanks and a leading '+' are allowed.
/// from_chars, unlike stof, accepts subnormals.
bool parse_float(const std::string& f, float& v) {
  std::size_t b = f.find_first_not_of(" \t");
  if (b == std::string::npos) return false;
  const std::size_t e = f.find_last_not_of(" \t") + 1;
  if (f[b] == '+') ++b;
  const auto r = std::from_chars(f.data() + b, f.data() + e, v);
  return r.ec == std::errc() && r.ptr == f.data() + e;
}

bool parses_as_float(const std::string& f) {
  float v;
  return parse_float(f, v);
}

std::string slurp(std::istream& in) {
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

constexpr std::uint32_t kPointVersion = 1;
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint64_t kPointHeaderBytes = 24;

void check_cloud(const PointCloud& c) {
  if (c.dims != 3 && c.dims != 6) throw std::invalid_argument("point cloud dims must be 3 or 6");
  if (c.values.size() % c.dims != 0) throw std::invalid_argument("point cloud values are not a multiple of dims");
  if (!c.labels.empty() && c.labels.size() != c.size()) {
    throw std::invalid_argument("point cloud has " + std::to_string(c.labels.size()) + " labels for " +
                                std::to_string(c.size()) + " points");
  }
}

}  // namespace

std::vector<float> PointCloud::xyz() const {
  if (dims == 3) return values;
  std::vector<float> out(size() * 3);
  for (std::size_t i = 0; i < size(); ++i) std::copy_n(values.data() + i * dims, 3, out.data() + 3 * i);
  return out;
}

void write_points(std::ostream& out, const PointCloud& cloud) {
  check_cloud(cloud);
  ByteWriter w(out);
  w.bytes("SLPC", 4);
  w.u32(kPointVersion);
  w.u64(cloud.size());
  w.u32(static_cast<std::uint32_t>(cloud.dims));
  w.u32(cloud.has_labels() ? 1 : 0);
  w.f32s(cloud.values);
  for (auto l : cloud.labels) w.i32(l);
}

PointCloud read_points(std::istream& in) {
  ByteReader r(slurp(in), "point file");
  r.expect_magic("SLPC");
  const auto version = r.u32("version");
  if (version != kPointVersion) throw FormatError("point file: unsupported version " + std::to_string(version), 4);
  const auto n = r.u64("point count");
  const auto dims = r.u32("dims");
  if (dims != 3 && dims != 6) throw FormatError("point file: dims must be 3 or 6, got " + std::to_string(dims), 16);
  const auto labeled = r.u32("label flag");
  if (labeled > 1) throw FormatError("point file: label flag must be 0 or 1", 20);
  const std::uint64_t per_point = dims * 4ull + (labeled ? 4ull : 0ull);
  if (n > (std::numeric_limits<std::uint64_t>::max() - kPointHeaderBytes) / per_point) {
    throw FormatError("point file: point count " + std::to_string(n) + " overflows", 8);
  }
  const std::uint64_t expected = kPointHeaderBytes + n * per_point;
  if (r.size() != expected) {
    throw FormatError("point file length mismatch: expected " + std::to_string(expected) + " bytes for " +
                          std::to_string(n) + " points, got " + std::to_string(r.size()),
                      std::min<std::uint64_t>(r.size(), expected));
  }
  PointCloud c;
  c.dims = dims;
  c.values.resize(n * dims);
  r.f32s(c.values, "coordinates");
  if (labeled) {
    c.labels.resize(n);
    for (auto& l : c.labels) l = r.i32("labels");
  }
  r.expect_end();
  return c;
}

void write_points_csv(std::ostream& out, const PointCloud& cloud) {
  check_cloud(cloud);
  out << (cloud.dims == 6 ? "x,y,z,nx,ny,nz" : "x,y,z") << (cloud.has_labels() ? ",label" : "") << '\n';
  out << std::setprecision(std::numeric_limits<float>::max_digits10);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t d = 0; d < cloud.dims; ++d) out << (d ? "," : "") << cloud.values[i * cloud.dims + d];
    if (cloud.has_labels()) out << ',' << cloud.labels[i];
    out << '\n';
  }
}

PointCloud read_points_csv(std::istream& in) {
  PointCloud c;
  std::string line;
  std::uint64_t offset = 0;
  std::size_t lineno = 0, fields = 0;
  while (std::getline(in, line)) {
    const std::uint64_t start = offset;
    offset += line.size() + 1;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) cols.push_back(f);
    if (!line.empty() && line.back() == ',') cols.emplace_back();
    if (fields == 0) {
      if (cols.size() != 3 && cols.size() != 4 && cols.size() != 6 && cols.size() != 7) {
        throw FormatError("CSV line " + std::to_string(lineno) + ": expected 3, 4, 6 or 7 columns, got " +
                              std::to_string(cols.size()),
                          start);
      }
      fields = cols.size();
      c.dims = fields >= 6 ? 6 : 3;
      if (!parses_as_float(cols[0])) continue;  // header
    }
    if (cols.size() != fields) {
      throw FormatError("CSV line " + std::to_string(lineno) + ": expected " + std::to_string(fields) + " columns, got " +
                            std::to_string(cols.size()),
                        start);
    }
    for (std::size_t d = 0; d < c.dims; ++d) {
      float v = 0.0f;
      if (!parse_float(cols[d], v)) {
        throw FormatError("CSV line " + std::to_string(lineno) + ": bad number '" + cols[d] + "'", start);
      }
      c.values.push_back(v);
    }
    if (fields == 4 || fields == 7) {
      const auto& f = cols.back();
      std::size_t used = 0;
      long v = 0;
      try {
        v = std::stol(f, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != f.size() || v < std::numeric_limits<std::int32_t>::min() ||
          v > std::numeric_limits<std::int32_t>::max()) {
        throw FormatError("CSV line " + std::to_string(lineno) + ": bad label '" + f + "'", start);
      }
      c.labels.push_back(static_cast<std::int32_t>(v));
    }
  }
  if (fields == 0) throw FormatError("CSV point file is empty", 0);
  return c;
}

void save_points(const std::filesystem::path& path, const PointCloud& cloud) {
  const bool csv = path.extension() == ".csv";
  std::ofstream out(path, csv ? std::ios::out : std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (csv) {
    write_points_csv(out, cloud);
  } else {
    write_points(out, cloud);
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

PointCloud load_points(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  const bool binary = in.gcount() == 4 && std::memcmp(magic, "SLPC", 4) == 0;
  in.clear();
  in.seekg(0);
  try {
    return binary ? read_points(in) : read_points_csv(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset);
  }
}

// ---------------------------------------------------------------------------

namespace {

void write_blob(ByteWriter& w, const std::string& name, const Tensor<float>& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.u64(d);
  w.f32s(t.values());
}

void read_blob(ByteReader& r, const std::string& expect_name, Tensor<float>& dst) {
  const auto at = r.offset();
  const auto name = r.str("blob name", 1 << 16);
  if (name != expect_name) throw FormatError("checkpoint: expected tensor '" + expect_name + "', found '" + name + "'", at);
  const auto rank = r.u32("blob rank");
  if (rank > 8) throw FormatError("checkpoint: tensor '" + name + "' has implausible rank", r.offset() - 4);
  Shape shape(rank);
  for (auto& d : shape) d = r.u64("blob shape");
  if (shape != dst.shape()) {
    throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                          shape_str(dst.shape()),
                      at);
  }
  r.f32s(dst.values(), "blob values");
}

}  // namespace

void write_checkpoint(std::ostream& out, const SLNet<float>& model, const Ema<float>* ema) {
  ByteWriter w(out);
  w.bytes("SLCK", 4);
  w.u32(kCheckpointVersion);
  w.str(to_text(model.config()));
  const auto& params = model.parameters();
  const auto& buffers = model.buffers();
  w.u32(static_cast<std::uint32_t>(params.size() + buffers.size()));
  for (auto* p : params) write_blob(w, p->name, p->value);
  for (const auto& b : buffers) write_blob(w, b.name, *b.value);
  w.u32(ema ? 1 : 0);
  if (ema) {
    w.u64(ema->steps());
    w.f64(ema->rho());
    const auto& sh = ema->shadow();
    std::size_t i = 0;
    for (auto* p : params) write_blob(w, p->name, sh[i++]);
    for (const auto& b : buffers) write_blob(w, b.name, sh[i++]);
  }
}

LoadedCheckpoint read_checkpoint(std::istream& in) {
  ByteReader r(slurp(in), "checkpoint");
  r.expect_magic("SLCK");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version), 4);
  const auto cfg_at = r.offset();
  const auto text = r.str("config", 1 << 20);
  ModelConfig cfg;
  try {
    cfg = config_from_text(text);
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint: bad config: ") + e.what(), cfg_at);
  }
  LoadedCheckpoint out;
  out.model = std::make_unique<SLNet<float>>(cfg, 0);
  auto& model = *out.model;
  const auto count = r.u32("tensor count");
  if (count != model.parameters().size() + model.buffers().size()) {
    throw FormatError("checkpoint: " + std::to_string(count) + " tensors, model has " +
                          std::to_string(model.parameters().size() + model.buffers().size()),
                      r.offset() - 4);
  }
  for (auto* p : model.parameters()) read_blob(r, p->name, p->value);
  for (const auto& b : model.buffers()) read_blob(r, b.name, *b.value);
  const auto has_ema = r.u32("ema flag");
  if (has_ema > 1) throw FormatError("checkpoint: ema flag must be 0 or 1", r.offset() - 4);
  if (has_ema) {
    const auto steps = r.u64("ema steps");
    const auto rho = r.f64("ema rho");
    if (!(rho >= 0.0 && rho <= 1.0)) throw FormatError("checkpoint: ema rho outside [0, 1]", r.offset() - 8);
    out.ema = std::make_unique<Ema<float>>(model, rho);
    std::vector<Tensor<float>> shadow;
    for (auto* p : model.parameters()) {
      shadow.emplace_back(p->value.shape());
      read_blob(r, p->name, shadow.back());
    }
    for (const auto& b : model.buffers()) {
      shadow.emplace_back(b.value->shape());
      read_blob(r, b.name, shadow.back());
    }
    out.ema->restore(std::move(shadow), steps);
  }
  r.expect_end();
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const SLNet<float>& model, const Ema<float>* ema) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_checkpoint(out, model, ema);
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return read_checkpoint(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset);
  }
}

// ---------------------------------------------------------------------------

void write_dataset(const std::filesystem::path& dir, const std::vector<std::string>& class_names,
                   const std::vector<std::pair<int, int>>& part_ranges, const std::vector<LabeledCloud>& train,
                   const std::vector<LabeledCloud>& test) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "classes.txt");
    for (const auto& n : class_names) f << n << '\n';
    if (!f) throw std::runtime_error("cannot write " + (dir / "classes.txt").string());
  }
  {
    std::ofstream f(dir / "parts.txt");
    for (const auto& [a, b] : part_ranges) f << a << ' ' << b << '\n';
    if (!f) throw std::runtime_error("cannot write " + (dir / "parts.txt").string());
  }
  auto write_split = [&](const std::string& split, const std::vector<LabeledCloud>& clouds) {
    fs::create_directories(dir / split);
    std::ofstream index(dir / (split + ".lst"));
    for (std::size_t i = 0; i < clouds.size(); ++i) {
      std::ostringstream name;
      name << split << '/' << std::setw(6) << std::setfill('0') << i << ".slpc";
      PointCloud pc;
      pc.values = clouds[i].coords;
      pc.labels.assign(clouds[i].parts.begin(), clouds[i].parts.end());
      save_points(dir / name.str(), pc);
      index << name.str() << ' ' << clouds[i].label << '\n';
    }
    if (!index) throw std::runtime_error("cannot write " + (dir / (split + ".lst")).string());
  };
  write_split("train", train);
  write_split("test", test);
}

DatasetInfo read_dataset_info(const std::filesystem::path& dir) {
  DatasetInfo info;
  std::ifstream classes(dir / "classes.txt");
  if (!classes) throw std::runtime_error("cannot open " + (dir / "classes.txt").string());
  for (std::string line; std::getline(classes, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) info.class_names.push_back(line);
  }
  std::ifstream parts(dir / "parts.txt");
  if (parts) {
    int a = 0, b = 0;
    while (parts >> a >> b) info.part_ranges.emplace_back(a, b);
  }
  return info;
}

std::vector<LabeledCloud> read_split(const std::filesystem::path& dir, const std::string& split, bool normalize) {
  const auto index_path = dir / (split + ".lst");
  std::ifstream index(index_path);
  if (!index) throw std::runtime_error("cannot open " + index_path.string());
  std::vector<LabeledCloud> out;
  std::string line;
  std::uint64_t offset = 0;
  std::size_t lineno = 0;
  while (std::getline(index, line)) {
    const auto start = offset;
    offset += line.size() + 1;
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    std::string rel;
    int label = 0;
    if (!(ss >> rel >> label) || label < 0) {
      throw FormatError(index_path.string() + ": line " + std::to_string(lineno) + " is not 'path label'", start);
    }
    const auto pc = load_points(dir / rel);
    LabeledCloud c;
    c.coords = pc.xyz();
    c.label = label;
    c.parts.assign(pc.labels.begin(), pc.labels.end());
    if (normalize) normalize_unit_sphere(std::span<float>(c.coords));
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace slnet
