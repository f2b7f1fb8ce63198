#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <random>
#include <sstream>

#include "doctest.h"
#include "slnet/io.hpp"
#include "slnet/synth.hpp"
#include "testkit.hpp"

using namespace slnet;
namespace fs = std::filesystem;

namespace {

PointCloud random_cloud(std::size_t n, std::size_t dims, bool labels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PointCloud c;
  c.dims = dims;
  c.values = testkit::uniform_f(n * dims, rng, -3, 3);
  c.values[0] = -0.0f;
  c.values[1] = 1e-38f;  // subnormal range still round-trips
  if (labels) {
    for (std::size_t i = 0; i < n; ++i) c.labels.push_back(static_cast<std::int32_t>(rng() % 50) - 5);
  }
  return c;
}

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("slnet_io_" + std::to_string(std::random_device{}()))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("binary point files") {
  for (auto [dims, labels] : {std::pair{3u, false}, std::pair{6u, true}}) {
    const auto c = random_cloud(257, dims, labels, dims);
    std::stringstream ss;
    write_points(ss, c);
    const std::string bytes = ss.str();
    CHECK(bytes.size() == 24 + 257 * (4 * dims + (labels ? 4 : 0)));
    CHECK(bytes.substr(0, 4) == "SLPC");
    CHECK(static_cast<unsigned char>(bytes[8]) == 1);  // 257 little-endian
    CHECK(static_cast<unsigned char>(bytes[9]) == 1);
    const auto back = read_points(ss);
    CHECK(back.dims == dims);
    CHECK(bit_equal(back.values, c.values));
    CHECK(back.labels == c.labels);
  }

  std::stringstream ss;
  write_points(ss, random_cloud(10, 3, false, 1));
  const std::string full = ss.str();
  std::stringstream cut(full.substr(0, full.size() - 5));
  try {
    read_points(cut);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("expected 144") != std::string::npos);
    CHECK(msg.find("got 139") != std::string::npos);
    CHECK(e.offset == 139);
  }
  std::stringstream header_only(full.substr(0, 10));
  CHECK_THROWS_AS(read_points(header_only), FormatError);
  std::stringstream magic("XXXX" + full.substr(4));
  CHECK_THROWS_AS(read_points(magic), FormatError);
}

TEST_CASE("csv point files") {
  std::stringstream six("x,y,z,nx,ny,nz,label\n0.5,1,2,0,0,1,3\n-1,0.25,0,1,0,0,7\n");
  const auto c = read_points_csv(six);
  CHECK(c.dims == 6);
  CHECK(c.has_labels());
  CHECK(c.size() == 2);
  CHECK(c.labels == std::vector<std::int32_t>{3, 7});
  CHECK(c.xyz() == std::vector<float>{0.5f, 1, 2, -1, 0.25f, 0});

  std::stringstream three("1,2,3\n4,5,6\n");
  const auto d = read_points_csv(three);
  CHECK(d.dims == 3);
  CHECK_FALSE(d.has_labels());

  const auto r = random_cloud(40, 6, true, 9);
  std::stringstream out;
  write_points_csv(out, r);
  const auto back = read_points_csv(out);
  CHECK(bit_equal(back.values, r.values));
  CHECK(back.labels == r.labels);

  std::stringstream ragged("1,2,3\n4,5\n");
  CHECK_THROWS_AS(read_points_csv(ragged), FormatError);
  std::stringstream word("1,2,three\n");
  CHECK_THROWS_AS(read_points_csv(word), FormatError);
  std::stringstream empty("");
  CHECK_THROWS_AS(read_points_csv(empty), FormatError);

  TempDir dir;
  save_points(dir.path / "a.csv", r);
  save_points(dir.path / "a.slpc", r);
  CHECK(bit_equal(load_points(dir.path / "a.csv").values, r.values));
  CHECK(bit_equal(load_points(dir.path / "a.slpc").values, r.values));
  CHECK_THROWS(load_points(dir.path / "missing.slpc"));
}

TEST_CASE("checkpoints") {
  const auto cfg = slnet_s_tiny(4);
  SLNet<float> model(cfg, 3);
  Ema<float> ema(model, 0.99);
  model.find_param("head.fc2.bias")->value.fill(0.25f);
  ema.update(model);
  std::mt19937_64 rng(4);
  const auto batch = make_batch<float>({testkit::uniform_f(3 * 256, rng)}, 256);
  const auto logits = model.forward(batch, {}).value();

  std::stringstream ss;
  write_checkpoint(ss, model, &ema);
  const auto loaded = read_checkpoint(ss);
  CHECK(loaded.model->config() == cfg);
  const auto again = loaded.model->forward(batch, {}).value();
  CHECK(bit_equal(std::vector<float>(again.values().begin(), again.values().end()),
                  std::vector<float>(logits.values().begin(), logits.values().end())));
  REQUIRE(loaded.ema);
  CHECK(loaded.ema->steps() == 1);
  CHECK(loaded.ema->rho() == 0.99);
  for (std::size_t i = 0; i < ema.shadow().size(); ++i) CHECK(loaded.ema->shadow()[i] == ema.shadow()[i]);

  std::stringstream plain;
  write_checkpoint(plain, model);
  CHECK_FALSE(read_checkpoint(plain).ema);

  const std::string bytes = ss.str();
  std::stringstream cut(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(read_checkpoint(cut), FormatError);
  std::stringstream bad_magic("SLPC" + bytes.substr(4));
  CHECK_THROWS_AS(read_checkpoint(bad_magic), FormatError);
}

TEST_CASE("synthetic shapes") {
  SynthSpec spec;
  spec.per_class = 10;
  spec.seed = 5;
  const auto a = synth_generate(spec), b = synth_generate(spec);
  REQUIRE(a.train.size() == 32);
  REQUIRE(a.test.size() == 8);
  for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(bit_equal(a.train[i].coords, b.train[i].coords));
  spec.seed = 6;
  CHECK_FALSE(bit_equal(synth_generate(spec).train[0].coords, a.train[0].coords));

  std::map<int, int> per_class;
  for (const auto& c : a.train) {
    ++per_class[c.label];
    CHECK(c.coords.size() == 3 * 256);
    CHECK(c.parts.size() == 256);
    double mean[3] = {0, 0, 0}, r = 0;
    for (std::size_t i = 0; i < 256; ++i) {
      for (int ax = 0; ax < 3; ++ax) mean[ax] += c.coords[3 * i + ax] / 256.0;
    }
    for (std::size_t i = 0; i < 256; ++i) {
      double d = 0;
      for (int ax = 0; ax < 3; ++ax) d += (c.coords[3 * i + ax] - mean[ax]) * (c.coords[3 * i + ax] - mean[ax]);
      r = std::max(r, std::sqrt(d));
    }
    for (double m : mean) CHECK(std::abs(m) < 1e-5);
    CHECK(r == doctest::Approx(1.0).epsilon(1e-5));
    const auto [lo, hi] = a.part_ranges[c.label];
    for (int p : c.parts) {
      CHECK(p >= lo);
      CHECK(p < hi);
    }
  }
  for (int k = 0; k < 4; ++k) CHECK(per_class[k] == 8);
  CHECK(a.part_ranges == std::vector<std::pair<int, int>>{{0, 2}, {2, 5}, {5, 7}, {7, 9}});

  SynthSpec bad;
  bad.classes = {"sphere", "dodecahedron"};
  CHECK_THROWS(synth_generate(bad));
}

TEST_CASE("dataset directories") {
  SynthSpec spec;
  spec.per_class = 5;
  spec.n_points = 64;
  const auto d = synth_generate(spec);
  TempDir dir;
  write_dataset(dir.path, d.class_names, d.part_ranges, d.train, d.test);
  const auto info = read_dataset_info(dir.path);
  CHECK(info.class_names == d.class_names);
  CHECK(info.part_ranges == d.part_ranges);
  const auto train = read_split(dir.path, "train", false);
  REQUIRE(train.size() == d.train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    CHECK(train[i].label == d.train[i].label);
    CHECK(bit_equal(train[i].coords, d.train[i].coords));
    CHECK(train[i].parts == d.train[i].parts);
  }
  CHECK_THROWS(read_split(dir.path, "val"));
}
