#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "slnet/cli.hpp"
#include "slnet/io.hpp"

using namespace slnet;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  return {code, out.str(), err.str()};
}

struct Workspace {
  fs::path dir;
  Workspace() : dir(fs::temp_directory_path() / ("slnet_cli_" + std::to_string(std::random_device{}()))) {
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string operator/(const std::string& name) const { return (dir / name).string(); }
  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(dir / name) << text;
    return (dir / name).string();
  }
};

double field(const std::string& text, const std::string& key) {
  const auto p = text.find(key + "=");
  REQUIRE(p != std::string::npos);
  return std::stod(text.substr(p + key.size() + 1));
}

}  // namespace

TEST_CASE("usage errors") {
  CHECK(run({}).code == exit_usage);
  CHECK(run({"frobnicate"}).code == exit_usage);
  CHECK(run({"synth"}).code == exit_usage);  // --out is required
  CHECK(run({"synth", "--out", "x", "--seed", "abc"}).code == exit_usage);
  CHECK(run({"synth", "--out", "x", "--classes", "sphere,blob"}).code == exit_usage);
  CHECK(run({"--help"}).code == exit_ok);
  CHECK(run({"netscore", "--in", "/nonexistent/records.csv"}).code == exit_data);
}

TEST_CASE("config files") {
  const auto r = parse_run_config("# comment\npreset = s_tiny\nlr = 0.05  # inline\nneighbors = 4\n");
  CHECK(r.model.n_points == 256);
  CHECK(r.model.neighbors == 4);
  CHECK(r.train.optim.lr0 == 0.05);
  CHECK(r.explicit_keys.count("neighbors"));
  // the preset applies first even when it comes last
  CHECK(parse_run_config("neighbors = 4\npreset = s_tiny\n").model.neighbors == 4);
  CHECK_THROWS_AS(parse_run_config("lr = 0.1\nneigbors = 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("just text\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("preset = xl\n"), ConfigError);
  try {
    parse_run_config("epochs = 5\nlr = fast\n");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("netscore command") {
  Workspace ws;
  const auto in = ws.write("records.csv",
                           "name,acc,params_m,flops_g,latency_ms,mem_mb\nSLNet-S,93.64,0.14,0.31,,\nbig,90,10,10,,\n");
  const auto r = run({"netscore", "--in", in, "--out", ws / "scores.csv"});
  CHECK(r.code == exit_ok);
  CHECK(r.out.find("92.4") != std::string::npos);
  CHECK(r.out.find("SLNet-S") < r.out.find("big"));
  std::ifstream scores(ws / "scores.csv");
  std::string header;
  std::getline(scores, header);
  CHECK(header == "name,netscore,netscore_plus");

  const auto bad = ws.write("bad.csv", "name,acc,params_m,flops_g,latency_ms,mem_mb\nx,0,1,1,,\n");
  CHECK(run({"netscore", "--in", bad}).code == exit_data);
}

TEST_CASE("train, eval, infer and bench") {
  Workspace ws;
  auto s = run({"synth", "--classes", "sphere,cube", "--n", "128", "--per-class", "10", "--seed", "7", "--out",
                ws / "data"});
  REQUIRE(s.code == exit_ok);
  CHECK(s.out.find("16 train and 4 test") != std::string::npos);

  const std::string base = "preset = s_tiny\nn_points = 128\ndata = " + (ws / "data") + "\nout = " + (ws / "m.slck") +
                           "\nepochs = 2\nlr = 0.01\nbatch = 8\n";
  const auto cfg = ws.write("run.cfg", base);
  const auto t = run({"train", "--config", cfg});
  INFO(t.err);
  REQUIRE(t.code == exit_ok);
  CHECK(t.out.find("epoch=2 ") != std::string::npos);
  CHECK(t.out.find("ema_oa=") != std::string::npos);
  CHECK(fs::exists(ws / "m.slck.log"));

  // same seed, same checkpoint
  const auto again = ws.write("again.cfg", base + "out = " + (ws / "m2.slck") + "\n");
  REQUIRE(run({"train", "--config", again}).code == exit_ok);
  std::ifstream a(ws / "m.slck", std::ios::binary), b(ws / "m2.slck", std::ios::binary);
  CHECK(std::string(std::istreambuf_iterator<char>(a), {}) == std::string(std::istreambuf_iterator<char>(b), {}));

  const auto e = run({"eval", "--checkpoint", ws / "m.slck", "--data", ws / "data", "--split", "test"});
  CHECK(e.code == exit_ok);
  CHECK(e.out.rfind("weights=ema oa=", 0) == 0);
  CHECK(run({"eval", "--checkpoint", ws / "m.slck", "--data", ws / "data", "--raw"}).out.rfind("weights=raw", 0) == 0);

  PointCloud pc;
  std::mt19937_64 rng(1);
  std::normal_distribution<float> g;
  for (int i = 0; i < 3 * 100; ++i) pc.values.push_back(g(rng));
  save_points(ws / "p.csv", pc);
  const auto inf = run({"infer", "--checkpoint", ws / "m.slck", "--points", ws / "p.csv", "--top-k", "2", "--classes",
                        ws / "data/classes.txt"});
  CHECK(inf.code == exit_ok);
  CHECK(inf.out.rfind("1 ", 0) == 0);
  CHECK(inf.out.find("\n2 ") != std::string::npos);
  CHECK((inf.out.find("sphere") != std::string::npos || inf.out.find("cube") != std::string::npos));

  const auto bn = run({"bench", "--checkpoint", ws / "m.slck", "--acc", "90", "--points", "128", "--warmup", "1",
                       "--iters", "10"});
  CHECK(bn.code == exit_ok);
  CHECK(bn.out.rfind("name,acc,params_m,flops_g,latency_ms,mem_mb\nm,90,", 0) == 0);
  CHECK(run({"bench", "--checkpoint", ws / "m.slck"}).code == exit_usage);

  // error classes
  CHECK(run({"train", "--config", ws.write("typo.cfg", base + "neighbours = 4\n")}).code == exit_usage);
  CHECK(run({"train", "--config", ws / "missing.cfg"}).code == exit_data);
  CHECK(run({"train", "--config", cfg, "--set", "lr=1e30", "--set", "epochs=3"}).code == exit_numeric);
  CHECK(run({"eval", "--checkpoint", ws / "p.csv", "--data", ws / "data"}).code == exit_data);
  std::ofstream(ws / "truncated.slck", std::ios::binary) << "SLCK\x01";
  CHECK(run({"infer", "--checkpoint", ws / "truncated.slck", "--points", ws / "p.csv"}).code == exit_data);
}

TEST_CASE("untrained model is at chance") {
  Workspace ws;
  REQUIRE(run({"synth", "--n", "128", "--per-class", "25", "--seed", "3", "--out", ws / "data"}).code == exit_ok);
  auto cfg = slnet_s_tiny(4);
  cfg.n_points = 128;
  double sum = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    save_checkpoint(ws / "u.slck", SLNet<float>(cfg, seed));
    const auto e = run({"eval", "--checkpoint", ws / "u.slck", "--data", ws / "data"});
    REQUIRE(e.code == exit_ok);
    sum += field(e.out, "oa");
  }
  CHECK(sum / 3 >= 0.15);
  CHECK(sum / 3 <= 0.35);
}
