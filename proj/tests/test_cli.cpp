#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "spectralx/cli.hpp"
#include "testutil.hpp"

using namespace spectralx;

namespace {

namespace fs = std::filesystem;

// Commands print progress lines; keep the test log clean.
struct QuietStreams {
  QuietStreams() : out_(std::cout.rdbuf(sink_.rdbuf())), err_(std::cerr.rdbuf(sink_.rdbuf())) {}
  ~QuietStreams() {
    std::cout.rdbuf(out_);
    std::cerr.rdbuf(err_);
  }
  std::ostringstream sink_;
  std::streambuf* out_;
  std::streambuf* err_;
};

struct Scratch {
  Scratch() {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Scratch() { fs::remove_all(root); }
  std::string data() const { return (root / "data").string(); }
  std::string out() const { return (root / "runs").string(); }
  fs::path root = fs::path("cli_scratch");
};

// Every invocation pins the run small: one epoch per stage, two scenes per split.
std::vector<std::string> args(const Scratch& s, const std::string& verb,
                              std::vector<std::string> extra = {}) {
  std::vector<std::string> a = {verb,
                                "data.dir=" + s.data(),
                                "out.dir=" + s.out(),
                                "epochs.stage1=1",
                                "epochs.stage2=1",
                                "train.batch=2",
                                "scenes.train=2",
                                "scenes.test=2"};
  a.insert(a.end(), extra.begin(), extra.end());
  return a;
}

std::map<std::string, std::string> dir_digest(const std::string& dir) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::ifstream f(entry.path(), std::ios::binary);
    std::ostringstream os;
    os << f.rdbuf();
    out[entry.path().string()] = os.str();
  }
  return out;
}

int manifest_count(const std::string& dir) {
  int n = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("run_", 0) == 0) ++n;
  }
  return n;
}

}  // namespace

TEST_CASE("command parsing rejects malformed invocations") {
  CHECK_THROWS_AS(parse_command({}), UsageError);
  CHECK_THROWS_AS(parse_command({"paint"}), UsageError);
  CHECK_THROWS_AS(parse_command({"gen", "--frobnicate"}), UsageError);
  CHECK_THROWS_AS(parse_command({"gen", "--config"}), UsageError);
  CHECK_THROWS_AS(parse_command({"gen", "loose-word"}), UsageError);

  const Command cmd = parse_command({"train", "--config", "a.cfg", "--out", "o", "seed=3"});
  CHECK(cmd.verb == "train");
  CHECK(cmd.config_path == "a.cfg");
  REQUIRE(cmd.overrides.size() == 2);
  CHECK(cmd.overrides[0] == "out.dir=o");
  CHECK(cmd.overrides[1] == "seed=3");
}

TEST_CASE("exit codes distinguish usage, config, and data failures") {
  QuietStreams quiet;
  Scratch s;
  CHECK(run_cli({"paint"}) == 1);
  CHECK(run_cli({"gen", "--frobnicate"}) == 1);
  CHECK(run_cli(args(s, "gen", {"bogus.key=1"})) == 2);
  CHECK(run_cli(args(s, "gen", {"profile=pocket"})) == 2);
  CHECK(run_cli(args(s, "gen", {"flags.are=true", "flags.aomoa=false"})) == 2);
  CHECK(run_cli({"train", "--config", "no_such_file.cfg"}) == 2);
  // no generated dataset yet -> data errors
  CHECK(run_cli(args(s, "train")) == 3);
  CHECK(run_cli(args(s, "infer")) == 3);
  CHECK(run_cli(args(s, "report")) == 3);
}

TEST_CASE("gen is deterministic and two invocations match bit for bit") {
  QuietStreams quiet;
  Scratch s;
  REQUIRE(run_cli(args(s, "gen")) == 0);
  const auto first = dir_digest(s.data());
  CHECK(first.count(s.data() + "/manifest.txt") == 1);
  CHECK(first.size() == 5);  // 2 train + 2 test scenes + manifest

  REQUIRE(run_cli(args(s, "gen")) == 0);
  CHECK(dir_digest(s.data()) == first);
}

TEST_CASE("config file values lose to command-line overrides") {
  QuietStreams quiet;
  Scratch s;
  const std::string cfg_path = (s.root / "run.cfg").string();
  {
    std::ofstream f(cfg_path);
    f << "# dataset size\n"
      << "scenes.train=2\n"
      << "scenes.test=2\n"
      << "seed=5\n";
  }
  REQUIRE(run_cli({"gen", "--config", cfg_path, "data.dir=" + s.data(), "seed=6"}) == 0);
  const auto with_six = dir_digest(s.data());
  REQUIRE(run_cli(args(s, "gen", {"seed=6"})) == 0);
  CHECK(dir_digest(s.data()) == with_six);  // override matched the plain seed=6 run
}

TEST_CASE("the gen, adapt, train, infer, eval, report chain runs clean") {
  QuietStreams quiet;
  Scratch s;
  REQUIRE(run_cli(args(s, "gen")) == 0);
  REQUIRE(run_cli(args(s, "adapt")) == 0);
  CHECK(fs::exists(s.out() + "/weights.spxw"));
  CHECK(manifest_count(s.out()) == 1);

  REQUIRE(run_cli(args(s, "train")) == 0);
  CHECK(manifest_count(s.out()) == 2);

  REQUIRE(run_cli(args(s, "infer")) == 0);
  CHECK(fs::exists(s.out() + "/pred_0000.ppm"));
  CHECK(fs::exists(s.out() + "/pred_0001.ppm"));
  const SegmentationMap pred = read_ppm(s.out() + "/pred_0000.ppm");
  CHECK(pred.height == 32);
  CHECK(pred.width == 32);
  for (uint16_t l : pred.labels) CHECK(l < 4);

  REQUIRE(run_cli(args(s, "eval")) == 0);
  REQUIRE(run_cli(args(s, "report")) == 0);
  CHECK(fs::exists(s.out() + "/report.txt"));

  // the PPM round trip preserved the maps exactly, so infer and eval agree
  std::string infer_miou, eval_miou;
  for (const auto& entry : fs::directory_iterator(s.out())) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("run_", 0) != 0) continue;
    const ConfigMap m = parse_config_file(entry.path().string());
    if (m.at("kind") == "infer") infer_miou = m.at("eval.target.miou");
    if (m.at("kind") == "eval") eval_miou = m.at("eval.target.miou");
  }
  REQUIRE_FALSE(infer_miou.empty());
  CHECK(infer_miou == eval_miou);
}

TEST_CASE("train is idempotent: rerunning overwrites outputs bit-identically") {
  QuietStreams quiet;
  Scratch s;
  REQUIRE(run_cli(args(s, "gen")) == 0);
  REQUIRE(run_cli(args(s, "train")) == 0);
  const auto first = dir_digest(s.out());
  REQUIRE(run_cli(args(s, "train")) == 0);
  CHECK(dir_digest(s.out()) == first);
}

TEST_CASE("infer refuses weights from a differently shaped model") {
  QuietStreams quiet;
  Scratch s;
  REQUIRE(run_cli(args(s, "gen")) == 0);
  REQUIRE(run_cli(args(s, "train")) == 0);
  // same weights file, but the configured model now lacks the adapter stack
  CHECK(run_cli(args(s, "infer", {"baseline=freeze"})) == 3);
}

TEST_CASE("runaway learning rate surfaces as a numeric failure") {
  QuietStreams quiet;
  Scratch s;
  REQUIRE(run_cli(args(s, "gen")) == 0);
  // one optimizer step at this rate pushes weights to ~1e300, so the next
  // forward pass overflows to inf and the finite-value checks fire
  CHECK(run_cli(args(s, "train", {"train.lr=1e300", "flags.stage1=false"})) == 4);
}

TEST_CASE("ablate emits the full eight-cell matrix and report orders it") {
  QuietStreams quiet;
  Scratch s;
  REQUIRE(run_cli(args(s, "gen")) == 0);
  REQUIRE(run_cli(args(s, "ablate")) == 0);
  CHECK(manifest_count(s.out()) == 8);

  REQUIRE(run_cli(args(s, "report")) == 0);
  std::ifstream f(s.out() + "/report.txt");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) lines.push_back(line);
  REQUIRE(lines.size() == 9);  // header + 8 rows
  std::vector<std::string> rows(lines.begin() + 1, lines.end());
  CHECK(std::is_sorted(rows.begin(), rows.end()));  // config-hash order
}

TEST_CASE("segmentation maps survive the palette round trip") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    SegmentationMap map;
    map.height = 1 + static_cast<int64_t>(rng.below(12));
    map.width = 1 + static_cast<int64_t>(rng.below(12));
    map.labels.resize(static_cast<size_t>(map.height * map.width));
    for (auto& l : map.labels) l = static_cast<uint16_t>(rng.below(24));
    const auto bytes = encode_ppm(map);
    const SegmentationMap back = decode_ppm(bytes.data(), bytes.size());
    REQUIRE(back.height == map.height);
    REQUIRE(back.width == map.width);
    CHECK(back.labels == map.labels);
  }

  SegmentationMap bad;
  bad.height = bad.width = 1;
  bad.labels = {24};  // beyond the palette
  CHECK_THROWS_AS(encode_ppm(bad), DataError);

  SegmentationMap ok;
  ok.height = ok.width = 1;
  ok.labels = {0};
  auto bytes = encode_ppm(ok);
  bytes.back() ^= 0x01;  // now an off-palette color
  CHECK_THROWS_AS(decode_ppm(bytes.data(), bytes.size()), DataError);
  bytes.pop_back();
  CHECK_THROWS_AS(decode_ppm(bytes.data(), bytes.size() - 1), TruncatedError);
}
