#include "iwivig/cli.hpp"
#include "iwivig/explanations.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace iwivig;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "iwivig");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Shared small run: dataset, tiny config, one trained checkpoint.
struct Fixture {
  fs::path dir = fs::temp_directory_path() / "iwivig_unit_cli";
  fs::path data = dir / "data" / "manifest.json";
  fs::path config = dir / "tiny.json";

  Fixture() {
    if (fs::exists(dir / "ck.json")) return;
    fs::remove_all(dir);
    fs::create_directories(dir);
    REQUIRE(run({"generate-data", "--out", (dir / "data").string(), "--n", "20", "--seed", "4"}).code == 0);
    std::ofstream(config) << R"({"model": {"stage_dims": [8, 16, 16, 16]},
                                 "train": {"epochs": 2, "lr": 0.002, "batch_size": 6, "eval_every": 1}})";
    const Result r = run({"train", "--config", config.string(), "--data", data.string(), "--out", (dir / "ck").string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
  }
};

}  // namespace

TEST_CASE("cli usage errors exit with 1") {
  CHECK(run({}).code == 1);
  CHECK(run({"no-such-verb"}).code == 1);
  CHECK(run({"train", "--data"}).code == 1);
  CHECK(run({"explain", "--checkpoint", "x", "--image", "y", "--out", "z", "-p", "5"}).code == 1);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("cli data errors exit with 2") {
  Fixture f;
  const Result r = run({"evaluate", "--checkpoint", (f.dir / "missing").string(), "--data", f.data.string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("missing") != std::string::npos);
  CHECK(run({"evaluate", "--checkpoint", (f.dir / "ck").string(), "--data", (f.dir / "nope.json").string()}).code == 2);
}

TEST_CASE("cli bad config values exit with 1") {
  Fixture f;
  std::ofstream(f.dir / "bad.json") << R"({"model": {"bottleneck": {"r": 1.5}}})";
  CHECK(run({"train", "--config", (f.dir / "bad.json").string(), "--data", f.data.string(), "--out",
             (f.dir / "never").string()})
            .code == 1);
  std::ofstream(f.dir / "unknown.json") << R"({"train": {"epochz": 3}})";
  CHECK(run({"train", "--config", (f.dir / "unknown.json").string(), "--data", f.data.string(), "--out",
             (f.dir / "never").string()})
            .code == 1);
}

TEST_CASE("cli numeric failures exit with 3") {
  Fixture f;
  std::ofstream(f.dir / "explode.json") << R"({"model": {"stage_dims": [8, 16, 16, 16]},
                                               "train": {"epochs": 3, "lr": 1e150, "batch_size": 4}})";
  const Result r = run({"train", "--config", (f.dir / "explode.json").string(), "--data", f.data.string(), "--out",
                        (f.dir / "boom").string()});
  CHECK(r.code == 3);
  CHECK(r.err.find("epoch") != std::string::npos);
}

TEST_CASE("cli evaluate reports the classification metric set") {
  Fixture f;
  const Result r = run({"evaluate", "--checkpoint", (f.dir / "ck").string(), "--data", f.data.string()});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j.at("count") == 4);
  CHECK(j.contains("accuracy"));
  CHECK(j.contains("macro_f1"));
  CHECK(j.at("split") == "test");
}

TEST_CASE("cli explain at percentile 5 emits 4 of 80 edges, idempotently") {
  Fixture f;
  const std::string img = (f.dir / "data" / "images" / "00000.png").string();
  for (const char* name : {"e1", "e2"}) {
    REQUIRE(run({"explain", "--checkpoint", (f.dir / "ck.json").string(), "--image", img, "--out",
                 (f.dir / name).string(), "--percentile", "5"})
                .code == 0);
  }
  const Explanation e = import_json((f.dir / "e1.json").string());
  CHECK(e.edges.size() == 4);
  CHECK(slurp(f.dir / "e1.json") == slurp(f.dir / "e2.json"));
  CHECK(slurp(f.dir / "e1.png") == slurp(f.dir / "e2.png"));
}

TEST_CASE("cli metrics writes JSON and CSV reports, idempotently") {
  Fixture f;
  for (const char* name : {"m1", "m2"}) {
    const Result r = run({"metrics", "--checkpoint", (f.dir / "ck").string(), "--data", f.data.string(), "--split",
                          "test", "--out", (f.dir / name).string(), "--ig-steps", "8", "--infidelity-samples", "2",
                          "--max-attribution-images", "1", "--plot"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
  }
  CHECK(slurp(f.dir / "m1.json") == slurp(f.dir / "m2.json"));
  CHECK(slurp(f.dir / "m1.csv") == slurp(f.dir / "m2.csv"));
  const auto j = nlohmann::json::parse(slurp(f.dir / "m1.json"));
  CHECK(j.at("insertion").at("descending").at("fractions").size() == 21);
  CHECK(j.at("settings").at("perturbation") == "square_removal");
  CHECK(j.at("planted").at("recall").is_number());
  const std::string csv = slurp(f.dir / "m1.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 4 + 1);
  CHECK(fs::exists(f.dir / "m1_insertion.png"));
}

TEST_CASE("cli r-sweep tabulates one row per r, deterministically") {
  Fixture f;
  std::ofstream(f.dir / "sweep.json") << R"({"model": {"stage_dims": [8, 16, 16, 16]},
                                             "train": {"epochs": 1, "lr": 0.002, "batch_size": 6}})";
  for (const char* name : {"s1.csv", "s2.csv"}) {
    REQUIRE(run({"r-sweep", "--config", (f.dir / "sweep.json").string(), "--data", f.data.string(), "--out",
                 (f.dir / name).string(), "--r", "0.3,0.5,0.7"})
                .code == 0);
  }
  const std::string csv = slurp(f.dir / "s1.csv");
  CHECK(csv == slurp(f.dir / "s2.csv"));
  CHECK(csv.substr(0, csv.find('\n')) == "r,weight_sd,goodness_of_fit,auc");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(csv.find("\n0.3,") != std::string::npos);
  CHECK(csv.find("\n0.7,") != std::string::npos);
  CHECK(run({"r-sweep", "--data", f.data.string(), "--out", (f.dir / "s3.csv").string(), "--r", "0.3,x"}).code == 1);
}

TEST_CASE("cli train is idempotent") {
  Fixture f;
  REQUIRE(run({"train", "--config", f.config.string(), "--data", f.data.string(), "--out", (f.dir / "ck2").string()})
              .code == 0);
  CHECK(slurp(f.dir / "ck.bin") == slurp(f.dir / "ck2.bin"));
  auto a = nlohmann::json::parse(slurp(f.dir / "ck.json"));
  auto b = nlohmann::json::parse(slurp(f.dir / "ck2.json"));
  CHECK(a.at("blob") == "ck.bin");
  CHECK(b.at("blob") == "ck2.bin");
  a.erase("blob");
  b.erase("blob");
  CHECK(a == b);
}
