#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "mtdlab/errors.hpp"
#include "mtdlab/experiments.hpp"

using namespace mtdlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path TempDir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mtdlab_test_" + name);
  fs::remove_all(dir);
  return dir;
}

RunConfig Tiny(const fs::path& out) {
  const json j = json::parse(R"({
    "experiment": "tiny",
    "seeds": [0],
    "tasks": {"seq_len": 32, "n_memorized_sequences": 3, "n_memorized_pfas": 3},
    "model": {"n_layers": 2, "d_model": 8, "n_heads": 2, "d_mlp": 16, "context_len": 32},
    "phi": {"placement_layer": 1, "z_dim": 4},
    "train": {"steps": 3, "batch_size": 2, "warmup_steps": 1},
    "variants": [{"name": "on", "kind": "mtp_mtd", "access": true},
                 {"name": "phi", "kind": "phi", "access": true}],
    "eval": {"per_task": 3, "icll": 4, "traces_per_task": 1},
    "creative": {"tasks": ["sibling_discovery"],
                 "model": {"n_layers": 1, "d_model": 8, "n_heads": 2, "d_mlp": 16, "context_len": 64},
                 "train": {"steps": 3, "batch_size": 2, "warmup_steps": 1}},
    "steering": {"n_generations": 2, "temp_grid": [1.0], "alpha_grid": [0.0, 0.2], "sweep_items": 3},
    "analysis": {"n_bins": 2, "n_resamples": 50}
  })");
  RunConfig c = RunConfigFromJson(j);
  c.out = out.string();
  return c;
}

std::string ErrorOf(const json& j) {
  try {
    RunConfigFromJson(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("config errors name the offending path") {
  CHECK(ErrorOf(json::parse(R"({"model": {"d_model": "big"}})")).find("/model/d_model") != std::string::npos);
  CHECK(ErrorOf(json::parse(R"({"train": {"stepz": 3}})")).find("/train/stepz") != std::string::npos);
  CHECK(ErrorOf(json::parse(R"({"creative": {"tasks": ["poetry"]}})")).find("/creative/tasks/0") !=
        std::string::npos);
  CHECK(ErrorOf(json::parse(R"({"steering": {"entropy_mode": "flat"}})")).find("entropy_mode") !=
        std::string::npos);
  CHECK(ErrorOf(json::parse(R"({"variants": [{"name": "x", "kind": "rnn"}]})")).find("/variants/0/kind") !=
        std::string::npos);
  CHECK_THROWS_AS(RunConfigFromJson(json::parse(R"({"seeds": []})")).Validate(), ConfigError);
  CHECK_THROWS_AS(RunConfigFromJson(json::parse(R"({"steering": {"temp_grid": [0.0]}})")).Validate(),
                  ConfigError);
}

TEST_CASE("config round trip and seed override") {
  const RunConfig d = DefaultRunConfig();
  d.Validate();
  const json j = RunConfigToJson(d);
  CHECK(RunConfigToJson(RunConfigFromJson(j)) == j);
  CHECK(RunConfigFromJson(json{{"seed", 7}}).seeds == std::vector<std::uint64_t>{7});
  const RunConfig top = RunConfigFromJson(json::parse(R"({"steering": {"top_k": 5}})"));
  CHECK(top.steering.params.top_k == 5);
  CHECK_FALSE(RunConfigFromJson(json::parse(R"({"steering": {"top_k": null}})")).steering.params.top_k);
}

TEST_CASE("stage hashes track only their inputs") {
  RunConfig a = DefaultRunConfig();
  RunConfig b = a;
  b.analysis.n_bins = 7;
  CHECK(StageHash(a, Stage::kTrain, 0) == StageHash(b, Stage::kTrain, 0));
  CHECK(StageHash(a, Stage::kAnalyze, 0) != StageHash(b, Stage::kAnalyze, 0));
  b = a;
  b.train.steps += 1;
  CHECK(StageHash(a, Stage::kGenAssets, 0) == StageHash(b, Stage::kGenAssets, 0));
  CHECK(StageHash(a, Stage::kTrain, 0) != StageHash(b, Stage::kTrain, 0));
  CHECK(StageHash(a, Stage::kEval, 0) != StageHash(b, Stage::kEval, 0));
  CHECK(StageHash(a, Stage::kTrain, 0) != StageHash(a, Stage::kTrain, 1));
}

TEST_CASE("gen-assets is deterministic and skips when up to date") {
  const fs::path d1 = TempDir("assets1"), d2 = TempDir("assets2");
  const RunConfig c1 = Tiny(d1), c2 = Tiny(d2);
  CHECK(CmdGenAssets(c1, 0, {}));
  CHECK(CmdGenAssets(c2, 0, {}));
  for (const char* f : {"tasks.json", "creative_sibling_discovery.json"}) {
    const std::string a = Slurp(d1 / "seed_0" / "assets" / f);
    CHECK_FALSE(a.empty());
    CHECK(a == Slurp(d2 / "seed_0" / "assets" / f));
    CHECK(json::parse(a).at("provenance").at("config_hash") == StageHash(c1, Stage::kGenAssets, 0));
  }
  CHECK_FALSE(CmdGenAssets(c1, 0, {}));

  RunConfig changed = c1;
  changed.tasks.n_memorized_sequences = 4;
  CHECK_THROWS_AS(CmdGenAssets(changed, 0, {}), ConfigError);
  StageOptions force;
  force.force = true;
  CHECK(CmdGenAssets(changed, 0, force));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("missing inputs raise dependency errors naming the command") {
  const fs::path dir = TempDir("deps");
  const RunConfig c = Tiny(dir);
  try {
    CmdTrain(c, 0, {});
    FAIL("expected DependencyError");
  } catch (const DependencyError& e) {
    CHECK(std::string(e.what()).find("mtdlab gen-assets") != std::string::npos);
  }
  CHECK(CmdGenAssets(c, 0, {}));
  CHECK_THROWS_AS(CmdEval(c, 0, {}), DependencyError);
  CHECK_THROWS_AS(CmdSweep(c, 0, {}), DependencyError);
  CHECK_THROWS_AS(CmdAnalyze(c, {}), DependencyError);
  fs::remove_all(dir);
}

TEST_CASE("pipeline runs end to end and resumes") {
  const fs::path dir = TempDir("pipeline");
  const RunConfig c = Tiny(dir);
  CHECK(CmdGenAssets(c, 0, {}));
  CHECK(CmdTrain(c, 0, {}));
  CHECK_FALSE(CmdTrain(c, 0, {}));
  CHECK(CmdEval(c, 0, {}));
  CHECK(CmdSteer(c, 0, {}));
  CHECK(CmdSweep(c, 0, {}));
  CHECK(CmdAnalyze(c, {}));
  CHECK_FALSE(CmdAnalyze(c, {}));

  const fs::path seed = dir / "seed_0";
  std::ifstream records(seed / "eval" / "on" / "records.jsonl");
  std::string first;
  std::getline(records, first);
  CHECK(json::parse(first).contains("provenance"));

  std::ifstream sweep(seed / "sweep" / "sibling_discovery.csv");
  std::string line;
  std::getline(sweep, line);
  CHECK(line.rfind("# mtdlab 0.1.0 config_hash=", 0) == 0);

  const json summary = json::parse(Slurp(dir / "analysis" / "summary.json"));
  CHECK(summary.contains("task_scores"));
  CHECK(summary.at("task_scores").contains("on"));
  CHECK(summary.at("creativity").contains("sibling_discovery"));
  fs::remove_all(dir);
}

TEST_CASE("eval rejects a model with neither MTP head nor PHi") {
  const fs::path dir = TempDir("plain");
  RunConfig c = Tiny(dir);
  c.variants = {{"plain", ModelKind::kPlain, false}};
  c.creative.tasks.clear();
  CHECK(CmdGenAssets(c, 0, {}));
  CHECK(CmdTrain(c, 0, {}));
  CHECK_THROWS_AS(CmdEval(c, 0, {}), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("normalized task scores") {
  std::vector<std::map<std::string, std::vector<double>>> scores(2);
  for (auto& s : scores) {
    s["a"] = {1.0, 1.0, 1.0};
    s["b"] = {3.0, 3.0, 3.0};
  }
  const auto out = NormalizedTaskScores(scores, NormalizeMode::kMean, 100, 1);
  REQUIRE(out.size() == 2);
  CHECK(out[0].task == "a");
  CHECK(out[0].normalized == doctest::Approx(0.5));
  CHECK(out[0].ci.lo == doctest::Approx(0.5));
  CHECK(out[0].ci.hi == doctest::Approx(0.5));
  CHECK(out[1].normalized == doctest::Approx(1.5));
  CHECK(out[1].raw_mean == doctest::Approx(3.0));
}
