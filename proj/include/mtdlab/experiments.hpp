#pragma once

// Experiment pipelines behind the CLI verbs. Every stage reads only its
// declared inputs, writes only under the run directory, records a manifest
// with a config hash, and is skipped when re-run on an unchanged config.
//
// Run directory layout:
//   <out>/seed_<s>/assets/{tasks.json, creative_<task>.json}
//   <out>/seed_<s>/models/<name>.{mtdm, loss.csv, json}
//   <out>/seed_<s>/eval/<variant>/{records.jsonl, traces/*.mtdt}
//   <out>/seed_<s>/steer/<task>/{generations.jsonl, diagnostics.jsonl, traces/*.mtdt}
//   <out>/seed_<s>/sweep/<task>.csv
//   <out>/seed_<s>/manifests/<stage>.json
//   <out>/analysis/{task_scores.csv, partial_correlation.csv, binned_curves.csv,
//                   creativity.csv, plots.json, summary.json}

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtdlab/analysis.hpp"
#include "mtdlab/model.hpp"
#include "mtdlab/steering.hpp"
#include "mtdlab/tasks.hpp"

namespace mtdlab {

inline constexpr const char* kVersion = "0.1.0";

struct VariantSpec {
  std::string name;
  ModelKind kind = ModelKind::kMtpMtd;
  bool access = true;  // latest-embedding access of the MTP head or PHi prior
};

struct RunConfig {
  std::string experiment = "desk";
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string out = "runs/desk";

  struct Tasks {
    int seq_len = 64;
    int n_memorized_sequences = 10;
    int n_memorized_pfas = 10;
  } tasks;

  ModelConfig model;
  MtpConfig mtp;  // enabled and access are set per variant
  PhiConfig phi;
  TrainConfig train;  // loss weights are set per variant
  double aux_weight = 1.0;  // weight of the MTP, MTD or PHi loss
  std::vector<VariantSpec> variants;

  struct Eval {
    int per_task = 100;  // sequences per non-ICLL task
    int icll = 500;      // ICLL sequences
    int traces_per_task = 2;
  } eval;

  struct Creative {
    std::vector<CreativeTask> tasks;
    CreativeSizeParams size;
    ModelConfig model;
    TrainConfig train;
    double aux_weight = 1.0;
  } creative;

  struct Steering {
    SteeringParams params;  // used by steer; the sweep takes temperature and alpha from the grids
    int n_generations = 50;
    std::vector<double> temp_grid{0.5, 0.75, 1.0, 1.25, 1.5};
    std::vector<double> alpha_grid{-0.4, -0.3, -0.2, -0.1, 0.0, 0.1, 0.2, 0.3, 0.4};
    int sweep_items = 200;
  } steering;

  struct Analysis {
    NormalizeMode normalize = NormalizeMode::kMean;
    int n_bins = 10;
    int n_resamples = 10000;
  } analysis;

  // Throws ConfigError on a broken invariant.
  void Validate() const;
};

// Desk-scale defaults (three mixture variants, four creative tasks).
RunConfig DefaultRunConfig();

// Reads a config on top of the defaults. Unknown keys and wrong types throw
// ConfigError naming the JSON path (e.g. "/model/d_model").
RunConfig RunConfigFromJson(const nlohmann::json& j);
RunConfig LoadRunConfig(const std::string& path);
nlohmann::json RunConfigToJson(const RunConfig& cfg);

enum class Stage { kGenAssets, kTrain, kEval, kSteer, kSweep, kAnalyze };
const char* StageName(Stage stage);

// Hex hash of the config sections a stage (and its upstream stages) reads.
std::string StageHash(const RunConfig& cfg, Stage stage, std::uint64_t seed);

std::string SeedDir(const RunConfig& cfg, std::uint64_t seed);

struct StageOptions {
  bool force = false;  // overwrite outputs written under another config
  std::ostream* log = nullptr;
};

// Per-seed stages. Each returns false when skipped as up to date. Existing
// outputs from a different config are refused unless options.force is set.
// Missing inputs throw DependencyError naming the command to run first.
bool CmdGenAssets(const RunConfig& cfg, std::uint64_t seed, const StageOptions& options);
bool CmdTrain(const RunConfig& cfg, std::uint64_t seed, const StageOptions& options);
bool CmdEval(const RunConfig& cfg, std::uint64_t seed, const StageOptions& options);
bool CmdSteer(const RunConfig& cfg, std::uint64_t seed, const StageOptions& options);
bool CmdSweep(const RunConfig& cfg, std::uint64_t seed, const StageOptions& options);
// Aggregates over cfg.seeds.
bool CmdAnalyze(const RunConfig& cfg, const StageOptions& options);

// Provenance line opening every CSV output.
std::string CsvProvenance(const std::string& hash, std::uint64_t seed);
nlohmann::json Provenance(const std::string& hash, std::uint64_t seed);

// Model described by a variant, before training.
MicroModel MakeVariantModel(const RunConfig& cfg, const VariantSpec& v, std::uint64_t seed);
TrainConfig VariantTrainConfig(const RunConfig& cfg, const VariantSpec& v, std::uint64_t seed);

// Normalized per-task scores with a hierarchical bootstrap interval:
// seeds are resampled, then sequences within each task of each drawn seed.
struct TaskScore {
  std::string task;
  double normalized = 0.0;
  Interval ci;
  double raw_mean = 0.0;
};
// scores[seed][task] holds per-sequence scores.
std::vector<TaskScore> NormalizedTaskScores(
    const std::vector<std::map<std::string, std::vector<double>>>& scores, NormalizeMode mode,
    int n_resamples, std::uint64_t seed);

}  // namespace mtdlab
