#include "mtdlab/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>

#include "mtdlab/errors.hpp"
#include "mtdlab/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mtdlab {

namespace {

constexpr std::uint64_t kEvalIndexOffset = 1ULL << 40;

// ---------------------------------------------------------------------------
// Config reading with JSON-path errors

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config " + Where() + ": expected an object");
  }

  template <typename T>
  void Get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    out = Convert<T>(j_.at(key), path_ + "/" + key);
  }

  bool Has(const char* key) const { return j_.contains(key); }

  Reader Child(const char* key) {
    seen_.insert(key);
    static const json kEmpty = json::object();
    return Reader(j_.contains(key) ? j_.at(key) : kEmpty, path_ + "/" + key);
  }

  const json& Raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string Path(const char* key) const { return path_ + "/" + key; }

  void Finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError("config " + path_ + "/" + key + ": unknown key");
    }
  }

  template <typename T>
  static T Convert(const json& v, const std::string& path) {
    auto fail = [&](const char* what) -> T {
      throw ConfigError("config " + (path.empty() ? std::string("/") : path) + ": expected " + what);
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) return fail("a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, int>) {
      if (!v.is_number_integer()) return fail("an integer");
      return v.get<int>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0) return fail("a non-negative integer");
      return v.get<std::uint64_t>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) return fail("a number");
      return v.get<double>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) return fail("a string");
      return v.get<std::string>();
    } else {
      if (!v.is_array()) return fail("an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(Convert<typename T::value_type>(v[i], path + "/" + std::to_string(i)));
      }
      return out;
    }
  }

 private:
  std::string Where() const { return path_.empty() ? "/" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void ReadModel(Reader r, ModelConfig& m) {
  r.Get("n_layers", m.n_layers);
  r.Get("d_model", m.d_model);
  r.Get("n_heads", m.n_heads);
  r.Get("d_mlp", m.d_mlp);
  r.Get("vocab_size", m.vocab_size);
  r.Get("context_len", m.context_len);
  r.Get("tied_embeddings", m.tied_embeddings);
  r.Get("init_std", m.init_std);
  r.Get("rope_base", m.rope_base);
  r.Finish();
}

json ModelJson(const ModelConfig& m) {
  return {{"n_layers", m.n_layers},       {"d_model", m.d_model},
          {"n_heads", m.n_heads},         {"d_mlp", m.d_mlp},
          {"vocab_size", m.vocab_size},   {"context_len", m.context_len},
          {"tied_embeddings", m.tied_embeddings}, {"init_std", m.init_std},
          {"rope_base", m.rope_base}};
}

void ReadTrain(Reader r, TrainConfig& t, double& aux_weight) {
  r.Get("steps", t.steps);
  r.Get("batch_size", t.batch_size);
  r.Get("warmup_steps", t.warmup_steps);
  r.Get("learning_rate", t.learning_rate);
  r.Get("grad_clip_norm", t.grad_clip_norm);
  r.Get("log_every", t.log_every);
  r.Get("aux_weight", aux_weight);
  r.Finish();
}

json TrainJson(const TrainConfig& t, double aux_weight) {
  return {{"steps", t.steps},
          {"batch_size", t.batch_size},
          {"warmup_steps", t.warmup_steps},
          {"learning_rate", t.learning_rate},
          {"grad_clip_norm", t.grad_clip_norm},
          {"log_every", t.log_every},
          {"aux_weight", aux_weight}};
}

std::vector<double> ParseDoubles(Reader& r, const char* key, std::vector<double> fallback) {
  r.Get(key, fallback);
  return fallback;
}

// ---------------------------------------------------------------------------
// Files

std::string Fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

void WriteFileAtomic(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f << content;
    if (!f) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string ReadFile(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void Require(const fs::path& path, const char* command) {
  if (!fs::exists(path)) {
    throw DependencyError("missing " + path.string() + "; run `mtdlab " + command + "` first");
  }
}

void Log(const StageOptions& o, const std::string& msg) {
  if (o.log) *o.log << msg << std::endl;
}

fs::path ManifestPath(const RunConfig& cfg, std::uint64_t seed, Stage stage) {
  return fs::path(SeedDir(cfg, seed)) / "manifests" / (std::string(StageName(stage)) + ".json");
}

bool ManifestMatches(const fs::path& manifest, const std::string& hash) {
  if (!fs::exists(manifest)) return false;
  try {
    const json m = json::parse(ReadFile(manifest));
    if (m.at("provenance").at("config_hash").get<std::string>() != hash) return false;
    const fs::path base = manifest.parent_path().parent_path();
    for (const auto& out : m.at("outputs")) {
      if (!fs::exists(base / out.get<std::string>())) return false;
    }
    return true;
  } catch (const json::exception&) {
    return false;
  }
}

// Decides whether a stage runs. Outputs recorded by a manifest under a
// different config are refused unless forced; outputs without a manifest come
// from an interrupted run and are rewritten.
bool ShouldRun(const fs::path& manifest, const std::string& hash, const std::vector<fs::path>& outputs,
               const StageOptions& o, const char* stage) {
  if (ManifestMatches(manifest, hash)) {
    Log(o, std::string(stage) + ": up to date");
    return false;
  }
  if (!o.force && fs::exists(manifest)) {
    for (const auto& p : outputs) {
      if (fs::exists(p)) {
        throw ConfigError(std::string(stage) + ": " + p.string() +
                          " exists from a different config; pass --force to overwrite");
      }
    }
  }
  return true;
}

void WriteManifest(const fs::path& manifest, const std::string& hash, std::uint64_t seed,
                   const std::vector<fs::path>& outputs) {
  json m{{"provenance", Provenance(hash, seed)}, {"outputs", json::array()}};
  const fs::path base = manifest.parent_path().parent_path();
  for (const auto& p : outputs) m["outputs"].push_back(fs::relative(p, base).generic_string());
  WriteFileAtomic(manifest, m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Hash inputs per stage

json AssetsSection(const RunConfig& c, std::uint64_t seed) {
  json tasks = json::array();
  for (CreativeTask t : c.creative.tasks) tasks.push_back(CreativeTaskName(t));
  const json full = RunConfigToJson(c);
  return {{"version", kVersion},
          {"seed", seed},
          {"tasks", full.at("tasks")},
          {"creative_tasks", tasks},
          {"creative_size", full.at("creative").at("size")}};
}

json TrainSection(const RunConfig& c, std::uint64_t seed) {
  const json full = RunConfigToJson(c);
  json s = AssetsSection(c, seed);
  for (const char* k : {"model", "mtp", "phi", "train", "variants"}) s[k] = full.at(k);
  s["creative_model"] = full.at("creative").at("model");
  s["creative_train"] = full.at("creative").at("train");
  return s;
}

std::string VariantHash(const RunConfig& c, const VariantSpec& v, std::uint64_t seed) {
  const json full = RunConfigToJson(c);
  json s = AssetsSection(c, seed);
  for (const char* k : {"model", "mtp", "phi", "train"}) s[k] = full.at(k);
  s["variant"] = {{"name", v.name}, {"kind", ModelKindName(v.kind)}, {"access", v.access}};
  return Fnv1a(s.dump());
}

std::string CreativeModelHash(const RunConfig& c, CreativeTask t, std::uint64_t seed) {
  const json full = RunConfigToJson(c);
  json s = AssetsSection(c, seed);
  s["creative_model"] = full.at("creative").at("model");
  s["creative_train"] = full.at("creative").at("train");
  s["task"] = CreativeTaskName(t);
  return Fnv1a(s.dump());
}

// ---------------------------------------------------------------------------
// Paths

fs::path AssetsDir(const RunConfig& c, std::uint64_t s) { return fs::path(SeedDir(c, s)) / "assets"; }
fs::path ModelsDir(const RunConfig& c, std::uint64_t s) { return fs::path(SeedDir(c, s)) / "models"; }
fs::path TasksAssetPath(const RunConfig& c, std::uint64_t s) { return AssetsDir(c, s) / "tasks.json"; }
fs::path CreativeAssetPath(const RunConfig& c, std::uint64_t s, CreativeTask t) {
  return AssetsDir(c, s) / (std::string("creative_") + CreativeTaskName(t) + ".json");
}
std::string CreativeModelName(CreativeTask t) { return std::string("creative_") + CreativeTaskName(t); }
fs::path CheckpointPath(const RunConfig& c, std::uint64_t s, const std::string& name) {
  return ModelsDir(c, s) / (name + ".mtdm");
}
fs::path RecordsPath(const RunConfig& c, std::uint64_t s, const std::string& variant) {
  return fs::path(SeedDir(c, s)) / "eval" / variant / "records.jsonl";
}
fs::path SweepPath(const RunConfig& c, std::uint64_t s, CreativeTask t) {
  return fs::path(SeedDir(c, s)) / "sweep" / (std::string(CreativeTaskName(t)) + ".csv");
}

TaskAssets LoadAssets(const RunConfig& c, std::uint64_t s) {
  const fs::path p = TasksAssetPath(c, s);
  Require(p, "gen-assets");
  json j = json::parse(ReadFile(p));
  j.erase("provenance");
  return AssetsFromJson(j);
}

CreativeSpec LoadCreative(const RunConfig& c, std::uint64_t s, CreativeTask t) {
  const fs::path p = CreativeAssetPath(c, s, t);
  Require(p, "gen-assets");
  json j = json::parse(ReadFile(p));
  j.erase("provenance");
  return CreativeSpecFromJson(j);
}

MicroModel LoadModel(const fs::path& path) {
  Require(path, "train");
  return LoadCheckpointFile(path.string());
}

std::string Num(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// NaN when the statistic is undefined on the data (e.g. a constant column).
template <typename F>
double OrNan(F f) {
  try {
    return f();
  } catch (const StatisticError&) {
    return std::numeric_limits<double>::quiet_NaN();
  } catch (const InputError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

// Trains a model unless a checkpoint with a matching manifest exists.
void TrainOne(MicroModel model, const ExampleSource& data, const TrainConfig& tc,
              const std::string& name, const std::string& hash, const RunConfig& cfg,
              std::uint64_t seed, const StageOptions& o, std::vector<fs::path>& outputs) {
  const fs::path ckpt = CheckpointPath(cfg, seed, name);
  const fs::path manifest = ModelsDir(cfg, seed) / (name + ".json");
  const fs::path curve = ModelsDir(cfg, seed) / (name + ".loss.csv");
  outputs.insert(outputs.end(), {ckpt, manifest, curve});
  if (fs::exists(manifest) && fs::exists(ckpt) && fs::exists(curve)) {
    const json m = json::parse(ReadFile(manifest));
    if (m.at("provenance").at("config_hash") == hash) {
      Log(o, "train: " + name + " up to date");
      return;
    }
  }
  if (!o.force && fs::exists(manifest) && fs::exists(ckpt)) {
    throw ConfigError("train: " + ckpt.string() +
                      " exists from a different config; pass --force to overwrite");
  }
  Log(o, "train: " + name + " (" + std::to_string(model.parameter_count()) + " parameters, " +
             std::to_string(tc.steps) + " steps)");
  const int every = std::max(1, tc.log_every * 10);
  const TrainResult res = Train(model, data, tc, vocab::kEnd, [&](int step, double loss) {
    if (step % every == 0) Log(o, "  step " + std::to_string(step) + " loss " + Num(loss));
  });
  fs::create_directories(ModelsDir(cfg, seed));
  {
    std::ostringstream os;
    os << CsvProvenance(hash, seed) << "\n";
    WriteLossCsv(res.curve, os);
    WriteFileAtomic(curve, os.str());
  }
  SaveCheckpointFile(model, ckpt.string() + ".tmp");
  fs::rename(ckpt.string() + ".tmp", ckpt);
  json final_losses = json::object();
  for (const auto& p : res.curve) final_losses[p.name] = p.value;
  WriteFileAtomic(manifest, json{{"provenance", Provenance(hash, seed)},
                                 {"name", name},
                                 {"steps_run", res.steps_run},
                                 {"final_losses", final_losses}}
                                    .dump(2) +
                                "\n");
}

std::vector<std::vector<std::string>> ReadCsvRows(const fs::path& path, std::vector<std::string>& header) {
  std::istringstream in(ReadFile(path));
  std::string line;
  std::vector<std::vector<std::string>> rows;
  header.clear();
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (header.empty()) {
      header = cells;
    } else {
      rows.push_back(cells);
    }
  }
  return rows;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void RunConfig::Validate() const {
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (out.empty()) throw ConfigError("out must not be empty");
  if (tasks.seq_len < 8) throw ConfigError("tasks.seq_len must be at least 8");
  if (tasks.n_memorized_sequences < 1 || tasks.n_memorized_pfas < 1) {
    throw ConfigError("memorized task pools must be non-empty");
  }
  model.Validate();
  for (const auto& v : variants) {
    if (v.kind == ModelKind::kPhi && (phi.placement_layer < 1 || phi.placement_layer >= model.n_layers)) {
      throw ConfigError("phi.placement_layer must lie in [1, model.n_layers)");
    }
  }
  if (model.vocab_size != vocab::kSize) {
    throw ConfigError("model.vocab_size must equal the task vocabulary (" + std::to_string(vocab::kSize) + ")");
  }
  if (model.context_len < tasks.seq_len) throw ConfigError("model.context_len must cover tasks.seq_len");
  train.Validate();
  std::set<std::string> names;
  for (const auto& v : variants) {
    if (v.name.empty() || !names.insert(v.name).second) throw ConfigError("variant names must be unique and non-empty");
  }
  if (eval.per_task < 3 || eval.icll < 3 || eval.traces_per_task < 0) {
    throw ConfigError("eval counts must be at least 3");
  }
  if (!creative.tasks.empty()) {
    creative.model.Validate();
    creative.train.Validate();
    if (creative.model.vocab_size != vocab::kSize) throw ConfigError("creative.model.vocab_size must equal the task vocabulary");
  }
  steering.params.Validate(std::max(model.context_len, steering.params.max_len));
  if (steering.n_generations < 1 || steering.sweep_items < 1) throw ConfigError("steering counts must be positive");
  for (double t : steering.temp_grid) {
    if (!(t > 0.0)) throw ConfigError("temp_grid entries must be positive");
  }
  if (steering.temp_grid.empty() || steering.alpha_grid.empty()) throw ConfigError("sweep grids must be non-empty");
  if (analysis.n_bins < 1 || analysis.n_resamples < 1) throw ConfigError("analysis counts must be positive");
}

RunConfig DefaultRunConfig() {
  RunConfig c;
  c.model.n_layers = 3;
  c.model.d_model = 64;
  c.model.n_heads = 4;
  c.model.d_mlp = 128;
  c.model.vocab_size = vocab::kSize;
  c.model.context_len = 64;
  c.phi.placement_layer = 2;
  c.phi.z_dim = 32;
  c.train.steps = 3000;
  c.train.batch_size = 16;
  c.train.warmup_steps = 300;
  c.train.learning_rate = 1e-3;
  c.variants = {{"mtd_on", ModelKind::kMtpMtd, true},
                {"mtd_off", ModelKind::kMtpMtd, false},
                {"phi_on", ModelKind::kPhi, true},
                {"phi_off", ModelKind::kPhi, false}};
  c.creative.tasks.assign(kAllCreativeTasks.begin(), kAllCreativeTasks.end());
  c.creative.model = c.model;
  c.creative.model.n_layers = 2;
  c.creative.train = c.train;
  c.creative.train.steps = 2000;
  c.creative.train.batch_size = 32;
  c.creative.train.warmup_steps = 200;
  c.steering.params.max_len = 64;
  return c;
}

RunConfig RunConfigFromJson(const json& j) {
  RunConfig c = DefaultRunConfig();
  Reader r(j, "");
  r.Get("experiment", c.experiment);
  r.Get("out", c.out);
  if (r.Has("seed")) {
    std::uint64_t s = 0;
    r.Get("seed", s);
    c.seeds = {s};
  }
  r.Get("seeds", c.seeds);
  {
    Reader t = r.Child("tasks");
    t.Get("seq_len", c.tasks.seq_len);
    t.Get("n_memorized_sequences", c.tasks.n_memorized_sequences);
    t.Get("n_memorized_pfas", c.tasks.n_memorized_pfas);
    t.Finish();
  }
  ReadModel(r.Child("model"), c.model);
  {
    Reader m = r.Child("mtp");
    m.Get("n_blocks", c.mtp.n_blocks);
    m.Finish();
  }
  {
    Reader p = r.Child("phi");
    p.Get("placement_layer", c.phi.placement_layer);
    p.Get("z_dim", c.phi.z_dim);
    p.Get("free_bits", c.phi.free_bits);
    p.Finish();
  }
  ReadTrain(r.Child("train"), c.train, c.aux_weight);
  if (r.Has("variants")) {
    const json& vs = r.Raw("variants");
    if (!vs.is_array()) throw ConfigError("config /variants: expected an array");
    c.variants.clear();
    for (std::size_t i = 0; i < vs.size(); ++i) {
      Reader v(vs[i], "/variants/" + std::to_string(i));
      VariantSpec spec;
      std::string kind = ModelKindName(spec.kind);
      v.Get("name", spec.name);
      v.Get("kind", kind);
      v.Get("access", spec.access);
      v.Finish();
      try {
        spec.kind = ParseModelKind(kind);
      } catch (const std::exception&) {
        throw ConfigError("config /variants/" + std::to_string(i) + "/kind: unknown model kind '" + kind + "'");
      }
      c.variants.push_back(spec);
    }
  }
  {
    Reader e = r.Child("eval");
    e.Get("per_task", c.eval.per_task);
    e.Get("icll", c.eval.icll);
    e.Get("traces_per_task", c.eval.traces_per_task);
    e.Finish();
  }
  {
    Reader cr = r.Child("creative");
    if (cr.Has("tasks")) {
      std::vector<std::string> names;
      cr.Get("tasks", names);
      c.creative.tasks.clear();
      for (std::size_t i = 0; i < names.size(); ++i) {
        try {
          c.creative.tasks.push_back(ParseCreativeTask(names[i]));
        } catch (const std::exception&) {
          throw ConfigError("config /creative/tasks/" + std::to_string(i) + ": unknown task '" + names[i] + "'");
        }
      }
    }
    Reader s = cr.Child("size");
    s.Get("n_leaves", c.creative.size.n_leaves);
    s.Get("n_parents", c.creative.size.n_parents);
    s.Get("n_graph_nodes", c.creative.size.n_graph_nodes);
    s.Get("edge_prob", c.creative.size.edge_prob);
    s.Get("n_prompts", c.creative.size.n_prompts);
    s.Get("prompt_nodes", c.creative.size.prompt_nodes);
    s.Get("prompt_edge_prob", c.creative.size.prompt_edge_prob);
    s.Get("max_prompt_edges", c.creative.size.max_prompt_edges);
    s.Get("answer_len", c.creative.size.answer_len);
    s.Get("train_fraction", c.creative.size.train_fraction);
    s.Finish();
    ReadModel(cr.Child("model"), c.creative.model);
    ReadTrain(cr.Child("train"), c.creative.train, c.creative.aux_weight);
    cr.Finish();
  }
  {
    Reader s = r.Child("steering");
    s.Get("temperature", c.steering.params.temperature);
    s.Get("alpha", c.steering.params.alpha);
    std::string mode = c.steering.params.fixed_entropy ? "fixed" : "geodesic";
    s.Get("entropy_mode", mode);
    if (mode != "fixed" && mode != "geodesic") {
      throw ConfigError("config /steering/entropy_mode: expected 'geodesic' or 'fixed'");
    }
    c.steering.params.fixed_entropy = mode == "fixed";
    if (s.Has("top_k")) {
      const json& k = s.Raw("top_k");
      if (k.is_null()) {
        c.steering.params.top_k.reset();
      } else {
        c.steering.params.top_k = Reader::Convert<int>(k, "/steering/top_k");
      }
    }
    s.Get("max_len", c.steering.params.max_len);
    s.Get("n_generations", c.steering.n_generations);
    c.steering.temp_grid = ParseDoubles(s, "temp_grid", c.steering.temp_grid);
    c.steering.alpha_grid = ParseDoubles(s, "alpha_grid", c.steering.alpha_grid);
    s.Get("sweep_items", c.steering.sweep_items);
    s.Finish();
  }
  {
    Reader a = r.Child("analysis");
    std::string mode = NormalizeModeName(c.analysis.normalize);
    a.Get("normalize", mode);
    try {
      c.analysis.normalize = ParseNormalizeMode(mode);
    } catch (const std::exception&) {
      throw ConfigError("config /analysis/normalize: expected mean, zscore or max");
    }
    a.Get("n_bins", c.analysis.n_bins);
    a.Get("n_resamples", c.analysis.n_resamples);
    a.Finish();
  }
  r.Finish();
  return c;
}

RunConfig LoadRunConfig(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return RunConfigFromJson(j);
}

json RunConfigToJson(const RunConfig& c) {
  json variants = json::array();
  for (const auto& v : c.variants) {
    variants.push_back({{"name", v.name}, {"kind", ModelKindName(v.kind)}, {"access", v.access}});
  }
  json ctasks = json::array();
  for (CreativeTask t : c.creative.tasks) ctasks.push_back(CreativeTaskName(t));
  const auto& s = c.creative.size;
  const auto& p = c.steering.params;
  return {
      {"experiment", c.experiment},
      {"seeds", c.seeds},
      {"out", c.out},
      {"tasks",
       {{"seq_len", c.tasks.seq_len},
        {"n_memorized_sequences", c.tasks.n_memorized_sequences},
        {"n_memorized_pfas", c.tasks.n_memorized_pfas}}},
      {"model", ModelJson(c.model)},
      {"mtp", {{"n_blocks", c.mtp.n_blocks}}},
      {"phi",
       {{"placement_layer", c.phi.placement_layer}, {"z_dim", c.phi.z_dim}, {"free_bits", c.phi.free_bits}}},
      {"train", TrainJson(c.train, c.aux_weight)},
      {"variants", variants},
      {"eval",
       {{"per_task", c.eval.per_task}, {"icll", c.eval.icll}, {"traces_per_task", c.eval.traces_per_task}}},
      {"creative",
       {{"tasks", ctasks},
        {"size",
         {{"n_leaves", s.n_leaves},
          {"n_parents", s.n_parents},
          {"n_graph_nodes", s.n_graph_nodes},
          {"edge_prob", s.edge_prob},
          {"n_prompts", s.n_prompts},
          {"prompt_nodes", s.prompt_nodes},
          {"prompt_edge_prob", s.prompt_edge_prob},
          {"max_prompt_edges", s.max_prompt_edges},
          {"answer_len", s.answer_len},
          {"train_fraction", s.train_fraction}}},
        {"model", ModelJson(c.creative.model)},
        {"train", TrainJson(c.creative.train, c.creative.aux_weight)}}},
      {"steering",
       {{"temperature", p.temperature},
        {"alpha", p.alpha},
        {"entropy_mode", p.fixed_entropy ? "fixed" : "geodesic"},
        {"top_k", p.top_k ? json(*p.top_k) : json(nullptr)},
        {"max_len", p.max_len},
        {"n_generations", c.steering.n_generations},
        {"temp_grid", c.steering.temp_grid},
        {"alpha_grid", c.steering.alpha_grid},
        {"sweep_items", c.steering.sweep_items}}},
      {"analysis",
       {{"normalize", NormalizeModeName(c.analysis.normalize)},
        {"n_bins", c.analysis.n_bins},
        {"n_resamples", c.analysis.n_resamples}}}};
}

const char* StageName(Stage stage) {
  switch (stage) {
    case Stage::kGenAssets: return "gen-assets";
    case Stage::kTrain: return "train";
    case Stage::kEval: return "eval";
    case Stage::kSteer: return "steer";
    case Stage::kSweep: return "sweep";
    case Stage::kAnalyze: return "analyze";
  }
  return "?";
}

std::string StageHash(const RunConfig& c, Stage stage, std::uint64_t seed) {
  const json full = RunConfigToJson(c);
  json s;
  switch (stage) {
    case Stage::kGenAssets: s = AssetsSection(c, seed); break;
    case Stage::kTrain: s = TrainSection(c, seed); break;
    case Stage::kEval:
      s = TrainSection(c, seed);
      s["eval"] = full.at("eval");
      break;
    case Stage::kSteer:
      s = TrainSection(c, seed);
      s["steer"] = full.at("steering");
      s["steer"].erase("temp_grid");
      s["steer"].erase("alpha_grid");
      s["steer"].erase("sweep_items");
      s["traces_per_task"] = c.eval.traces_per_task;
      break;
    case Stage::kSweep:
      s = TrainSection(c, seed);
      s["sweep"] = {{"temp_grid", c.steering.temp_grid},
                    {"alpha_grid", c.steering.alpha_grid},
                    {"sweep_items", c.steering.sweep_items},
                    {"entropy_mode", full.at("steering").at("entropy_mode")},
                    {"top_k", full.at("steering").at("top_k")}};
      break;
    case Stage::kAnalyze: {
      json parts = json::array();
      for (std::uint64_t sd : c.seeds) {
        parts.push_back(StageHash(c, Stage::kEval, sd));
        if (!c.creative.tasks.empty()) parts.push_back(StageHash(c, Stage::kSweep, sd));
      }
      s = {{"upstream", parts}, {"analysis", full.at("analysis")}, {"version", kVersion}};
      break;
    }
  }
  return Fnv1a(s.dump());
}

std::string SeedDir(const RunConfig& cfg, std::uint64_t seed) {
  return (fs::path(cfg.out) / ("seed_" + std::to_string(seed))).string();
}

std::string CsvProvenance(const std::string& hash, std::uint64_t seed) {
  return std::string("# mtdlab ") + kVersion + " config_hash=" + hash + " seed=" + std::to_string(seed);
}

json Provenance(const std::string& hash, std::uint64_t seed) {
  return {{"tool", "mtdlab"}, {"version", kVersion}, {"config_hash", hash}, {"seed", seed}};
}

MicroModel MakeVariantModel(const RunConfig& cfg, const VariantSpec& v, std::uint64_t seed) {
  MtpConfig mtp = cfg.mtp;
  PhiConfig phi = cfg.phi;
  mtp.enabled = v.kind == ModelKind::kMtpNll || v.kind == ModelKind::kMtpMtd;
  mtp.access_latest_embedding = v.access;
  phi.enabled = v.kind == ModelKind::kPhi;
  phi.access_latest_embedding = v.access;
  return MicroModel(cfg.model, mtp, phi, DeriveSeed({seed, 0x30DE1}));
}

TrainConfig VariantTrainConfig(const RunConfig& cfg, const VariantSpec& v, std::uint64_t seed) {
  TrainConfig tc = cfg.train;
  const double w = cfg.aux_weight;
  tc.loss_weights = {{"nll", 1.0}};
  switch (v.kind) {
    case ModelKind::kMtpNll: tc.loss_weights["mtp"] = w; break;
    case ModelKind::kMtpMtd: tc.loss_weights["mtd"] = w; break;
    case ModelKind::kPhi: tc.loss_weights["phi"] = w; break;
    case ModelKind::kPlain: break;
  }
  tc.seed = DeriveSeed({seed, 0x7EA1});
  return tc;
}

// ---------------------------------------------------------------------------
// Stages

bool CmdGenAssets(const RunConfig& cfg, std::uint64_t seed, const StageOptions& o) {
  cfg.Validate();
  const std::string hash = StageHash(cfg, Stage::kGenAssets, seed);
  std::vector<fs::path> outputs{TasksAssetPath(cfg, seed)};
  for (CreativeTask t : cfg.creative.tasks) outputs.push_back(CreativeAssetPath(cfg, seed, t));
  const fs::path manifest = ManifestPath(cfg, seed, Stage::kGenAssets);
  if (!ShouldRun(manifest, hash, outputs, o, "gen-assets")) return false;

  const TaskAssets assets = MakeTaskAssets(seed, cfg.tasks.seq_len, cfg.tasks.n_memorized_sequences,
                                           cfg.tasks.n_memorized_pfas);
  json j = AssetsToJson(assets);
  j["provenance"] = Provenance(hash, seed);
  WriteFileAtomic(outputs[0], j.dump(1) + "\n");
  for (std::size_t i = 0; i < cfg.creative.tasks.size(); ++i) {
    const CreativeTask t = cfg.creative.tasks[i];
    json cj = CreativeSpecToJson(MakeCreativeWorld(t, cfg.creative.size, seed));
    cj["provenance"] = Provenance(hash, seed);
    WriteFileAtomic(outputs[i + 1], cj.dump(1) + "\n");
  }
  WriteManifest(manifest, hash, seed, outputs);
  Log(o, "gen-assets: wrote " + std::to_string(outputs.size()) + " files");
  return true;
}

bool CmdTrain(const RunConfig& cfg, std::uint64_t seed, const StageOptions& o) {
  cfg.Validate();
  const std::string hash = StageHash(cfg, Stage::kTrain, seed);
  const fs::path manifest = ManifestPath(cfg, seed, Stage::kTrain);
  if (ManifestMatches(manifest, hash)) {
    Log(o, "train: up to date");
    return false;
  }
  const TaskAssets assets = LoadAssets(cfg, seed);
  std::vector<fs::path> outputs;
  for (const VariantSpec& v : cfg.variants) {
    const ExampleSource data = [&](std::uint64_t i) {
      TrainExample e;
      e.tokens = MakeMixtureSample(assets, seed, i).tokens;
      return e;
    };
    TrainOne(MakeVariantModel(cfg, v, seed), data, VariantTrainConfig(cfg, v, seed), v.name,
             VariantHash(cfg, v, seed), cfg, seed, o, outputs);
  }
  for (CreativeTask t : cfg.creative.tasks) {
    const CreativeSpec spec = LoadCreative(cfg, seed, t);
    const int need = CreativeGenerationLimit(spec, CreativePrompt(spec, 0).size());
    if (cfg.creative.model.context_len < std::max(need, CreativeMaxItemLen(spec))) {
      throw ConfigError("creative.model.context_len is shorter than the longest " +
                        std::string(CreativeTaskName(t)) + " item");
    }
    const std::uint64_t data_seed = DeriveSeed({seed, 0xDA7A, static_cast<std::uint64_t>(t)});
    const ExampleSource data = [&](std::uint64_t i) {
      CreativeExample ex = MakeCreativeExample(spec, data_seed, i);
      TrainExample e;
      e.tokens = std::move(ex.tokens);
      e.loss_mask = std::move(ex.loss_mask);
      return e;
    };
    MtpConfig mtp = cfg.mtp;
    mtp.enabled = true;
    mtp.access_latest_embedding = true;
    MicroModel model(cfg.creative.model, mtp, PhiConfig{},
                     DeriveSeed({seed, 0xC0DE, static_cast<std::uint64_t>(t)}));
    TrainConfig tc = cfg.creative.train;
    tc.loss_weights = {{"nll", 1.0}, {"mtd", cfg.creative.aux_weight}};
    tc.seed = DeriveSeed({seed, 0x7EA2, static_cast<std::uint64_t>(t)});
    TrainOne(std::move(model), data, tc, CreativeModelName(t), CreativeModelHash(cfg, t, seed), cfg,
             seed, o, outputs);
  }
  WriteManifest(manifest, hash, seed, outputs);
  return true;
}

bool CmdEval(const RunConfig& cfg, std::uint64_t seed, const StageOptions& o) {
  cfg.Validate();
  const std::string hash = StageHash(cfg, Stage::kEval, seed);
  const fs::path manifest = ManifestPath(cfg, seed, Stage::kEval);
  std::vector<fs::path> planned;
  for (const auto& v : cfg.variants) planned.push_back(RecordsPath(cfg, seed, v.name));
  if (!ShouldRun(manifest, hash, planned, o, "eval")) return false;
  const TaskAssets assets = LoadAssets(cfg, seed);

  std::vector<fs::path> outputs;
  for (const VariantSpec& v : cfg.variants) {
    const MicroModel model = LoadModel(CheckpointPath(cfg, seed, v.name));
    if (!model.has_mtp() && !model.has_phi()) {
      throw ConfigError("eval: checkpoint " + v.name + " has neither an MTP head nor a PHi module");
    }
    const fs::path dir = RecordsPath(cfg, seed, v.name).parent_path();
    fs::create_directories(dir / "traces");
    std::ostringstream records;
    records << json{{"provenance", Provenance(hash, seed)}, {"variant", v.name}}.dump() << "\n";
    for (Task task : kAllTasks) {
      const int n = task == Task::kIcll ? cfg.eval.icll : cfg.eval.per_task;
      for (int i = 0; i < n; ++i) {
        const TaskSample sample =
            MakeTaskSample(task, assets, seed, kEvalIndexOffset + static_cast<std::uint64_t>(i));
        ExperimentRecord rec;
        rec.labels["task"] = TaskName(task);
        rec.labels["seed"] = std::to_string(seed);
        if (sample.complexity_level) rec.labels["complexity"] = std::to_string(*sample.complexity_level);
        if (model.has_mtp()) {
          LogitTrace trace = RecordTrace(model, sample.tokens);
          for (const auto& [k, val] : rec.labels) trace.meta[k] = val;
          trace.meta["config_hash"] = hash;
          trace.meta["version"] = kVersion;
          rec.stats = ComputeSequenceStats(trace);
          if (i < cfg.eval.traces_per_task) {
            const fs::path tp = dir / "traces" / (std::string(TaskName(task)) + "_" + std::to_string(i) + ".mtdt");
            WriteTraceFile(trace, tp.string());
            outputs.push_back(tp);
          }
        } else {
          std::mt19937_64 rng = DeriveRng({seed, 0xE7A1, static_cast<std::uint64_t>(task), static_cast<std::uint64_t>(i)});
          const auto [logits, phi] = ForwardPhi(model, sample.tokens, rng);
          for (Eigen::Index r = 0; r + 1 < logits.rows(); ++r) {
            std::vector<double> row(logits.cols());
            for (Eigen::Index c = 0; c < logits.cols(); ++c) row[c] = logits(r, c);
            rec.stats.per_token_nll.push_back(Nll(std::span<const double>(row), sample.tokens[r + 1]));
            rec.stats.per_token_mtd.push_back(phi[r]);
          }
          for (double x : rec.stats.per_token_mtd) rec.stats.cum_mtd += x;
          for (double x : rec.stats.per_token_nll) rec.stats.cum_nll += x;
          const double len = static_cast<double>(rec.stats.per_token_nll.size());
          rec.stats.mean_mtd = rec.stats.cum_mtd / len;
          rec.stats.mean_nll = rec.stats.cum_nll / len;
        }
        records << RecordToJson(rec).dump() << "\n";
      }
    }
    WriteFileAtomic(RecordsPath(cfg, seed, v.name), records.str());
    outputs.push_back(RecordsPath(cfg, seed, v.name));
    Log(o, "eval: " + v.name + " done");
  }
  WriteManifest(manifest, hash, seed, outputs);
  return true;
}

bool CmdSteer(const RunConfig& cfg, std::uint64_t seed, const StageOptions& o) {
  cfg.Validate();
  const std::string hash = StageHash(cfg, Stage::kSteer, seed);
  const fs::path manifest = ManifestPath(cfg, seed, Stage::kSteer);
  const fs::path base = fs::path(SeedDir(cfg, seed)) / "steer";
  std::vector<fs::path> planned;
  for (CreativeTask t : cfg.creative.tasks) planned.push_back(base / CreativeTaskName(t) / "generations.jsonl");
  if (!ShouldRun(manifest, hash, planned, o, "steer")) return false;

  std::vector<fs::path> outputs;
  for (CreativeTask t : cfg.creative.tasks) {
    const CreativeSpec spec = LoadCreative(cfg, seed, t);
    const MicroModel model = LoadModel(CheckpointPath(cfg, seed, CreativeModelName(t)));
    const fs::path dir = base / CreativeTaskName(t);
    fs::create_directories(dir / "traces");
    std::ostringstream gens;
    std::ostringstream diags;
    gens << json{{"provenance", Provenance(hash, seed)}}.dump() << "\n";
    diags << json{{"provenance", Provenance(hash, seed)}}.dump() << "\n";
    std::vector<std::vector<int>> items;
    for (int i = 0; i < cfg.steering.n_generations; ++i) {
      const std::vector<int> prompt = CreativePrompt(spec, static_cast<std::uint64_t>(i));
      SteeringParams sp = cfg.steering.params;
      sp.max_len = CreativeGenerationLimit(spec, prompt.size());
      sp.seed = seed;
      std::mt19937_64 rng = DeriveRng({seed, 0x57EE, static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(i)});
      Generation g = Generate(model, prompt, sp, rng, vocab::kEnd, i < cfg.eval.traces_per_task);
      const ItemCheck check = CheckItem(spec, g.tokens);
      gens << json{{"index", i}, {"tokens", g.tokens}, {"valid", check.valid}, {"ended", g.ended}}.dump() << "\n";
      for (const auto& d : g.diagnostics) {
        diags << json{{"generation", i}, {"step", d.step}, {"mtd", d.mtd}, {"entropy_p", d.entropy_p},
                      {"entropy_s", d.entropy_s}, {"folded", d.folded}}
                     .dump()
              << "\n";
      }
      if (i < cfg.eval.traces_per_task) {
        g.trace.meta["task"] = CreativeTaskName(t);
        g.trace.meta["config_hash"] = hash;
        g.trace.meta["version"] = kVersion;
        const fs::path tp = dir / "traces" / ("generation_" + std::to_string(i) + ".mtdt");
        WriteTraceFile(g.trace, tp.string());
        outputs.push_back(tp);
      }
      items.push_back(std::move(g.tokens));
    }
    WriteFileAtomic(dir / "generations.jsonl", gens.str());
    WriteFileAtomic(dir / "diagnostics.jsonl", diags.str());
    outputs.push_back(dir / "generations.jsonl");
    outputs.push_back(dir / "diagnostics.jsonl");
    const CreativityScores s = ScoreItems(spec, items);
    Log(o, "steer: " + std::string(CreativeTaskName(t)) + " validity " + Num(s.validity) +
               " creativity " + Num(s.creativity));
  }
  WriteManifest(manifest, hash, seed, outputs);
  return true;
}

bool CmdSweep(const RunConfig& cfg, std::uint64_t seed, const StageOptions& o) {
  cfg.Validate();
  const std::string hash = StageHash(cfg, Stage::kSweep, seed);
  const fs::path manifest = ManifestPath(cfg, seed, Stage::kSweep);
  std::vector<fs::path> outputs;
  for (CreativeTask t : cfg.creative.tasks) outputs.push_back(SweepPath(cfg, seed, t));
  if (!ShouldRun(manifest, hash, outputs, o, "sweep")) return false;

  for (std::size_t k = 0; k < cfg.creative.tasks.size(); ++k) {
    const CreativeTask t = cfg.creative.tasks[k];
    const CreativeSpec spec = LoadCreative(cfg, seed, t);
    const MicroModel model = LoadModel(CheckpointPath(cfg, seed, CreativeModelName(t)));
    const auto rows = CreativityGrid(model, spec, cfg.steering.temp_grid, cfg.steering.alpha_grid,
                                     cfg.steering.sweep_items, cfg.steering.params.fixed_entropy,
                                     DeriveSeed({seed, 0x5EE9, static_cast<std::uint64_t>(t)}),
                                     cfg.steering.params.top_k);
    std::ostringstream os;
    os << CsvProvenance(hash, seed) << "\n";
    os << "temperature,alpha,validity,uniqueness,novelty,creativity,n_items,n_valid,n_unique,n_novel,"
          "mean_mtd,folded_fraction\n";
    for (const GridRow& r : rows) {
      os << Num(r.temperature) << ',' << Num(r.alpha) << ',' << Num(r.scores.validity) << ','
         << Num(r.scores.uniqueness) << ',' << Num(r.scores.novelty) << ',' << Num(r.scores.creativity)
         << ',' << r.scores.n_items << ',' << r.scores.n_valid << ',' << r.scores.n_unique << ','
         << r.scores.n_novel << ',' << Num(r.mean_mtd) << ',' << Num(r.folded_fraction) << "\n";
    }
    WriteFileAtomic(outputs[k], os.str());
    Log(o, "sweep: " + std::string(CreativeTaskName(t)) + " " + std::to_string(rows.size()) + " cells");
  }
  WriteManifest(manifest, hash, seed, outputs);
  return true;
}

std::vector<TaskScore> NormalizedTaskScores(
    const std::vector<std::map<std::string, std::vector<double>>>& scores, NormalizeMode mode,
    int n_resamples, std::uint64_t seed) {
  if (scores.empty()) throw InputError("no seeds to normalize");
  const std::size_t n_seeds = scores.size();
  std::vector<std::string> tasks;
  for (const auto& [t, v] : scores[0]) tasks.push_back(t);
  for (const auto& s : scores) {
    if (s.size() != tasks.size()) throw InputError("seeds disagree on the task set");
    for (const auto& t : tasks) {
      if (!s.contains(t) || s.at(t).empty()) throw InputError("task " + t + " has no scores");
    }
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };

  std::vector<TaskScore> out(tasks.size());
  for (std::size_t k = 0; k < tasks.size(); ++k) out[k].task = tasks[k];
  for (const auto& s : scores) {
    std::map<std::string, double> means;
    for (const auto& t : tasks) means[t] = mean(s.at(t));
    const auto norm = NormalizeTaskScores(means, mode);
    for (std::size_t k = 0; k < tasks.size(); ++k) {
      out[k].normalized += norm.at(tasks[k]) / static_cast<double>(n_seeds);
      out[k].raw_mean += means.at(tasks[k]) / static_cast<double>(n_seeds);
    }
  }

  std::mt19937_64 rng = DeriveRng({seed, 0x41E7});
  std::uniform_int_distribution<std::size_t> pick_seed(0, n_seeds - 1);
  std::vector<std::vector<double>> boot(tasks.size(), std::vector<double>(n_resamples, 0.0));
  for (int r = 0; r < n_resamples; ++r) {
    for (std::size_t d = 0; d < n_seeds; ++d) {
      const auto& s = scores[pick_seed(rng)];
      std::map<std::string, double> means;
      for (const auto& t : tasks) {
        const auto& v = s.at(t);
        std::uniform_int_distribution<std::size_t> pick(0, v.size() - 1);
        double acc = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) acc += v[pick(rng)];
        means[t] = acc / static_cast<double>(v.size());
      }
      const auto norm = NormalizeTaskScores(means, mode);
      for (std::size_t k = 0; k < tasks.size(); ++k) boot[k][r] += norm.at(tasks[k]) / static_cast<double>(n_seeds);
    }
  }
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    std::sort(boot[k].begin(), boot[k].end());
    out[k].ci = {QuantileSorted(boot[k], 0.025), QuantileSorted(boot[k], 0.975)};
  }
  return out;
}

bool CmdAnalyze(const RunConfig& cfg, const StageOptions& o) {
  cfg.Validate();
  const std::uint64_t seed0 = cfg.seeds.front();
  const std::string hash = StageHash(cfg, Stage::kAnalyze, seed0);
  const fs::path dir = fs::path(cfg.out) / "analysis";
  const std::vector<fs::path> outputs{dir / "task_scores.csv", dir / "partial_correlation.csv",
                                      dir / "binned_curves.csv", dir / "creativity.csv",
                                      dir / "plots.json",       dir / "summary.json"};
  const fs::path manifest = dir / "manifest.json";
  if (fs::exists(manifest)) {
    try {
      const json m = json::parse(ReadFile(manifest));
      bool all = m.at("provenance").at("config_hash") == hash;
      for (const auto& p : outputs) all = all && fs::exists(p);
      if (all) {
        Log(o, "analyze: up to date");
        return false;
      }
    } catch (const json::exception&) {
    }
  }
  if (!o.force) {
    for (const auto& p : outputs) {
      if (fs::exists(p) && fs::exists(manifest) &&
          json::parse(ReadFile(manifest)).at("provenance").at("config_hash") != hash) {
        throw ConfigError("analyze: " + p.string() + " exists from a different config; pass --force to overwrite");
      }
    }
  }
  for (std::uint64_t s : cfg.seeds) {
    Require(ManifestPath(cfg, s, Stage::kEval), "eval");
    if (!ManifestMatches(ManifestPath(cfg, s, Stage::kEval), StageHash(cfg, Stage::kEval, s))) {
      throw DependencyError("eval outputs for seed " + std::to_string(s) +
                            " are stale; run `mtdlab eval` first");
    }
    if (!cfg.creative.tasks.empty()) {
      Require(ManifestPath(cfg, s, Stage::kSweep), "sweep");
      if (!ManifestMatches(ManifestPath(cfg, s, Stage::kSweep), StageHash(cfg, Stage::kSweep, s))) {
        throw DependencyError("sweep outputs for seed " + std::to_string(s) +
                              " are stale; run `mtdlab sweep` first");
      }
    }
  }

  json summary{{"provenance", Provenance(hash, seed0)}, {"seeds", cfg.seeds}};
  json plots{{"provenance", Provenance(hash, seed0)}, {"series", json::array()}};
  std::ostringstream scores_csv;
  std::ostringstream pc_csv;
  std::ostringstream bins_csv;
  scores_csv << CsvProvenance(hash, seed0) << "\nvariant,task,normalized,lo,hi,raw_mean\n";
  pc_csv << CsvProvenance(hash, seed0) << "\nvariant,seed,n,partial_r,lo,hi,pearson_r\n";
  bins_csv << CsvProvenance(hash, seed0) << "\nvariant,normalized,group,bin,lo_edge,hi_edge,mean,count\n";

  for (const VariantSpec& v : cfg.variants) {
    std::vector<std::map<std::string, std::vector<double>>> per_seed;
    std::vector<double> x, y, z;
    std::vector<double> tok_nll, tok_score;
    std::vector<std::string> tok_group;
    json pc_seeds = json::array();
    for (std::uint64_t s : cfg.seeds) {
      std::istringstream in(ReadFile(RecordsPath(cfg, s, v.name)));
      std::string line;
      std::getline(in, line);
      std::map<std::string, std::vector<double>> tasks;
      std::vector<double> sx, sy, sz;
      while (std::getline(in, line)) {
        const ExperimentRecord rec = RecordFromJson(json::parse(line));
        tasks[rec.labels.at("task")].push_back(rec.stats.mean_mtd);
        if (rec.labels.at("task") == TaskName(Task::kIcll)) {
          const int level = std::stoi(rec.labels.at("complexity"));
          sx.push_back(rec.stats.mean_mtd);
          sy.push_back(level);
          sz.push_back(rec.stats.mean_nll);
          char g[16];
          std::snprintf(g, sizeof g, "level_%02d", level);
          for (std::size_t i = 0; i < rec.stats.per_token_nll.size(); ++i) {
            tok_nll.push_back(rec.stats.per_token_nll[i]);
            tok_score.push_back(rec.stats.per_token_mtd[i]);
            tok_group.emplace_back(g);
          }
        }
      }
      per_seed.push_back(std::move(tasks));
      const double r = OrNan([&] { return PartialCorrelation(sx, sy, sz); });
      pc_seeds.push_back({{"seed", s}, {"n", sx.size()}, {"partial_r", r}});
      pc_csv << v.name << ',' << s << ',' << sx.size() << ',' << Num(r) << ",,,"
             << Num(OrNan([&] { return Pearson(sx, sy); })) << "\n";
      x.insert(x.end(), sx.begin(), sx.end());
      y.insert(y.end(), sy.begin(), sy.end());
      z.insert(z.end(), sz.begin(), sz.end());
    }

    const auto ts = NormalizedTaskScores(per_seed, cfg.analysis.normalize, cfg.analysis.n_resamples, seed0);
    json ts_json = json::array();
    json series{{"name", "task_scores/" + v.name}, {"points", json::array()}};
    for (const TaskScore& t : ts) {
      scores_csv << v.name << ',' << t.task << ',' << Num(t.normalized) << ',' << Num(t.ci.lo) << ','
                 << Num(t.ci.hi) << ',' << Num(t.raw_mean) << "\n";
      ts_json.push_back({{"task", t.task}, {"normalized", t.normalized}, {"lo", t.ci.lo}, {"hi", t.ci.hi},
                         {"raw_mean", t.raw_mean}});
      series["points"].push_back({{"x", t.task}, {"y", t.normalized}, {"lo", t.ci.lo}, {"hi", t.ci.hi}});
    }
    plots["series"].push_back(series);
    summary["task_scores"][v.name] = ts_json;

    const double r = OrNan([&] { return PartialCorrelation(x, y, z); });
    const double pearson = OrNan([&] { return Pearson(x, y); });
    Interval ci{std::nan(""), std::nan("")};
    if (!std::isnan(r)) ci = BootstrapIndices(
        x.size(),
        [&](std::span<const std::size_t> idx) {
          std::vector<double> bx, by, bz;
          for (std::size_t i : idx) {
            bx.push_back(x[i]);
            by.push_back(y[i]);
            bz.push_back(z[i]);
          }
          try {
            return PartialCorrelation(bx, by, bz);
          } catch (const StatisticError&) {
            return 0.0;
          }
        },
        cfg.analysis.n_resamples, 0.95, seed0);
    pc_csv << v.name << ",pooled," << x.size() << ',' << Num(r) << ',' << Num(ci.lo) << ',' << Num(ci.hi)
           << ',' << Num(pearson) << "\n";
    summary["partial_correlation"][v.name] = {{"n", x.size()}, {"partial_r", r}, {"lo", ci.lo},
                                              {"hi", ci.hi}, {"pearson_r", pearson},
                                              {"per_seed", pc_seeds}};

    for (bool normalize : {false, true}) {
      const BinnedCurves bc = ComputeBinnedCurves(tok_nll, tok_score, tok_group, cfg.analysis.n_bins, normalize);
      for (std::size_t g = 0; g < bc.groups.size(); ++g) {
        json s{{"name", std::string("binned") + (normalize ? "_normalized/" : "/") + v.name + "/" + bc.groups[g]},
               {"points", json::array()}};
        for (int b = 0; b < cfg.analysis.n_bins; ++b) {
          const std::string lo = b == 0 ? "" : Num(bc.edges[b - 1]);
          const std::string hi = b + 1 == cfg.analysis.n_bins ? "" : Num(bc.edges[b]);
          bins_csv << v.name << ',' << (normalize ? 1 : 0) << ',' << bc.groups[g] << ',' << b << ',' << lo
                   << ',' << hi << ',' << Num(bc.means[g][b]) << ',' << bc.counts[g][b] << "\n";
          if (bc.counts[g][b] > 0) {
            s["points"].push_back({{"x", b}, {"y", bc.means[g][b]}, {"lo", nullptr}, {"hi", nullptr}});
          }
        }
        plots["series"].push_back(s);
      }
    }
  }

  std::ostringstream cr_csv;
  cr_csv << CsvProvenance(hash, seed0) << "\ntask,seed,best_negative,best_zero,best_positive,best_temperature,best_alpha\n";
  for (CreativeTask t : cfg.creative.tasks) {
    json task_rows = json::array();
    std::map<std::pair<double, double>, std::vector<double>> cells;
    for (std::uint64_t s : cfg.seeds) {
      std::vector<std::string> header;
      const auto rows = ReadCsvRows(SweepPath(cfg, s, t), header);
      double neg = -1.0, zero = -1.0, pos = -1.0, best = -1.0, best_t = 0.0, best_a = 0.0;
      for (const auto& row : rows) {
        const double temp = std::stod(row.at(0));
        const double alpha = std::stod(row.at(1));
        const double c = std::stod(row.at(5));
        cells[{temp, alpha}].push_back(c);
        double& slot = alpha < 0.0 ? neg : (alpha > 0.0 ? pos : zero);
        slot = std::max(slot, c);
        if (c > best) {
          best = c;
          best_t = temp;
          best_a = alpha;
        }
      }
      cr_csv << CreativeTaskName(t) << ',' << s << ',' << Num(neg) << ',' << Num(zero) << ',' << Num(pos) << ','
             << Num(best_t) << ',' << Num(best_a) << "\n";
      task_rows.push_back({{"seed", s}, {"best_negative", neg}, {"best_zero", zero}, {"best_positive", pos},
                           {"best_temperature", best_t}, {"best_alpha", best_a}});
    }
    summary["creativity"][CreativeTaskName(t)] = task_rows;
    json grid{{"name", std::string("creativity/") + CreativeTaskName(t)}, {"points", json::array()}};
    for (const auto& [key, vals] : cells) {
      double m = 0.0;
      for (double c : vals) m += c;
      m /= static_cast<double>(vals.size());
      const auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());
      grid["points"].push_back({{"x", {key.first, key.second}}, {"y", m}, {"lo", *lo}, {"hi", *hi}});
    }
    plots["series"].push_back(grid);
  }

  WriteFileAtomic(outputs[0], scores_csv.str());
  WriteFileAtomic(outputs[1], pc_csv.str());
  WriteFileAtomic(outputs[2], bins_csv.str());
  WriteFileAtomic(outputs[3], cr_csv.str());
  WriteFileAtomic(outputs[4], plots.dump(1) + "\n");
  WriteFileAtomic(outputs[5], summary.dump(2) + "\n");
  WriteFileAtomic(manifest, json{{"provenance", Provenance(hash, seed0)}}.dump(2) + "\n");
  Log(o, "analyze: wrote " + dir.string());
  return true;
}

}  // namespace mtdlab
