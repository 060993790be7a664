#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <random>

#include "json.hpp"
#include "mtdlab/analysis.hpp"
#include "mtdlab/divergence.hpp"
#include "mtdlab/errors.hpp"
#include "mtdlab/experiments.hpp"
#include "mtdlab/geometry.hpp"
#include "mtdlab/rng.hpp"
#include "mtdlab/steering.hpp"
#include "mtdlab/tasks.hpp"

namespace py = pybind11;
using namespace mtdlab;

namespace {

std::vector<double> Probs(const CategoricalDist& d) { return {d.probs().begin(), d.probs().end()}; }

py::dict TraceToDict(const LogitTrace& t) {
  py::list records;
  for (const auto& r : t.records) {
    py::dict d;
    d["token_id"] = r.token_id;
    d["full_logits"] = r.full_logits;
    d["mtp_logits"] = r.mtp_logits;
    records.append(d);
  }
  py::dict out;
  out["vocab_size"] = t.vocab_size;
  out["records"] = records;
  out["meta"] = t.meta;
  return out;
}

LogitTrace TraceFromDict(const py::dict& d) {
  LogitTrace t;
  t.vocab_size = d["vocab_size"].cast<std::uint32_t>();
  for (const auto& item : d["records"]) {
    const auto r = item.cast<py::dict>();
    t.records.push_back({r["token_id"].cast<std::uint32_t>(), r["full_logits"].cast<std::vector<float>>(),
                         r["mtp_logits"].cast<std::vector<float>>()});
  }
  if (d.contains("meta")) t.meta = d["meta"].cast<std::map<std::string, std::string>>();
  t.Validate();
  return t;
}

py::dict ScoresToDict(const CreativityScores& s) {
  py::dict d;
  d["validity"] = s.validity;
  d["uniqueness"] = s.uniqueness;
  d["novelty"] = s.novelty;
  d["creativity"] = s.creativity;
  d["n_items"] = s.n_items;
  d["n_valid"] = s.n_valid;
  d["n_unique"] = s.n_unique;
  d["n_novel"] = s.n_novel;
  return d;
}

}  // namespace

PYBIND11_MODULE(_mtdlab, m) {
  m.doc() = "Multiple Token Divergence: geometry, divergence, tasks, steering and analysis";
  m.attr("__version__") = kVersion;

  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<StatisticError>(m, "StatisticError", PyExc_ArithmeticError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_RuntimeError);
  py::register_exception<DependencyError>(m, "DependencyError", PyExc_RuntimeError);
  py::register_exception<GenerationError>(m, "GenerationError", PyExc_RuntimeError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  // Geometry
  m.def("softmax_with_temperature",
        [](const std::vector<double>& logits, double t) { return Probs(SoftmaxWithTemperature(logits, t)); },
        py::arg("logits"), py::arg("temperature") = 1.0);
  m.def("entropy", [](const std::vector<double>& p) { return Entropy(CategoricalDist(p)); });
  m.def("kl_divergence", [](const std::vector<double>& p, const std::vector<double>& q) {
    return KlDivergence(CategoricalDist(p), CategoricalDist(q));
  });
  m.def("bhattacharyya_angle", [](const std::vector<double>& p, const std::vector<double>& q) {
    return BhattacharyyaAngle(CategoricalDist(p), CategoricalDist(q));
  });
  m.def(
      "geodesic_interpolate",
      [](const std::vector<double>& p, const std::vector<double>& q, double alpha) {
        const GeodesicPoint g = GeodesicInterpolateEx(CategoricalDist(p), CategoricalDist(q), alpha);
        return py::make_tuple(Probs(g.dist), g.folded);
      },
      "Returns (probabilities, folded).");
  m.def(
      "fixed_entropy_project",
      [](const std::vector<double>& s, double h, double tol) {
        const EntropyProjection e = FixedEntropyProject(CategoricalDist(s), h, tol);
        return py::make_tuple(Probs(e.dist), e.temperature);
      },
      py::arg("s"), py::arg("h_target"), py::arg("tol") = 1e-9, "Returns (probabilities, temperature).");

  // Divergence
  m.def("mtd", [](const std::vector<double>& f, const std::vector<double>& q, double t) { return Mtd(f, q, t); },
        py::arg("full_logits"), py::arg("mtp_logits"), py::arg("temperature") = 1.0);
  m.def("nll", [](const std::vector<double>& f, std::uint32_t tok) { return Nll(f, tok); });
  m.def("read_trace", [](const std::string& path) { return TraceToDict(ReadTraceFile(path)); });
  m.def("write_trace", [](const py::dict& d, const std::string& path) { WriteTraceFile(TraceFromDict(d), path); });
  m.def(
      "sequence_stats",
      [](const py::dict& d, double t) {
        const SequenceStats s = ComputeSequenceStats(TraceFromDict(d), t);
        py::dict out;
        out["per_token_mtd"] = s.per_token_mtd;
        out["per_token_nll"] = s.per_token_nll;
        out["mean_mtd"] = s.mean_mtd;
        out["mean_nll"] = s.mean_nll;
        out["cum_mtd"] = s.cum_mtd;
        out["cum_nll"] = s.cum_nll;
        return out;
      },
      py::arg("trace"), py::arg("temperature") = 1.0);

  // Tasks
  m.def("generate_pfa", [](int level, std::uint64_t seed) {
    std::mt19937_64 rng = DeriveRng({seed});
    return PfaToJson(GeneratePfa(level, rng)).dump();
  }, "PFA of a complexity level as a JSON string.");
  m.def("description_length", [](const std::string& pfa_json) {
    return DescriptionLength(PfaFromJson(nlohmann::json::parse(pfa_json)));
  });
  m.def("complexity_level", &ComplexityLevel);
  m.def("make_creative_world", [](const std::string& task, std::uint64_t seed) {
    return CreativeSpecToJson(MakeCreativeWorld(ParseCreativeTask(task), {}, seed)).dump();
  }, "Creative world with default sizes as a JSON string.");
  m.def("enumerate_valid_items", [](const std::string& spec_json) {
    return EnumerateValidItems(CreativeSpecFromJson(nlohmann::json::parse(spec_json)));
  });
  m.def("score_items", [](const std::string& spec_json, const std::vector<std::vector<int>>& items) {
    return ScoresToDict(ScoreItems(CreativeSpecFromJson(nlohmann::json::parse(spec_json)), items));
  });

  // Steering
  m.def(
      "steered_distribution",
      [](const std::vector<float>& full, const std::vector<float>& mtp, double temperature, double alpha,
         bool fixed_entropy, std::optional<int> top_k) {
        SteeringParams sp;
        sp.temperature = temperature;
        sp.alpha = alpha;
        sp.fixed_entropy = fixed_entropy;
        sp.top_k = top_k;
        const SteeredDistribution d = SteeredDistributionFor(full, mtp, sp);
        py::dict diag;
        diag["mtd"] = d.diagnostics.mtd;
        diag["entropy_p"] = d.diagnostics.entropy_p;
        diag["entropy_s"] = d.diagnostics.entropy_s;
        diag["folded"] = d.diagnostics.folded;
        return py::make_tuple(d.probs, diag);
      },
      py::arg("full_logits"), py::arg("mtp_logits"), py::arg("temperature") = 1.0, py::arg("alpha") = 0.0,
      py::arg("fixed_entropy") = false, py::arg("top_k") = py::none());

  // Analysis
  m.def("pearson", [](const std::vector<double>& x, const std::vector<double>& y) { return Pearson(x, y); });
  m.def("partial_correlation", [](const std::vector<double>& x, const std::vector<double>& y,
                                  const std::vector<double>& z) { return PartialCorrelation(x, y, z); });
  m.def(
      "bootstrap_ci",
      [](const std::vector<double>& v, const std::string& stat, int n, double level, std::uint64_t seed) {
        const Interval ci = BootstrapCi(v, stat, n, level, seed);
        return py::make_tuple(ci.lo, ci.hi);
      },
      py::arg("values"), py::arg("statistic") = "mean", py::arg("n_resamples") = 10000, py::arg("level") = 0.95,
      py::arg("seed") = 0);
  m.def(
      "normalize_task_scores",
      [](const std::map<std::string, double>& s, const std::string& mode) {
        return NormalizeTaskScores(s, ParseNormalizeMode(mode));
      },
      py::arg("per_task_means"), py::arg("mode") = "mean");
  m.def(
      "pairwise_selection_accuracy",
      [](const std::vector<double>& c, const std::vector<double>& i, std::size_t n_pairs, std::uint64_t seed) {
        std::mt19937_64 rng = DeriveRng({seed});
        const SelectionResult r = PairwiseSelectionAccuracy(c, i, SelectionRule::kLower, n_pairs, rng);
        return py::make_tuple(r.accuracy, r.ci.lo, r.ci.hi);
      },
      py::arg("correct"), py::arg("incorrect"), py::arg("n_pairs") = 0, py::arg("seed") = 0,
      "Lower-score rule; n_pairs = 0 enumerates every pair. Returns (accuracy, lo, hi).");

  // Pipelines
  m.def("default_config", []() { return RunConfigToJson(DefaultRunConfig()).dump(); });
  m.def(
      "run_stage",
      [](const std::string& stage, const std::string& config_json, bool force) {
        const RunConfig cfg = RunConfigFromJson(nlohmann::json::parse(config_json));
        StageOptions o;
        o.force = force;
        bool ran = false;
        if (stage == "analyze") return CmdAnalyze(cfg, o);
        bool (*fn)(const RunConfig&, std::uint64_t, const StageOptions&) = nullptr;
        if (stage == "gen-assets") fn = CmdGenAssets;
        if (stage == "train") fn = CmdTrain;
        if (stage == "eval") fn = CmdEval;
        if (stage == "steer") fn = CmdSteer;
        if (stage == "sweep") fn = CmdSweep;
        if (!fn) throw InputError("unknown stage: " + stage);
        for (std::uint64_t s : cfg.seeds) ran = fn(cfg, s, o) || ran;
        return ran;
      },
      py::arg("stage"), py::arg("config_json"), py::arg("force") = false,
      "Runs a pipeline stage for every configured seed; False when all were up to date.");
}
