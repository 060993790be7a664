#include "mtdlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "mtdlab/errors.hpp"
#include "mtdlab/model.hpp"
#include "mtdlab/rng.hpp"
#include "mtdlab/steering.hpp"

namespace mtdlab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double Mean(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void CheckPaired(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InputError("series differ in length");
  if (x.size() < 3) throw InputError("correlation needs at least three points");
}

// Residuals of the least-squares fit x ~ a + b z.
std::vector<double> Residuals(std::span<const double> x, std::span<const double> z) {
  const double mx = Mean(x);
  const double mz = Mean(z);
  double sxz = 0.0;
  double szz = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxz += (x[i] - mx) * (z[i] - mz);
    szz += (z[i] - mz) * (z[i] - mz);
  }
  if (szz == 0.0) throw StatisticError("control has zero variance");
  const double b = sxz / szz;
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) r[i] = (x[i] - mx) - b * (z[i] - mz);
  return r;
}

}  // namespace

void ExperimentRecord::Validate() const {
  for (const auto& [key, value] : labels) {
    if (std::find_if(std::begin(kReservedMetaKeys), std::end(kReservedMetaKeys),
                     [&](const char* k) { return key == k; }) == std::end(kReservedMetaKeys)) {
      throw InputError("unknown record label: " + key);
    }
  }
}

nlohmann::json RecordToJson(const ExperimentRecord& r) {
  return {{"labels", r.labels},
          {"mean_mtd", r.stats.mean_mtd},
          {"mean_nll", r.stats.mean_nll},
          {"cum_mtd", r.stats.cum_mtd},
          {"cum_nll", r.stats.cum_nll},
          {"per_token_mtd", r.stats.per_token_mtd},
          {"per_token_nll", r.stats.per_token_nll}};
}

ExperimentRecord RecordFromJson(const nlohmann::json& j) {
  ExperimentRecord r;
  r.labels = j.at("labels").get<std::map<std::string, std::string>>();
  r.stats.mean_mtd = j.at("mean_mtd").get<double>();
  r.stats.mean_nll = j.at("mean_nll").get<double>();
  r.stats.cum_mtd = j.at("cum_mtd").get<double>();
  r.stats.cum_nll = j.at("cum_nll").get<double>();
  r.stats.per_token_mtd = j.at("per_token_mtd").get<std::vector<double>>();
  r.stats.per_token_nll = j.at("per_token_nll").get<std::vector<double>>();
  r.Validate();
  return r;
}

double Pearson(std::span<const double> x, std::span<const double> y) {
  CheckPaired(x, y);
  const double mx = Mean(x);
  const double my = Mean(y);
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw StatisticError("zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double PartialCorrelation(std::span<const double> x, std::span<const double> y,
                          std::span<const double> z) {
  CheckPaired(x, z);
  const double rxy = Pearson(x, y);
  const double rxz = Pearson(x, z);
  const double ryz = Pearson(y, z);
  const double den = (1.0 - rxz * rxz) * (1.0 - ryz * ryz);
  if (!(den > 1e-15)) throw StatisticError("control is collinear with a series");
  return std::clamp((rxy - rxz * ryz) / std::sqrt(den), -1.0, 1.0);
}

double PartialCorrelationResidual(std::span<const double> x, std::span<const double> y,
                                  std::span<const double> z) {
  CheckPaired(x, y);
  CheckPaired(x, z);
  const std::vector<double> rx = Residuals(x, z);
  const std::vector<double> ry = Residuals(y, z);
  return Pearson(rx, ry);
}

double QuantileSorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw InputError("quantile of empty data");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

Interval BootstrapIndices(std::size_t n,
                          const std::function<double(std::span<const std::size_t>)>& statistic,
                          int n_resamples, double level, std::uint64_t seed) {
  if (n == 0) throw InputError("bootstrap of empty data");
  if (n_resamples < 1) throw InputError("n_resamples must be positive");
  if (!(level > 0.0 && level < 1.0)) throw InputError("level must lie in (0, 1)");
  std::mt19937_64 rng = DeriveRng({seed, 0xB007});
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> idx(n);
  std::vector<double> stats(n_resamples);
  for (int r = 0; r < n_resamples; ++r) {
    for (auto& i : idx) i = pick(rng);
    stats[r] = statistic(idx);
  }
  std::sort(stats.begin(), stats.end());
  return {QuantileSorted(stats, (1.0 - level) / 2.0), QuantileSorted(stats, (1.0 + level) / 2.0)};
}

Interval BootstrapCi(std::span<const double> values, const std::string& statistic,
                     int n_resamples, double level, std::uint64_t seed) {
  if (values.empty()) throw InputError("bootstrap of empty data");
  std::vector<double> buf(values.size());
  std::function<double(std::span<const std::size_t>)> fn;
  if (statistic == "mean") {
    fn = [&](std::span<const std::size_t> idx) {
      double s = 0.0;
      for (std::size_t i : idx) s += values[i];
      return s / static_cast<double>(idx.size());
    };
  } else if (statistic == "median") {
    fn = [&](std::span<const std::size_t> idx) {
      for (std::size_t i = 0; i < idx.size(); ++i) buf[i] = values[idx[i]];
      std::sort(buf.begin(), buf.end());
      return QuantileSorted(buf, 0.5);
    };
  } else {
    throw InputError("unknown bootstrap statistic: " + statistic);
  }
  return BootstrapIndices(values.size(), fn, n_resamples, level, seed);
}

BinnedCurves ComputeBinnedCurves(std::span<const double> x, std::span<const double> y,
                                 const std::vector<std::string>& group, int n_bins,
                                 bool normalize) {
  if (x.size() != y.size() || x.size() != group.size()) {
    throw InputError("binned curves inputs differ in length");
  }
  if (n_bins < 1) throw InputError("n_bins must be positive");
  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  const auto distinct = std::set<double>(sorted.begin(), sorted.end()).size();
  if (static_cast<std::size_t>(n_bins) > distinct) {
    throw InputError("n_bins exceeds the number of distinct x values");
  }

  BinnedCurves out;
  const std::size_t n = sorted.size();
  for (int b = 1; b < n_bins; ++b) out.edges.push_back(sorted[b * n / n_bins]);
  const std::set<std::string> labels(group.begin(), group.end());
  out.groups.assign(labels.begin(), labels.end());
  const std::size_t g_count = out.groups.size();
  std::vector<std::vector<double>> sums(g_count, std::vector<double>(n_bins, 0.0));
  out.counts.assign(g_count, std::vector<std::size_t>(n_bins, 0));
  for (std::size_t i = 0; i < n; ++i) {
    const auto g = static_cast<std::size_t>(
        std::lower_bound(out.groups.begin(), out.groups.end(), group[i]) - out.groups.begin());
    const auto b = static_cast<std::size_t>(
        std::upper_bound(out.edges.begin(), out.edges.end(), x[i]) - out.edges.begin());
    sums[g][b] += y[i];
    ++out.counts[g][b];
  }
  out.means.assign(g_count, std::vector<double>(n_bins, kNaN));
  for (std::size_t g = 0; g < g_count; ++g) {
    for (int b = 0; b < n_bins; ++b) {
      if (out.counts[g][b] > 0) out.means[g][b] = sums[g][b] / static_cast<double>(out.counts[g][b]);
    }
  }
  if (normalize) {
    for (int b = 0; b < n_bins; ++b) {
      double s = 0.0;
      int k = 0;
      for (std::size_t g = 0; g < g_count; ++g) {
        if (out.counts[g][b] > 0) {
          s += out.means[g][b];
          ++k;
        }
      }
      if (k == 0) continue;
      const double cross = s / k;
      if (cross == 0.0) throw StatisticError("bin has zero cross-group mean");
      for (std::size_t g = 0; g < g_count; ++g) out.means[g][b] /= cross;
    }
  }
  return out;
}

NormalizeMode ParseNormalizeMode(const std::string& name) {
  if (name == "mean") return NormalizeMode::kMean;
  if (name == "zscore") return NormalizeMode::kZscore;
  if (name == "max") return NormalizeMode::kMax;
  throw InputError("unknown normalization: " + name);
}

const char* NormalizeModeName(NormalizeMode mode) {
  switch (mode) {
    case NormalizeMode::kMean: return "mean";
    case NormalizeMode::kZscore: return "zscore";
    case NormalizeMode::kMax: return "max";
  }
  return "?";
}

std::map<std::string, double> NormalizeTaskScores(const std::map<std::string, double>& per_task,
                                                  NormalizeMode mode) {
  if (per_task.size() < 2) throw InputError("normalization needs at least two tasks");
  double mean = 0.0;
  double maxabs = 0.0;
  for (const auto& [task, v] : per_task) {
    if (!std::isfinite(v)) throw InputError("non-finite score for task " + task);
    mean += v;
    maxabs = std::max(maxabs, std::abs(v));
  }
  mean /= static_cast<double>(per_task.size());
  double var = 0.0;
  for (const auto& [task, v] : per_task) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(per_task.size()));

  std::map<std::string, double> out;
  for (const auto& [task, v] : per_task) {
    switch (mode) {
      case NormalizeMode::kMean:
        if (mean == 0.0) throw StatisticError("task means average to zero");
        out[task] = v / mean;
        break;
      case NormalizeMode::kZscore:
        if (sd == 0.0) throw StatisticError("task means have zero spread");
        out[task] = (v - mean) / sd;
        break;
      case NormalizeMode::kMax:
        if (maxabs == 0.0) throw StatisticError("all task means are zero");
        out[task] = v / maxabs;
        break;
    }
  }
  return out;
}

SelectionResult PairwiseSelectionAccuracy(std::span<const double> correct,
                                          std::span<const double> incorrect, SelectionRule rule,
                                          std::size_t n_pairs, std::mt19937_64& rng,
                                          std::span<const double> correct2,
                                          std::span<const double> incorrect2, int n_resamples) {
  if (correct.empty() || incorrect.empty()) throw InputError("selection needs both score sets");
  if (rule == SelectionRule::kLowerBoth &&
      (correct2.size() != correct.size() || incorrect2.size() != incorrect.size())) {
    throw InputError("lower_both needs second scores matching the first");
  }
  auto pick = [](double c, double i) { return c < i ? 1 : (c == i ? 0 : -1); };
  std::vector<double> outcomes;
  auto score = [&](std::size_t a, std::size_t b) {
    const int d1 = pick(correct[a], incorrect[b]);
    if (rule == SelectionRule::kLowerBoth && pick(correct2[a], incorrect2[b]) != d1) return;
    outcomes.push_back(d1 > 0 ? 1.0 : (d1 == 0 ? 0.5 : 0.0));
  };
  if (n_pairs == 0) {
    for (std::size_t a = 0; a < correct.size(); ++a) {
      for (std::size_t b = 0; b < incorrect.size(); ++b) score(a, b);
    }
  } else {
    std::uniform_int_distribution<std::size_t> pa(0, correct.size() - 1);
    std::uniform_int_distribution<std::size_t> pb(0, incorrect.size() - 1);
    for (std::size_t k = 0; k < n_pairs; ++k) {
      const std::size_t a = pa(rng);
      score(a, pb(rng));
    }
  }
  SelectionResult res;
  res.n_used = outcomes.size();
  if (outcomes.empty()) {
    res.accuracy = kNaN;
    res.ci = {kNaN, kNaN};
    return res;
  }
  res.accuracy = Mean(outcomes);
  res.ci = BootstrapCi(outcomes, "mean", n_resamples, 0.95, rng());
  return res;
}

int CreativeGenerationLimit(const CreativeSpec& spec, std::size_t prompt_len) {
  if (IsConstruction(spec.task)) return static_cast<int>(prompt_len) + spec.size.answer_len + 1;
  return CreativeMaxItemLen(spec);
}

std::vector<GridRow> CreativityGrid(const MicroModel& model, const CreativeSpec& spec,
                                    const std::vector<double>& temps,
                                    const std::vector<double>& alphas, int n_items,
                                    bool fixed_entropy, std::uint64_t seed,
                                    std::optional<int> top_k) {
  if (n_items < 1) throw InputError("n_items must be positive");
  std::vector<GridRow> rows;
  for (double t : temps) {
    for (double a : alphas) {
      GridRow row;
      row.temperature = t;
      row.alpha = a;
      std::vector<std::vector<int>> items;
      double mtd_sum = 0.0;
      std::size_t steps = 0;
      std::size_t folded = 0;
      for (int i = 0; i < n_items; ++i) {
        const std::vector<int> prompt = CreativePrompt(spec, static_cast<std::uint64_t>(i));
        SteeringParams sp;
        sp.temperature = t;
        sp.alpha = a;
        sp.fixed_entropy = fixed_entropy;
        sp.top_k = top_k;
        sp.max_len = CreativeGenerationLimit(spec, prompt.size());
        sp.seed = seed;
        std::mt19937_64 rng = DeriveRng({seed, static_cast<std::uint64_t>(i)});
        const Generation g = Generate(model, prompt, sp, rng, vocab::kEnd, false);
        for (const auto& d : g.diagnostics) {
          mtd_sum += d.mtd;
          folded += d.folded ? 1 : 0;
        }
        steps += g.diagnostics.size();
        items.push_back(g.tokens);
      }
      row.scores = ScoreItems(spec, items);
      row.mean_mtd = steps ? mtd_sum / static_cast<double>(steps) : 0.0;
      row.folded_fraction = steps ? static_cast<double>(folded) / static_cast<double>(steps) : 0.0;
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace mtdlab
