#pragma once

// Statistics behind every reported number: correlations, bootstrap
// intervals, NLL-binned curves, task-score normalization, pairwise
// selection accuracy and creativity grids.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtdlab/divergence.hpp"
#include "mtdlab/tasks.hpp"

namespace mtdlab {

class MicroModel;

// Sequence statistics plus labels. Label keys come from kReservedMetaKeys.
struct ExperimentRecord {
  SequenceStats stats;
  std::map<std::string, std::string> labels;

  void Validate() const;  // InputError on an unknown label key
};
nlohmann::json RecordToJson(const ExperimentRecord& r);
ExperimentRecord RecordFromJson(const nlohmann::json& j);

// Sample Pearson coefficient. InputError for unequal lengths or fewer than
// three points, StatisticError for zero variance.
double Pearson(std::span<const double> x, std::span<const double> y);

// r_xy.z from the closed form. StatisticError when |r_xz| or |r_yz| is 1.
double PartialCorrelation(std::span<const double> x, std::span<const double> y,
                          std::span<const double> z);
// Same quantity as the correlation of the residuals of x ~ z and y ~ z.
double PartialCorrelationResidual(std::span<const double> x, std::span<const double> y,
                                  std::span<const double> z);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// Percentile bootstrap over index resamples with replacement. `statistic`
// receives the resampled indices into the caller's data.
Interval BootstrapIndices(std::size_t n,
                          const std::function<double(std::span<const std::size_t>)>& statistic,
                          int n_resamples, double level, std::uint64_t seed);

// statistic: "mean" or "median". InputError on empty input or an unknown name.
Interval BootstrapCi(std::span<const double> values, const std::string& statistic = "mean",
                     int n_resamples = 10000, double level = 0.95, std::uint64_t seed = 0);

// Linear-interpolation quantile of sorted data (numpy's default).
double QuantileSorted(std::span<const double> sorted, double q);

struct BinnedCurves {
  std::vector<double> edges;        // n_bins - 1 inner edges; bin b holds edges[b-1] <= x < edges[b]
  std::vector<std::string> groups;  // sorted
  // [group][bin]; NaN where a group has no points in a bin.
  std::vector<std::vector<double>> means;
  std::vector<std::vector<std::size_t>> counts;
};

// Equal-count bins on x, per (group, bin) mean of y. With `normalize`, each
// bin is divided by its cross-group mean. InputError for unequal lengths or
// n_bins exceeding the number of distinct x values.
BinnedCurves ComputeBinnedCurves(std::span<const double> x, std::span<const double> y,
                                 const std::vector<std::string>& group, int n_bins,
                                 bool normalize = false);

enum class NormalizeMode { kMean, kZscore, kMax };
NormalizeMode ParseNormalizeMode(const std::string& name);
const char* NormalizeModeName(NormalizeMode mode);

// kMean divides by the across-task mean, kZscore standardizes with the
// population deviation, kMax divides by the largest magnitude. InputError
// for fewer than two tasks, StatisticError when the divisor is zero.
std::map<std::string, double> NormalizeTaskScores(const std::map<std::string, double>& per_task,
                                                  NormalizeMode mode = NormalizeMode::kMean);

enum class SelectionRule { kLower, kLowerBoth };

struct SelectionResult {
  double accuracy = 0.0;  // NaN when no pair was usable
  Interval ci;
  std::size_t n_used = 0;  // pairs counted (lower_both drops disagreements)
};

// Picks the member of each (correct, incorrect) pair with the lower score;
// ties count 0.5. kLowerBoth uses the second score arrays too and keeps only
// pairs where both scores pick the same member. n_pairs == 0 enumerates all
// pairs. InputError on empty or mismatched arrays.
SelectionResult PairwiseSelectionAccuracy(std::span<const double> correct,
                                          std::span<const double> incorrect, SelectionRule rule,
                                          std::size_t n_pairs, std::mt19937_64& rng,
                                          std::span<const double> correct2 = {},
                                          std::span<const double> incorrect2 = {},
                                          int n_resamples = 2000);

struct GridRow {
  double temperature = 1.0;
  double alpha = 0.0;
  CreativityScores scores;
  double mean_mtd = 0.0;  // over generated tokens
  double folded_fraction = 0.0;
};

// For each (T, alpha), generates n_items items with the steering decoder and
// scores them. Item i always uses prompt i and an RNG derived from (seed, i),
// so the alpha = 0 column equals a plain temperature sweep.
std::vector<GridRow> CreativityGrid(const MicroModel& model, const CreativeSpec& spec,
                                    const std::vector<double>& temps,
                                    const std::vector<double>& alphas, int n_items,
                                    bool fixed_entropy, std::uint64_t seed,
                                    std::optional<int> top_k = std::nullopt);

// Token budget for one generated item, prompt included.
int CreativeGenerationLimit(const CreativeSpec& spec, std::size_t prompt_len);

}  // namespace mtdlab
