#pragma once

// Math on categorical distributions over a finite vocabulary: softmax,
// entropy, KL, the Bhattacharyya angle, Fisher-Rao geodesics (slerp on the
// square-root sphere) and the entropy-constrained projection used by
// fixed-entropy steering. Everything is double precision and pure.

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace mtdlab {

// Probability vector over K >= 2 outcomes. Construction validates
// non-negativity and normalization (|sum - 1| <= 1e-9).
class CategoricalDist {
 public:
  static constexpr double kSumTolerance = 1e-9;

  explicit CategoricalDist(std::vector<double> probs);

  static CategoricalDist Uniform(std::size_t k);
  static CategoricalDist OneHot(std::size_t k, std::size_t index);
  // Divides by the sum. Throws if any entry is negative or the sum is zero.
  static CategoricalDist Normalized(std::vector<double> weights);

  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> probs() const { return probs_; }
  std::size_t support_size() const;

 private:
  std::vector<double> probs_;
};

// Unit vector of square-root probabilities. Coordinates may be negative
// transiently during extrapolation.
struct SpherePoint {
  std::vector<double> coords;
};

SpherePoint ToSphere(const CategoricalDist& p);

// exp(l_k / T) / sum_j exp(l_j / T), max-subtracted.
CategoricalDist SoftmaxWithTemperature(std::span<const double> logits, double temperature = 1.0);
CategoricalDist SoftmaxWithTemperature(std::span<const float> logits, double temperature = 1.0);

// log of the above, computed stably; entries are finite.
std::vector<double> LogSoftmax(std::span<const double> logits, double temperature = 1.0);

// Nats. 0 ln 0 = 0.
double Entropy(const CategoricalDist& p);

// Nats. +infinity when p puts mass where q has none.
double KlDivergence(const CategoricalDist& p, const CategoricalDist& q);

// arccos(sum_k sqrt(p_k m_k)), in [0, pi/2], evaluated in chord form.
double BhattacharyyaAngle(const CategoricalDist& p, const CategoricalDist& m);

struct GeodesicPoint {
  CategoricalDist dist;
  // True when some sphere coordinate went negative before squaring, i.e. the
  // extrapolated path left the positive orthant and folded back.
  bool folded = false;
};

// Point at parameter alpha on the great circle through sqrt(p) (alpha = 0)
// and sqrt(m) (alpha = 1), squared back onto the simplex. Any real alpha is
// accepted; alpha = 0 and 1 return p and m exactly. When the angle between p
// and m is below 1e-12 the path is a point and p is returned.
GeodesicPoint GeodesicInterpolateEx(const CategoricalDist& p, const CategoricalDist& m,
                                    double alpha);
CategoricalDist GeodesicInterpolate(const CategoricalDist& p, const CategoricalDist& m,
                                    double alpha);

// Closed interval of alpha for which every sphere coordinate stays >= 0.
// Returns (-inf, inf) for the degenerate p == m case.
std::pair<double, double> UsableAlphaRange(const CategoricalDist& p, const CategoricalDist& m);

struct EntropyProjection {
  CategoricalDist dist;
  // Temperature applied to log s. +infinity when the target is the maximum
  // entropy of the support (uniform result).
  double temperature;
};

// Temperature-scales log(s) so the result has entropy h_target (within tol).
// Zeros of s stay zero. Bisection on log T over [1e-4, 1e4], at most 200
// iterations. Throws DomainError when h_target lies outside [0, ln K] or is
// not reachable on the support of s.
EntropyProjection FixedEntropyProject(const CategoricalDist& s, double h_target,
                                      double tol = 1e-9);

}  // namespace mtdlab
