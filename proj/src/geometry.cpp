#include "mtdlab/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include "mtdlab/errors.hpp"

namespace mtdlab {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kDegenerateAngle = 1e-12;

void CheckTemperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw DomainError("temperature must be positive and finite, got " +
                      std::to_string(temperature));
  }
}

template <typename Real>
std::vector<double> ScaledLogits(std::span<const Real> logits, double temperature) {
  CheckTemperature(temperature);
  if (logits.size() < 2) throw InputError("softmax needs at least 2 logits");
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double v = static_cast<double>(logits[i]);
    if (!std::isfinite(v)) {
      throw InputError("non-finite logit at index " + std::to_string(i));
    }
    out[i] = v / temperature;
  }
  return out;
}

std::vector<double> SoftmaxInPlace(std::vector<double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : z) v /= sum;
  return z;
}

}  // namespace

CategoricalDist::CategoricalDist(std::vector<double> probs) : probs_(std::move(probs)) {
  if (probs_.size() < 2) {
    throw InputError("a categorical distribution needs K >= 2 outcomes");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < probs_.size(); ++i) {
    if (!(probs_[i] >= 0.0) || !std::isfinite(probs_[i])) {
      throw InputError("probability " + std::to_string(i) + " is negative or not finite");
    }
    sum += probs_[i];
  }
  if (std::abs(sum - 1.0) > kSumTolerance) {
    throw InputError("probabilities sum to " + std::to_string(sum) + ", not 1");
  }
}

CategoricalDist CategoricalDist::Uniform(std::size_t k) {
  if (k < 2) throw InputError("uniform distribution needs K >= 2");
  return CategoricalDist(std::vector<double>(k, 1.0 / static_cast<double>(k)));
}

CategoricalDist CategoricalDist::OneHot(std::size_t k, std::size_t index) {
  if (index >= k) throw InputError("one-hot index out of range");
  std::vector<double> v(k, 0.0);
  v[index] = 1.0;
  return CategoricalDist(std::move(v));
}

CategoricalDist CategoricalDist::Normalized(std::vector<double> weights) {
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InputError("weights must be finite and >= 0");
    sum += w;
  }
  if (!(sum > 0.0)) throw InputError("weights sum to zero");
  for (double& w : weights) w /= sum;
  return CategoricalDist(std::move(weights));
}

std::size_t CategoricalDist::support_size() const {
  return static_cast<std::size_t>(
      std::count_if(probs_.begin(), probs_.end(), [](double v) { return v > 0.0; }));
}

SpherePoint ToSphere(const CategoricalDist& p) {
  SpherePoint g;
  g.coords.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) g.coords[i] = std::sqrt(p[i]);
  return g;
}

CategoricalDist SoftmaxWithTemperature(std::span<const double> logits, double temperature) {
  return CategoricalDist(SoftmaxInPlace(ScaledLogits(logits, temperature)));
}

CategoricalDist SoftmaxWithTemperature(std::span<const float> logits, double temperature) {
  return CategoricalDist(SoftmaxInPlace(ScaledLogits(logits, temperature)));
}

std::vector<double> LogSoftmax(std::span<const double> logits, double temperature) {
  std::vector<double> z = ScaledLogits(logits, temperature);
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  for (double& v : z) v -= lse;
  return z;
}

double Entropy(const CategoricalDist& p) {
  double h = 0.0;
  for (double v : p.probs()) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return std::max(h, 0.0);
}

double KlDivergence(const CategoricalDist& p, const CategoricalDist& q) {
  if (p.size() != q.size()) throw InputError("KL: distributions differ in size");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return kInf;
    kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return std::max(kl, 0.0);
}

double BhattacharyyaAngle(const CategoricalDist& p, const CategoricalDist& m) {
  if (p.size() != m.size()) throw InputError("distributions differ in size");
  // Chord form stays accurate for nearly identical inputs, where acos does not.
  double sq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = std::sqrt(p[i]) - std::sqrt(m[i]);
    sq += d * d;
  }
  return 2.0 * std::asin(std::min(1.0, 0.5 * std::sqrt(sq)));
}

GeodesicPoint GeodesicInterpolateEx(const CategoricalDist& p, const CategoricalDist& m,
                                    double alpha) {
  if (!std::isfinite(alpha)) throw InputError("alpha must be finite");
  if (p.size() != m.size()) throw InputError("distributions differ in size");
  if (alpha == 0.0) return {p, false};
  if (alpha == 1.0) return {m, false};
  const double theta = BhattacharyyaAngle(p, m);
  if (theta < kDegenerateAngle) return {p, false};

  const double sin_theta = std::sin(theta);
  const double wp = std::sin((1.0 - alpha) * theta) / sin_theta;
  const double wm = std::sin(alpha * theta) / sin_theta;

  std::vector<double> s(p.size());
  bool folded = false;
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double g = wp * std::sqrt(p[i]) + wm * std::sqrt(m[i]);
    if (g < -1e-15) folded = true;
    s[i] = g * g;
    sum += s[i];
  }
  // Rounding cleanup only; the rotated vector has unit norm.
  for (double& v : s) v /= sum;
  return {CategoricalDist(std::move(s)), folded};
}

CategoricalDist GeodesicInterpolate(const CategoricalDist& p, const CategoricalDist& m,
                                    double alpha) {
  return GeodesicInterpolateEx(p, m, alpha).dist;
}

std::pair<double, double> UsableAlphaRange(const CategoricalDist& p, const CategoricalDist& m) {
  const double theta = BhattacharyyaAngle(p, m);
  if (theta < kDegenerateAngle) return {-kInf, kInf};
  const double sin_theta = std::sin(theta);
  const double cos_theta = std::cos(theta);
  constexpr double kHalfPi = std::numbers::pi / 2.0;
  double lo = -kInf;
  double hi = kInf;
  // Coordinate k is a cos(x) + b sin(x) with x = alpha * theta, which is
  // non-negative for x in [phi - pi/2, phi + pi/2], phi = atan2(b, a).
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double a = std::sqrt(p[k]) * sin_theta;
    const double b = std::sqrt(m[k]) - std::sqrt(p[k]) * cos_theta;
    if (a == 0.0 && b == 0.0) continue;
    const double phi = std::atan2(b, a);
    lo = std::max(lo, (phi - kHalfPi) / theta);
    hi = std::min(hi, (phi + kHalfPi) / theta);
  }
  return {lo, hi};
}

namespace {

struct SupportLogits {
  std::vector<std::size_t> index;
  std::vector<double> log_prob;
};

// Entropy of softmax(log_prob / T) and optionally the distribution itself.
double TemperedEntropy(const std::vector<double>& log_prob, double temperature,
                       std::vector<double>* out = nullptr) {
  const double mx = *std::max_element(log_prob.begin(), log_prob.end());
  std::vector<double> w(log_prob.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp((log_prob[i] - mx) / temperature);
    sum += w[i];
  }
  double h = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] /= sum;
    if (w[i] > 0.0) h -= w[i] * std::log(w[i]);
  }
  if (out) *out = std::move(w);
  return h;
}

CategoricalDist Scatter(std::size_t k, const SupportLogits& sup, const std::vector<double>& w) {
  std::vector<double> full(k, 0.0);
  for (std::size_t i = 0; i < sup.index.size(); ++i) full[sup.index[i]] = w[i];
  return CategoricalDist::Normalized(std::move(full));
}

}  // namespace

EntropyProjection FixedEntropyProject(const CategoricalDist& s, double h_target, double tol) {
  const std::size_t k = s.size();
  if (!(tol > 0.0)) throw DomainError("projection tolerance must be positive");
  if (!(h_target >= 0.0) || h_target > std::log(static_cast<double>(k)) + 1e-12) {
    throw DomainError("entropy target " + std::to_string(h_target) + " outside [0, ln K]");
  }

  SupportLogits sup;
  for (std::size_t i = 0; i < k; ++i) {
    if (s[i] > 0.0) {
      sup.index.push_back(i);
      sup.log_prob.push_back(std::log(s[i]));
    }
  }
  const std::size_t n = sup.index.size();
  const double h_max = std::log(static_cast<double>(n));
  if (h_target > h_max + tol) {
    throw DomainError("entropy target " + std::to_string(h_target) +
                      " exceeds ln(support size) = " + std::to_string(h_max));
  }

  const double h_now = Entropy(s);
  if (std::abs(h_now - h_target) <= tol) return {s, 1.0};

  if (h_target >= h_max - tol) {
    return {Scatter(k, sup, std::vector<double>(n, 1.0 / static_cast<double>(n))), kInf};
  }

  // Lowest reachable entropy is the T -> 0 limit: uniform over the maxima.
  const double top = *std::max_element(sup.log_prob.begin(), sup.log_prob.end());
  const auto ties = static_cast<std::size_t>(
      std::count(sup.log_prob.begin(), sup.log_prob.end(), top));
  const double h_min = std::log(static_cast<double>(ties));
  if (h_target < h_min - tol) {
    throw DomainError("entropy target " + std::to_string(h_target) +
                      " below the reachable minimum " + std::to_string(h_min));
  }

  auto f = [&](double log_t) { return TemperedEntropy(sup.log_prob, std::exp(log_t)) - h_target; };

  double lo = std::log(1e-4);
  double hi = std::log(1e4);
  // Near-ties or near-uniform inputs can put the root outside the default
  // bracket; widen it geometrically.
  while (f(lo) > 0.0 && lo > -690.0) lo -= std::log(1e4);
  while (f(hi) < 0.0 && hi < 690.0) hi += std::log(1e4);
  if (f(lo) > tol) {
    std::vector<double> w(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (sup.log_prob[i] == top) w[i] = 1.0 / static_cast<double>(ties);
    }
    return {Scatter(k, sup, w), 0.0};
  }

  double mid = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    mid = 0.5 * (lo + hi);
    const double v = f(mid);
    if (std::abs(v) <= tol) break;
    if (v < 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  const double t = std::exp(mid);
  std::vector<double> w;
  TemperedEntropy(sup.log_prob, t, &w);
  return {Scatter(k, sup, w), t};
}

}  // namespace mtdlab
