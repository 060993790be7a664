#include "mtdlab/steering.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "mtdlab/errors.hpp"
#include "mtdlab/model.hpp"

namespace mtdlab {

void SteeringParams::Validate(int context_len) const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw DomainError("steering temperature must be positive and finite");
  }
  if (!std::isfinite(alpha)) throw DomainError("alpha must be finite");
  if (top_k && *top_k < 1) throw ConfigError("top_k must be positive");
  if (max_len < 1 || max_len > context_len) {
    throw ConfigError("max_len must lie in [1, context_len]");
  }
}

SteeredDistribution SteeredDistributionFor(std::span<const float> full_logits,
                                           std::span<const float> mtp_logits,
                                           const SteeringParams& params) {
  if (full_logits.size() != mtp_logits.size()) {
    throw InputError("full and MTP logits differ in length");
  }
  const std::size_t k = full_logits.size();
  const CategoricalDist p_full = SoftmaxWithTemperature(full_logits, params.temperature);
  const CategoricalDist m_full = SoftmaxWithTemperature(mtp_logits, params.temperature);

  SteeredDistribution out;
  out.diagnostics.mtd = Mtd(full_logits, mtp_logits, params.temperature);

  std::vector<std::size_t> support(k);
  std::iota(support.begin(), support.end(), 0);
  if (params.top_k && static_cast<std::size_t>(*params.top_k) < k) {
    std::stable_sort(support.begin(), support.end(),
                     [&](std::size_t a, std::size_t b) { return p_full[a] > p_full[b]; });
    support.resize(*params.top_k);
    std::sort(support.begin(), support.end());
  }
  out.probs.assign(k, 0.0);
  if (support.size() == 1) {
    out.probs[support[0]] = 1.0;
    return out;
  }

  auto restrict = [&](const CategoricalDist& d) {
    std::vector<double> w;
    for (std::size_t i : support) w.push_back(d[i]);
    if (std::accumulate(w.begin(), w.end(), 0.0) > 0.0) return CategoricalDist::Normalized(std::move(w));
    return CategoricalDist::Uniform(w.size());
  };
  const bool restricted = support.size() < k;
  const CategoricalDist p = restricted ? restrict(p_full) : p_full;
  const CategoricalDist m = restricted ? restrict(m_full) : m_full;

  const GeodesicPoint g = GeodesicInterpolateEx(p, m, params.alpha);
  CategoricalDist s = g.dist;
  out.diagnostics.folded = g.folded;
  out.diagnostics.entropy_p = Entropy(p);
  if (params.fixed_entropy) s = FixedEntropyProject(s, out.diagnostics.entropy_p, 1e-9).dist;
  out.diagnostics.entropy_s = Entropy(s);
  for (std::size_t i = 0; i < support.size(); ++i) out.probs[support[i]] = s[i];
  return out;
}

int SampleIndex(std::span<const double> probs, std::mt19937_64& rng) {
  const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * total;
  double c = 0.0;
  int last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    c += probs[i];
    last_positive = static_cast<int>(i);
    if (u < c) return last_positive;
  }
  return last_positive;
}

std::pair<int, StepDiagnostics> SteeredStep(std::span<const float> full_logits,
                                            std::span<const float> mtp_logits,
                                            const SteeringParams& params, std::mt19937_64& rng) {
  const SteeredDistribution d = SteeredDistributionFor(full_logits, mtp_logits, params);
  return {SampleIndex(d.probs, rng), d.diagnostics};
}

Generation Generate(const MicroModel& model, std::span<const int> prompt,
                    const SteeringParams& params, std::mt19937_64& rng, int end_token,
                    bool record_trace) {
  if (!model.has_mtp()) throw ConfigError("steering needs a model with an MTP head");
  params.Validate(model.config().context_len);
  if (prompt.empty()) throw InputError("generation needs a non-empty prompt");
  if (static_cast<int>(prompt.size()) > params.max_len) throw InputError("prompt exceeds max_len");

  Generation gen;
  gen.tokens.assign(prompt.begin(), prompt.end());
  const Eigen::Index k = model.config().vocab_size;
  std::vector<float> full(k);
  std::vector<float> mtp(k);
  int step = 0;
  while (static_cast<int>(gen.tokens.size()) < params.max_len) {
    const FullResult f = ForwardFull(model, gen.tokens);
    const ag::Matrix m = ForwardMtp(model, f.hiddens, f.embeddings);
    const Eigen::Index last = f.logits.rows() - 1;
    for (Eigen::Index i = 0; i < k; ++i) {
      full[i] = static_cast<float>(f.logits(last, i));
      mtp[i] = static_cast<float>(m(last, i));
    }
    auto [token, diag] = SteeredStep(full, mtp, params, rng);
    diag.step = step++;
    gen.diagnostics.push_back(diag);
    gen.tokens.push_back(token);
    if (token == end_token) {
      gen.ended = true;
      break;
    }
  }
  if (record_trace && gen.tokens.size() >= 2) {
    gen.trace = RecordTrace(model, gen.tokens);
  } else {
    gen.trace.vocab_size = static_cast<std::uint32_t>(k);
  }
  auto fmt = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  gen.trace.meta["temperature"] = fmt(params.temperature);
  gen.trace.meta["alpha"] = fmt(params.alpha);
  gen.trace.meta["fixed_entropy"] = params.fixed_entropy ? "1" : "0";
  gen.trace.meta["top_k"] = params.top_k ? std::to_string(*params.top_k) : "none";
  gen.trace.meta["seed"] = std::to_string(params.seed);
  return gen;
}

void WriteDiagnosticsJsonl(const std::vector<StepDiagnostics>& diagnostics, std::ostream& out) {
  for (const auto& d : diagnostics) {
    out << nlohmann::json{{"step", d.step},
                          {"mtd", d.mtd},
                          {"entropy_p", d.entropy_p},
                          {"entropy_s", d.entropy_s},
                          {"folded", d.folded}}
               .dump()
        << '\n';
  }
}

}  // namespace mtdlab
