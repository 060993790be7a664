#pragma once

// Divergence Steering: sample from the Fisher-Rao geodesic point s_alpha
// between the full model's distribution p and the MTP head's m, optionally
// projected back to the entropy of p.
//
// Per step: p = softmax(full / T), m = softmax(mtp / T); with top-k both are
// restricted to the k most likely tokens under p and renormalized;
// s = geodesic(p, m, alpha); with fixed entropy s is temperature-scaled to
// H(p); the next token is drawn from s.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "mtdlab/divergence.hpp"
#include "mtdlab/geometry.hpp"

namespace mtdlab {

class MicroModel;

struct SteeringParams {
  double temperature = 1.0;
  double alpha = 0.0;
  bool fixed_entropy = false;
  std::optional<int> top_k;
  int max_len = 64;  // total tokens, prompt included
  std::uint64_t seed = 0;

  // Throws DomainError / ConfigError on a broken invariant.
  void Validate(int context_len) const;
};

struct StepDiagnostics {
  int step = 0;
  double mtd = 0.0;  // KL(p || m) after temperature, before top-k
  double entropy_p = 0.0;
  double entropy_s = 0.0;
  bool folded = false;
};

// The distribution steered_step samples from, over the whole vocabulary.
struct SteeredDistribution {
  std::vector<double> probs;
  StepDiagnostics diagnostics;
};

SteeredDistribution SteeredDistributionFor(std::span<const float> full_logits,
                                           std::span<const float> mtp_logits,
                                           const SteeringParams& params);

// Inverse-CDF draw with one uniform variate.
int SampleIndex(std::span<const double> probs, std::mt19937_64& rng);

std::pair<int, StepDiagnostics> SteeredStep(std::span<const float> full_logits,
                                            std::span<const float> mtp_logits,
                                            const SteeringParams& params, std::mt19937_64& rng);

struct Generation {
  std::vector<int> tokens;  // prompt followed by the generated tokens
  LogitTrace trace;         // unmodified logits of the realized sequence
  std::vector<StepDiagnostics> diagnostics;
  bool ended = false;       // stopped on end_token rather than max_len
};

// Repeats SteeredStep until `end_token` is produced or the sequence reaches
// params.max_len. Throws ConfigError for a model without an MTP head.
// With record_trace off the trace holds only meta.
Generation Generate(const MicroModel& model, std::span<const int> prompt,
                    const SteeringParams& params, std::mt19937_64& rng, int end_token,
                    bool record_trace = true);

// One JSON object per line: step, mtd, entropy_p, entropy_s, folded.
void WriteDiagnosticsJsonl(const std::vector<StepDiagnostics>& diagnostics, std::ostream& out);

}  // namespace mtdlab
