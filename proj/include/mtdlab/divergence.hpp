#pragma once

// Per-token MTD / NLL, sequence aggregation and the MTDT logit-trace format.
//
// MTDT layout (all integers little-endian):
//   "MTDT"            4 bytes
//   version           u32 (= 1)
//   vocab_size        u32
//   record_count      u64
//   meta_count        u32
//   meta_count x { key_len u32, key bytes, val_len u32, val bytes }
//   record_count x { token_id u32, vocab_size x f32 full, vocab_size x f32 mtp }
//
// Reserved meta keys: task, complexity, difficulty, correct, temperature,
// alpha, seed. Other keys are allowed.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace mtdlab {

// Logits that predict token `token_id`: the full model's and the MTP head's.
struct TokenRecord {
  std::uint32_t token_id = 0;
  std::vector<float> full_logits;
  std::vector<float> mtp_logits;

  bool operator==(const TokenRecord&) const = default;
};

struct LogitTrace {
  std::uint32_t vocab_size = 0;
  std::vector<TokenRecord> records;
  std::map<std::string, std::string> meta;

  // Throws InputError when a record disagrees with vocab_size.
  void Validate() const;
  bool operator==(const LogitTrace&) const = default;
};

inline constexpr const char* kReservedMetaKeys[] = {
    "task", "complexity", "difficulty", "correct", "temperature", "alpha", "seed"};

struct SequenceStats {
  std::vector<double> per_token_mtd;
  std::vector<double> per_token_nll;
  double mean_mtd = 0.0;
  double mean_nll = 0.0;
  double cum_mtd = 0.0;
  double cum_nll = 0.0;
};

// KL(softmax(full/T) || softmax(mtp/T)) in nats, through log-softmax.
double Mtd(std::span<const double> full_logits, std::span<const double> mtp_logits,
           double temperature = 1.0);
double Mtd(std::span<const float> full_logits, std::span<const float> mtp_logits,
           double temperature = 1.0);

// -ln softmax(full_logits)[token_id] in nats.
double Nll(std::span<const double> full_logits, std::uint32_t token_id);
double Nll(std::span<const float> full_logits, std::uint32_t token_id);

SequenceStats ComputeSequenceStats(const LogitTrace& trace, double temperature = 1.0);

std::uint64_t WriteTrace(const LogitTrace& trace, std::ostream& sink);
LogitTrace ReadTrace(std::istream& source);

void WriteTraceFile(const LogitTrace& trace, const std::string& path);
LogitTrace ReadTraceFile(const std::string& path);

// One JSON object per record: {"token_id":..,"mtd":..,"nll":..} (nats).
void ExportTraceJsonl(const LogitTrace& trace, std::ostream& out, double temperature = 1.0);

inline double NatsToBits(double nats) { return nats / 0.69314718055994530942; }

}  // namespace mtdlab
