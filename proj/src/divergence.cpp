#include "mtdlab/divergence.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "json.hpp"

#include "mtdlab/errors.hpp"
#include "mtdlab/geometry.hpp"

namespace mtdlab {

static_assert(std::endian::native == std::endian::little,
              "trace I/O assumes a little-endian host");

void LogitTrace::Validate() const {
  if (vocab_size < 2) throw InputError("trace vocab_size must be >= 2");
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.full_logits.size() != vocab_size || r.mtp_logits.size() != vocab_size) {
      throw InputError("record " + std::to_string(i) + " logit length differs from vocab_size");
    }
    if (r.token_id >= vocab_size) {
      throw InputError("record " + std::to_string(i) + " token_id out of range");
    }
  }
}

namespace {

template <typename Real>
double MtdImpl(std::span<const Real> full, std::span<const Real> mtp, double temperature) {
  if (full.size() != mtp.size()) {
    throw InputError("mtd: full and MTP logits differ in length (" + std::to_string(full.size()) +
                     " vs " + std::to_string(mtp.size()) + ")");
  }
  std::vector<double> f(full.begin(), full.end());
  std::vector<double> m(mtp.begin(), mtp.end());
  const std::vector<double> lp = LogSoftmax(f, temperature);
  const std::vector<double> lq = LogSoftmax(m, temperature);
  double kl = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    const double p = std::exp(lp[i]);
    if (p > 0.0) kl += p * (lp[i] - lq[i]);
  }
  return std::max(kl, 0.0);
}

template <typename Real>
double NllImpl(std::span<const Real> full, std::uint32_t token_id) {
  if (token_id >= full.size()) {
    throw InputError("nll: token id " + std::to_string(token_id) + " out of range for K=" +
                     std::to_string(full.size()));
  }
  std::vector<double> f(full.begin(), full.end());
  return -LogSoftmax(f, 1.0)[token_id];
}

}  // namespace

double Mtd(std::span<const double> full_logits, std::span<const double> mtp_logits,
           double temperature) {
  return MtdImpl(full_logits, mtp_logits, temperature);
}

double Mtd(std::span<const float> full_logits, std::span<const float> mtp_logits,
           double temperature) {
  return MtdImpl(full_logits, mtp_logits, temperature);
}

double Nll(std::span<const double> full_logits, std::uint32_t token_id) {
  return NllImpl(full_logits, token_id);
}

double Nll(std::span<const float> full_logits, std::uint32_t token_id) {
  return NllImpl(full_logits, token_id);
}

SequenceStats ComputeSequenceStats(const LogitTrace& trace, double temperature) {
  if (trace.records.empty()) throw InputError("sequence stats of an empty trace");
  SequenceStats st;
  st.per_token_mtd.reserve(trace.records.size());
  st.per_token_nll.reserve(trace.records.size());
  for (const auto& r : trace.records) {
    const double d = Mtd(std::span<const float>(r.full_logits),
                         std::span<const float>(r.mtp_logits), temperature);
    const double n = Nll(std::span<const float>(r.full_logits), r.token_id);
    st.per_token_mtd.push_back(d);
    st.per_token_nll.push_back(n);
    st.cum_mtd += d;
    st.cum_nll += n;
  }
  const auto count = static_cast<double>(trace.records.size());
  st.mean_mtd = st.cum_mtd / count;
  st.mean_nll = st.cum_nll / count;
  return st;
}

namespace {

constexpr char kMagic[4] = {'M', 'T', 'D', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <typename T>
  void Put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    Bytes(buf, sizeof(T));
  }
  void Bytes(const char* p, std::size_t n) {
    os_.write(p, static_cast<std::streamsize>(n));
    if (!os_) throw std::runtime_error("trace write failed");
    count_ += n;
  }
  void String(const std::string& s) {
    Put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    Bytes(s.data(), s.size());
  }
  std::uint64_t count() const { return count_; }

 private:
  std::ostream& os_;
  std::uint64_t count_ = 0;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  void Bytes(char* p, std::size_t n, const std::string& what) {
    is_.read(p, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw FormatError("truncated stream while reading " + what, offset_);
    }
    offset_ += n;
  }
  template <typename T>
  T Get(const std::string& what) {
    char buf[sizeof(T)];
    Bytes(buf, sizeof(T), what);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }
  std::string String(const std::string& what) {
    const auto len = Get<std::uint32_t>(what + " length");
    std::string s(len, '\0');
    if (len > 0) Bytes(s.data(), len, what);
    return s;
  }
  bool AtEnd() { return is_.peek() == std::char_traits<char>::eof(); }
  std::uint64_t offset() const { return offset_; }

 private:
  std::istream& is_;
  std::uint64_t offset_ = 0;
};

}  // namespace

std::uint64_t WriteTrace(const LogitTrace& trace, std::ostream& sink) {
  trace.Validate();
  Writer w(sink);
  w.Bytes(kMagic, 4);
  w.Put<std::uint32_t>(kVersion);
  w.Put<std::uint32_t>(trace.vocab_size);
  w.Put<std::uint64_t>(trace.records.size());
  w.Put<std::uint32_t>(static_cast<std::uint32_t>(trace.meta.size()));
  for (const auto& [k, v] : trace.meta) {
    w.String(k);
    w.String(v);
  }
  const std::size_t row_bytes = trace.vocab_size * sizeof(float);
  for (const auto& r : trace.records) {
    w.Put<std::uint32_t>(r.token_id);
    w.Bytes(reinterpret_cast<const char*>(r.full_logits.data()), row_bytes);
    w.Bytes(reinterpret_cast<const char*>(r.mtp_logits.data()), row_bytes);
  }
  return w.count();
}

LogitTrace ReadTrace(std::istream& source) {
  Reader r(source);
  char magic[4];
  r.Bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic, expected MTDT", 0);
  const std::uint64_t version_at = r.offset();
  const auto version = r.Get<std::uint32_t>("version");
  if (version == 0 || version > kVersion) {
    throw FormatError("unsupported trace version " + std::to_string(version), version_at);
  }
  LogitTrace trace;
  const std::uint64_t vocab_at = r.offset();
  trace.vocab_size = r.Get<std::uint32_t>("vocab_size");
  if (trace.vocab_size < 2) throw FormatError("vocab_size must be >= 2", vocab_at);
  const auto record_count = r.Get<std::uint64_t>("record_count");
  const auto meta_count = r.Get<std::uint32_t>("meta_count");
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    const std::uint64_t at = r.offset();
    std::string key = r.String("meta key");
    std::string val = r.String("meta value");
    if (!trace.meta.emplace(std::move(key), std::move(val)).second) {
      throw FormatError("duplicate meta key", at);
    }
  }
  const std::size_t row_bytes = trace.vocab_size * sizeof(float);
  for (std::uint64_t i = 0; i < record_count; ++i) {
    if (r.AtEnd()) {
      throw FormatError("record_count mismatch: header declares " + std::to_string(record_count) +
                            " records, stream holds " + std::to_string(i),
                        r.offset());
    }
    const std::string where = " of record " + std::to_string(i);
    TokenRecord rec;
    const std::uint64_t tok_at = r.offset();
    rec.token_id = r.Get<std::uint32_t>("token_id" + where);
    if (rec.token_id >= trace.vocab_size) throw FormatError("token_id out of range", tok_at);
    rec.full_logits.resize(trace.vocab_size);
    rec.mtp_logits.resize(trace.vocab_size);
    r.Bytes(reinterpret_cast<char*>(rec.full_logits.data()), row_bytes, "full logits" + where);
    r.Bytes(reinterpret_cast<char*>(rec.mtp_logits.data()), row_bytes, "mtp logits" + where);
    trace.records.push_back(std::move(rec));
  }
  if (!r.AtEnd()) {
    throw FormatError("record_count mismatch: trailing bytes after " +
                          std::to_string(record_count) + " records",
                      r.offset());
  }
  return trace;
}

void WriteTraceFile(const LogitTrace& trace, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  WriteTrace(trace, os);
}

LogitTrace ReadTraceFile(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return ReadTrace(is);
}

void ExportTraceJsonl(const LogitTrace& trace, std::ostream& out, double temperature) {
  const SequenceStats st = ComputeSequenceStats(trace, temperature);
  for (std::size_t i = 0; i < trace.records.size(); ++i) {
    nlohmann::json j;
    j["token_id"] = trace.records[i].token_id;
    j["mtd"] = st.per_token_mtd[i];
    j["nll"] = st.per_token_nll[i];
    out << j.dump() << '\n';
  }
}

}  // namespace mtdlab
