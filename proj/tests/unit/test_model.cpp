#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "mtdlab/divergence.hpp"
#include "mtdlab/errors.hpp"
#include "mtdlab/model.hpp"

using namespace mtdlab;
using ag::Matrix;

namespace {

ModelConfig TinyConfig(int vocab = 11) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_mlp = 16;
  c.vocab_size = vocab;
  c.context_len = 32;
  c.init_std = 0.3;
  return c;
}

ModelConfig SmallConfig(int vocab) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.n_heads = 2;
  c.d_mlp = 64;
  c.vocab_size = vocab;
  c.context_len = 64;
  return c;
}

MtpConfig Mtp(bool access = true) { return MtpConfig{true, 1, access}; }

PhiConfig Phi(int z = 4) {
  PhiConfig p;
  p.enabled = true;
  p.placement_layer = 1;
  p.z_dim = z;
  return p;
}

MicroModel MakeModel(ModelKind kind, ModelConfig cfg, std::uint64_t seed) {
  switch (kind) {
    case ModelKind::kPlain: return MicroModel(cfg, {}, {}, seed);
    case ModelKind::kMtpNll:
    case ModelKind::kMtpMtd: return MicroModel(cfg, Mtp(), {}, seed);
    case ModelKind::kPhi: return MicroModel(cfg, {}, Phi(), seed);
  }
  throw std::logic_error("kind");
}

std::vector<int> RandomTokens(std::mt19937_64& rng, int n, int k) {
  std::vector<int> t(n);
  for (int& v : t) v = static_cast<int>(rng() % k);
  return t;
}

double MeanNll(const Matrix& logits, std::span<const int> tokens) {
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    std::vector<double> row(logits.cols());
    for (Eigen::Index k = 0; k < logits.cols(); ++k) row[k] = logits(i, k);
    s += Nll(row, static_cast<std::uint32_t>(tokens[i + 1]));
  }
  return s / static_cast<double>(tokens.size() - 1);
}

const std::map<std::string, double>& Weights(ModelKind kind) {
  static const std::map<std::string, double> plain{{"nll", 1.0}};
  static const std::map<std::string, double> mtp{{"nll", 1.0}, {"mtp", 1.0}};
  static const std::map<std::string, double> mtd{{"nll", 1.0}, {"mtd", 1.0}};
  static const std::map<std::string, double> phi{{"nll", 1.0}, {"phi", 1.0}};
  switch (kind) {
    case ModelKind::kMtpNll: return mtp;
    case ModelKind::kMtpMtd: return mtd;
    case ModelKind::kPhi: return phi;
    default: return plain;
  }
}

}  // namespace

TEST_CASE("config validation") {
  auto c = TinyConfig();
  c.n_heads = 3;
  CHECK_THROWS_AS(MicroModel(c, {}, {}, 0), ConfigError);
  auto p = Phi();
  p.placement_layer = 2;
  CHECK_THROWS_AS(MicroModel(TinyConfig(), {}, p, 0), ConfigError);
  TrainConfig t;
  t.loss_weights = {{"nll", 1.0}, {"mtp", 1.0}, {"phi", 1.0}};
  CHECK_THROWS_AS(t.Validate(), ConfigError);
  t.loss_weights = {{"mtd", 1.0}};
  CHECK_THROWS_AS(t.Validate(), ConfigError);
  CHECK(ParseModelKind("mtp_mtd") == ModelKind::kMtpMtd);
  CHECK_THROWS_AS(ParseModelKind("mtp2"), ConfigError);
}

TEST_CASE("forward shapes, overlong input, causality") {
  std::mt19937_64 rng(1);
  MicroModel m(TinyConfig(), Mtp(), {}, 3);
  auto tokens = RandomTokens(rng, 12, 11);
  const auto a = ForwardFull(m, tokens);
  CHECK(a.logits.rows() == 12);
  CHECK(a.logits.cols() == 11);
  CHECK_THROWS_AS(ForwardFull(m, RandomTokens(rng, 33, 11)), InputError);

  const Matrix mtp_a = ForwardMtp(m, a.hiddens, a.embeddings);
  const int j = 7;
  tokens[j] = (tokens[j] + 1) % 11;
  const auto b = ForwardFull(m, tokens);
  const Matrix mtp_b = ForwardMtp(m, b.hiddens, b.embeddings);
  for (int i = 0; i < j; ++i) {
    CHECK((a.logits.row(i).array() == b.logits.row(i).array()).all());
    CHECK((mtp_a.row(i).array() == mtp_b.row(i).array()).all());
  }
  CHECK_FALSE((a.logits.row(j).array() == b.logits.row(j).array()).all());
  CHECK_FALSE((mtp_a.row(j).array() == mtp_b.row(j).array()).all());
}

TEST_CASE("mtp without embedding access ignores the current token") {
  std::mt19937_64 rng(2);
  MicroModel m(TinyConfig(), Mtp(false), {}, 4);
  auto tokens = RandomTokens(rng, 10, 11);
  const auto a = ForwardFull(m, tokens);
  const Matrix mtp_a = ForwardMtp(m, a.hiddens, a.embeddings);
  const int j = 5;
  tokens[j] = (tokens[j] + 3) % 11;
  const auto b = ForwardFull(m, tokens);
  const Matrix mtp_b = ForwardMtp(m, b.hiddens, b.embeddings);
  for (int i = 0; i <= j; ++i) CHECK((mtp_a.row(i).array() == mtp_b.row(i).array()).all());
  CHECK_FALSE((mtp_a.row(j + 1).array() == mtp_b.row(j + 1).array()).all());
}

TEST_CASE("output head is the embedding matrix") {
  MicroModel m(TinyConfig(), Mtp(), {}, 5);
  CHECK(m.output_head().node() == m.param("embed").node());
  const std::vector<int> tokens{1, 2, 3};
  const auto before = ForwardFull(m, tokens);
  m.param("embed").mutable_value().row(9).setConstant(0.0);
  CHECK(m.output_head().value().row(9).isZero());
  const auto after = ForwardFull(m, tokens);
  CHECK(after.logits.col(9).isZero());
  CHECK((before.logits.col(9).array() != 0.0).all());
}

TEST_CASE("gradient check for each model kind") {
  // Relative error |a - n| / max(|a|, |n|, 1e-7) over 200 random parameters.
  for (ModelKind kind : {ModelKind::kPlain, ModelKind::kMtpNll, ModelKind::kMtpMtd, ModelKind::kPhi}) {
    const std::string kind_name = ModelKindName(kind);
    CAPTURE(kind_name);
    MicroModel m = MakeModel(kind, TinyConfig(), 7);
    std::mt19937_64 rng(8);
    std::vector<std::vector<int>> seqs{RandomTokens(rng, 7, 11), RandomTokens(rng, 5, 11)};
    const TrainBatch batch = MakeTrainBatch(seqs, {}, 0);
    auto loss = [&](bool nll_only) {
      std::mt19937_64 noise(99);
      const auto l = ComputeLoss(m, batch, kind, Weights(kind), noise);
      return nll_only ? l.nll : l.total.scalar();
    };
    {
      std::mt19937_64 noise(99);
      m.ZeroGrad();
      ag::Backward(ComputeLoss(m, batch, kind, Weights(kind), noise).total);
    }
    auto& params = m.parameters();
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
      auto& [name, v] = params[rng() % params.size()];
      const Eigen::Index idx = static_cast<Eigen::Index>(rng() % v.value().size());
      // With stop-gradient the MTD term only trains the MTP head; elsewhere the
      // analytic gradient is that of the NLL alone.
      const bool nll_only = kind == ModelKind::kMtpMtd && name.rfind("mtp.", 0) != 0;
      double& x = v.mutable_value().data()[idx];
      const double orig = x;
      constexpr double h = 1e-5;
      x = orig + h;
      const double up = loss(nll_only);
      x = orig - h;
      const double down = loss(nll_only);
      x = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = v.grad().size() ? v.grad().data()[idx] : 0.0;
      const double rel =
          std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-7});
      worst = std::max(worst, rel);
      CHECK_MESSAGE(rel <= 1e-3, name, "[", idx, "]: ", analytic, " vs ", numeric);
    }
    MESSAGE(kind_name, " worst relative error ", worst);
  }
}

TEST_CASE("phi loss respects the free-bits floor") {
  MicroModel m(TinyConfig(), {}, Phi(), 9);
  std::mt19937_64 rng(10);
  const auto tokens = RandomTokens(rng, 9, 11);
  const auto [logits, loss] = ForwardPhi(m, tokens, rng);
  CHECK(logits.rows() == 9);
  for (double v : loss) CHECK(v >= 0.02 - 1e-15);
}

TEST_CASE("training: zero steps, determinism, divergence") {
  auto source = [](std::uint64_t i) {
    std::mt19937_64 r(i);
    return TrainExample{RandomTokens(r, 10, 11), {}};
  };
  SUBCASE("zero steps leave parameters unchanged") {
    MicroModel m(TinyConfig(), Mtp(), {}, 1);
    const MicroModel before = m.Clone();
    TrainConfig cfg;
    cfg.steps = 0;
    Train(m, source, cfg, 0);
    for (std::size_t i = 0; i < m.parameters().size(); ++i) {
      CHECK(m.parameters()[i].second.value() == before.parameters()[i].second.value());
    }
  }
  SUBCASE("same seed and config give bit-identical curves") {
    TrainConfig cfg;
    cfg.steps = 20;
    cfg.batch_size = 4;
    cfg.warmup_steps = 5;
    cfg.log_every = 5;
    cfg.loss_weights = {{"nll", 1.0}, {"phi", 1.0}};
    MicroModel a(TinyConfig(), {}, Phi(), 2);
    MicroModel b(TinyConfig(), {}, Phi(), 2);
    const auto ra = Train(a, source, cfg, 0);
    const auto rb = Train(b, source, cfg, 0);
    REQUIRE(ra.curve.size() == rb.curve.size());
    CHECK(ra.curve.size() == 12);
    for (std::size_t i = 0; i < ra.curve.size(); ++i) {
      CHECK(ra.curve[i].name == rb.curve[i].name);
      CHECK(ra.curve[i].value == rb.curve[i].value);
    }
    std::ostringstream os;
    WriteLossCsv(ra.curve, os);
    CHECK(os.str().rfind("step,loss_name,value\n5,nll,", 0) == 0);
  }
  SUBCASE("non-finite loss aborts with the step index") {
    MicroModel m(TinyConfig(), {}, {}, 3);
    TrainConfig cfg;
    cfg.steps = 5;
    cfg.batch_size = 2;
    cfg.warmup_steps = 0;
    cfg.learning_rate = 1e300;
    try {
      Train(m, source, cfg, 0);
      FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
      CHECK(e.step() >= 1);
    }
  }
  SUBCASE("aux loss needs the matching module") {
    MicroModel m(TinyConfig(), {}, {}, 3);
    TrainConfig cfg;
    cfg.loss_weights = {{"nll", 1.0}, {"mtd", 1.0}};
    CHECK_THROWS_AS(Train(m, source, cfg, 0), ConfigError);
  }
}

TEST_CASE("overfitting a single 32-token sequence drives nll below 0.05") {
  std::mt19937_64 rng(11);
  const auto seq = RandomTokens(rng, 32, 16);
  MicroModel m(SmallConfig(16), {}, {}, 12);
  TrainConfig cfg;
  cfg.steps = 500;
  cfg.batch_size = 1;
  cfg.warmup_steps = 20;
  cfg.learning_rate = 3e-3;
  Train(m, [&](std::uint64_t) { return TrainExample{seq, {}}; }, cfg, 0);
  const double nll = MeanNll(ForwardFull(m, seq).logits, seq);
  MESSAGE("overfit nll ", nll);
  CHECK(nll < 0.05);
}

TEST_CASE("plain model on uniform random tokens plateaus at ln K") {
  constexpr int kK = 16;
  MicroModel m(SmallConfig(kK), {}, {}, 13);
  TrainConfig cfg;
  cfg.steps = 300;
  cfg.batch_size = 16;
  cfg.warmup_steps = 30;
  cfg.learning_rate = 1e-3;
  auto source = [](std::uint64_t i) {
    std::mt19937_64 r(i * 7919 + 1);
    return TrainExample{RandomTokens(r, 33, kK), {}};
  };
  Train(m, source, cfg, 0);
  double total = 0.0;
  for (std::uint64_t i = 0; i < 40; ++i) {
    const auto seq = source(1'000'000 + i).tokens;
    total += MeanNll(ForwardFull(m, seq).logits, seq);
  }
  const double nll = total / 40;
  MESSAGE("held-out nll ", nll, " vs ln K ", std::log(kK));
  CHECK(std::abs(nll - std::log(static_cast<double>(kK))) < 0.05);
}

TEST_CASE("jointly trained MTP head learns the repeated-token language") {
  constexpr int kK = 12;
  MicroModel m(SmallConfig(kK), Mtp(), {}, 14);
  TrainConfig cfg;
  cfg.steps = 150;
  cfg.batch_size = 8;
  cfg.warmup_steps = 10;
  cfg.learning_rate = 3e-3;
  cfg.loss_weights = {{"nll", 1.0}, {"mtp", 1.0}};
  auto source = [](std::uint64_t i) {
    return TrainExample{std::vector<int>(24, static_cast<int>(i % kK)), {}};
  };
  Train(m, source, cfg, 0);
  double total = 0.0;
  for (int tok = 0; tok < kK; ++tok) {
    const std::vector<int> seq(24, tok);
    std::vector<double> mtp_nll;
    const auto trace = RecordTrace(m, seq);
    for (const auto& r : trace.records) mtp_nll.push_back(Nll(r.mtp_logits, r.token_id));
    total += std::accumulate(mtp_nll.begin(), mtp_nll.end(), 0.0) / mtp_nll.size();
  }
  MESSAGE("mtp nll ", total / kK);
  CHECK(total / kK < 0.1);
}

TEST_CASE("mtd-trained head matches a constant next-token distribution") {
  constexpr int kK = 8;
  MicroModel m(SmallConfig(kK), Mtp(), {}, 15);
  TrainConfig cfg;
  cfg.steps = 300;
  cfg.batch_size = 8;
  cfg.warmup_steps = 20;
  cfg.learning_rate = 3e-3;
  cfg.loss_weights = {{"nll", 1.0}, {"mtd", 1.0}};
  const std::vector<double> probs{0.4, 0.3, 0.2, 0.1};
  auto source = [&](std::uint64_t i) {
    std::mt19937_64 r(i + 17);
    std::discrete_distribution<int> d(probs.begin(), probs.end());
    std::vector<int> t(24);
    for (int& v : t) v = d(r);
    return TrainExample{t, {}};
  };
  Train(m, source, cfg, 0);
  double mtd = 0.0;
  for (std::uint64_t i = 0; i < 10; ++i) {
    mtd += ComputeSequenceStats(RecordTrace(m, source(500'000 + i).tokens)).mean_mtd;
  }
  MESSAGE("mean mtd ", mtd / 10);
  CHECK(mtd / 10 < 0.02);
}

TEST_CASE("record trace alignment and training-loss consistency") {
  std::mt19937_64 rng(16);
  MicroModel m(TinyConfig(), Mtp(), {}, 17);
  const auto tokens = RandomTokens(rng, 15, 11);
  const auto trace = RecordTrace(m, tokens);
  CHECK(trace.records.size() == 14);
  CHECK(trace.vocab_size == 11);
  const auto stats = ComputeSequenceStats(trace);
  const auto full = ForwardFull(m, tokens);
  CHECK(std::abs(stats.mean_nll - MeanNll(full.logits, tokens)) < 1e-6);

  const TrainBatch batch = MakeTrainBatch({tokens}, {}, 0);
  std::mt19937_64 noise(0);
  const auto loss = ComputeLoss(m, batch, ModelKind::kMtpMtd, Weights(ModelKind::kMtpMtd), noise);
  CHECK(std::abs(loss.aux - stats.mean_mtd) < 1e-6);
  CHECK(std::abs(loss.nll - stats.mean_nll) < 1e-6);

  MicroModel plain(TinyConfig(), {}, {}, 1);
  CHECK_THROWS_AS(RecordTrace(plain, tokens), ConfigError);
}

TEST_CASE("loss masks and padding") {
  const auto b = MakeTrainBatch({{1, 2, 3, 4}, {5, 6}}, {{0, 0, 1, 1}, {}}, 9);
  CHECK(b.inputs.seq_len == 3);
  CHECK(b.inputs.tokens == std::vector<int>{1, 2, 3, 5, 9, 9});
  CHECK(b.targets == std::vector<int>{-1, 3, 4, 6, -1, -1});
  CHECK_THROWS_AS(MakeTrainBatch({{1}}, {}, 0), InputError);
}

TEST_CASE("checkpoint round trip") {
  for (ModelKind kind : {ModelKind::kMtpMtd, ModelKind::kPhi}) {
    MicroModel m = MakeModel(kind, TinyConfig(), 21);
    std::stringstream ss;
    SaveCheckpoint(m, ss);
    const std::string bytes = ss.str();
    CHECK(bytes.substr(0, 4) == "MTDM");
    std::istringstream is(bytes);
    const MicroModel back = LoadCheckpoint(is);
    CHECK(back.has_mtp() == m.has_mtp());
    CHECK(back.has_phi() == m.has_phi());
    REQUIRE(back.parameters().size() == m.parameters().size());
    for (std::size_t i = 0; i < m.parameters().size(); ++i) {
      CHECK(back.parameters()[i].first == m.parameters()[i].first);
      CHECK(back.parameters()[i].second.value() == m.parameters()[i].second.value());
    }
    std::istringstream cut(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(LoadCheckpoint(cut), FormatError);
    std::string bad = bytes;
    bad[1] = 'X';
    std::istringstream badis(bad);
    CHECK_THROWS_AS(LoadCheckpoint(badis), FormatError);
  }
}
