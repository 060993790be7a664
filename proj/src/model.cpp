#include "mtdlab/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "json.hpp"

#include "mtdlab/errors.hpp"
#include "mtdlab/rng.hpp"

namespace mtdlab {

using ag::Matrix;
using ag::Var;
using nlohmann::json;

void ModelConfig::Validate() const {
  if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || d_mlp <= 0 || vocab_size <= 1 ||
      context_len <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if ((d_model / n_heads) % 2 != 0) throw ConfigError("head dimension must be even for rotary");
  if (context_len < 2) throw ConfigError("context_len must be >= 2");
  if (!tied_embeddings) throw ConfigError("embeddings are always tied");
}

const char* ModelKindName(ModelKind kind) {
  switch (kind) {
    case ModelKind::kPlain: return "plain";
    case ModelKind::kMtpNll: return "mtp_nll";
    case ModelKind::kMtpMtd: return "mtp_mtd";
    case ModelKind::kPhi: return "phi";
  }
  return "?";
}

ModelKind ParseModelKind(const std::string& name) {
  if (name == "plain") return ModelKind::kPlain;
  if (name == "mtp_nll") return ModelKind::kMtpNll;
  if (name == "mtp_mtd") return ModelKind::kMtpMtd;
  if (name == "phi") return ModelKind::kPhi;
  throw ConfigError("unknown model kind '" + name + "'");
}

void TrainConfig::Validate() const {
  if (steps < 0 || batch_size <= 0 || warmup_steps < 0) {
    throw ConfigError("steps/batch_size/warmup_steps out of range");
  }
  if (!(learning_rate > 0.0) || !(grad_clip_norm > 0.0)) {
    throw ConfigError("learning_rate and grad_clip_norm must be positive");
  }
  if (!loss_weights.contains("nll")) throw ConfigError("loss_weights must contain 'nll'");
  int aux = 0;
  for (const auto& [name, w] : loss_weights) {
    if (name == "mtp" || name == "mtd" || name == "phi") {
      ++aux;
    } else if (name != "nll") {
      throw ConfigError("unknown loss '" + name + "'");
    }
  }
  if (aux > 1) throw ConfigError("at most one of mtp, mtd, phi may be weighted");
}

ModelKind TrainConfig::Kind() const {
  if (loss_weights.contains("mtp")) return ModelKind::kMtpNll;
  if (loss_weights.contains("mtd")) return ModelKind::kMtpMtd;
  if (loss_weights.contains("phi")) return ModelKind::kPhi;
  return ModelKind::kPlain;
}

// ---------------------------------------------------------------------------
// Parameters

Var MicroModel::Normal(Eigen::Index rows, Eigen::Index cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return ag::Parameter(std::move(m));
}

void MicroModel::Register(const std::string& name, Var v) {
  index_[name] = params_.size();
  params_.emplace_back(name, std::move(v));
}

BlockParams MicroModel::MakeBlock(const std::string& prefix, std::mt19937_64& rng) {
  const int d = cfg_.d_model;
  const double s = cfg_.init_std;
  // Residual-branch outputs are scaled down with depth.
  const double s_out = s / std::sqrt(2.0 * cfg_.n_layers);
  BlockParams b;
  b.attn_norm = ag::Parameter(Matrix::Ones(1, d));
  b.wq = Normal(d, d, s, rng);
  b.wk = Normal(d, d, s, rng);
  b.wv = Normal(d, d, s, rng);
  b.wo = Normal(d, d, s_out, rng);
  b.mlp_norm = ag::Parameter(Matrix::Ones(1, d));
  b.w_gate = Normal(cfg_.d_mlp, d, s, rng);
  b.w_up = Normal(cfg_.d_mlp, d, s, rng);
  b.w_down = Normal(d, cfg_.d_mlp, s_out, rng);
  Register(prefix + ".attn_norm", b.attn_norm);
  Register(prefix + ".wq", b.wq);
  Register(prefix + ".wk", b.wk);
  Register(prefix + ".wv", b.wv);
  Register(prefix + ".wo", b.wo);
  Register(prefix + ".mlp_norm", b.mlp_norm);
  Register(prefix + ".w_gate", b.w_gate);
  Register(prefix + ".w_up", b.w_up);
  Register(prefix + ".w_down", b.w_down);
  return b;
}

MicroModel::MicroModel(ModelConfig cfg, MtpConfig mtp, PhiConfig phi, std::uint64_t seed)
    : cfg_(cfg), mtp_(mtp), phi_(phi) {
  cfg_.Validate();
  if (mtp_.enabled && mtp_.n_blocks < 1) throw ConfigError("MTP needs at least one block");
  if (phi_.enabled) {
    if (phi_.placement_layer < 1 || phi_.placement_layer >= cfg_.n_layers) {
      throw ConfigError("PHi placement must satisfy 1 <= layer < n_layers");
    }
    if (phi_.z_dim <= 0 || phi_.free_bits < 0.0) throw ConfigError("bad PHi z_dim / free_bits");
  }
  std::mt19937_64 rng(seed);
  const int d = cfg_.d_model;
  embed_ = Normal(cfg_.vocab_size, d, cfg_.init_std, rng);
  Register("embed", embed_);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    blocks_.push_back(MakeBlock("blocks." + std::to_string(l), rng));
  }
  final_norm_ = ag::Parameter(Matrix::Ones(1, d));
  Register("final_norm", final_norm_);

  if (mtp_.enabled) {
    // A zero initial state would feed an all-zero row into RMSNorm.
    mtp_init_ = Normal(1, d, cfg_.init_std, rng);
    Register("mtp.init", mtp_init_);
    const int in = mtp_.access_latest_embedding ? 2 * d : d;
    mtp_proj_ = Normal(d, in, cfg_.init_std, rng);
    Register("mtp.proj", mtp_proj_);
    for (int i = 0; i < mtp_.n_blocks; ++i) {
      mtp_blocks_.push_back(MakeBlock("mtp.blocks." + std::to_string(i), rng));
    }
    mtp_norm_ = ag::Parameter(Matrix::Ones(1, d));
    Register("mtp.final_norm", mtp_norm_);
  }

  if (phi_.enabled) {
    const int z = phi_.z_dim;
    phi_enc_w_ = Normal(2 * z, d, cfg_.init_std, rng);
    phi_enc_b_ = ag::Parameter(Matrix::Zero(1, 2 * z));
    phi_dec_w_ = Normal(d, z, cfg_.init_std, rng);
    phi_dec_b_ = ag::Parameter(Matrix::Zero(1, d));
    phi_z0_ = Normal(1, z, cfg_.init_std, rng);
    const int in = phi_.access_latest_embedding ? z + d : z;
    phi_prior_in_ = Normal(d, in, cfg_.init_std, rng);
    Register("phi.enc_w", phi_enc_w_);
    Register("phi.enc_b", phi_enc_b_);
    Register("phi.dec_w", phi_dec_w_);
    Register("phi.dec_b", phi_dec_b_);
    Register("phi.z0", phi_z0_);
    Register("phi.prior_in", phi_prior_in_);
    phi_prior_block_ = MakeBlock("phi.prior_block", rng);
    phi_prior_norm_ = ag::Parameter(Matrix::Ones(1, d));
    phi_prior_out_w_ = Normal(2 * z, d, cfg_.init_std, rng);
    phi_prior_out_b_ = ag::Parameter(Matrix::Zero(1, 2 * z));
    Register("phi.prior_norm", phi_prior_norm_);
    Register("phi.prior_out_w", phi_prior_out_w_);
    Register("phi.prior_out_b", phi_prior_out_b_);
  }
}

MicroModel MicroModel::Clone() const {
  MicroModel copy(cfg_, mtp_, phi_, 0);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    copy.params_[i].second.mutable_value() = params_[i].second.value();
  }
  return copy;
}

Var& MicroModel::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
  return params_[it->second].second;
}

const Var& MicroModel::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
  return params_[it->second].second;
}

std::size_t MicroModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : params_) n += static_cast<std::size_t>(v.value().size());
  return n;
}

void MicroModel::ZeroGrad() {
  for (auto& [name, v] : params_) v.ZeroGrad();
}

// ---------------------------------------------------------------------------
// Forward passes

TokenBatch TokenBatch::Single(std::span<const int> tokens) {
  TokenBatch b;
  b.batch_size = 1;
  b.seq_len = static_cast<int>(tokens.size());
  b.tokens.assign(tokens.begin(), tokens.end());
  return b;
}

struct ModelGraph {
  static Var Block(const BlockParams& b, const Var& x, int n_heads, int seq_len, double rope_base) {
    const Var h = ag::RmsNorm(x, b.attn_norm);
    const Var q = ag::Rope(ag::MatMulT(h, b.wq), n_heads, seq_len, rope_base);
    const Var k = ag::Rope(ag::MatMulT(h, b.wk), n_heads, seq_len, rope_base);
    const Var v = ag::MatMulT(h, b.wv);
    const Var att = ag::CausalAttention(q, k, v, n_heads, seq_len);
    const Var x1 = ag::Add(x, ag::MatMulT(att, b.wo));
    const Var h2 = ag::RmsNorm(x1, b.mlp_norm);
    const Var gate = ag::Silu(ag::MatMulT(h2, b.w_gate));
    const Var up = ag::MatMulT(h2, b.w_up);
    return ag::Add(x1, ag::MatMulT(ag::Mul(gate, up), b.w_down));
  }

  static Var Embed(const MicroModel& m, const TokenBatch& batch) {
    if (batch.seq_len <= 0 || batch.batch_size <= 0 ||
        batch.tokens.size() != static_cast<std::size_t>(batch.batch_size * batch.seq_len)) {
      throw InputError("token batch shape is inconsistent");
    }
    if (batch.seq_len > m.cfg_.context_len) {
      throw InputError("sequence length " + std::to_string(batch.seq_len) +
                       " exceeds context_len " + std::to_string(m.cfg_.context_len));
    }
    return ag::Embedding(m.embed_, batch.tokens);
  }

  static FullOutputs Full(const MicroModel& m, const TokenBatch& batch) {
    FullOutputs out;
    out.embeddings = Embed(m, batch);
    Var x = out.embeddings;
    for (const auto& b : m.blocks_) x = Block(b, x, m.cfg_.n_heads, batch.seq_len, m.cfg_.rope_base);
    out.hiddens = x;
    out.logits = ag::MatMulT(ag::RmsNorm(x, m.final_norm_), m.embed_);
    return out;
  }

  static Var Mtp(const MicroModel& m, const Var& hiddens, const Var& embeddings, const Var& head,
                 int seq_len) {
    if (!m.mtp_.enabled) throw ConfigError("model has no MTP head");
    if (hiddens.rows() != embeddings.rows() || hiddens.cols() != m.cfg_.d_model) {
      throw InputError("MTP inputs have inconsistent shapes");
    }
    Var in = ag::ShiftRows(hiddens, m.mtp_init_, seq_len);
    if (m.mtp_.access_latest_embedding) in = ag::ConcatCols(in, embeddings);
    Var x = ag::MatMulT(in, m.mtp_proj_);
    for (const auto& b : m.mtp_blocks_) x = Block(b, x, m.cfg_.n_heads, seq_len, m.cfg_.rope_base);
    return ag::MatMulT(ag::RmsNorm(x, m.mtp_norm_), head);
  }

  static PhiOutputs Phi(const MicroModel& m, const TokenBatch& batch, std::mt19937_64& rng) {
    if (!m.phi_.enabled) throw ConfigError("model has no PHi layer");
    const int z = m.phi_.z_dim;
    const int T = batch.seq_len;
    const auto& cfg = m.cfg_;
    PhiOutputs out;
    out.embeddings = Embed(m, batch);
    Var x = out.embeddings;
    for (int l = 0; l < m.phi_.placement_layer; ++l) {
      x = Block(m.blocks_[l], x, cfg.n_heads, T, cfg.rope_base);
    }
    const Var post = ag::AddRowVec(ag::MatMulT(x, m.phi_enc_w_), m.phi_enc_b_);
    const Var mu_q = ag::SliceCols(post, 0, z);
    const Var lv_q = ag::SliceCols(post, z, z);
    Matrix eps(post.rows(), z);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal(rng);
    const Var zs = ag::Add(mu_q, ag::Mul(ag::Exp(ag::Scale(lv_q, 0.5)), ag::Constant(std::move(eps))));
    x = ag::AddRowVec(ag::MatMulT(zs, m.phi_dec_w_), m.phi_dec_b_);
    for (int l = m.phi_.placement_layer; l < cfg.n_layers; ++l) {
      x = Block(m.blocks_[l], x, cfg.n_heads, T, cfg.rope_base);
    }
    out.logits = ag::MatMulT(ag::RmsNorm(x, m.final_norm_), m.embed_);

    Var prior_in = ag::ShiftRows(zs, m.phi_z0_, T);
    if (m.phi_.access_latest_embedding) prior_in = ag::ConcatCols(prior_in, out.embeddings);
    Var c = ag::MatMulT(prior_in, m.phi_prior_in_);
    c = Block(m.phi_prior_block_, c, cfg.n_heads, T, cfg.rope_base);
    const Var prior = ag::AddRowVec(ag::MatMulT(ag::RmsNorm(c, m.phi_prior_norm_), m.phi_prior_out_w_),
                                    m.phi_prior_out_b_);
    const Var mu_p = ag::SliceCols(prior, 0, z);
    const Var lv_p = ag::SliceCols(prior, z, z);
    out.phi_loss = ag::GaussianKlRows(mu_q, lv_q, mu_p, lv_p, m.phi_.free_bits);
    return out;
  }
};

FullOutputs ForwardFullGraph(const MicroModel& model, const TokenBatch& batch) {
  return ModelGraph::Full(model, batch);
}

Var ForwardMtpGraph(const MicroModel& model, const Var& hiddens, const Var& embeddings,
                    const Var& head, int seq_len) {
  return ModelGraph::Mtp(model, hiddens, embeddings, head, seq_len);
}

PhiOutputs ForwardPhiGraph(const MicroModel& model, const TokenBatch& batch,
                           std::mt19937_64& rng) {
  return ModelGraph::Phi(model, batch, rng);
}

FullResult ForwardFull(const MicroModel& model, std::span<const int> tokens) {
  ag::NoGradGuard guard;
  if (tokens.empty()) throw InputError("empty input");
  const FullOutputs o = ForwardFullGraph(model, TokenBatch::Single(tokens));
  return {o.hiddens.value(), o.logits.value(), o.embeddings.value()};
}

Matrix ForwardMtp(const MicroModel& model, const Matrix& hiddens, const Matrix& embeddings) {
  ag::NoGradGuard guard;
  if (hiddens.rows() != embeddings.rows()) throw InputError("MTP inputs differ in length");
  return ForwardMtpGraph(model, ag::Constant(hiddens), ag::Constant(embeddings),
                         model.output_head(), static_cast<int>(hiddens.rows()))
      .value();
}

std::pair<Matrix, std::vector<double>> ForwardPhi(const MicroModel& model,
                                                  std::span<const int> tokens,
                                                  std::mt19937_64& rng) {
  ag::NoGradGuard guard;
  if (tokens.empty()) throw InputError("empty input");
  const PhiOutputs o = ForwardPhiGraph(model, TokenBatch::Single(tokens), rng);
  std::vector<double> loss(o.phi_loss.value().data(),
                           o.phi_loss.value().data() + o.phi_loss.value().size());
  return {o.logits.value(), std::move(loss)};
}

// ---------------------------------------------------------------------------
// Losses and training

TrainBatch MakeTrainBatch(const std::vector<std::vector<int>>& sequences,
                          const std::vector<std::vector<std::uint8_t>>& loss_masks,
                          int pad_token) {
  if (sequences.empty()) throw InputError("empty batch");
  std::size_t max_len = 0;
  for (const auto& s : sequences) {
    if (s.size() < 2) throw InputError("training sequences need at least 2 tokens");
    max_len = std::max(max_len, s.size());
  }
  const int T = static_cast<int>(max_len) - 1;
  TrainBatch b;
  b.inputs.batch_size = static_cast<int>(sequences.size());
  b.inputs.seq_len = T;
  b.inputs.tokens.assign(sequences.size() * static_cast<std::size_t>(T), pad_token);
  b.targets.assign(sequences.size() * static_cast<std::size_t>(T), -1);
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const auto& seq = sequences[s];
    const std::vector<std::uint8_t>* mask =
        s < loss_masks.size() && !loss_masks[s].empty() ? &loss_masks[s] : nullptr;
    if (mask && mask->size() != seq.size()) throw InputError("loss mask length differs");
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      const std::size_t row = s * static_cast<std::size_t>(T) + t;
      b.inputs.tokens[row] = seq[t];
      if (!mask || (*mask)[t + 1]) b.targets[row] = seq[t + 1];
    }
  }
  return b;
}

LossBreakdown ComputeLoss(const MicroModel& model, const TrainBatch& batch, ModelKind kind,
                          const std::map<std::string, double>& weights, std::mt19937_64& rng) {
  std::vector<double> mask(batch.targets.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = batch.targets[i] >= 0 ? 1.0 : 0.0;
  auto weight = [&](const char* name) {
    auto it = weights.find(name);
    return it == weights.end() ? 0.0 : it->second;
  };

  LossBreakdown out;
  const int T = batch.inputs.seq_len;
  Var nll;
  Var aux;
  const char* aux_name = nullptr;
  switch (kind) {
    case ModelKind::kPlain: {
      const FullOutputs f = ForwardFullGraph(model, batch.inputs);
      nll = ag::WeightedMean(ag::RowNll(f.logits, batch.targets), mask);
      break;
    }
    case ModelKind::kMtpNll: {
      const FullOutputs f = ForwardFullGraph(model, batch.inputs);
      nll = ag::WeightedMean(ag::RowNll(f.logits, batch.targets), mask);
      const Var mtp = ForwardMtpGraph(model, f.hiddens, f.embeddings, model.output_head(), T);
      aux = ag::WeightedMean(ag::RowNll(mtp, batch.targets), mask);
      aux_name = "mtp";
      break;
    }
    case ModelKind::kMtpMtd: {
      const FullOutputs f = ForwardFullGraph(model, batch.inputs);
      nll = ag::WeightedMean(ag::RowNll(f.logits, batch.targets), mask);
      const Var mtp = ForwardMtpGraph(model, ag::Detach(f.hiddens), ag::Detach(f.embeddings),
                                      ag::Detach(model.output_head()), T);
      aux = ag::WeightedMean(ag::RowKl(f.logits.value(), mtp), mask);
      aux_name = "mtd";
      break;
    }
    case ModelKind::kPhi: {
      const PhiOutputs p = ForwardPhiGraph(model, batch.inputs, rng);
      nll = ag::WeightedMean(ag::RowNll(p.logits, batch.targets), mask);
      aux = ag::WeightedMean(p.phi_loss, mask);
      aux_name = "phi";
      break;
    }
  }
  out.nll = nll.scalar();
  out.total = ag::Scale(nll, weight("nll"));
  if (aux_name) {
    out.aux = aux.scalar();
    out.total = ag::Add(out.total, ag::Scale(aux, weight(aux_name)));
  }
  return out;
}

TrainResult Train(MicroModel& model, const ExampleSource& data, const TrainConfig& cfg,
                  int pad_token, const std::function<void(int, double)>& progress) {
  cfg.Validate();
  const ModelKind kind = cfg.Kind();
  if ((kind == ModelKind::kMtpNll || kind == ModelKind::kMtpMtd) && !model.has_mtp()) {
    throw ConfigError("MTP loss requested but the model has no MTP head");
  }
  if (kind == ModelKind::kPhi && !model.has_phi()) {
    throw ConfigError("PHi loss requested but the model has no PHi layer");
  }
  const char* aux_name = kind == ModelKind::kMtpNll   ? "mtp"
                         : kind == ModelKind::kMtpMtd ? "mtd"
                         : kind == ModelKind::kPhi    ? "phi"
                                                      : nullptr;

  auto& params = model.parameters();
  std::vector<Matrix> m1(params.size());
  std::vector<Matrix> m2(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    m1[i] = Matrix::Zero(params[i].second.rows(), params[i].second.cols());
    m2[i] = m1[i];
  }
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;

  TrainResult result;
  double win_nll = 0.0;
  double win_aux = 0.0;
  double win_total = 0.0;
  int win_n = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<std::vector<int>> seqs;
    std::vector<std::vector<std::uint8_t>> masks;
    for (int b = 0; b < cfg.batch_size; ++b) {
      TrainExample ex = data(static_cast<std::uint64_t>(step) * cfg.batch_size + b);
      seqs.push_back(std::move(ex.tokens));
      masks.push_back(std::move(ex.loss_mask));
    }
    const TrainBatch batch = MakeTrainBatch(seqs, masks, pad_token);
    std::mt19937_64 noise = DeriveRng({cfg.seed, static_cast<std::uint64_t>(step)});
    const LossBreakdown loss = ComputeLoss(model, batch, kind, cfg.loss_weights, noise);
    const double total = loss.total.scalar();
    if (!std::isfinite(total)) throw TrainingDiverged("non-finite training loss", step);

    model.ZeroGrad();
    ag::Backward(loss.total);

    double sq = 0.0;
    for (auto& [name, v] : params) {
      if (v.grad().size() != 0) sq += v.grad().squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw TrainingDiverged("non-finite gradient norm", step);
    const double clip = norm > cfg.grad_clip_norm ? cfg.grad_clip_norm / norm : 1.0;
    const double lr = cfg.warmup_steps > 0
                          ? cfg.learning_rate * std::min(1.0, (step + 1.0) / cfg.warmup_steps)
                          : cfg.learning_rate;
    const double bc1 = 1.0 - std::pow(kBeta1, step + 1);
    const double bc2 = 1.0 - std::pow(kBeta2, step + 1);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Var& v = params[i].second;
      if (v.grad().size() == 0) continue;
      const Matrix g = v.grad() * clip;
      m1[i] = kBeta1 * m1[i] + (1.0 - kBeta1) * g;
      m2[i] = kBeta2 * m2[i] + (1.0 - kBeta2) * g.cwiseProduct(g);
      v.mutable_value().array() -=
          lr * (m1[i].array() / bc1) / ((m2[i].array() / bc2).sqrt() + kEps);
    }

    win_nll += loss.nll;
    win_aux += loss.aux;
    win_total += total;
    ++win_n;
    if (cfg.log_every > 0 && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      result.curve.push_back({step + 1, "nll", win_nll / win_n});
      if (aux_name) result.curve.push_back({step + 1, aux_name, win_aux / win_n});
      result.curve.push_back({step + 1, "total", win_total / win_n});
      win_nll = win_aux = win_total = 0.0;
      win_n = 0;
    }
    if (progress) progress(step + 1, total);
    result.steps_run = step + 1;
  }
  model.ZeroGrad();
  return result;
}

LogitTrace RecordTrace(const MicroModel& model, std::span<const int> tokens) {
  if (!model.has_mtp()) throw ConfigError("recording a trace needs a model with an MTP head");
  if (tokens.size() < 2) throw InputError("trace recording needs at least 2 tokens");
  const FullResult full = ForwardFull(model, tokens);
  const Matrix mtp = ForwardMtp(model, full.hiddens, full.embeddings);
  LogitTrace trace;
  trace.vocab_size = static_cast<std::uint32_t>(model.config().vocab_size);
  const Eigen::Index K = full.logits.cols();
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    TokenRecord r;
    r.token_id = static_cast<std::uint32_t>(tokens[i + 1]);
    r.full_logits.resize(K);
    r.mtp_logits.resize(K);
    for (Eigen::Index k = 0; k < K; ++k) {
      r.full_logits[k] = static_cast<float>(full.logits(static_cast<Eigen::Index>(i), k));
      r.mtp_logits[k] = static_cast<float>(mtp(static_cast<Eigen::Index>(i), k));
    }
    trace.records.push_back(std::move(r));
  }
  return trace;
}

void WriteLossCsv(const std::vector<LossPoint>& curve, std::ostream& out) {
  out << "step,loss_name,value\n";
  out.precision(10);
  for (const auto& p : curve) out << p.step << ',' << p.name << ',' << p.value << '\n';
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

json ConfigJson(const MicroModel& m) {
  const auto& c = m.config();
  const auto& t = m.mtp_config();
  const auto& p = m.phi_config();
  return json{{"model",
               {{"n_layers", c.n_layers},
                {"d_model", c.d_model},
                {"n_heads", c.n_heads},
                {"d_mlp", c.d_mlp},
                {"vocab_size", c.vocab_size},
                {"context_len", c.context_len},
                {"tied_embeddings", c.tied_embeddings},
                {"init_std", c.init_std},
                {"rope_base", c.rope_base}}},
              {"mtp",
               {{"enabled", t.enabled},
                {"n_blocks", t.n_blocks},
                {"access_latest_embedding", t.access_latest_embedding}}},
              {"phi",
               {{"enabled", p.enabled},
                {"placement_layer", p.placement_layer},
                {"z_dim", p.z_dim},
                {"access_latest_embedding", p.access_latest_embedding},
                {"free_bits", p.free_bits}}}};
}

template <typename T>
void PutRaw(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T GetRaw(std::istream& is, std::uint64_t& offset, const char* what) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw FormatError(std::string("truncated checkpoint while reading ") + what, offset);
  }
  offset += sizeof(T);
  return v;
}

std::string GetString(std::istream& is, std::uint64_t& offset, std::uint32_t len, const char* what) {
  std::string s(len, '\0');
  is.read(s.data(), len);
  if (is.gcount() != static_cast<std::streamsize>(len)) {
    throw FormatError(std::string("truncated checkpoint while reading ") + what, offset);
  }
  offset += len;
  return s;
}

}  // namespace

void SaveCheckpoint(const MicroModel& model, std::ostream& out) {
  out.write("MTDM", 4);
  PutRaw<std::uint32_t>(out, 1);
  const std::string cfg = ConfigJson(model).dump();
  PutRaw<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  PutRaw<std::uint32_t>(out, static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& [name, v] : model.parameters()) {
    PutRaw<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    PutRaw<std::uint32_t>(out, static_cast<std::uint32_t>(v.rows()));
    PutRaw<std::uint32_t>(out, static_cast<std::uint32_t>(v.cols()));
    out.write(reinterpret_cast<const char*>(v.value().data()),
              static_cast<std::streamsize>(v.value().size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("checkpoint write failed");
}

MicroModel LoadCheckpoint(std::istream& in) {
  std::uint64_t offset = 0;
  if (GetString(in, offset, 4, "magic") != "MTDM") throw FormatError("bad magic, expected MTDM", 0);
  const auto version = GetRaw<std::uint32_t>(in, offset, "version");
  if (version != 1) throw FormatError("unsupported checkpoint version", 4);
  const auto cfg_len = GetRaw<std::uint32_t>(in, offset, "config length");
  const std::uint64_t cfg_at = offset;
  json j;
  try {
    j = json::parse(GetString(in, offset, cfg_len, "config"));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config block is not JSON: ") + e.what(), cfg_at);
  }
  ModelConfig c;
  MtpConfig t;
  PhiConfig p;
  try {
    const auto& jm = j.at("model");
    c.n_layers = jm.at("n_layers");
    c.d_model = jm.at("d_model");
    c.n_heads = jm.at("n_heads");
    c.d_mlp = jm.at("d_mlp");
    c.vocab_size = jm.at("vocab_size");
    c.context_len = jm.at("context_len");
    c.tied_embeddings = jm.at("tied_embeddings");
    c.init_std = jm.at("init_std");
    c.rope_base = jm.at("rope_base");
    const auto& jt = j.at("mtp");
    t.enabled = jt.at("enabled");
    t.n_blocks = jt.at("n_blocks");
    t.access_latest_embedding = jt.at("access_latest_embedding");
    const auto& jp = j.at("phi");
    p.enabled = jp.at("enabled");
    p.placement_layer = jp.at("placement_layer");
    p.z_dim = jp.at("z_dim");
    p.access_latest_embedding = jp.at("access_latest_embedding");
    p.free_bits = jp.at("free_bits");
  } catch (const json::exception& e) {
    throw FormatError(std::string("config block incomplete: ") + e.what(), cfg_at);
  }
  MicroModel model(c, t, p, 0);
  const auto count = GetRaw<std::uint32_t>(in, offset, "tensor count");
  if (count != model.parameters().size()) {
    throw FormatError("tensor count does not match the configuration", offset - 4);
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint64_t at = offset;
    const auto name_len = GetRaw<std::uint32_t>(in, offset, "tensor name length");
    const std::string name = GetString(in, offset, name_len, "tensor name");
    const auto rows = GetRaw<std::uint32_t>(in, offset, "rows");
    const auto cols = GetRaw<std::uint32_t>(in, offset, "cols");
    Var* v = nullptr;
    try {
      v = &model.param(name);
    } catch (const ConfigError&) {
      throw FormatError("unknown tensor '" + name + "'", at);
    }
    if (v->rows() != rows || v->cols() != cols) {
      throw FormatError("tensor '" + name + "' has the wrong shape", at);
    }
    const std::size_t bytes = static_cast<std::size_t>(rows) * cols * sizeof(double);
    in.read(reinterpret_cast<char*>(v->mutable_value().data()), static_cast<std::streamsize>(bytes));
    if (in.gcount() != static_cast<std::streamsize>(bytes)) {
      throw FormatError("truncated tensor '" + name + "'", offset);
    }
    offset += bytes;
  }
  return model;
}

void SaveCheckpointFile(const MicroModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  SaveCheckpoint(model, os);
}

MicroModel LoadCheckpointFile(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return LoadCheckpoint(is);
}

}  // namespace mtdlab
