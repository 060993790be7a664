#pragma once

// Desk-scale decoder-only transformer (pre-norm, RMSNorm, rotary attention,
// SwiGLU MLP, tied embedding / output head) with an optional one-step MTP
// head and an optional PHi bottleneck layer.
//
// Indexing convention: for an input of n tokens x_0..x_{n-1}, row i of the
// full logits predicts x_{i+1} from x_{<=i}. Row i of the MTP logits also
// predicts x_{i+1}, but from h_{i-1} (plus e_i when the head has access to
// the latest embedding); h_{-1} is a learned initial-state vector.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mtdlab/autograd.hpp"
#include "mtdlab/divergence.hpp"

namespace mtdlab {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int d_mlp = 256;
  int vocab_size = 84;
  int context_len = 256;
  bool tied_embeddings = true;
  double init_std = 0.02;
  double rope_base = 10000.0;

  void Validate() const;
};

struct MtpConfig {
  bool enabled = false;
  int n_blocks = 1;
  bool access_latest_embedding = true;
};

struct PhiConfig {
  bool enabled = false;
  int placement_layer = 3;
  int z_dim = 128;
  bool access_latest_embedding = false;
  double free_bits = 0.02;  // nats per dimension
};

enum class ModelKind { kPlain, kMtpNll, kMtpMtd, kPhi };

const char* ModelKindName(ModelKind kind);
ModelKind ParseModelKind(const std::string& name);

struct TrainConfig {
  int steps = 3000;
  int batch_size = 16;
  int warmup_steps = 500;
  double learning_rate = 3e-4;
  double grad_clip_norm = 1.0;
  std::map<std::string, double> loss_weights{{"nll", 1.0}};
  std::uint64_t seed = 0;
  int log_every = 50;

  void Validate() const;
  // Model kind implied by which auxiliary loss is weighted.
  ModelKind Kind() const;
};

// Transformer block parameters.
struct BlockParams {
  ag::Var attn_norm, wq, wk, wv, wo;
  ag::Var mlp_norm, w_gate, w_up, w_down;
};

class MicroModel {
 public:
  MicroModel(ModelConfig cfg, MtpConfig mtp, PhiConfig phi, std::uint64_t seed);
  MicroModel(const MicroModel&) = delete;
  MicroModel& operator=(const MicroModel&) = delete;
  MicroModel(MicroModel&&) = default;
  MicroModel& operator=(MicroModel&&) = default;

  // Deep copy with independent parameter storage.
  MicroModel Clone() const;

  const ModelConfig& config() const { return cfg_; }
  const MtpConfig& mtp_config() const { return mtp_; }
  const PhiConfig& phi_config() const { return phi_; }
  bool has_mtp() const { return mtp_.enabled; }
  bool has_phi() const { return phi_.enabled; }

  // Named parameters in a fixed order. The output head has no entry of its
  // own: it is `embed`.
  std::vector<std::pair<std::string, ag::Var>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, ag::Var>>& parameters() const { return params_; }
  ag::Var& param(const std::string& name);
  const ag::Var& param(const std::string& name) const;
  std::size_t parameter_count() const;
  void ZeroGrad();

  // Matrix the output head multiplies with (same storage as the embedding).
  const ag::Var& output_head() const { return embed_; }
  const ag::Var& embedding() const { return embed_; }

  const std::vector<BlockParams>& blocks() const { return blocks_; }
  const std::vector<BlockParams>& mtp_blocks() const { return mtp_blocks_; }
  const BlockParams& phi_prior_block() const { return phi_prior_block_; }

 private:
  void Register(const std::string& name, ag::Var v);
  BlockParams MakeBlock(const std::string& prefix, std::mt19937_64& rng);
  ag::Var Normal(Eigen::Index rows, Eigen::Index cols, double std, std::mt19937_64& rng);

  ModelConfig cfg_;
  MtpConfig mtp_;
  PhiConfig phi_;
  std::vector<std::pair<std::string, ag::Var>> params_;
  std::map<std::string, std::size_t> index_;
  ag::Var embed_;
  std::vector<BlockParams> blocks_;
  ag::Var final_norm_;
  std::vector<BlockParams> mtp_blocks_;
  ag::Var mtp_init_, mtp_proj_, mtp_norm_;
  ag::Var phi_enc_w_, phi_enc_b_, phi_dec_w_, phi_dec_b_, phi_z0_, phi_prior_in_;
  BlockParams phi_prior_block_;
  ag::Var phi_prior_norm_, phi_prior_out_w_, phi_prior_out_b_;

  friend struct ModelGraph;
};

// Token ids of B sequences of equal length T, stacked row-major.
struct TokenBatch {
  int batch_size = 0;
  int seq_len = 0;
  std::vector<int> tokens;

  static TokenBatch Single(std::span<const int> tokens);
};

struct FullOutputs {
  ag::Var embeddings;  // [B*T, d]
  ag::Var hiddens;     // [B*T, d], output of the last block
  ag::Var logits;      // [B*T, K]
};

struct PhiOutputs {
  ag::Var logits;    // [B*T, K]
  ag::Var phi_loss;  // [B*T, 1] nats, floored per dimension at free_bits
  ag::Var embeddings;
};

// Graph-building forward passes. Gradients flow when enabled and the inputs
// require them.
FullOutputs ForwardFullGraph(const MicroModel& model, const TokenBatch& batch);
ag::Var ForwardMtpGraph(const MicroModel& model, const ag::Var& hiddens,
                        const ag::Var& embeddings, const ag::Var& head, int seq_len);
PhiOutputs ForwardPhiGraph(const MicroModel& model, const TokenBatch& batch,
                           std::mt19937_64& rng);

// Inference on a single sequence, no graph.
struct FullResult {
  ag::Matrix hiddens;  // [t, d]
  ag::Matrix logits;   // [t, K]
  ag::Matrix embeddings;
};
FullResult ForwardFull(const MicroModel& model, std::span<const int> tokens);
ag::Matrix ForwardMtp(const MicroModel& model, const ag::Matrix& hiddens,
                      const ag::Matrix& embeddings);
std::pair<ag::Matrix, std::vector<double>> ForwardPhi(const MicroModel& model,
                                                      std::span<const int> tokens,
                                                      std::mt19937_64& rng);

// Inputs/targets for a training step. targets[i] < 0 marks an unscored row.
struct TrainBatch {
  TokenBatch inputs;
  std::vector<int> targets;
};

// Builds a batch from whole sequences (and optional per-token loss masks):
// inputs are tokens[0..n-2], targets tokens[1..n-1]; shorter sequences are
// right-padded with `pad_token` and unscored.
TrainBatch MakeTrainBatch(const std::vector<std::vector<int>>& sequences,
                          const std::vector<std::vector<std::uint8_t>>& loss_masks,
                          int pad_token);

struct LossBreakdown {
  ag::Var total;
  double nll = 0.0;
  double aux = 0.0;  // MTP NLL, MTD or PHi loss, depending on kind
};

// Weighted training objective. For kMtpMtd the MTD term reaches only the
// MTP-head parameters (full-model logits, hiddens, embeddings and the shared
// head are detached on that path).
LossBreakdown ComputeLoss(const MicroModel& model, const TrainBatch& batch, ModelKind kind,
                          const std::map<std::string, double>& weights, std::mt19937_64& rng);

struct LossPoint {
  int step;
  std::string name;
  double value;
};

struct TrainResult {
  std::vector<LossPoint> curve;
  int steps_run = 0;
};

// Produces the training sequence at a global sample index; must be
// deterministic.
struct TrainExample {
  std::vector<int> tokens;
  std::vector<std::uint8_t> loss_mask;  // empty = score every target
};
using ExampleSource = std::function<TrainExample(std::uint64_t index)>;

// Adam with linear warm-up from zero, constant rate afterwards, global
// gradient-norm clipping. Throws TrainingDiverged on a non-finite loss.
TrainResult Train(MicroModel& model, const ExampleSource& data, const TrainConfig& cfg,
                  int pad_token, const std::function<void(int, double)>& progress = {});

// One record per position with a successor: record i holds the full and MTP
// logits that predict tokens[i+1].
LogitTrace RecordTrace(const MicroModel& model, std::span<const int> tokens);

void WriteLossCsv(const std::vector<LossPoint>& curve, std::ostream& out);

// MTDM checkpoint (little-endian):
//   "MTDM", version u32 (= 1), config_len u32, config JSON bytes,
//   tensor_count u32, per tensor { name_len u32, name, rows u32, cols u32,
//   rows*cols f64 row-major }.
void SaveCheckpoint(const MicroModel& model, std::ostream& out);
MicroModel LoadCheckpoint(std::istream& in);
void SaveCheckpointFile(const MicroModel& model, const std::string& path);
MicroModel LoadCheckpointFile(const std::string& path);

}  // namespace mtdlab
