#pragma once

// Minimal tape-free reverse-mode autodiff over dense row-major matrices.
// Each op returns a Var holding its value and, when gradients are enabled, a
// closure that pushes the output gradient into its inputs. Backward() walks
// the graph in reverse topological order from a 1x1 loss.

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace mtdlab::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void AccumulateGrad(const Matrix& g);
  template <typename Expr>
  void AccumulateGradExpr(const Expr& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  void ZeroGrad() { node_->grad.resize(0, 0); }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool GradEnabled();

Var Constant(Matrix value);
Var Parameter(Matrix value);
// Same value, cut from the graph.
Var Detach(const Var& v);

void Backward(const Var& loss);

Var MatMul(const Var& a, const Var& b);
// a * w^T, the layout of a linear layer with weight [out, in].
Var MatMulT(const Var& a, const Var& w);
Var Add(const Var& a, const Var& b);
// x + b broadcast over rows; b is [1, cols].
Var AddRowVec(const Var& x, const Var& b);
Var Mul(const Var& a, const Var& b);
Var Scale(const Var& a, double s);
Var Exp(const Var& a);
Var Silu(const Var& a);
Var RmsNorm(const Var& x, const Var& gain, double eps = 1e-6);
Var Embedding(const Var& table, std::span<const int> ids);
Var ConcatCols(const Var& a, const Var& b);
Var SliceCols(const Var& a, Eigen::Index start, Eigen::Index count);

// Rows are seq_len-long sequences stacked. Row t of each sequence takes row
// t-1; row 0 takes `init` ([1, cols]).
Var ShiftRows(const Var& x, const Var& init, int seq_len);

// Rotary position embedding applied per head; position = row % seq_len.
Var Rope(const Var& x, int n_heads, int seq_len, double base = 10000.0);

// Multi-head causal softmax attention over stacked sequences of seq_len rows.
Var CausalAttention(const Var& q, const Var& k, const Var& v, int n_heads, int seq_len);

// Per-row -log softmax(logits)[target]; rows with target < 0 give 0. [n, 1].
Var RowNll(const Var& logits, std::span<const int> targets);

// Per-row KL(softmax(target) || softmax(logits)); `target_logits` is treated
// as a constant. [n, 1].
Var RowKl(const Matrix& target_logits, const Var& logits);

// Per-row mean over dims of max(KL(N(mu_q, e^lv_q) || N(mu_p, e^lv_p)), floor).
Var GaussianKlRows(const Var& mu_q, const Var& logvar_q, const Var& mu_p, const Var& logvar_p,
                   double floor);

// sum_i w_i x_i / sum_i w_i for a column vector x. [1, 1].
Var WeightedMean(const Var& x, std::span<const double> weights);

}  // namespace mtdlab::ag
