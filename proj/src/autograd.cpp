#include "mtdlab/autograd.hpp"

#include <cmath>
#include <unordered_set>

#include "mtdlab/errors.hpp"

namespace mtdlab::ag {

namespace {

thread_local bool g_grad_enabled = true;

Var MakeResult(Matrix value, std::initializer_list<Var> inputs,
               std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    for (const Var& in : inputs) {
      if (in.requires_grad()) node->requires_grad = true;
    }
    if (node->requires_grad) {
      node->inputs.reserve(inputs.size());
      for (const Var& in : inputs) node->inputs.push_back(in.shared());
      node->backward = std::move(backward);
    }
  }
  return Var(std::move(node));
}

void CheckSameShape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InputError(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

void Node::AccumulateGrad(const Matrix& g) { AccumulateGradExpr(g); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool GradEnabled() { return g_grad_enabled; }

Var Constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Parameter(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var Detach(const Var& v) {
  auto node = std::make_shared<Node>();
  node->value = v.value();
  return Var(std::move(node));
}

void Backward(const Var& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw InputError("Backward needs a 1x1 loss");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->AccumulateGrad(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
  // Intermediate gradients are not needed after the sweep.
  for (Node* n : order) {
    if (n->backward) n->grad.resize(0, 0);
  }
}

Var MatMul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw InputError("MatMul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  return MakeResult(std::move(out), {a, b}, [](Node& self) {
    Node& a = *self.inputs[0];
    Node& b = *self.inputs[1];
    if (a.requires_grad) a.AccumulateGradExpr(self.grad * b.value.transpose());
    if (b.requires_grad) b.AccumulateGradExpr(a.value.transpose() * self.grad);
  });
}

Var MatMulT(const Var& a, const Var& w) {
  if (a.cols() != w.cols()) throw InputError("MatMulT: inner dimensions differ");
  Matrix out = a.value() * w.value().transpose();
  return MakeResult(std::move(out), {a, w}, [](Node& self) {
    Node& a = *self.inputs[0];
    Node& w = *self.inputs[1];
    if (a.requires_grad) a.AccumulateGradExpr(self.grad * w.value);
    if (w.requires_grad) w.AccumulateGradExpr(self.grad.transpose() * a.value);
  });
}

Var Add(const Var& a, const Var& b) {
  CheckSameShape(a, b, "Add");
  Matrix out = a.value() + b.value();
  return MakeResult(std::move(out), {a, b}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (in->requires_grad) in->AccumulateGrad(self.grad);
    }
  });
}

Var AddRowVec(const Var& x, const Var& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) throw InputError("AddRowVec: bias shape");
  Matrix out = x.value().rowwise() + b.value().row(0);
  return MakeResult(std::move(out), {x, b}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& b = *self.inputs[1];
    if (x.requires_grad) x.AccumulateGrad(self.grad);
    if (b.requires_grad) b.AccumulateGradExpr(self.grad.colwise().sum());
  });
}

Var Mul(const Var& a, const Var& b) {
  CheckSameShape(a, b, "Mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return MakeResult(std::move(out), {a, b}, [](Node& self) {
    Node& a = *self.inputs[0];
    Node& b = *self.inputs[1];
    if (a.requires_grad) a.AccumulateGradExpr(self.grad.cwiseProduct(b.value));
    if (b.requires_grad) b.AccumulateGradExpr(self.grad.cwiseProduct(a.value));
  });
}

Var Scale(const Var& a, double s) {
  Matrix out = a.value() * s;
  return MakeResult(std::move(out), {a}, [s](Node& self) {
    self.inputs[0]->AccumulateGradExpr(self.grad * s);
  });
}

Var Exp(const Var& a) {
  Matrix out = a.value().array().exp().matrix();
  return MakeResult(std::move(out), {a}, [](Node& self) {
    self.inputs[0]->AccumulateGradExpr(self.grad.cwiseProduct(self.value));
  });
}

Var Silu(const Var& a) {
  const Matrix sig = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  Matrix out = a.value().cwiseProduct(sig);
  return MakeResult(std::move(out), {a}, [sig](Node& self) {
    Node& a = *self.inputs[0];
    const auto x = a.value.array();
    const auto s = sig.array();
    a.AccumulateGradExpr((self.grad.array() * s * (1.0 + x * (1.0 - s))).matrix());
  });
}

Var RmsNorm(const Var& x, const Var& gain, double eps) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) throw InputError("RmsNorm: gain shape");
  const Eigen::Index d = x.cols();
  Eigen::VectorXd inv(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    inv(i) = 1.0 / std::sqrt(x.value().row(i).squaredNorm() / static_cast<double>(d) + eps);
  }
  Matrix normed = inv.asDiagonal() * x.value();
  Matrix out = normed.array().rowwise() * gain.value().row(0).array();
  return MakeResult(std::move(out), {x, gain}, [inv, normed](Node& self) {
    Node& x = *self.inputs[0];
    Node& g = *self.inputs[1];
    const Eigen::Index d = x.value.cols();
    if (g.requires_grad) g.AccumulateGradExpr(self.grad.cwiseProduct(normed).colwise().sum());
    if (x.requires_grad) {
      Matrix dn = self.grad.array().rowwise() * g.value.row(0).array();
      Matrix dx(x.value.rows(), d);
      for (Eigen::Index i = 0; i < dx.rows(); ++i) {
        const double dot = dn.row(i).dot(normed.row(i)) / static_cast<double>(d);
        dx.row(i) = inv(i) * (dn.row(i) - normed.row(i) * dot);
      }
      x.AccumulateGrad(dx);
    }
  });
}

Var Embedding(const Var& table, std::span<const int> ids) {
  std::vector<int> idx(ids.begin(), ids.end());
  Matrix out(static_cast<Eigen::Index>(idx.size()), table.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= table.rows()) throw InputError("Embedding: id out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(idx[i]);
  }
  return MakeResult(std::move(out), {table}, [idx](Node& self) {
    Node& t = *self.inputs[0];
    if (t.grad.size() == 0) t.grad = Matrix::Zero(t.value.rows(), t.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      t.grad.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    }
  });
}

Var ConcatCols(const Var& a, const Var& b) {
  if (a.rows() != b.rows()) throw InputError("ConcatCols: row counts differ");
  Matrix out(a.rows(), a.cols() + b.cols());
  out.leftCols(a.cols()) = a.value();
  out.rightCols(b.cols()) = b.value();
  return MakeResult(std::move(out), {a, b}, [](Node& self) {
    Node& a = *self.inputs[0];
    Node& b = *self.inputs[1];
    if (a.requires_grad) a.AccumulateGradExpr(self.grad.leftCols(a.value.cols()));
    if (b.requires_grad) b.AccumulateGradExpr(self.grad.rightCols(b.value.cols()));
  });
}

Var SliceCols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.cols()) throw InputError("SliceCols: out of range");
  Matrix out = a.value().middleCols(start, count);
  return MakeResult(std::move(out), {a}, [start, count](Node& self) {
    Node& a = *self.inputs[0];
    if (a.grad.size() == 0) a.grad = Matrix::Zero(a.value.rows(), a.value.cols());
    a.grad.middleCols(start, count) += self.grad;
  });
}

Var ShiftRows(const Var& x, const Var& init, int seq_len) {
  if (init.rows() != 1 || init.cols() != x.cols()) throw InputError("ShiftRows: init shape");
  if (seq_len <= 0 || x.rows() % seq_len != 0) throw InputError("ShiftRows: bad seq_len");
  const Eigen::Index n_seq = x.rows() / seq_len;
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index s = 0; s < n_seq; ++s) {
    const Eigen::Index base = s * seq_len;
    out.row(base) = init.value().row(0);
    if (seq_len > 1) out.middleRows(base + 1, seq_len - 1) = x.value().middleRows(base, seq_len - 1);
  }
  return MakeResult(std::move(out), {x, init}, [seq_len, n_seq](Node& self) {
    Node& x = *self.inputs[0];
    Node& init = *self.inputs[1];
    if (x.requires_grad) {
      Matrix gx = Matrix::Zero(x.value.rows(), x.value.cols());
      for (Eigen::Index s = 0; s < n_seq; ++s) {
        const Eigen::Index base = s * seq_len;
        if (seq_len > 1) gx.middleRows(base, seq_len - 1) = self.grad.middleRows(base + 1, seq_len - 1);
      }
      x.AccumulateGrad(gx);
    }
    if (init.requires_grad) {
      Matrix gi = Matrix::Zero(1, init.value.cols());
      for (Eigen::Index s = 0; s < n_seq; ++s) gi += self.grad.row(s * seq_len);
      init.AccumulateGrad(gi);
    }
  });
}

namespace {

struct RopeTable {
  Matrix cos;  // [seq_len, half]
  Matrix sin;
};

RopeTable MakeRopeTable(int seq_len, int head_dim, double base) {
  const int half = head_dim / 2;
  RopeTable t{Matrix(seq_len, half), Matrix(seq_len, half)};
  for (int pos = 0; pos < seq_len; ++pos) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * i / static_cast<double>(head_dim));
      t.cos(pos, i) = std::cos(pos * freq);
      t.sin(pos, i) = std::sin(pos * freq);
    }
  }
  return t;
}

// Rotates pairs (2i, 2i+1) of every head; sign = -1 applies the inverse.
void ApplyRope(const Matrix& in, Matrix& out, const RopeTable& t, int n_heads, int seq_len,
               double sign) {
  const Eigen::Index head_dim = in.cols() / n_heads;
  const Eigen::Index half = head_dim / 2;
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    const Eigen::Index pos = r % seq_len;
    for (int h = 0; h < n_heads; ++h) {
      const Eigen::Index off = h * head_dim;
      for (Eigen::Index i = 0; i < half; ++i) {
        const double c = t.cos(pos, i);
        const double s = sign * t.sin(pos, i);
        const double a = in(r, off + 2 * i);
        const double b = in(r, off + 2 * i + 1);
        out(r, off + 2 * i) = a * c - b * s;
        out(r, off + 2 * i + 1) = a * s + b * c;
      }
    }
  }
}

}  // namespace

Var Rope(const Var& x, int n_heads, int seq_len, double base) {
  if (x.cols() % n_heads != 0 || (x.cols() / n_heads) % 2 != 0) {
    throw InputError("Rope: head dim must be even");
  }
  auto table = std::make_shared<RopeTable>(
      MakeRopeTable(seq_len, static_cast<int>(x.cols() / n_heads), base));
  Matrix out(x.rows(), x.cols());
  ApplyRope(x.value(), out, *table, n_heads, seq_len, 1.0);
  return MakeResult(std::move(out), {x}, [table, n_heads, seq_len](Node& self) {
    Matrix g(self.grad.rows(), self.grad.cols());
    ApplyRope(self.grad, g, *table, n_heads, seq_len, -1.0);
    self.inputs[0]->AccumulateGrad(g);
  });
}

Var CausalAttention(const Var& q, const Var& k, const Var& v, int n_heads, int seq_len) {
  CheckSameShape(q, k, "CausalAttention");
  CheckSameShape(q, v, "CausalAttention");
  if (q.cols() % n_heads != 0) throw InputError("CausalAttention: heads do not divide width");
  if (seq_len <= 0 || q.rows() % seq_len != 0) throw InputError("CausalAttention: bad seq_len");
  const Eigen::Index n_seq = q.rows() / seq_len;
  const Eigen::Index dh = q.cols() / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // One probability matrix per (sequence, head).
  auto probs = std::make_shared<std::vector<Matrix>>(n_seq * n_heads);
  Matrix out(q.rows(), q.cols());
  for (Eigen::Index s = 0; s < n_seq; ++s) {
    const Eigen::Index r0 = s * seq_len;
    for (int h = 0; h < n_heads; ++h) {
      const Eigen::Index c0 = h * dh;
      const auto qs = q.value().block(r0, c0, seq_len, dh);
      const auto ks = k.value().block(r0, c0, seq_len, dh);
      const auto vs = v.value().block(r0, c0, seq_len, dh);
      Matrix p = (qs * ks.transpose()) * scale;
      for (Eigen::Index i = 0; i < seq_len; ++i) {
        double mx = p(i, 0);
        for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, p(i, j));
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          sum += p(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) p(i, j) /= sum;
        for (Eigen::Index j = i + 1; j < seq_len; ++j) p(i, j) = 0.0;
      }
      out.block(r0, c0, seq_len, dh).noalias() = p * vs;
      (*probs)[s * n_heads + h] = std::move(p);
    }
  }
  return MakeResult(std::move(out), {q, k, v}, [probs, n_heads, seq_len, n_seq, dh, scale](Node& self) {
    Node& q = *self.inputs[0];
    Node& k = *self.inputs[1];
    Node& v = *self.inputs[2];
    Matrix gq = Matrix::Zero(q.value.rows(), q.value.cols());
    Matrix gk = Matrix::Zero(k.value.rows(), k.value.cols());
    Matrix gv = Matrix::Zero(v.value.rows(), v.value.cols());
    for (Eigen::Index s = 0; s < n_seq; ++s) {
      const Eigen::Index r0 = s * seq_len;
      for (int h = 0; h < n_heads; ++h) {
        const Eigen::Index c0 = h * dh;
        const Matrix& p = (*probs)[s * n_heads + h];
        const auto go = self.grad.block(r0, c0, seq_len, dh);
        const auto qs = q.value.block(r0, c0, seq_len, dh);
        const auto ks = k.value.block(r0, c0, seq_len, dh);
        const auto vs = v.value.block(r0, c0, seq_len, dh);
        gv.block(r0, c0, seq_len, dh).noalias() = p.transpose() * go;
        Matrix dp = go * vs.transpose();
        // Softmax Jacobian, row by row.
        for (Eigen::Index i = 0; i < seq_len; ++i) {
          const double dot = dp.row(i).dot(p.row(i));
          dp.row(i) = p.row(i).cwiseProduct(dp.row(i).array().matrix() -
                                            Eigen::RowVectorXd::Constant(seq_len, dot));
        }
        gq.block(r0, c0, seq_len, dh).noalias() = (dp * ks) * scale;
        gk.block(r0, c0, seq_len, dh).noalias() = (dp.transpose() * qs) * scale;
      }
    }
    if (q.requires_grad) q.AccumulateGrad(gq);
    if (k.requires_grad) k.AccumulateGrad(gk);
    if (v.requires_grad) v.AccumulateGrad(gv);
  });
}

namespace {

// Row-wise softmax and log-sum-exp.
void RowSoftmax(const Matrix& logits, Matrix& probs, Eigen::VectorXd& lse) {
  probs.resize(logits.rows(), logits.cols());
  lse.resize(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    probs.row(i) = (logits.row(i).array() - mx).exp().matrix();
    const double sum = probs.row(i).sum();
    probs.row(i) /= sum;
    lse(i) = mx + std::log(sum);
  }
}

}  // namespace

Var RowNll(const Var& logits, std::span<const int> targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw InputError("RowNll: one target per row required");
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  auto probs = std::make_shared<Matrix>();
  Eigen::VectorXd lse;
  RowSoftmax(logits.value(), *probs, lse);
  Matrix out = Matrix::Zero(logits.rows(), 1);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int t = tgt[static_cast<std::size_t>(i)];
    if (t < 0) continue;
    if (t >= logits.cols()) throw InputError("RowNll: target out of range");
    out(i, 0) = lse(i) - logits.value()(i, t);
  }
  return MakeResult(std::move(out), {logits}, [probs, tgt](Node& self) {
    Matrix g = *probs;
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const int t = tgt[static_cast<std::size_t>(i)];
      if (t < 0) {
        g.row(i).setZero();
        continue;
      }
      g(i, t) -= 1.0;
      g.row(i) *= self.grad(i, 0);
    }
    self.inputs[0]->AccumulateGrad(g);
  });
}

Var RowKl(const Matrix& target_logits, const Var& logits) {
  if (target_logits.rows() != logits.rows() || target_logits.cols() != logits.cols()) {
    throw InputError("RowKl: shape mismatch");
  }
  Matrix p;
  Eigen::VectorXd lse_p;
  RowSoftmax(target_logits, p, lse_p);
  auto q = std::make_shared<Matrix>();
  Eigen::VectorXd lse_q;
  RowSoftmax(logits.value(), *q, lse_q);
  Matrix out(logits.rows(), 1);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double kl = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      if (p(i, j) <= 0.0) continue;
      const double logp = target_logits(i, j) - lse_p(i);
      const double logq = logits.value()(i, j) - lse_q(i);
      kl += p(i, j) * (logp - logq);
    }
    out(i, 0) = kl;
  }
  auto pp = std::make_shared<Matrix>(std::move(p));
  return MakeResult(std::move(out), {logits}, [pp, q](Node& self) {
    Matrix g = *q - *pp;
    for (Eigen::Index i = 0; i < g.rows(); ++i) g.row(i) *= self.grad(i, 0);
    self.inputs[0]->AccumulateGrad(g);
  });
}

Var GaussianKlRows(const Var& mu_q, const Var& logvar_q, const Var& mu_p, const Var& logvar_p,
                   double floor) {
  CheckSameShape(mu_q, logvar_q, "GaussianKlRows");
  CheckSameShape(mu_q, mu_p, "GaussianKlRows");
  CheckSameShape(mu_q, logvar_p, "GaussianKlRows");
  const auto mq = mu_q.value().array();
  const auto lq = logvar_q.value().array();
  const auto mp = mu_p.value().array();
  const auto lp = logvar_p.value().array();
  const Eigen::ArrayXXd diff = mq - mp;
  const Eigen::ArrayXXd inv_vp = (-lp).exp();
  const Eigen::ArrayXXd kl = 0.5 * (lp - lq + (lq.exp() + diff.square()) * inv_vp - 1.0);
  const Eigen::Index d = mu_q.cols();
  Matrix out(mu_q.rows(), 1);
  auto active = std::make_shared<Eigen::ArrayXXd>((kl > floor).cast<double>());
  for (Eigen::Index i = 0; i < kl.rows(); ++i) {
    out(i, 0) = kl.row(i).max(floor).sum() / static_cast<double>(d);
  }
  auto cache = std::make_shared<std::array<Eigen::ArrayXXd, 3>>(
      std::array<Eigen::ArrayXXd, 3>{diff, inv_vp, (lq - lp).exp()});
  return MakeResult(std::move(out), {mu_q, logvar_q, mu_p, logvar_p}, [active, cache, d](Node& self) {
    const auto& [diff, inv_vp, ratio] = *cache;
    // Upstream gradient per row, spread over the unfloored dims.
    Eigen::ArrayXXd w = *active;
    for (Eigen::Index i = 0; i < w.rows(); ++i) w.row(i) *= self.grad(i, 0) / static_cast<double>(d);
    const Eigen::ArrayXXd d_mq = diff * inv_vp;
    const Eigen::ArrayXXd d_lq = 0.5 * (ratio - 1.0);
    // exp(lq) * inv_vp == ratio
    const Eigen::ArrayXXd d_lp = 0.5 * (1.0 - ratio - diff.square() * inv_vp);
    if (self.inputs[0]->requires_grad) self.inputs[0]->AccumulateGrad((w * d_mq).matrix());
    if (self.inputs[1]->requires_grad) self.inputs[1]->AccumulateGrad((w * d_lq).matrix());
    if (self.inputs[2]->requires_grad) self.inputs[2]->AccumulateGrad((-(w * d_mq)).matrix());
    if (self.inputs[3]->requires_grad) self.inputs[3]->AccumulateGrad((w * d_lp).matrix());
  });
}

Var WeightedMean(const Var& x, std::span<const double> weights) {
  if (x.cols() != 1 || static_cast<Eigen::Index>(weights.size()) != x.rows()) {
    throw InputError("WeightedMean: expects a column vector and one weight per row");
  }
  Eigen::VectorXd w(x.rows());
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    w(i) = weights[static_cast<std::size_t>(i)];
    total += w(i);
  }
  if (!(total > 0.0)) throw InputError("WeightedMean: weights sum to zero");
  w /= total;
  Matrix out(1, 1);
  out(0, 0) = x.value().col(0).dot(w);
  return MakeResult(std::move(out), {x}, [w](Node& self) {
    self.inputs[0]->AccumulateGrad(w * self.grad(0, 0));
  });
}

}  // namespace mtdlab::ag
