#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "doctest.h"
#include "mtdlab/autograd.hpp"

using namespace mtdlab::ag;

namespace {

Matrix RandomMatrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Reduces an op output to a scalar with fixed random weights so every
// output entry contributes a distinct gradient.
Var Reduce(const Var& out, const Matrix& w) {
  return WeightedMean(MatMul(Mul(out, Constant(w)), Constant(Matrix::Ones(out.cols(), 1))),
                      std::vector<double>(out.rows(), 1.0));
}

// Central differences over every entry of every input.
void CheckOp(const std::function<Var(const std::vector<Var>&)>& op, std::vector<Matrix> inputs,
             std::uint64_t seed, double tol = 1e-6) {
  std::mt19937_64 rng(seed);
  std::vector<Var> params;
  for (auto& m : inputs) params.push_back(Parameter(m));
  const Var out = op(params);
  const Matrix w = RandomMatrix(rng, out.rows(), out.cols());
  const Var loss = Reduce(out, w);
  Backward(loss);
  constexpr double h = 1e-6;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Eigen::Index i = 0; i < inputs[p].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Var> vs;
        for (std::size_t q = 0; q < inputs.size(); ++q) {
          Matrix m = inputs[q];
          if (q == p) m.data()[i] += delta;
          vs.push_back(Constant(m));
        }
        NoGradGuard guard;
        return Reduce(op(vs), w).scalar();
      };
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      const double analytic = params[p].grad().size() ? params[p].grad().data()[i] : 0.0;
      CHECK_MESSAGE(std::abs(analytic - numeric) <= tol * std::max(1.0, std::abs(numeric)),
                    "input ", p, " entry ", i, ": ", analytic, " vs ", numeric);
    }
  }
}

}  // namespace

TEST_CASE("op gradients match central differences") {
  std::mt19937_64 rng(1);
  SUBCASE("matmul family") {
    CheckOp([](auto& v) { return MatMul(v[0], v[1]); },
            {RandomMatrix(rng, 3, 4), RandomMatrix(rng, 4, 2)}, 1);
    CheckOp([](auto& v) { return MatMulT(v[0], v[1]); },
            {RandomMatrix(rng, 3, 4), RandomMatrix(rng, 5, 4)}, 2);
  }
  SUBCASE("elementwise") {
    CheckOp([](auto& v) { return Add(v[0], v[1]); },
            {RandomMatrix(rng, 2, 3), RandomMatrix(rng, 2, 3)}, 3);
    CheckOp([](auto& v) { return AddRowVec(v[0], v[1]); },
            {RandomMatrix(rng, 4, 3), RandomMatrix(rng, 1, 3)}, 4);
    CheckOp([](auto& v) { return Mul(v[0], v[1]); },
            {RandomMatrix(rng, 2, 3), RandomMatrix(rng, 2, 3)}, 5);
    CheckOp([](auto& v) { return Scale(v[0], -1.7); }, {RandomMatrix(rng, 2, 3)}, 6);
    CheckOp([](auto& v) { return Exp(v[0]); }, {RandomMatrix(rng, 2, 3)}, 7);
    CheckOp([](auto& v) { return Silu(v[0]); }, {RandomMatrix(rng, 2, 3, 2.0)}, 8);
  }
  SUBCASE("norm, embedding, reshaping") {
    CheckOp([](auto& v) { return RmsNorm(v[0], v[1]); },
            {RandomMatrix(rng, 3, 6), RandomMatrix(rng, 1, 6)}, 9);
    const std::vector<int> ids{2, 0, 2, 1};
    CheckOp([&](auto& v) { return Embedding(v[0], ids); }, {RandomMatrix(rng, 3, 4)}, 10);
    CheckOp([](auto& v) { return ConcatCols(v[0], v[1]); },
            {RandomMatrix(rng, 3, 2), RandomMatrix(rng, 3, 4)}, 11);
    CheckOp([](auto& v) { return SliceCols(v[0], 1, 2); }, {RandomMatrix(rng, 3, 4)}, 12);
    CheckOp([](auto& v) { return ShiftRows(v[0], v[1], 3); },
            {RandomMatrix(rng, 6, 2), RandomMatrix(rng, 1, 2)}, 13);
  }
  SUBCASE("rope and attention") {
    CheckOp([](auto& v) { return Rope(v[0], 2, 3, 100.0); }, {RandomMatrix(rng, 6, 8)}, 14);
    CheckOp([](auto& v) { return CausalAttention(v[0], v[1], v[2], 2, 3); },
            {RandomMatrix(rng, 6, 4), RandomMatrix(rng, 6, 4), RandomMatrix(rng, 6, 4)}, 15);
  }
  SUBCASE("losses") {
    const std::vector<int> targets{1, -1, 3, 0};
    CheckOp([&](auto& v) { return RowNll(v[0], targets); }, {RandomMatrix(rng, 4, 5)}, 16);
    const Matrix target = RandomMatrix(rng, 4, 5);
    CheckOp([&](auto& v) { return RowKl(target, v[0]); }, {RandomMatrix(rng, 4, 5)}, 17);
    CheckOp([](auto& v) { return GaussianKlRows(v[0], v[1], v[2], v[3], 0.0); },
            {RandomMatrix(rng, 3, 4), RandomMatrix(rng, 3, 4, 0.5), RandomMatrix(rng, 3, 4),
             RandomMatrix(rng, 3, 4, 0.5)},
            18);
  }
}

TEST_CASE("causal attention masks the future exactly") {
  std::mt19937_64 rng(2);
  Matrix q = RandomMatrix(rng, 8, 4);
  Matrix k = RandomMatrix(rng, 8, 4);
  Matrix v = RandomMatrix(rng, 8, 4);
  NoGradGuard guard;
  const Matrix a = CausalAttention(Constant(q), Constant(k), Constant(v), 2, 4).value();
  k.row(3) *= 5.0;
  v.row(3).setConstant(100.0);
  const Matrix b = CausalAttention(Constant(q), Constant(k), Constant(v), 2, 4).value();
  for (int r : {0, 1, 2, 4, 5, 6, 7}) CHECK((a.row(r).array() == b.row(r).array()).all());
  CHECK_FALSE((a.row(3).array() == b.row(3).array()).all());
}

TEST_CASE("detach and no-grad stop gradient flow") {
  const Var p = Parameter(Matrix::Constant(1, 1, 2.0));
  const Var loss = Add(Mul(p, p), Mul(Detach(p), p));
  Backward(loss);
  CHECK(p.grad()(0, 0) == doctest::Approx(6.0));
  {
    NoGradGuard guard;
    CHECK_FALSE(GradEnabled());
    CHECK_FALSE(Mul(p, p).requires_grad());
  }
  CHECK(GradEnabled());
}

TEST_CASE("gaussian kl closed forms") {
  NoGradGuard guard;
  SUBCASE("identical posterior and prior hit the floor") {
    const Matrix mu = Matrix::Constant(2, 3, 0.4);
    const Matrix lv = Matrix::Constant(2, 3, -0.3);
    const Var kl = GaussianKlRows(Constant(mu), Constant(lv), Constant(mu), Constant(lv), 0.02);
    CHECK(kl.value()(0, 0) == doctest::Approx(0.02));
    CHECK(kl.value()(1, 0) == doctest::Approx(0.02));
  }
  SUBCASE("unit variance mean gap delta gives delta^2 / 2") {
    const double delta = 0.7;
    const Matrix zeros = Matrix::Zero(1, 5);
    const Var kl = GaussianKlRows(Constant(Matrix::Constant(1, 5, delta)), Constant(zeros),
                                  Constant(zeros), Constant(zeros), 0.0);
    CHECK(kl.value()(0, 0) == doctest::Approx(delta * delta / 2).epsilon(1e-14));
  }
  SUBCASE("random 4-dim pair matches the formula evaluated independently") {
    std::mt19937_64 rng(3);
    const Matrix mq = RandomMatrix(rng, 1, 4);
    const Matrix lq = RandomMatrix(rng, 1, 4);
    const Matrix mp = RandomMatrix(rng, 1, 4);
    const Matrix lp = RandomMatrix(rng, 1, 4);
    double expected = 0.0;
    for (int j = 0; j < 4; ++j) {
      const double vq = std::exp(lq(0, j));
      const double vp = std::exp(lp(0, j));
      const double d = mq(0, j) - mp(0, j);
      // KL(N(mq, vq) || N(mp, vp)) from the log-density ratio.
      expected += 0.5 * (std::log(vp / vq) + (vq + d * d) / vp - 1.0);
    }
    expected /= 4.0;
    const Var kl = GaussianKlRows(Constant(mq), Constant(lq), Constant(mp), Constant(lp), 0.0);
    CHECK(kl.value()(0, 0) == doctest::Approx(expected).epsilon(1e-13));
  }
}
