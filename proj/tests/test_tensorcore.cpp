#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "gradcheck.hpp"
#include "mlcl/tensorcore.hpp"

using namespace mlcl;
using namespace mlcl::tc;

namespace {

Matrix random_matrix(Index r, Index c, Rng& rng, double a = 0.5) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-a, a);
  return m;
}

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Scalar-loop GRU written directly from the gate equations.
Vector gru_scalar(const GruCell& c, const Vector& x, const Vector& h) {
  const Index H = c.hidden(), I = c.input();
  Vector out(H), z(H), r(H);
  for (Index i = 0; i < H; ++i) {
    double az = c.b_z(i), ar = c.b_r(i);
    for (Index j = 0; j < I; ++j) {
      az += c.W_z(i, j) * x(j);
      ar += c.W_r(i, j) * x(j);
    }
    for (Index j = 0; j < H; ++j) {
      az += c.U_z(i, j) * h(j);
      ar += c.U_r(i, j) * h(j);
    }
    z(i) = sig(az);
    r(i) = sig(ar);
  }
  for (Index i = 0; i < H; ++i) {
    double ah = c.b_h(i);
    for (Index j = 0; j < I; ++j) ah += c.W_h(i, j) * x(j);
    for (Index j = 0; j < H; ++j) ah += c.U_h(i, j) * r(j) * h(j);
    out(i) = (1 - z(i)) * h(i) + z(i) * std::tanh(ah);
  }
  return out;
}

}  // namespace

TEST(Dense, IdentityAndHandArithmetic) {
  DenseLayer id{Matrix::Identity(2, 2), Vector::Zero(2)};
  Vector x(2);
  x << 3, -1;
  EXPECT_EQ(dense_forward(id, x), x);
  DenseLayer l{Matrix(2, 2), Vector(2)};
  l.W << 1, 2, 0, 1;
  l.b << 1, 1;
  Vector one = Vector::Ones(2), expect(2);
  expect << 4, 2;
  EXPECT_EQ(dense_forward(l, one), expect);
}

TEST(Dense, MatchesLoopOracleAndChecksShape) {
  Rng rng(1);
  DenseLayer l{random_matrix(3, 2, rng), random_matrix(3, 1, rng).col(0)};
  Vector x = random_matrix(2, 1, rng).col(0);
  const Vector y = dense_forward(l, x);
  for (Index i = 0; i < 3; ++i) {
    double s = l.b(i);
    for (Index j = 0; j < 2; ++j) s += l.W(i, j) * x(j);
    EXPECT_NEAR(y(i), s, 1e-12);
  }
  EXPECT_THROW(dense_forward(l, Vector::Zero(3)), ShapeError);
}

TEST(Relu, Examples) {
  Vector x(3);
  x << -1, 0, 2;
  Vector e(3);
  e << 0, 0, 2;
  EXPECT_EQ(relu(x), e);
  EXPECT_EQ(relu(-Vector::Ones(4)), Vector::Zero(4));
  Rng rng(2);
  const Vector r = random_matrix(20, 1, rng).col(0);
  EXPECT_EQ(relu(relu(r)), relu(r));
}

TEST(Gru, ZeroWeightsClosedForm) {
  const auto c = GruCell::zeros(3, 4);
  Vector v(4);
  v << 1, -2, 3, 0.5;
  EXPECT_EQ(gru_forward(c, Vector::Ones(3), v), 0.5 * v);
  EXPECT_EQ(gru_forward(c, Vector::Ones(3), Vector::Zero(4)), Vector::Zero(4));
}

TEST(Gru, MatchesScalarReference) {
  Rng rng(3);
  ParamSet ps;
  add_gru(ps, "g", 5, 4, rng);
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i] = random_matrix(ps[i].rows(), ps[i].cols(), rng);
  const auto c = gru_view(ps, "g");
  for (int trial = 0; trial < 10; ++trial) {
    const Vector x = random_matrix(5, 1, rng, 1.0).col(0);
    const Vector h = random_matrix(4, 1, rng, 1.0).col(0);
    const Vector a = gru_forward(c, x, h), b = gru_scalar(c, x, h);
    for (Index i = 0; i < 4; ++i) EXPECT_NEAR(a(i), b(i), 1e-12);
  }
  EXPECT_THROW(gru_forward(c, Vector::Zero(4), Vector::Zero(4)), ShapeError);
}

TEST(SumPool, Examples) {
  Vector a(2), b(2), e(2);
  a << 1, 2;
  b << 3, 4;
  e << 4, 6;
  EXPECT_EQ(sum_pool({a, b}, 2), e);
  EXPECT_EQ(sum_pool({b, a}, 2), e);
  EXPECT_EQ(sum_pool({}, 3), Vector::Zero(3));
  EXPECT_THROW(sum_pool({a, Vector::Zero(3)}, 2), ShapeError);
}

TEST(Backward, DenseBiasGradientIsInput) {
  ParamSet ps;
  ps.add("W", Matrix::Identity(3, 3));
  ps.add("b", Matrix::Zero(3, 1));
  Matrix x(1, 3);
  x << 0.3, -1.2, 2.0;
  Tape t;
  const Var y = t.linear(t.constant(x), t.param(ps, "W"), t.param(ps, "b"));
  const Var loss = t.scale(t.sum(t.mul(y, y)), 0.5);
  Gradients g(ps.size());
  t.backward(loss, &g);
  for (Index i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g[1](i, 0), x(0, i));
}

TEST(Backward, SumPoolFanOut) {
  Tape t;
  Rng rng(4);
  const Var a = t.input(random_matrix(4, 3, rng));
  const Var pooled = t.segment_sum(a, {0, 0, 0, 0}, 1);
  Matrix w = random_matrix(1, 3, rng);
  const Var loss = t.sum(t.mul(pooled, t.constant(w)));
  t.backward(loss);
  for (Index r = 0; r < 4; ++r)
    for (Index c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(t.grad(a)(r, c), w(0, c));
}

TEST(Backward, RejectsNonScalarAndUnrecordedTape) {
  Tape t;
  const Var a = t.input(Matrix::Ones(2, 2));
  EXPECT_THROW(t.backward(a), ShapeError);
  Tape off(false);
  const Var b = off.sum(off.input(Matrix::Ones(2, 2)));
  EXPECT_THROW(off.backward(b), Error);
}

TEST(Backward, NonFiniteForwardRaises) {
  Tape t;
  Matrix m = Matrix::Ones(1, 1);
  m(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(t.constant(m), NumericError);
  const Var big = t.constant(Matrix::Constant(1, 1, 1e308));
  EXPECT_THROW(t.scale(big, 10.0), NumericError);
}

TEST(Backward, ShapeMismatchRaises) {
  Tape t;
  EXPECT_THROW(t.add(t.constant(Matrix::Ones(2, 2)), t.constant(Matrix::Ones(2, 3))), ShapeError);
  EXPECT_THROW(t.matmul_nt(t.constant(Matrix::Ones(2, 2)), t.constant(Matrix::Ones(2, 3))), ShapeError);
}

// Every tape op in one composed graph: linear, scaled-bias linear, relu,
// sigmoid, tanh, mul, one_minus, concat, gather, segment sums, sparse
// aggregation and the weighted distance loss.
TEST(GradCheck, ComposedOps) {
  Rng rng(5);
  ParamSet ps;
  ps.add("W1", random_matrix(4, 3, rng));
  ps.add("b1", random_matrix(4, 1, rng));
  ps.add("W2", random_matrix(2, 7, rng));
  ps.add("b2", random_matrix(2, 1, rng));
  ps.add("M", random_matrix(3, 3, rng));
  const Matrix x = random_matrix(5, 3, rng, 1.0);
  const Matrix target = random_matrix(5, 2, rng, 1.0);
  Vector counts(5);
  counts << 1, 2, 0, 3, 1;
  Vector weights = Vector::Constant(5, 0.2);
  auto loss = [&](Tape& t, const ParamSet& p) {
    const Var xin = t.constant(x);
    const Var h = t.relu(t.linear(xin, t.param(p, "W1"), t.param(p, "b1")));
    const Var s = t.sigmoid(h);
    const Var th = t.tanh(t.matmul_nt(xin, t.param(p, "M")));
    const Var gated = t.mul(t.one_minus(s), t.gather_rows(t.concat_cols(th, t.constant(Matrix::Ones(5, 1))), {4, 3, -1, 1, 0}));
    const Var agg = t.aggregate_rows(gated, {{0, 1, 0.5}, {1, 0, 0.25}, {1, 2, 1.0}, {4, 4, -0.7}, {3, 3, 1.0}, {2, 0, 0.3}}, 5);
    const Var seg = t.segment_sum(agg, {0, 1, 1, 2, 4}, 5);
    const Var feat = t.concat_cols(t.add(seg, t.sub(agg, t.scale(gated, 0.1))), th);
    const Var out = t.linear_scaled_bias(feat, t.param(p, "W2"), t.param(p, "b2"), counts);
    return t.weighted_distance_sum(out, target, 2.0, weights);
  };
  const auto r = testutil::grad_check(ps, loss);
  EXPECT_GT(r.checked, 40u);
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(GradCheck, GruUnrolledThroughTime) {
  Rng rng(6);
  ParamSet ps;
  add_gru(ps, "g", 3, 4, rng);
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i] = random_matrix(ps[i].rows(), ps[i].cols(), rng);
  std::vector<Matrix> xs;
  for (int k = 0; k < 4; ++k) xs.push_back(random_matrix(2, 3, rng, 1.0));
  auto loss = [&](Tape& t, const ParamSet& p) {
    auto P = [&](const char* n) { return t.param(p, std::string("g.") + n); };
    Var h = t.constant(Matrix::Zero(2, 4));
    for (const auto& xm : xs) {
      const Var x = t.constant(xm);
      const Var z = t.sigmoid(t.add(t.linear(x, P("W_z"), P("b_z")), t.matmul_nt(h, P("U_z"))));
      const Var r = t.sigmoid(t.add(t.linear(x, P("W_r"), P("b_r")), t.matmul_nt(h, P("U_r"))));
      const Var c = t.tanh(t.add(t.linear(x, P("W_h"), P("b_h")), t.matmul_nt(t.mul(r, h), P("U_h"))));
      h = t.add(t.mul(t.one_minus(z), h), t.mul(z, c));
    }
    return t.sum(t.mul(h, h));
  };
  EXPECT_LT(testutil::grad_check(ps, loss).max_rel, 1e-4);
}

TEST(Adam, ZeroGradientsLeaveParams) {
  Rng rng(7);
  ParamSet ps;
  add_dense(ps, "l", 3, 2, rng);
  const ParamSet before = ps;
  auto st = AdamState::for_params(ps);
  adam_step(ps, ps.zeros_like(), st);
  EXPECT_EQ(st.step, 1);
  EXPECT_TRUE(ps == before);
}

TEST(Adam, FirstStepMagnitudeIsLr) {
  Rng rng(8);
  ParamSet ps;
  ps.add("p", random_matrix(4, 4, rng));
  const ParamSet before = ps;
  auto st = AdamState::for_params(ps, 0.0005);
  Gradients g{random_matrix(4, 4, rng, 10.0)};
  for (Index i = 0; i < 16; ++i)
    if (std::abs(g[0].data()[i]) < 0.1) g[0].data()[i] = 0.5;
  adam_step(ps, g, st);
  for (Index i = 0; i < 16; ++i) {
    const double d = ps[0].data()[i] - before[0].data()[i];
    EXPECT_GE(std::abs(d), 0.99 * 0.0005);
    EXPECT_LE(std::abs(d), 0.0005);
    EXPECT_LT(d * g[0].data()[i], 0.0);
  }
}

TEST(Adam, DeterministicAndShapeChecked) {
  Rng rng(9);
  ParamSet a;
  a.add("p", random_matrix(3, 2, rng));
  ParamSet b = a;
  auto sa = AdamState::for_params(a), sb = AdamState::for_params(b);
  const Gradients g{random_matrix(3, 2, rng)};
  adam_step(a, g, sa);
  adam_step(b, g, sb);
  EXPECT_TRUE(a == b);
  EXPECT_THROW(adam_step(a, Gradients{Matrix::Zero(2, 2)}, sa), ShapeError);
}

TEST(Init, GlorotBoundsMeanAndDeterminism) {
  Rng r1(10), r2(10);
  const Matrix a = glorot_uniform(1000, 100, r1);
  const Matrix b = glorot_uniform(1000, 100, r2);
  EXPECT_EQ(a, b);
  const double bound = std::sqrt(6.0 / 1100.0);
  EXPECT_LT(a.cwiseAbs().maxCoeff(), bound);
  const double n = static_cast<double>(a.size());
  EXPECT_LT(std::abs(a.mean()), 3 * bound / std::sqrt(3 * n));
  Rng r3(11);
  ParamSet ps;
  add_dense(ps, "l", 4, 3, r3);
  EXPECT_EQ(ps.at("l.b"), Matrix::Zero(3, 1));
}

TEST(ParamSetTest, LookupAndDuplicates) {
  ParamSet ps;
  ps.add("a", Matrix::Ones(2, 3));
  EXPECT_EQ(ps.index("a"), 0u);
  EXPECT_EQ(ps.scalar_count(), 6);
  EXPECT_THROW(ps.add("a", Matrix::Ones(1, 1)), ConfigError);
  EXPECT_THROW(ps.at("b"), ConfigError);
}

TEST(Checkpoint, ExactRoundTripWithAdam) {
  Rng rng(12);
  ParamSet ps;
  add_dense(ps, "l", 3, 2, rng);
  add_gru(ps, "g", 2, 3, rng);
  auto st = AdamState::for_params(ps, 0.001);
  adam_step(ps, [&] {
    Gradients g;
    for (std::size_t i = 0; i < ps.size(); ++i) g.push_back(random_matrix(ps[i].rows(), ps[i].cols(), rng));
    return g;
  }(), st);
  Checkpoint ck{ps, st, {{"model", "x"}}};
  const auto path = std::filesystem::temp_directory_path() / "mlcl_ck_test.json";
  save_checkpoint(ck, path);
  const auto back = load_checkpoint(path);
  EXPECT_TRUE(back.params == ps);
  ASSERT_TRUE(back.adam.has_value());
  EXPECT_EQ(back.adam->step, 1);
  EXPECT_EQ(back.adam->lr, 0.001);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    EXPECT_EQ(back.adam->m[i], st.m[i]);
    EXPECT_EQ(back.adam->v[i], st.v[i]);
  }
  EXPECT_EQ(back.meta.at("model"), "x");
}

TEST(Checkpoint, RejectsForeignFiles) {
  const auto path = std::filesystem::temp_directory_path() / "mlcl_ck_bad.json";
  std::ofstream(path) << R"({"format":"other","version":1})";
  EXPECT_THROW(load_checkpoint(path), ParseError);
  std::ofstream(path) << R"({"format":"mlcl-checkpoint","version":99,"tensors":[]})";
  EXPECT_THROW(load_checkpoint(path), ParseError);
  std::ofstream(path) << "not json";
  EXPECT_THROW(load_checkpoint(path), ParseError);
}
