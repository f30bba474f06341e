#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "support/helpers.hpp"
#include "support/oracles.hpp"

using namespace s2moe;
using testing_support::random_tensor;
using testing_support::to_vec;

namespace {

using Fn = std::function<Tensor<double>(const Tensor<double>&)>;

// Scalar probe of an op: sum(op(x) * R) with a fixed random projection R.
Fn projected(const std::function<Tensor<double>(const Tensor<double>&)>& op, const Shape& out_shape,
             std::uint64_t seed) {
  RngStream rng(seed);
  auto r = random_tensor(out_shape, rng);
  return [op, r](const Tensor<double>& x) { return sum(mul(op(x), r)); };
}

Shape random_shape(RngStream& rng, std::size_t rank) {
  Shape s;
  for (std::size_t i = 0; i < rank; ++i) s.push_back(1 + rng.below(16));
  return s;
}

}  // namespace

TEST(Tensor, FactoriesKeepShapeAndData) {
  auto t = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.last_dim(), 3u);
  EXPECT_THROW(Tensor<double>::from({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_EQ(Tensor<double>::scalar(4.0).item(), 4.0);
}

TEST(Ops, MatmulIdentity) {
  auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto v = Tensor<double>::from({2, 1}, {3, 4});
  auto y = matmul(eye, v);
  EXPECT_EQ(y.shape(), (Shape{2, 1}));
  EXPECT_EQ(to_vec(y), (std::vector<double>{3, 4}));
}

TEST(Ops, SoftmaxOfZerosIsUniform) {
  auto y = softmax(Tensor<double>::zeros({1, 4}));
  for (auto v : y.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Ops, SoftmaxSurvivesHugeLogits) {
  auto y = softmax(Tensor<double>::from({1, 3}, {1000.0, 1000.0, -1000.0}));
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
  EXPECT_EQ(y[2], 0.0);
}

TEST(Ops, CrossEntropyOfUniformLogits) {
  std::vector<std::int32_t> targets{0, 17, 255};
  auto ce = cross_entropy(Tensor<double>::zeros({3, 256}), targets);
  EXPECT_NEAR(ce.item(), std::log(256.0), 1e-12);
  EXPECT_NEAR(ce.item(), 5.545, 1e-3);
}

TEST(Ops, CrossEntropyRejectsOutOfRangeTarget) {
  std::vector<std::int32_t> targets{5};
  EXPECT_THROW(cross_entropy(Tensor<double>::zeros({1, 5}), targets), std::out_of_range);
}

TEST(Ops, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({4, 5}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,5]"), std::string::npos) << msg;
  }
  EXPECT_THROW(sub(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({3, 2})), ShapeError);
}

TEST(Ops, NanGuardRejectsNonFiniteOutput) {
  auto x = Tensor<double>::from({1}, {1000.0});
  try {
    exp(x);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("exp"), std::string::npos);
  }
  NanGuardScope off(false);
  EXPECT_TRUE(std::isinf(exp(x)[0]));
}

TEST(Backward, SquareGradient) {
  auto x = Tensor<double>::from({1}, {1.5}, true);
  auto loss = sum(mul(x, x));
  loss.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  RngStream rng(3);
  auto x = random_tensor({3, 5}, rng, 1.0, true);
  sum(softmax(x)).backward();
  for (auto g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, GradientShapeMatchesData) {
  RngStream rng(4);
  auto w = random_tensor({4, 3}, rng, 1.0, true);
  auto x = random_tensor({5, 4}, rng);
  sum(matmul(x, w)).backward();
  EXPECT_EQ(w.grad().size(), w.numel());
}

TEST(Backward, RejectsNonScalarDetachedAndRepeatedCalls) {
  auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
  auto y = mul(x, x);
  EXPECT_THROW(y.backward(), TapeError);
  EXPECT_THROW(Tensor<double>::scalar(1.0).backward(), TapeError);
  EXPECT_THROW(sum(y).detach().backward(), TapeError);

  auto loss = sum(mul(x, x));
  loss.backward();
  EXPECT_THROW(loss.backward(), TapeError);
}

TEST(Backward, ClearedTapeInvalidatesLoss) {
  auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
  auto loss = sum(mul(x, x));
  Tape<double>::active().clear();
  EXPECT_THROW(loss.backward(), TapeError);
}

TEST(Backward, NoGradGuardSkipsRecording) {
  auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  auto loss = sum(mul(x, x));
  EXPECT_FALSE(loss.node_id().has_value());
}

TEST(Backward, RandomThreeLayerCompositionMatchesFiniteDifferences) {
  RngStream rng(11);
  const std::size_t d = 8;
  auto w1 = random_tensor({d, d}, rng, 0.5);
  auto w2 = random_tensor({d, d}, rng, 0.5);
  auto w3 = random_tensor({d, 1}, rng, 0.5);
  auto x0 = random_tensor({3, d}, rng);
  Fn f = [&](const Tensor<double>& x) {
    auto h = sigmoid(matmul(x, w1));
    h = exp(affine(matmul(h, w2), 0.3));
    return sum(matmul(h, w3));
  };
  EXPECT_LT(grad_check(f, x0, 1e-5), 1e-4);
}

TEST(GradCheck, ReluLayerAwayFromKink) {
  RngStream rng(5);
  const std::size_t d = 6;
  auto w = random_tensor({d, d}, rng);
  Tensor<double> x0;
  for (int attempt = 0; attempt < 100; ++attempt) {
    x0 = random_tensor({1, d}, rng);
    NoGradGuard g;
    auto pre = matmul(x0, w);
    double gap = 1e9;
    for (auto v : pre.data()) gap = std::min(gap, std::abs(v));
    if (gap > 1e-3) break;
  }
  Fn f = [&](const Tensor<double>& x) { return sum(relu(matmul(x, w))); };
  EXPECT_LT(grad_check(f, x0, 1e-5), 1e-4);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
  Fn f = [](const Tensor<double>&) { return Tensor<double>::scalar(2.0); };
  EXPECT_EQ(grad_check(f, Tensor<double>::from({3}, {1, 2, 3}), 1e-5), 0.0);
}

// A large constant offset makes a tiny slope unresolvable by differences,
// but a missing gradient of a few 1e-6 is still reported.
TEST(GradCheck, TinySlopesNextToLargeValues) {
  Fn f = [](const Tensor<double>& x) { return affine(sum(x), 3e-8, 2.7); };
  EXPECT_LT(grad_check(f, Tensor<double>::from({2}, {0.4, -1.3}), 1e-6), 1e-3);
  EXPECT_GT(relative_error(0.0, 3e-6, difference_floor(2.7, 1e-6)), 0.4);
  EXPECT_DOUBLE_EQ(difference_floor(0.0, 1.0), 1e-8);
}

TEST(GradCheck, NonFinitePerturbationNamesCoordinate) {
  Fn f = [](const Tensor<double>& x) { return sum(log(x)); };
  try {
    grad_check(f, Tensor<double>::from({3}, {1.0, 1e-7, 2.0}), 1e-5);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 1"), std::string::npos) << e.what();
  }
}

TEST(GradCheck, RejectsNonPositiveEpsilon) {
  Fn f = [](const Tensor<double>& x) { return sum(x); };
  EXPECT_THROW(grad_check(f, Tensor<double>::from({1}, {1.0}), 0.0), std::invalid_argument);
}

// Property: every smooth primitive matches central differences (1e-4) over
// 100 seeds with random shapes up to 16 per dimension.
TEST(GradCheck, SmoothPrimitivesOverRandomShapes) {
  double worst = 0.0;
  std::string worst_op;
  auto check = [&](const std::string& name, const Fn& f, const Tensor<double>& x) {
    const double e = grad_check(f, x, 1e-5);
    if (e > worst) {
      worst = e;
      worst_op = name;
    }
  };
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    RngStream rng(1000 + seed);
    const Shape s2 = random_shape(rng, 2);
    const std::size_t m = s2[0], n = s2[1], k = 1 + rng.below(16);
    auto x = random_tensor(s2, rng);
    auto b = random_tensor({n, k}, rng);
    auto bt = random_tensor({k, n}, rng);
    auto same = random_tensor(s2, rng);
    auto rowv = random_tensor({n}, rng);
    auto col = random_tensor({m, 1}, rng);
    const std::uint64_t ps = 5000 + seed;

    check("matmul", projected([&](const Tensor<double>& t) { return matmul(t, b); }, {m, k}, ps), x);
    check("matmul_bt", projected([&](const Tensor<double>& t) { return matmul_bt(t, bt); }, {m, k}, ps), x);
    check("add", projected([&](const Tensor<double>& t) { return add(t, same); }, s2, ps), x);
    check("add.row", projected([&](const Tensor<double>& t) { return add(t, rowv); }, s2, ps), x);
    check("add.row.rhs", projected([&](const Tensor<double>& t) { return add(same, t); }, s2, ps), x);
    check("sub", projected([&](const Tensor<double>& t) { return sub(same, t); }, s2, ps), x);
    check("mul", projected([&](const Tensor<double>& t) { return mul(t, same); }, s2, ps), x);
    check("mul.column", projected([&](const Tensor<double>& t) { return mul(same, t); }, s2, ps),
          random_tensor({m, 1}, rng));
    check("mul.column.lhs", projected([&](const Tensor<double>& t) { return mul(t, col); }, s2, ps), x);
    check("affine", projected([&](const Tensor<double>& t) { return affine(t, 0.7, -0.2); }, s2, ps), x);
    check("sigmoid", projected([&](const Tensor<double>& t) { return sigmoid(t); }, s2, ps), x);
    check("exp", projected([&](const Tensor<double>& t) { return exp(t); }, s2, ps), x);
    {
      auto pos = random_tensor(s2, rng);
      for (auto& v : pos.mutable_data()) v = 0.5 + std::abs(v);
      check("log", projected([&](const Tensor<double>& t) { return log(t); }, s2, ps), pos);
    }
    check("softmax", projected([&](const Tensor<double>& t) { return softmax(t); }, s2, ps), x);
    check("softmax.axis0", projected([&](const Tensor<double>& t) { return softmax(t, 0); }, s2, ps), x);
    // Width 2 normalizes to exactly +-1, leaving only eps-sized gradients.
    if (n >= 3) {
      auto gain = random_tensor({n}, rng);
      auto bias = random_tensor({n}, rng);
      check("layer_norm", projected([&](const Tensor<double>& t) { return layer_norm(t, gain, bias); }, s2, ps), x);
      check("layer_norm.gain", projected([&](const Tensor<double>& g) { return layer_norm(same, g, bias); }, s2, ps),
            gain);
      check("variance", projected([&](const Tensor<double>& t) { return variance(t, 1); }, {m}, ps), x);
      check("l2_normalize", projected([&](const Tensor<double>& t) { return l2_normalize(t); }, s2, ps), x);
    }
    check("mean.axis0", projected([&](const Tensor<double>& t) { return mean(t, 0); }, {n}, ps), x);
    check("mean.axis1", projected([&](const Tensor<double>& t) { return mean(t, 1); }, {m}, ps), x);
    check("concat", projected([&](const Tensor<double>& t) { return concat<double>({t, same}, 1); }, {m, 2 * n}, ps), x);
    check("reshape", projected([&](const Tensor<double>& t) { return reshape(t, Shape{n, m}); }, {n, m}, ps), x);
    {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < m + 2; ++i) idx.push_back(rng.below(m));
      check("gather_rows", projected([&](const Tensor<double>& t) { return gather_rows(t, idx); }, {idx.size(), n}, ps),
            x);
      std::vector<std::int32_t> ids;
      for (std::size_t i = 0; i < 5; ++i) ids.push_back(static_cast<std::int32_t>(rng.below(m)));
      check("embedding", projected([&](const Tensor<double>& t) { return embedding(t, ids); }, {5, n}, ps), x);
      std::vector<std::int32_t> targets;
      for (std::size_t i = 0; i < m; ++i) targets.push_back(static_cast<std::int32_t>(rng.below(n)));
      check("cross_entropy", [&](const Tensor<double>& t) { return cross_entropy(t, targets); }, x);
    }
    {
      const std::size_t heads = 1 + rng.below(3), dh = 1 + rng.below(4), batch = 1 + rng.below(3), seq = 1 + rng.below(5);
      const std::size_t d = heads * dh;
      auto q = random_tensor({batch * seq, d}, rng);
      auto kk = random_tensor({batch * seq, d}, rng);
      auto v = random_tensor({batch * seq, d}, rng);
      const Shape o{batch * seq, d};
      check("attention.q", projected([&](const Tensor<double>& t) { return causal_attention(t, kk, v, batch, seq, heads); }, o, ps), q);
      check("attention.k", projected([&](const Tensor<double>& t) { return causal_attention(q, t, v, batch, seq, heads); }, o, ps), kk);
      check("attention.v", projected([&](const Tensor<double>& t) { return causal_attention(q, kk, t, batch, seq, heads); }, o, ps), v);
    }
  }
  EXPECT_LT(worst, 1e-4) << "worst primitive: " << worst_op;
}

TEST(Ops, AttentionMatchesStraightLineOracle) {
  RngStream rng(21);
  const std::size_t batch = 2, seq = 5, heads = 2, d = 6;
  auto q = random_tensor({batch * seq, d}, rng);
  auto k = random_tensor({batch * seq, d}, rng);
  auto v = random_tensor({batch * seq, d}, rng);
  auto y = causal_attention(q, k, v, batch, seq, heads);
  auto ref = oracle::attention(to_vec(q), to_vec(k), to_vec(v), batch, seq, d, heads);
  EXPECT_LT(testing_support::max_abs_diff(to_vec(y), ref), 1e-12);
}

TEST(Ops, LayerNormMatchesOracle) {
  RngStream rng(22);
  auto x = random_tensor({4, 7}, rng);
  auto g = random_tensor({7}, rng);
  auto b = random_tensor({7}, rng);
  auto ref = oracle::layer_norm(to_vec(x), 4, 7, to_vec(g), to_vec(b));
  EXPECT_LT(testing_support::max_abs_diff(to_vec(layer_norm(x, g, b)), ref), 1e-12);
}

TEST(Ops, DropoutIsInvertedAndSeeded) {
  RngStream a(9), b(9);
  auto x = Tensor<double>::full({1000}, 1.0);
  auto ya = dropout(x, 0.25, a);
  auto yb = dropout(x, 0.25, b);
  EXPECT_EQ(to_vec(ya), to_vec(yb));
  std::size_t zeros = 0;
  for (auto v : ya.data()) {
    if (v == 0.0) ++zeros;
    else EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
  }
  EXPECT_GT(zeros, 180u);
  EXPECT_LT(zeros, 320u);
  EXPECT_EQ(to_vec(dropout(x, 0.0, a)), to_vec(x));
}

TEST(Determinism, ForwardAndGradientsReplayBitwise) {
  auto run = [] {
    RngStream rng(31);
    auto w = random_tensor({5, 5}, rng, 1.0, true);
    auto x = random_tensor({3, 5}, rng);
    auto loss = sum(softmax(matmul(sigmoid(matmul(x, w)), w)));
    loss = add(loss, sum(mul(w, w)));
    loss.backward();
    auto out = to_vec(w.grad().empty() ? Tensor<double>::zeros({1}) : Tensor<double>::from({25}, w.grad_or_zero()));
    out.push_back(loss.item());
    return out;
  };
  EXPECT_EQ(run(), run());
}
