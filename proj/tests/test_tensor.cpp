#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "atsg/grad_check.hpp"
#include "atsg/rng.hpp"
#include "atsg/tensor.hpp"

using namespace atsg;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool rg = false, double sd = 1.0) {
  Tensor t(std::move(shape), 0.0, rg);
  for (auto& x : t.data()) x = sd * rng.normal();
  return t;
}

// Plain triple loop, independent of the library's gemm kernels.
std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t l = 0; l < k; ++l) c[i * n + j] += a[i * k + l] * b[l * n + j];
  return c;
}

}  // namespace

TEST(Tensor, ShapeAndDataLengthMustAgree) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(Tensor(Shape{2, 0}), DimensionError);
  EXPECT_THROW(Tensor(Shape{}), DimensionError);
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.grad_buffer().size(), 6u);
}

TEST(Tensor, HandleCopiesShareStorageCloneDoesNot) {
  Tensor a(Shape{2}, 1.0);
  Tensor b = a;
  Tensor c = a.clone();
  b[0] = 7.0;
  EXPECT_EQ(a[0], 7.0);
  EXPECT_EQ(c[0], 1.0);
  EXPECT_TRUE(a.same_storage(b));
  EXPECT_FALSE(a.same_storage(c));
}

TEST(Tensor, CheckFiniteNamesTheTensor) {
  Tensor t(Shape{3}, 0.0);
  t[1] = std::nan("");
  try {
    t.check_finite("weights W");
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("weights W"), std::string::npos);
  }
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng(1);
  Tensor I(Shape{3, 3}, 0.0);
  for (int i = 0; i < 3; ++i) I.at(i, i) = 1.0;
  Tensor M = random_tensor(rng, {3, 3});
  Tensor R = matmul(I, M);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(R[i], M[i]);
}

TEST(Matmul, HandComputedProduct) {
  Tensor a(Shape{2, 2}, {1, 2, 3, 4});
  Tensor b(Shape{2, 2}, {5, 6, 7, 8});
  Tensor c = matmul(a, b);
  EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Matmul, MismatchReportsBothShapes) {
  Tensor a(Shape{2, 3}), b(Shape{2, 3});
  try {
    matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    const auto first = msg.find("2x3");
    ASSERT_NE(first, std::string::npos);
    EXPECT_NE(msg.find("2x3", first + 3), std::string::npos);
  }
}

TEST(Matmul, MatchesNaiveLoopOnRandomShapes) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const std::size_t m = 1 + rng.uniform_int(7), k = 1 + rng.uniform_int(7), n = 1 + rng.uniform_int(7);
    Tensor a = random_tensor(rng, {m, k}), b = random_tensor(rng, {k, n});
    Tensor c = matmul(a, b);
    auto ref = naive_matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12);
  }
}

TEST(Matmul, AssociativityProperty) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t m = 1 + rng.uniform_int(6), k = 1 + rng.uniform_int(6), l = 1 + rng.uniform_int(6),
                      n = 1 + rng.uniform_int(6);
    Tensor a = random_tensor(rng, {m, k}), b = random_tensor(rng, {k, l}), c = random_tensor(rng, {l, n});
    Tensor left = matmul(matmul(a, b), c), right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.size(); ++i) {
      const double scale = std::max({std::abs(left[i]), std::abs(right[i]), 1.0});
      EXPECT_LE(std::abs(left[i] - right[i]) / scale, 1e-9);
    }
  }
}

TEST(Softmax, ClosedFormRows) {
  Tape off(false);
  Tensor a(Shape{3, 4}, {0, 0, 0, 0, 0, std::log(2.0), 0, 0, 1000, 0, 0, 0});
  Tensor p = softmax_rows(off, a);
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(p.at(0, j), 0.25, 1e-15);
  Tensor two(Shape{1, 2}, {0.0, std::log(2.0)});
  Tensor q = softmax_rows(off, two);
  EXPECT_NEAR(q[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(q[1], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p.at(2, 0), 1.0, 1e-15);
  EXPECT_NEAR(p.at(2, 1), 0.0, 1e-15);
  EXPECT_TRUE(p.all_finite());
}

TEST(Softmax, NanOrInfinityIsNumericError) {
  Tape off(false);
  EXPECT_THROW(softmax_rows(off, Tensor(Shape{1, 2}, {0.0, std::nan("")})), NumericError);
  EXPECT_THROW(softmax_rows(off, Tensor(Shape{1, 2}, {0.0, INFINITY})), NumericError);
}

TEST(Softmax, RowsSumToOneProperty) {
  Rng rng(4);
  Tape off(false);
  for (int t = 0; t < 200; ++t) {
    const std::size_t r = 1 + rng.uniform_int(6), s = 1 + rng.uniform_int(30);
    Tensor a = random_tensor(rng, {r, s}, false, std::pow(10.0, rng.uniform(-2.0, 3.0)));
    Tensor p = softmax_rows(off, a);
    for (std::size_t i = 0; i < r; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < s; ++j) {
        EXPECT_GE(p.at(i, j), 0.0);
        sum += p.at(i, j);
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(LayerNorm, Examples) {
  Tape off(false);
  Tensor ones(Shape{4}, 1.0), zeros(Shape{4}, 0.0);
  Tensor y = layer_norm(off, Tensor(Shape{4}, 3.0), ones, zeros, 1e-5);
  for (double v : y.data()) EXPECT_NEAR(v, 0.0, 1e-12);

  Tensor g2(Shape{2}, 1.0), b2(Shape{2}, 0.0);
  Tensor z = layer_norm(off, Tensor(Shape{2}, {1.0, -1.0}), g2, b2, 1e-12);
  EXPECT_NEAR(z[0], 1.0, 1e-9);
  EXPECT_NEAR(z[1], -1.0, 1e-9);

  Rng rng(5);
  Tensor beta = random_tensor(rng, {5});
  Tensor w = layer_norm(off, random_tensor(rng, {5}), Tensor(Shape{5}, 0.0), beta, 1e-5);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(w[i], beta[i]);
}

TEST(LayerNorm, StandardizesEachColumnProperty) {
  Rng rng(6);
  Tape off(false);
  for (int t = 0; t < 50; ++t) {
    const std::size_t d = 2 + rng.uniform_int(20), n = 1 + rng.uniform_int(5);
    Tensor x = random_tensor(rng, {d, n}, false, 10.0);
    Tensor y = layer_norm(off, x, Tensor(Shape{d}, 1.0), Tensor(Shape{d}, 0.0), 1e-12);
    for (std::size_t j = 0; j < n; ++j) {
      double mean = 0.0, var = 0.0;
      for (std::size_t i = 0; i < d; ++i) mean += y.at(i, j);
      mean /= static_cast<double>(d);
      for (std::size_t i = 0; i < d; ++i) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
      var /= static_cast<double>(d);
      EXPECT_NEAR(mean, 0.0, 1e-6);
      EXPECT_NEAR(var, 1.0, 1e-6);
    }
  }
}

TEST(Backward, SumGivesOnes) {
  Tape tape;
  Tensor x(Shape{2, 3}, 0.5, true);
  Tensor loss = sum(tape, x);
  tape.backward(loss);
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, ReluSubgradientIsZeroAtNegativesAndZero) {
  Tape tape;
  Tensor x(Shape{3}, {2.0, -3.0, 0.0}, true);
  Tensor loss = sum(tape, relu(tape, x));
  tape.backward(loss);
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 0.0);
}

TEST(Backward, SumOfProductGradientIsOnesTimesBTransposed) {
  Rng rng(7);
  Tensor A = random_tensor(rng, {3, 4}, true), B = random_tensor(rng, {4, 2});
  Tape tape;
  Tensor loss = sum(tape, matmul(tape, A, B));
  tape.backward(loss);
  // ones(3×2)·Bᵀ: every row equals the row sums of B.
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t l = 0; l < 4; ++l) EXPECT_NEAR(A.grad()[i * 4 + l], B.at(l, 0) + B.at(l, 1), 1e-14);
  // and the finite-difference oracle agrees
  auto report = grad_check([&](Tape& t) { return sum(t, matmul(t, A, B)); }, {{"A", A}});
  EXPECT_LT(report.max_rel_error, 1e-8);
}

TEST(Backward, FanOutAccumulatesAdditively) {
  Tape tape;
  Tensor x(Shape{2}, {1.0, 2.0}, true);
  Tensor y = add(tape, x, x);
  Tensor loss = sum(tape, mul(tape, y, x));  // 2·Σx²
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tape tape;
  Tensor x(Shape{2}, 1.0, true);
  Tensor y = scale(tape, x, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, SecondBackwardOnSameTapeIsContractError) {
  Tape tape;
  Tensor x(Shape{2}, 1.0, true);
  Tensor loss = sum(tape, x);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), ContractError);
}

TEST(Backward, DisabledTapeRecordsNothing) {
  Tape off(false);
  Tensor x(Shape{2}, 1.0, true);
  sum(off, scale(off, x, 3.0));
  EXPECT_EQ(off.size(), 0u);
}

TEST(Backward, NodesAreTopologicallyOrdered) {
  Rng rng(8);
  Tape tape;
  Tensor a = random_tensor(rng, {3, 3}, true);
  Tensor b = softmax_rows(tape, matmul(tape, a, transpose(tape, a)));
  sum(tape, relu(tape, b));
  const auto& nodes = tape.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (const auto& in : nodes[i].inputs)
      for (std::size_t j = i; j < nodes.size(); ++j) EXPECT_FALSE(in.same_storage(nodes[j].output));
}

TEST(GradCheck, HalfSquaredNormIsExactUpToRounding) {
  Rng rng(9);
  Tensor theta = random_tensor(rng, {7}, true, 3.0);
  auto report = grad_check([&](Tape& t) { return scale(t, sum(t, mul(t, theta, theta)), 0.5); }, {{"theta", theta}});
  EXPECT_LT(report.max_rel_error, 1e-8);
  EXPECT_EQ(report.coordinates, 7u);
}

TEST(GradCheck, RelativeErrorDefinition) {
  EXPECT_NEAR(gradient_rel_error(1.0, 1.1), 0.1 / 1.1, 1e-15);
  EXPECT_DOUBLE_EQ(gradient_rel_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(gradient_rel_error(1e-12, 0.0), 1e-12 / 1e-8);
}

TEST(GradCheck, CorruptedBackwardRuleIsReported) {
  // A square op whose recorded rule is off by a factor of 1.5.
  auto bad_square = [](Tape& tape, const Tensor& a) {
    Tensor c(a.shape());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] * a[i];
    if (tape.needs_grad({&a}))
      tape.record({a}, c, [a, c]() {
        auto g = c.grad();
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 3.0 * a[i] * g[i];
      });
    return c;
  };
  Rng rng(10);
  Tensor x = random_tensor(rng, {5}, true);
  auto report = grad_check([&](Tape& t) { return sum(t, bad_square(t, x)); }, {{"x", x}});
  EXPECT_GT(report.max_rel_error, 1e-4);
  EXPECT_FALSE(report.passed(1e-4));
  ASSERT_FALSE(report.worst.empty());
  EXPECT_EQ(report.worst.front().tensor, "x");
}

TEST(GradCheck, RestoresParameterValues) {
  Rng rng(11);
  Tensor x = random_tensor(rng, {6}, true);
  const std::vector<double> before(x.data().begin(), x.data().end());
  grad_check([&](Tape& t) { return sum(t, mul(t, x, x)); }, {{"x", x}});
  EXPECT_EQ(std::vector<double>(x.data().begin(), x.data().end()), before);
}

// Random smooth compositions (matmul, transpose, softmax, layer norm, bias,
// products) against central differences at h=1e-5. Saturated softmax leaves
// coordinates with gradients near 1e-8, where FD rounding (~1e-11) dominates
// any relative measure, hence the absolute allowance.
TEST(GradCheck, RandomComposedGraphsProperty) {
  Rng rng(12);
  for (int t = 0; t < 30; ++t) {
    const std::size_t m = 2 + rng.uniform_int(4), k = 2 + rng.uniform_int(4), n = 2 + rng.uniform_int(4);
    Tensor A = random_tensor(rng, {m, k}, true), B = random_tensor(rng, {k, n}, true);
    Tensor bias = random_tensor(rng, {m}, true), gamma = random_tensor(rng, {m}, true), beta = random_tensor(rng, {m}, true);
    Tensor W = random_tensor(rng, {m, n});
    auto f = [&](Tape& tape) {
      Tensor h = add_bias(tape, matmul(tape, A, B), bias);
      Tensor s = softmax_rows(tape, transpose(tape, h));
      Tensor l = layer_norm(tape, transpose(tape, s), gamma, beta, 1e-5);
      return sum(tape, mul(tape, scale(tape, l, 0.5), W));
    };
    auto r = grad_check(f, {{"A", A}, {"B", B}, {"bias", bias}, {"gamma", gamma}, {"beta", beta}}, 1e-5, 1000);
    for (const auto& e : r.worst) {
      const double tol = 1e-4 * std::max(std::abs(e.analytic), std::abs(e.numeric)) + 1e-9;
      EXPECT_LE(std::abs(e.analytic - e.numeric), tol) << "graph " << t << " " << e.tensor << "[" << e.index << "]";
    }
  }
}
