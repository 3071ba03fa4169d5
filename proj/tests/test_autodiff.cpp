#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "orthonet/error.hpp"
#include "orthonet/grad_check.hpp"
#include "orthonet/graph.hpp"

using namespace orthonet;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

// h(x) = <grad f(x), v>: differentiating h exercises every backward rule a
// second time, so grad_check on h validates the double-backward path.
ScalarGraphFn directional_gradient(ScalarGraphFn f, Tensor v) {
  return [f, v](Graph& g, Variable x) {
    Variable y = f(g, x);
    Variable gx = backward_create_graph(y, std::vector<Variable>{x}).front();
    return dot(gx, g.constant(v));
  };
}

}  // namespace

TEST(ForwardOps, ReluClampsNegatives) {
  Graph g;
  Variable x = g.leaf(Tensor::vector({-1.0, 0.0, 2.0}));
  EXPECT_EQ(relu(x).value(), Tensor::vector({0.0, 0.0, 2.0}));
}

TEST(ForwardOps, DotOfOrthogonalBasisIsZero) {
  Graph g;
  Variable a = g.leaf(Tensor::vector({1, 0, 0}));
  Variable b = g.leaf(Tensor::vector({0, 1, 0}));
  EXPECT_EQ(dot(a, b).value().item(), 0.0);
}

TEST(ForwardOps, CrossEntropyOfUniformTwoClass) {
  Graph g;
  Variable logits = g.leaf(Tensor::matrix(1, 2, {0.0, 0.0}));
  const int label = 0;
  EXPECT_NEAR(softmax_cross_entropy(logits, std::span(&label, 1)).value()[0], std::log(2.0), 1e-15);
}

TEST(ForwardOps, ShapeMismatchNamesOpAndShapes) {
  Graph g;
  Variable a = g.leaf(Tensor({2, 3}));
  Variable b = g.leaf(Tensor({3, 2}));
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("(2, 3)"), std::string::npos);
    EXPECT_NE(msg.find("(3, 2)"), std::string::npos);
  }
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(ForwardOps, MatmulAndConvMatchHandValues) {
  Graph g;
  Variable a = g.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Variable b = g.leaf(Tensor::matrix(2, 1, {5, 6}));
  EXPECT_EQ(matmul(a, b).value(), Tensor::matrix(2, 1, {17, 39}));

  // 1x1x3x3 input, 1x1x2x2 kernel of ones, no padding: 2x2 window sums.
  Variable x = g.leaf(Tensor({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
  Variable w = g.leaf(Tensor({1, 1, 2, 2}, 1.0));
  EXPECT_EQ(conv2d(x, w, 1, 0).value(), Tensor({1, 1, 2, 2}, {12, 16, 24, 28}));
  // padding 1, stride 2 over the same input: corners of the padded grid.
  EXPECT_EQ(conv2d(x, w, 2, 1).value(), Tensor({1, 1, 2, 2}, {1, 5, 11, 28}));
}

TEST(ForwardOps, LabelOutOfRangeRejected) {
  Graph g;
  Variable logits = g.leaf(Tensor({1, 3}));
  const int bad = 3;
  EXPECT_THROW(softmax_cross_entropy(logits, std::span(&bad, 1)), ValueError);
}

TEST(ForwardOps, NormalizeRowsGuardsZeroRows) {
  Graph g;
  Variable x = g.leaf(Tensor::matrix(2, 2, {3, 4, 0, 0}));
  const Tensor n = normalize_rows(x, 1e-12).value();
  EXPECT_DOUBLE_EQ(n[0], 0.6);
  EXPECT_DOUBLE_EQ(n[1], 0.8);
  EXPECT_EQ(n[2], 0.0);
  EXPECT_EQ(n[3], 0.0);
  EXPECT_TRUE(n.all_finite());
}

TEST(Backward, PowerRule) {
  Graph g;
  Variable x = g.leaf(Tensor::scalar(3.0));
  Variable y = mul(x, x);
  EXPECT_DOUBLE_EQ(backward(y, std::vector{x})[0].item(), 6.0);
}

TEST(Backward, QuadraticForm) {
  Graph g;
  Variable x = g.leaf(Tensor::vector({1, 2, 3}));
  Variable y = scale(dot(x, x), 0.5);
  EXPECT_EQ(backward(y, std::vector{x})[0], Tensor::vector({1, 2, 3}));
}

TEST(Backward, SecondDerivativeOfCube) {
  Graph g;
  Variable x = g.leaf(Tensor::scalar(2.0));
  Variable y0 = mul(mul(x, x), x);
  Variable dy0 = backward_create_graph(y0, std::vector{x})[0];
  EXPECT_DOUBLE_EQ(dy0.value().item(), 12.0);
  EXPECT_DOUBLE_EQ(backward(dy0, std::vector{x})[0].item(), 12.0);
}

TEST(Backward, RejectsNonScalarOutput) {
  Graph g;
  Variable x = g.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(backward(mul(x, x), std::vector{x}), ShapeError);
}

TEST(Backward, RejectsVariableFromOtherGraph) {
  Graph g, other;
  Variable x = g.leaf(Tensor::scalar(1.0));
  Variable z = other.leaf(Tensor::scalar(1.0));
  EXPECT_THROW(backward(mul(x, x), std::vector{z}), Error);
}

TEST(Backward, UnusedVariableGetsZeroGradient) {
  Graph g;
  Variable x = g.leaf(Tensor::scalar(1.5));
  Variable unused = g.leaf(Tensor::vector({1, 2}));
  auto grads = backward(mul(x, x), std::vector{x, unused});
  EXPECT_EQ(grads[1], Tensor({2}));
}

TEST(Backward, FirstOrderPassLeavesGraphUntouched) {
  Graph g;
  Variable x = g.leaf(Tensor::vector({1, 2}));
  Variable y = sum(exp(x));
  const std::size_t before = g.size();
  backward(y, std::vector{x});
  EXPECT_EQ(g.size(), before);
}

TEST(Backward, ReluSubgradientAtZeroIsZero) {
  Graph g;
  Variable x = g.leaf(Tensor::vector({-1.0, 0.0, 2.0}));
  EXPECT_EQ(backward(sum(relu(x)), std::vector{x})[0], Tensor::vector({0, 0, 1}));
}

TEST(GradCheck, SumOfSquares) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({10}, rng);
  EXPECT_LT(grad_check([](Graph&, Variable v) { return dot(v, v); }, x, 1e-5), 1e-6);
}

TEST(GradCheck, CrossEntropyAfterDenseLayer) {
  std::mt19937_64 rng(2);
  const Tensor w = random_tensor({5, 3}, rng);
  const Tensor b = random_tensor({3}, rng);
  const std::vector<int> labels{0, 2, 1, 1};
  ScalarGraphFn f = [&](Graph& g, Variable x) {
    Variable z = matmul(x, g.constant(w));
    z = add(z, broadcast_channel(g.constant(b), z.shape()));
    return mean(softmax_cross_entropy(z, labels));
  };
  EXPECT_LT(grad_check(f, random_tensor({4, 5}, rng), 1e-5), 1e-4);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
  ScalarGraphFn f = [](Graph& g, Variable) { return g.constant(Tensor::scalar(4.0)); };
  EXPECT_EQ(grad_check(f, Tensor::vector({1, 2, 3}), 1e-5), 0.0);
}

// Every differentiable op, first and second order, against central differences.
class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, FirstAndSecondOrderMatchFiniteDifferences) {
  std::mt19937_64 rng(100 + GetParam());
  const Tensor c23 = random_tensor({2, 3}, rng);
  const Tensor c32 = random_tensor({3, 2}, rng);
  const Tensor w = random_tensor({2, 2, 3, 3}, rng);
  const Tensor img = random_tensor({2, 2, 4, 4}, rng);
  const std::vector<int> labels{2, 0};
  std::vector<std::pair<ScalarGraphFn, Tensor>> cases = {
      {[&](Graph& g, Variable x) { return sum(mul(mul(x, x), g.constant(c23))); }, random_tensor({2, 3}, rng)},
      {[&](Graph& g, Variable x) { return sum(mul(sub(x, g.constant(c23)), x)); }, random_tensor({2, 3}, rng)},
      {[&](Graph& g, Variable x) { return sum(mul(matmul(x, g.constant(c32)), matmul(x, g.constant(c32)))); },
       random_tensor({2, 3}, rng)},
      {[&](Graph&, Variable x) { return sum(mul(transpose(x), transpose(x))); }, random_tensor({2, 3}, rng)},
      {[&](Graph&, Variable x) { return sum(exp(scale(x, 0.7))); }, random_tensor({2, 3}, rng)},
      {[&](Graph&, Variable x) { return sum(mul(log(x), x)); }, random_tensor({2, 3}, rng, 0.5, 2.0)},
      {[&](Graph&, Variable x) { return sum(reciprocal(add_scalar(x, 3.0))); }, random_tensor({2, 3}, rng)},
      {[&](Graph& g, Variable x) { return sum(mul(softmax(x), g.constant(c23))); }, random_tensor({2, 3}, rng)},
      {[&](Graph&, Variable x) { return mean(softmax_cross_entropy(mul(x, x), labels)); }, random_tensor({2, 3}, rng)},
      {[&](Graph&, Variable x) { return sum(mul(row_norm(x), row_norm(x))); }, random_tensor({2, 3}, rng)},
      {[&](Graph& g, Variable x) { return sum(mul(normalize_rows(x, 1e-12), g.constant(c23))); },
       random_tensor({2, 3}, rng)},
      {[&](Graph&, Variable x) { return sum(mul(expand_last(sum_last(x), 4), expand_last(sum_last(x), 4))); },
       random_tensor({2, 3}, rng)},
      {[&](Graph& g, Variable x) {
         Variable y = conv2d(x, g.constant(w), 1, 1);
         return sum(mul(y, y));
       },
       img},
      {[&](Graph& g, Variable k) {
         Variable y = conv2d(g.constant(img), k, 2, 1);
         return sum(mul(y, y));
       },
       w},
      {[&](Graph& g, Variable x) {
         Variable y = add(x, broadcast_channel(sum_channel(mul(x, x)), x.shape()));
         return sum(mul(y, g.constant(Tensor(x.shape(), 0.3))));
       },
       img},
      {[&](Graph& g, Variable x) {
         Variable y = relu(conv2d(x, g.constant(w), 1, 0));
         return sum(mul(y, y));
       },
       img},
      {[&](Graph&, Variable x) { return mul(l2_norm(x), l2_norm(x)); }, random_tensor({2, 3}, rng)},
  };
  const std::size_t i = static_cast<std::size_t>(GetParam());
  ASSERT_LT(i, cases.size());
  const auto& [f, x] = cases[i];
  EXPECT_LT(grad_check(f, x, 1e-5), 1e-6) << "first order, case " << i;
  const Tensor v = random_tensor(x.shape(), rng);
  EXPECT_LT(grad_check(directional_gradient(f, v), x, 1e-5), 1e-5) << "second order, case " << i;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradients, ::testing::Range(0, 17));

TEST(Properties, ReplayIsBitIdentical) {
  std::mt19937_64 rng(5);
  Graph g;
  Variable x = g.leaf(random_tensor({3, 4}, rng));
  Variable w = g.leaf(random_tensor({4, 2}, rng));
  const int labels[] = {0, 1, 1};
  Variable y = mean(softmax_cross_entropy(relu(matmul(x, w)), labels));
  auto grads = backward_create_graph(y, std::vector{x, w});
  Variable penalty = dot(grads[0], grads[0]);
  const Tensor first = backward(penalty, std::vector{w})[0];

  std::vector<Tensor> before;
  for (std::size_t i = 0; i < g.size(); ++i) before.push_back(g.node(i).value);
  g.replay();
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g.node(i).value, before[i]) << "node " << i;
  EXPECT_EQ(backward(penalty, std::vector{w})[0], first);
}

TEST(Properties, SetLeafRecomputesDownstream) {
  Graph g;
  Variable x = g.leaf(Tensor::scalar(2.0));
  Variable y = mul(x, x);
  g.set_leaf(x, Tensor::scalar(5.0));
  EXPECT_EQ(y.value().item(), 25.0);
  EXPECT_THROW(g.set_leaf(x, Tensor::vector({1, 2})), ShapeError);
}

TEST(Properties, DerivativeIsLinear) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> coef(-2.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x0 = random_tensor({6}, rng);
    const double a = coef(rng), b = coef(rng);
    auto f = [](Variable x) { return sum(exp(mul(x, x))); };
    auto h = [](Variable x) { return dot(relu(x), x); };
    Graph g;
    Variable x = g.leaf(x0);
    const Tensor combined = backward(add(scale(f(x), a), scale(h(x), b)), std::vector{x})[0];
    const Tensor gf = backward(f(x), std::vector{x})[0];
    const Tensor gh = backward(h(x), std::vector{x})[0];
    for (std::size_t i = 0; i < x0.size(); ++i) {
      EXPECT_NEAR(combined[i], a * gf[i] + b * gh[i], 1e-12 * (1.0 + std::abs(combined[i])));
    }
  }
}

TEST(Tensor, RejectsInconsistentData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor::vector({1, 2}).item(), ShapeError);
}
