#include <gtest/gtest.h>

#include <random>
#include <string>

#include "dacnet/graph.hpp"
#include "dacnet/ops.hpp"
#include "grad_util.hpp"
#include "test_util.hpp"

using namespace dacnet;
using ops::Padding;

namespace {

Tensor eval_unary(const std::function<NodeId(Graph<double>&, NodeId)>& f, const Tensor& x) {
  Graph<double> g;
  return g.value(f(g, g.constant(x)));
}

}  // namespace

TEST(Tensor, ShapeAndDataMustAgree) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  t.at({1, 2}) = 5;
  EXPECT_EQ(t[5], 5);
  EXPECT_TRUE(t.all_finite());
  t[0] = std::nan("");
  EXPECT_FALSE(t.all_finite());
}

TEST(Relu, Values) {
  auto r = eval_unary([](auto& g, NodeId x) { return ops::relu(g, x); }, Tensor::vector({-1, 0, 2}));
  EXPECT_EQ(r, Tensor::vector({0, 0, 2}));
  r = eval_unary([](auto& g, NodeId x) { return ops::relu(g, x); }, Tensor::vector({0.5}));
  EXPECT_EQ(r, Tensor::vector({0.5}));
}

TEST(Relu, GradientMatchesCentralDifference) {
  const Tensor x = Tensor::vector({-1, 2});
  Graph<double> g;
  NodeId xi = g.constant(x, true);
  g.backward(ops::sum(g, ops::relu(g, xi)));
  const Tensor grad = g.grad(xi);
  // Oracle: scalar central differences of sum(max(0, x)).
  auto f = [](double a, double b) { return std::max(0.0, a) + std::max(0.0, b); };
  const double h = 1e-6;
  const double d0 = (f(-1 + h, 2) - f(-1 - h, 2)) / (2 * h);
  const double d1 = (f(-1, 2 + h) - f(-1, 2 - h)) / (2 * h);
  EXPECT_NEAR(grad[0], d0, 1e-9);
  EXPECT_NEAR(grad[1], d1, 1e-9);
  EXPECT_EQ(grad, Tensor::vector({0, 1}));
}

TEST(Relu, SubgradientAtZeroIsZero) {
  Graph<double> g;
  NodeId xi = g.constant(Tensor::vector({0.0}), true);
  g.backward(ops::sum(g, ops::relu(g, xi)));
  EXPECT_EQ(g.grad(xi)[0], 0.0);
}

TEST(Matmul, IdentityAndSelection) {
  Graph<double> g;
  NodeId a = g.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  NodeId id = g.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  EXPECT_EQ(g.value(ops::matmul(g, a, id)), Tensor::matrix({{1, 2}, {3, 4}}));
  NodeId r = g.constant(Tensor::matrix({{1, 0}}));
  NodeId c = g.constant(Tensor::matrix({{2}, {5}}));
  EXPECT_EQ(g.value(ops::matmul(g, r, c)), Tensor::matrix({{2}}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph<double> g;
  NodeId a = g.constant(Tensor({3, 4}));
  NodeId b = g.constant(Tensor({3, 2}));
  try {
    ops::matmul(g, a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[3x4]"), std::string::npos);
    EXPECT_NE(msg.find("[3x2]"), std::string::npos);
  }
}

TEST(Matmul, GradientCheck) {
  std::mt19937_64 rng(3);
  const Tensor a = testutil::uniform({3, 4}, rng);
  const Tensor b = testutil::uniform({4, 2}, rng);
  const Tensor r = testutil::uniform({3, 2}, rng);
  auto wrt_a = [&](Graph<double>& g, NodeId x) {
    return ops::sum(g, ops::mul(g, ops::matmul(g, x, g.constant(b)), g.constant(r)));
  };
  auto wrt_b = [&](Graph<double>& g, NodeId x) {
    return ops::sum(g, ops::mul(g, ops::matmul(g, g.constant(a), x), g.constant(r)));
  };
  EXPECT_LT(grad_check<double>(wrt_a, a, 1e-6), 1e-6);
  EXPECT_LT(grad_check<double>(wrt_b, b, 1e-6), 1e-6);
}

TEST(Conv2dRaw, OneByOneKernelScales) {
  std::mt19937_64 rng(1);
  const Tensor x = testutil::uniform({1, 3, 3, 1}, rng);
  Graph<double> g;
  NodeId y = ops::conv2d(g, g.constant(x), g.constant(Tensor({1, 1, 1, 1}, 2.0)), 1, Padding::same);
  const Tensor& out = g.value(y);
  ASSERT_EQ(out.shape(), x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(out[i], 2 * x[i]);
}

TEST(Conv2dRaw, CountingWindow) {
  Graph<double> g;
  NodeId y = ops::conv2d(g, g.constant(Tensor({1, 3, 3, 1}, 1.0)), g.constant(Tensor({3, 3, 1, 1}, 1.0)), 1,
                         Padding::valid);
  EXPECT_EQ(g.value(y).shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(g.value(y)[0], 9.0);
}

TEST(Conv2dRaw, KernelLargerThanInputIsRejected) {
  Graph<double> g;
  EXPECT_THROW(ops::conv2d(g, g.constant(Tensor({1, 2, 2, 1})), g.constant(Tensor({3, 3, 1, 1})), 1, Padding::valid),
               DimensionError);
  EXPECT_THROW(ops::conv2d(g, g.constant(Tensor({1, 4, 4, 1})), g.constant(Tensor({2, 2, 1, 1})), 1, Padding::same),
               DimensionError);
}

TEST(Conv2dRaw, GradientCheckInputAndKernel) {
  std::mt19937_64 rng(5);
  const Tensor x = testutil::uniform({1, 5, 5, 2}, rng);
  const Tensor k = testutil::uniform({3, 3, 3, 2}, rng);
  for (std::size_t stride : {1u, 2u})
    for (Padding pad : {Padding::same, Padding::valid}) {
      Graph<double> probe;
      const Shape os = probe.value(ops::conv2d(probe, probe.constant(x), probe.constant(k), stride, pad)).shape();
      const Tensor r = testutil::uniform(os, rng);
      auto wrt_x = [&](Graph<double>& g, NodeId xi) {
        return ops::sum(g, ops::mul(g, ops::conv2d(g, xi, g.constant(k), stride, pad), g.constant(r)));
      };
      auto wrt_k = [&](Graph<double>& g, NodeId ki) {
        return ops::sum(g, ops::mul(g, ops::conv2d(g, g.constant(x), ki, stride, pad), g.constant(r)));
      };
      EXPECT_LT(grad_check<double>(wrt_x, x, 1e-6), 1e-5) << "stride " << stride;
      EXPECT_LT(grad_check<double>(wrt_k, k, 1e-6), 1e-5) << "stride " << stride;
    }
}

TEST(Backward, LinearAndQuadratic) {
  Graph<double> g;
  NodeId p = g.parameter(Tensor::vector({1, -2}));
  g.backward(ops::sum(g, p));
  EXPECT_EQ(g.grad(p), Tensor::vector({1, 1}));

  Graph<double> g2;
  NodeId q = g2.parameter(Tensor::vector({1, -2}));
  g2.backward(ops::sum(g2, ops::mul(g2, q, q)));
  EXPECT_EQ(g2.grad(q), Tensor::vector({2, -4}));
}

TEST(Backward, NonScalarLossIsAContractError) {
  Graph<double> g;
  NodeId p = g.parameter(Tensor::vector({1, 2}));
  EXPECT_THROW(g.backward(ops::relu(g, p)), ContractError);
}

TEST(Backward, UnusedParameterGetsZeroGradient) {
  Graph<double> g;
  NodeId used = g.parameter(Tensor::vector({1, 2}));
  NodeId unused = g.parameter(Tensor({2, 3}, 7.0));
  g.backward(ops::sum(g, used));
  const auto grads = g.parameter_grads();
  ASSERT_EQ(grads.size(), 2u);
  EXPECT_EQ(grads.at(unused), Tensor({2, 3}));
}

TEST(Backward, GraphIsTopologicallyOrdered) {
  Graph<double> g;
  NodeId a = g.parameter(Tensor::vector({1}));
  NodeId b = ops::relu(g, a);
  NodeId c = ops::add(g, a, b);
  for (NodeId id : {b, c})
    for (NodeId in : g.inputs(id)) EXPECT_LT(in, id);
}

TEST(Backward, CompositeDacDenseGradientCheck) {
  std::mt19937_64 rng(11);
  const Tensor y = testutil::away_from_zero({4, 3}, rng);
  const Tensor w = testutil::uniform({5, 3}, rng);
  Tensor bd = testutil::uniform({5, 3}, rng, -0.5, 0.5);
  auto f = [&](Graph<double>& g, NodeId xi) {
    return ops::mean(g, ops::relu(g, ops::dense_dac(g, g.constant(y), xi, g.constant(bd))));
  };
  EXPECT_LT(grad_check<double>(f, w, 1e-6), 1e-5);
}

TEST(GradCheck, ExactForLinearFunction) {
  auto f = [](Graph<double>& g, NodeId xi) { return ops::sum(g, xi); };
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    const Tensor small = testutil::uniform({7}, rng, -0.1, 0.1);
    EXPECT_LT(grad_check<double>(f, small, 1e-6), 1e-10);
    // With |f| near 1 the only error left is output rounding: one ulp over the step.
    const Tensor x = testutil::uniform({7}, rng);
    double mag = 0;
    for (double v : x.data()) mag += std::abs(v);
    const double noise = 2 * std::nextafter(mag + 1, 1e9) - 2 * (mag + 1);
    EXPECT_LE(grad_check<double>(f, x, 1e-6), noise / 2e-6);
  }
}

TEST(GradCheck, ReluAwayFromKink) {
  std::mt19937_64 rng(4);
  const Tensor x = testutil::away_from_zero({9}, rng);
  auto f = [](Graph<double>& g, NodeId xi) { return ops::sum(g, ops::relu(g, xi)); };
  EXPECT_LT(grad_check<double>(f, x, 1e-6), 1e-6);
}

TEST(GradCheck, DacConvLayerMean) {
  std::mt19937_64 rng(8);
  const Tensor k = testutil::uniform({3, 3, 3, 2}, rng);
  const Tensor bd = testutil::uniform({3, 2}, rng, -0.5, 0.5);
  Tensor x;
  for (int tries = 0;; ++tries) {
    x = testutil::uniform({2, 5, 5, 2}, rng);
    Graph<double> probe;
    ops::conv2d_dac(probe, probe.constant(x), probe.constant(k), probe.constant(bd), 1, Padding::same);
    if (testutil::relu_margin(probe) > 1e-3) break;
    ASSERT_LT(tries, 100);
  }
  auto f = [&](Graph<double>& g, NodeId xi) {
    return ops::mean(g, ops::conv2d_dac(g, xi, g.constant(k), g.constant(bd), 1, Padding::same));
  };
  EXPECT_LT(grad_check<double>(f, x, 1e-6), 1e-5);
}

TEST(GradCheck, RejectsNonPositiveStep) {
  EXPECT_THROW(grad_check<double>([](Graph<double>& g, NodeId x) { return ops::sum(g, x); }, Tensor::vector({1}), 0.0),
               ContractError);
}

TEST(Graph, EvaluationIsDeterministic) {
  std::mt19937_64 rng(9);
  const Tensor x = testutil::uniform({2, 6, 6, 3}, rng);
  const Tensor k = testutil::uniform({3, 3, 4, 3}, rng);
  const Tensor bd = testutil::uniform({4, 3}, rng);
  auto run = [&] {
    Graph<double> g;
    NodeId kk = g.parameter(k);
    NodeId y = ops::conv2d_dac(g, g.constant(x), kk, g.constant(bd), 1, Padding::same);
    NodeId l = ops::mean(g, ops::relu(g, y));
    g.backward(l);
    return std::make_pair(g.value(y), g.grad(kk));
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Graph, FloatModeEvaluates) {
  Graph<float> g;
  NodeId p = g.parameter(BasicTensor<float>::vector({1.5f, -2.0f}));
  g.backward(ops::sum(g, ops::mul(g, p, p)));
  EXPECT_FLOAT_EQ(g.grad(p)[0], 3.0f);
  EXPECT_FLOAT_EQ(g.grad(p)[1], -4.0f);
}
