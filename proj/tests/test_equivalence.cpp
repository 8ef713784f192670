#include <gtest/gtest.h>

#include <random>

#include "dacnet/equivalence.hpp"
#include "test_util.hpp"

using namespace dacnet;
using namespace dacnet::equiv;

TEST(SharedRewrite, OneLayerIsDefinitionUnrolling) {
  ChainSpec c;
  c.layers.push_back({Tensor::matrix({{1, -2}}), Tensor::vector({0.5})});
  const ChainSpec p = standard_to_preactivated_shared(c);
  EXPECT_TRUE(p.layers[0].bias.empty());
  ASSERT_TRUE(p.final_filter);
  const std::vector<double> x{0.75, -0.25};
  EXPECT_EQ(evaluate(p, x), evaluate(c, x));
  EXPECT_EQ(evaluate(c, x)[0], 0.5 + 0.75 + 0.5);
}

TEST(SharedRewrite, RandomThreeLayerChains) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 20; ++rep) {
    const ChainSpec c = random_standard_chain({4, 6, 5, 3}, rng);
    const ChainSpec p = standard_to_preactivated_shared(c);
    const Tensor x = testutil::uniform({20, 4}, rng, -2, 2);
    EXPECT_LE(max_abs_diff(evaluate(c, x), evaluate(p, x)), 1e-12);
    // Spelled out with one bias per edge, the function is unchanged.
    EXPECT_LE(max_abs_diff(evaluate(shared_as_dac(p), x), evaluate(c, x)), 1e-12);
  }
}

TEST(SharedRewrite, ZeroBiasesNestRelus) {
  std::mt19937_64 rng(2);
  ChainSpec c = random_standard_chain({3, 4, 2}, rng);
  for (auto& L : c.layers) L.bias.fill(0);
  const Tensor x = testutil::uniform({1, 3}, rng);
  std::vector<double> h(4), y(2);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 3; ++j) s += c.layers[0].weights.at({i, j}) * x[j];
    h[i] = relu(s);
  }
  for (std::size_t i = 0; i < 2; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 4; ++j) s += c.layers[1].weights.at({i, j}) * h[j];
    y[i] = relu(s);
  }
  const std::vector<double> xv(x.data().begin(), x.data().end());
  EXPECT_EQ(evaluate(c, xv), y);
  EXPECT_EQ(evaluate(standard_to_preactivated_shared(c), xv), y);
}

TEST(SharedRewrite, RejectsWrongFlavorAndShapes) {
  std::mt19937_64 rng(3);
  ChainSpec c = random_standard_chain({3, 4}, rng);
  c.flavor = Flavor::dac;
  EXPECT_THROW(standard_to_preactivated_shared(c), ContractError);
  ChainSpec bad = random_standard_chain({3, 4, 2}, rng);
  bad.layers[1].weights = Tensor({2, 5});
  EXPECT_THROW(bad.validate(), DimensionError);
}

TEST(Replication, Examples) {
  EXPECT_EQ(replicate_input(Tensor::vector({5}), 3), Tensor::vector({5, 5, 5}));
  EXPECT_EQ(replicate_input(Tensor::vector({1, 2}), 2), Tensor::vector({1, 2, 1, 2}));
  const Tensor x = Tensor::vector({0.1, -3});
  EXPECT_EQ(replicate_input(x, 1), x);
  EXPECT_THROW(replicate_input(x, 0), ContractError);
}

TEST(Replication, CollapseExamples) {
  EXPECT_EQ(collapse_replicated_weights(Tensor::matrix({{1, 2, 3}}), 1), Tensor::matrix({{6}}));
  EXPECT_EQ(collapse_replicated_weights(Tensor({2, 6}), 3), Tensor({2, 3}));
}

TEST(Replication, StandardLayerSeesOnlyTheSum) {
  std::mt19937_64 rng(4);
  const std::size_t m = 2, r = 4, n = 3;
  const Tensor w = testutil::uniform({n, r * m}, rng);
  const Tensor b = testutil::uniform({n}, rng);
  ChainSpec wide, narrow;
  wide.layers.push_back({w, b});
  narrow.layers.push_back({collapse_replicated_weights(w, m), b});
  for (int k = 0; k < 100; ++k) {
    const Tensor x = testutil::uniform({m}, rng, -3, 3);
    const Tensor xr = replicate_input(x, r);
    const auto a = evaluate(wide, std::vector<double>(xr.data().begin(), xr.data().end()));
    const auto c = evaluate(narrow, std::vector<double>(x.data().begin(), x.data().end()));
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(a[i], c[i], 1e-12);
  }
}

TEST(Replication, RandomSplitsOfWeightsAgree) {
  std::mt19937_64 rng(5);
  const std::size_t m = 3, r = 5;
  const Tensor w = testutil::uniform({2, m}, rng);
  const Tensor b = testutil::uniform({2}, rng);
  ChainSpec base;
  base.layers.push_back({w, b});
  for (int rep = 0; rep < 20; ++rep) {
    // Split each weight into r random parts that sum to it.
    Tensor split({2, r * m});
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double rest = w.at({i, j});
        for (std::size_t k = 0; k + 1 < r; ++k) {
          const double part = std::uniform_real_distribution<double>(-1, 1)(rng);
          split.at({i, k * m + j}) = part;
          rest -= part;
        }
        split.at({i, (r - 1) * m + j}) = rest;
      }
    ChainSpec wide;
    wide.layers.push_back({split, b});
    const Tensor x = testutil::uniform({m}, rng, -2, 2);
    const Tensor xr = replicate_input(x, r);
    const auto a = evaluate(wide, std::vector<double>(xr.data().begin(), xr.data().end()));
    const auto c = evaluate(base, std::vector<double>(x.data().begin(), x.data().end()));
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(a[i], c[i], 1e-12);
  }
}

TEST(TwoLayerReconstruction, SingleTerm) {
  const TwoLayerStd t = dac1d_to_two_layer_standard({1}, {0});
  EXPECT_EQ(t.hidden_w, std::vector<double>{1});
  EXPECT_EQ(t.out_w, std::vector<double>{1});
  for (double x : {-1.0, 0.0, 0.3, 2.0}) EXPECT_EQ(t(x), relu(x));
}

TEST(TwoLayerReconstruction, SpikeOnGrid) {
  const std::vector<double> w{1, -2, 1}, b{-1, 0, 1};
  const TwoLayerStd t = dac1d_to_two_layer_standard(w, b);
  for (int i = 0; i <= 200; ++i) {
    const double x = -2.0 + 4.0 * i / 200;
    EXPECT_NEAR(t(x), dac1d(w, b, x), 1e-12);
    EXPECT_NEAR(t(x), std::max(0.0, 1 - std::abs(x)), 1e-12);
  }
}

TEST(TwoLayerReconstruction, RandomOnGrid) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-2, 2);
  std::vector<double> w(5), b(5);
  for (auto& v : w) v = u(rng);
  for (auto& v : b) v = u(rng);
  const TwoLayerStd t = dac1d_to_two_layer_standard(w, b);
  for (int i = 0; i <= 200; ++i) {
    const double x = -3.0 + 6.0 * i / 200;
    EXPECT_NEAR(t(x), dac1d(w, b, x), 1e-12);
  }
}

TEST(TwoLayerReconstruction, NormalizationKeepsFunction) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-2, 2);
  TwoLayerStd f;
  for (int j = 0; j < 6; ++j) {
    f.hidden_w.push_back(j == 2 ? 0.0 : u(rng));
    f.hidden_b.push_back(u(rng));
    f.out_w.push_back(u(rng));
  }
  f.out_bias = 0.25;
  const TwoLayerStd t = normalize_hidden(f);
  EXPECT_EQ(t.out_w.size(), 5u);
  for (double hw : t.hidden_w) EXPECT_EQ(std::abs(hw), 1.0);
  for (int i = 0; i <= 200; ++i) {
    const double x = -3.0 + 6.0 * i / 200;
    EXPECT_NEAR(t(x), f(x), 1e-12);
  }
}

TEST(NonShared, WitnessIsNotReachableBySharedBiases) {
  const ChainSpec w = nonshared_witness();
  EXPECT_DOUBLE_EQ(evaluate(w, std::vector<double>{-2})[0], 1.0);
  EXPECT_DOUBLE_EQ(evaluate(w, std::vector<double>{-0.25})[0], 0.5);
  EXPECT_DOUBLE_EQ(evaluate(w, std::vector<double>{1})[0], 0.0);
  const auto res = search_shared_reassignment();
  EXPECT_EQ(res.candidates, 41u * 41u * 41u);
  EXPECT_GT(res.best_deviation, 0.05);
}
