#include <gtest/gtest.h>

#include <random>

#include "dacnet/complexity.hpp"
#include "dacnet/resnet.hpp"

using namespace dacnet;
using namespace dacnet::complexity;

TEST(Formulas, DenseExamples) {
  EXPECT_EQ(flops_dense(Kind::std, 16, 32), 1056u);
  EXPECT_EQ(flops_dense(Kind::dac, 16, 32), 1568u);
  EXPECT_EQ(weights_dense(Kind::std, 16, 32), 544u);
  EXPECT_EQ(weights_dense(Kind::dac, 16, 32), 1056u);
  EXPECT_EQ(weights_dense(Kind::std, 1, 1), 2u);
  EXPECT_EQ(weights_dense(Kind::dac, 1, 1), 3u);
  EXPECT_NEAR(double(flops_dense(Kind::dac, 16, 32)) / flops_dense(Kind::std, 16, 32), 1.485, 1e-3);
}

TEST(Formulas, ConvExamples) {
  EXPECT_EQ(flops_conv(Kind::std, 3, 16, 32, 8, 8), 591872u);
  EXPECT_EQ(flops_conv(Kind::dac, 3, 16, 32, 8, 8), 624640u);
  EXPECT_EQ(weights_conv(Kind::std, 3, 16, 32), 4640u);
  EXPECT_EQ(weights_conv(Kind::dac, 3, 16, 32), 5152u);
  EXPECT_NEAR(624640.0 / 591872.0, 1.05536, 1e-5);
}

TEST(Formulas, Errors) {
  EXPECT_THROW(flops_dense(Kind::std, 0, 3), ContractError);
  EXPECT_THROW(weights_dense(Kind::dac, 3, 0), ContractError);
  EXPECT_THROW(flops_conv(Kind::std, 2, 3, 3, 4, 4), ContractError);
  EXPECT_THROW(weights_conv(Kind::dac, 4, 3, 3), ContractError);
}

TEST(Formulas, AsymptoticOverheads) {
  const double fd = double(flops_dense(Kind::dac, 1024, 64)) / flops_dense(Kind::std, 1024, 64);
  const double wd = double(weights_dense(Kind::dac, 1024, 64)) / weights_dense(Kind::std, 1024, 64);
  EXPECT_NEAR(fd, 1.5, 1.5e-3);
  EXPECT_NEAR(wd, 2.0, 2e-3);
  const double fc = double(flops_conv(Kind::dac, 3, 256, 64, 8, 8)) / flops_conv(Kind::std, 3, 256, 64, 8, 8);
  const double wc = double(weights_conv(Kind::dac, 3, 256, 64)) / weights_conv(Kind::std, 3, 256, 64);
  EXPECT_NEAR(fc, 1 + 1.0 / 18, 0.005 * (1 + 1.0 / 18));
  EXPECT_NEAR(wc, 1 + 1.0 / 9, 0.005 * (1 + 1.0 / 9));
}

TEST(Report, SingleDenseLayerMatchesFormula) {
  std::mt19937_64 rng(3);
  NetworkSpec net;
  net.input_shape = {16};
  net.add("fc", layers::make_dense_std(16, 32, rng));
  const auto r = model_report(net, {16});
  ASSERT_EQ(r.entries.size(), 1u);
  EXPECT_EQ(r.flops_formula, 1056u);
  EXPECT_EQ(r.flops_instrumented, 1056u);
  EXPECT_EQ(r.weights, 544u);
  EXPECT_EQ(r.flops_uncovered, 0u);
}

TEST(Report, FormulaEqualsInstrumentedOnRandomShapes) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> dim(1, 12), hw(1, 9), stride(1, 2), odd(0, 2), coin(0, 1);
  for (int draw = 0; draw < 50; ++draw) {
    const std::size_t m = dim(rng), n = dim(rng);
    // dense std, dense dac with and without output bias
    for (int variant = 0; variant < 3; ++variant) {
      NetworkSpec net;
      net.input_shape = {m};
      if (variant == 0)
        net.add("l", layers::make_dense_std(m, n, rng));
      else
        net.add("l", layers::make_dense_dac(m, n, rng, variant == 2));
      const auto r = model_report(net, {m});
      EXPECT_EQ(r.entries[0].flops_formula, r.entries[0].flops_instrumented) << "dense variant " << variant;
    }
    const std::size_t L = 2 * odd(rng) + 1, H = hw(rng), W = hw(rng), s = stride(rng);
    for (int variant = 0; variant < 2; ++variant) {
      NetworkSpec net;
      net.input_shape = {H, W, m};
      if (variant == 0)
        net.add("c", layers::make_conv_std(L, m, n, rng, s, coin(rng) == 1));
      else
        net.add("c", layers::make_conv_dac(L, m, n, rng, s));
      const auto r = model_report(net, {H, W, m});
      EXPECT_EQ(r.entries[0].flops_formula, r.entries[0].flops_instrumented)
          << "conv variant " << variant << " L=" << L << " m=" << m << " n=" << n << " " << H << "x" << W
          << " stride " << s;
    }
  }
}

TEST(Report, DacConvStrideOneMatchesClosedForm) {
  std::mt19937_64 rng(5);
  NetworkSpec net;
  net.input_shape = {8, 8, 16};
  net.add("c", layers::make_conv_dac(3, 16, 32, rng));
  const auto r = model_report(net, {8, 8, 16});
  // no output bias, so drop the +1 term
  EXPECT_EQ(r.flops_instrumented, flops_conv(Kind::dac, 3, 16, 32, 8, 8, false));
  EXPECT_EQ(r.weights, weights_conv(Kind::dac, 3, 16, 32, false));
}

TEST(Report, TotalsAreSumsOfEntries) {
  resnet::ResNetConfig cfg;
  cfg.n_blocks_per_stage = 1;
  cfg.input_shape = {8, 8, 3};
  const auto r = model_report(resnet::build_resnet(cfg), cfg.input_shape);
  std::uint64_t f = 0, fi = 0, u = 0, w = 0;
  for (const auto& e : r.entries) {
    if (e.covered) {
      f += e.flops_formula;
      fi += e.flops_instrumented;
    } else {
      u += e.flops_instrumented;
    }
    w += e.weights;
  }
  EXPECT_EQ(f, r.flops_formula);
  EXPECT_EQ(fi, r.flops_instrumented);
  EXPECT_EQ(u, r.flops_uncovered);
  EXPECT_EQ(w, r.weights);
  const auto j = r.json();
  EXPECT_EQ(j["totals"]["flops_total"].get<std::uint64_t>(), r.flops_total());
  EXPECT_NE(r.text().find("uncovered"), std::string::npos);
}

TEST(Report, ShapeMismatchThrows) {
  std::mt19937_64 rng(1);
  NetworkSpec net;
  net.input_shape = {4};
  net.add("fc", layers::make_dense_std(4, 2, rng));
  EXPECT_THROW(model_report(net, {5}), DimensionError);
}

TEST(Report, ResNet20RatioAt80) {
  resnet::ResNetConfig cfg;
  cfg.input_shape = {80, 80, 3};
  const auto s = model_report(resnet::build_resnet(cfg), cfg.input_shape);
  cfg.dac = true;
  const auto d = model_report(resnet::build_resnet(cfg), cfg.input_shape);
  const double ratio = double(d.flops_total()) / double(s.flops_total());
  EXPECT_NEAR(ratio, 0.542 / 0.509, 0.01 * 0.542 / 0.509) << "std " << s.flops_total() << " dac " << d.flops_total();
  EXPECT_EQ(d.flops_formula, d.flops_instrumented);
}
