#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "dacnet/approximator.hpp"
#include "dacnet/resnet.hpp"
#include "dacnet/serialize.hpp"
#include "test_util.hpp"

using namespace dacnet;
namespace fs = std::filesystem;

namespace {

NetworkSpec every_kind(std::mt19937_64& rng) {
  NetworkSpec net;
  net.input_shape = {6, 6, 2};
  auto cs = layers::make_conv_std(3, 2, 4, rng, 1, true);
  cs.bias = testutil::uniform({4}, rng);
  net.add("cs", cs);
  auto bn = layers::make_batchnorm(4);
  bn.running_mean = testutil::uniform({4}, rng);
  bn.running_var = testutil::uniform({4}, rng, 0.5, 2.0);
  bn.epsilon = 1e-5;
  net.add("bn", bn);
  net.add("r", ReluLayer{});
  net.add("begin", ResidualBegin{});
  auto cd = layers::make_conv_dac(3, 4, 4, rng);
  cd.dac_biases = testutil::uniform({4, 4}, rng);
  cd.out_bias = testutil::uniform({4}, rng);
  cd.padding = layers::Padding::same;
  net.add("cd", cd);
  net.add("end", ResidualEnd{});
  net.add("b", BiasLayer{testutil::uniform({4}, rng)});
  net.add("gap", GapLayer{});
  auto dd = layers::make_dense_dac(4, 3, rng, true, layers::Activation::relu);
  dd.dac_biases = testutil::uniform({3, 4}, rng);
  net.add("dd", dd);
  net.add("ds", layers::make_dense_std(3, 3, rng));
  return net;
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("dacnet_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Serialize, RoundTripEveryKindExact) {
  std::mt19937_64 rng(1);
  const auto net = every_kind(rng);
  const auto back = io::parse(io::dump(net));
  EXPECT_TRUE(back == net);
}

TEST(Serialize, RoundTripSparseLayer) {
  const auto net = approx::spike_nd_deep_network(3, std::vector<double>{0.1, -0.2, 0.3}, 0.25);
  EXPECT_TRUE(io::parse(io::dump(net)) == net);
}

TEST(Serialize, RoundTripResNets) {
  for (bool dac : {false, true}) {
    resnet::ResNetConfig cfg;
    cfg.dac = dac;
    cfg.n_blocks_per_stage = 1;
    const auto net = resnet::build_resnet(cfg);
    EXPECT_TRUE(io::parse(io::dump(net)) == net);
  }
}

TEST(Serialize, AwkwardDoublesSurvive) {
  NetworkSpec net;
  net.input_shape = {2};
  Tensor w({1, 2}, std::vector<double>{0.1 + 0.2, -1e-310});
  Tensor b({1}, std::vector<double>{1.0 / 3.0});
  net.add("fc", layers::DenseStdParams{w, b});
  const auto back = io::parse(io::dump(net));
  const auto& p = std::get<layers::DenseStdParams>(back.layers[0].layer);
  EXPECT_EQ(p.weights.storage()[0], 0.1 + 0.2);
  EXPECT_EQ(p.weights.storage()[1], -1e-310);
  EXPECT_EQ(p.bias.storage()[0], 1.0 / 3.0);
}

TEST(Serialize, ParameterTensorsAreNestedArrays) {
  std::mt19937_64 rng(2);
  NetworkSpec net;
  net.input_shape = {3};
  net.add("fc", layers::make_dense_std(3, 2, rng));
  const auto j = io::to_json(net);
  const auto& w = j["layers"][0]["tensors"]["weights"];
  EXPECT_EQ(w["shape"], (std::vector<std::size_t>{2, 3}));
  ASSERT_TRUE(w["data"].is_array());
  EXPECT_EQ(w["data"].size(), 2u);
  EXPECT_EQ(w["data"][0].size(), 3u);
  EXPECT_EQ(j["layers"][0]["kind"], "dense_std");
  EXPECT_EQ(j["version"], 1);
}

TEST(Serialize, LargeTensorsGoToSidecarBlob) {
  std::mt19937_64 rng(3);
  NetworkSpec net;
  net.input_shape = {400};
  net.add("big", layers::make_dense_std(400, 400, rng));  // 1.28 MB of weights
  net.add("small", layers::make_dense_std(400, 2, rng));
  const auto dir = temp_dir("blob");
  const auto path = dir / "net.json";
  io::save(net, path);
  std::ifstream f(path);
  const auto doc = nlohmann::json::parse(f);
  EXPECT_TRUE(doc["layers"][0]["tensors"]["weights"].contains("blob"));
  EXPECT_TRUE(doc["layers"][0]["tensors"]["bias"].contains("data"));
  EXPECT_TRUE(doc["layers"][1]["tensors"]["weights"].contains("data"));
  const auto blob = dir / doc["layers"][0]["tensors"]["weights"]["blob"].get<std::string>();
  // magic + rank + 2 dims + payload
  EXPECT_EQ(fs::file_size(blob), 8u + 8u + 16u + 400u * 400u * 8u);
  EXPECT_TRUE(io::load(path) == net);
  fs::remove_all(dir);
}

TEST(Serialize, MalformedDocumentsAreFormatErrors) {
  EXPECT_THROW(io::parse("{"), FormatError);
  EXPECT_THROW(io::parse(R"({"version":1,"layers":[{"kind":"maxpool"}]})"), FormatError);
  EXPECT_THROW(io::parse(R"({"version":7,"layers":[]})"), FormatError);
  EXPECT_THROW(
      io::parse(R"({"version":1,"layers":[{"kind":"bias","tensors":{"bias":{"shape":[3],"data":[1,2]}}}]})"),
      FormatError);
  EXPECT_THROW(io::parse(R"({"version":1,"layers":[{"kind":"dense_std","tensors":{}}]})"), FormatError);
  EXPECT_THROW(io::load("/nonexistent/dir/net.json"), IoError);
}

TEST(Model, ToSpecRoundTripsParameters) {
  std::mt19937_64 rng(4);
  const auto net = every_kind(rng);
  Model<double> m(net);
  EXPECT_TRUE(m.to_spec() == net);
}

TEST(Model, ParameterCountMatchesTensors) {
  std::mt19937_64 rng(5);
  NetworkSpec net;
  net.input_shape = {3};
  net.add("a", layers::make_dense_dac(3, 4, rng, true));
  net.add("b", layers::make_dense_std(4, 2, rng));
  // 12 weights + 12 edge biases + 4 output biases, then 8 + 2
  EXPECT_EQ(Model<double>(net).parameter_count(), 38u);
}

TEST(Model, EvaluateMatchesPredictAndSpecIsShapeChecked) {
  std::mt19937_64 rng(6);
  const auto net = every_kind(rng);
  const Tensor x = testutil::uniform({2, 6, 6, 2}, rng);
  Model<double> m(net);
  EXPECT_TRUE(evaluate(net, x) == m.predict(x));
  EXPECT_THROW(trace_shapes(net, {5, 5, 3}), DimensionError);
  const auto s = trace_shapes(net, {6, 6, 2});
  EXPECT_EQ(s.back(), Shape{3});
}

TEST(Model, FloatPrecisionTracksDouble) {
  std::mt19937_64 rng(7);
  const auto net = every_kind(rng);
  const Tensor x = testutil::uniform({2, 6, 6, 2}, rng);
  const Tensor a = Model<double>(net).predict(x);
  const auto b = Model<float>(net).predict(x.cast<float>());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.storage()[i], b.storage()[i], 1e-4);
}
