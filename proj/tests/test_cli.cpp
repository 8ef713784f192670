#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "dacnet/cli.hpp"

using namespace dacnet;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream o, e;
  Run r;
  r.code = cli::run(args, o, e);
  r.out = o.str();
  r.err = e.str();
  return r;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dacnet_cli_" + std::to_string(::getpid())) / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p.parent_path());
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int exec(const std::string& args) {
  const int st = std::system((std::string(DACNET_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

const std::string small_train = R"({"total_iters":60,"batch_size":24,"base_lr":0.05,"lr_boundaries":[40]})";

}  // namespace

TEST(Usage, ExitCodes) {
  EXPECT_EQ(run({}).code, cli::exit_usage);
  EXPECT_EQ(run({"bogus"}).code, cli::exit_usage);
  EXPECT_EQ(run({"--help"}).code, cli::exit_ok);
  const auto r = run({"train", "--model", "mlp-dac-4", "--out", scratch("nodata").string()});
  EXPECT_EQ(r.code, cli::exit_usage);
  EXPECT_NE(r.err.find("--data"), std::string::npos);
  EXPECT_EQ(run({"flops", "--model", "no-such-model"}).code, cli::exit_usage);
  EXPECT_EQ(run({"flops", "--model", "resnet20", "--input-shape", "80x0x3"}).code, cli::exit_usage);
}

TEST(Usage, BinaryHonoursContract) {
  EXPECT_EQ(exec("train --model resnet20-dac --out /tmp"), 2);
  EXPECT_EQ(exec("approx --dim 1 --fn sin_pi --epsilon 0"), 2);
  EXPECT_EQ(exec("demo square"), 0);
  EXPECT_EQ(exec("equiv --layers 2 --width 4"), 0);
}

TEST(Usage, SeedFallsBackToEnvironment) {
  const auto a = run({"equiv", "--seed", "7", "--json"});
  ::setenv("DACNET_SEED", "7", 1);
  const auto b = run({"equiv", "--json"});
  ::setenv("DACNET_SEED", "not-a-number", 1);
  EXPECT_EQ(run({"equiv"}).code, cli::exit_usage);
  ::unsetenv("DACNET_SEED");
  EXPECT_EQ(a.out, b.out);
}

TEST(Approx, RejectsNonPositiveEpsilon) {
  EXPECT_EQ(run({"approx", "--dim", "1", "--fn", "sin_pi", "--epsilon", "0"}).code, cli::exit_usage);
  EXPECT_EQ(run({"approx", "--dim", "1", "--fn", "sin_pi", "--epsilon", "-1"}).code, cli::exit_usage);
  EXPECT_EQ(run({"approx", "--dim", "0", "--fn", "sin_pi", "--epsilon", "0.1"}).code, cli::exit_usage);
  EXPECT_EQ(run({"approx", "--dim", "1", "--fn", "nope", "--epsilon", "0.1"}).code, cli::exit_usage);
}

TEST(Approx, SinCertifiedAndEmitted) {
  const auto net = scratch("sin") / "net.json";
  std::filesystem::create_directories(net.parent_path());
  const auto r = run({"approx", "--dim", "1", "--fn", "sin_pi", "--epsilon", "0.05", "--emit", net.string()});
  ASSERT_EQ(r.code, cli::exit_ok) << r.err;
  EXPECT_NE(r.out.find("status: certified"), std::string::npos);
  const auto cert = slurp(std::filesystem::path(net).replace_extension(".cert.txt"));
  EXPECT_NE(cert.find("sup_error:"), std::string::npos);

  // Re-measure the emitted network from disk.
  const auto spec = io::load(net);
  const auto f = *approx::named_function("sin_pi");
  EXPECT_LT(approx::sup_error(spec, f, 1, 1001), 0.05);

  const auto j = json::parse(run({"approx", "--dim", "1", "--fn", "sin_pi", "--epsilon", "0.05", "--json"}).out);
  EXPECT_TRUE(j["ok"].get<bool>());
  EXPECT_LT(j["sup_error"].get<double>(), 0.05);
}

TEST(Approx, ProductWidthsInCertificate) {
  const auto r = run({"approx", "--dim", "2", "--fn", "product", "--epsilon", "0.1", "--json"});
  ASSERT_EQ(r.code, cli::exit_ok) << r.err;
  const auto j = json::parse(r.out);
  const auto k = j["k"].get<std::size_t>();
  EXPECT_EQ(j["widths"].get<std::vector<std::size_t>>(), (std::vector<std::size_t>{2 * k + 1, 1}));
  EXPECT_LE(j["max_fan_in"][0].get<std::size_t>(), 4u);
  EXPECT_LT(j["sup_error"].get<double>(), 0.1);
}

TEST(Approx, UnreachableEpsilonExitsThree) {
  const auto r = run({"approx", "--dim", "1", "--fn", "sin_pi", "--epsilon", "1e-6", "--mesh-cap", "4"});
  EXPECT_EQ(r.code, cli::exit_unmet);
  EXPECT_NE(r.err.find("mesh cap 4 reached"), std::string::npos);
}

TEST(Approx, TabulatedFunction) {
  const auto csv = scratch("fn.csv");
  {
    std::ofstream o(csv);
    o << "x,f\n";
    for (int i = -20; i <= 20; ++i) o << i / 20.0 << "," << std::abs(i / 20.0) << "\n";
  }
  const auto r = run({"approx", "--dim", "1", "--fn", csv.string(), "--epsilon", "0.05", "--json"});
  ASSERT_EQ(r.code, cli::exit_ok) << r.err;
  EXPECT_LT(json::parse(r.out)["sup_error"].get<double>(), 0.05);

  std::ofstream(csv) << "0,1\n0.5,oops\n";
  EXPECT_EQ(run({"approx", "--dim", "1", "--fn", csv.string(), "--epsilon", "0.05"}).code, cli::exit_usage);
}

TEST(Flops, ResNetRatiosAt80) {
  auto total = [](const std::string& m) {
    const auto r = run({"flops", "--model", m, "--input-shape", "80x80x3", "--json"});
    EXPECT_EQ(r.code, cli::exit_ok) << r.err;
    return json::parse(r.out)["totals"]["flops_total"].get<double>();
  };
  const double ratio = total("resnet20-dac") / total("resnet20");
  EXPECT_NEAR(ratio, 0.542 / 0.509, 0.01 * 0.542 / 0.509);
}

TEST(Flops, DensePresetMatchesFormula) {
  const auto r = run({"flops", "--model", "dense-std-64x10", "--json"});
  ASSERT_EQ(r.code, cli::exit_ok) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["totals"]["flops_total"].get<std::uint64_t>(), complexity::flops_dense(complexity::Kind::std, 64, 10));
  const auto d = json::parse(run({"flops", "--model", "dense-dac-64x10", "--json"}).out);
  EXPECT_EQ(d["totals"]["flops_total"].get<std::uint64_t>(), complexity::flops_dense(complexity::Kind::dac, 64, 10));
}

TEST(Flops, FormulaColumnMatchesInstrumented) {
  for (const char* m : {"resnet20", "resnet20-dac", "resnet14-v2-dac"}) {
    const auto r = run({"flops", "--model", m, "--input-shape", "16x16x3"});
    ASSERT_EQ(r.code, cli::exit_ok) << r.err;
    EXPECT_NE(r.out.find("flops_formula"), std::string::npos);
    // The text table is followed by the JSON document on the last line.
    std::string body = r.out;
    while (!body.empty() && body.back() == '\n') body.pop_back();
    const auto last = body.substr(body.rfind('\n') + 1);
    const auto j = json::parse(last);
    std::size_t covered = 0;
    for (const auto& row : j["layers"])
      if (row.contains("flops_formula")) {
        ++covered;
        EXPECT_EQ(row["flops_formula"], row["flops_instrumented"]) << row["name"];
      }
    EXPECT_GT(covered, 0u);
  }
}

TEST(Flops, AcceptsSavedSpec) {
  const auto p = scratch("square.json");
  io::save(cli::square_construction(), p);
  const auto r = run({"flops", "--model", p.string(), "--json"});
  ASSERT_EQ(r.code, cli::exit_ok) << r.err;
  EXPECT_EQ(json::parse(r.out)["totals"]["flops_total"].get<std::uint64_t>(),
            complexity::flops_dense(complexity::Kind::dac, 2, 2, false) +
                complexity::flops_dense(complexity::Kind::std, 2, 1));
}

TEST(Equiv, DefaultRunWithinTolerance) {
  const auto r = run({"equiv", "--layers", "3", "--width", "8", "--seed", "1", "--samples", "100"});
  EXPECT_EQ(r.code, cli::exit_ok);
  std::smatch m;
  const std::regex sci(R"(max_abs_deviation: (-?\d\.\d+e[+-]\d+))");
  ASSERT_TRUE(std::regex_search(r.out, m, sci)) << r.out;
  EXPECT_LE(std::stod(m[1]), 1e-12);
}

TEST(Equiv, SingleLayerIsExact) {
  const auto j = json::parse(run({"equiv", "--layers", "1", "--json"}).out);
  EXPECT_EQ(j["max_abs_deviation"].get<double>(), 0.0);
  EXPECT_EQ(run({"equiv", "--layers", "0"}).code, cli::exit_usage);
}

TEST(Demo, SquareConstruction) {
  const auto r = run({"demo", "square"});
  ASSERT_EQ(r.code, cli::exit_ok);
  EXPECT_NE(r.out.find("g(f(0,0)) = 1\n"), std::string::npos);
  EXPECT_NE(r.out.find("g(f(1,1)) = -1\n"), std::string::npos);
  const auto j = json::parse(run({"demo", "square", "--json"}).out);
  EXPECT_EQ(j["correct"], j["samples"]);
  EXPECT_EQ(j["g_f_origin"].get<double>(), 1.0);
  EXPECT_EQ(j["g_f_one_one"].get<double>(), -1.0);
}

TEST(Demo, ThreePointCertificates) {
  const auto r = run({"demo", "three-point", "--json"});
  ASSERT_EQ(r.code, cli::exit_ok);
  const auto j = json::parse(r.out);
  EXPECT_TRUE(j["linear"]["inseparable"].get<bool>());
  EXPECT_LT(j["linear"]["best_grid_accuracy"].get<double>(), 1.0);
  EXPECT_TRUE(j["dac"]["separates"].get<bool>());
}

TEST(Demo, TrainedVariantsReachFullAccuracy) {
  const auto sq = json::parse(run({"demo", "square", "--train", "--json"}).out);
  EXPECT_EQ(sq["held_out_accuracy"].get<double>(), 1.0);
  EXPECT_EQ(sq["train_accuracy"].get<double>(), 1.0);
  for (const char* seed : {"1", "2", "3"}) {
    const auto r = run({"demo", "three-point", "--train", "--seed", seed, "--json"});
    EXPECT_EQ(r.code, cli::exit_ok) << seed;
    EXPECT_EQ(json::parse(r.out)["dac"]["accuracy"].get<double>(), 1.0) << seed;
  }
  EXPECT_EQ(run({"demo", "circle"}).code, cli::exit_usage);
}

TEST(Train, WritesHistoryModelAndSummary) {
  const auto dir = scratch("blobs");
  const auto r = run({"train", "--model", "mlp-dac-8", "--data", "synthetic:blobs", "--config", small_train, "--out",
                      dir.string(), "--json"});
  ASSERT_EQ(r.code, cli::exit_ok) << r.err;
  for (const char* f : {"history.csv", "model.json", "summary.json", "summary.txt"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  const auto summary = json::parse(r.out);
  EXPECT_EQ(summary, json::parse(slurp(dir / "summary.json")));
  const auto spec = io::load(dir / "model.json");
  const auto ds = cli::resolve_data("synthetic:blobs", 1);
  EXPECT_DOUBLE_EQ(training::spec_error(spec, ds, ds.split.train), summary["final_train_err"].get<double>());
  EXPECT_EQ(slurp(dir / "history.csv").rfind("epoch,train_err,val_err,test_err,train_loss,lr\n", 0), 0u);
}

TEST(Train, ReplicatesReportEarlyStopping) {
  const auto dir = scratch("reps");
  const auto r = run({"train", "--model", "mlp-dac-4", "--data", "synthetic:blobs", "--config",
                      R"({"total_iters":200,"batch_size":60,"base_lr":0.02})", "--out", dir.string(),
                      "--replicates", "5"});
  ASSERT_EQ(r.code, cli::exit_ok) << r.err;
  EXPECT_NE(r.out.find("m = "), std::string::npos);
  EXPECT_NE(r.out.find("T_bar = "), std::string::npos);
  EXPECT_NE(r.out.find("stderr = "), std::string::npos);
  const auto j = json::parse(slurp(dir / "summary.json"));
  for (const char* k : {"m", "t_bar", "stderr", "var_bound"}) EXPECT_TRUE(j["early_stop"].contains(k)) << k;
  EXPECT_EQ(j["replicates"].size(), 5u);
  for (int k = 1; k <= 5; ++k) EXPECT_TRUE(std::filesystem::exists(dir / ("history_" + std::to_string(k) + ".csv")));
  const auto m = j["early_stop"]["m"].get<std::size_t>();
  EXPECT_GE(m, 3u);
  EXPECT_LE(m, j["replicates"][0]["epochs"].get<std::size_t>() - 2);
}

TEST(Train, ConfigAndShapeErrors) {
  const auto dir = scratch("errors").string();
  EXPECT_EQ(run({"train", "--model", "mlp-dac-4", "--data", "synthetic:blobs", "--config", R"({"lr":1})", "--out",
                 dir})
                .code,
            cli::exit_usage);
  EXPECT_EQ(run({"train", "--model", "mlp-dac-4", "--data", "synthetic:nothing", "--out", dir}).code,
            cli::exit_usage);
  EXPECT_EQ(run({"train", "--model", "dense-dac-5x2", "--data", "synthetic:blobs", "--out", dir}).code,
            cli::exit_usage);
  // too few epochs for the early-stopping window
  EXPECT_EQ(run({"train", "--model", "mlp-dac-4", "--data", "synthetic:blobs", "--config", small_train, "--out", dir,
                 "--replicates", "5"})
                .code,
            cli::exit_usage);
  // the three-point set has no validation split
  EXPECT_EQ(run({"train", "--model", "mlp-dac-4", "--data", "synthetic:three-point", "--out", dir, "--replicates",
                 "2"})
                .code,
            cli::exit_usage);
}

TEST(Train, RuntimeFailureExitsFour) {
  const auto file = scratch("occupied");
  std::ofstream(file) << "x";
  EXPECT_EQ(run({"train", "--model", "mlp-dac-4", "--data", "synthetic:blobs", "--config", small_train, "--out",
                 (file / "sub").string()})
                .code,
            cli::exit_failure);
}

TEST(Train, SeedControlsRun) {
  auto hist = [](const std::vector<std::string>& extra) {
    const auto dir = scratch("seeded");
    std::vector<std::string> a{"train", "--model", "mlp-dac-4", "--data", "synthetic:blobs", "--config", small_train,
                               "--out", dir.string()};
    a.insert(a.end(), extra.begin(), extra.end());
    EXPECT_EQ(run(a).code, cli::exit_ok);
    return slurp(dir / "history.csv");
  };
  const auto a = hist({"--seed", "5"});
  EXPECT_EQ(a, hist({"--seed", "5", "--threads", "1"}));
  EXPECT_NE(a, hist({"--seed", "6"}));
}

TEST(Train, ResNetOnSquareReachesLowError) {
  const auto dir = scratch("resnet_square");
  const auto r = run({"train", "--model", "resnet20-dac", "--data", "synthetic:square", "--out", dir.string(), "--json"});
  ASSERT_EQ(r.code, cli::exit_ok) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_LT(j["final_train_err"].get<double>(), 0.05);
  EXPECT_TRUE(std::filesystem::exists(dir / "model.json"));
  EXPECT_EQ(io::load(dir / "model.json").input_shape,
            (Shape{cli::vector_embed_side, cli::vector_embed_side, 2}));
}
