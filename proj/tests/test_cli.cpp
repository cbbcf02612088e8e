#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "tconv/cli.hpp"

namespace tconv::cli {
namespace {

struct RunResult {
  int code;
  std::string out, err;
};

RunResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "tconv");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("tconv_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(slurp(p));
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

double number_after(const std::string& text, const std::string& label) {
  std::smatch m;
  const std::regex re(label + " ([-+0-9.eE]+)");
  if (!std::regex_search(text, m, re)) throw std::runtime_error("missing '" + label + "' in output");
  return std::stod(m[1]);
}

fs::path save_cnn(const fs::path& dir, std::vector<std::size_t> widths, std::uint64_t seed = 3) {
  nn::CnnSpec spec{3, 16, 4, {}};
  for (std::size_t i = 0; i < widths.size(); ++i) spec.blocks.push_back({widths[i], 3, i == 0 ? 2u : 1u, 1});
  const auto p = dir / "net.tcn";
  nn::save_network(p, nn::make_cnn(spec, seed));
  return p;
}

TEST(CliEquivCheck, DefaultSweepPasses) {
  const auto dir = scratch("equiv_default");
  const auto r = run_cli({"equiv-check", "--out", dir.string()});
  EXPECT_EQ(r.code, kOk) << r.err;
  EXPECT_NE(r.out.find("over 200 configurations"), std::string::npos);
  EXPECT_LE(number_after(r.out, "max deviation"), 1e-9);
  EXPECT_EQ(read_csv(dir / "equiv.csv").size(), 201u);
}

TEST(CliEquivCheck, InjectedFaultFailsWithReproducibleSeed) {
  const auto dir = scratch("equiv_fault");
  const auto r = run_cli({"equiv-check", "--configs", "5", "--seed", "40", "--inject-fault", "--out", dir.string()});
  EXPECT_EQ(r.code, kFailure);
  EXPECT_NE(r.out.find("--configs 1 --seed 40 --inject-fault"), std::string::npos) << r.out;
}

TEST(CliEquivCheck, SingleConfigIsDeterministic) {
  const auto dir = scratch("equiv_single");
  const auto a = run_cli({"equiv-check", "--configs", "1", "--seed", "7", "--out", dir.string()});
  const auto b = run_cli({"equiv-check", "--configs", "1", "--seed", "7", "--out", dir.string()});
  EXPECT_EQ(a.code, kOk);
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out.find("seed 7 "), std::string::npos);
}

TEST(CliConfig, FlagsOverrideFileAndResolvedConfigIsWritten) {
  const auto dir = scratch("config_override");
  std::ofstream(dir / "cfg.json") << R"({"configs": 5, "seed": 3, "out": ")" << (dir / "o").string() << R"("})";
  const auto r = run_cli({"equiv-check", "--config", (dir / "cfg.json").string(), "--configs", "2"});
  ASSERT_EQ(r.code, kOk) << r.err;
  const auto resolved = json::parse(slurp(dir / "o" / "resolved_config.json"));
  EXPECT_EQ(resolved["command"], "equiv-check");
  EXPECT_EQ(resolved["configs"], 2);
  EXPECT_EQ(resolved["seed"], 3);
  EXPECT_EQ(resolved["precision"], "f64");
}

TEST(CliConfig, UsageErrorsExitTwo) {
  const auto dir = scratch("usage");
  std::ofstream(dir / "unknown.json") << R"({"rate": 0.5, "learning_rate": 0.1})";
  std::ofstream(dir / "badtype.json") << R"({"epochs": "ten"})";
  std::ofstream(dir / "negative.json") << R"({"epochs": -1})";
  std::ofstream(dir / "other.json") << R"({"command": "bench"})";
  std::ofstream(dir / "broken.json") << "{";
  const std::string out = (dir / "o").string();
  const std::vector<std::vector<std::string>> cases = {
      {},
      {"no-such-command"},
      {"train", "--bogus"},
      {"train", "--config", (dir / "unknown.json").string()},
      {"train", "--config", (dir / "badtype.json").string()},
      {"train", "--config", (dir / "negative.json").string()},
      {"train", "--config", (dir / "other.json").string()},
      {"train", "--config", (dir / "broken.json").string()},
      {"train", "--synthetic", "--epochs", "x", "--out", out},
      {"train", "--synthetic", "--rate", "1.0", "--out", out},
      {"train", "--synthetic", "--family", "shear", "--out", out},
      {"train", "--synthetic", "--measure", "random", "--out", out},
      {"train", "--out", out},
      {"train", "--synthetic", "--precision", "f32", "--out", out},
      {"bench", "--reps", "3", "--out", out},
      {"prune", "--out", out},
  };
  for (const auto& c : cases) {
    const auto r = run_cli(c);
    EXPECT_EQ(r.code, kUsage) << (c.empty() ? "<none>" : c.back()) << ": " << r.err;
  }
}

TEST(CliConfig, IoErrorsExitThree) {
  const auto dir = scratch("io");
  std::ofstream(dir / "garbage.tcn") << "not a checkpoint";
  const std::string out = (dir / "o").string();
  const std::vector<std::vector<std::string>> cases = {
      {"train", "--config", (dir / "missing.json").string()},
      {"train", "--data", (dir / "no_cifar").string(), "--out", out},
      {"prune", "--checkpoint", (dir / "missing.tcn").string(), "--out", out},
      {"prune", "--checkpoint", (dir / "garbage.tcn").string(), "--out", out},
      {"viz-filters", "--checkpoint", (dir / "garbage.tcn").string(), "--out", out},
      {"cost-report", "--checkpoint", (dir / "garbage.tcn").string(), "--out", out},
  };
  for (const auto& c : cases) EXPECT_EQ(run_cli(c).code, kIo) << c[2];
}

std::vector<std::string> small_train(const fs::path& out) {
  return {"train", "--synthetic", "--synthetic-samples", "48", "--image", "16", "--batch", "16", "--out", out.string()};
}

std::vector<std::string> templates_column(const fs::path& metrics) {
  std::vector<std::string> out;
  const auto rows = read_csv(metrics);
  EXPECT_EQ(rows.at(0).back(), "templates");
  for (std::size_t i = 1; i < rows.size(); ++i) out.push_back(rows[i].back());
  return out;
}

TEST(CliTrain, ZeroRateKeepsTemplateCountConstant) {
  const auto dir = scratch("train_zero");
  auto args = small_train(dir);
  args.insert(args.end(), {"--epochs", "5", "--rate", "0.0"});
  const auto r = run_cli(args);
  ASSERT_EQ(r.code, kOk) << r.err;
  EXPECT_EQ(templates_column(dir / "metrics.csv"), std::vector<std::string>(5, "16;16"));
  EXPECT_TRUE(fs::exists(dir / "checkpoint.tcn"));
}

TEST(CliTrain, TemplateTraceFollowsLinearRamp) {
  const auto dir = scratch("train_ramp");
  auto args = small_train(dir);
  args.insert(args.end(), {"--epochs", "10", "--rate", "0.5", "--family", "scalar", "--groups", "1",
                           "--ramp-epochs", "8", "--min-templates", "4"});
  ASSERT_EQ(run_cli(args).code, kOk);
  const auto trace = templates_column(dir / "metrics.csv");
  ASSERT_EQ(trace.size(), 10u);
  for (std::size_t e = 0; e < 10; ++e) {
    const auto m = std::to_string(templates_for_rate(16, rate_at_epoch(PruneSchedule{0.5, 8, 4}, e), 4));
    EXPECT_EQ(trace[e], m + ";" + m) << "epoch " << e;
  }
}

TEST(CliTrain, SameSeedGivesIdenticalCsvAndResolvedConfigReproduces) {
  const auto a = scratch("train_det_a"), b = scratch("train_det_b");
  auto args = small_train(a);
  args.insert(args.end(), {"--epochs", "3", "--rate", "0.5", "--ramp-epochs", "2", "--augment-flip"});
  ASSERT_EQ(run_cli(args).code, kOk);
  const std::string first = slurp(a / "metrics.csv");
  args[args.size() - 8] = b.string();
  ASSERT_EQ(run_cli(args).code, kOk);
  EXPECT_EQ(slurp(b / "metrics.csv"), first);
  fs::copy_file(a / "resolved_config.json", a / "again.json");
  fs::remove(a / "metrics.csv");
  ASSERT_EQ(run_cli({"train", "--config", (a / "again.json").string()}).code, kOk);
  EXPECT_EQ(slurp(a / "metrics.csv"), first);
  EXPECT_EQ(slurp(a / "checkpoint.tcn"), slurp(b / "checkpoint.tcn"));
}

TEST(CliPrune, ZeroRateIsFunctionPreserving) {
  const auto dir = scratch("prune_zero");
  const auto net = save_cnn(dir, {8, 16, 16});
  const auto r = run_cli({"prune", "--checkpoint", net.string(), "--rate", "0", "--image", "16", "--out",
                          (dir / "o").string()});
  ASSERT_EQ(r.code, kOk) << r.err;
  EXPECT_LE(number_after(r.out, "probe max deviation"), 1e-12);
}

TEST(CliPrune, MagnitudePlanKeepsTopHalfByL1) {
  const auto dir = scratch("prune_half");
  const auto path = save_cnn(dir, {8, 16, 16});
  const auto r = run_cli({"prune", "--checkpoint", path.string(), "--rate", "0.5", "--min-templates", "1",
                          "--image", "16", "--out", (dir / "o").string()});
  ASSERT_EQ(r.code, kOk) << r.err;
  const auto plan = load_plan(dir / "o" / "plan.txt");
  const auto net = nn::load_network(path);
  ASSERT_EQ(plan.entries.size(), 2u);
  for (const auto& e : plan.entries) {
    const auto& w = std::get<nn::DenseConv>(net.layers[e.layer_id]).weight;
    std::vector<std::pair<double, std::size_t>> l1;
    for (std::size_t n = 0; n < w.shape().n; ++n) {
      double s = 0;
      for (double v : w.item(n)) s += std::abs(v);
      l1.push_back({-s, n});
    }
    std::sort(l1.begin(), l1.end());
    std::vector<std::size_t> top;
    for (std::size_t i = 0; i < 8; ++i) top.push_back(l1[i].second);
    std::sort(top.begin(), top.end());
    EXPECT_EQ(e.kept, top) << "layer " << e.layer_id;
  }
  const auto pruned = nn::load_network(dir / "o" / "pruned.tcn");
  EXPECT_TRUE(std::holds_alternative<nn::TemplateConv>(pruned.layers[4]));
}

TEST(CliPrune, MinimumTemplatesLeavesSmallLayerUnchanged) {
  const auto dir = scratch("prune_min");
  const auto path = save_cnn(dir, {8, 8, 8});
  ASSERT_EQ(run_cli({"prune", "--checkpoint", path.string(), "--rate", "0.9", "--min-templates", "8", "--image",
                     "16", "--out", (dir / "o").string()})
                .code,
            kOk);
  const auto before = nn::load_network(path), after = nn::load_network(dir / "o" / "pruned.tcn");
  for (std::size_t id : {4u, 8u}) {
    ASSERT_TRUE(std::holds_alternative<nn::DenseConv>(after.layers[id]));
    EXPECT_EQ(std::get<nn::DenseConv>(after.layers[id]).weight, std::get<nn::DenseConv>(before.layers[id]).weight);
  }
  EXPECT_EQ(load_plan(dir / "o" / "plan.txt").find(4)->templates, 8u);
}

TEST(CliCostReport, RatiosAndTotals) {
  const auto dir = scratch("cost");
  auto r = run_cli({"cost-report", "--widths", "16,32", "--image", "16", "--out", (dir / "a").string()});
  ASSERT_EQ(r.code, kOk) << r.err;
  auto rows = read_csv(dir / "a" / "cost_report.csv");
  const auto header = rows[0];
  const auto col = [&](const std::string& name) {
    return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  };
  EXPECT_EQ(rows.back()[0], "total");
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(std::stod(rows[i][col("flops_ratio")]), 1.0);

  r = run_cli({"cost-report", "--widths", "16,32", "--image", "16", "--rate", "0.75", "--min-templates", "8",
               "--groups", "2", "--out", (dir / "b").string()});
  ASSERT_EQ(r.code, kOk) << r.err;
  rows = read_csv(dir / "b" / "cost_report.csv");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[2][col("C")], "16");
  EXPECT_EQ(rows[2][col("N")], "32");
  EXPECT_EQ(rows[2][col("M")], "8");
  EXPECT_EQ(rows[2][col("G")], "2");
  EXPECT_DOUBLE_EQ(std::stod(rows[2][col("flops_ratio")]), 0.34375);
  for (const char* c : {"baseline_macs", "macs", "params", "baseline_params"}) {
    EXPECT_EQ(std::stoull(rows[3][col(c)]), std::stoull(rows[1][col(c)]) + std::stoull(rows[2][col(c)])) << c;
  }
}

TEST(CliVizFilters, IdentityTilesMatchAndPrunedTilesAreBlack) {
  const auto dir = scratch("viz");
  const auto path = save_cnn(dir, {8, 16, 16});
  const auto out = dir / "o";
  const auto r = run_cli({"viz-filters", "--checkpoint", path.string(), "--rate", "0.5", "--min-templates", "4",
                          "--image", "16", "--out", out.string()});
  ASSERT_EQ(r.code, kOk) << r.err;
  const auto pruned_net = nn::load_network(path);
  for (std::size_t id : {4u, 8u}) {
    const auto load = [&](const char* v) {
      std::ifstream is(out / ("layer" + std::to_string(id) + "_" + v + ".pgm"), std::ios::binary);
      return read_pgm(is);
    };
    const auto orig = load("original"), recon = load("reconstructed"), zeroed = load("zeroed");
    EXPECT_EQ(orig.rows, 3u);
    EXPECT_EQ(orig.cols, 16u * 3 + 15);
    std::size_t identical = 0, black = 0;
    for (std::size_t n = 0; n < 16; ++n) {
      const bool kept = tile_bytes(zeroed, 3, n) == tile_bytes(orig, 3, n);
      if (kept) {
        EXPECT_EQ(tile_bytes(recon, 3, n), tile_bytes(orig, 3, n)) << "layer " << id << " output " << n;
        ++identical;
      } else {
        const auto t = tile_bytes(zeroed, 3, n);
        EXPECT_TRUE(std::all_of(t.begin(), t.end(), [](auto px) { return px == 0; }));
        ++black;
      }
    }
    EXPECT_EQ(identical, 8u);
    EXPECT_EQ(black, 8u);
  }
  EXPECT_EQ(read_csv(out / "filters.csv").size(), 1u + 2 * 3 * 16 * 9);
}

TEST(CliBench, WritesCsvSchema) {
  const auto dir = scratch("bench");
  const auto r = run_cli({"bench", "--in-channels", "8", "--out-channels", "16", "--image", "8", "--reps", "5",
                          "--rates", "0.25,0.5", "--out", dir.string()});
  ASSERT_EQ(r.code, kOk) << r.err;
  const auto rows = read_csv(dir / "bench.csv");
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"rate", "impl", "median_us", "p10", "p90", "stage_gather",
                                               "stage_template", "stage_transform"}));
  EXPECT_EQ(json::parse(slurp(dir / "resolved_config.json"))["precision"], "f32");
}

}  // namespace
}  // namespace tconv::cli
