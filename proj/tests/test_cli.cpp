#include <doctest.h>

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dgsc/cli.hpp"
#include "dgsc/io.hpp"

using namespace dgsc;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "dgsc-test-cli";

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "dgsc");
  return cli_main(args);
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_text(p)); }

const std::vector<std::string> kTiny{
    "--set", "model.L=1",          "--set", "model.H=2",           "--set", "model.d_embed=8",
    "--set", "model.d_mlp=8",      "--set", "train.steps=60",      "--set", "train.batch_size=8",
    "--set", "train.n_linear=4",   "--set", "train.n_log=4",       "--set", "train.eval_size=64",
    "--set", "sgld.chains=2",      "--set", "sgld.steps=50",       "--set", "sgld.burn_in=10",
    "--set", "sgld.batch_size=16", "--set", "sgld.dataset_size=1024",
    "--set", "analysis.metrics_batch=16", "--set", "analysis.hessian_batch=16",
    "--set", "analysis.hutchinson_samples=10", "--set", "analysis.power_iters=50"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  return args;
}

}  // namespace

TEST_CASE("estimate-llc is reproducible") {
  fs::remove_all(kRoot / "llc");
  const std::vector<std::string> common{"estimate-llc", "--potential", "l1", "--set", "sgld.steps=20000",
                                        "--set", "sgld.burn_in=4000"};
  auto a = common, b = common;
  a.insert(a.end(), {"--run-dir", (kRoot / "llc" / "a").string()});
  b.insert(b.end(), {"--run-dir", (kRoot / "llc" / "b").string()});
  REQUIRE(run(a) == 0);
  REQUIRE(run(b) == 0);
  CHECK(read_text(kRoot / "llc" / "a" / "summary.json") == read_text(kRoot / "llc" / "b" / "summary.json"));
  const auto s = read_json(kRoot / "llc" / "a" / "summary.json");
  CHECK(std::abs(s["lambda_hat"].get<double>() - 1.0) < 0.2);
  CHECK(read_csv(kRoot / "llc" / "a" / "trace.csv", std::string("sgld_trace")).rows.size() > 0);
  CHECK(fs::exists(kRoot / "llc" / "a" / "trace.svg"));
}

TEST_CASE("volume-oracle on l2") {
  const fs::path dir = kRoot / "volume";
  fs::remove_all(dir);
  REQUIRE(run({"volume-oracle", "--potential", "l2", "--run-dir", dir.string()}) == 0);
  const auto v = read_json(dir / "volume.json");
  CHECK(std::abs(v["lambda"].get<double>() - 0.5) < 0.05);
}

TEST_CASE("detect-stages on the bundled fixture") {
  const fs::path dir = kRoot / "stages";
  fs::remove_all(dir);
  const fs::path fixture = fs::path(DGSC_FIXTURE_DIR) / "staircase_llc_curve.csv";
  REQUIRE(run({"detect-stages", "--curve", fixture.string(), "--run-dir", dir.string()}) == 0);
  const CsvTable b = read_csv(dir / "boundaries.csv", std::string("stage_boundaries"));
  REQUIRE(b.rows.size() == 3);
  const double planted[] = {1.5, 3.0, 4.6};
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(std::log10(b.number(i, "step")) - planted[i]) < 0.25);
  const std::string table = read_text(dir / "stages.txt");
  CHECK(table.find("LR4") != std::string::npos);
  CHECK(fs::exists(dir / "stages.svg"));
}

TEST_CASE("train, llc-curve and metrics on a tiny model") {
  const fs::path dir = kRoot / "tiny";
  fs::remove_all(dir);
  REQUIRE(run(with_tiny({"train", "--run-dir", (dir / "train").string()})) == 0);
  CHECK(read_csv(dir / "train" / "eval.csv").rows.size() > 0);
  REQUIRE(run({"llc-curve", "--train-dir", (dir / "train").string(), "--checkpoints", "4", "--hessian",
               "--run-dir", (dir / "curve").string()}) == 0);
  const CsvTable curve = read_csv(dir / "curve" / "llc_curve.csv", std::string("llc_curve"));
  CHECK(curve.rows.size() == 4);
  CHECK(read_csv(dir / "curve" / "hessian.csv", std::string("hessian_comparison")).rows.size() == 4);
  REQUIRE(run({"metrics", "--train-dir", (dir / "train").string(), "--run-dir", (dir / "metrics").string()}) == 0);
  for (const char* f : {"loss", "icl", "ood", "attention", "heads", "collapse"})
    CHECK(fs::exists(dir / "metrics" / (std::string("metrics_") + f + ".csv")));

  REQUIRE(run(with_tiny({"train", "--run-dir", (dir / "again").string()})) == 0);
  CHECK(read_text(dir / "train" / "checkpoints" / "ckpt_000000060.dgsc") ==
        read_text(dir / "again" / "checkpoints" / "ckpt_000000060.dgsc"));
}

TEST_CASE("exit codes") {
  CHECK(run({"estimate-llc", "--potential", "l99", "--run-dir", (kRoot / "bad").string()}) == 2);
  CHECK(run({"detect-stages", "--curve", (kRoot / "missing.csv").string(), "--run-dir",
             (kRoot / "bad").string()}) == 3);
  CHECK(run({"estimate-llc", "--no-such-flag"}) == 2);
  CHECK(run({"train", "--set", "train.steps=0", "--run-dir", (kRoot / "bad").string()}) == 2);
  CHECK(run({"train", "--set", "nosection", "--run-dir", (kRoot / "bad").string()}) == 2);
}
