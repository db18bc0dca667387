#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "dgsc/checkpoint_io.hpp"
#include "dgsc/config.hpp"
#include "dgsc/errors.hpp"
#include "dgsc/io.hpp"

using namespace dgsc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "dgsc-test-config-io";
  fs::create_directories(dir);
  return dir / name;
}

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.step = 1234;
  c.params = {1.0, -2.5, 1e-300, std::nextafter(1.0, 2.0), -0.0};
  c.has_optimizer = true;
  c.adam.m = {0.1, 0.2, 0.3, 0.4, 0.5};
  c.adam.v = {1.0, 2.0, 3.0, 4.0, 5.0};
  c.adam.t = 1234;
  c.model_digest = model_digest(TransformerConfig{});
  c.run_digest = 42;
  c.rng_positions = {{"train-batch", 99}};
  return c;
}

}  // namespace

TEST_CASE("crc64 check value") {
  const std::string s = "123456789";
  CHECK(crc64(s.data(), s.size()) == 0x995DC9BBDF1939FAULL);
}

TEST_CASE("config round trip and digests") {
  RunConfig c = RunConfig::desk();
  c.sgld.loss_mode = LossMode::likelihood;
  c.analysis.gains = {0.5, 2.0};
  const RunConfig back = run_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(json_digest(to_json(back)) == json_digest(to_json(c)));

  const nlohmann::json a = nlohmann::json::parse(R"({"b": 1, "a": {"y": 2, "x": 3}})");
  const nlohmann::json b = nlohmann::json::parse(R"({"a": {"x": 3, "y": 2}, "b": 1})");
  CHECK(json_digest(a) == json_digest(b));

  TransformerConfig m;
  const std::uint64_t d4 = model_digest(m);
  m.dim = 8;
  CHECK(model_digest(m) != d4);
  CHECK(digest_hex(0xABCULL) == "0000000000000abc");

  const fs::path p = scratch("config.json");
  save_run_config(p, c);
  CHECK(to_json(load_run_config(p)) == to_json(c));
}

TEST_CASE("strict config parsing") {
  nlohmann::json j = to_json(RunConfig{});
  j["train"]["stepz"] = 5;
  CHECK_THROWS_AS(run_config_from_json(j), ConfigError);
  j = to_json(RunConfig{});
  j["sgld"]["epsilon"] = "small";
  CHECK_THROWS_AS(run_config_from_json(j), ConfigError);
  j = to_json(RunConfig{});
  j["bogus"] = {};
  CHECK_THROWS_AS(run_config_from_json(j), ConfigError);
  CHECK_NOTHROW(run_config_from_json(nlohmann::json::object()));

  RunConfig c;
  apply_override(c, "sgld.epsilon=1e-4");
  CHECK(c.sgld.epsilon == 1e-4);
  apply_override(c, "sgld.loss_mode=likelihood");
  CHECK(c.sgld.loss_mode == LossMode::likelihood);
  CHECK_THROWS_AS(apply_override(c, "sgld.nope=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "noequals"), ConfigError);
  CHECK_THROWS_AS(loss_mode_from_string("token"), ConfigError);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const Checkpoint c = sample_checkpoint();
  const fs::path p = scratch(checkpoint_filename(c.step));
  CHECK(p.filename() == "ckpt_000001234.dgsc");
  save_checkpoint(p, c);
  const Checkpoint back = load_checkpoint(p, c.model_digest);
  CHECK(back.step == c.step);
  REQUIRE(back.params.size() == c.params.size());
  for (std::size_t i = 0; i < c.params.size(); ++i)
    CHECK(std::memcmp(&back.params[i], &c.params[i], sizeof(double)) == 0);
  CHECK(back.has_optimizer);
  CHECK(back.adam.m == c.adam.m);
  CHECK(back.adam.v == c.adam.v);
  CHECK(back.adam.t == c.adam.t);
  CHECK(back.run_digest == 42);
  CHECK(back.rng_positions == c.rng_positions);
}

TEST_CASE("corrupted or incompatible checkpoints are rejected") {
  const Checkpoint c = sample_checkpoint();
  const fs::path p = scratch("flip.dgsc");
  save_checkpoint(p, c);
  std::string bytes = read_text(p);
  for (std::size_t pos : {std::size_t{5}, std::size_t{60}, bytes.size() - 3}) {
    std::string bad = bytes;
    bad[pos] = static_cast<char>(bad[pos] ^ 0x10);
    write_text(p, bad);
    CAPTURE(pos);
    CHECK_THROWS_AS(load_checkpoint(p), IntegrityError);
  }
  write_text(p, bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(p), IntegrityError);
  write_text(p, bytes);
  TransformerConfig d8;
  d8.dim = 8;
  CHECK_THROWS_AS(load_checkpoint(p, model_digest(d8)), CompatibilityError);
  CHECK_THROWS_AS(load_checkpoint(scratch("missing.dgsc")), IoError);
}

TEST_CASE("csv round trip and version checks") {
  CsvTable t;
  t.schema = "sample";
  t.columns = {"step", "value"};
  t.rows = {{"0", format_double(0.1)}, {"10", format_double(-1.0 / 3.0)}, {"20", "nan"}};
  const fs::path p = scratch("t.csv");
  write_csv(p, t);
  CHECK(read_text(p).rfind("# dgsc-csv 1.0 sample\n", 0) == 0);
  const CsvTable back = read_csv(p, std::string("sample"));
  CHECK(back.columns == t.columns);
  CHECK(back.number(1, "value") == -1.0 / 3.0);
  CHECK(std::isnan(back.number(2, "value")));
  CHECK_THROWS_AS(read_csv(p, std::string("other")), CompatibilityError);

  std::string text = read_text(p);
  text.replace(text.find("1.0"), 3, "2.0");
  write_text(p, text);
  CHECK_THROWS_AS(read_csv(p), CompatibilityError);
  text.replace(text.find("2.0"), 3, "1.7");
  write_text(p, text);
  CHECK_NOTHROW(read_csv(p));

  for (double v : {0.1, 1e-300, 123456789.123, -2.5e17, std::numeric_limits<double>::infinity()})
    CHECK(parse_double(format_double(v)) == v);
}
