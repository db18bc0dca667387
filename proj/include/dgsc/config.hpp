#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dgsc/icl_data.hpp"
#include "dgsc/sgld.hpp"
#include "dgsc/trainer.hpp"
#include "dgsc/transformer.hpp"

namespace dgsc {

/// Settings for the analysis subcommands (stage detection, Hessian
/// statistics, behavioral metrics).
struct AnalysisConfig {
  double length_scale = 1.0;     // GP kernel length-scale, log10-step units
  double noise_variance = -1.0;  // < 0: per-checkpoint chain std²
  double tolerance = -1.0;       // < 0: tolerance_fraction · max |derivative|
  double tolerance_fraction = 0.05;
  std::vector<double> gains{0.1, 0.31622776601683794, 1.0, 3.1622776601683795,
                            10.0, 31.622776601683793, 100.0};
  double score_threshold = 0.8;
  double variability_threshold = 0.2;
  double collapse_threshold = 0.1;
  std::size_t hutchinson_samples = 20;
  std::size_t power_iters = 100;
  std::size_t hessian_batch = 64;
  std::size_t metrics_batch = 256;  // validation contexts for attention statistics
  std::size_t curve_checkpoints = 40;  // checkpoints used for LLC and Hessian curves

  void validate() const;
};

struct RunConfig {
  std::string version = "1";
  DataConfig data;
  TransformerConfig model;
  TrainConfig train;
  SgldConfig sgld;
  AnalysisConfig analysis;

  void validate() const;
  /// Training at T = 50,000 with a small SGLD budget suited to one CPU core.
  static RunConfig desk();
};

nlohmann::json to_json(const RunConfig& cfg);
/// Strict parse: unknown keys and wrong types raise ConfigError naming the
/// field; missing keys keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& cfg);
/// Applies "section.field=value" (value parsed as JSON, falling back to a
/// string).
void apply_override(RunConfig& cfg, const std::string& assignment);
/// Applies every assignment, then validates once.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments);

nlohmann::json to_json(const DataConfig& c);
nlohmann::json to_json(const TransformerConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const SgldConfig& c);
nlohmann::json to_json(const AnalysisConfig& c);

/// CRC-64/XZ.
std::uint64_t crc64(const void* data, std::size_t size, std::uint64_t seed = 0);
/// CRC-64 of the canonical (key-sorted, compact) JSON serialization.
std::uint64_t json_digest(const nlohmann::json& j);
std::uint64_t model_digest(const TransformerConfig& c);
std::uint64_t run_digest(const DataConfig& data, const TrainConfig& train);
std::string digest_hex(std::uint64_t digest);

std::string to_string(LossMode m);
LossMode loss_mode_from_string(const std::string& s);

}  // namespace dgsc
