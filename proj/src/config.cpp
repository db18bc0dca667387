#include "dgsc/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <boost/crc.hpp>

#include "dgsc/errors.hpp"

namespace dgsc {

using nlohmann::json;

void AnalysisConfig::validate() const {
  if (!(length_scale > 0.0)) throw ConfigError("analysis.length_scale must be positive");
  if (!(tolerance_fraction > 0.0)) throw ConfigError("analysis.tolerance_fraction must be positive");
  if (gains.empty()) throw ConfigError("analysis.gains must be nonempty");
  for (double g : gains)
    if (!(g > 0.0)) throw ConfigError("analysis.gains must be positive");
  if (hutchinson_samples < 10) throw ConfigError("analysis.hutchinson_samples must be at least 10");
  if (power_iters < 50) throw ConfigError("analysis.power_iters must be at least 50");
  if (hessian_batch < 1) throw ConfigError("analysis.hessian_batch must be at least 1");
  if (metrics_batch < 2) throw ConfigError("analysis.metrics_batch must be at least 2");
  if (curve_checkpoints < 2) throw ConfigError("analysis.curve_checkpoints must be at least 2");
}

void RunConfig::validate() const {
  if (version != "1") throw ConfigError("version: unsupported config version '" + version + "'");
  data.validate();
  model.validate();
  train.validate();
  sgld.validate();
  analysis.validate();
  if (data.dim != static_cast<std::size_t>(model.dim) ||
      data.max_examples != static_cast<std::size_t>(model.max_examples)) {
    throw ConfigError("model.D/model.K must match data.D/data.K");
  }
}

RunConfig RunConfig::desk() {
  RunConfig c;
  c.train = TrainConfig::desk();
  c.sgld.chains = 4;
  c.sgld.steps = 400;
  c.sgld.burn_in = 100;
  c.sgld.batch_size = 128;
  return c;
}

std::string to_string(LossMode m) { return m == LossMode::likelihood ? "likelihood" : "subsequence"; }

LossMode loss_mode_from_string(const std::string& s) {
  if (s == "subsequence") return LossMode::subsequence;
  if (s == "likelihood") return LossMode::likelihood;
  throw ConfigError("sgld.loss_mode: expected 'subsequence' or 'likelihood', got '" + s + "'");
}

json to_json(const DataConfig& c) {
  return {{"D", c.dim}, {"K", c.max_examples}, {"sigma2", c.sigma2},
          {"num_tasks", c.num_tasks}, {"seed", c.seed}};
}

json to_json(const TransformerConfig& c) {
  return {{"L", c.layers},         {"H", c.heads},           {"d_embed", c.d_embed},
          {"d_mlp", c.d_mlp},      {"D", c.dim},             {"K", c.max_examples},
          {"ln_eps", c.ln_eps},    {"init_std", c.init_std}, {"precision", c.precision}};
}

json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"max_lr", c.max_lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"pct_start", c.pct_start},
          {"div_factor", c.div_factor},
          {"final_div_factor", c.final_div_factor},
          {"n_linear", c.n_linear},
          {"n_log", c.n_log},
          {"seed", c.seed},
          {"eval_size", c.eval_size},
          {"eval_seed", c.eval_seed}};
}

json to_json(const SgldConfig& c) {
  return {{"epsilon", c.epsilon},       {"gamma", c.gamma},
          {"nbeta", c.nbeta},           {"chains", c.chains},
          {"steps", c.steps},           {"burn_in", c.burn_in},
          {"batch_size", c.batch_size}, {"dataset_size", c.dataset_size},
          {"seed", c.seed},             {"loss_mode", to_string(c.loss_mode)}};
}

json to_json(const AnalysisConfig& c) {
  return {{"length_scale", c.length_scale},
          {"noise_variance", c.noise_variance},
          {"tolerance", c.tolerance},
          {"tolerance_fraction", c.tolerance_fraction},
          {"gains", c.gains},
          {"score_threshold", c.score_threshold},
          {"variability_threshold", c.variability_threshold},
          {"collapse_threshold", c.collapse_threshold},
          {"hutchinson_samples", c.hutchinson_samples},
          {"power_iters", c.power_iters},
          {"hessian_batch", c.hessian_batch},
          {"metrics_batch", c.metrics_batch},
          {"curve_checkpoints", c.curve_checkpoints}};
}

json to_json(const RunConfig& c) {
  return {{"version", c.version},          {"data", to_json(c.data)},
          {"model", to_json(c.model)},     {"train", to_json(c.train)},
          {"sgld", to_json(c.sgld)},       {"analysis", to_json(c.analysis)}};
}

namespace {

/// Reads fields of one section, rejecting unknown keys.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(name_ + ": expected an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(name_ + "." + k + ": unknown field");
    }
  }
  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_unsigned_v<T>) {
        if (!v.is_number_unsigned()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(name_ + "." + key + ": invalid value " + v.dump());
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  {
    Section top(j, "config");
    top.get("version", c.version);
    json data, model, train, sgld, analysis;
    top.get("data", data);
    top.get("model", model);
    top.get("train", train);
    top.get("sgld", sgld);
    top.get("analysis", analysis);
    if (!data.is_null()) {
      Section s(data, "data");
      s.get("D", c.data.dim);
      s.get("K", c.data.max_examples);
      s.get("sigma2", c.data.sigma2);
      s.get("num_tasks", c.data.num_tasks);
      s.get("seed", c.data.seed);
    }
    if (!model.is_null()) {
      Section s(model, "model");
      s.get("L", c.model.layers);
      s.get("H", c.model.heads);
      s.get("d_embed", c.model.d_embed);
      s.get("d_mlp", c.model.d_mlp);
      s.get("D", c.model.dim);
      s.get("K", c.model.max_examples);
      s.get("ln_eps", c.model.ln_eps);
      s.get("init_std", c.model.init_std);
      s.get("precision", c.model.precision);
    }
    if (!train.is_null()) {
      Section s(train, "train");
      s.get("steps", c.train.steps);
      s.get("batch_size", c.train.batch_size);
      s.get("max_lr", c.train.max_lr);
      s.get("beta1", c.train.beta1);
      s.get("beta2", c.train.beta2);
      s.get("adam_eps", c.train.adam_eps);
      s.get("pct_start", c.train.pct_start);
      s.get("div_factor", c.train.div_factor);
      s.get("final_div_factor", c.train.final_div_factor);
      s.get("n_linear", c.train.n_linear);
      s.get("n_log", c.train.n_log);
      s.get("seed", c.train.seed);
      s.get("eval_size", c.train.eval_size);
      s.get("eval_seed", c.train.eval_seed);
    }
    if (!sgld.is_null()) {
      Section s(sgld, "sgld");
      s.get("epsilon", c.sgld.epsilon);
      s.get("gamma", c.sgld.gamma);
      s.get("nbeta", c.sgld.nbeta);
      s.get("chains", c.sgld.chains);
      s.get("steps", c.sgld.steps);
      s.get("burn_in", c.sgld.burn_in);
      s.get("batch_size", c.sgld.batch_size);
      s.get("dataset_size", c.sgld.dataset_size);
      s.get("seed", c.sgld.seed);
      std::string mode = to_string(c.sgld.loss_mode);
      s.get("loss_mode", mode);
      c.sgld.loss_mode = loss_mode_from_string(mode);
    }
    if (!analysis.is_null()) {
      Section s(analysis, "analysis");
      s.get("length_scale", c.analysis.length_scale);
      s.get("noise_variance", c.analysis.noise_variance);
      s.get("tolerance", c.analysis.tolerance);
      s.get("tolerance_fraction", c.analysis.tolerance_fraction);
      s.get("gains", c.analysis.gains);
      s.get("score_threshold", c.analysis.score_threshold);
      s.get("variability_threshold", c.analysis.variability_threshold);
      s.get("collapse_threshold", c.analysis.collapse_threshold);
      s.get("hutchinson_samples", c.analysis.hutchinson_samples);
      s.get("power_iters", c.analysis.power_iters);
      s.get("hessian_batch", c.analysis.hessian_batch);
      s.get("metrics_batch", c.analysis.metrics_batch);
      s.get("curve_checkpoints", c.analysis.curve_checkpoints);
    }
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write config file " + path.string());
  out << to_json(cfg).dump(2) << "\n";
  if (!out) throw IoError("failed writing config file " + path.string());
}

namespace {

void set_field(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "' must look like section.field=value");
  }
  const std::string section = assignment.substr(0, dot);
  const std::string field = assignment.substr(dot + 1, eq - dot - 1);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  if (!j.contains(section) || !j[section].is_object()) {
    throw ConfigError(section + ": unknown config section");
  }
  if (!j[section].contains(field)) throw ConfigError(section + "." + field + ": unknown field");
  j[section][field] = value;
}

}  // namespace

void apply_override(RunConfig& cfg, const std::string& assignment) {
  apply_overrides(cfg, {assignment});
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments) {
  json j = to_json(cfg);
  for (const auto& a : assignments) set_field(j, a);
  cfg = run_config_from_json(j);
}

std::uint64_t crc64(const void* data, std::size_t size, std::uint64_t seed) {
  boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, 0xFFFFFFFFFFFFFFFFULL, 0xFFFFFFFFFFFFFFFFULL,
                     true, true>
      crc;
  if (seed != 0) crc.process_bytes(&seed, sizeof seed);
  crc.process_bytes(data, size);
  return crc.checksum();
}

std::uint64_t json_digest(const json& j) {
  const std::string s = j.dump();
  return crc64(s.data(), s.size());
}

std::uint64_t model_digest(const TransformerConfig& c) { return json_digest(to_json(c)); }

std::uint64_t run_digest(const DataConfig& data, const TrainConfig& train) {
  return json_digest(json{{"data", to_json(data)}, {"train", to_json(train)}});
}

std::string digest_hex(std::uint64_t digest) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(digest));
  return buf;
}

}  // namespace dgsc
