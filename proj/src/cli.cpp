#include "dgsc/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <tbb/parallel_for.h>

#include "dgsc/checkpoint_io.hpp"
#include "dgsc/config.hpp"
#include "dgsc/errors.hpp"
#include "dgsc/geometry.hpp"
#include "dgsc/io.hpp"
#include "dgsc/metrics.hpp"
#include "dgsc/potentials.hpp"
#include "dgsc/sgld.hpp"
#include "dgsc/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dgsc {

namespace {

struct Common {
  std::string config_path;
  std::string preset = "default";
  std::vector<std::string> overrides;
  std::string run_dir;
  bool quiet = false;
};

RunConfig resolve_config(const Common& c) {
  RunConfig cfg;
  if (!c.config_path.empty()) {
    cfg = load_run_config(c.config_path);
  } else if (c.preset == "desk") {
    cfg = RunConfig::desk();
  } else if (c.preset != "default") {
    throw ConfigError("--preset: expected 'default' or 'desk', got '" + c.preset + "'");
  }
  apply_overrides(cfg, c.overrides);
  cfg.validate();
  return cfg;
}

/// Run directory: --run-dir, else $DGSC_RUN_DIR (or ./runs) / <command>-<digest>.
fs::path make_run_dir(const Common& c, const std::string& command, const json& identity) {
  fs::path dir;
  if (!c.run_dir.empty()) {
    dir = c.run_dir;
  } else {
    const char* env = std::getenv("DGSC_RUN_DIR");
    const fs::path root = env && *env ? fs::path(env) : fs::path("runs");
    dir = root / (command + "-" + digest_hex(json_digest(identity)));
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  return dir;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

void log(const Common& c, const std::string& msg) {
  if (!c.quiet) std::cerr << msg << std::endl;
}

// ---------------------------------------------------------------- train

class FileSink final : public TrainSink {
 public:
  FileSink(fs::path dir, const TransformerModel& model, std::vector<RegressionContext> eval,
           const Common& common, std::uint64_t total)
      : dir_(std::move(dir)), model_(model), eval_(std::move(eval)), common_(common), total_(total) {
    fs::create_directories(dir_ / "checkpoints");
  }
  void on_step(std::uint64_t step, double loss, double lr) override {
    log_.push_back({std::to_string(step), format_double(loss), format_double(lr)});
    if (step % 1000 == 0) {
      log(common_, "step " + std::to_string(step) + "/" + std::to_string(total_) +
                       " loss " + format_double(loss));
    }
  }
  void on_checkpoint(const Checkpoint& c) override {
    save_checkpoint(dir_ / "checkpoints" / checkpoint_filename(c.step), c);
    const EvalResult e = evaluate(model_, c.params, eval_);
    for (std::size_t k = 0; k < e.per_token.size(); ++k) {
      eval_rows_.push_back({std::to_string(c.step), std::to_string(k + 1), format_double(e.per_token[k])});
    }
    eval_mean_.emplace_back(static_cast<double>(c.step), e.mean);
  }
  std::vector<std::vector<std::string>> log_;
  std::vector<std::vector<std::string>> eval_rows_;
  std::vector<std::pair<double, double>> eval_mean_;

 private:
  fs::path dir_;
  const TransformerModel& model_;
  std::vector<RegressionContext> eval_;
  const Common& common_;
  std::uint64_t total_;
};

int cmd_train(const Common& common, const std::string& resume_path) {
  const RunConfig cfg = resolve_config(common);
  const fs::path dir = make_run_dir(common, "train", to_json(cfg));
  save_run_config(dir / "config.json", cfg);
  const TransformerModel model(cfg.model);
  FileSink sink(dir, model, eval_set(cfg.data, cfg.train), common, cfg.train.steps);
  std::optional<Checkpoint> resume;
  if (!resume_path.empty()) resume = load_checkpoint(resume_path, model_digest(cfg.model));
  log(common, "training " + std::to_string(model.layout().size()) + " parameters for " +
                  std::to_string(cfg.train.steps) + " steps into " + dir.string());
  const TrainResult r = train(cfg.model, cfg.data, cfg.train, &sink, resume ? &*resume : nullptr, false);

  const std::string suffix = resume ? "_resumed_" + std::to_string(resume->step) : "";
  write_csv(dir / ("train_log" + suffix + ".csv"), {"train_log", {"step", "loss", "lr"}, sink.log_});
  write_csv(dir / ("eval" + suffix + ".csv"), {"eval_per_token", {"step", "k", "loss"}, sink.eval_rows_});
  PlotSeries train_s{"train loss", {}, {}}, eval_s{"eval loss", {}, {}};
  for (const auto& row : sink.log_) {
    train_s.x.push_back(parse_double(row[0]));
    train_s.y.push_back(parse_double(row[1]));
  }
  for (const auto& [t, l] : sink.eval_mean_) {
    eval_s.x.push_back(t);
    eval_s.y.push_back(l);
  }
  write_svg_plot(dir / ("train_loss" + suffix + ".svg"),
                 {"Training loss", "step", "loss", true, true, {}}, {train_s, eval_s});
  json summary{{"steps", cfg.train.steps},
               {"parameters", model.layout().size()},
               {"model_digest", digest_hex(model_digest(cfg.model))},
               {"run_digest", digest_hex(run_digest(cfg.data, cfg.train))},
               {"final_train_loss", r.train_loss.empty() ? json(nullptr) : json(r.train_loss.back())},
               {"final_eval_loss", sink.eval_mean_.empty() ? json(nullptr) : json(sink.eval_mean_.back().second)},
               {"checkpoints", checkpoint_plan(cfg.train.steps, cfg.train.n_linear, cfg.train.n_log).size()}};
  write_json(dir / ("train_summary" + suffix + ".json"), summary);
  std::cout << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- shared

struct TrainRun {
  fs::path dir;
  RunConfig config;
  std::vector<std::pair<std::uint64_t, fs::path>> checkpoints;  // sorted by step
};

TrainRun open_train_run(const fs::path& dir) {
  TrainRun r;
  r.dir = dir;
  r.config = load_run_config(dir / "config.json");
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(dir / "checkpoints", ec)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("ckpt_", 0) != 0 || e.path().extension() != ".dgsc") continue;
    try {
      r.checkpoints.emplace_back(std::stoull(name.substr(5)), e.path());
    } catch (const std::exception&) {
    }
  }
  if (ec) throw IoError("cannot list " + (dir / "checkpoints").string() + ": " + ec.message());
  if (r.checkpoints.empty()) throw IoError("no checkpoints under " + (dir / "checkpoints").string());
  std::sort(r.checkpoints.begin(), r.checkpoints.end());
  return r;
}

/// `n` entries spread evenly by index, always including the first and last;
/// all entries when n is 0 or at least the size.
template <class T>
std::vector<T> spread(const std::vector<T>& v, std::size_t n) {
  if (n == 0 || n >= v.size()) return v;
  std::vector<T> out;
  if (n == 1) return {v.back()};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = (i * (v.size() - 1) + (n - 1) / 2) / (n - 1);
    if (out.empty() || !(out.back() == v[j])) out.push_back(v[j]);
  }
  return out;
}

/// Configuration for a checkpoint: --config if given, else the config.json of
/// the run directory holding it.
RunConfig checkpoint_config(const Common& c, const fs::path& ckpt) {
  Common copy = c;
  if (copy.config_path.empty()) {
    const fs::path candidate = ckpt.parent_path().parent_path() / "config.json";
    if (fs::exists(candidate)) copy.config_path = candidate.string();
  }
  return resolve_config(copy);
}

/// Mean eval loss per step from a training run's eval.csv, if present.
std::map<std::uint64_t, double> eval_losses(const fs::path& train_dir) {
  std::map<std::uint64_t, double> out;
  if (!fs::exists(train_dir / "eval.csv")) return out;
  const CsvTable t = read_csv(train_dir / "eval.csv", "eval_per_token");
  std::map<std::uint64_t, std::pair<double, int>> acc;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    auto& a = acc[static_cast<std::uint64_t>(t.number(i, "step"))];
    a.first += t.number(i, "loss");
    a.second += 1;
  }
  for (const auto& [s, a] : acc) out[s] = a.first / a.second;
  return out;
}

json flags_json(unsigned flags) { return json(flag_names(flags)); }

std::string flags_text(unsigned flags) {
  std::string s;
  for (const auto& n : flag_names(flags)) s += (s.empty() ? "" : "|") + n;
  return s;
}

struct SgldTarget {
  std::string label;
  std::shared_ptr<LossModel> model;
  std::vector<double> w_star;
  std::unique_ptr<BatchSource> source;
  std::optional<double> known_llc;
  RunConfig config;
};

/// Potential targets start from potential_sgld_config before --set overrides;
/// checkpoint targets use the run configuration.
SgldTarget sgld_target(const Common& common, const std::string& potential,
                       const std::string& checkpoint, std::optional<std::uint64_t> seed) {
  if (potential.empty() == checkpoint.empty())
    throw ConfigError("exactly one of --potential or --checkpoint is required");
  Common c = common;
  if (seed) c.overrides.insert(c.overrides.begin(), "sgld.seed=" + std::to_string(*seed));
  SgldTarget t;
  if (!potential.empty()) {
    const AnalyticPotential p = potential_by_name(potential);
    RunConfig base;
    if (!c.config_path.empty()) base = load_run_config(c.config_path);
    base.sgld = potential_sgld_config(p.dim(), base.sgld.seed);
    apply_overrides(base, c.overrides);
    base.validate();
    t.config = base;
    t.label = "potential:" + potential;
    t.model = as_loss_model(p, 1);
    t.w_star = p.reference_point();
    t.source = std::make_unique<NullBatchSource>();
    t.known_llc = p.known_llc().value();
  } else {
    t.config = checkpoint_config(c, checkpoint);
    const Checkpoint ck = load_checkpoint(checkpoint, model_digest(t.config.model));
    t.label = "checkpoint:" + fs::path(checkpoint).filename().string();
    t.model = std::make_shared<TransformerModel>(t.config.model);
    t.w_star = ck.params;
    t.source = std::make_unique<DatasetBatchSource>(t.config.data, t.config.sgld);
  }
  return t;
}

// ---------------------------------------------------------------- estimate-llc

/// Trace rows kept per chain in trace.csv; longer chains are thinned evenly.
constexpr std::size_t kTraceRows = 5000;

int cmd_estimate_llc(const Common& common, const std::string& potential,
                     const std::string& checkpoint, std::optional<std::uint64_t> seed) {
  SgldTarget t = sgld_target(common, potential, checkpoint, seed);
  const SgldConfig& sc = t.config.sgld;
  json identity{{"target", t.label}, {"sgld", to_json(sc)}};
  if (!checkpoint.empty()) identity["model"] = to_json(t.config.model), identity["data"] = to_json(t.config.data);
  const fs::path dir = make_run_dir(common, "estimate-llc", identity);
  save_run_config(dir / "config.json", t.config);
  log(common, "estimating LLC of " + t.label + " with " + std::to_string(sc.chains) + " chains of " +
                  std::to_string(sc.steps) + " steps");
  const LlcEstimate e = estimate_llc(*t.model, t.w_star, sc, *t.source);

  CsvTable trace{"sgld_trace", {"chain", "tau", "loss", "lambda_running"}, {}};
  std::vector<PlotSeries> series;
  for (std::size_t c = 0; c < e.losses.size(); ++c) {
    const std::size_t n = e.losses[c].size();
    const std::size_t stride = std::max<std::size_t>(1, (n + kTraceRows - 1) / kTraceRows);
    PlotSeries ps{"chain " + std::to_string(c), {}, {}};
    for (std::size_t i = 0; i < n; ++i) {
      if (i % stride != 0 && i + 1 != n) continue;
      trace.rows.push_back({std::to_string(c), std::to_string(i + 1), format_double(e.losses[c][i]),
                            format_double(e.traces[c][i])});
      ps.x.push_back(static_cast<double>(i + 1));
      ps.y.push_back(e.traces[c][i]);
    }
    series.push_back(std::move(ps));
  }
  write_csv(dir / "trace.csv", trace);
  write_svg_plot(dir / "trace.svg", {"Online LLC estimate", "SGLD step", "running lambda", false, false, {}},
                 series);

  json chain_flags = json::array();
  for (unsigned f : e.chain_flags) chain_flags.push_back(flags_json(f));
  json summary{{"target", t.label},
               {"lambda_hat", e.lambda_hat},
               {"lambda_std", e.lambda_std},
               {"per_chain", e.per_chain},
               {"flags", flags_json(e.flags)},
               {"chain_flags", chain_flags},
               {"init_loss", e.init_loss},
               {"sgld", to_json(sc)}};
  if (t.known_llc) summary["known_llc"] = *t.known_llc;
  write_json(dir / "summary.json", summary);
  log(common, "lambda_hat = " + format_double(e.lambda_hat) + " +- " + format_double(e.lambda_std) +
                  (e.flags ? " flags: " + flags_text(e.flags) : ""));
  std::cout << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- sweep

int cmd_sweep(const Common& common, const std::string& potential, const std::string& checkpoint,
              std::optional<std::uint64_t> seed, std::vector<double> eps, std::vector<double> btil,
              std::vector<double> gtil) {
  SgldTarget t = sgld_target(common, potential, checkpoint, seed);
  CalibrationGrid grid = potential.empty() ? model_calibration_grid(t.config.sgld)
                                           : potential_calibration_grid();
  if (!eps.empty()) grid.epsilons = std::move(eps);
  if (!btil.empty()) grid.beta_tildes = std::move(btil);
  if (!gtil.empty()) grid.gamma_tildes = std::move(gtil);
  json identity{{"target", t.label},
                {"sgld", to_json(t.config.sgld)},
                {"grid", {grid.epsilons, grid.beta_tildes, grid.gamma_tildes}}};
  const fs::path dir = make_run_dir(common, "sweep", identity);
  save_run_config(dir / "config.json", t.config);
  log(common, "calibration sweep of " + t.label + " over " +
                  std::to_string(grid.epsilons.size() * grid.beta_tildes.size() * grid.gamma_tildes.size()) +
                  " points");
  const CalibrationResult r = calibration_sweep(*t.model, t.w_star, t.config.sgld, grid, *t.source);

  CsvTable table{"calibration",
                 {"epsilon", "beta_tilde", "gamma_tilde", "nbeta", "gamma", "lambda_hat", "lambda_std", "flags"},
                 {}};
  for (const auto& p : r.points) {
    const SgldConfig c = SgldConfig::from_tilde(t.config.sgld, p.epsilon, p.beta_tilde, p.gamma_tilde);
    table.rows.push_back({format_double(p.epsilon), format_double(p.beta_tilde), format_double(p.gamma_tilde),
                          format_double(c.nbeta), format_double(c.gamma), format_double(p.lambda_hat),
                          format_double(p.lambda_std), flags_text(p.flags)});
  }
  write_csv(dir / "sweep.csv", table);
  json summary{{"target", t.label}, {"points", r.points.size()}};
  if (r.recommended) {
    const auto& p = r.points[*r.recommended];
    const SgldConfig c = SgldConfig::from_tilde(t.config.sgld, p.epsilon, p.beta_tilde, p.gamma_tilde);
    summary["recommended"] = {{"epsilon", p.epsilon}, {"beta_tilde", p.beta_tilde},
                              {"gamma_tilde", p.gamma_tilde}, {"nbeta", c.nbeta},
                              {"gamma", c.gamma}, {"lambda_hat", p.lambda_hat},
                              {"variation", r.recommended_variation}};
  } else {
    summary["recommended"] = nullptr;
  }
  if (t.known_llc) summary["known_llc"] = *t.known_llc;
  write_json(dir / "sweep_summary.json", summary);
  std::cout << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- llc-curve

int cmd_llc_curve(const Common& common, const std::string& train_dir, std::optional<std::size_t> count,
                  bool with_hessian) {
  const TrainRun run = open_train_run(train_dir);
  Common c = common;
  if (c.config_path.empty()) c.config_path = (run.dir / "config.json").string();
  const RunConfig cfg = resolve_config(c);
  if (model_digest(cfg.model) != model_digest(run.config.model))
    throw ConfigError("model section differs from the training run's config");
  const std::size_t n = count.value_or(cfg.analysis.curve_checkpoints);
  const auto chosen = spread(run.checkpoints, n);

  json identity{{"train_run", digest_hex(run_digest(run.config.data, run.config.train))},
                {"model", to_json(cfg.model)}, {"data", to_json(cfg.data)},
                {"sgld", to_json(cfg.sgld)}, {"analysis", to_json(cfg.analysis)},
                {"checkpoints", chosen.size()}, {"hessian", with_hessian}};
  const fs::path dir = make_run_dir(common, "llc-curve", identity);
  save_run_config(dir / "config.json", cfg);

  const auto model = std::make_shared<TransformerModel>(cfg.model);
  const DatasetBatchSource source(cfg.data, cfg.sgld);
  const auto digest = model_digest(cfg.model);
  std::vector<CheckpointRef> refs;
  for (const auto& [step, path] : chosen) {
    refs.push_back({step, [p = path, digest] { return load_checkpoint(p, digest).params; }});
  }
  log(common, "LLC curve over " + std::to_string(refs.size()) + " checkpoints (" +
                  to_string(cfg.sgld.loss_mode) + " loss)");
  const auto curve = estimate_llc_curve(*model, refs, cfg.sgld, source);
  const auto losses = eval_losses(run.dir);

  CsvTable table{"llc_curve", {"step", "lambda_hat", "lambda_std", "init_loss", "loss", "flags", "error"}, {}};
  PlotSeries ps{"lambda_hat", {}, {}};
  for (const auto& p : curve) {
    const auto it = losses.find(p.step);
    const double loss = it == losses.end() ? std::nan("") : it->second;
    table.rows.push_back({std::to_string(p.step), format_double(p.ok ? p.lambda_hat : std::nan("")),
                          format_double(p.ok ? p.lambda_std : std::nan("")), format_double(p.init_loss),
                          format_double(loss), flags_text(p.flags), p.error});
    if (p.ok && p.step > 0) {
      ps.x.push_back(static_cast<double>(p.step));
      ps.y.push_back(p.lambda_hat);
    }
  }
  write_csv(dir / "llc_curve.csv", table);
  write_svg_plot(dir / "llc_curve.svg", {"LLC over training", "step", "lambda_hat", true, false, {}}, {ps});

  if (with_hessian) {
    const auto eval = eval_set(cfg.data, cfg.train);
    const DataBatch batch = make_batch(std::vector<RegressionContext>(
        eval.begin(), eval.begin() + static_cast<std::ptrdiff_t>(std::min(cfg.analysis.hessian_batch, eval.size()))));
    HessianOptions ho;
    ho.hutchinson_samples = cfg.analysis.hutchinson_samples;
    ho.power_iters = cfg.analysis.power_iters;
    ho.seed = cfg.sgld.seed;
    CsvTable h{"hessian_comparison",
               {"step", "lambda_hat", "trace", "trace_stderr", "max_eigenvalue", "residual", "converged"},
               {}};
    PlotSeries tr{"trace", {}, {}}, eig{"max eigenvalue", {}, {}}, lam{"lambda_hat", {}, {}};
    for (std::size_t i = 0; i < chosen.size(); ++i) {
      const auto params = refs[i].load();
      const HessianStats st = hessian_stats(*model, params, batch, ho);
      const auto& p = curve[i];
      h.rows.push_back({std::to_string(p.step), format_double(p.ok ? p.lambda_hat : std::nan("")),
                        format_double(st.trace), format_double(st.trace_stderr),
                        format_double(st.max_eigenvalue), format_double(st.residual),
                        st.converged ? "1" : "0"});
      if (p.step > 0) {
        tr.x.push_back(static_cast<double>(p.step));
        tr.y.push_back(st.trace);
        eig.x.push_back(static_cast<double>(p.step));
        eig.y.push_back(st.max_eigenvalue);
        lam.x.push_back(static_cast<double>(p.step));
        lam.y.push_back(p.ok ? p.lambda_hat : std::nan(""));
      }
      log(common, "hessian at step " + std::to_string(p.step) + ": trace " + format_double(st.trace));
    }
    write_csv(dir / "hessian.csv", h);
    write_svg_plot(dir / "hessian.svg", {"Hessian statistics and LLC", "step", "value", true, false, {}},
                   {tr, eig, lam});
  }
  std::size_t ok = 0;
  for (const auto& p : curve) ok += p.ok ? 1 : 0;
  write_json(dir / "llc_curve_summary.json",
             {{"checkpoints", curve.size()}, {"estimated", ok}, {"loss_mode", to_string(cfg.sgld.loss_mode)}});
  std::cout << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- detect-stages

LlcCurve read_curve(const fs::path& path) {
  const CsvTable t = read_csv(path, "llc_curve");
  LlcCurve c;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    c.points.push_back({static_cast<std::uint64_t>(t.number(i, "step")), t.number(i, "lambda_hat"),
                        t.number(i, "lambda_std"), t.number(i, "loss")});
  }
  return c;
}

void write_curve(const fs::path& path, const LlcCurve& c) {
  CsvTable table{"llc_curve", {"step", "lambda_hat", "lambda_std", "init_loss", "loss", "flags", "error"}, {}};
  for (const auto& p : c.points) {
    table.rows.push_back({std::to_string(p.t), format_double(p.lambda_hat), format_double(p.std),
                          format_double(std::nan("")), format_double(p.loss), "", ""});
  }
  write_csv(path, table);
}

int cmd_detect_stages(const Common& common, const std::string& curve_path, const std::string& fixture,
                      std::vector<double> plateaus, double noise) {
  const RunConfig cfg = resolve_config(common);
  if (curve_path.empty() == fixture.empty())
    throw ConfigError("exactly one of --curve or --fixture is required");
  LlcCurve curve;
  json identity{{"analysis", to_json(cfg.analysis)}};
  if (!fixture.empty()) {
    if (fixture != "staircase") throw ConfigError("--fixture: only 'staircase' is available");
    if (plateaus.empty()) plateaus = {1.5, 3.0, 4.6};
    const auto grid = checkpoint_plan(500000, 100, 90);
    curve = staircase_fixture(grid, plateaus, 10.0, noise, 0);
    identity["fixture"] = {{"plateaus", plateaus}, {"noise", noise}};
  } else {
    curve = read_curve(curve_path);
    identity["curve"] = digest_hex(crc64(read_text(curve_path).data(), read_text(curve_path).size()));
  }
  const fs::path dir = make_run_dir(common, "detect-stages", identity);
  save_run_config(dir / "config.json", cfg);
  if (!fixture.empty()) write_curve(dir / "fixture.csv", curve);

  SmoothingOptions so;
  so.length_scale = cfg.analysis.length_scale;
  so.noise_variance = cfg.analysis.noise_variance;
  const LlcCurve sm = smooth_curve(curve, so);
  const double tol = cfg.analysis.tolerance >= 0.0
                         ? cfg.analysis.tolerance
                         : default_tolerance(*sm.smoothed, cfg.analysis.tolerance_fraction);
  const auto bounds = detect_boundaries(sm, tol);
  const auto rows = stage_table(curve, bounds);

  const SmoothedCurve& s = *sm.smoothed;
  CsvTable smoothed{"llc_smoothed", {"step", "log10_step", "mean", "derivative", "derivative_std"}, {}};
  for (std::size_t i = 0; i < s.index.size(); ++i) {
    smoothed.rows.push_back({std::to_string(curve.points[s.index[i]].t), format_double(s.log_t[i]),
                             format_double(s.mean[i]), format_double(s.derivative[i]),
                             format_double(s.derivative_std[i])});
  }
  write_csv(dir / "smoothed.csv", smoothed);
  CsvTable bt{"stage_boundaries", {"step", "index", "kind", "derivative"}, {}};
  std::vector<double> vlines;
  for (const auto& b : bounds) {
    bt.rows.push_back({std::to_string(b.t), std::to_string(b.index), to_string(b.kind),
                       format_double(b.derivative_value)});
    vlines.push_back(static_cast<double>(b.t));
  }
  write_csv(dir / "boundaries.csv", bt);
  CsvTable st{"stage_table", {"stage", "start_step", "end_step", "delta_loss", "delta_lambda"}, {}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    st.rows.push_back({std::to_string(i + 1), std::to_string(rows[i].start_t), std::to_string(rows[i].end_t),
                       format_double(rows[i].delta_loss), format_double(rows[i].delta_lambda)});
  }
  write_csv(dir / "stages.csv", st);
  const std::string text = render_stage_table(rows);
  write_text(dir / "stages.txt", text);
  PlotSeries raw{"lambda_hat", {}, {}}, mean{"GP mean", {}, {}};
  for (const auto& p : curve.points) {
    if (p.t == 0) continue;
    raw.x.push_back(static_cast<double>(p.t));
    raw.y.push_back(p.lambda_hat);
  }
  for (std::size_t i = 0; i < s.index.size(); ++i) {
    mean.x.push_back(static_cast<double>(curve.points[s.index[i]].t));
    mean.y.push_back(s.mean[i]);
  }
  write_svg_plot(dir / "stages.svg", {"LLC stages", "step", "lambda_hat", true, false, vlines}, {raw, mean});
  log(common, text);
  std::cout << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- hessian-stats

json hessian_json(const HessianStats& st) {
  return {{"trace", st.trace},       {"trace_stderr", st.trace_stderr},
          {"samples", st.samples},   {"max_eigenvalue", st.max_eigenvalue},
          {"residual", st.residual}, {"converged", st.converged},
          {"iterations", st.iterations}};
}

int cmd_hessian_stats(const Common& common, const std::string& potential, const std::string& checkpoint) {
  if (potential.empty() == checkpoint.empty())
    throw ConfigError("exactly one of --potential or --checkpoint is required");
  RunConfig cfg;
  HessianStats st;
  json identity;
  std::shared_ptr<LossModel> model;
  std::vector<double> params;
  DataBatch batch;
  if (!potential.empty()) {
    cfg = resolve_config(common);
    const AnalyticPotential p = potential_by_name(potential);
    model = as_loss_model(p, 1);
    params = p.reference_point();
    identity = {{"potential", potential}};
  } else {
    cfg = checkpoint_config(common, checkpoint);
    params = load_checkpoint(checkpoint, model_digest(cfg.model)).params;
    model = std::make_shared<TransformerModel>(cfg.model);
    const auto eval = eval_set(cfg.data, cfg.train);
    batch = make_batch(std::vector<RegressionContext>(
        eval.begin(), eval.begin() + static_cast<std::ptrdiff_t>(std::min(cfg.analysis.hessian_batch, eval.size()))));
    identity = {{"checkpoint", digest_hex(crc64(params.data(), params.size() * sizeof(double)))},
                {"model", to_json(cfg.model)}};
  }
  identity["analysis"] = to_json(cfg.analysis);
  identity["seed"] = cfg.sgld.seed;
  const fs::path dir = make_run_dir(common, "hessian-stats", identity);
  save_run_config(dir / "config.json", cfg);
  HessianOptions ho;
  ho.hutchinson_samples = cfg.analysis.hutchinson_samples;
  ho.power_iters = cfg.analysis.power_iters;
  ho.seed = cfg.sgld.seed;
  st = hessian_stats(*model, params, batch, ho);
  write_json(dir / "hessian.json", hessian_json(st));
  std::cout << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- metrics

int cmd_metrics(const Common& common, const std::string& train_dir, std::optional<std::size_t> count) {
  const TrainRun run = open_train_run(train_dir);
  Common c = common;
  if (c.config_path.empty()) c.config_path = (run.dir / "config.json").string();
  const RunConfig cfg = resolve_config(c);
  const auto chosen = spread(run.checkpoints, count.value_or(0));
  json identity{{"train_run", digest_hex(run_digest(run.config.data, run.config.train))},
                {"model", to_json(cfg.model)}, {"data", to_json(cfg.data)},
                {"analysis", to_json(cfg.analysis)}, {"checkpoints", chosen.size()}};
  const fs::path dir = make_run_dir(common, "metrics", identity);
  save_run_config(dir / "config.json", cfg);

  const TransformerModel model(cfg.model);
  const auto eval = eval_set(cfg.data, cfg.train);
  MetricOptions mo;
  mo.gains = cfg.analysis.gains;
  mo.score_threshold = cfg.analysis.score_threshold;
  mo.variability_threshold = cfg.analysis.variability_threshold;
  mo.collapse_threshold = cfg.analysis.collapse_threshold;
  mo.attention_samples = cfg.analysis.metrics_batch;
  mo.ood_size = cfg.train.eval_size;
  mo.eval_seed = cfg.train.eval_seed;
  const auto digest = model_digest(cfg.model);
  log(common, "metrics over " + std::to_string(chosen.size()) + " checkpoints");

  std::vector<std::vector<MetricRow>> results(chosen.size());
  tbb::parallel_for(std::size_t{0}, chosen.size(), [&](std::size_t i) {
    const Checkpoint ck = load_checkpoint(chosen[i].second, digest);
    const ParameterVector pv(model.layout(), ck.params);
    results[i] = checkpoint_metrics(model, pv, cfg.data, eval, mo);
  });

  // Plotted (family, metric) per family; empty metric plots every scalar.
  const std::map<std::string, std::string> plotted{
      {"loss", ""}, {"icl", ""}, {"ood", "inputs_normalized_loss"}, {"attention", "entropy"},
      {"heads", "variability"}, {"composition", "v"}, {"collapse", "ln_weight_fraction"}};
  std::map<std::string, CsvTable> tables;
  std::map<std::string, std::map<std::string, PlotSeries>> plots;
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    const std::uint64_t step = chosen[i].first;
    for (const auto& r : results[i]) {
      auto& t = tables[r.family];
      if (t.schema.empty()) t = {"metrics_" + r.family, {"step", "metric", "index", "value"}, {}};
      t.rows.push_back({std::to_string(step), r.metric, r.index, format_double(r.value)});
      const auto want = plotted.find(r.family);
      if (step == 0 || want == plotted.end()) continue;
      if (!want->second.empty() ? r.metric == want->second : r.index.empty()) {
        const std::string key = want->second.empty() ? r.metric : r.metric + " " + r.index;
        auto& ps = plots[r.family][key];
        ps.name = key;
        ps.x.push_back(static_cast<double>(step));
        ps.y.push_back(r.value);
      }
    }
  }
  for (const auto& [family, table] : tables) {
    write_csv(dir / ("metrics_" + family + ".csv"), table);
    std::vector<PlotSeries> series;
    for (const auto& [k, ps] : plots[family]) series.push_back(ps);
    if (!series.empty())
      write_svg_plot(dir / ("metrics_" + family + ".svg"), {family, "step", "value", true, false, {}}, series);
  }
  std::cout << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- volume-oracle

VolumeOptions volume_options(std::uint64_t seed) {
  VolumeOptions o;
  o.epsilons = log_grid(1e-6, 1e-2, 9);
  o.seed = seed;
  return o;
}

json volume_json(const VolumeFit& f) {
  return {{"lambda", f.lambda},     {"std_error", f.std_error}, {"intercept", f.intercept},
          {"epsilons", f.epsilons}, {"volumes", f.volumes},     {"hits", f.hits},
          {"samples", f.samples}};
}

int cmd_volume_oracle(const Common& common, const std::string& potential, std::uint64_t seed,
                      std::optional<double> radius) {
  const RunConfig cfg = resolve_config(common);
  const AnalyticPotential p = potential_by_name(potential);
  VolumeOptions o = volume_options(seed);
  if (radius) o.ball_radius = *radius;
  const fs::path dir = make_run_dir(common, "volume-oracle",
                                    {{"potential", potential}, {"seed", seed}, {"radius", o.ball_radius}});
  save_run_config(dir / "config.json", cfg);
  const VolumeFit f = volume_llc_oracle(p, o);
  json j = volume_json(f);
  j["potential"] = potential;
  j["known_llc"] = p.known_llc().value();
  write_json(dir / "volume.json", j);
  CsvTable t{"volume_oracle", {"epsilon", "volume", "hits"}, {}};
  for (std::size_t i = 0; i < f.epsilons.size(); ++i)
    t.rows.push_back({format_double(f.epsilons[i]), format_double(f.volumes[i]), std::to_string(f.hits[i])});
  write_csv(dir / "volume.csv", t);
  write_svg_plot(dir / "volume.svg", {"Sublevel-set volume", "epsilon", "V(epsilon)", true, true, {}},
                 {{potential, f.epsilons, f.volumes}});
  log(common, "lambda = " + format_double(f.lambda) + " +- " + format_double(f.std_error));
  std::cout << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- selftest

/// Volume-oracle tolerance (relative) per builtin potential.
double volume_tolerance(const std::string& name) {
  if (name == "l1") return 0.05;
  if (name == "l3") return 0.15;
  return 0.10;
}

int cmd_selftest(const Common& common, std::uint64_t seed) {
  const RunConfig cfg = resolve_config(common);
  const fs::path dir = make_run_dir(common, "selftest", {{"seed", seed}});
  save_run_config(dir / "config.json", cfg);
  bool all = true;
  json report = json::array();
  CsvTable t{"selftest", {"potential", "check", "known", "estimate", "std_error", "tolerance", "pass"}, {}};
  for (const auto& p : builtin_potentials()) {
    const double known = p.known_llc().value();
    VolumeOptions vo = volume_options(seed);
    // ℓ₄'s second zero set touches the unit sphere.
    if (p.name() == "l4") vo.ball_radius = 0.5;
    const VolumeFit vf = volume_llc_oracle(p, vo);
    const double vtol = volume_tolerance(p.name()) * known;
    const bool vpass = std::abs(vf.lambda - known) <= vtol;

    const SgldConfig sc = potential_sgld_config(p.dim(), seed);
    const auto model = as_loss_model(p, 1);
    const LlcEstimate e = estimate_llc(*model, p.reference_point(), sc, NullBatchSource{});
    const double stol = std::max(0.2 * known, 0.1);
    const bool spass = std::abs(e.lambda_hat - known) <= stol && e.flags == 0;

    for (const auto& [check, est, se, tol, pass] :
         {std::tuple{"volume", vf.lambda, vf.std_error, vtol, vpass},
          std::tuple{"sgld", e.lambda_hat, e.lambda_std, stol, spass}}) {
      t.rows.push_back({p.name(), check, format_double(known), format_double(est), format_double(se),
                        format_double(tol), pass ? "1" : "0"});
      report.push_back({{"potential", p.name()}, {"check", check}, {"known", known},
                        {"estimate", est}, {"std_error", se}, {"tolerance", tol}, {"pass", pass}});
      std::cout << (pass ? "PASS " : "FAIL ") << p.name() << " " << check << ": estimate "
                << format_double(est) << " known " << format_double(known) << " (tol "
                << format_double(tol) << ")\n";
    }
    all = all && vpass && spass;
  }
  write_csv(dir / "selftest.csv", t);
  write_json(dir / "selftest.json", {{"pass", all}, {"checks", report}});
  return all ? 0 : 4;
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Degeneracy and stage analysis for in-context regression transformers", "dgsc"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "RunConfig JSON file");
    sub->add_option("--preset", common.preset, "Built-in configuration: default or desk");
    sub->add_option("--set", common.overrides, "Override a field: section.field=value");
    sub->add_option("--run-dir", common.run_dir, "Output directory (default $DGSC_RUN_DIR/<command>-<digest>)");
    sub->add_flag("--quiet", common.quiet, "Suppress progress messages");
  };

  std::string resume, potential, checkpoint, train_dir, curve, fixture;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> count;
  std::optional<double> radius;
  std::vector<double> eps, btil, gtil, plateaus;
  double fixture_noise = 0.03;
  bool with_hessian = false;

  auto* train_cmd = app.add_subcommand("train", "Train the regression transformer with checkpoints");
  add_common(train_cmd);
  train_cmd->add_option("--resume", resume, "Continue from a checkpoint file");
  train_cmd->add_option("--seed", seed, "Override train.seed");

  auto* est_cmd = app.add_subcommand("estimate-llc", "SGLD estimate of the local learning coefficient");
  add_common(est_cmd);
  est_cmd->add_option("--potential", potential, "Builtin potential (l1..l7, quad<d>)");
  est_cmd->add_option("--checkpoint", checkpoint, "Transformer checkpoint file");
  est_cmd->add_option("--seed", seed, "Override sgld.seed");

  auto* curve_cmd = app.add_subcommand("llc-curve", "LLC estimates across a training run's checkpoints");
  add_common(curve_cmd);
  curve_cmd->add_option("--train-dir", train_dir, "Run directory written by train")->required();
  curve_cmd->add_option("--checkpoints", count, "Number of checkpoints (default analysis.curve_checkpoints)");
  curve_cmd->add_flag("--hessian", with_hessian, "Also compute Hessian trace and top eigenvalue");

  auto* sweep_cmd = app.add_subcommand("sweep", "Calibration sweep over (epsilon, beta~, gamma~)");
  add_common(sweep_cmd);
  sweep_cmd->add_option("--potential", potential, "Builtin potential");
  sweep_cmd->add_option("--checkpoint", checkpoint, "Transformer checkpoint file");
  sweep_cmd->add_option("--seed", seed, "Override sgld.seed");
  sweep_cmd->add_option("--epsilons", eps, "Step sizes")->delimiter(',');
  sweep_cmd->add_option("--beta-tildes", btil, "Values of eps*nbeta/2")->delimiter(',');
  sweep_cmd->add_option("--gamma-tildes", gtil, "Values of eps*gamma/4")->delimiter(',');

  auto* stages_cmd = app.add_subcommand("detect-stages", "Stage boundaries from an LLC curve");
  add_common(stages_cmd);
  stages_cmd->add_option("--curve", curve, "llc_curve CSV");
  stages_cmd->add_option("--fixture", fixture, "Synthetic curve: staircase");
  stages_cmd->add_option("--plateaus", plateaus, "Fixture plateau positions (log10 step)")->delimiter(',');
  stages_cmd->add_option("--noise", fixture_noise, "Fixture noise standard deviation");

  auto* hess_cmd = app.add_subcommand("hessian-stats", "Hessian trace and top eigenvalue");
  add_common(hess_cmd);
  hess_cmd->add_option("--potential", potential, "Builtin potential (at its reference point)");
  hess_cmd->add_option("--checkpoint", checkpoint, "Transformer checkpoint file");

  auto* metrics_cmd = app.add_subcommand("metrics", "Behavioral and structural metrics over checkpoints");
  add_common(metrics_cmd);
  metrics_cmd->add_option("--train-dir", train_dir, "Run directory written by train")->required();
  metrics_cmd->add_option("--checkpoints", count, "Number of checkpoints (default: all)");

  auto* vol_cmd = app.add_subcommand("volume-oracle", "Monte-Carlo volume-scaling LLC of a potential");
  add_common(vol_cmd);
  vol_cmd->add_option("--potential", potential, "Builtin potential")->required();
  vol_cmd->add_option("--seed", seed, "Sampling seed");
  vol_cmd->add_option("--radius", radius, "Ball radius around the reference point");

  auto* self_cmd = app.add_subcommand("selftest", "Golden checks on the builtin potentials");
  add_common(self_cmd);
  self_cmd->add_option("--seed", seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) {
      if (seed) common.overrides.push_back("train.seed=" + std::to_string(*seed));
      return cmd_train(common, resume);
    }
    if (*est_cmd) return cmd_estimate_llc(common, potential, checkpoint, seed);
    if (*curve_cmd) return cmd_llc_curve(common, train_dir, count, with_hessian);
    if (*sweep_cmd) return cmd_sweep(common, potential, checkpoint, seed, eps, btil, gtil);
    if (*stages_cmd) return cmd_detect_stages(common, curve, fixture, plateaus, fixture_noise);
    if (*hess_cmd) return cmd_hessian_stats(common, potential, checkpoint);
    if (*metrics_cmd) return cmd_metrics(common, train_dir, count);
    if (*vol_cmd) return cmd_volume_oracle(common, potential, seed.value_or(0), radius);
    if (*self_cmd) return cmd_selftest(common, seed.value_or(0));
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 3;
  } catch (const EstimationError& e) {
    std::cerr << "estimation error: " << e.what() << "\n";
    return 4;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace dgsc
