// Acceptance suite: one PASS/FAIL line per criterion. Exit status 0 only when
// every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dgsc/checkpoint_io.hpp"
#include "dgsc/cli.hpp"
#include "dgsc/config.hpp"
#include "dgsc/errors.hpp"
#include "dgsc/geometry.hpp"
#include "dgsc/io.hpp"
#include "dgsc/metrics.hpp"
#include "dgsc/potentials.hpp"
#include "dgsc/sgld.hpp"
#include "dgsc/trainer.hpp"

namespace fs = std::filesystem;
using namespace dgsc;

namespace {

// Tolerances.
constexpr double kVolumeTol[] = {0.05, 0.10, 0.15, 0.10};  // l1, l2, l3, l7
constexpr double kVolumeBudgetSeconds = 300.0;
constexpr double kSgldRelTol = 0.2;
constexpr double kSgldAbsTol = 0.1;
constexpr double kSgldBudgetSeconds = 1800.0;
constexpr int kOrderingSeeds = 5;
constexpr double kHessianZero = 1e-10;
constexpr double kBlindnessGap = 0.1;
constexpr double kTraceRelTol = 1e-12;
constexpr int kTraceCount = 100;
constexpr double kStaircaseHeight = 10.0;
constexpr double kStaircaseNoise[] = {0.03, 0.1};
constexpr std::uint64_t kStaircaseSeeds[] = {1, 2, 3, 4, 5};
constexpr std::size_t kBoundarySlack = 1;  // checkpoints
constexpr int kCrossoverConfigs = 50;
constexpr double kMspEarlyMin = 0.2;
constexpr std::size_t kMspContexts = 512;
constexpr std::size_t kCurveCheckpoints = 40;
constexpr std::size_t kLossModeCheckpoints = 4;
constexpr int kRandomModels = 20;
constexpr double kDegeneracyTol = 1e-10;
constexpr double kScaleTol = 1e-12;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

/// Runs a dgsc subcommand in-process with its stdout (the run directory)
/// discarded, so the suite prints only its own lines.
int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dgsc");
  std::ostringstream sink;
  std::streambuf* saved = std::cout.rdbuf(sink.rdbuf());
  try {
    const int rc = cli_main(args);
    std::cout.rdbuf(saved);
    return rc;
  } catch (...) {
    std::cout.rdbuf(saved);
    throw;
  }
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

// ---------------------------------------------------------------- 1

Outcome volume_golden() {
  const auto start = std::chrono::steady_clock::now();
  const auto pots = builtin_potentials();
  const std::size_t which[] = {0, 1, 2, 6};
  Outcome o{true, ""};
  std::vector<std::string> parts;
  for (int i = 0; i < 4; ++i) {
    const AnalyticPotential& p = pots[which[i]];
    VolumeOptions opts;
    opts.epsilons = log_grid(1e-6, 1e-2, 9);
    const VolumeFit fit = volume_llc_oracle(p, opts);
    const double known = p.known_llc().value();
    const bool ok = std::abs(fit.lambda - known) <= kVolumeTol[i] * known;
    o.pass = o.pass && ok;
    parts.push_back(p.name() + " " + fmt("%.4f", fit.lambda) + "/" + fmt("%g", known));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  o.pass = o.pass && secs < kVolumeBudgetSeconds;
  o.detail = join(parts, ", ") + "; " + fmt("%.1f s", secs);
  return o;
}

// ---------------------------------------------------------------- 2

Outcome sgld_vs_analytic() {
  const auto start = std::chrono::steady_clock::now();
  Outcome o{true, ""};
  std::vector<std::string> parts;
  std::map<std::string, SgldConfig> chosen;
  for (const std::string name : {"l1", "l2", "l3", "quad2", "quad10", "quad100"}) {
    const AnalyticPotential p = potential_by_name(name);
    const auto model = as_loss_model(p, 1);
    const SgldConfig base = potential_sgld_config(p.dim(), 0);
    const CalibrationResult r = calibration_sweep(*model, p.reference_point(), base,
                                                  potential_calibration_grid(), NullBatchSource{});
    if (!r.recommended) {
      o.pass = false;
      parts.push_back(name + " no admissible point");
      continue;
    }
    const CalibrationPoint& pt = r.points[*r.recommended];
    const double known = p.known_llc().value();
    const bool ok = std::abs(pt.lambda_hat - known) <= std::max(kSgldRelTol * known, kSgldAbsTol);
    o.pass = o.pass && ok;
    parts.push_back(name + " " + fmt("%.3f", pt.lambda_hat) + "/" + fmt("%g", known));
    chosen[name] = SgldConfig::from_tilde(base, pt.epsilon, pt.beta_tilde, pt.gamma_tilde);
  }
  int ordered = 0;
  if (chosen.count("l1") && chosen.count("l2") && chosen.count("l3")) {
    for (int seed = 1; seed <= kOrderingSeeds; ++seed) {
      double lam[3];
      int i = 0;
      for (const std::string name : {"l1", "l2", "l3"}) {
        const AnalyticPotential p = potential_by_name(name);
        SgldConfig c = chosen[name];
        c.seed = static_cast<std::uint64_t>(seed);
        lam[i++] = estimate_llc(*as_loss_model(p, 1), p.reference_point(), c, NullBatchSource{}).lambda_hat;
      }
      if (lam[0] > lam[1] && lam[1] > lam[2]) ++ordered;
    }
  }
  o.pass = o.pass && ordered == kOrderingSeeds;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  o.pass = o.pass && secs < kSgldBudgetSeconds;
  o.detail = join(parts, ", ") + "; ordering " + std::to_string(ordered) + "/" +
             std::to_string(kOrderingSeeds) + "; " + fmt("%.0f s", secs);
  return o;
}

// ---------------------------------------------------------------- 3

Outcome hessian_blindness() {
  Outcome o{true, ""};
  double lam[2];
  std::vector<std::string> parts;
  int i = 0;
  for (const std::string name : {"l2", "l3"}) {
    const AnalyticPotential p = potential_by_name(name);
    const auto model = as_loss_model(p, 1);
    const HessianStats h = hessian_stats(*model, p.reference_point(), DataBatch{});
    o.pass = o.pass && std::abs(h.trace) <= kHessianZero && std::abs(h.max_eigenvalue) <= kHessianZero;
    lam[i++] = estimate_llc(*model, p.reference_point(), potential_sgld_config(p.dim(), 0), NullBatchSource{})
                   .lambda_hat;
    parts.push_back(name + " trace " + fmt("%g", h.trace) + " eig " + fmt("%g", h.max_eigenvalue));
  }
  o.pass = o.pass && lam[0] - lam[1] >= kBlindnessGap;
  o.detail = join(parts, ", ") + "; lambda_hat l2 " + fmt("%.3f", lam[0]) + " l3 " + fmt("%.3f", lam[1]);
  return o;
}

// ---------------------------------------------------------------- 4

Outcome trace_identity() {
  RngStream rng(4, "acceptance-traces");
  double worst = 0.0;
  for (int rep = 0; rep < kTraceCount; ++rep) {
    const std::size_t n = 1 + rng.below(5000);
    std::vector<double> losses(n);
    const double scale = std::pow(10.0, 4.0 * rng.uniform() - 2.0);
    for (double& l : losses) l = scale * (1.0 + rng.normal());
    const double init = scale * rng.normal();
    const double nbeta = std::pow(10.0, 3.0 * rng.uniform());
    const auto trace = online_trace(losses, nbeta, init);
    double sum = 0.0;
    for (double l : losses) sum += l;
    const double direct = nbeta * (sum / static_cast<double>(n) - init);
    worst = std::max(worst, std::abs(trace.back() - direct) / std::abs(direct));
  }
  return {worst <= kTraceRelTol, "max relative error " + fmt("%.3g", worst) + " over " +
                                     std::to_string(kTraceCount) + " traces"};
}

// ---------------------------------------------------------------- 5

std::size_t nearest_index(const std::vector<std::uint64_t>& steps, double log_t) {
  std::size_t best = 0;
  double gap = 1e300;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const double x = std::log10(static_cast<double>(std::max<std::uint64_t>(steps[i], 1)));
    if (std::abs(x - log_t) < gap) {
      gap = std::abs(x - log_t);
      best = i;
    }
  }
  return best;
}

Outcome stage_fixtures() {
  const auto grid = checkpoint_plan(500000, 100, 90);
  const std::vector<std::vector<double>> sets{
      {2.0, 4.0}, {3.0, 4.602}, {1.5, 3.0, 4.6}, {1.2, 2.5, 3.8, 5.1}, {1.0, 2.2, 3.4, 4.6}};
  int cases = 0, ok = 0;
  std::vector<std::string> misses;
  for (const auto& plateaus : sets) {
    for (double noise : kStaircaseNoise) {
      for (std::uint64_t seed : kStaircaseSeeds) {
        ++cases;
        const LlcCurve c = staircase_fixture(grid, plateaus, kStaircaseHeight, noise, seed);
        const auto b = detect_boundaries(smooth_curve(c));
        bool good = b.size() == plateaus.size();
        for (std::size_t i = 0; good && i < b.size(); ++i) {
          const std::size_t want = nearest_index(grid, plateaus[i]);
          const std::size_t got = b[i].index;
          good = (got > want ? got - want : want - got) <= kBoundarySlack;
        }
        if (good) {
          ++ok;
        } else {
          misses.push_back(std::to_string(plateaus.size()) + " plateaus noise " + fmt("%g", noise) +
                           " seed " + std::to_string(seed) + ": " + std::to_string(b.size()) + " found");
        }
      }
    }
  }
  const std::vector<std::function<double(double)>> monotone{
      [](double x) { return 0.5 * x; },
      [](double x) { return x + 0.5 * x * x; },
      [](double x) { return std::sqrt(x + 1.0); },
  };
  int mono_ok = 0;
  for (std::size_t k = 0; k < monotone.size(); ++k) {
    RngStream rng(k, "acceptance-monotone");
    LlcCurve c;
    for (std::uint64_t t : grid) {
      const double x = std::log10(static_cast<double>(std::max<std::uint64_t>(t, 1)));
      c.points.push_back({t, monotone[k](x) + 0.01 * rng.normal(), 0.01, 0.0});
    }
    if (detect_boundaries(smooth_curve(c)).empty()) ++mono_ok;
  }
  Outcome o;
  o.pass = ok == cases && mono_ok == static_cast<int>(monotone.size());
  o.detail = std::to_string(ok) + "/" + std::to_string(cases) + " staircases exact within " +
             std::to_string(kBoundarySlack) + " checkpoint, " + std::to_string(mono_ok) + "/" +
             std::to_string(monotone.size()) + " monotone curves without boundaries";
  if (!misses.empty()) o.detail += "; misses: " + join(misses, "; ");
  return o;
}

// ---------------------------------------------------------------- 6

Outcome crossover_scan() {
  RngStream rng(6, "acceptance-crossover");
  int ok = 0, crossings = 0;
  std::vector<std::string> bad;
  for (int i = 0; i < kCrossoverConfigs; ++i) {
    FreeEnergyMinimum w1, w2;
    if (i % 5 == 4) {
      // Unconstrained draw: any dominance pattern.
      w1 = {rng.uniform(), 20.0 * rng.uniform(), "w1"};
      w2 = {rng.uniform(), 20.0 * rng.uniform(), "w2"};
    } else {
      // W1 simpler and worse: a crossover exists.
      const double l2 = rng.uniform();
      const double dl = std::pow(10.0, -3.0 + 2.0 * rng.uniform());
      const double lam1 = 1.0 + 10.0 * rng.uniform();
      w1 = {l2 + dl, lam1, "w1"};
      w2 = {l2, lam1 + 1.0 + 40.0 * rng.uniform(), "w2"};
    }
    const Crossover c = free_energy_crossover(w1, w2);
    auto D = [&](double n) { return n * (w1.loss - w2.loss) - (w2.llc - w1.llc) * std::log(n); };
    // Integer scan: last n where W1 is strictly preferred.
    const std::uint64_t limit = 20000000;
    std::uint64_t last_w1 = 0;
    bool any_w2 = false;
    for (std::uint64_t n = 2; n <= limit; ++n) {
      const double d = D(static_cast<double>(n));
      if (d < 0.0) last_w1 = n;
      if (d > 0.0) any_w2 = true;
    }
    bool good;
    switch (c.dominance) {
      case Dominance::crossover:
        ++crossings;
        good = c.n_crit && last_w1 > 0 && last_w1 < limit && static_cast<double>(last_w1) <= *c.n_crit &&
               *c.n_crit <= static_cast<double>(last_w1 + 1);
        break;
      case Dominance::w2_always:
        good = last_w1 == 0;
        break;
      case Dominance::w1_always:
        good = !any_w2;
        break;
      case Dominance::w1_eventually:
        good = any_w2 && last_w1 == limit;
        break;
      case Dominance::tie:
        good = !any_w2 && last_w1 == 0;
        break;
      default:
        good = false;
    }
    if (good) {
      ++ok;
    } else {
      bad.push_back("config " + std::to_string(i) + " (" + to_string(c.dominance) + ")");
    }
  }
  Outcome o{ok == kCrossoverConfigs, std::to_string(ok) + "/" + std::to_string(kCrossoverConfigs) +
                                         " consistent with the integer scan (" +
                                         std::to_string(crossings) + " crossovers)"};
  if (!bad.empty()) o.detail += "; " + join(bad, ", ");
  return o;
}

// ---------------------------------------------------------------- 7, 8

struct DeskRun {
  fs::path dir;
  RunConfig config;
  std::vector<std::pair<std::uint64_t, fs::path>> checkpoints;
  std::string note;
};

std::vector<std::pair<std::uint64_t, fs::path>> list_checkpoints(const fs::path& dir) {
  std::vector<std::pair<std::uint64_t, fs::path>> out;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(dir / "checkpoints", ec)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("ckpt_", 0) == 0 && e.path().extension() == ".dgsc")
      out.emplace_back(std::stoull(name.substr(5)), e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Reuses a completed desk run in `dir` when its config matches the desk
/// preset, resumes a partial one, or trains from scratch.
DeskRun ensure_desk_run(const fs::path& dir) {
  const RunConfig want = RunConfig::desk();
  DeskRun r;
  r.dir = dir;
  auto have = list_checkpoints(dir);
  if (fs::exists(dir / "config.json")) {
    const RunConfig got = load_run_config(dir / "config.json");
    if (json_digest(to_json(got)) != json_digest(to_json(want)))
      throw ConfigError(dir.string() + " holds a run with a different config; remove it or pick another --desk-dir");
  }
  const std::uint64_t T = want.train.steps;
  const bool done = !have.empty() && have.back().first == T;
  if (done) {
    r.note = "reused completed run";
  } else if (!have.empty() && fs::exists(dir / "config.json")) {
    r.note = "resumed from step " + std::to_string(have.back().first);
    if (run_cli({"train", "--preset", "desk", "--run-dir", dir.string(), "--resume", have.back().second.string(),
                 "--quiet"}) != 0)
      throw EstimationError("desk training failed");
  } else {
    r.note = "trained from scratch";
    if (run_cli({"train", "--preset", "desk", "--run-dir", dir.string(), "--quiet"}) != 0)
      throw EstimationError("desk training failed");
  }
  r.config = load_run_config(dir / "config.json");
  r.checkpoints = list_checkpoints(dir);
  if (r.checkpoints.empty() || r.checkpoints.back().first != T)
    throw EstimationError("desk run did not reach step " + std::to_string(T));
  return r;
}

Outcome desk_development(const DeskRun& run, const fs::path& work) {
  Outcome o{true, ""};
  std::vector<std::string> parts;
  const RunConfig& cfg = run.config;
  const TransformerModel model(cfg.model);
  const auto eval = eval_set(cfg.data, cfg.train);
  const std::vector<RegressionContext> sub(eval.begin(), eval.begin() + static_cast<std::ptrdiff_t>(kMspContexts));
  const auto digest = model_digest(cfg.model);

  // (a), (b): prediction scale and in-context improvement at every checkpoint.
  std::vector<std::uint64_t> steps;
  std::vector<double> msp, icl;
  for (const auto& [step, path] : run.checkpoints) {
    const Checkpoint ck = load_checkpoint(path, digest);
    steps.push_back(step);
    msp.push_back(mean_square_prediction(model, ck.params, sub));
    icl.push_back(icl_score(evaluate(model, ck.params, sub).per_token, 1, 4));
  }
  const EvalResult final_eval = evaluate(model, load_checkpoint(run.checkpoints.back().second, digest).params, eval);
  const double icl_final = icl_score(final_eval.per_token, 1, 4);
  std::size_t ctx = steps.size() - 1;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (icl[i] <= 0.5 * icl_final) {
      ctx = i;
      break;
    }
  }
  std::size_t argmin = 0;
  for (std::size_t i = 0; i <= ctx; ++i)
    if (msp[i] < msp[argmin]) argmin = i;
  double later_max = msp[argmin];
  for (std::size_t i = argmin + 1; i < msp.size(); ++i) later_max = std::max(later_max, msp[i]);
  const bool a = msp[argmin] <= kMspEarlyMin && later_max > msp[argmin];
  const bool b = icl_final < 0.0;
  parts.push_back(std::string(a ? "(a) ok" : "(a) FAIL") + " msp min " + fmt("%.4f", msp[argmin]) + " at t=" +
                  std::to_string(steps[argmin]) + ", later max " + fmt("%.3f", later_max) +
                  ", half-ICL at t=" + std::to_string(steps[ctx]));
  parts.push_back(std::string(b ? "(b) ok" : "(b) FAIL") + " ICL_1:4 final " + fmt("%.4f", icl_final));

  CsvTable trace{"acceptance_desk_metrics", {"step", "mean_square_prediction", "icl_1_4"}, {}};
  for (std::size_t i = 0; i < steps.size(); ++i)
    trace.rows.push_back({std::to_string(steps[i]), format_double(msp[i]), format_double(icl[i])});
  write_csv(work / "desk_metrics.csv", trace);

  // (c), (d), (e): LLC curve with Hessian comparison, then stage detection.
  const fs::path curve_dir = work / "llc_curve";
  fs::remove_all(curve_dir);
  bool c = false, d = false, e = false;
  if (run_cli({"llc-curve", "--train-dir", run.dir.string(), "--checkpoints", std::to_string(kCurveCheckpoints),
               "--hessian", "--run-dir", curve_dir.string(), "--quiet"}) == 0) {
    const CsvTable curve = read_csv(curve_dir / "llc_curve.csv", std::string("llc_curve"));
    const double first = curve.number(0, "lambda_hat");
    const double last = curve.number(curve.rows.size() - 1, "lambda_hat");
    c = last > first;
    parts.push_back(std::string(c ? "(c) ok" : "(c) FAIL") + " lambda_hat init " + fmt("%.2f", first) +
                    " final " + fmt("%.2f", last));

    const fs::path stages_dir = work / "stages";
    fs::remove_all(stages_dir);
    if (run_cli({"detect-stages", "--curve", (curve_dir / "llc_curve.csv").string(), "--run-dir",
                 stages_dir.string(), "--quiet"}) == 0) {
      const CsvTable b = read_csv(stages_dir / "boundaries.csv", std::string("stage_boundaries"));
      std::vector<std::string> at;
      for (std::size_t i = 0; i < b.rows.size(); ++i) at.push_back(b.rows[i][0]);
      d = curve.rows.size() >= kCurveCheckpoints && !b.rows.empty();
      parts.push_back(std::string(d ? "(d) ok " : "(d) FAIL ") + std::to_string(b.rows.size()) +
                      " boundaries over " + std::to_string(curve.rows.size()) + " checkpoints at t=" +
                      (at.empty() ? "none" : join(at, ",")));
    } else {
      parts.push_back("(d) FAIL detect-stages errored");
    }

    const CsvTable h = read_csv(curve_dir / "hessian.csv", std::string("hessian_comparison"));
    bool finite = h.rows.size() == curve.rows.size();
    for (std::size_t i = 0; finite && i < h.rows.size(); ++i)
      finite = std::isfinite(h.number(i, "trace")) && std::isfinite(h.number(i, "max_eigenvalue"));
    e = finite;
    parts.push_back(std::string(e ? "(e) ok " : "(e) FAIL ") + std::to_string(h.rows.size()) + " Hessian rows");
  } else {
    parts.push_back("(c-e) FAIL llc-curve errored");
  }
  o.pass = a && b && c && d && e;
  o.detail = run.note + "; " + join(parts, "; ");
  return o;
}

std::vector<std::size_t> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  return idx;
}

Outcome loss_modes(const DeskRun& run, const fs::path& work) {
  // Evenly spread over training, skipping the initialization.
  std::vector<std::pair<std::uint64_t, fs::path>> pool(run.checkpoints.begin() + 1, run.checkpoints.end());
  std::vector<std::pair<std::uint64_t, fs::path>> chosen;
  for (std::size_t i = 0; i < kLossModeCheckpoints; ++i)
    chosen.push_back(pool[(i + 1) * (pool.size() - 1) / kLossModeCheckpoints]);
  std::map<std::string, std::vector<double>> lam;
  for (const std::string mode : {"subsequence", "likelihood"}) {
    for (const auto& [step, path] : chosen) {
      const fs::path dir = work / "loss_modes" / (mode + "_" + std::to_string(step));
      fs::remove_all(dir);
      if (run_cli({"estimate-llc", "--checkpoint", path.string(), "--set", "sgld.loss_mode=" + mode,
                   "--run-dir", dir.string(), "--quiet"}) != 0)
        return {false, "estimate-llc failed at step " + std::to_string(step) + " (" + mode + ")"};
      lam[mode].push_back(nlohmann::json::parse(read_text(dir / "summary.json"))["lambda_hat"].get<double>());
    }
  }
  const bool agree = ranks(lam["subsequence"]) == ranks(lam["likelihood"]);
  std::vector<std::string> parts;
  for (std::size_t i = 0; i < chosen.size(); ++i)
    parts.push_back("t=" + std::to_string(chosen[i].first) + " " + fmt("%.2f", lam["subsequence"][i]) + "/" +
                    fmt("%.2f", lam["likelihood"][i]));
  return {agree, std::string(agree ? "rankings agree" : "rankings differ") + " (subsequence/likelihood): " +
                     join(parts, ", ")};
}

// ---------------------------------------------------------------- 9

Outcome metric_bounds() {
  TransformerConfig cfg;
  const TransformerModel model(cfg);
  DataConfig data;
  int violations = 0;
  double worst_scale = 0.0, worst_degeneracy = 0.0;
  std::size_t checked = 0;
  for (int m = 0; m < kRandomModels; ++m) {
    ParameterVector p = init_transformer(cfg, 1000 + static_cast<std::uint64_t>(m));
    RngStream rng(static_cast<std::uint64_t>(m), "acceptance-random-model");
    const double spread = std::pow(10.0, 1.5 * rng.uniform() - 0.5);
    for (double& w : p.values()) w += spread * 0.05 * rng.normal();
    const auto contexts = sample_batch(data, 32, rng);

    AttentionRecord rec;
    model.forward(p.values(), contexts, &rec);
    const EntropyReport ent = attention_entropy(rec);
    for (const auto& layer : ent.positions)
      for (const auto& head : layer)
        for (double h : head)
          if (std::isfinite(h)) {
            ++checked;
            violations += h < 0.0 || h > 1.0;
          }
    for (int b = 0; b < rec.layers; ++b)
      for (int h = 0; h < rec.heads; ++h)
        for (int q = 1; q + 1 < rec.seq_len; ++q) {
          const double v = row_variability(rec, b, h, q);
          ++checked;
          violations += !(v >= 0.0 && v <= 1.0);
        }

    std::vector<HeadCircuit> circuits;
    for (int b = 0; b < cfg.layers; ++b)
      for (int h = 0; h < cfg.heads; ++h) circuits.push_back(head_circuit(cfg, p, b, h));
    for (int h1 = 0; h1 < cfg.heads; ++h1)
      for (int h2 = 0; h2 < cfg.heads; ++h2) {
        const HeadCircuit& a = circuits[static_cast<std::size_t>(h1)];
        const HeadCircuit& z = circuits[static_cast<std::size_t>(cfg.heads + h2)];
        const Composition c = composition_scores(a, z);
        for (double s : {c.q, c.k, c.v}) {
          ++checked;
          violations += !(s > 0.0 && s <= 1.0);
        }
        const double k2 = composition_score(2.5 * z.qk, 0.3 * a.ov);
        worst_scale = std::max(worst_scale, std::abs(k2 - c.k) / c.k);
      }

    std::set<std::size_t> pick;
    while (pick.size() < 3) pick.insert(rng.below(static_cast<std::uint64_t>(cfg.d_embed)));
    const std::vector<std::size_t> idx(pick.begin(), pick.end());
    worst_degeneracy = std::max(worst_degeneracy, degeneracy_check(model, p, idx, contexts, static_cast<std::uint64_t>(m)));
  }
  Outcome o;
  o.pass = violations == 0 && worst_scale <= kScaleTol && worst_degeneracy <= kDegeneracyTol;
  o.detail = std::to_string(violations) + " range violations in " + std::to_string(checked) +
             " values over " + std::to_string(kRandomModels) + " models; scale drift " +
             fmt("%.2g", worst_scale) + "; degeneracy change " + fmt("%.2g", worst_degeneracy);
  return o;
}

// ---------------------------------------------------------------- 10

std::vector<std::string> differing_files(const fs::path& a, const fs::path& b) {
  std::vector<std::string> out;
  std::set<std::string> names;
  for (const fs::path& root : {a, b})
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file()) names.insert(fs::relative(e.path(), root).string());
  for (const auto& n : names) {
    if (!fs::exists(a / n) || !fs::exists(b / n) || read_text(a / n) != read_text(b / n)) out.push_back(n);
  }
  return out;
}

Outcome determinism(const fs::path& work) {
  const std::vector<std::string> tiny{
      "--set", "model.L=1",           "--set", "model.H=2",          "--set", "model.d_embed=8",
      "--set", "model.d_mlp=8",       "--set", "train.steps=200",    "--set", "train.batch_size=16",
      "--set", "train.n_linear=6",    "--set", "train.n_log=6",      "--set", "train.eval_size=128",
      "--set", "sgld.chains=3",       "--set", "sgld.steps=200",     "--set", "sgld.burn_in=40",
      "--set", "sgld.batch_size=32",  "--set", "analysis.metrics_batch=32", "--quiet"};
  const fs::path root = work / "determinism";
  fs::remove_all(root);
  std::vector<std::string> diffs;
  std::size_t files = 0;
  for (const std::string rep : {"a", "b"}) {
    std::vector<std::string> args{"train", "--run-dir", (root / rep / "train").string()};
    args.insert(args.end(), tiny.begin(), tiny.end());
    if (run_cli(args) != 0) return {false, "train failed"};
    const auto ck = list_checkpoints(root / rep / "train");
    if (run_cli({"estimate-llc", "--checkpoint", ck.back().second.string(), "--run-dir",
                 (root / rep / "llc").string(), "--quiet"}) != 0)
      return {false, "estimate-llc failed"};
    if (run_cli({"metrics", "--train-dir", (root / rep / "train").string(), "--run-dir",
                 (root / rep / "metrics").string(), "--quiet"}) != 0)
      return {false, "metrics failed"};
  }
  for (const std::string part : {"train", "llc", "metrics"}) {
    for (const auto& n : differing_files(root / "a" / part, root / "b" / part)) diffs.push_back(part + "/" + n);
    for (const auto& e : fs::recursive_directory_iterator(root / "a" / part)) files += e.is_regular_file();
  }
  Outcome o{diffs.empty(), std::to_string(files) + " artifacts compared"};
  if (!diffs.empty()) o.detail += "; differing: " + join(diffs, ", ");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dgsc acceptance suite"};
  std::string work_dir = "acceptance";
  std::string desk_dir;
  std::vector<int> only;
  app.add_option("--work-dir", work_dir, "Directory for intermediate artifacts");
  app.add_option("--desk-dir", desk_dir, "Desk-scale training run (reused when complete)");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const fs::path work = fs::absolute(work_dir);
  fs::create_directories(work);
  const fs::path desk = desk_dir.empty() ? work / "desk" : fs::absolute(desk_dir);

  std::optional<DeskRun> run;
  std::string desk_error;
  auto need_desk = [&]() -> const DeskRun* {
    if (!run && desk_error.empty()) {
      try {
        run = ensure_desk_run(desk);
      } catch (const std::exception& e) {
        desk_error = e.what();
      }
    }
    return run ? &*run : nullptr;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"analytic LLC golden suite (volume oracle)", volume_golden},
      {"SGLD estimator vs analytic values", sgld_vs_analytic},
      {"Hessian blindness on l2 and l3", hessian_blindness},
      {"online trace identity", trace_identity},
      {"stage detection on synthetic fixtures", stage_fixtures},
      {"free-energy crossover vs integer scan", crossover_scan},
      {"desk-scale developmental run",
       [&]() -> Outcome {
         const DeskRun* r = need_desk();
         return r ? desk_development(*r, work) : Outcome{false, desk_error};
       }},
      {"loss-mode robustness of LLC rankings",
       [&]() -> Outcome {
         const DeskRun* r = need_desk();
         return r ? loss_modes(*r, work) : Outcome{false, desk_error};
       }},
      {"metric bounds on random models", metric_bounds},
      {"determinism of train, estimate-llc and metrics", [&] { return determinism(work); }},
  };

  nlohmann::json report = nlohmann::json::array();
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    all = all && o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << id << " " << criteria[i].first << ": " << o.detail << " ["
              << fmt("%.1f", secs) << " s]" << std::endl;
    report.push_back({{"criterion", id}, {"name", criteria[i].first}, {"pass", o.pass},
                      {"detail", o.detail}, {"seconds", secs}});
  }
  write_text(work / "acceptance.json", report.dump(2) + "\n");
  return all ? 0 : 1;
}
