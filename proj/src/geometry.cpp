#include "dgsc/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include <Eigen/Dense>
#include <boost/math/tools/minima.hpp>
#include <boost/math/tools/roots.hpp>

#include "dgsc/errors.hpp"
#include "dgsc/rng.hpp"

namespace dgsc {

namespace {

/// Factorized GP posterior for fixed hyperparameters.
struct GpFit {
  Eigen::LLT<Eigen::MatrixXd> llt;
  Eigen::MatrixXd H;       // 2 × n linear basis
  Eigen::Matrix2d A;       // H K⁻¹ Hᵀ
  Eigen::Vector2d beta;    // posterior mean of the linear coefficients
  Eigen::VectorXd alpha;   // K⁻¹ (y − Hᵀβ)
  double log_det = 0.0;    // log |K|
};

GpFit fit_gp(const Eigen::VectorXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& noise,
             double sig2, double l2) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd K(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      K(i, j) = sig2 * std::exp(-0.5 * (x(i) - x(j)) * (x(i) - x(j)) / l2);
  K.diagonal() += noise;

  GpFit f;
  double jitter = 0.0;
  const double base = std::max(K.diagonal().mean(), 1e-300);
  for (int attempt = 0;; ++attempt) {
    Eigen::MatrixXd Kj = K;
    Kj.diagonal().array() += jitter;
    f.llt.compute(Kj);
    if (f.llt.info() == Eigen::Success) {
      // Reject factorizations that are numerically rank deficient.
      const Eigen::VectorXd diag = f.llt.matrixLLT().diagonal();
      if (diag.minCoeff() > 1e-7 * std::sqrt(base)) {
        f.log_det = 2.0 * diag.array().log().sum();
        break;
      }
    }
    if (attempt >= 8) throw EstimationError("GP kernel matrix is singular even with jitter");
    jitter = jitter == 0.0 ? 1e-10 * base : jitter * 10.0;
  }
  f.H.resize(2, n);
  f.H.row(0).setOnes();
  f.H.row(1) = x.transpose();
  const Eigen::MatrixXd KinvHt = f.llt.solve(f.H.transpose());
  f.A = f.H * KinvHt;
  f.beta = f.A.ldlt().solve(f.H * f.llt.solve(y));
  f.alpha = f.llt.solve(y - f.H.transpose() * f.beta);
  return f;
}

/// Restricted log marginal likelihood (linear coefficients integrated out).
double restricted_log_likelihood(const GpFit& f, const Eigen::VectorXd& y) {
  const Eigen::Vector2d beta = f.beta;
  const double quad = (y - f.H.transpose() * beta).dot(f.alpha);
  return -0.5 * quad - 0.5 * f.log_det - 0.5 * std::log(std::max(f.A.determinant(), 1e-300));
}

}  // namespace

LlcCurve smooth_curve(const LlcCurve& curve, const SmoothingOptions& opts) {
  if (!(opts.length_scale > 0.0)) throw ConfigError("smoothing length_scale must be positive");
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    if (curve.points[i].t <= curve.points[i - 1].t) throw ConfigError("curve steps must be strictly increasing");
  }
  SmoothedCurve s;
  s.length_scale = opts.length_scale;
  for (std::size_t i = 0; i < curve.points.size(); ++i) {
    const auto& p = curve.points[i];
    if (p.t > 0 && std::isfinite(p.lambda_hat)) s.index.push_back(i);
  }
  const auto n = static_cast<Eigen::Index>(s.index.size());
  if (n < 5) throw ConfigError("smoothing needs at least 5 points with t > 0");

  Eigen::VectorXd x(n), y(n), noise(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = curve.points[s.index[static_cast<std::size_t>(i)]];
    x(i) = std::log10(static_cast<double>(p.t));
    y(i) = p.lambda_hat;
    noise(i) = opts.noise_variance >= 0.0 ? opts.noise_variance
                                          : (std::isfinite(p.std) ? p.std * p.std : 0.0);
  }
  const double l2 = opts.length_scale * opts.length_scale;

  double sig2 = opts.signal_variance;
  if (sig2 < 0.0) {
    // Type-II maximum likelihood over log10 s², bracketed around the data variance.
    const double var = std::max((y.array() - y.mean()).square().mean(), 1e-12);
    auto neg = [&](double log_s2) {
      try {
        return -restricted_log_likelihood(fit_gp(x, y, noise, std::pow(10.0, log_s2), l2), y);
      } catch (const EstimationError&) {
        return std::numeric_limits<double>::infinity();
      }
    };
    const double c = std::log10(var);
    boost::uintmax_t iters = 100;
    sig2 = std::pow(10.0, boost::math::tools::brent_find_minima(neg, c - 6.0, c + 4.0, 40, iters).first);
  }
  s.signal_variance = sig2;
  const GpFit f = fit_gp(x, y, noise, sig2, l2);
  s.intercept = f.beta(0);
  s.slope = f.beta(1);
  const Eigen::Matrix2d Ainv = f.A.inverse();

  s.log_t.resize(static_cast<std::size_t>(n));
  s.mean.resize(static_cast<std::size_t>(n));
  s.derivative.resize(static_cast<std::size_t>(n));
  s.derivative_std.resize(static_cast<std::size_t>(n));
  for (Eigen::Index q = 0; q < n; ++q) {
    const double xs = x(q);
    Eigen::VectorXd ks(n), dks(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      ks(i) = sig2 * std::exp(-0.5 * (xs - x(i)) * (xs - x(i)) / l2);
      dks(i) = -(xs - x(i)) / l2 * ks(i);
    }
    const auto uq = static_cast<std::size_t>(q);
    s.log_t[uq] = xs;
    s.mean[uq] = ks.dot(f.alpha) + f.beta(0) + f.beta(1) * xs;
    s.derivative[uq] = dks.dot(f.alpha) + f.beta(1);
    const Eigen::VectorXd Kinv_dks = f.llt.solve(dks);
    const Eigen::Vector2d R = Eigen::Vector2d(0.0, 1.0) - f.H * Kinv_dks;
    const double var = sig2 / l2 - dks.dot(Kinv_dks) + R.dot(Ainv * R);
    s.derivative_std[uq] = std::sqrt(std::max(var, 0.0));
  }
  LlcCurve out = curve;
  out.smoothed = std::move(s);
  return out;
}

std::string to_string(BoundaryKind k) {
  return k == BoundaryKind::zero_crossing ? "zero_crossing" : "saddle_plateau";
}

double default_tolerance(const SmoothedCurve& s, double fraction) {
  double mx = 0.0;
  for (double d : s.derivative) mx = std::max(mx, std::abs(d));
  return fraction * mx;
}

std::vector<StageBoundary> detect_boundaries(const LlcCurve& curve, double tolerance) {
  if (!curve.smoothed) throw ConfigError("detect_boundaries needs a smoothed curve");
  const SmoothedCurve& s = *curve.smoothed;
  const std::size_t n = s.derivative.size();
  if (tolerance < 0.0) tolerance = default_tolerance(s);
  const auto& d = s.derivative;
  auto sign = [](double v) { return (v > 0.0) - (v < 0.0); };

  // Interior candidates: the smaller-|d| end of each sign change, and local
  // minima of |d| below tolerance.
  std::vector<bool> candidate(n, false);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    if (sign(d[i]) * sign(d[i + 1]) < 0) {
      const std::size_t j = std::abs(d[i]) <= std::abs(d[i + 1]) ? i : i + 1;
      if (j > 0 && j + 1 < n) candidate[j] = true;
    }
  }
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double a = std::abs(d[i]);
    const double l = std::abs(d[i - 1]), r = std::abs(d[i + 1]);
    if (a <= l && a <= r && (a < l || a < r) && a < tolerance) candidate[i] = true;
  }

  // Candidates joined by a run of |d| < tolerance belong to one flat region.
  // Noise can put several minima or sign changes inside it, so the region is
  // reported once, at the point nearest its midpoint in log t. It is a zero
  // crossing when the derivative changes sign across it.
  std::vector<StageBoundary> out;
  std::size_t i = 1;
  while (i + 1 < n) {
    if (!candidate[i]) {
      ++i;
      continue;
    }
    std::size_t first = i, last = i;
    for (std::size_t j = i + 1; j + 1 < n; ++j) {
      if (candidate[j]) {
        last = j;
      } else if (std::abs(d[j]) >= tolerance) {
        break;
      }
    }
    std::size_t lo = first, hi = last;
    while (lo > 1 && std::abs(d[lo - 1]) < tolerance) --lo;
    while (hi + 2 < n && std::abs(d[hi + 1]) < tolerance) ++hi;
    const double mid = 0.5 * (s.log_t[lo] + s.log_t[hi]);
    std::size_t best = lo;
    for (std::size_t j = lo; j <= hi; ++j)
      if (std::abs(s.log_t[j] - mid) < std::abs(s.log_t[best] - mid)) best = j;
    StageBoundary b;
    b.index = s.index[best];
    b.t = curve.points[b.index].t;
    const int left = sign(d[first - 1]), right = sign(d[last + 1]);
    b.kind = left * right < 0 || (left == 0) != (right == 0) ? BoundaryKind::zero_crossing
                                                              : BoundaryKind::saddle_plateau;
    b.derivative_value = d[best];
    out.push_back(b);
    i = last + 1;
  }
  return out;
}

LlcCurve staircase_fixture(std::span<const std::uint64_t> steps, std::span<const double> plateaus,
                           double height, double noise_std, std::uint64_t seed) {
  if (plateaus.empty()) throw ConfigError("staircase fixture needs at least one plateau");
  for (std::size_t i = 1; i < plateaus.size(); ++i)
    if (plateaus[i] <= plateaus[i - 1]) throw ConfigError("plateaus must be increasing");
  // Each segment between plateaus rises by `height` with slope
  // (2h/L)·sin²(π·u/L); outside the outermost plateaus the slope ramps up over
  // half a segment and then stays at its peak.
  const double l_first = plateaus.size() > 1 ? plateaus[1] - plateaus[0] : 1.0;
  const double l_last = plateaus.size() > 1 ? plateaus.back() - plateaus[plateaus.size() - 2] : 1.0;
  auto level = [&](double x) {
    const double pi = 3.14159265358979323846;
    if (x <= plateaus.front()) {
      const double L = l_first, u = plateaus.front() - x;
      const double v = u <= L / 2 ? (u - L * std::sin(2 * pi * u / L) / (2 * pi)) / L
                                  : 0.5 + 2.0 * (u - L / 2) / L;
      return -height * v;
    }
    if (x >= plateaus.back()) {
      const double L = l_last, u = x - plateaus.back();
      const double v = u <= L / 2 ? (u - L * std::sin(2 * pi * u / L) / (2 * pi)) / L
                                  : 0.5 + 2.0 * (u - L / 2) / L;
      return height * (static_cast<double>(plateaus.size() - 1) + v);
    }
    std::size_t k = 0;
    while (x > plateaus[k + 1]) ++k;
    const double L = plateaus[k + 1] - plateaus[k], u = x - plateaus[k];
    return height * (static_cast<double>(k) + (u - L * std::sin(2 * pi * u / L) / (2 * pi)) / L);
  };
  // Shifted so the noiseless curve starts at 0 at t = 1.
  const double base = level(0.0);
  LlcCurve c;
  RngStream rng(seed, "staircase-fixture");
  for (std::uint64_t t : steps) {
    const double x = std::log10(static_cast<double>(std::max<std::uint64_t>(t, 1)));
    const double v = level(x) - base + noise_std * rng.normal();
    c.points.push_back({t, v, noise_std, -v / 100.0});
  }
  return c;
}

std::vector<StageRow> stage_table(const LlcCurve& curve, const std::vector<StageBoundary>& b) {
  std::vector<StageRow> rows;
  if (curve.points.empty()) return rows;
  std::vector<std::size_t> cuts{0};
  for (const auto& x : b)
    if (x.index > cuts.back()) cuts.push_back(x.index);
  if (curve.points.size() - 1 > cuts.back()) cuts.push_back(curve.points.size() - 1);
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    const auto& p0 = curve.points[cuts[i]];
    const auto& p1 = curve.points[cuts[i + 1]];
    rows.push_back({p0.t, p1.t, p1.loss - p0.loss, p1.lambda_hat - p0.lambda_hat});
  }
  return rows;
}

std::string format_step(std::uint64_t t) {
  char buf[32];
  if (t < 1000) {
    std::snprintf(buf, sizeof buf, "%llu", static_cast<unsigned long long>(t));
  } else {
    std::snprintf(buf, sizeof buf, "%.3gk", static_cast<double>(t) / 1000.0);
  }
  return buf;
}

std::string render_stage_table(const std::vector<StageRow>& rows) {
  std::ostringstream s;
  char line[128];
  std::snprintf(line, sizeof line, "%-6s %-8s %10s %10s\n", "Stage", "End t", "dLoss", "dLLC");
  s << line;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    char dl[32], dlam[32];
    std::snprintf(dl, sizeof dl, "%+.3g", rows[i].delta_loss);
    std::snprintf(dlam, sizeof dlam, "%+.3g", rows[i].delta_lambda);
    std::snprintf(line, sizeof line, "%-6s %-8s %10s %10s\n", ("LR" + std::to_string(i + 1)).c_str(),
                  format_step(rows[i].end_t).c_str(), dl, dlam);
    s << line;
  }
  return s.str();
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct PowerResult {
  double value = 0.0;
  double residual = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
};

/// Dominant eigenpair of (H − shift·I) from a random start.
PowerResult power_iteration(const LossModel& model, std::span<const double> params,
                            const DataBatch& batch, double shift, std::size_t iters, double tol,
                            RngStream rng) {
  const std::size_t d = params.size();
  std::vector<double> v(d);
  for (double& x : v) x = rng.normal();
  double nv = std::sqrt(dot(v, v));
  for (double& x : v) x /= nv;
  PowerResult r;
  for (std::size_t it = 0; it < iters; ++it) {
    std::vector<double> hv = model.hvp(params, batch, v);
    for (std::size_t i = 0; i < d; ++i) hv[i] -= shift * v[i];
    r.iterations = it + 1;
    const double nh = std::sqrt(dot(hv, hv));
    if (nh == 0.0) {
      r.value = 0.0;
      r.residual = 0.0;
      r.converged = true;
      return r;
    }
    r.value = dot(v, hv);
    double res = 0.0;
    for (std::size_t i = 0; i < d; ++i) res += (hv[i] - r.value * v[i]) * (hv[i] - r.value * v[i]);
    r.residual = std::sqrt(res);
    if (r.residual <= tol * std::abs(r.value)) {
      r.converged = true;
      return r;
    }
    for (std::size_t i = 0; i < d; ++i) v[i] = hv[i] / nh;
  }
  return r;
}

}  // namespace

HessianStats hessian_stats(const LossModel& model, std::span<const double> params,
                           const DataBatch& batch, const HessianOptions& opts) {
  if (opts.hutchinson_samples < 10) throw ConfigError("hutchinson_samples must be at least 10");
  if (opts.power_iters < 50) throw ConfigError("power_iters must be at least 50");
  HessianStats st;
  const std::size_t d = params.size();
  std::vector<double> q(opts.hutchinson_samples);
  for (std::size_t s = 0; s < opts.hutchinson_samples; ++s) {
    RngStream rng(opts.seed, "hutchinson", s);
    std::vector<double> z(d);
    for (double& x : z) x = rng.rademacher();
    q[s] = dot(z, model.hvp(params, batch, z));
  }
  double mean = 0.0;
  for (double v : q) mean += v;
  mean /= static_cast<double>(q.size());
  double var = 0.0;
  for (double v : q) var += (v - mean) * (v - mean);
  var /= static_cast<double>(q.size() - 1);
  st.trace = mean;
  st.trace_stderr = std::sqrt(var / static_cast<double>(q.size()));
  st.samples = q.size();

  auto run = [&](double shift, std::uint64_t attempt) {
    PowerResult r = power_iteration(model, params, batch, shift, opts.power_iters, opts.tolerance,
                                    RngStream(opts.seed, "power-iteration", attempt));
    if (!r.converged) {
      PowerResult again = power_iteration(model, params, batch, shift, opts.power_iters,
                                          opts.tolerance,
                                          RngStream(opts.seed, "power-iteration", attempt + 1));
      again.iterations += r.iterations;
      r = again;
    }
    return r;
  };
  PowerResult dom = run(0.0, 0);
  std::size_t total = dom.iterations;
  if (dom.value < 0.0) {
    PowerResult top = run(dom.value, 2);
    total += top.iterations;
    top.value += dom.value;
    dom = top;
  }
  st.max_eigenvalue = dom.value;
  st.residual = dom.residual;
  st.converged = dom.converged;
  st.iterations = total;
  return st;
}

std::string to_string(Dominance d) {
  switch (d) {
    case Dominance::crossover: return "crossover";
    case Dominance::w1_always: return "w1_always";
    case Dominance::w2_always: return "w2_always";
    case Dominance::w1_eventually: return "w1_eventually";
    case Dominance::tie: return "tie";
  }
  return "tie";
}

Crossover free_energy_crossover(const FreeEnergyMinimum& w1, const FreeEnergyMinimum& w2) {
  const double dl = w1.loss - w2.loss;  // > 0: W2 fits better
  const double dlam = w2.llc - w1.llc;  // > 0: W2 is more complex
  // D(n) = F_n(W1) − F_n(W2); W2 is preferred where D > 0.
  auto D = [&](double n) { return n * dl - dlam * std::log(n); };
  Crossover c;
  if (dl == 0.0) {
    c.dominance = dlam > 0 ? Dominance::w1_always : dlam < 0 ? Dominance::w2_always : Dominance::tie;
    return c;
  }
  if (dl < 0.0) {
    // D → −∞; W2 can only lead at small n, and only if it is simpler.
    const double peak = dlam < 0.0 ? std::max(2.0, dlam / dl) : 2.0;
    c.dominance = D(peak) > 0.0 ? Dominance::w1_eventually : Dominance::w1_always;
    return c;
  }
  if (dlam <= 0.0) {
    c.dominance = Dominance::w2_always;
    return c;
  }
  // dl > 0, dlam > 0: D is convex with its minimum at n = dlam/dl.
  const double lo = std::max(2.0, dlam / dl);
  if (D(lo) >= 0.0) {
    c.dominance = Dominance::w2_always;
    return c;
  }
  double hi = 2.0 * lo;
  while (D(hi) <= 0.0) hi *= 2.0;
  boost::uintmax_t iters = 200;
  const auto r = boost::math::tools::toms748_solve(
      D, lo, hi, D(lo), D(hi), boost::math::tools::eps_tolerance<double>(52), iters);
  c.n_crit = 0.5 * (r.first + r.second);
  c.dominance = Dominance::crossover;
  return c;
}

}  // namespace dgsc
