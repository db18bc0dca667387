#include "dgsc/sgld.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include <boost/math/special_functions/gamma.hpp>
#include <tbb/parallel_for.h>

#include "dgsc/errors.hpp"
#include "dgsc/rng.hpp"

namespace dgsc {

void SgldConfig::validate() const {
  auto positive = [](double v, const char* field) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string("sgld.") + field + " must be positive");
  };
  positive(epsilon, "epsilon");
  positive(gamma, "gamma");
  positive(nbeta, "nbeta");
  if (chains < 1) throw ConfigError("sgld.chains must be at least 1");
  if (steps < 1) throw ConfigError("sgld.steps must be at least 1");
  if (burn_in >= steps) throw ConfigError("sgld.burn_in must be smaller than sgld.steps");
  if (batch_size < 1) throw ConfigError("sgld.batch_size must be at least 1");
  if (dataset_size < 1) throw ConfigError("sgld.dataset_size must be at least 1");
}

SgldConfig SgldConfig::from_tilde(const SgldConfig& base, double epsilon, double beta_tilde,
                                  double gamma_tilde) {
  SgldConfig c = base;
  c.epsilon = epsilon;
  c.nbeta = 2.0 * beta_tilde / epsilon;
  c.gamma = 4.0 * gamma_tilde / epsilon;
  return c;
}

std::vector<std::string> flag_names(unsigned flags) {
  std::vector<std::string> out;
  if (flags & kDivergent) out.emplace_back("divergent");
  if (flags & kNonConverged) out.emplace_back("non_converged");
  if (flags & kNegative) out.emplace_back("negative");
  if (flags & kEscaped) out.emplace_back("escaped");
  return out;
}

DatasetBatchSource::DatasetBatchSource(const DataConfig& data, const SgldConfig& cfg)
    : dataset_(data, cfg.dataset_size, cfg.seed, cfg.loss_mode), m_(cfg.batch_size), seed_(cfg.seed) {
  RngStream rng(seed_, "sgld-reference");
  reference_ = dataset_.draw(rng, m_);
}

DataBatch DatasetBatchSource::minibatch(std::size_t chain, std::size_t tau) const {
  RngStream rng = RngStream(seed_, "sgld-batch", chain).substream(tau);
  return dataset_.draw(rng, m_);
}

ChainResult run_chain(const LossModel& model, std::span<const double> w_star,
                      const SgldConfig& cfg, std::size_t chain, const BatchSource& source) {
  cfg.validate();
  const std::size_t d = w_star.size();
  std::vector<double> w(w_star.begin(), w_star.end());
  const double half_eps = 0.5 * cfg.epsilon;
  const double half_gamma = 0.5 * cfg.gamma;
  const double noise = std::sqrt(cfg.epsilon);
  const RngStream noise_root(cfg.seed, "sgld-noise", chain);
  ChainResult r;
  r.losses.reserve(cfg.steps);
  for (std::size_t tau = 1; tau <= cfg.steps; ++tau) {
    GradResult g;
    try {
      g = model.value_and_grad(w, source.minibatch(chain, tau));
    } catch (const NumericError&) {
      r.divergent = true;
      break;
    }
    r.losses.push_back(g.loss);
    RngStream rng = noise_root.substream(tau);
    double excursion = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double pull = w[i] - w_star[i];
      w[i] -= half_eps * (cfg.nbeta * g.grad[i] + half_gamma * pull);
      w[i] += noise * rng.normal();
      const double e = w[i] - w_star[i];
      excursion += e * e;
    }
    if (!std::isfinite(excursion)) {
      r.divergent = true;
      break;
    }
    r.max_excursion = std::max(r.max_excursion, std::sqrt(excursion));
  }
  return r;
}

std::vector<double> online_trace(std::span<const double> losses, double nbeta, double init_loss) {
  std::vector<double> out(losses.size());
  double prev = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const double tau = static_cast<double>(i + 1);
    prev = ((tau - 1.0) * prev + nbeta * (losses[i] - init_loss)) / tau;
    out[i] = prev;
  }
  return out;
}

namespace {

double mean_of(std::span<const double> x) {
  return x.empty() ? 0.0 : std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double sample_std(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean_of(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(x.size() - 1));
}

double ols_slope(std::span<const double> y) {
  const double n = static_cast<double>(y.size());
  const double xm = (n - 1.0) / 2.0;
  const double ym = mean_of(y);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double dx = static_cast<double>(i) - xm;
    sxy += dx * (y[i] - ym);
    sxx += dx * dx;
  }
  return sxx > 0.0 ? sxy / sxx : 0.0;
}

}  // namespace

unsigned diagnose_chain(const ChainSummary& chain, const SgldConfig& cfg) {
  unsigned flags = 0;
  bool bad = chain.truncated || !std::isfinite(chain.lambda);
  for (double v : chain.losses) bad = bad || !std::isfinite(v);
  for (double v : chain.running) bad = bad || !std::isfinite(v) || std::abs(v) > 1e6;
  if (bad) return kDivergent;

  if (chain.running.size() >= 10) {
    const std::size_t tail = std::max<std::size_t>(2, chain.running.size() / 5);
    const double slope = ols_slope(chain.running.subspan(chain.running.size() - tail));
    if (std::abs(slope) * 100.0 > 0.01 * std::abs(chain.running.back())) flags |= kNonConverged;
  }
  if (chain.lambda < -2.0 * chain.across_chain_std) flags |= kNegative;
  if (chain.losses.size() > cfg.burn_in) {
    const auto post = chain.losses.subspan(cfg.burn_in);
    const double floor = 2.0 * sample_std(post);
    if (mean_of(post) < chain.init_loss - floor) flags |= kEscaped;
  }
  return flags;
}

LlcEstimate estimate_llc(const LossModel& model, std::span<const double> w_star,
                         const SgldConfig& cfg, const BatchSource& source) {
  cfg.validate();
  LlcEstimate est;
  est.init_loss = model.loss(w_star, source.reference());
  std::vector<ChainResult> runs(cfg.chains);
  tbb::parallel_for(std::size_t{0}, cfg.chains,
                    [&](std::size_t c) { runs[c] = run_chain(model, w_star, cfg, c, source); });

  est.per_chain.assign(cfg.chains, std::numeric_limits<double>::quiet_NaN());
  std::vector<double> valid;
  for (std::size_t c = 0; c < cfg.chains; ++c) {
    auto& r = runs[c];
    if (r.divergent || r.losses.size() <= cfg.burn_in) {
      r.divergent = true;
      continue;
    }
    const std::span<const double> post(r.losses.data() + cfg.burn_in, r.losses.size() - cfg.burn_in);
    est.per_chain[c] = cfg.nbeta * (mean_of(post) - est.init_loss);
    valid.push_back(est.per_chain[c]);
  }
  est.lambda_std = sample_std(valid);
  est.chain_flags.assign(cfg.chains, 0);
  for (std::size_t c = 0; c < cfg.chains; ++c) {
    est.traces.push_back(online_trace(runs[c].losses, cfg.nbeta, est.init_loss));
    ChainSummary s;
    s.losses = runs[c].losses;
    s.running = est.traces.back();
    s.init_loss = est.init_loss;
    s.lambda = runs[c].divergent ? std::numeric_limits<double>::quiet_NaN() : est.per_chain[c];
    s.across_chain_std = est.lambda_std;
    s.max_excursion = runs[c].max_excursion;
    s.truncated = runs[c].divergent;
    est.chain_flags[c] = diagnose_chain(s, cfg);
    est.flags |= est.chain_flags[c];
    est.losses.push_back(std::move(runs[c].losses));
  }
  if (valid.empty()) {
    throw EstimationError("all " + std::to_string(cfg.chains) + " SGLD chains diverged (flags: divergent)");
  }
  est.lambda_hat = mean_of(valid);
  return est;
}

CalibrationResult calibration_sweep(const LossModel& model, std::span<const double> w_star,
                                    const SgldConfig& base, const CalibrationGrid& grid,
                                    const BatchSource& source, double robust_tol) {
  if (grid.epsilons.empty() || grid.beta_tildes.empty() || grid.gamma_tildes.empty()) {
    throw ConfigError("calibration grid must be nonempty in every axis");
  }
  CalibrationResult res;
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> groups;
  for (std::size_t gi = 0; gi < grid.gamma_tildes.size(); ++gi) {
    for (std::size_t bi = 0; bi < grid.beta_tildes.size(); ++bi) {
      for (double eps : grid.epsilons) {
        CalibrationPoint p;
        p.epsilon = eps;
        p.beta_tilde = grid.beta_tildes[bi];
        p.gamma_tilde = grid.gamma_tildes[gi];
        const SgldConfig cfg = SgldConfig::from_tilde(base, eps, p.beta_tilde, p.gamma_tilde);
        try {
          const LlcEstimate e = estimate_llc(model, w_star, cfg, source);
          p.lambda_hat = e.lambda_hat;
          p.lambda_std = e.lambda_std;
          p.flags = e.flags;
        } catch (const EstimationError&) {
          p.lambda_hat = std::numeric_limits<double>::quiet_NaN();
          p.flags = kDivergent;
        }
        groups[{gi, bi}].push_back(res.points.size());
        res.points.push_back(p);
      }
    }
  }

  struct Candidate {
    std::size_t gi, bi;
    double variation;
  };
  std::vector<Candidate> admissible;
  for (const auto& [key, idx] : groups) {
    bool ok = true;
    double lo = INFINITY, hi = -INFINITY, sum = 0.0;
    for (std::size_t i : idx) {
      ok = ok && res.points[i].admissible();
      lo = std::min(lo, res.points[i].lambda_hat);
      hi = std::max(hi, res.points[i].lambda_hat);
      sum += res.points[i].lambda_hat;
    }
    if (!ok) continue;
    const double mean = sum / static_cast<double>(idx.size());
    const double variation = mean != 0.0 ? (hi - lo) / std::abs(mean) : (hi > lo ? INFINITY : 0.0);
    admissible.push_back({key.first, key.second, variation});
  }
  if (admissible.empty()) return res;

  std::vector<Candidate> robust;
  for (const auto& c : admissible)
    if (c.variation <= robust_tol) robust.push_back(c);
  const Candidate* best = nullptr;
  if (!robust.empty()) {
    for (const auto& c : robust) {
      if (!best || grid.gamma_tildes[c.gi] < grid.gamma_tildes[best->gi] ||
          (grid.gamma_tildes[c.gi] == grid.gamma_tildes[best->gi] &&
           grid.beta_tildes[c.bi] > grid.beta_tildes[best->bi])) {
        best = &c;
      }
    }
  } else {
    for (const auto& c : admissible)
      if (!best || c.variation < best->variation) best = &c;
  }
  std::vector<std::size_t> idx = groups[{best->gi, best->bi}];
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return res.points[a].epsilon < res.points[b].epsilon; });
  res.recommended = idx[(idx.size() - 1) / 2];
  res.recommended_variation = best->variation;
  return res;
}

std::vector<CurvePoint> estimate_llc_curve(const LossModel& model,
                                           const std::vector<CheckpointRef>& checkpoints,
                                           const SgldConfig& cfg, const BatchSource& source) {
  if (checkpoints.empty()) throw ConfigError("estimate_llc_curve needs at least one checkpoint");
  std::vector<CurvePoint> out;
  for (const auto& ref : checkpoints) {
    CurvePoint p;
    p.step = ref.step;
    try {
      const std::vector<double> w = ref.load();
      const LlcEstimate e = estimate_llc(model, w, cfg, source);
      p.lambda_hat = e.lambda_hat;
      p.lambda_std = e.lambda_std;
      p.init_loss = e.init_loss;
      p.flags = e.flags;
    } catch (const Error& e) {
      p.ok = false;
      p.lambda_hat = std::numeric_limits<double>::quiet_NaN();
      p.error = e.what();
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<double> log_grid(double lo, double hi, std::size_t n) {
  if (!(lo > 0.0 && hi > lo) || n < 2) throw ConfigError("log grid needs 0 < lo < hi and n >= 2");
  std::vector<double> g(n);
  const double a = std::log(lo), b = std::log(hi);
  for (std::size_t i = 0; i < n; ++i) {
    g[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1));
  }
  g.front() = lo;
  g.back() = hi;
  return g;
}

VolumeFit volume_llc_oracle(const AnalyticPotential& p, const VolumeOptions& opts) {
  if (opts.epsilons.size() < 6) throw ConfigError("volume oracle needs at least 6 epsilon values");
  if (!(opts.ball_radius > 0.0)) throw ConfigError("volume oracle ball radius must be positive");
  for (double e : opts.epsilons)
    if (!(e > 0.0)) throw ConfigError("volume oracle epsilons must be positive");

  constexpr std::uint64_t kBlock = 1u << 16;
  const std::size_t d = p.dim();
  const std::size_t G = opts.epsilons.size();
  const double base = p.eval(p.reference_point());
  const std::uint64_t key = purpose_tag(p.name());
  std::vector<std::uint64_t> hits(G, 0);
  std::uint64_t blocks = 0;
  std::uint64_t target = std::max<std::uint64_t>(1, (opts.samples + kBlock - 1) / kBlock);
  const std::uint64_t cap = std::max<std::uint64_t>(1, opts.max_samples / kBlock);

  auto draw_blocks = [&](std::uint64_t from, std::uint64_t to) {
    std::vector<std::vector<std::uint64_t>> part(to - from, std::vector<std::uint64_t>(G, 0));
    tbb::parallel_for(from, to, [&](std::uint64_t b) {
      RngStream rng = RngStream(opts.seed, "volume-oracle", key).substream(b);
      std::vector<double> w(d);
      auto& h = part[b - from];
      for (std::uint64_t s = 0; s < kBlock; ++s) {
        double n2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          w[i] = rng.normal();
          n2 += w[i] * w[i];
        }
        const double r = opts.ball_radius * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
        const double scale = r / std::sqrt(n2);
        for (std::size_t i = 0; i < d; ++i) w[i] = p.reference_point()[i] + scale * w[i];
        const double l = p.eval(w) - base;
        for (std::size_t g = 0; g < G; ++g) h[g] += l < opts.epsilons[g];
      }
    });
    for (const auto& h : part)
      for (std::size_t g = 0; g < G; ++g) hits[g] += h[g];
  };

  while (true) {
    draw_blocks(blocks, target);
    blocks = target;
    if (*std::min_element(hits.begin(), hits.end()) >= opts.min_hits) break;
    if (blocks >= cap) {
      throw EstimationError("insufficient_hits: fewer than " + std::to_string(opts.min_hits) +
                            " hits for some epsilon after " + std::to_string(blocks * kBlock) +
                            " samples");
    }
    target = std::min(cap, blocks * 2);
  }

  VolumeFit fit;
  fit.samples = blocks * kBlock;
  fit.epsilons = opts.epsilons;
  fit.hits = hits;
  const double dd = static_cast<double>(d);
  const double ball = std::pow(M_PI, dd / 2.0) / boost::math::tgamma(dd / 2.0 + 1.0) *
                      std::pow(opts.ball_radius, dd);
  std::vector<double> x(G), y(G);
  for (std::size_t g = 0; g < G; ++g) {
    fit.volumes.push_back(ball * static_cast<double>(hits[g]) / static_cast<double>(fit.samples));
    x[g] = std::log(opts.epsilons[g]);
    y[g] = std::log(fit.volumes.back());
  }
  const double xm = mean_of(x), ym = mean_of(y);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t g = 0; g < G; ++g) {
    sxx += (x[g] - xm) * (x[g] - xm);
    sxy += (x[g] - xm) * (y[g] - ym);
  }
  fit.lambda = sxy / sxx;
  fit.intercept = ym - fit.lambda * xm;
  double rss = 0.0;
  for (std::size_t g = 0; g < G; ++g) {
    const double e = y[g] - fit.intercept - fit.lambda * x[g];
    rss += e * e;
  }
  fit.std_error = std::sqrt(rss / static_cast<double>(G - 2) / sxx);
  return fit;
}

}  // namespace dgsc

namespace dgsc {

SgldConfig potential_sgld_config(std::size_t dim, std::uint64_t seed) {
  SgldConfig c;
  c.epsilon = 1e-5;
  c.nbeta = 100.0;
  c.gamma = 1.0;
  c.chains = 10;
  c.steps = std::max<std::size_t>(100000, 4000000 / std::max<std::size_t>(dim, 1));
  c.burn_in = c.steps / 5;
  c.batch_size = 1;
  c.seed = seed;
  return c;
}

CalibrationGrid potential_calibration_grid() {
  return {{5e-6, 1e-5, 2e-5}, {5e-4, 1e-3}, {2.5e-6, 5e-6}};
}

CalibrationGrid model_calibration_grid(const SgldConfig& base) {
  const double b = base.beta_tilde(), g = base.gamma_tilde();
  return {{1e-4, 3e-4, 1e-3}, {b / 2, b, 2 * b}, {g / 2, g, 2 * g}};
}

}  // namespace dgsc
