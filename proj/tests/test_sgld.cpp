#include <doctest.h>

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dgsc/errors.hpp"
#include "dgsc/potentials.hpp"
#include "dgsc/sgld.hpp"

using namespace dgsc;

namespace {

SgldConfig short_config(std::size_t steps = 20000) {
  SgldConfig c = potential_sgld_config(3, 0);
  c.chains = 4;
  c.steps = steps;
  c.burn_in = steps / 5;
  return c;
}

}  // namespace

TEST_CASE("online trace matches the batch mean") {
  RngStream rng(5, "trace-test");
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 1 + rng.below(500);
    std::vector<double> losses(n);
    for (double& l : losses) l = rng.normal() + 3.0;
    const double init = rng.normal();
    const double nbeta = 1.0 + 100.0 * rng.uniform();
    const auto trace = online_trace(losses, nbeta, init);
    REQUIRE(trace.size() == n);
    const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(n);
    const double direct = nbeta * (mean - init);
    CHECK(std::abs(trace.back() - direct) <= 1e-12 * std::max(1.0, std::abs(direct)));
  }
  CHECK(online_trace(std::vector<double>{}, 10.0, 1.0).empty());
  const std::vector<double> flat(50, 2.5);
  for (double v : online_trace(flat, 10.0, 2.5)) CHECK(v == 0.0);
}

TEST_CASE("quadratic sampler matches the exact discrete stationary law") {
  // w ← r·w + √ε·ξ with r = 1 − ε(nβa + γ/4) has stationary variance ε/(1 − r²).
  const auto model = as_loss_model(axis_quadratic3(1.0, 2.0, 3.0), 1);
  SgldConfig c = short_config();
  c.epsilon = 1e-3;
  c.nbeta = 100.0;
  c.gamma = 1.0;
  c.chains = 10;
  c.burn_in = 1000;
  const std::vector<double> w_star{0.0, 0.0, 0.0};
  const LlcEstimate est = estimate_llc(*model, w_star, c, NullBatchSource{});
  double expected = 0.0;
  for (double a : {1.0, 2.0, 3.0}) {
    const double r = 1.0 - c.epsilon * (c.nbeta * a + c.gamma / 4.0);
    expected += a * c.epsilon / (1.0 - r * r);
  }
  expected *= c.nbeta;
  CHECK(est.flags == 0);
  CHECK(std::abs(est.lambda_hat - expected) < 0.03 * expected);
}

TEST_CASE("stiff localization pins the chain") {
  const auto model = as_loss_model(builtin_potentials()[0], 1);
  SgldConfig c = short_config(5000);
  c.epsilon = 1e-9;
  c.gamma = 1e9;
  const std::vector<double> w_star{0.0, 0.0};
  const LlcEstimate est = estimate_llc(*model, w_star, c, NullBatchSource{});
  CHECK(std::abs(est.lambda_hat) < 1e-3);
  const ChainResult chain = run_chain(*model, w_star, c, 0, NullBatchSource{});
  CHECK(chain.max_excursion <= 1e-3);
}

TEST_CASE("diagnostics on synthetic chains") {
  SgldConfig c;
  c.burn_in = 200;
  std::vector<double> losses(1000, 1.01);
  std::vector<double> running(1000, 1.0);
  ChainSummary s{losses, running, 1.0, 1.0, 0.1, 0.0, false};
  CHECK(diagnose_chain(s, c) == 0u);

  std::vector<double> ramp(1000);
  for (std::size_t i = 0; i < ramp.size(); ++i) ramp[i] = 1.0 + static_cast<double>(i) / 1000.0;
  s.running = ramp;
  CHECK(diagnose_chain(s, c) == kNonConverged);

  std::vector<double> low(1000);
  for (std::size_t i = 0; i < low.size(); ++i) low[i] = 0.5 + 0.001 * std::sin(static_cast<double>(i));
  ChainSummary e{low, running, 1.0, -5.0, 1.0, 0.0, false};
  CHECK(diagnose_chain(e, c) == (kEscaped | kNegative));

  std::vector<double> blown(running);
  blown[500] = 2e6;
  ChainSummary d{losses, blown, 1.0, 1.0, 0.1, 0.0, false};
  CHECK(diagnose_chain(d, c) == kDivergent);
  d.running = running;
  d.truncated = true;
  CHECK(diagnose_chain(d, c) == kDivergent);
  CHECK(flag_names(kEscaped | kNegative) == std::vector<std::string>{"negative", "escaped"});
}

TEST_CASE("a chain started off the minimum escapes") {
  const auto model = as_loss_model(builtin_potentials()[0], 1);
  SgldConfig c = short_config();
  c.gamma = 1e-3;
  const std::vector<double> w_star{1.0, 0.0};
  const LlcEstimate est = estimate_llc(*model, w_star, c, NullBatchSource{});
  CHECK((est.flags & kEscaped) != 0u);
  CHECK((est.flags & kNegative) != 0u);
  CHECK(est.lambda_hat < 0.0);
}

TEST_CASE("estimates are deterministic and chains are independent") {
  const auto model = as_loss_model(builtin_potentials()[0], 1);
  SgldConfig c = short_config(5000);
  const std::vector<double> w_star{0.0, 0.0};
  const LlcEstimate a = estimate_llc(*model, w_star, c, NullBatchSource{});
  const LlcEstimate b = estimate_llc(*model, w_star, c, NullBatchSource{});
  CHECK(a.per_chain == b.per_chain);
  CHECK(a.losses == b.losses);
  c.chains = 6;
  const LlcEstimate wide = estimate_llc(*model, w_star, c, NullBatchSource{});
  for (std::size_t i = 0; i < 4; ++i) CHECK(wide.per_chain[i] == a.per_chain[i]);
  for (const auto& chain : a.losses)
    for (std::size_t t = c.burn_in; t < chain.size(); ++t) CHECK(chain[t] > 0.0);
  c.seed = 1;
  CHECK(estimate_llc(*model, w_star, c, NullBatchSource{}).per_chain != a.per_chain);
}

TEST_CASE("l1 recovers its learning coefficient") {
  const auto model = as_loss_model(builtin_potentials()[0], 1);
  SgldConfig c = potential_sgld_config(2, 0);
  c.steps = 200000;
  c.burn_in = 40000;
  const LlcEstimate est = estimate_llc(*model, std::vector<double>{0.0, 0.0}, c, NullBatchSource{});
  CHECK(est.flags == 0);
  CHECK(std::abs(est.lambda_hat - 1.0) < 0.1);
}

TEST_CASE("divergence is flagged and fatal when universal") {
  const auto model = as_loss_model(axis_quadratic3(1.0, 2.0, 3.0), 1);
  SgldConfig c = short_config(2000);
  c.epsilon = 1e-2;
  const std::vector<double> w_star{0.0, 0.0, 0.0};
  CHECK_THROWS_AS(estimate_llc(*model, w_star, c, NullBatchSource{}), EstimationError);

  // With β̃ fixed the drift contraction 1 − 2β̃a does not depend on ε, so
  // β̃ = 0.5 overshoots on a = 3 at every step size.
  CalibrationGrid grid{{1e-5, 2e-5}, {5e-4, 0.5}, {2.5e-6}};
  c.steps = 20000;
  c.burn_in = 4000;
  const CalibrationResult sweep = calibration_sweep(*model, w_star, c, grid, NullBatchSource{});
  REQUIRE(sweep.points.size() == 4);
  for (const auto& p : sweep.points) {
    if (p.beta_tilde == 0.5) CHECK((p.flags & kDivergent) != 0u);
  }
  REQUIRE(sweep.recommended.has_value());
  CHECK(sweep.points[*sweep.recommended].beta_tilde == 5e-4);
}

TEST_CASE("calibration sweep recommends an admissible point") {
  const auto model = as_loss_model(axis_quadratic3(1.0, 2.0, 3.0), 1);
  SgldConfig c = short_config(40000);
  CalibrationGrid grid{{1e-5, 2e-5}, {5e-4, 1e-3}, {2.5e-6}};
  const CalibrationResult sweep =
      calibration_sweep(*model, std::vector<double>{0.0, 0.0, 0.0}, c, grid, NullBatchSource{});
  CHECK(sweep.points.size() == 4);
  REQUIRE(sweep.recommended.has_value());
  const CalibrationPoint& p = sweep.points[*sweep.recommended];
  CHECK(p.admissible());
  CHECK(std::abs(p.lambda_hat - 1.5) < 0.3);
  CHECK(sweep.recommended_variation <= 0.1);

  const SgldConfig t = SgldConfig::from_tilde(c, 1e-5, 5e-4, 2.5e-6);
  CHECK(t.beta_tilde() == doctest::Approx(5e-4));
  CHECK(t.gamma_tilde() == doctest::Approx(2.5e-6));
  CHECK(t.nbeta == doctest::Approx(100.0));
  CHECK(t.gamma == doctest::Approx(1.0));
}

TEST_CASE("volume oracle on l1, l2, l3") {
  const auto pots = builtin_potentials();
  const double tol[] = {0.05, 0.10, 0.15};
  for (int i = 0; i < 3; ++i) {
    VolumeOptions o;
    o.epsilons = log_grid(1e-6, 1e-2, 9);
    const VolumeFit fit = volume_llc_oracle(pots[static_cast<std::size_t>(i)], o);
    const double known = pots[static_cast<std::size_t>(i)].known_llc().value();
    CAPTURE(i);
    CHECK(std::abs(fit.lambda - known) <= tol[i] * known);
  }
  const auto g = log_grid(1e-4, 1.0, 5);
  CHECK(g.front() == doctest::Approx(1e-4));
  CHECK(g[2] == doctest::Approx(1e-2));
  CHECK(g.back() == doctest::Approx(1.0));
}

TEST_CASE("llc curve turns failures into gaps") {
  const auto model = as_loss_model(builtin_potentials()[0], 1);
  SgldConfig c = short_config(3000);
  std::vector<CheckpointRef> refs{
      {0, [] { return std::vector<double>{0.0, 0.0}; }},
      {10, []() -> std::vector<double> { throw IoError("missing checkpoint"); }},
      {20, [] { return std::vector<double>{0.1, 0.0}; }},
  };
  const auto curve = estimate_llc_curve(*model, refs, c, NullBatchSource{});
  REQUIRE(curve.size() == 3);
  CHECK(curve[0].ok);
  CHECK_FALSE(curve[1].ok);
  CHECK(curve[1].error.find("missing checkpoint") != std::string::npos);
  CHECK(curve[2].ok);
  const LlcEstimate direct = estimate_llc(*model, std::vector<double>{0.0, 0.0}, c, NullBatchSource{});
  CHECK(curve[0].lambda_hat == direct.lambda_hat);
}

TEST_CASE("dataset minibatches are pure in (chain, tau)") {
  DataConfig d;
  SgldConfig c;
  c.batch_size = 16;
  c.dataset_size = 1000;
  const DatasetBatchSource src(d, c);
  const DataBatch a = src.minibatch(2, 17);
  const DataBatch b = src.minibatch(2, 17);
  REQUIRE(a.contexts.size() == 16);
  CHECK(a.contexts[5].ys == b.contexts[5].ys);
  const DataBatch other = src.minibatch(2, 18);
  CHECK(other.contexts[0].ys != a.contexts[0].ys);
}
