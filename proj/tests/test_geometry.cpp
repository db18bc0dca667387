#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "dgsc/errors.hpp"
#include "dgsc/geometry.hpp"
#include "dgsc/icl_data.hpp"
#include "dgsc/potentials.hpp"
#include "dgsc/tiny_mlp.hpp"
#include "dgsc/trainer.hpp"
#include "support.hpp"

using namespace dgsc;

namespace {

const std::vector<std::uint64_t>& grid() {
  static const std::vector<std::uint64_t> g = checkpoint_plan(500000, 100, 90);
  return g;
}

LlcCurve curve_from(const std::function<double(double)>& f, double noise, std::uint64_t seed) {
  RngStream rng(seed, "geometry-test");
  LlcCurve c;
  for (std::uint64_t t : grid()) {
    const double x = std::log10(static_cast<double>(std::max<std::uint64_t>(t, 1)));
    c.points.push_back({t, f(x) + noise * rng.normal(), noise, 0.0});
  }
  return c;
}

std::vector<std::size_t> boundary_indices(const LlcCurve& c) {
  std::vector<std::size_t> out;
  for (const auto& b : detect_boundaries(smooth_curve(c))) out.push_back(b.index);
  return out;
}

}  // namespace

TEST_CASE("smoothing a linear trend recovers its slope") {
  const LlcCurve s = smooth_curve(curve_from([](double x) { return 2.0 + 0.5 * x; }, 0.01, 1));
  REQUIRE(s.smoothed);
  CHECK(s.smoothed->index.size() == grid().size() - 1);
  for (double d : s.smoothed->derivative) CHECK(std::abs(d - 0.5) < 1e-3);
}

TEST_CASE("smoothing pure noise stays near the level") {
  const LlcCurve s = smooth_curve(curve_from([](double) { return 3.0; }, 0.1, 2));
  for (double m : s.smoothed->mean) CHECK(std::abs(m - 3.0) < 0.2);
}

TEST_CASE("smoothing needs five usable points") {
  LlcCurve c;
  for (std::uint64_t t : {0, 10, 100, 1000, 10000}) c.points.push_back({t, 1.0, 0.1, 0.0});
  CHECK_THROWS_AS(smooth_curve(c), ConfigError);
  c.points.push_back({100000, 1.0, 0.1, 0.0});
  CHECK_NOTHROW(smooth_curve(c));
}

TEST_CASE("staircase plateaus are recovered") {
  const std::vector<std::vector<double>> sets{{1.5, 3.0, 4.6}, {1.2, 2.5, 3.8, 5.1}, {2.0, 4.0}};
  for (const auto& plateaus : sets) {
    for (std::uint64_t seed : {1, 2, 3}) {
      const LlcCurve c = staircase_fixture(grid(), plateaus, 1.0, 0.03, seed);
      const auto b = detect_boundaries(smooth_curve(c));
      CAPTURE(seed);
      REQUIRE(b.size() == plateaus.size());
      for (std::size_t i = 0; i < b.size(); ++i) {
        CHECK(std::abs(std::log10(static_cast<double>(b[i].t)) - plateaus[i]) < 0.25);
        CHECK(b[i].kind == BoundaryKind::saddle_plateau);
      }
    }
  }
}

TEST_CASE("monotone curves have no boundaries") {
  const LlcCurve c = curve_from([](double x) { return x + 0.5 * x * x; }, 0.01, 3);
  CHECK(boundary_indices(c).empty());
}

TEST_CASE("a rise and fall yields one zero crossing") {
  const LlcCurve c = curve_from([](double x) { return -(x - 3.0) * (x - 3.0); }, 0.01, 4);
  const auto b = detect_boundaries(smooth_curve(c));
  REQUIRE(b.size() == 1);
  CHECK(b[0].kind == BoundaryKind::zero_crossing);
  CHECK(std::abs(std::log10(static_cast<double>(b[0].t)) - 3.0) < 0.15);
}

TEST_CASE("boundaries are invariant under affine maps of the curve") {
  const LlcCurve c = staircase_fixture(grid(), std::vector<double>{1.5, 3.0, 4.6}, 1.0, 0.03, 7);
  LlcCurve a = c;
  for (auto& p : a.points) {
    p.lambda_hat = 3.0 * p.lambda_hat - 7.0;
    p.std *= 3.0;
  }
  CHECK(boundary_indices(a) == boundary_indices(c));
}

TEST_CASE("stage table formatting") {
  CHECK(format_step(999) == "999");
  CHECK(format_step(1000) == "1k");
  CHECK(format_step(126000) == "126k");
  CHECK(format_step(500000) == "500k");
  LlcCurve c;
  const std::uint64_t ts[] = {100, 1000, 40000, 126000, 320000, 500000};
  const double lam[] = {0.0, 21.4, 170.4, 158.1, 114.0, 117.56};
  for (int i = 0; i < 6; ++i) c.points.push_back({ts[i], lam[i], 0.1, -lam[i] / 100.0});
  std::vector<StageBoundary> b;
  for (std::size_t i = 1; i <= 4; ++i) b.push_back({ts[i], i, BoundaryKind::saddle_plateau, 0.0});
  const auto rows = stage_table(c, b);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].start_t == 100);
  CHECK(rows[4].end_t == 500000);
  CHECK(rows[1].delta_loss == doctest::Approx(-1.49));
  const std::string text = render_stage_table(rows);
  for (const char* s : {"LR1", "LR5", "1k", "40k", "126k", "320k", "500k", "+21.4", "+149", "-12.3",
                        "-44.1", "+3.56"}) {
    CAPTURE(s);
    CHECK(text.find(s) != std::string::npos);
  }
  CHECK(stage_table(c, {}).size() == 1);
}

TEST_CASE("hessian statistics on potentials") {
  const auto pots = builtin_potentials();
  const auto l5 = as_loss_model(pots[4], 1);
  const HessianStats h = hessian_stats(*l5, std::vector<double>{0.0, 0.0, 0.0}, DataBatch{});
  CHECK(h.trace == doctest::Approx(12.0).epsilon(1e-12));
  CHECK(h.converged);
  CHECK(h.max_eigenvalue == doctest::Approx(6.0).epsilon(1e-6));
  for (int i : {1, 2}) {
    const auto m = as_loss_model(pots[static_cast<std::size_t>(i)], 1);
    const HessianStats z = hessian_stats(*m, std::vector<double>{0.0, 0.0}, DataBatch{});
    CHECK(z.trace == 0.0);
    CHECK(z.max_eigenvalue == 0.0);
  }
  HessianOptions bad;
  bad.hutchinson_samples = 5;
  CHECK_THROWS_AS(hessian_stats(*l5, std::vector<double>{0.0, 0.0, 0.0}, DataBatch{}, bad), ConfigError);
}

TEST_CASE("hutchinson and power iteration agree with a dense hessian") {
  TinyMlp m;
  DataConfig d;
  d.dim = 2;
  d.max_examples = 4;
  RngStream rng(11, "geometry-test");
  const DataBatch batch = make_batch(sample_batch(d, 6, rng));
  std::vector<double> w(12);
  for (double& x : w) x = 0.7 * rng.normal();
  const auto dense = testing::fd_dense_hessian([&](std::span<const double> p) { return m.loss(p, batch); }, w);
  Eigen::Map<const Eigen::Matrix<double, 12, 12, Eigen::RowMajor>> H(dense.data());
  const Eigen::Matrix<double, 12, 12> Hs = 0.5 * (H + H.transpose());
  HessianOptions o;
  o.hutchinson_samples = 400;
  o.power_iters = 2000;
  const HessianStats h = hessian_stats(m, w, batch, o);
  CHECK(std::abs(h.trace - Hs.trace()) <= 3.0 * h.trace_stderr + 1e-6);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 12, 12>> es(Hs);
  const auto ev = es.eigenvalues();
  const double dominant = std::abs(ev(0)) > std::abs(ev(11)) ? ev(0) : ev(11);
  if (dominant > 0.0) {
    CHECK(h.max_eigenvalue == doctest::Approx(ev(11)).epsilon(1e-4));
  } else {
    CHECK(h.max_eigenvalue <= ev(11) + 1e-4 * std::abs(dominant));
  }
}

TEST_CASE("free energy crossover") {
  const FreeEnergyMinimum simple{1.0, 1.0, "simple"}, complex{0.9, 20.0, "complex"};
  const Crossover c = free_energy_crossover(simple, complex);
  REQUIRE(c.n_crit);
  CHECK(c.dominance == Dominance::crossover);
  // Brute force: the last n where the simple minimum is still preferred.
  auto D = [&](double n) { return n * (simple.loss - complex.loss) - (complex.llc - simple.llc) * std::log(n); };
  double last = 2.0;
  for (double n = 2.0; n < 1e5; n *= 1.0001)
    if (D(n) < 0.0) last = n;
  CHECK(*c.n_crit == doctest::Approx(last).epsilon(2e-4));
  CHECK(std::abs(D(*c.n_crit)) < 1e-8);

  CHECK(free_energy_crossover({1.0, 1.0, ""}, {1.0, 2.0, ""}).dominance == Dominance::w1_always);
  CHECK(free_energy_crossover({1.0, 2.0, ""}, {1.0, 1.0, ""}).dominance == Dominance::w2_always);
  CHECK(free_energy_crossover({1.0, 1.0, ""}, {1.0, 1.0, ""}).dominance == Dominance::tie);
  CHECK(free_energy_crossover({1.0, 2.0, ""}, {0.9, 1.0, ""}).dominance == Dominance::w2_always);
  CHECK(free_energy_crossover({0.9, 1.0, ""}, {1.0, 2.0, ""}).dominance == Dominance::w1_always);
  CHECK(free_energy_crossover(complex, simple).dominance == Dominance::w1_eventually);
  CHECK_FALSE(free_energy_crossover(complex, simple).n_crit);
}
