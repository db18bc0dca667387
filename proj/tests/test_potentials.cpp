#include <doctest.h>

#include <cmath>

#include "dgsc/errors.hpp"
#include "dgsc/potentials.hpp"
#include "dgsc/rng.hpp"
#include "support.hpp"

using namespace dgsc;

TEST_CASE("builtin potentials: names and known coefficients") {
  const auto ps = builtin_potentials();
  REQUIRE(ps.size() == 7);
  const std::vector<std::pair<const char*, Rational>> want{
      {"l1", {1, 1}}, {"l2", {1, 2}}, {"l3", {1, 4}}, {"l4", {1, 4}},
      {"l5", {3, 2}}, {"l6", {1, 1}}, {"l7", {1, 1}}};
  for (std::size_t i = 0; i < ps.size(); ++i) {
    CAPTURE(ps[i].name());
    CHECK(ps[i].name() == want[i].first);
    CHECK(ps[i].known_llc() == want[i].second);
    CHECK(ps[i].known_multiplicity() == 1);
    CHECK(ps[i].known_llc().value() <= ps[i].dim() / 2.0);
  }
}

TEST_CASE("potentials vanish with zero gradient at the reference point") {
  for (const auto& p : builtin_potentials()) {
    CAPTURE(p.name());
    CHECK(p.eval(p.reference_point()) == 0.0);
    for (double g : p.grad(p.reference_point())) CHECK(g == 0.0);
  }
  const auto l4 = potential_by_name("l4");
  CHECK(l4.reference_point() == std::vector<double>{0.0, 0.0});
  CHECK(l4.eval(std::vector<double>{1.0, 0.5}) == 0.0);
}

TEST_CASE("adapter values at (0.3, 0.4) and batch independence") {
  const auto m = as_loss_model(potential_by_name("l1"), 10000);
  const std::vector<double> w{0.3, 0.4};
  const auto r = m->value_and_grad(w, {});
  CHECK(r.loss == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(r.grad[0] == doctest::Approx(0.6).epsilon(1e-14));
  CHECK(r.grad[1] == doctest::Approx(0.8).epsilon(1e-14));
  CHECK_FALSE(m->uses_batch());

  DataBatch a, b;
  a.contexts.push_back({{1.0}, {{2.0}}, {3.0}});
  b.contexts.push_back({{-1.0}, {{0.5}}, {7.0}});
  CHECK(m->loss(w, a) == m->loss(w, b));
}

TEST_CASE("l5 coefficient is independent of curvatures") {
  RngStream rng(11, "l5-triples");
  for (int i = 0; i < 5; ++i) {
    const double a = 0.1 + 5 * rng.uniform(), b = 0.1 + 5 * rng.uniform(), c = 0.1 + 5 * rng.uniform();
    CHECK(axis_quadratic3(a, b, c).known_llc() == Rational{3, 2});
  }
  CHECK_THROWS_AS(axis_quadratic3(1.0, 0.0, 1.0), ConfigError);
}

TEST_CASE("Hessians of l2 and l3 vanish at the origin") {
  for (const char* name : {"l2", "l3"}) {
    const auto p = potential_by_name(name);
    for (std::size_t i = 0; i < p.dim(); ++i) {
      std::vector<double> e(p.dim(), 0.0);
      e[i] = 1.0;
      for (double h : p.hvp(p.reference_point(), e)) CHECK(h == 0.0);
    }
  }
}

TEST_CASE("l5 Hessian is 2 diag(1, 2, 3)") {
  const auto p = potential_by_name("l5");
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> e(3, 0.0);
    e[i] = 1.0;
    const auto h = p.hvp(std::vector<double>{0.2, -0.1, 0.7}, e);
    for (std::size_t j = 0; j < 3; ++j) CHECK(h[j] == doctest::Approx(i == j ? 2.0 * (i + 1) : 0.0));
  }
}

TEST_CASE("quadratic families") {
  const auto q = potential_by_name("quad10");
  CHECK(q.dim() == 10);
  CHECK(q.known_llc() == Rational{5, 1});
  CHECK(q.eval(q.reference_point()) == 0.0);
  const auto f = quadratic_form(2, {2.0, 1.0, 1.0, 2.0});
  CHECK(f.eval(std::vector<double>{1.0, 1.0}) == doctest::Approx(3.0));
  CHECK(f.known_llc() == Rational{1, 1});
  CHECK_THROWS_AS(quadratic_form(2, {1.0, 2.0, 2.0, 1.0}), ConfigError);
  CHECK_THROWS_AS(potential_by_name("l9"), ConfigError);
  CHECK_THROWS_AS(potential_by_name("quadx"), ConfigError);
}
