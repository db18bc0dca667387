#include <doctest.h>

#include <cmath>
#include <memory>

#include "dgsc/errors.hpp"
#include "dgsc/icl_data.hpp"
#include "dgsc/potentials.hpp"
#include "dgsc/tiny_mlp.hpp"
#include "dgsc/transformer.hpp"
#include "support.hpp"

using namespace dgsc;
using dgsc::testing::fd_gradient;
using dgsc::testing::fd_hvp;
using dgsc::testing::max_rel_error;

namespace {

// Coordinates with |grad| below this floor are compared absolutely against it,
// where the finite-difference truncation error dominates the relative error.
constexpr double kGradFloor = 1e-4;
constexpr double kGradTol = 1e-4;

std::vector<double> random_point(std::size_t d, RngStream& rng, double scale) {
  std::vector<double> w(d);
  for (double& x : w) x = scale * rng.normal();
  return w;
}

TransformerConfig small_transformer() {
  TransformerConfig c;
  c.layers = 2;
  c.heads = 2;
  c.d_embed = 8;
  c.d_mlp = 8;
  c.dim = 2;
  c.max_examples = 3;
  return c;
}

DataBatch small_batch(std::size_t dim, std::size_t k, std::size_t n, std::uint64_t seed) {
  DataConfig dc;
  dc.dim = dim;
  dc.max_examples = k;
  RngStream rng(seed, "test-batch");
  return make_batch(sample_batch(dc, n, rng));
}

}  // namespace

TEST_CASE("dual arithmetic carries first derivatives") {
  using ad::Dual;
  const Dual x(0.7, 1.0);
  const Dual y = ad::exp(x) * ad::tanh(x) / ad::sqrt(x) + ad::erf(x) - ad::log(x) * ad::pow(x, 3);
  const auto f = [](double t) {
    return std::exp(t) * std::tanh(t) / std::sqrt(t) + std::erf(t) - std::log(t) * t * t * t;
  };
  const double h = 1e-6;
  CHECK(y.v == doctest::Approx(f(0.7)).epsilon(1e-14));
  CHECK(y.d == doctest::Approx((f(0.7 + h) - f(0.7 - h)) / (2 * h)).epsilon(1e-8));
}

TEST_CASE("quadratic potential value and gradient") {
  auto m = as_loss_model(potential_by_name("l1"), 1);
  const std::vector<double> w{1.0, 0.0};
  const auto r = value_and_grad(*m, w, DataBatch{});
  CHECK(r.loss == 1.0);
  CHECK(r.grad == std::vector<double>{2.0, 0.0});
  auto q = as_loss_model(potential_by_name("l2"), 1);
  const auto z = value_and_grad(*q, std::vector<double>{0.0, 0.0}, DataBatch{});
  CHECK(z.loss == 0.0);
  CHECK(z.grad == std::vector<double>{0.0, 0.0});
}

TEST_CASE("every registered model passes the finite-difference gradient check") {
  RngStream rng(2024, "fd-points");
  SUBCASE("analytic potentials") {
    for (const auto& p : builtin_potentials()) {
      auto m = as_loss_model(p, 100);
      for (int trial = 0; trial < 20; ++trial) {
        const auto w = random_point(p.dim(), rng, 0.8);
        const auto g = m->value_and_grad(w, DataBatch{}).grad;
        const auto fd = fd_gradient(*m, DataBatch{}, w);
        INFO(p.name());
        CHECK(max_rel_error(g, fd, kGradFloor) <= kGradTol);
      }
    }
  }
  SUBCASE("tiny mlp") {
    TinyMlp m;
    for (int trial = 0; trial < 20; ++trial) {
      const auto batch = small_batch(2, 5, 4, 100 + trial);
      const auto w = random_point(12, rng, 0.7);
      CHECK(max_rel_error(m.value_and_grad(w, batch).grad, fd_gradient(m, batch, w), kGradFloor) <=
            kGradTol);
    }
  }
  SUBCASE("small transformer, all coordinates") {
    TransformerModel m(small_transformer());
    for (int trial = 0; trial < 20; ++trial) {
      const auto batch = small_batch(2, 3, 3, 200 + trial);
      auto pv = init_transformer(m.config(), 300 + trial);
      std::vector<double> w(pv.values().begin(), pv.values().end());
      for (double& x : w) x += 0.3 * rng.normal();
      const auto g = m.value_and_grad(w, batch).grad;
      CHECK(max_rel_error(g, fd_gradient(m, batch, w), kGradFloor) <= kGradTol);
    }
  }
}

TEST_CASE("full-size transformer gradient on sampled coordinates") {
  TransformerModel m(TransformerConfig{});
  const auto batch = small_batch(4, 8, 20, 5);
  auto pv = init_transformer(m.config(), 9);
  std::vector<double> w(pv.values().begin(), pv.values().end());
  RngStream rng(3, "coords");
  for (double& x : w) x += 0.05 * rng.normal();
  const auto g = m.value_and_grad(w, batch).grad;
  for (int i = 0; i < 40; ++i) {
    const auto idx = static_cast<std::size_t>(rng.below(w.size()));
    auto f = [&](double delta) {
      auto p = w;
      p[idx] += delta;
      return m.loss(p, batch);
    };
    const double h = 1e-4;
    const double fd = (f(h) - f(-h)) / (2 * h);
    INFO(m.layout().segment_of(idx).name);
    CHECK(std::abs(g[idx] - fd) <= kGradTol * std::max({std::abs(g[idx]), std::abs(fd), kGradFloor}));
  }
}

TEST_CASE("hvp: exact forward-over-reverse agrees with gradient differences") {
  RngStream rng(77, "hvp");
  SUBCASE("diagonal quadratic") {
    auto m = as_loss_model(axis_quadratic3(1.5, 2.0, 0.25), 1);
    const std::vector<double> w{0.3, -0.2, 0.9};
    const auto hv = m->hvp(w, DataBatch{}, std::vector<double>{1, 0, 0});
    CHECK(hv[0] == doctest::Approx(3.0));
    CHECK(hv[1] == 0.0);
    CHECK(hv[2] == 0.0);
  }
  SUBCASE("degenerate quartic at the origin") {
    auto m = as_loss_model(potential_by_name("l2"), 1);
    const auto hv = m->hvp(std::vector<double>{0, 0}, DataBatch{}, std::vector<double>{0.4, -1.3});
    CHECK(hv == std::vector<double>{0.0, 0.0});
  }
  SUBCASE("models") {
    TinyMlp mlp;
    TransformerModel tf(small_transformer());
    const auto b2 = small_batch(2, 3, 4, 1);
    for (int trial = 0; trial < 5; ++trial) {
      const auto w = random_point(12, rng, 0.7);
      const auto v = random_point(12, rng, 1.0);
      CHECK(max_rel_error(mlp.hvp(w, b2, v), fd_hvp(mlp, b2, w, v), 1e-5) < 1e-5);
      auto pv = init_transformer(tf.config(), trial);
      std::vector<double> wt(pv.values().begin(), pv.values().end());
      for (double& x : wt) x += 0.3 * rng.normal();
      const auto vt = random_point(wt.size(), rng, 1.0);
      CHECK(max_rel_error(tf.hvp(wt, b2, vt), fd_hvp(tf, b2, wt, vt), 1e-5) < 1e-4);
    }
  }
}

TEST_CASE("hvp on a random 10-parameter quadratic form matches the dense Hessian") {
  RngStream rng(5, "qform");
  const std::size_t d = 10;
  std::vector<double> b(d * d), a(d * d, 0.0);
  for (double& x : b) x = rng.normal();
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t k = 0; k < d; ++k) a[i * d + j] += b[k * d + i] * b[k * d + j];
      if (i == j) a[i * d + j] += 1.0;
    }
  auto p = quadratic_form(d, a);
  auto m = as_loss_model(p, 1);
  const auto w = random_point(d, rng, 1.0);
  const auto H = dgsc::testing::fd_dense_hessian([&](std::span<const double> x) { return p.eval(x); }, w);
  for (int trial = 0; trial < 10; ++trial) {
    const auto v = random_point(d, rng, 1.0);
    std::vector<double> dense(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) dense[i] += H[i * d + j] * v[j];
    CHECK(max_rel_error(m->hvp(w, DataBatch{}, v), dense, 1e-6) <= 1e-6);
  }
}

TEST_CASE("hvp is linear in the direction") {
  RngStream rng(8, "lin");
  for (const auto& p : builtin_potentials()) {
    auto m = as_loss_model(p, 1);
    const auto w = random_point(p.dim(), rng, 0.8);
    const auto u = random_point(p.dim(), rng, 1.0), v = random_point(p.dim(), rng, 1.0);
    const double alpha = 0.7, beta = -1.9;
    std::vector<double> mix(p.dim());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * u[i] + beta * v[i];
    const auto hu = m->hvp(w, DataBatch{}, u), hv = m->hvp(w, DataBatch{}, v);
    const auto hm = m->hvp(w, DataBatch{}, mix);
    for (std::size_t i = 0; i < mix.size(); ++i) CHECK(std::abs(hm[i] - alpha * hu[i] - beta * hv[i]) <= 1e-8);
  }
}

TEST_CASE("evaluation is deterministic") {
  TransformerModel m(small_transformer());
  const auto batch = small_batch(2, 3, 40, 3);
  auto pv = init_transformer(m.config(), 1);
  const auto a = m.value_and_grad(pv.values(), batch);
  const auto b = m.value_and_grad(pv.values(), batch);
  CHECK(a.loss == b.loss);
  CHECK(a.grad == b.grad);
}

TEST_CASE("shape and numeric errors") {
  TransformerModel m(small_transformer());
  auto pv = init_transformer(m.config(), 1);
  const auto batch = small_batch(2, 3, 2, 3);
  CHECK_THROWS_AS(m.value_and_grad(std::vector<double>(5, 0.0), batch), ShapeError);
  CHECK_THROWS_AS(m.value_and_grad(pv.values(), DataBatch{}), ShapeError);
  CHECK_THROWS_AS(m.value_and_grad(pv.values(), small_batch(3, 3, 2, 3)), ShapeError);
  std::vector<double> w(pv.values().begin(), pv.values().end());
  w[m.layout().at("h.1.mlp.c_fc.bias").offset] = NAN;
  try {
    m.value_and_grad(w, batch);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.where() == "h.1.mlp.c_fc.bias");
  }
  std::vector<double> big(pv.values().begin(), pv.values().end());
  for (const char* seg : {"h.0.ln_1.weight", "h.0.attn.c_attn.weight"}) {
    const auto& s = m.layout().at(seg);
    for (std::size_t i = 0; i < s.size(); ++i) big[s.offset + i] *= 1e200;
  }
  try {
    m.loss(big, batch);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.where() == "h.0");
  }
}
