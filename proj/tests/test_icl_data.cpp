#include <doctest.h>

#include <cmath>

#include <Eigen/Dense>

#include "dgsc/errors.hpp"
#include "dgsc/icl_data.hpp"

using namespace dgsc;

namespace {

DataConfig cfg_of(std::size_t D, std::size_t K, double sigma2, std::size_t tasks = 0) {
  DataConfig c;
  c.dim = D;
  c.max_examples = K;
  c.sigma2 = sigma2;
  c.num_tasks = tasks;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("noiseless contexts identify the task by least squares") {
  const DataConfig c = cfg_of(4, 8, 0.0);
  RngStream rng(1, "test");
  for (const auto& ctx : sample_batch(c, 20, rng)) {
    Eigen::MatrixXd X(8, 4);
    Eigen::VectorXd y(8);
    for (int k = 0; k < 8; ++k) {
      for (int i = 0; i < 4; ++i) X(k, i) = ctx.xs[k][i];
      y(k) = ctx.ys[k];
    }
    const Eigen::VectorXd t = X.colPivHouseholderQr().solve(y);
    for (int i = 0; i < 4; ++i) CHECK(std::abs(t(i) - ctx.task[i]) < 1e-10);
    for (int k = 0; k < 8; ++k) {
      double dot = 0.0;
      for (int i = 0; i < 4; ++i) dot += ctx.task[i] * ctx.xs[k][i];
      CHECK(ctx.ys[k] == dot);
    }
  }
}

TEST_CASE("E[y^2] = D + sigma^2") {
  const DataConfig c = cfg_of(4, 8, 0.125);
  RngStream rng(2, "test");
  double sum = 0.0;
  std::size_t n = 0;
  for (int rep = 0; rep < 5; ++rep) {
    for (const auto& ctx : sample_batch(c, 25000, rng)) {
      for (double y : ctx.ys) sum += y * y;
      n += ctx.ys.size();
    }
  }
  CHECK(n == 1000000);
  CHECK(std::abs(sum / n - 4.125) / 4.125 < 0.01);
}

TEST_CASE("task pool") {
  const DataConfig one = cfg_of(3, 4, 0.1, 1);
  RngStream rng(3, "test");
  const auto batch = sample_batch(one, 50, rng);
  for (const auto& ctx : batch) CHECK(ctx.task == batch.front().task);

  const DataConfig m64 = cfg_of(4, 8, 0.1, 64);
  const auto pool = task_pool(m64);
  REQUIRE(pool.size() == 64);
  std::vector<double> mean(4, 0.0);
  for (const auto& t : pool)
    for (int i = 0; i < 4; ++i) mean[i] += t[i] / 64.0;
  const auto prior = task_prior(m64);
  for (int i = 0; i < 4; ++i) CHECK(std::abs(prior[i] - mean[i]) < 1e-12);
  CHECK(task_prior(cfg_of(4, 8, 0.1)) == std::vector<double>(4, 0.0));
  CHECK(task_pool(cfg_of(4, 8, 0.1)).empty());
}

TEST_CASE("OOD sampling") {
  const DataConfig c = cfg_of(4, 8, 0.125);
  SUBCASE("gain 1 reproduces sample_batch") {
    RngStream a(4, "x"), b(4, "x");
    const auto p = sample_batch(c, 30, a);
    const auto q = sample_ood_batch(c, 30, 1.0, OodMode::inputs, b);
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(p[i].xs == q[i].xs);
      CHECK(p[i].ys == q[i].ys);
      CHECK(p[i].task == q[i].task);
    }
  }
  SUBCASE("inputs scaled by g=100") {
    RngStream r(5, "x");
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& ctx : sample_ood_batch(c, 100000 / 8, 100.0, OodMode::inputs, r))
      for (const auto& x : ctx.xs) {
        s += x[0] * x[0];
        ++n;
      }
    CHECK(n == 100000);
    CHECK(std::abs(s / n - 100.0) / 100.0 < 0.03);
  }
  SUBCASE("tasks scaled by g=4") {
    RngStream r(6, "x");
    double s = 0.0;
    const auto batch = sample_ood_batch(c, 100000, 4.0, OodMode::tasks, r);
    for (const auto& ctx : batch)
      for (double t : ctx.task) s += t * t;
    CHECK(std::abs(s / batch.size() - 16.0) / 16.0 < 0.03);
  }
  RngStream r(7, "x");
  CHECK_THROWS_AS(sample_ood_batch(c, 1, 0.0, OodMode::inputs, r), ConfigError);
}

TEST_CASE("determinism and fixed datasets") {
  const DataConfig c = cfg_of(4, 8, 0.125);
  RngStream a(8, "x"), b(8, "x");
  const auto p = sample_batch(c, 10, a), q = sample_batch(c, 10, b);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i].ys == q[i].ys);

  const FixedDataset ds(c, 1000, 9, LossMode::likelihood);
  CHECK(ds.context(17).ys == ds.context(17).ys);
  CHECK(ds.context(17).ys != ds.context(18).ys);
  for (std::uint64_t i = 0; i < 200; ++i) {
    const int k = ds.target_token(i);
    CHECK(k >= 0);
    CHECK(k < 8);
  }
  RngStream r(10, "draw");
  const DataBatch batch = ds.draw(r, 64);
  CHECK(batch.size() == 64);
  CHECK(batch.target_token.size() == 64);
  const FixedDataset sub(c, 1000, 9);
  RngStream r2(10, "draw");
  CHECK(sub.draw(r2, 64).target_token.empty());
}

TEST_CASE("config validation") {
  DataConfig c = cfg_of(0, 8, 0.1);
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = cfg_of(4, 8, -1.0);
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
