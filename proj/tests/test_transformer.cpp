#include <doctest.h>

#include <cmath>

#include "dgsc/errors.hpp"
#include "dgsc/icl_data.hpp"
#include "dgsc/transformer.hpp"

using namespace dgsc;

namespace {

TransformerConfig small_config() {
  TransformerConfig c;
  c.layers = 2;
  c.heads = 2;
  c.d_embed = 8;
  c.d_mlp = 8;
  c.dim = 2;
  c.max_examples = 4;
  return c;
}

std::vector<RegressionContext> contexts(const TransformerConfig& m, std::size_t n, double sigma2,
                                        std::uint64_t seed) {
  DataConfig d;
  d.dim = static_cast<std::size_t>(m.dim);
  d.max_examples = static_cast<std::size_t>(m.max_examples);
  d.sigma2 = sigma2;
  RngStream rng(seed, "transformer-test");
  return sample_batch(d, n, rng);
}

}  // namespace

TEST_CASE("tokenization layout") {
  RegressionContext ctx{{1.0, 1.0}, {{3.0, 5.0}}, {7.0}};
  const TokenMatrix t = tokenize(ctx);
  REQUIRE(t.rows() == 2);
  REQUIRE(t.cols() == 3);
  CHECK(t(0, 0) == 0.0);
  CHECK(t(0, 1) == 3.0);
  CHECK(t(0, 2) == 5.0);
  CHECK(t(1, 0) == 7.0);
  CHECK(t(1, 1) == 0.0);
  CHECK(t(1, 2) == 0.0);

  RegressionContext zero{{0.0, 0.0}, {{0.0, 0.0}, {0.0, 0.0}}, {0.0, 0.0}};
  CHECK(tokenize(zero).isZero(0.0));

  const auto cs = contexts(small_config(), 3, 0.1, 1);
  for (const auto& c : cs) {
    const RegressionContext back = read_tokens(tokenize(c));
    CHECK(back.xs == c.xs);
    CHECK(back.ys == c.ys);
  }
  RegressionContext bad{{1.0, 1.0}, {{3.0}}, {7.0}};
  CHECK_THROWS_AS(tokenize(bad), ShapeError);
}

TEST_CASE("default model has 51,717 parameters in segment order") {
  const TransformerConfig c;
  const Layout l = transformer_layout(c);
  CHECK(l.size() == 51717);
  l.validate();
  const auto segs = l.segments();
  CHECK(segs.front().name == "wte.weight");
  CHECK(segs.front().shape == std::vector<std::size_t>{64, 5});
  CHECK(segs[1].name == "wpe.weight");
  CHECK(segs[1].shape == std::vector<std::size_t>{16, 64});
  CHECK(segs[2].name == "h.0.ln_1.weight");
  CHECK(l.at("h.1.attn.c_attn.weight").shape == std::vector<std::size_t>{192, 64});
  CHECK(segs.back().name == "unembed.bias");
  CHECK(segs.back().shape == std::vector<std::size_t>{5});
}

TEST_CASE("initialization") {
  const TransformerConfig c;
  const ParameterVector p = init_transformer(c, 3);
  for (const auto& s : p.layout().segments()) {
    const auto v = p.segment(s.name);
    const bool ln = s.name.find("ln_") != std::string::npos;
    const bool bias = s.name.size() > 5 && s.name.substr(s.name.size() - 5) == ".bias";
    for (double x : v) {
      if (bias) {
        CHECK(x == 0.0);
      } else if (ln) {
        CHECK(x == 1.0);
      } else {
        CHECK(std::abs(x) <= 2.0 * c.init_std);
      }
    }
  }
  const ParameterVector q = init_transformer(c, 3);
  CHECK(std::equal(p.values().begin(), p.values().end(), q.values().begin()));
  const ParameterVector r = init_transformer(c, 4);
  CHECK_FALSE(std::equal(p.values().begin(), p.values().end(), r.values().begin()));
}

TEST_CASE("forward shape and causality") {
  const TransformerConfig c = small_config();
  const TransformerModel model(c);
  const ParameterVector p = init_transformer(c, 7);
  auto cs = contexts(c, 5, 0.1, 2);
  const Eigen::MatrixXd base = model.forward(p.values(), cs);
  CHECK(base.rows() == 5);
  CHECK(base.cols() == 4);

  for (int j = 0; j < 4; ++j) {
    auto moved = cs;
    for (auto& ctx : moved) ctx.xs[static_cast<std::size_t>(j)][0] += 1.5;
    const Eigen::MatrixXd px = model.forward(p.values(), moved);
    for (Eigen::Index s = 0; s < 5; ++s) {
      for (int k = 0; k < j; ++k) CHECK(px(s, k) == base(s, k));
      CHECK(px(s, j) != base(s, j));
    }
    moved = cs;
    for (auto& ctx : moved) ctx.ys[static_cast<std::size_t>(j)] += 1.5;
    const Eigen::MatrixXd py = model.forward(p.values(), moved);
    for (Eigen::Index s = 0; s < 5; ++s) {
      for (int k = 0; k <= j; ++k) CHECK(py(s, k) == base(s, k));
    }
  }
}

TEST_CASE("zero unembedding weights read out the bias") {
  const TransformerConfig c = small_config();
  const TransformerModel model(c);
  ParameterVector p = init_transformer(c, 8);
  for (double& w : p.segment("unembed.weight")) w = 0.0;
  p.segment("unembed.bias")[0] = 0.375;
  const auto cs = contexts(c, 4, 0.1, 3);
  const Eigen::MatrixXd y = model.forward(p.values(), cs);
  for (Eigen::Index i = 0; i < y.size(); ++i) CHECK(y.data()[i] == 0.375);

  p.segment("unembed.bias")[0] = 0.0;
  const auto clean = contexts(c, 6, 0.0, 4);
  double sum = 0.0;
  for (const auto& ctx : clean)
    for (double v : ctx.ys) sum += v * v;
  CHECK(model.loss(p.values(), make_batch(clean)) == doctest::Approx(sum / 24.0).epsilon(1e-14));
}

TEST_CASE("batch_loss arithmetic") {
  RegressionContext one{{1.0}, {{1.0}}, {1.0}};
  std::vector<RegressionContext> v{one};
  Eigen::MatrixXd pred(1, 1);
  pred(0, 0) = 3.0;
  CHECK(batch_loss(pred, v) == 4.0);
  pred(0, 0) = 1.0;
  CHECK(batch_loss(pred, v) == 0.0);
}

TEST_CASE("attention records are causal and row-stochastic") {
  const TransformerConfig c = small_config();
  const TransformerModel model(c);
  const ParameterVector p = init_transformer(c, 9);
  const auto cs = contexts(c, 20, 0.1, 5);
  AttentionRecord rec;
  model.forward(p.values(), cs, &rec);
  CHECK(rec.layers == 2);
  CHECK(rec.heads == 2);
  CHECK(rec.samples == 20);
  CHECK(rec.seq_len == 8);
  for (int b = 0; b < 2; ++b)
    for (int h = 0; h < 2; ++h)
      for (int s = 0; s < 20; ++s) {
        const TokenMatrix& a = rec.pattern(b, h, s);
        for (int i = 0; i < 8; ++i) {
          CHECK(std::abs(a.row(i).sum() - 1.0) < 1e-6);
          for (int j = i + 1; j < 8; ++j) CHECK(a(i, j) == 0.0);
        }
      }
}

TEST_CASE("per-token losses and target tokens") {
  const TransformerConfig c = small_config();
  const TransformerModel model(c);
  const ParameterVector p = init_transformer(c, 10);
  const auto cs = contexts(c, 33, 0.1, 6);
  const auto per = model.per_token_loss(p.values(), cs);
  REQUIRE(per.size() == 4);
  double mean = 0.0;
  for (double x : per) mean += x / 4.0;
  CHECK(model.loss(p.values(), make_batch(cs)) == doctest::Approx(mean).epsilon(1e-13));

  DataBatch only2 = make_batch(cs);
  only2.target_token.assign(cs.size(), 2);
  CHECK(model.loss(p.values(), only2) == doctest::Approx(per[2]).epsilon(1e-13));
  only2.target_token[0] = 4;
  CHECK_THROWS_AS(model.loss(p.values(), only2), ShapeError);

  auto wrong = cs;
  wrong[0].ys.pop_back();
  CHECK_THROWS_AS(model.loss(p.values(), make_batch(wrong)), ShapeError);
}

TEST_CASE("config validation") {
  TransformerConfig c;
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TransformerConfig{};
  c.precision = "f32";
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TransformerConfig{};
  CHECK(c.d_head() == 16);
  CHECK(c.token_dim() == 5);
  CHECK(c.seq_len() == 16);
}
