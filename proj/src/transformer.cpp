#include "dgsc/transformer.hpp"

#include <cmath>

#include <tbb/parallel_for.h>

#include "dgsc/errors.hpp"
#include "dgsc/rng.hpp"
#include "dgsc/tape.hpp"

namespace dgsc {

using ad::Dual;
using ad::Mat;
using ad::Tape;
using ad::Var;

void TransformerConfig::validate() const {
  if (layers < 1 || heads < 1 || d_embed < 1 || d_mlp < 1 || dim < 1 || max_examples < 1) {
    throw ConfigError("transformer dimensions must be positive");
  }
  if (d_embed % heads != 0) throw ConfigError("d_embed must be divisible by heads");
  if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
  if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
  if (precision != "f64") throw ConfigError("unsupported precision '" + precision + "' (only f64)");
}

TokenMatrix tokenize(const RegressionContext& ctx) {
  const auto K = static_cast<Eigen::Index>(ctx.length());
  const auto D = static_cast<Eigen::Index>(ctx.dim());
  if (static_cast<Eigen::Index>(ctx.xs.size()) != K) throw ShapeError("context has mismatched xs/ys");
  TokenMatrix t = TokenMatrix::Zero(2 * K, D + 1);
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto& x = ctx.xs[static_cast<std::size_t>(k)];
    if (static_cast<Eigen::Index>(x.size()) != D) throw ShapeError("context input has wrong dimension");
    for (Eigen::Index j = 0; j < D; ++j) t(2 * k, j + 1) = x[static_cast<std::size_t>(j)];
    t(2 * k + 1, 0) = ctx.ys[static_cast<std::size_t>(k)];
  }
  return t;
}

RegressionContext read_tokens(const TokenMatrix& tokens) {
  if (tokens.rows() % 2 != 0 || tokens.cols() < 2) throw ShapeError("malformed token matrix");
  const Eigen::Index K = tokens.rows() / 2;
  const Eigen::Index D = tokens.cols() - 1;
  RegressionContext ctx;
  ctx.task.assign(static_cast<std::size_t>(D), 0.0);
  for (Eigen::Index k = 0; k < K; ++k) {
    std::vector<double> x(static_cast<std::size_t>(D));
    for (Eigen::Index j = 0; j < D; ++j) x[static_cast<std::size_t>(j)] = tokens(2 * k, j + 1);
    ctx.xs.push_back(std::move(x));
    ctx.ys.push_back(tokens(2 * k + 1, 0));
  }
  return ctx;
}

Layout transformer_layout(const TransformerConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_embed);
  const auto dm = static_cast<std::size_t>(cfg.d_mlp);
  const auto tok = static_cast<std::size_t>(cfg.token_dim());
  Layout l;
  l.add("wte.weight", {d, tok});
  l.add("wpe.weight", {static_cast<std::size_t>(cfg.seq_len()), d});
  for (int b = 0; b < cfg.layers; ++b) {
    const std::string p = "h." + std::to_string(b) + ".";
    l.add(p + "ln_1.weight", {d});
    l.add(p + "ln_1.bias", {d});
    l.add(p + "attn.c_attn.weight", {3 * d, d});
    l.add(p + "attn.c_proj.weight", {d, d});
    l.add(p + "ln_2.weight", {d});
    l.add(p + "ln_2.bias", {d});
    l.add(p + "mlp.c_fc.weight", {dm, d});
    l.add(p + "mlp.c_fc.bias", {dm});
    l.add(p + "mlp.c_proj.weight", {d, dm});
    l.add(p + "mlp.c_proj.bias", {d});
  }
  l.add("ln_f.weight", {d});
  l.add("ln_f.bias", {d});
  l.add("unembed.weight", {tok, d});
  l.add("unembed.bias", {tok});
  return l;
}

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_ln_weight(const std::string& name) {
  return ends_with(name, "ln_1.weight") || ends_with(name, "ln_2.weight") || name == "ln_f.weight";
}

}  // namespace

ParameterVector init_transformer(const TransformerConfig& cfg, std::uint64_t seed) {
  ParameterVector pv(transformer_layout(cfg));
  RngStream rng(seed, "transformer-init");
  for (const Segment& seg : pv.layout().segments()) {
    auto vals = pv.segment(seg.name);
    if (is_ln_weight(seg.name)) {
      std::fill(vals.begin(), vals.end(), 1.0);
    } else if (ends_with(seg.name, ".bias")) {
      std::fill(vals.begin(), vals.end(), 0.0);
    } else {
      for (double& v : vals) {
        double z = rng.normal();
        while (std::abs(z) > 2.0) z = rng.normal();
        v = cfg.init_std * z;
      }
    }
  }
  return pv;
}

namespace {

template <class T>
T make_scalar(double value, const double* tangent, std::size_t i) {
  if constexpr (std::is_same_v<T, Dual>) {
    return Dual(value, tangent ? tangent[i] : 0.0);
  } else {
    (void)tangent;
    (void)i;
    return value;
  }
}

/// Records the forward pass for one chunk of contexts. Returns the
/// (S·2K)×(D+1) output node; `leaves` receives one node per layout segment.
template <class T>
Var record_forward(Tape<T>& tape, const TransformerConfig& cfg, const Layout& layout,
                   std::span<const double> params, const double* tangent, bool trainable,
                   std::span<const RegressionContext> contexts, std::vector<Var>& leaves,
                   std::vector<std::vector<Mat<double>>>* captures) {
  leaves.clear();
  for (const Segment& seg : layout.segments()) {
    const auto rows = seg.shape.size() == 2 ? static_cast<Eigen::Index>(seg.shape[0]) : 1;
    const auto cols = static_cast<Eigen::Index>(seg.shape.back());
    Mat<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const std::size_t flat = seg.offset + static_cast<std::size_t>(i);
      m.data()[i] = make_scalar<T>(params[flat], tangent, flat);
    }
    leaves.push_back(trainable ? tape.param(std::move(m)) : tape.constant(std::move(m)));
  }
  std::size_t li = 0;
  auto next = [&] { return leaves[li++]; };

  const int L = cfg.seq_len();
  const auto S = static_cast<Eigen::Index>(contexts.size());
  Mat<T> tokens(S * L, cfg.token_dim());
  for (Eigen::Index s = 0; s < S; ++s) {
    const TokenMatrix t = tokenize(contexts[static_cast<std::size_t>(s)]);
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      tokens.data()[s * t.size() + i] = T(t.data()[i]);
    }
  }
  Var x = tape.constant(std::move(tokens));
  const Var wte = next();
  const Var wpe = next();
  Var h = tape.add_tiled(tape.matmul_nt(x, wte), wpe);

  if (captures) captures->assign(static_cast<std::size_t>(cfg.layers), {});
  for (int b = 0; b < cfg.layers; ++b) {
    const Var ln1w = next(), ln1b = next(), c_attn = next(), c_proj = next();
    const Var ln2w = next(), ln2b = next(), fc_w = next(), fc_b = next();
    const Var pr_w = next(), pr_b = next();

    Var a = tape.layer_norm(h, ln1w, ln1b, cfg.ln_eps);
    Var qkv = tape.matmul_nt(a, c_attn);
    Var att = tape.causal_attention(qkv, L, cfg.heads,
                                    captures ? &(*captures)[static_cast<std::size_t>(b)] : nullptr);
    h = tape.add(h, tape.matmul_nt(att, c_proj));
    Var m = tape.layer_norm(h, ln2w, ln2b, cfg.ln_eps);
    m = tape.gelu(tape.add_row(tape.matmul_nt(m, fc_w), fc_b));
    m = tape.add_row(tape.matmul_nt(m, pr_w), pr_b);
    h = tape.add(h, m);

    const Mat<T>& hv = tape.value(h);
    for (Eigen::Index i = 0; i < hv.size(); ++i) {
      if (!std::isfinite(ad::value_of(hv.data()[i]))) {
        throw NumericError("h." + std::to_string(b), "non-finite activation");
      }
    }
  }
  const Var lnfw = next(), lnfb = next(), uw = next(), ub = next();
  h = tape.layer_norm(h, lnfw, lnfb, cfg.ln_eps);
  Var out = tape.add_row(tape.matmul_nt(h, uw), ub);
  const Mat<T>& ov = tape.value(out);
  for (Eigen::Index i = 0; i < ov.size(); ++i) {
    if (!std::isfinite(ad::value_of(ov.data()[i]))) throw NumericError("unembed", "non-finite output");
  }
  return out;
}

/// Output rows scored by the loss and their targets, for one chunk.
void scored_rows(const TransformerConfig& cfg, const DataBatch& batch, std::size_t first,
                 std::size_t count, std::vector<int>& rows, std::vector<double>& targets) {
  const int L = cfg.seq_len();
  rows.clear();
  targets.clear();
  for (std::size_t s = 0; s < count; ++s) {
    const auto& ctx = batch.contexts[first + s];
    const int base = static_cast<int>(s) * L;
    if (batch.target_token.empty()) {
      for (int k = 0; k < cfg.max_examples; ++k) {
        rows.push_back(base + 2 * k);
        targets.push_back(ctx.ys[static_cast<std::size_t>(k)]);
      }
    } else {
      const int k = batch.target_token[first + s];
      rows.push_back(base + 2 * k);
      targets.push_back(ctx.ys[static_cast<std::size_t>(k)]);
    }
  }
}

std::size_t chunk_count(std::size_t n) {
  return (n + TransformerModel::kChunk - 1) / TransformerModel::kChunk;
}

struct ChunkResult {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Loss (and optionally the gradient, or the tangent part of the gradient) of
/// one chunk, scaled so that chunk results sum to the batch mean.
template <class T>
ChunkResult chunk_eval(const TransformerConfig& cfg, const Layout& layout,
                       std::span<const double> params, const double* tangent, bool want_grad,
                       const DataBatch& batch, std::size_t first, std::size_t count, double scale) {
  Tape<T> tape;
  std::vector<Var> leaves;
  const std::span<const RegressionContext> ctxs(batch.contexts.data() + first, count);
  Var out = record_forward<T>(tape, cfg, layout, params, tangent, want_grad, ctxs, leaves, nullptr);
  std::vector<int> rows;
  std::vector<double> targets;
  scored_rows(cfg, batch, first, count, rows, targets);
  Var pred = tape.gather(out, std::move(rows), 0);
  Var loss = tape.scaled_squared_error(pred, std::move(targets), scale);
  ChunkResult r;
  r.loss = ad::value_of(tape.value(loss)(0, 0));
  if (!want_grad) return r;
  tape.backward(loss);
  r.grad.assign(layout.size(), 0.0);
  std::size_t li = 0;
  for (const Segment& seg : layout.segments()) {
    const Mat<T>& g = tape.grad(leaves[li++]);
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      const std::size_t flat = seg.offset + static_cast<std::size_t>(i);
      if constexpr (std::is_same_v<T, Dual>) {
        r.grad[flat] = g.data()[i].d;
      } else {
        r.grad[flat] = g.data()[i];
      }
    }
  }
  return r;
}

template <class T>
GradResult batched_eval(const TransformerConfig& cfg, const Layout& layout,
                        std::span<const double> params, const double* tangent, bool want_grad,
                        const DataBatch& batch) {
  const std::size_t n = batch.size();
  const std::size_t scored = batch.target_token.empty()
                                 ? n * static_cast<std::size_t>(cfg.max_examples)
                                 : n;
  const double scale = 1.0 / static_cast<double>(scored);
  const std::size_t chunks = chunk_count(n);
  std::vector<ChunkResult> parts(chunks);
  tbb::parallel_for(std::size_t{0}, chunks, [&](std::size_t c) {
    const std::size_t first = c * TransformerModel::kChunk;
    const std::size_t count = std::min(TransformerModel::kChunk, n - first);
    parts[c] = chunk_eval<T>(cfg, layout, params, tangent, want_grad, batch, first, count, scale);
  });
  GradResult out;
  if (want_grad) out.grad.assign(layout.size(), 0.0);
  for (const ChunkResult& p : parts) {
    out.loss += p.loss;
    if (want_grad) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] += p.grad[i];
    }
  }
  return out;
}

}  // namespace

TransformerModel::TransformerModel(TransformerConfig cfg)
    : cfg_(std::move(cfg)), layout_(transformer_layout(cfg_)) {}

void TransformerModel::check_batch(const DataBatch& batch) const {
  LossModel::check_batch(batch);
  const auto K = static_cast<std::size_t>(cfg_.max_examples);
  const auto D = static_cast<std::size_t>(cfg_.dim);
  for (const auto& ctx : batch.contexts) {
    if (ctx.ys.size() != K || ctx.xs.size() != K) {
      throw ShapeError("context length " + std::to_string(ctx.ys.size()) + " != K = " +
                       std::to_string(K));
    }
    for (const auto& x : ctx.xs) {
      if (x.size() != D) throw ShapeError("input dimension " + std::to_string(x.size()) +
                                          " != D = " + std::to_string(D));
    }
  }
  if (!batch.target_token.empty()) {
    if (batch.target_token.size() != batch.size()) {
      throw ShapeError("target_token must have one entry per context");
    }
    for (int k : batch.target_token) {
      if (k < 0 || k >= cfg_.max_examples) throw ShapeError("target token out of range");
    }
  }
}

double TransformerModel::do_loss(std::span<const double> params, const DataBatch& batch) const {
  return batched_eval<double>(cfg_, layout_, params, nullptr, false, batch).loss;
}

GradResult TransformerModel::do_value_and_grad(std::span<const double> params,
                                               const DataBatch& batch) const {
  return batched_eval<double>(cfg_, layout_, params, nullptr, true, batch);
}

std::vector<double> TransformerModel::do_hvp(std::span<const double> params,
                                             const DataBatch& batch,
                                             std::span<const double> v) const {
  return batched_eval<Dual>(cfg_, layout_, params, v.data(), true, batch).grad;
}

Eigen::MatrixXd TransformerModel::forward(std::span<const double> params,
                                          std::span<const RegressionContext> contexts,
                                          AttentionRecord* record) const {
  if (params.size() != layout_.size()) {
    throw ShapeError("expected " + std::to_string(layout_.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  DataBatch probe;
  probe.contexts.assign(contexts.begin(), contexts.end());
  check_batch(probe);

  const std::size_t n = contexts.size();
  const int K = cfg_.max_examples;
  const int L = cfg_.seq_len();
  Eigen::MatrixXd pred(static_cast<Eigen::Index>(n), K);
  if (record) {
    record->layers = cfg_.layers;
    record->heads = cfg_.heads;
    record->seq_len = L;
    record->samples = static_cast<int>(n);
    record->patterns.assign(static_cast<std::size_t>(cfg_.layers),
                            std::vector<TokenMatrix>(n * static_cast<std::size_t>(cfg_.heads)));
  }
  const std::size_t chunks = chunk_count(n);
  tbb::parallel_for(std::size_t{0}, chunks, [&](std::size_t c) {
    const std::size_t first = c * kChunk;
    const std::size_t count = std::min(kChunk, n - first);
    Tape<double> tape;
    std::vector<Var> leaves;
    std::vector<std::vector<Mat<double>>> caps;
    Var out = record_forward<double>(tape, cfg_, layout_, params, nullptr, false,
                                     contexts.subspan(first, count), leaves,
                                     record ? &caps : nullptr);
    const auto& ov = tape.value(out);
    for (std::size_t s = 0; s < count; ++s) {
      for (int k = 0; k < K; ++k) {
        pred(static_cast<Eigen::Index>(first + s), k) =
            ov(static_cast<Eigen::Index>(s) * L + 2 * k, 0);
      }
    }
    if (record) {
      for (int b = 0; b < cfg_.layers; ++b) {
        auto& dst = record->patterns[static_cast<std::size_t>(b)];
        auto& src = caps[static_cast<std::size_t>(b)];
        for (std::size_t i = 0; i < src.size(); ++i) {
          dst[first * static_cast<std::size_t>(cfg_.heads) + i] = std::move(src[i]);
        }
      }
    }
  });
  return pred;
}

std::vector<double> TransformerModel::per_token_loss(
    std::span<const double> params, std::span<const RegressionContext> contexts) const {
  const Eigen::MatrixXd pred = forward(params, contexts);
  std::vector<double> out(static_cast<std::size_t>(cfg_.max_examples), 0.0);
  for (std::size_t s = 0; s < contexts.size(); ++s) {
    for (int k = 0; k < cfg_.max_examples; ++k) {
      const double e = pred(static_cast<Eigen::Index>(s), k) -
                       contexts[s].ys[static_cast<std::size_t>(k)];
      out[static_cast<std::size_t>(k)] += e * e;
    }
  }
  for (double& v : out) v /= static_cast<double>(contexts.size());
  return out;
}

double batch_loss(const Eigen::MatrixXd& predictions,
                  std::span<const RegressionContext> contexts) {
  if (static_cast<std::size_t>(predictions.rows()) != contexts.size()) {
    throw ShapeError("prediction rows do not match context count");
  }
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < contexts.size(); ++s) {
    for (Eigen::Index k = 0; k < predictions.cols(); ++k) {
      const double e = predictions(static_cast<Eigen::Index>(s), k) -
                       contexts[s].ys[static_cast<std::size_t>(k)];
      acc += e * e;
      ++count;
    }
  }
  return count ? acc / static_cast<double>(count) : 0.0;
}

}  // namespace dgsc
