#include "dgsc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "dgsc/errors.hpp"
#include "dgsc/io.hpp"
#include "dgsc/rng.hpp"

namespace dgsc {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool is_x(int position) { return position % 2 == 0; }

Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> segment_matrix(
    const ParameterVector& params, const std::string& name) {
  const Segment& s = params.layout().at(name);
  const auto rows = static_cast<Eigen::Index>(s.shape.at(0));
  const auto cols = static_cast<Eigen::Index>(s.shape.size() > 1 ? s.shape[1] : 1);
  return {params.values().data() + s.offset, rows, cols};
}

double fraction_below(std::span<const double> v, double threshold) {
  std::size_t n = 0;
  for (double x : v) n += std::abs(x) < threshold ? 1 : 0;
  return v.empty() ? 0.0 : static_cast<double>(n) / static_cast<double>(v.size());
}

std::vector<double> singular_values(const Eigen::MatrixXd& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const Eigen::VectorXd s = svd.singularValues();
  std::vector<double> out(s.data(), s.data() + s.size());
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

}  // namespace

double icl_score(std::span<const double> per_token_losses, int k1, int k2) {
  const int K = static_cast<int>(per_token_losses.size());
  if (k1 < 1 || k2 < k1 || k2 > K) throw ConfigError("icl_score needs 1 <= k1 <= k2 <= K");
  return per_token_losses[static_cast<std::size_t>(k2 - 1)] -
         per_token_losses[static_cast<std::size_t>(k1 - 1)];
}

double mean_square_prediction(const TransformerModel& model, std::span<const double> params,
                              std::span<const RegressionContext> contexts) {
  const Eigen::MatrixXd p = model.forward(params, contexts);
  return p.size() == 0 ? 0.0 : p.squaredNorm() / static_cast<double>(p.size());
}

double task_prior_score(const TransformerModel& model, std::span<const double> params,
                        std::span<const RegressionContext> contexts, std::span<const double> prior) {
  const Eigen::MatrixXd p = model.forward(params, contexts);
  double sum = 0.0;
  for (Eigen::Index s = 0; s < p.rows(); ++s) {
    const auto& ctx = contexts[static_cast<std::size_t>(s)];
    if (prior.size() != ctx.dim()) throw ShapeError("task prior dimension mismatch");
    for (Eigen::Index k = 0; k < p.cols(); ++k) {
      const auto& x = ctx.xs[static_cast<std::size_t>(k)];
      double t = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) t += prior[i] * x[i];
      sum += (p(s, k) - t) * (p(s, k) - t);
    }
  }
  return p.size() == 0 ? 0.0 : sum / static_cast<double>(p.size());
}

std::vector<OodPoint> ood_sweep(const TransformerModel& model, std::span<const double> params,
                                const DataConfig& data, std::span<const double> gains, OodMode mode,
                                std::size_t size, std::uint64_t seed) {
  std::vector<OodPoint> out;
  for (double g : gains) {
    RngStream rng(seed, "eval");
    const auto ctxs = sample_ood_batch(data, size, g, mode, rng);
    const Eigen::MatrixXd p = model.forward(params, ctxs);
    OodPoint pt;
    pt.gain = g;
    pt.normalized_loss = batch_loss(p, ctxs) / (g * g);
    pt.mean_abs_prediction = p.cwiseAbs().mean();
    out.push_back(pt);
  }
  return out;
}

double normalized_entropy(std::span<const double> row) {
  if (row.size() < 2) throw ConfigError("normalized entropy needs at least 2 entries");
  double h = 0.0;
  for (double a : row)
    if (a > 0.0) h -= a * std::log2(a);
  return h / std::log2(static_cast<double>(row.size()));
}

EntropyReport attention_entropy(const AttentionRecord& record) {
  EntropyReport r;
  const int L = record.seq_len;
  r.positions.assign(static_cast<std::size_t>(record.layers),
                     std::vector<std::vector<double>>(static_cast<std::size_t>(record.heads),
                                                      std::vector<double>(static_cast<std::size_t>(L), kNaN)));
  r.head_mean.assign(static_cast<std::size_t>(record.layers),
                     std::vector<double>(static_cast<std::size_t>(record.heads), kNaN));
  if (record.samples < 1) return r;
  for (int b = 0; b < record.layers; ++b) {
    for (int h = 0; h < record.heads; ++h) {
      auto& pos = r.positions[static_cast<std::size_t>(b)][static_cast<std::size_t>(h)];
      double total = 0.0;
      int count = 0;
      for (int p = 1; p + 1 < L; ++p) {
        double acc = 0.0;
        for (int s = 0; s < record.samples; ++s) {
          const TokenMatrix& a = record.pattern(b, h, s);
          acc += normalized_entropy(std::span<const double>(&a(p, 0), static_cast<std::size_t>(p + 1)));
        }
        pos[static_cast<std::size_t>(p)] = acc / record.samples;
        total += pos[static_cast<std::size_t>(p)];
        ++count;
      }
      if (count > 0) r.head_mean[static_cast<std::size_t>(b)][static_cast<std::size_t>(h)] = total / count;
    }
  }
  return r;
}

std::string to_string(TokenKind k) { return k == TokenKind::x ? "x" : "y"; }

std::string to_string(HeadClass c) {
  switch (c) {
    case HeadClass::self: return "self";
    case HeadClass::previous_token: return "previous_token";
    case HeadClass::previous_x: return "previous_x";
    case HeadClass::previous_y: return "previous_y";
    case HeadClass::unclassified: return "unclassified";
  }
  return "unclassified";
}

double row_variability(const AttentionRecord& record, int layer, int head, int position) {
  const int n = record.samples;
  if (n < 2) throw ConfigError("attention variability needs at least 2 samples");
  const int width = position + 1;
  std::vector<double> mean(static_cast<std::size_t>(width), 0.0);
  for (int s = 0; s < n; ++s) {
    const TokenMatrix& a = record.pattern(layer, head, s);
    for (int j = 0; j < width; ++j) mean[static_cast<std::size_t>(j)] += a(position, j);
  }
  double mass = 0.0;
  for (double& m : mean) {
    m /= n;
    mass += m;
  }
  double dev = 0.0;
  for (int s = 0; s < n; ++s) {
    const TokenMatrix& a = record.pattern(layer, head, s);
    for (int j = 0; j < width; ++j) dev += std::abs(a(position, j) - mean[static_cast<std::size_t>(j)]);
  }
  return mass > 0.0 ? dev / (2.0 * n * mass) : 0.0;
}

double attention_variability(const AttentionRecord& record, int layer, int head, TokenKind kind) {
  double total = 0.0;
  int count = 0;
  for (int p = 1; p + 1 < record.seq_len; ++p) {
    if (is_x(p) != (kind == TokenKind::x)) continue;
    total += row_variability(record, layer, head, p);
    ++count;
  }
  return count > 0 ? total / count : kNaN;
}

std::vector<HeadScores> head_scores(const AttentionRecord& record, double score_threshold,
                                    double variability_threshold) {
  std::vector<HeadScores> out;
  const int L = record.seq_len;
  for (int b = 0; b < record.layers; ++b) {
    for (int h = 0; h < record.heads; ++h) {
      for (TokenKind kind : {TokenKind::x, TokenKind::y}) {
        HeadScores sc;
        sc.layer = b;
        sc.head = h;
        sc.component = kind;
        int count = 0;
        for (int p = 2; p + 1 < L; ++p) {
          if (is_x(p) != (kind == TokenKind::x)) continue;
          const int prev_x = is_x(p) ? p - 2 : p - 1;
          const int prev_y = is_x(p) ? p - 1 : p - 2;
          for (int s = 0; s < record.samples; ++s) {
            const TokenMatrix& a = record.pattern(b, h, s);
            sc.self += a(p, p);
            sc.previous_token += a(p, p - 1);
            sc.previous_x += a(p, prev_x);
            sc.previous_y += a(p, prev_y);
            for (int j = 0; j <= p; ++j) (is_x(j) ? sc.x_total : sc.y_total) += a(p, j);
            ++count;
          }
        }
        if (count > 0) {
          for (double* v : {&sc.self, &sc.previous_token, &sc.previous_x, &sc.previous_y,
                            &sc.x_total, &sc.y_total})
            *v /= count;
        }
        sc.variability = record.samples >= 2 ? attention_variability(record, b, h, kind) : kNaN;
        sc.label = {b, h, kind, HeadClass::unclassified};
        if (sc.variability <= variability_threshold) {
          if (sc.self >= score_threshold) sc.label.head_class = HeadClass::self;
          else if (sc.previous_token >= score_threshold) sc.label.head_class = HeadClass::previous_token;
          else if (sc.previous_x >= score_threshold) sc.label.head_class = HeadClass::previous_x;
          else if (sc.previous_y >= score_threshold) sc.label.head_class = HeadClass::previous_y;
        }
        out.push_back(sc);
      }
    }
  }
  return out;
}

HeadCircuit head_circuit(const TransformerConfig& cfg, const ParameterVector& params, int layer,
                         int head) {
  const std::string p = "h." + std::to_string(layer) + ".";
  const auto c_attn = segment_matrix(params, p + "attn.c_attn.weight");
  const auto c_proj = segment_matrix(params, p + "attn.c_proj.weight");
  const int d = cfg.d_embed, dh = cfg.d_head();
  const Eigen::MatrixXd wq = c_attn.block(head * dh, 0, dh, d);
  const Eigen::MatrixXd wk = c_attn.block(d + head * dh, 0, dh, d);
  const Eigen::MatrixXd wv = c_attn.block(2 * d + head * dh, 0, dh, d);
  const Eigen::MatrixXd wo = c_proj.block(0, head * dh, d, dh);
  return {wq.transpose() * wk, wo * wv};
}

double composition_score(const Eigen::MatrixXd& m, const Eigen::MatrixXd& w_ov) {
  const double denom = m.norm() * w_ov.norm();
  if (denom == 0.0) return 0.0;
  return (m * w_ov).norm() / denom;
}

Composition composition_scores(const HeadCircuit& h1, const HeadCircuit& h2) {
  return {composition_score(h2.qk.transpose(), h1.ov), composition_score(h2.qk, h1.ov),
          composition_score(h2.ov, h1.ov)};
}

CollapseReport collapse_report(const TransformerConfig& cfg, const ParameterVector& params,
                               double threshold) {
  CollapseReport r;
  std::vector<std::string> lns;
  for (int b = 0; b < cfg.layers; ++b) {
    lns.push_back("h." + std::to_string(b) + ".ln_1");
    lns.push_back("h." + std::to_string(b) + ".ln_2");
  }
  lns.push_back("ln_f");
  for (const auto& n : lns) {
    r.layer_norms.push_back({n, fraction_below(params.segment(n + ".weight"), threshold),
                             fraction_below(params.segment(n + ".bias"), threshold)});
  }
  const Eigen::MatrixXd wte = segment_matrix(params, "wte.weight");  // d × (D+1)
  const Eigen::MatrixXd wpe = segment_matrix(params, "wpe.weight");  // 2K × d
  const Eigen::MatrixXd wu = segment_matrix(params, "unembed.weight");  // (D+1) × d
  r.embedding_singular_values = singular_values(wte);
  r.positional_singular_values = singular_values(wpe);

  // Orthonormal basis of the unembedding row span.
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(wu.transpose(), Eigen::ComputeThinU);
  const Eigen::VectorXd sv = svd.singularValues();
  const double cut = sv.size() > 0 ? sv(0) * 1e-12 * static_cast<double>(wu.cols()) : 0.0;
  Eigen::Index rank = 0;
  while (rank < sv.size() && sv(rank) > cut) ++rank;
  const Eigen::MatrixXd basis = svd.matrixU().leftCols(rank);
  for (Eigen::Index j = 0; j < wte.cols(); ++j) {
    const Eigen::VectorXd e = wte.col(j);
    const Eigen::VectorXd proj = basis * (basis.transpose() * e);
    const double denom = e.norm() * proj.norm();
    r.subspace_cosines.push_back(denom > 0.0 ? e.dot(proj) / denom : 0.0);
  }
  const auto gamma = params.segment("ln_f.weight");
  const auto beta = params.segment("ln_f.bias");
  const auto bu = params.segment("unembed.bias");
  r.effective_unembed_bias = bu[0];
  for (Eigen::Index i = 0; i < wu.cols(); ++i) {
    r.effective_unembed_weight.push_back(wu(0, i) * gamma[static_cast<std::size_t>(i)]);
    r.effective_unembed_bias += wu(0, i) * beta[static_cast<std::size_t>(i)];
  }
  return r;
}

double degeneracy_check(const TransformerModel& model, const ParameterVector& params,
                        std::span<const std::size_t> indices,
                        std::span<const RegressionContext> contexts, std::uint64_t seed) {
  ParameterVector zeroed = params;
  auto gamma = zeroed.segment("ln_f.weight");
  auto beta = zeroed.segment("ln_f.bias");
  for (std::size_t i : indices) {
    if (i >= gamma.size()) throw ShapeError("degeneracy index out of range");
    gamma[i] = 0.0;
    beta[i] = 0.0;
  }
  ParameterVector randomized = zeroed;
  const Segment& wu = randomized.layout().at("unembed.weight");
  const std::size_t d = wu.shape[1];
  auto w = randomized.segment("unembed.weight");
  RngStream rng(seed, "degeneracy-check");
  for (std::size_t r = 0; r < wu.shape[0]; ++r)
    for (std::size_t i : indices) w[r * d + i] = rng.normal();
  const Eigen::MatrixXd a = model.forward(zeroed.values(), contexts);
  const Eigen::MatrixXd b = model.forward(randomized.values(), contexts);
  return (a - b).cwiseAbs().maxCoeff();
}

std::vector<MetricRow> checkpoint_metrics(const TransformerModel& model,
                                          const ParameterVector& params, const DataConfig& data,
                                          std::span<const RegressionContext> eval_contexts,
                                          const MetricOptions& opts) {
  const TransformerConfig& cfg = model.config();
  std::vector<MetricRow> rows;
  auto add = [&](const char* family, const std::string& metric, const std::string& index, double v) {
    rows.push_back({family, metric, index, v});
  };

  const auto per_token = model.per_token_loss(params.values(), eval_contexts);
  double mean = 0.0;
  for (std::size_t k = 0; k < per_token.size(); ++k) {
    add("loss", "per_token", std::to_string(k + 1), per_token[k]);
    mean += per_token[k];
  }
  add("loss", "mean", "", mean / static_cast<double>(per_token.size()));
  add("loss", "mean_square_prediction", "",
      mean_square_prediction(model, params.values(), eval_contexts));
  const auto prior = task_prior(data);
  add("loss", "task_prior_score", "",
      task_prior_score(model, params.values(), eval_contexts, prior));

  const int D = cfg.dim, K = cfg.max_examples;
  add("icl", "icl_1_" + std::to_string(D), "", icl_score(per_token, 1, D));
  add("icl", "icl_" + std::to_string(D) + "_" + std::to_string(K), "", icl_score(per_token, D, K));

  for (OodMode mode : {OodMode::inputs, OodMode::tasks}) {
    const std::string m = mode == OodMode::inputs ? "inputs" : "tasks";
    for (const auto& pt : ood_sweep(model, params.values(), data, opts.gains, mode, opts.ood_size,
                                    opts.eval_seed)) {
      const std::string g = format_double(pt.gain);
      add("ood", m + "_normalized_loss", g, pt.normalized_loss);
      add("ood", m + "_mean_abs_prediction", g, pt.mean_abs_prediction);
    }
  }

  const std::size_t n_att = std::min(opts.attention_samples, eval_contexts.size());
  AttentionRecord rec;
  model.forward(params.values(), eval_contexts.first(n_att), &rec);
  const EntropyReport ent = attention_entropy(rec);
  for (int b = 0; b < cfg.layers; ++b) {
    for (int h = 0; h < cfg.heads; ++h) {
      const std::string head = std::to_string(b) + "." + std::to_string(h);
      add("attention", "entropy", head, ent.head_mean[static_cast<std::size_t>(b)][static_cast<std::size_t>(h)]);
      const auto& pos = ent.positions[static_cast<std::size_t>(b)][static_cast<std::size_t>(h)];
      for (std::size_t p = 0; p < pos.size(); ++p)
        if (!std::isnan(pos[p])) add("attention", "entropy_position", head + "." + std::to_string(p), pos[p]);
    }
  }
  for (const auto& sc : head_scores(rec, opts.score_threshold, opts.variability_threshold)) {
    const std::string head = std::to_string(sc.layer) + "." + std::to_string(sc.head) + "." +
                             to_string(sc.component);
    add("heads", "self", head, sc.self);
    add("heads", "previous_token", head, sc.previous_token);
    add("heads", "previous_x", head, sc.previous_x);
    add("heads", "previous_y", head, sc.previous_y);
    add("heads", "x_total", head, sc.x_total);
    add("heads", "y_total", head, sc.y_total);
    add("heads", "variability", head, sc.variability);
    add("heads", "class", head, static_cast<double>(sc.label.head_class));
  }

  for (int b1 = 0; b1 < cfg.layers; ++b1) {
    for (int b2 = b1 + 1; b2 < cfg.layers; ++b2) {
      for (int h1 = 0; h1 < cfg.heads; ++h1) {
        const HeadCircuit c1 = head_circuit(cfg, params, b1, h1);
        for (int h2 = 0; h2 < cfg.heads; ++h2) {
          const Composition c = composition_scores(c1, head_circuit(cfg, params, b2, h2));
          const std::string idx = std::to_string(b1) + "." + std::to_string(h1) + "-" +
                                  std::to_string(b2) + "." + std::to_string(h2);
          add("composition", "q", idx, c.q);
          add("composition", "k", idx, c.k);
          add("composition", "v", idx, c.v);
        }
      }
    }
  }

  const CollapseReport col = collapse_report(cfg, params, opts.collapse_threshold);
  for (const auto& ln : col.layer_norms) {
    add("collapse", "ln_weight_fraction", ln.name, ln.weight_fraction);
    add("collapse", "ln_bias_fraction", ln.name, ln.bias_fraction);
  }
  for (std::size_t i = 0; i < col.embedding_singular_values.size(); ++i)
    add("collapse", "embedding_singular_value", std::to_string(i), col.embedding_singular_values[i]);
  for (std::size_t i = 0; i < col.positional_singular_values.size(); ++i)
    add("collapse", "positional_singular_value", std::to_string(i), col.positional_singular_values[i]);
  for (std::size_t i = 0; i < col.subspace_cosines.size(); ++i)
    add("collapse", "subspace_cosine", std::to_string(i), col.subspace_cosines[i]);
  for (std::size_t i = 0; i < col.effective_unembed_weight.size(); ++i)
    add("collapse", "effective_unembed_weight", std::to_string(i), col.effective_unembed_weight[i]);
  add("collapse", "effective_unembed_bias", "", col.effective_unembed_bias);
  return rows;
}

}  // namespace dgsc
