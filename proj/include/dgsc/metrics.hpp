#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dgsc/icl_data.hpp"
#include "dgsc/transformer.hpp"

namespace dgsc {

/// One tracked quantity across checkpoints. values[i] belongs to steps[i];
/// NaN marks a missing entry.
struct MetricSeries {
  std::string name;
  std::vector<std::uint64_t> steps;
  std::vector<std::vector<double>> values;
};

/// ℓ̂_{k2} − ℓ̂_{k1} with 1-based token indices, 1 ≤ k1 ≤ k2 ≤ K.
double icl_score(std::span<const double> per_token_losses, int k1, int k2);

/// Mean of ŷ_k² over contexts and tokens.
double mean_square_prediction(const TransformerModel& model, std::span<const double> params,
                              std::span<const RegressionContext> contexts);

/// Mean of (ŷ_k − t̄·x_k)² over contexts and tokens.
double task_prior_score(const TransformerModel& model, std::span<const double> params,
                        std::span<const RegressionContext> contexts, std::span<const double> prior);

struct OodPoint {
  double gain = 1.0;
  double normalized_loss = 0.0;  // loss / g²
  double mean_abs_prediction = 0.0;
};

/// Evaluates on `size` contexts from sample_ood_batch per gain. Each gain uses
/// a fresh (seed, "eval") stream, so gain 1 reproduces eval_set exactly.
std::vector<OodPoint> ood_sweep(const TransformerModel& model, std::span<const double> params,
                                const DataConfig& data, std::span<const double> gains, OodMode mode,
                                std::size_t size, std::uint64_t seed);

/// Normalized attention entropy. positions[b][h][p] is the sample mean of
/// Ĥ at query position p (0-based); p = 0 and the final y position are NaN.
struct EntropyReport {
  std::vector<std::vector<std::vector<double>>> positions;
  std::vector<std::vector<double>> head_mean;  // [b][h]
};

EntropyReport attention_entropy(const AttentionRecord& record);

/// Ĥ of a single attention row over its first `k` entries, k ≥ 2.
double normalized_entropy(std::span<const double> row);

enum class TokenKind { x, y };
std::string to_string(TokenKind k);

enum class HeadClass { self, previous_token, previous_x, previous_y, unclassified };
std::string to_string(HeadClass c);

struct HeadLabel {
  int layer = 0;
  int head = 0;
  TokenKind component = TokenKind::x;
  HeadClass head_class = HeadClass::unclassified;
};

/// Attention variability per head, averaged over query positions of one kind.
/// Query positions run from 1 to 2K−2 (the final y is never read).
double attention_variability(const AttentionRecord& record, int layer, int head, TokenKind kind);

/// Variability of one query row across samples.
double row_variability(const AttentionRecord& record, int layer, int head, int position);

struct HeadScores {
  int layer = 0;
  int head = 0;
  TokenKind component = TokenKind::x;
  double self = 0.0;
  double previous_token = 0.0;
  double previous_x = 0.0;  // attention to the nearest earlier x token
  double previous_y = 0.0;  // attention to the nearest earlier y token
  double x_total = 0.0;
  double y_total = 0.0;
  double variability = 0.0;
  HeadLabel label;
};

/// Scores for every (layer, head, component), averaged over samples and over
/// query positions 2..2K−2 of that component.
std::vector<HeadScores> head_scores(const AttentionRecord& record, double score_threshold = 0.8,
                                    double variability_threshold = 0.2);

/// Per-head circuit matrices in the residual basis (d_embed × d_embed).
struct HeadCircuit {
  Eigen::MatrixXd qk;  // W_Qᵀ W_K
  Eigen::MatrixXd ov;  // W_O W_V
};

HeadCircuit head_circuit(const TransformerConfig& cfg, const ParameterVector& params, int layer,
                         int head);

/// ‖M W‖_F / (‖M‖_F ‖W‖_F).
double composition_score(const Eigen::MatrixXd& m, const Eigen::MatrixXd& w_ov);

struct Composition {
  double q = 0.0;
  double k = 0.0;
  double v = 0.0;
};

/// Composition of earlier head h1 into later head h2.
Composition composition_scores(const HeadCircuit& h1, const HeadCircuit& h2);

struct LayerNormCollapse {
  std::string name;  // e.g. "h.0.ln_1", "ln_f"
  double weight_fraction = 0.0;
  double bias_fraction = 0.0;
};

struct CollapseReport {
  std::vector<LayerNormCollapse> layer_norms;
  std::vector<double> embedding_singular_values;   // D+1, descending
  std::vector<double> positional_singular_values;  // descending
  /// Cosine between each token-embedding vector and its projection onto the
  /// span of the unembedding rows.
  std::vector<double> subspace_cosines;
  std::vector<double> effective_unembed_weight;  // W_U[0,:] ⊙ γ_f
  double effective_unembed_bias = 0.0;           // W_U[0,:]·β_f + b_U[0]
};

CollapseReport collapse_report(const TransformerConfig& cfg, const ParameterVector& params,
                               double threshold = 0.1);

/// Zeroes γ_f and β_f at `indices`, then replaces the matching unembedding
/// columns with random values. Returns the largest change in predictions on
/// `contexts` between the zeroed model and its randomized copy.
double degeneracy_check(const TransformerModel& model, const ParameterVector& params,
                        std::span<const std::size_t> indices,
                        std::span<const RegressionContext> contexts, std::uint64_t seed);

/// Flat metric value for CSV export: (family, metric, index, value).
struct MetricRow {
  std::string family;
  std::string metric;
  std::string index;
  double value = 0.0;
};

struct MetricOptions {
  std::vector<double> gains{0.1, 0.31622776601683794, 1.0, 3.1622776601683795,
                            10.0, 31.622776601683793, 100.0};
  double score_threshold = 0.8;
  double variability_threshold = 0.2;
  double collapse_threshold = 0.1;
  std::size_t attention_samples = 256;
  std::size_t ood_size = 2048;
  std::uint64_t eval_seed = 0;
};

/// Every metric family for one checkpoint. Families: loss, icl, ood,
/// attention, heads, composition, collapse.
std::vector<MetricRow> checkpoint_metrics(const TransformerModel& model,
                                          const ParameterVector& params, const DataConfig& data,
                                          std::span<const RegressionContext> eval_contexts,
                                          const MetricOptions& opts);

}  // namespace dgsc
