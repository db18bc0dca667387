#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dgsc/context.hpp"
#include "dgsc/loss_model.hpp"
#include "dgsc/parameters.hpp"

namespace dgsc {

/// Pre-layer-norm decoder-only transformer for in-context regression.
struct TransformerConfig {
  int layers = 2;
  int heads = 4;
  int d_embed = 64;
  int d_mlp = 64;
  int dim = 4;           // D; tokens have D+1 coordinates
  int max_examples = 8;  // K; sequences have 2K tokens
  double ln_eps = 1e-5;
  double init_std = 0.02;
  std::string precision = "f64";

  int d_head() const { return d_embed / heads; }
  int token_dim() const { return dim + 1; }
  int seq_len() const { return 2 * max_examples; }
  void validate() const;
};

using TokenMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Interleaved encoding: position 2k holds (0, x_k), position 2k+1 holds
/// (y_k, 0, …, 0). The final y token is included.
TokenMatrix tokenize(const RegressionContext& ctx);
/// Inverse of tokenize for the x and y slots (the task is not recoverable).
RegressionContext read_tokens(const TokenMatrix& tokens);

/// Attention patterns captured during a forward pass.
struct AttentionRecord {
  int layers = 0;
  int heads = 0;
  int seq_len = 0;
  int samples = 0;
  /// patterns[layer][sample * heads + head] is a seq_len×seq_len lower
  /// triangular row-stochastic matrix.
  std::vector<std::vector<TokenMatrix>> patterns;

  const TokenMatrix& pattern(int layer, int head, int sample) const {
    return patterns[static_cast<std::size_t>(layer)]
                   [static_cast<std::size_t>(sample * heads + head)];
  }
};

Layout transformer_layout(const TransformerConfig& cfg);

/// Truncated normal (±2σ, σ = init_std) weights, zero biases, unit layer-norm
/// weights.
ParameterVector init_transformer(const TransformerConfig& cfg, std::uint64_t seed);

class TransformerModel final : public LossModel {
 public:
  explicit TransformerModel(TransformerConfig cfg);

  std::string name() const override { return "icl-transformer"; }
  const Layout& layout() const override { return layout_; }
  const TransformerConfig& config() const { return cfg_; }

  /// Predictions ŷ (contexts × K): the first output coordinate at each x slot.
  /// Fills `record` when non-null.
  Eigen::MatrixXd forward(std::span<const double> params,
                          std::span<const RegressionContext> contexts,
                          AttentionRecord* record = nullptr) const;

  /// Per-token mean squared errors ℓ̂_k (length K) over the contexts.
  std::vector<double> per_token_loss(std::span<const double> params,
                                     std::span<const RegressionContext> contexts) const;

  /// Contexts per independent evaluation chunk. Chunk results are reduced in
  /// index order, so results do not depend on the worker count.
  static constexpr std::size_t kChunk = 16;

 protected:
  void check_batch(const DataBatch& batch) const override;
  double do_loss(std::span<const double> params, const DataBatch& batch) const override;
  GradResult do_value_and_grad(std::span<const double> params,
                               const DataBatch& batch) const override;
  std::vector<double> do_hvp(std::span<const double> params, const DataBatch& batch,
                             std::span<const double> v) const override;

 private:
  TransformerConfig cfg_;
  Layout layout_;
};

/// Mean over contexts and tokens of (ŷ − y)² for the given predictions.
double batch_loss(const Eigen::MatrixXd& predictions, std::span<const RegressionContext> contexts);

}  // namespace dgsc
