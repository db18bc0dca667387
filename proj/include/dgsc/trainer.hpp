#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dgsc/icl_data.hpp"
#include "dgsc/transformer.hpp"

namespace dgsc {

struct TrainConfig {
  std::uint64_t steps = 500000;
  std::size_t batch_size = 256;
  double max_lr = 0.003;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double pct_start = 0.5;
  double div_factor = 25.0;         // initial lr = max_lr / div_factor
  double final_div_factor = 1e4;    // final lr = max_lr / final_div_factor
  std::size_t n_linear = 100;
  std::size_t n_log = 90;
  std::uint64_t seed = 0;
  std::size_t eval_size = 2048;
  std::uint64_t eval_seed = 0xE7A15EEDULL;

  void validate() const;
  /// Default settings with T = 50,000.
  static TrainConfig desk();
};

/// One-cycle schedule with linear anneal: max_lr/div_factor at step 0, max_lr
/// at pct_start·T, max_lr/final_div_factor at T.
double one_cycle_lr(const TrainConfig& cfg, std::uint64_t step);

/// n_linear evenly spaced steps on [0, T] merged with n_log log-spaced steps
/// on [1, T]. Collisions move to the nearest unused step (upwards first), so
/// the plan has exactly n_linear + n_log distinct sorted steps including 0
/// and T. Throws ConfigError when n_linear + n_log > T + 1.
std::vector<std::uint64_t> checkpoint_plan(std::uint64_t steps, std::size_t n_linear,
                                           std::size_t n_log);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
};

/// Parameters after `step` optimizer updates.
struct Checkpoint {
  std::uint64_t step = 0;
  std::vector<double> params;
  AdamState adam;
  bool has_optimizer = false;
  /// Digest of the model configuration (determines the parameter layout).
  std::uint64_t model_digest = 0;
  /// Digest of the data and training configuration.
  std::uint64_t run_digest = 0;
  /// Named RNG stream positions needed to continue the run.
  std::vector<std::pair<std::string, std::uint64_t>> rng_positions;
};

/// Receives training progress. Default implementations do nothing.
class TrainSink {
 public:
  virtual ~TrainSink() = default;
  virtual void on_step(std::uint64_t /*step*/, double /*loss*/, double /*lr*/) {}
  virtual void on_checkpoint(const Checkpoint& /*ckpt*/) {}
};

struct TrainResult {
  std::vector<Checkpoint> checkpoints;
  std::vector<double> train_loss;  // indexed by update, from the resume point
};

/// Single-epoch Adam training on fresh batches: the batch for update t comes
/// from stream (seed, "train-batch", t). With `resume`, continues from that
/// checkpoint and reproduces the uninterrupted run bit-exactly. With
/// `keep_checkpoints` false, checkpoints go only to the sink.
TrainResult train(const TransformerConfig& model_cfg, const DataConfig& data_cfg,
                  const TrainConfig& train_cfg, TrainSink* sink = nullptr,
                  const Checkpoint* resume = nullptr, bool keep_checkpoints = true);

/// The held-out evaluation contexts (frozen seed, eval_size contexts).
std::vector<RegressionContext> eval_set(const DataConfig& data_cfg, const TrainConfig& train_cfg);

struct EvalResult {
  std::vector<double> per_token;  // ℓ̂_k, k = 1..K
  double mean = 0.0;
};

EvalResult evaluate(const TransformerModel& model, std::span<const double> params,
                    std::span<const RegressionContext> eval_contexts);

}  // namespace dgsc
