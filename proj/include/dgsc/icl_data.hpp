#pragma once

#include <cstdint>
#include <vector>

#include "dgsc/context.hpp"
#include "dgsc/rng.hpp"

namespace dgsc {

/// In-context linear regression data distribution.
struct DataConfig {
  std::size_t dim = 4;         // D
  std::size_t max_examples = 8;  // K
  double sigma2 = 0.125;
  /// Size M of the pre-generated task pool; 0 means a fresh task per context.
  std::size_t num_tasks = 0;
  std::uint64_t seed = 0;

  void validate() const;
  bool unbounded_tasks() const { return num_tasks == 0; }
};

enum class OodMode { inputs, tasks };

/// The M-task pool (empty when tasks are unbounded). Deterministic in cfg.seed.
std::vector<std::vector<double>> task_pool(const DataConfig& cfg);

/// Contexts with task ~ N(0, I) (or uniform from the pool), x ~ N(0, I),
/// y ~ N(task·x, σ²). Consumes draws from `rng` in a fixed order.
std::vector<RegressionContext> sample_batch(const DataConfig& cfg, std::size_t batch_size,
                                            RngStream& rng);

/// As sample_batch with one factor's covariance scaled by `gain`: inputs
/// (x ~ N(0, g·I)) or tasks (task ~ N(0, g·I), or pool tasks scaled by √g).
/// With gain 1 the draws are bit-identical to sample_batch.
std::vector<RegressionContext> sample_ood_batch(const DataConfig& cfg, std::size_t batch_size,
                                                double gain, OodMode mode, RngStream& rng);

/// Component-wise mean of the task pool; the zero vector for unbounded tasks.
std::vector<double> task_prior(const DataConfig& cfg);

enum class LossMode { subsequence, likelihood };

/// A fixed dataset of `size` contexts, generated lazily: element i is a pure
/// function of (cfg, seed, i). In likelihood mode each element also carries a
/// context length drawn uniformly from 1..K, and only that token is scored.
class FixedDataset {
 public:
  FixedDataset(DataConfig cfg, std::uint64_t size, std::uint64_t seed,
               LossMode mode = LossMode::subsequence);

  std::uint64_t size() const { return size_; }
  LossMode mode() const { return mode_; }
  const DataConfig& config() const { return cfg_; }

  RegressionContext context(std::uint64_t index) const;
  int target_token(std::uint64_t index) const;
  DataBatch gather(const std::vector<std::uint64_t>& indices) const;
  /// m indices drawn uniformly with replacement using `rng`.
  DataBatch draw(RngStream& rng, std::size_t m) const;

 private:
  DataConfig cfg_;
  std::uint64_t size_;
  std::uint64_t seed_;
  LossMode mode_;
  std::vector<std::vector<double>> pool_;
};

/// Packs contexts into a batch scoring every token.
DataBatch make_batch(std::vector<RegressionContext> contexts);

}  // namespace dgsc
