#include "dgsc/icl_data.hpp"

#include <cmath>

#include "dgsc/errors.hpp"

namespace dgsc {

void DataConfig::validate() const {
  if (dim < 1) throw ConfigError("data.D must be at least 1");
  if (max_examples < 1) throw ConfigError("data.K must be at least 1");
  if (!(sigma2 >= 0.0) || !std::isfinite(sigma2)) throw ConfigError("data.sigma2 must be >= 0");
}

std::vector<std::vector<double>> task_pool(const DataConfig& cfg) {
  cfg.validate();
  std::vector<std::vector<double>> pool;
  if (cfg.unbounded_tasks()) return pool;
  RngStream rng(cfg.seed, "task-pool", 0);
  pool.resize(cfg.num_tasks, std::vector<double>(cfg.dim));
  for (auto& t : pool)
    for (auto& ti : t) ti = rng.normal();
  return pool;
}

namespace {

std::vector<RegressionContext> sample_impl(const DataConfig& cfg,
                                           const std::vector<std::vector<double>>& pool,
                                           std::size_t batch_size, double input_gain,
                                           double task_gain, RngStream& rng) {
  const double x_scale = std::sqrt(input_gain);
  const double t_scale = std::sqrt(task_gain);
  const double sigma = std::sqrt(cfg.sigma2);
  std::vector<RegressionContext> out(batch_size);
  for (auto& ctx : out) {
    ctx.task.resize(cfg.dim);
    if (pool.empty()) {
      for (auto& t : ctx.task) t = t_scale * rng.normal();
    } else {
      const auto& t = pool[rng.below(pool.size())];
      for (std::size_t i = 0; i < cfg.dim; ++i) ctx.task[i] = t_scale * t[i];
    }
    ctx.xs.assign(cfg.max_examples, std::vector<double>(cfg.dim));
    ctx.ys.resize(cfg.max_examples);
    for (std::size_t k = 0; k < cfg.max_examples; ++k) {
      double y = 0.0;
      for (std::size_t i = 0; i < cfg.dim; ++i) {
        ctx.xs[k][i] = x_scale * rng.normal();
        y += ctx.task[i] * ctx.xs[k][i];
      }
      if (cfg.sigma2 > 0.0) y += sigma * rng.normal();
      ctx.ys[k] = y;
    }
    ctx.gain = input_gain != 1.0 ? input_gain : task_gain;
  }
  return out;
}

}  // namespace

std::vector<RegressionContext> sample_batch(const DataConfig& cfg, std::size_t batch_size,
                                            RngStream& rng) {
  return sample_impl(cfg, task_pool(cfg), batch_size, 1.0, 1.0, rng);
}

std::vector<RegressionContext> sample_ood_batch(const DataConfig& cfg, std::size_t batch_size,
                                                double gain, OodMode mode, RngStream& rng) {
  if (!(gain > 0.0) || !std::isfinite(gain)) throw ConfigError("OOD gain must be positive");
  const auto pool = task_pool(cfg);
  return mode == OodMode::inputs ? sample_impl(cfg, pool, batch_size, gain, 1.0, rng)
                                 : sample_impl(cfg, pool, batch_size, 1.0, gain, rng);
}

std::vector<double> task_prior(const DataConfig& cfg) {
  std::vector<double> mean(cfg.dim, 0.0);
  const auto pool = task_pool(cfg);
  if (pool.empty()) return mean;
  for (const auto& t : pool)
    for (std::size_t i = 0; i < cfg.dim; ++i) mean[i] += t[i];
  for (auto& m : mean) m /= static_cast<double>(pool.size());
  return mean;
}

FixedDataset::FixedDataset(DataConfig cfg, std::uint64_t size, std::uint64_t seed, LossMode mode)
    : cfg_(std::move(cfg)), size_(size), seed_(seed), mode_(mode), pool_(task_pool(cfg_)) {
  if (size_ == 0) throw ConfigError("dataset size must be positive");
}

RegressionContext FixedDataset::context(std::uint64_t index) const {
  RngStream rng(seed_, "fixed-dataset", index);
  return std::move(sample_impl(cfg_, pool_, 1, 1.0, 1.0, rng).front());
}

int FixedDataset::target_token(std::uint64_t index) const {
  RngStream rng(seed_, "fixed-dataset-length", index);
  return static_cast<int>(rng.below(cfg_.max_examples));
}

DataBatch FixedDataset::gather(const std::vector<std::uint64_t>& indices) const {
  DataBatch b;
  b.contexts.reserve(indices.size());
  for (auto i : indices) b.contexts.push_back(context(i));
  if (mode_ == LossMode::likelihood) {
    b.target_token.reserve(indices.size());
    for (auto i : indices) b.target_token.push_back(target_token(i));
  }
  return b;
}

DataBatch FixedDataset::draw(RngStream& rng, std::size_t m) const {
  std::vector<std::uint64_t> idx(m);
  for (auto& i : idx) i = rng.below(size_);
  return gather(idx);
}

DataBatch make_batch(std::vector<RegressionContext> contexts) {
  DataBatch b;
  b.contexts = std::move(contexts);
  return b;
}

}  // namespace dgsc
