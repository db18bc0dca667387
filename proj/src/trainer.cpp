#include "dgsc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "dgsc/config.hpp"
#include "dgsc/errors.hpp"

namespace dgsc {

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train.steps must be at least 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (!(max_lr > 0.0)) throw ConfigError("train.max_lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2 must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
  if (!(pct_start > 0.0 && pct_start < 1.0)) throw ConfigError("train.pct_start must lie in (0, 1)");
  if (!(div_factor > 0.0)) throw ConfigError("train.div_factor must be positive");
  if (!(final_div_factor > 0.0)) throw ConfigError("train.final_div_factor must be positive");
  if (n_linear < 2) throw ConfigError("train.n_linear must be at least 2");
  if (eval_size < 1) throw ConfigError("train.eval_size must be at least 1");
  if (n_linear + n_log > steps + 1) {
    throw ConfigError("train.n_linear + train.n_log exceeds the number of distinct steps");
  }
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.steps = 50000;
  return c;
}

double one_cycle_lr(const TrainConfig& cfg, std::uint64_t step) {
  const double T = static_cast<double>(cfg.steps);
  const double s = static_cast<double>(std::min(step, cfg.steps));
  const double peak = cfg.pct_start * T;
  const double lo = cfg.max_lr / cfg.div_factor;
  const double end = cfg.max_lr / cfg.final_div_factor;
  if (s <= peak) return lo + (cfg.max_lr - lo) * (s / peak);
  return cfg.max_lr + (end - cfg.max_lr) * ((s - peak) / (T - peak));
}

std::vector<std::uint64_t> checkpoint_plan(std::uint64_t steps, std::size_t n_linear,
                                           std::size_t n_log) {
  if (n_linear < 2) throw ConfigError("checkpoint plan needs at least 2 linear steps");
  if (n_linear + n_log > steps + 1) {
    throw ConfigError("checkpoint plan of " + std::to_string(n_linear + n_log) +
                      " steps does not fit in " + std::to_string(steps + 1) + " distinct steps");
  }
  std::set<std::uint64_t> used;
  auto place = [&](std::uint64_t s) {
    std::uint64_t up = s;
    while (up <= steps && used.count(up)) ++up;
    if (up <= steps) {
      used.insert(up);
      return;
    }
    std::uint64_t down = s;
    while (used.count(down)) --down;  // terminates: fewer entries than steps + 1
    used.insert(down);
  };
  const double T = static_cast<double>(steps);
  for (std::size_t i = 0; i < n_linear; ++i) {
    place(static_cast<std::uint64_t>(std::llround(T * static_cast<double>(i) /
                                                  static_cast<double>(n_linear - 1))));
  }
  const double log_t = std::log10(T);
  for (std::size_t j = 0; j < n_log; ++j) {
    const double e = n_log == 1 ? 0.0 : log_t * static_cast<double>(j) / static_cast<double>(n_log - 1);
    place(static_cast<std::uint64_t>(std::llround(std::pow(10.0, e))));
  }
  return {used.begin(), used.end()};
}

std::vector<RegressionContext> eval_set(const DataConfig& data_cfg, const TrainConfig& train_cfg) {
  RngStream rng(train_cfg.eval_seed, "eval");
  return sample_batch(data_cfg, train_cfg.eval_size, rng);
}

EvalResult evaluate(const TransformerModel& model, std::span<const double> params,
                    std::span<const RegressionContext> eval_contexts) {
  EvalResult r;
  r.per_token = model.per_token_loss(params, eval_contexts);
  for (double v : r.per_token) r.mean += v;
  r.mean /= static_cast<double>(r.per_token.size());
  return r;
}

namespace {

Checkpoint snapshot(std::uint64_t step, const std::vector<double>& w, const AdamState& adam,
                    std::uint64_t md, std::uint64_t rd) {
  Checkpoint c;
  c.step = step;
  c.params = w;
  c.adam = adam;
  c.has_optimizer = true;
  c.model_digest = md;
  c.run_digest = rd;
  c.rng_positions = {{"train-batch", step}};
  return c;
}

}  // namespace

TrainResult train(const TransformerConfig& model_cfg, const DataConfig& data_cfg,
                  const TrainConfig& cfg, TrainSink* sink, const Checkpoint* resume,
                  bool keep_checkpoints) {
  model_cfg.validate();
  data_cfg.validate();
  cfg.validate();
  if (data_cfg.dim != static_cast<std::size_t>(model_cfg.dim) ||
      data_cfg.max_examples != static_cast<std::size_t>(model_cfg.max_examples)) {
    throw ConfigError("model.D/model.K must match data.D/data.K");
  }
  const TransformerModel model(model_cfg);
  const auto plan = checkpoint_plan(cfg.steps, cfg.n_linear, cfg.n_log);
  const std::set<std::uint64_t> plan_set(plan.begin(), plan.end());
  const std::uint64_t md = model_digest(model_cfg);
  const std::uint64_t rd = run_digest(data_cfg, cfg);

  TrainResult result;
  auto emit = [&](Checkpoint c) {
    if (sink) sink->on_checkpoint(c);
    if (keep_checkpoints) result.checkpoints.push_back(std::move(c));
  };

  std::vector<double> w;
  AdamState adam;
  std::uint64_t start = 0;
  if (resume) {
    if (resume->model_digest != md) {
      throw CompatibilityError("checkpoint model digest " + digest_hex(resume->model_digest) +
                               " does not match configuration digest " + digest_hex(md));
    }
    if (resume->run_digest != rd) {
      throw CompatibilityError("checkpoint run digest " + digest_hex(resume->run_digest) +
                               " does not match configuration digest " + digest_hex(rd));
    }
    if (!resume->has_optimizer) throw ConfigError("resume checkpoint has no optimizer state");
    if (resume->step > cfg.steps) throw ConfigError("resume step beyond train.steps");
    w = resume->params;
    adam = resume->adam;
    start = resume->step;
  } else {
    const auto init = init_transformer(model_cfg, cfg.seed);
    w.assign(init.values().begin(), init.values().end());
    adam.m.assign(w.size(), 0.0);
    adam.v.assign(w.size(), 0.0);
    if (plan_set.count(0)) emit(snapshot(0, w, adam, md, rd));
  }

  for (std::uint64_t t = start; t < cfg.steps; ++t) {
    RngStream rng(cfg.seed, "train-batch", t);
    const DataBatch batch = make_batch(sample_batch(data_cfg, cfg.batch_size, rng));
    GradResult g;
    try {
      g = model.value_and_grad(w, batch);
    } catch (const NumericError& e) {
      throw NumericError(e.where(), "training aborted at update " + std::to_string(t + 1) +
                                        " (last checkpoint retained): " + e.what());
    }
    const double lr = one_cycle_lr(cfg, t);
    ++adam.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.t));
    for (std::size_t i = 0; i < w.size(); ++i) {
      adam.m[i] = cfg.beta1 * adam.m[i] + (1.0 - cfg.beta1) * g.grad[i];
      adam.v[i] = cfg.beta2 * adam.v[i] + (1.0 - cfg.beta2) * g.grad[i] * g.grad[i];
      const double mh = adam.m[i] / bc1;
      const double vh = adam.v[i] / bc2;
      w[i] -= lr * mh / (std::sqrt(vh) + cfg.adam_eps);
    }
    result.train_loss.push_back(g.loss);
    if (sink) sink->on_step(t + 1, g.loss, lr);
    if (plan_set.count(t + 1)) emit(snapshot(t + 1, w, adam, md, rd));
  }
  return result;
}

}  // namespace dgsc
