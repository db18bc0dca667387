#pragma once

#include <vector>

namespace dgsc {

/// One in-context regression sequence: a task vector, K inputs of length D and
/// their K noisy labels.
struct RegressionContext {
  std::vector<double> task;             // D
  std::vector<std::vector<double>> xs;  // K x D
  std::vector<double> ys;               // K
  double gain = 1.0;

  std::size_t dim() const { return task.size(); }
  std::size_t length() const { return ys.size(); }
};

/// Minibatch handed to a LossModel. Analytic potentials ignore its contents.
struct DataBatch {
  std::vector<RegressionContext> contexts;
  /// Empty: every token position 0..K-1 contributes to the loss. Otherwise one
  /// entry per context naming the single (0-based) position that does.
  std::vector<int> target_token;

  std::size_t size() const { return contexts.size(); }
  bool empty() const { return contexts.empty(); }
};

}  // namespace dgsc
