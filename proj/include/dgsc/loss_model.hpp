#pragma once

#include <span>
#include <string>
#include <vector>

#include "dgsc/context.hpp"
#include "dgsc/parameters.hpp"

namespace dgsc {

struct GradResult {
  double loss = 0.0;
  std::vector<double> grad;
};

/// A differentiable scalar loss over (flat parameters, data batch).
///
/// Implementations must be safe for concurrent const use: every method is a
/// pure function of its arguments.
class LossModel {
 public:
  virtual ~LossModel() = default;

  virtual std::string name() const = 0;
  virtual const Layout& layout() const = 0;
  /// False for models whose loss ignores the batch (analytic potentials).
  virtual bool uses_batch() const { return true; }

  /// Forward loss only.
  double loss(std::span<const double> params, const DataBatch& batch) const;
  /// Loss and exact reverse-mode gradient.
  GradResult value_and_grad(std::span<const double> params, const DataBatch& batch) const;
  /// Hessian-vector product of the batch loss (forward-over-reverse).
  std::vector<double> hvp(std::span<const double> params, const DataBatch& batch,
                          std::span<const double> v) const;

 protected:
  virtual void check_batch(const DataBatch& batch) const;
  virtual double do_loss(std::span<const double> params, const DataBatch& batch) const = 0;
  virtual GradResult do_value_and_grad(std::span<const double> params,
                                       const DataBatch& batch) const = 0;
  virtual std::vector<double> do_hvp(std::span<const double> params, const DataBatch& batch,
                                     std::span<const double> v) const = 0;

 private:
  void check_params(std::span<const double> params) const;
};

inline GradResult value_and_grad(const LossModel& model, std::span<const double> params,
                                 const DataBatch& batch) {
  return model.value_and_grad(params, batch);
}

inline std::vector<double> hvp(const LossModel& model, std::span<const double> params,
                               const DataBatch& batch, std::span<const double> v) {
  return model.hvp(params, batch, v);
}

}  // namespace dgsc
