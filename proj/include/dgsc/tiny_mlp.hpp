#pragma once

#include "dgsc/loss_model.hpp"

namespace dgsc {

/// Pointwise regressor ŷ = W₂·tanh(W₁x + b₁) on D=2 contexts: 12 parameters.
/// Small enough for dense-Hessian oracles in tests.
class TinyMlp final : public LossModel {
 public:
  TinyMlp();

  std::string name() const override { return "tiny-mlp"; }
  const Layout& layout() const override { return layout_; }

 protected:
  void check_batch(const DataBatch& batch) const override;
  double do_loss(std::span<const double> params, const DataBatch& batch) const override;
  GradResult do_value_and_grad(std::span<const double> params,
                               const DataBatch& batch) const override;
  std::vector<double> do_hvp(std::span<const double> params, const DataBatch& batch,
                             std::span<const double> v) const override;

 private:
  Layout layout_;
};

}  // namespace dgsc
