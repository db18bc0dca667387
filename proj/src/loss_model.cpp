#include "dgsc/loss_model.hpp"

#include <cmath>

#include "dgsc/errors.hpp"

namespace dgsc {

void LossModel::check_params(std::span<const double> params) const {
  if (params.size() != layout().size()) {
    throw ShapeError(name() + ": expected " + std::to_string(layout().size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  const std::string bad = first_nonfinite_segment(layout(), params);
  if (!bad.empty()) throw NumericError(bad, name() + ": non-finite parameter");
}

void LossModel::check_batch(const DataBatch& batch) const {
  if (uses_batch() && batch.empty()) throw ShapeError(name() + ": empty batch");
}

double LossModel::loss(std::span<const double> params, const DataBatch& batch) const {
  check_params(params);
  check_batch(batch);
  const double l = do_loss(params, batch);
  if (!std::isfinite(l)) throw NumericError("loss", name() + ": non-finite loss");
  return l;
}

GradResult LossModel::value_and_grad(std::span<const double> params,
                                     const DataBatch& batch) const {
  check_params(params);
  check_batch(batch);
  GradResult r = do_value_and_grad(params, batch);
  if (r.grad.size() != params.size()) {
    throw ShapeError(name() + ": gradient length does not match parameters");
  }
  if (!std::isfinite(r.loss)) throw NumericError("loss", name() + ": non-finite loss");
  const std::string bad = first_nonfinite_segment(layout(), r.grad);
  if (!bad.empty()) throw NumericError(bad, name() + ": non-finite gradient");
  return r;
}

std::vector<double> LossModel::hvp(std::span<const double> params, const DataBatch& batch,
                                   std::span<const double> v) const {
  check_params(params);
  check_batch(batch);
  if (v.size() != params.size()) {
    throw ShapeError(name() + ": hvp direction length does not match parameters");
  }
  std::vector<double> hv = do_hvp(params, batch, v);
  const std::string bad = first_nonfinite_segment(layout(), hv);
  if (!bad.empty()) throw NumericError(bad, name() + ": non-finite Hessian-vector product");
  return hv;
}

}  // namespace dgsc
