#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dgsc/dual.hpp"
#include "dgsc/loss_model.hpp"

namespace dgsc {

struct Rational {
  long num = 0;
  long den = 1;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool operator==(const Rational&) const = default;
};

/// A toy loss with an exactly known local learning coefficient at its
/// reference point.
class AnalyticPotential {
 public:
  template <class T>
  using GradFn = std::function<void(std::span<const T>, std::span<T>)>;

  AnalyticPotential(std::string name, std::size_t dim,
                    std::function<double(std::span<const double>)> eval, GradFn<double> grad,
                    GradFn<ad::Dual> grad_dual, Rational known_llc, int known_multiplicity,
                    std::vector<double> reference_point);

  const std::string& name() const { return name_; }
  std::size_t dim() const { return dim_; }
  Rational known_llc() const { return llc_; }
  int known_multiplicity() const { return multiplicity_; }
  const std::vector<double>& reference_point() const { return reference_; }

  double eval(std::span<const double> w) const { return eval_(w); }
  void grad(std::span<const double> w, std::span<double> out) const { grad_(w, out); }
  std::vector<double> grad(std::span<const double> w) const;
  /// H·v by pushing dual numbers through the analytic gradient.
  std::vector<double> hvp(std::span<const double> w, std::span<const double> v) const;

 private:
  std::string name_;
  std::size_t dim_;
  std::function<double(std::span<const double>)> eval_;
  GradFn<double> grad_;
  GradFn<ad::Dual> grad_dual_;
  Rational llc_;
  int multiplicity_;
  std::vector<double> reference_;
};

/// ℓ₁..ℓ₇ (ℓ₅ with (a, b, c) = (1, 2, 3)).
std::vector<AnalyticPotential> builtin_potentials();

/// a·w₁² + b·w₂² + c·w₃², λ = 3/2 for any positive a, b, c.
AnalyticPotential axis_quadratic3(double a, double b, double c);

/// Σᵢ aᵢ·wᵢ² in d dimensions with curvatures drawn from [0.5, 2] (λ = d/2).
AnalyticPotential diagonal_quadratic(std::size_t d, std::uint64_t seed);

/// ½·wᵀAw for a symmetric positive definite A (row-major, d×d); λ = d/2.
AnalyticPotential quadratic_form(std::size_t d, std::vector<double> a);

/// Looks up "l1".."l7" or "quad<d>" (diagonal quadratic, seed 0).
AnalyticPotential potential_by_name(const std::string& name);

/// Adapter presenting a potential as a LossModel whose loss ignores the batch.
class PotentialModel final : public LossModel {
 public:
  PotentialModel(AnalyticPotential potential, std::size_t synthetic_n);

  std::string name() const override { return potential_.name(); }
  const Layout& layout() const override { return layout_; }
  bool uses_batch() const override { return false; }

  const AnalyticPotential& potential() const { return potential_; }
  std::size_t synthetic_n() const { return synthetic_n_; }

 protected:
  double do_loss(std::span<const double> w, const DataBatch&) const override;
  GradResult do_value_and_grad(std::span<const double> w, const DataBatch&) const override;
  std::vector<double> do_hvp(std::span<const double> w, const DataBatch&,
                             std::span<const double> v) const override;

 private:
  AnalyticPotential potential_;
  std::size_t synthetic_n_;
  Layout layout_;
};

std::shared_ptr<PotentialModel> as_loss_model(const AnalyticPotential& p, std::size_t synthetic_n);

}  // namespace dgsc
