#include "dgsc/potentials.hpp"

#include <cmath>

#include <Eigen/Dense>

#include "dgsc/errors.hpp"
#include "dgsc/rng.hpp"

namespace dgsc {

namespace {

template <class F, class G>
AnalyticPotential make(std::string name, std::size_t dim, F f, G g, Rational llc,
                       std::vector<double> ref) {
  return AnalyticPotential(
      std::move(name), dim, [f](std::span<const double> w) { return f(w); },
      [g](std::span<const double> w, std::span<double> out) { g(w, out); },
      [g](std::span<const ad::Dual> w, std::span<ad::Dual> out) { g(w, out); }, llc, 1,
      std::move(ref));
}

template <class T>
T sq(const T& x) {
  return x * x;
}

}  // namespace

AnalyticPotential::AnalyticPotential(std::string name, std::size_t dim,
                                     std::function<double(std::span<const double>)> eval,
                                     GradFn<double> grad, GradFn<ad::Dual> grad_dual,
                                     Rational known_llc, int known_multiplicity,
                                     std::vector<double> reference_point)
    : name_(std::move(name)),
      dim_(dim),
      eval_(std::move(eval)),
      grad_(std::move(grad)),
      grad_dual_(std::move(grad_dual)),
      llc_(known_llc),
      multiplicity_(known_multiplicity),
      reference_(std::move(reference_point)) {
  if (reference_.size() != dim_) throw ShapeError(name_ + ": reference point has wrong length");
}

std::vector<double> AnalyticPotential::grad(std::span<const double> w) const {
  std::vector<double> g(dim_);
  grad_(w, g);
  return g;
}

std::vector<double> AnalyticPotential::hvp(std::span<const double> w,
                                           std::span<const double> v) const {
  std::vector<ad::Dual> wd(dim_), gd(dim_);
  for (std::size_t i = 0; i < dim_; ++i) wd[i] = ad::Dual(w[i], v[i]);
  grad_dual_(wd, gd);
  std::vector<double> hv(dim_);
  for (std::size_t i = 0; i < dim_; ++i) hv[i] = gd[i].d;
  return hv;
}

AnalyticPotential axis_quadratic3(double a, double b, double c) {
  if (!(a > 0 && b > 0 && c > 0)) throw ConfigError("l5 coefficients must be positive");
  return make(
      "l5", 3,
      [=](std::span<const double> w) { return a * w[0] * w[0] + b * w[1] * w[1] + c * w[2] * w[2]; },
      [=](auto w, auto out) {
        out[0] = 2.0 * a * w[0];
        out[1] = 2.0 * b * w[1];
        out[2] = 2.0 * c * w[2];
      },
      {3, 2}, {0.0, 0.0, 0.0});
}

std::vector<AnalyticPotential> builtin_potentials() {
  std::vector<AnalyticPotential> out;
  out.push_back(make(
      "l1", 2, [](std::span<const double> w) { return w[0] * w[0] + w[1] * w[1]; },
      [](auto w, auto g) {
        g[0] = 2.0 * w[0];
        g[1] = 2.0 * w[1];
      },
      {1, 1}, {0.0, 0.0}));
  out.push_back(make(
      "l2", 2, [](std::span<const double> w) { return sq(sq(w[0])) + sq(sq(w[1])); },
      [](auto w, auto g) {
        g[0] = 4.0 * w[0] * w[0] * w[0];
        g[1] = 4.0 * w[1] * w[1] * w[1];
      },
      {1, 2}, {0.0, 0.0}));
  out.push_back(make(
      "l3", 2, [](std::span<const double> w) { return sq(w[0]) * sq(sq(w[1])); },
      [](auto w, auto g) {
        g[0] = 2.0 * w[0] * sq(sq(w[1]));
        g[1] = 4.0 * sq(w[0]) * w[1] * w[1] * w[1];
      },
      {1, 4}, {0.0, 0.0}));
  out.push_back(make(
      "l4", 2,
      [](std::span<const double> w) {
        const double r2 = w[0] * w[0] + w[1] * w[1];
        return sq(w[0] - 1.0) * sq(sq(r2));
      },
      [](auto w, auto g) {
        const auto r2 = w[0] * w[0] + w[1] * w[1];
        const auto r6 = r2 * r2 * r2;
        const auto a = w[0] - 1.0;
        // d/dw₁ = 2a·r⁸ + a²·4r⁶·2w₁ ; d/dw₂ = a²·4r⁶·2w₂
        g[0] = 2.0 * a * r6 * r2 + 8.0 * a * a * r6 * w[0];
        g[1] = 8.0 * a * a * r6 * w[1];
      },
      {1, 4}, {0.0, 0.0}));
  out.push_back(axis_quadratic3(1.0, 2.0, 3.0));
  out.push_back(make(
      "l6", 3, [](std::span<const double> w) { return w[0] * w[0] + w[1] * w[1]; },
      [](auto w, auto g) {
        g[0] = 2.0 * w[0];
        g[1] = 2.0 * w[1];
        g[2] = 0.0 * w[2];
      },
      {1, 1}, {0.0, 0.0, 0.0}));
  out.push_back(make(
      "l7", 3,
      [](std::span<const double> w) { return w[0] * w[0] + sq(sq(w[1])) + sq(sq(w[2])); },
      [](auto w, auto g) {
        g[0] = 2.0 * w[0];
        g[1] = 4.0 * w[1] * w[1] * w[1];
        g[2] = 4.0 * w[2] * w[2] * w[2];
      },
      {1, 1}, {0.0, 0.0, 0.0}));
  return out;
}

AnalyticPotential diagonal_quadratic(std::size_t d, std::uint64_t seed) {
  if (d == 0) throw ConfigError("quadratic dimension must be positive");
  RngStream rng(seed, "diagonal-quadratic", d);
  std::vector<double> a(d);
  for (auto& ai : a) ai = 0.5 + 1.5 * rng.uniform();
  const long num = static_cast<long>(d);
  return make(
      "quad" + std::to_string(d), d,
      [a](std::span<const double> w) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * w[i] * w[i];
        return s;
      },
      [a](auto w, auto g) {
        for (std::size_t i = 0; i < a.size(); ++i) g[i] = 2.0 * a[i] * w[i];
      },
      num % 2 == 0 ? Rational{num / 2, 1} : Rational{num, 2}, std::vector<double>(d, 0.0));
}

AnalyticPotential quadratic_form(std::size_t d, std::vector<double> a) {
  if (a.size() != d * d) throw ShapeError("quadratic form matrix must be d×d");
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> A(
      a.data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  if (!A.isApprox(A.transpose()) || A.llt().info() != Eigen::Success)
    throw ConfigError("quadratic form matrix must be symmetric positive definite");
  const long num = static_cast<long>(d);
  return make(
      "qform" + std::to_string(d), d,
      [a, d](std::span<const double> w) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t j = 0; j < d; ++j) s += w[i] * a[i * d + j] * w[j];
        return 0.5 * s;
      },
      [a, d](auto w, auto g) {
        for (std::size_t i = 0; i < d; ++i) {
          g[i] = 0.0 * w[i];
          for (std::size_t j = 0; j < d; ++j) g[i] += 0.5 * (a[i * d + j] + a[j * d + i]) * w[j];
        }
      },
      num % 2 == 0 ? Rational{num / 2, 1} : Rational{num, 2}, std::vector<double>(d, 0.0));
}

AnalyticPotential potential_by_name(const std::string& name) {
  if (name.rfind("quad", 0) == 0 && name.size() > 4) {
    std::size_t d = 0;
    try {
      d = std::stoul(name.substr(4));
    } catch (const std::exception&) {
      throw ConfigError("unknown potential '" + name + "'");
    }
    return diagonal_quadratic(d, 0);
  }
  for (auto& p : builtin_potentials()) {
    if (p.name() == name) return p;
  }
  throw ConfigError("unknown potential '" + name + "'");
}

PotentialModel::PotentialModel(AnalyticPotential potential, std::size_t synthetic_n)
    : potential_(std::move(potential)), synthetic_n_(synthetic_n) {
  if (synthetic_n_ < 1) throw ConfigError("synthetic_n must be at least 1");
  layout_.add("w", {potential_.dim()});
}

double PotentialModel::do_loss(std::span<const double> w, const DataBatch&) const {
  return potential_.eval(w);
}

GradResult PotentialModel::do_value_and_grad(std::span<const double> w, const DataBatch&) const {
  return {potential_.eval(w), potential_.grad(w)};
}

std::vector<double> PotentialModel::do_hvp(std::span<const double> w, const DataBatch&,
                                           std::span<const double> v) const {
  return potential_.hvp(w, v);
}

std::shared_ptr<PotentialModel> as_loss_model(const AnalyticPotential& p, std::size_t synthetic_n) {
  return std::make_shared<PotentialModel>(p, synthetic_n);
}

}  // namespace dgsc
