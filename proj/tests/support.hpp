#pragma once

// Independent numerical oracles shared by the unit tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "dgsc/loss_model.hpp"

namespace dgsc::testing {

/// Central finite-difference gradient of f at w with step h.
inline std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                       std::vector<double> w, double h = 1e-4) {
  std::vector<double> g(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double w0 = w[i];
    w[i] = w0 + h;
    const double fp = f(w);
    w[i] = w0 - h;
    const double fm = f(w);
    w[i] = w0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline std::vector<double> fd_gradient(const LossModel& m, const DataBatch& batch,
                                       std::vector<double> w, double h = 1e-4) {
  return fd_gradient([&](std::span<const double> p) { return m.loss(p, batch); }, std::move(w), h);
}

/// Central differences of the gradient along v, step h/‖v‖.
inline std::vector<double> fd_hvp(const LossModel& m, const DataBatch& batch,
                                  std::vector<double> w, std::span<const double> v,
                                  double h = 1e-5) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0.0) return std::vector<double>(w.size(), 0.0);
  const double step = h / norm;
  std::vector<double> wp = w, wm = w;
  for (std::size_t i = 0; i < w.size(); ++i) {
    wp[i] += step * v[i];
    wm[i] -= step * v[i];
  }
  const auto gp = m.value_and_grad(wp, batch).grad;
  const auto gm = m.value_and_grad(wm, batch).grad;
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = (gp[i] - gm[i]) / (2.0 * step);
  return out;
}

/// Dense Hessian from second finite differences of the loss alone.
inline std::vector<double> fd_dense_hessian(const std::function<double(std::span<const double>)>& f,
                                            std::vector<double> w, double h = 1e-3) {
  const std::size_t d = w.size();
  std::vector<double> H(d * d);
  auto at = [&](std::size_t i, double di, std::size_t j, double dj) {
    std::vector<double> p = w;
    p[i] += di;
    p[j] += dj;
    return f(p);
  };
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      H[i * d + j] = (at(i, h, j, h) - at(i, h, j, -h) - at(i, -h, j, h) + at(i, -h, j, -h)) /
                     (4.0 * h * h);
    }
  }
  return H;
}

/// Largest |a−b| / max(|a|, |b|, floor) over coordinates.
inline double max_rel_error(std::span<const double> a, std::span<const double> b,
                            double floor = 1e-12) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double den = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / den);
  }
  return worst;
}

inline double norm2(std::span<const double> a) {
  double s = 0.0;
  for (double x : a) s += x * x;
  return std::sqrt(s);
}

}  // namespace dgsc::testing
