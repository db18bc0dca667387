#pragma once

// Reverse-mode differentiation over matrix-valued nodes.
//
// A Tape records a forward computation as a list of nodes, each holding its
// value and a closure that pushes its output gradient back to its inputs.
// The tape is templated on the scalar: Tape<double> gives gradients,
// Tape<Dual> with tangents seeded on the parameters gives forward-over-reverse
// Hessian-vector products from the same model code.

#include <cassert>
#include <cmath>
#include <functional>
#include <numbers>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dgsc/dual.hpp"

namespace dgsc::ad {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Var {
  int id = -1;
};

template <class T>
class Tape {
 public:
  using Matrix = Mat<T>;

  /// Input that does not receive a gradient (data).
  Var constant(Matrix value) { return push(std::move(value), false); }
  /// Input that receives a gradient (parameters).
  Var param(Matrix value) { return push(std::move(value), true); }

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  /// Gradient of the last backward() target with respect to v.
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
  std::size_t size() const { return nodes_.size(); }

  Var add(Var a, Var b) {
    Var out = push(value(a) + value(b), needs(a) || needs(b));
    on_backward(out, [this, a, b, out] {
      accumulate(a, grad(out));
      accumulate(b, grad(out));
    });
    return out;
  }

  /// a + row, the 1×n row broadcast over every row of a.
  Var add_row(Var a, Var row) {
    assert(value(row).rows() == 1 && value(row).cols() == value(a).cols());
    Matrix r = value(a);
    r.rowwise() += value(row).row(0);
    Var out = push(std::move(r), needs(a) || needs(row));
    on_backward(out, [this, a, row, out] {
      accumulate(a, grad(out));
      if (needs(row)) nodes_[row.id].grad.row(0) += grad(out).colwise().sum();
    });
    return out;
  }

  /// a + tile, where tile (L×n) repeats down the rows of a (rows multiple of L).
  Var add_tiled(Var a, Var tile) {
    const Eigen::Index period = value(tile).rows();
    assert(value(a).rows() % period == 0);
    Matrix r = value(a);
    for (Eigen::Index s = 0; s < r.rows(); s += period) r.middleRows(s, period) += value(tile);
    Var out = push(std::move(r), needs(a) || needs(tile));
    on_backward(out, [this, a, tile, out, period] {
      accumulate(a, grad(out));
      if (!needs(tile)) return;
      const Matrix& g = grad(out);
      for (Eigen::Index s = 0; s < g.rows(); s += period) {
        nodes_[tile.id].grad += g.middleRows(s, period);
      }
    });
    return out;
  }

  /// a · wᵀ (a: N×in, w: out×in), the convention of a linear layer's weight.
  Var matmul_nt(Var a, Var w) {
    Matrix r = value(a) * value(w).transpose();
    Var out = push(std::move(r), needs(a) || needs(w));
    on_backward(out, [this, a, w, out] {
      if (needs(a)) nodes_[a.id].grad.noalias() += grad(out) * value(w);
      if (needs(w)) nodes_[w.id].grad.noalias() += grad(out).transpose() * value(a);
    });
    return out;
  }

  /// Row-wise layer normalization with biased variance; gamma and beta are 1×n.
  Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Matrix& xv = value(x);
    const Eigen::Index n = xv.rows(), d = xv.cols();
    Matrix xhat(n, d);
    std::vector<T> inv_std(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      T mean = xv.row(i).sum() / T(static_cast<double>(d));
      T var = T(0.0);
      for (Eigen::Index j = 0; j < d; ++j) {
        const T c = xv(i, j) - mean;
        var += c * c;
      }
      var /= T(static_cast<double>(d));
      using std::sqrt;
      const T is = T(1.0) / sqrt(var + T(eps));
      inv_std[static_cast<std::size_t>(i)] = is;
      for (Eigen::Index j = 0; j < d; ++j) xhat(i, j) = (xv(i, j) - mean) * is;
    }
    Matrix y = xhat;
    for (Eigen::Index i = 0; i < n; ++i) {
      y.row(i) = (xhat.row(i).array() * value(gamma).row(0).array() + value(beta).row(0).array())
                     .matrix();
    }
    Var out = push(std::move(y), needs(x) || needs(gamma) || needs(beta));
    on_backward(out, [this, x, gamma, beta, out, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)] {
      const Matrix& g = grad(out);
      const Eigen::Index n = g.rows(), d = g.cols();
      if (needs(gamma)) {
        nodes_[gamma.id].grad.row(0) += (g.array() * xhat.array()).colwise().sum().matrix();
      }
      if (needs(beta)) nodes_[beta.id].grad.row(0) += g.colwise().sum();
      if (!needs(x)) return;
      Matrix& gx = nodes_[x.id].grad;
      const auto gam = value(gamma).row(0);
      const T inv_d = T(1.0 / static_cast<double>(d));
      for (Eigen::Index i = 0; i < n; ++i) {
        T mean_g = T(0.0), mean_gx = T(0.0);
        for (Eigen::Index j = 0; j < d; ++j) {
          const T gh = g(i, j) * gam(j);
          mean_g += gh;
          mean_gx += gh * xhat(i, j);
        }
        mean_g *= inv_d;
        mean_gx *= inv_d;
        const T is = inv_std[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < d; ++j) {
          gx(i, j) += is * (g(i, j) * gam(j) - mean_g - xhat(i, j) * mean_gx);
        }
      }
    });
    return out;
  }

  /// Exact GELU, 0.5·x·(1 + erf(x/√2)).
  Var gelu(Var x) {
    using std::erf;
    Matrix r = value(x);
    for (Eigen::Index i = 0; i < r.size(); ++i) {
      const T xi = r.data()[i];
      r.data()[i] = T(0.5) * xi * (T(1.0) + erf(xi * T(std::numbers::sqrt2 / 2.0)));
    }
    Var out = push(std::move(r), needs(x));
    on_backward(out, [this, x, out] {
      using std::erf;
      using std::exp;
      const Matrix& xv = value(x);
      const Matrix& g = grad(out);
      Matrix& gx = nodes_[x.id].grad;
      const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
      for (Eigen::Index i = 0; i < xv.size(); ++i) {
        const T xi = xv.data()[i];
        const T cdf = T(0.5) * (T(1.0) + erf(xi * T(std::numbers::sqrt2 / 2.0)));
        const T pdf = exp(T(-0.5) * xi * xi) * T(inv_sqrt_2pi);
        gx.data()[i] += g.data()[i] * (cdf + xi * pdf);
      }
    });
    return out;
  }

  Var tanh(Var x) {
    using std::tanh;
    Matrix r = value(x);
    for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = tanh(r.data()[i]);
    Var out = push(std::move(r), needs(x));
    on_backward(out, [this, x, out] {
      const Matrix& y = value(out);
      const Matrix& g = grad(out);
      Matrix& gx = nodes_[x.id].grad;
      for (Eigen::Index i = 0; i < y.size(); ++i) {
        gx.data()[i] += g.data()[i] * (T(1.0) - y.data()[i] * y.data()[i]);
      }
    });
    return out;
  }

  /// Multi-head causal self-attention on packed projections.
  ///
  /// `qkv` is (S·L)×(3·d): S sequences of length L stacked, columns holding
  /// [queries | keys | values], each split into `heads` blocks of d/heads.
  /// Returns the (S·L)×d concatenated head outputs. When `capture` is non-null
  /// it receives S·heads row-stochastic L×L patterns (sequence-major).
  Var causal_attention(Var qkv, int seq_len, int heads, std::vector<Mat<double>>* capture) {
    const Matrix& in = value(qkv);
    const Eigen::Index L = seq_len;
    const Eigen::Index d = in.cols() / 3;
    const Eigen::Index dh = d / heads;
    const Eigen::Index S = in.rows() / L;
    const T scale = T(1.0 / std::sqrt(static_cast<double>(dh)));
    Matrix r = Matrix::Zero(in.rows(), d);
    std::vector<Matrix> patterns(static_cast<std::size_t>(S * heads));
    if (capture) capture->assign(patterns.size(), Mat<double>());
    for (Eigen::Index s = 0; s < S; ++s) {
      for (int h = 0; h < heads; ++h) {
        const auto q = in.block(s * L, h * dh, L, dh);
        const auto k = in.block(s * L, d + h * dh, L, dh);
        const auto v = in.block(s * L, 2 * d + h * dh, L, dh);
        Matrix a = (q * k.transpose()) * scale;
        causal_softmax(a);
        r.block(s * L, h * dh, L, dh).noalias() = a * v;
        const std::size_t idx = static_cast<std::size_t>(s * heads + h);
        if (capture) {
          Mat<double>& c = (*capture)[idx];
          c.resize(L, L);
          for (Eigen::Index i = 0; i < a.size(); ++i) c.data()[i] = value_of(a.data()[i]);
        }
        patterns[idx] = std::move(a);
      }
    }
    Var out = push(std::move(r), needs(qkv));
    on_backward(out, [this, qkv, out, L, d, dh, S, heads, scale,
                      patterns = std::move(patterns)] {
      const Matrix& in = value(qkv);
      const Matrix& g = grad(out);
      Matrix& gin = nodes_[qkv.id].grad;
      for (Eigen::Index s = 0; s < S; ++s) {
        for (int h = 0; h < heads; ++h) {
          const Matrix& a = patterns[static_cast<std::size_t>(s * heads + h)];
          const auto q = in.block(s * L, h * dh, L, dh);
          const auto k = in.block(s * L, d + h * dh, L, dh);
          const auto v = in.block(s * L, 2 * d + h * dh, L, dh);
          const auto go = g.block(s * L, h * dh, L, dh);
          Matrix da = go * v.transpose();
          gin.block(s * L, 2 * d + h * dh, L, dh).noalias() += a.transpose() * go;
          // Softmax backward, restricted to the causal support.
          for (Eigen::Index i = 0; i < L; ++i) {
            T dot = T(0.0);
            for (Eigen::Index j = 0; j <= i; ++j) dot += a(i, j) * da(i, j);
            for (Eigen::Index j = 0; j <= i; ++j) da(i, j) = a(i, j) * (da(i, j) - dot) * scale;
            for (Eigen::Index j = i + 1; j < L; ++j) da(i, j) = T(0.0);
          }
          gin.block(s * L, h * dh, L, dh).noalias() += da * k;
          gin.block(s * L, d + h * dh, L, dh).noalias() += da.transpose() * q;
        }
      }
    });
    return out;
  }

  /// Column `col` of the listed rows of x, as a (rows.size())×1 matrix.
  Var gather(Var x, std::vector<int> rows, int col) {
    Matrix r(static_cast<Eigen::Index>(rows.size()), 1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      r(static_cast<Eigen::Index>(i), 0) = value(x)(rows[i], col);
    }
    Var out = push(std::move(r), needs(x));
    on_backward(out, [this, x, out, rows = std::move(rows), col] {
      const Matrix& g = grad(out);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        nodes_[x.id].grad(rows[i], col) += g(static_cast<Eigen::Index>(i), 0);
      }
    });
    return out;
  }

  /// scale · Σᵢ (predᵢ − targetᵢ)², a 1×1 result.
  Var scaled_squared_error(Var pred, std::vector<double> target, double scale) {
    const Matrix& p = value(pred);
    assert(static_cast<std::size_t>(p.size()) == target.size());
    T acc = T(0.0);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const T e = p.data()[i] - T(target[static_cast<std::size_t>(i)]);
      acc += e * e;
    }
    Matrix r(1, 1);
    r(0, 0) = acc * T(scale);
    Var out = push(std::move(r), needs(pred));
    on_backward(out, [this, pred, out, target = std::move(target), scale] {
      const T g = grad(out)(0, 0) * T(2.0 * scale);
      const Matrix& p = value(pred);
      Matrix& gp = nodes_[pred.id].grad;
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        gp.data()[i] += g * (p.data()[i] - T(target[static_cast<std::size_t>(i)]));
      }
    });
    return out;
  }

  /// Seeds d(out)/d(out) = 1 for a 1×1 node and runs the reverse sweep.
  void backward(Var out) {
    assert(value(out).size() == 1);
    for (auto& n : nodes_) {
      if (n.needs_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    }
    nodes_[out.id].grad(0, 0) = T(1.0);
    for (int i = out.id; i >= 0; --i) {
      const auto idx = static_cast<std::size_t>(i);
      if (nodes_[idx].needs_grad && backprop_[idx]) backprop_[idx]();
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
  };

  Var push(Matrix value, bool needs_grad) {
    nodes_.push_back(Node{std::move(value), Matrix(), needs_grad});
    backprop_.emplace_back();
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }

  void on_backward(Var out, std::function<void()> fn) {
    if (needs(out)) backprop_[static_cast<std::size_t>(out.id)] = std::move(fn);
  }

  void accumulate(Var target, const Matrix& g) {
    if (needs(target)) nodes_[target.id].grad += g;
  }

  static void causal_softmax(Matrix& a) {
    using std::exp;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      T mx = a(i, 0);
      for (Eigen::Index j = 1; j <= i; ++j) mx = a(i, j) > mx ? a(i, j) : mx;
      T z = T(0.0);
      for (Eigen::Index j = 0; j <= i; ++j) {
        a(i, j) = exp(a(i, j) - mx);
        z += a(i, j);
      }
      for (Eigen::Index j = 0; j <= i; ++j) a(i, j) /= z;
      for (Eigen::Index j = i + 1; j < a.cols(); ++j) a(i, j) = T(0.0);
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::function<void()>> backprop_;
};

}  // namespace dgsc::ad
