#include "dgsc/tiny_mlp.hpp"

#include "dgsc/errors.hpp"
#include "dgsc/tape.hpp"

namespace dgsc {

namespace {

template <class T>
GradResult run(const Layout& layout, std::span<const double> params, const double* tangent,
               bool want_grad, const DataBatch& batch) {
  ad::Tape<T> tape;
  std::vector<ad::Var> leaves;
  for (const Segment& seg : layout.segments()) {
    const auto rows = seg.shape.size() == 2 ? static_cast<Eigen::Index>(seg.shape[0]) : 1;
    ad::Mat<T> m(rows, static_cast<Eigen::Index>(seg.shape.back()));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const std::size_t flat = seg.offset + static_cast<std::size_t>(i);
      if constexpr (std::is_same_v<T, ad::Dual>) {
        m.data()[i] = ad::Dual(params[flat], tangent ? tangent[flat] : 0.0);
      } else {
        m.data()[i] = params[flat];
      }
    }
    leaves.push_back(want_grad ? tape.param(std::move(m)) : tape.constant(std::move(m)));
  }
  std::size_t rows = 0;
  for (const auto& c : batch.contexts) rows += c.length();
  ad::Mat<T> x(static_cast<Eigen::Index>(rows), 2);
  std::vector<double> y;
  y.reserve(rows);
  Eigen::Index r = 0;
  for (const auto& c : batch.contexts) {
    for (std::size_t k = 0; k < c.length(); ++k, ++r) {
      x(r, 0) = T(c.xs[k][0]);
      x(r, 1) = T(c.xs[k][1]);
      y.push_back(c.ys[k]);
    }
  }
  ad::Var xv = tape.constant(std::move(x));
  ad::Var h = tape.tanh(tape.add_row(tape.matmul_nt(xv, leaves[0]), leaves[1]));
  ad::Var pred = tape.matmul_nt(h, leaves[2]);
  ad::Var loss = tape.scaled_squared_error(pred, std::move(y), 1.0 / static_cast<double>(rows));
  GradResult out;
  out.loss = ad::value_of(tape.value(loss)(0, 0));
  if (!want_grad) return out;
  tape.backward(loss);
  out.grad.assign(layout.size(), 0.0);
  for (std::size_t s = 0; s < leaves.size(); ++s) {
    const auto& g = tape.grad(leaves[s]);
    const std::size_t off = layout.segments()[s].offset;
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      if constexpr (std::is_same_v<T, ad::Dual>) {
        out.grad[off + static_cast<std::size_t>(i)] = g.data()[i].d;
      } else {
        out.grad[off + static_cast<std::size_t>(i)] = g.data()[i];
      }
    }
  }
  return out;
}

}  // namespace

TinyMlp::TinyMlp() {
  layout_.add("w1", {3, 2});
  layout_.add("b1", {3});
  layout_.add("w2", {1, 3});
}

void TinyMlp::check_batch(const DataBatch& batch) const {
  LossModel::check_batch(batch);
  for (const auto& c : batch.contexts) {
    if (c.xs.size() != c.ys.size()) throw ShapeError("context has mismatched xs/ys");
    for (const auto& x : c.xs) {
      if (x.size() != 2) throw ShapeError("tiny-mlp expects D = 2 inputs");
    }
  }
}

double TinyMlp::do_loss(std::span<const double> params, const DataBatch& batch) const {
  return run<double>(layout_, params, nullptr, false, batch).loss;
}

GradResult TinyMlp::do_value_and_grad(std::span<const double> params,
                                      const DataBatch& batch) const {
  return run<double>(layout_, params, nullptr, true, batch);
}

std::vector<double> TinyMlp::do_hvp(std::span<const double> params, const DataBatch& batch,
                                    std::span<const double> v) const {
  return run<ad::Dual>(layout_, params, v.data(), true, batch).grad;
}

}  // namespace dgsc
