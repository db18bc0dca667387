#pragma once

#include <cmath>
#include <numbers>
#include <ostream>

#include <Eigen/Core>

namespace dgsc::ad {

/// First-order dual number v + d·ε with ε² = 0.
///
/// Running a reverse-mode sweep with Dual scalars, with parameter tangents set
/// to a direction v, yields forward-over-reverse: the tangent part of the
/// gradient is the Hessian-vector product H·v.
struct Dual {
  double v = 0.0;
  double d = 0.0;

  constexpr Dual() = default;
  constexpr Dual(double value) : v(value) {}  // NOLINT: implicit by design of a scalar type
  constexpr Dual(double value, double tangent) : v(value), d(tangent) {}

  Dual& operator+=(const Dual& o) { v += o.v; d += o.d; return *this; }
  Dual& operator-=(const Dual& o) { v -= o.v; d -= o.d; return *this; }
  Dual& operator*=(const Dual& o) { d = d * o.v + v * o.d; v *= o.v; return *this; }
  Dual& operator/=(const Dual& o) {
    const double inv = 1.0 / o.v;
    d = (d - v * inv * o.d) * inv;
    v *= inv;
    return *this;
  }
};

inline Dual operator+(Dual a, const Dual& b) { return a += b; }
inline Dual operator-(Dual a, const Dual& b) { return a -= b; }
inline Dual operator*(Dual a, const Dual& b) { return a *= b; }
inline Dual operator/(Dual a, const Dual& b) { return a /= b; }
inline Dual operator-(const Dual& a) { return {-a.v, -a.d}; }
inline Dual operator+(const Dual& a) { return a; }

inline bool operator==(const Dual& a, const Dual& b) { return a.v == b.v; }
inline bool operator!=(const Dual& a, const Dual& b) { return a.v != b.v; }
inline bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
inline bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
inline bool operator<=(const Dual& a, const Dual& b) { return a.v <= b.v; }
inline bool operator>=(const Dual& a, const Dual& b) { return a.v >= b.v; }

inline Dual sqrt(const Dual& a) {
  const double s = std::sqrt(a.v);
  return {s, a.d / (2.0 * s)};
}
inline Dual exp(const Dual& a) {
  const double e = std::exp(a.v);
  return {e, a.d * e};
}
inline Dual log(const Dual& a) { return {std::log(a.v), a.d / a.v}; }
inline Dual tanh(const Dual& a) {
  const double t = std::tanh(a.v);
  return {t, a.d * (1.0 - t * t)};
}
inline Dual erf(const Dual& a) {
  return {std::erf(a.v), a.d * (2.0 / std::sqrt(std::numbers::pi)) * std::exp(-a.v * a.v)};
}
inline Dual abs(const Dual& a) { return a.v < 0 ? -a : a; }
inline Dual pow(const Dual& a, int n) {
  const double p = std::pow(a.v, n - 1);
  return {p * a.v, a.d * n * p};
}
inline bool isfinite(const Dual& a) { return std::isfinite(a.v) && std::isfinite(a.d); }

inline std::ostream& operator<<(std::ostream& os, const Dual& a) {
  return os << a.v << "+" << a.d << "e";
}

/// Value part of a scalar, for T ∈ {double, Dual}.
inline double value_of(double x) { return x; }
inline double value_of(const Dual& x) { return x.v; }
inline double tangent_of(double) { return 0.0; }
inline double tangent_of(const Dual& x) { return x.d; }

}  // namespace dgsc::ad

namespace Eigen {

template <>
struct NumTraits<dgsc::ad::Dual> : GenericNumTraits<dgsc::ad::Dual> {
  using Real = dgsc::ad::Dual;
  using NonInteger = dgsc::ad::Dual;
  using Nested = dgsc::ad::Dual;
  using Literal = dgsc::ad::Dual;
  enum {
    IsComplex = 0,
    IsInteger = 0,
    IsSigned = 1,
    RequireInitialization = 1,
    ReadCost = 2,
    AddCost = 2,
    MulCost = 4
  };
  static inline Real epsilon() { return NumTraits<double>::epsilon(); }
  static inline Real dummy_precision() { return NumTraits<double>::dummy_precision(); }
  static inline Real highest() { return NumTraits<double>::highest(); }
  static inline Real lowest() { return NumTraits<double>::lowest(); }
  static inline int digits10() { return NumTraits<double>::digits10(); }
};

template <typename BinaryOp>
struct ScalarBinaryOpTraits<dgsc::ad::Dual, double, BinaryOp> {
  using ReturnType = dgsc::ad::Dual;
};
template <typename BinaryOp>
struct ScalarBinaryOpTraits<double, dgsc::ad::Dual, BinaryOp> {
  using ReturnType = dgsc::ad::Dual;
};

}  // namespace Eigen
