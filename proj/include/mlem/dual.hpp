#pragma once

#include <cmath>
#include <type_traits>

namespace mlem {

/// First-order forward-mode dual number: `val + d * eps` with `eps^2 = 0`.
///
/// Drift fields are written once as templates over the scalar type and
/// evaluated with `Dual<double>` to obtain Jacobian-vector products.
template <class T = double>
struct Dual {
  T val{0};
  T d{0};

  constexpr Dual() = default;
  constexpr Dual(T v) : val(v) {}  // NOLINT: implicit lift of constants
  constexpr Dual(T v, T dv) : val(v), d(dv) {}

  constexpr Dual& operator+=(const Dual& o) {
    val += o.val;
    d += o.d;
    return *this;
  }
  constexpr Dual& operator-=(const Dual& o) {
    val -= o.val;
    d -= o.d;
    return *this;
  }
  constexpr Dual& operator*=(const Dual& o) {
    d = d * o.val + val * o.d;
    val *= o.val;
    return *this;
  }
  constexpr Dual& operator/=(const Dual& o) {
    d = (d * o.val - val * o.d) / (o.val * o.val);
    val /= o.val;
    return *this;
  }
};

template <class T> constexpr Dual<T> operator-(const Dual<T>& a) { return {-a.val, -a.d}; }
template <class T> constexpr Dual<T> operator+(Dual<T> a, const Dual<T>& b) { return a += b; }
template <class T> constexpr Dual<T> operator-(Dual<T> a, const Dual<T>& b) { return a -= b; }
template <class T> constexpr Dual<T> operator*(Dual<T> a, const Dual<T>& b) { return a *= b; }
template <class T> constexpr Dual<T> operator/(Dual<T> a, const Dual<T>& b) { return a /= b; }

template <class T> constexpr Dual<T> operator+(Dual<T> a, T b) { a.val += b; return a; }
template <class T> constexpr Dual<T> operator+(T b, Dual<T> a) { a.val += b; return a; }
template <class T> constexpr Dual<T> operator-(Dual<T> a, T b) { a.val -= b; return a; }
template <class T> constexpr Dual<T> operator-(T b, const Dual<T>& a) { return {b - a.val, -a.d}; }
template <class T> constexpr Dual<T> operator*(const Dual<T>& a, T b) { return {a.val * b, a.d * b}; }
template <class T> constexpr Dual<T> operator*(T b, const Dual<T>& a) { return {a.val * b, a.d * b}; }
template <class T> constexpr Dual<T> operator/(const Dual<T>& a, T b) { return {a.val / b, a.d / b}; }
template <class T> constexpr Dual<T> operator/(T b, const Dual<T>& a) {
  return {b / a.val, -b * a.d / (a.val * a.val)};
}

template <class T> constexpr bool operator<(const Dual<T>& a, const Dual<T>& b) { return a.val < b.val; }
template <class T> constexpr bool operator>(const Dual<T>& a, const Dual<T>& b) { return a.val > b.val; }

template <class T> Dual<T> exp(const Dual<T>& a) {
  const T e = std::exp(a.val);
  return {e, e * a.d};
}
template <class T> Dual<T> log(const Dual<T>& a) { return {std::log(a.val), a.d / a.val}; }
template <class T> Dual<T> sin(const Dual<T>& a) { return {std::sin(a.val), std::cos(a.val) * a.d}; }
template <class T> Dual<T> cos(const Dual<T>& a) { return {std::cos(a.val), -std::sin(a.val) * a.d}; }
template <class T> Dual<T> tanh(const Dual<T>& a) {
  const T th = std::tanh(a.val);
  return {th, (1 - th * th) * a.d};
}
template <class T> Dual<T> sqrt(const Dual<T>& a) {
  const T s = std::sqrt(a.val);
  return {s, a.d / (2 * s)};
}

template <class T> struct is_dual : std::false_type {};
template <class T> struct is_dual<Dual<T>> : std::true_type {};

/// Value part of a plain or dual scalar.
template <class S>
constexpr double value_of(const S& s) {
  if constexpr (is_dual<S>::value) {
    return s.val;
  } else {
    return static_cast<double>(s);
  }
}

}  // namespace mlem
