#pragma once

#include <cmath>

namespace uex {

/// Forward-mode dual number. Running the hand-written backward passes on
/// Dual<T> yields Hessian-vector products (forward-over-reverse).
template <class T>
struct Dual {
  T v{};
  T d{};

  constexpr Dual() = default;
  constexpr Dual(T value) : v(value) {}  // NOLINT: implicit by design of scalar code
  constexpr Dual(T value, T tangent) : v(value), d(tangent) {}

  Dual& operator+=(const Dual& o) {
    v += o.v;
    d += o.d;
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    v -= o.v;
    d -= o.d;
    return *this;
  }
  Dual& operator*=(const Dual& o) {
    d = d * o.v + v * o.d;
    v *= o.v;
    return *this;
  }
  Dual& operator/=(const Dual& o) {
    d = (d * o.v - v * o.d) / (o.v * o.v);
    v /= o.v;
    return *this;
  }

  friend Dual operator+(Dual a, const Dual& b) { return a += b; }
  friend Dual operator-(Dual a, const Dual& b) { return a -= b; }
  friend Dual operator*(Dual a, const Dual& b) { return a *= b; }
  friend Dual operator/(Dual a, const Dual& b) { return a /= b; }
  friend Dual operator-(const Dual& a) { return {-a.v, -a.d}; }

  friend bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
  friend bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
  friend bool operator<=(const Dual& a, const Dual& b) { return a.v <= b.v; }
  friend bool operator>=(const Dual& a, const Dual& b) { return a.v >= b.v; }
  friend bool operator==(const Dual& a, const Dual& b) { return a.v == b.v && a.d == b.d; }

  friend Dual exp(const Dual& a) {
    const T e = std::exp(a.v);
    return {e, e * a.d};
  }
  friend Dual log(const Dual& a) { return {std::log(a.v), a.d / a.v}; }
  friend Dual sqrt(const Dual& a) {
    const T s = std::sqrt(a.v);
    return {s, a.d / (T(2) * s)};
  }
  friend Dual tanh(const Dual& a) {
    const T t = std::tanh(a.v);
    return {t, (T(1) - t * t) * a.d};
  }
};

template <class T>
struct ScalarTraits {
  using Real = T;
  static T primal(T x) { return x; }
  static T tangent(T) { return T(0); }
  static T make(Real v, Real) { return v; }
};

template <class T>
struct ScalarTraits<Dual<T>> {
  using Real = T;
  static T primal(const Dual<T>& x) { return x.v; }
  static T tangent(const Dual<T>& x) { return x.d; }
  static Dual<T> make(T v, T d) { return {v, d}; }
};

template <class T>
auto primal(const T& x) {
  return ScalarTraits<T>::primal(x);
}

template <class T>
bool is_finite(const T& x) {
  return std::isfinite(static_cast<double>(primal(x)));
}

}  // namespace uex
