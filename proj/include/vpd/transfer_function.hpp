#pragma once
// Polynomial arithmetic and rational transfer functions in the Laplace
// variable s.  Coefficient lists are real and ordered by descending power.

#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

namespace vpd {

using cplx = std::complex<double>;
using Poly = std::vector<double>;  // descending powers of s

struct UnboundedValueError : std::runtime_error {
  explicit UnboundedValueError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// polynomial helpers
// ---------------------------------------------------------------------------

// Remove (numerically) zero leading coefficients; keeps at least one entry.
inline Poly poly_trim(Poly p, double rel_tol = 0.0) {
  double scale = 0.0;
  for (double c : p) scale = std::max(scale, std::abs(c));
  std::size_t i = 0;
  while (i + 1 < p.size() && std::abs(p[i]) <= rel_tol * scale) ++i;
  p.erase(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(i));
  if (p.empty()) p = {0.0};
  return p;
}

inline int poly_degree(const Poly& p) {
  return static_cast<int>(poly_trim(p).size()) - 1;
}

inline double poly_max_abs_coeff(const Poly& p) {
  double m = 0.0;
  for (double c : p) m = std::max(m, std::abs(c));
  return m;
}

// Horner evaluation at complex s.
inline cplx poly_eval(const Poly& p, cplx s) {
  cplx acc = 0.0;
  for (double c : p) acc = acc * s + c;
  return acc;
}

// Scale used to decide whether a Horner result is "numerically zero":
// sum of |a_i| |s|^(n-i), i.e. the evaluation with all cancellation removed.
inline double poly_eval_scale(const Poly& p, cplx s) {
  double acc = 0.0;
  double as = std::abs(s);
  for (double c : p) acc = acc * as + std::abs(c);
  return acc;
}

inline Poly poly_scale(Poly p, double k) {
  for (double& c : p) c *= k;
  return p;
}

inline Poly poly_add(const Poly& a, const Poly& b) {
  Poly r(std::max(a.size(), b.size()), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) r[r.size() - a.size() + i] += a[i];
  for (std::size_t i = 0; i < b.size(); ++i) r[r.size() - b.size() + i] += b[i];
  return r;
}

inline Poly poly_mul(const Poly& a, const Poly& b) {
  Poly r(a.size() + b.size() - 1, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) r[i + j] += a[i] * b[j];
  return r;
}

inline Poly poly_derivative(const Poly& p) {
  Poly q = poly_trim(p);
  if (q.size() <= 1) return {0.0};
  Poly r(q.size() - 1);
  int n = static_cast<int>(q.size()) - 1;
  for (int i = 0; i < n; ++i) r[static_cast<std::size_t>(i)] = q[static_cast<std::size_t>(i)] * (n - i);
  return r;
}

struct PolyDivision {
  Poly quotient;
  Poly remainder;
};

// Long division: numerator = quotient * divisor + remainder.
inline PolyDivision poly_divide(const Poly& numerator, const Poly& divisor) {
  Poly n = poly_trim(numerator);
  Poly d = poly_trim(divisor);
  if (d.size() == 1 && d[0] == 0.0) throw std::domain_error("poly_divide: division by zero polynomial");
  if (n.size() < d.size()) return {{0.0}, n};
  Poly q(n.size() - d.size() + 1, 0.0);
  Poly r = n;
  for (std::size_t i = 0; i < q.size(); ++i) {
    double coeff = r[i] / d[0];
    q[i] = coeff;
    for (std::size_t j = 0; j < d.size(); ++j) r[i + j] -= coeff * d[j];
  }
  r.erase(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(q.size()));
  if (r.empty()) r = {0.0};
  return {q, r};
}

// Real polynomial from complex roots.  Imaginary residue of the product must
// vanish (conjugate-paired roots); it is checked against a relative tolerance.
inline Poly poly_from_roots(const std::vector<cplx>& roots) {
  std::vector<cplx> p = {1.0};
  for (cplx r : roots) {
    std::vector<cplx> q(p.size() + 1, 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      q[i] += p[i];
      q[i + 1] -= p[i] * r;
    }
    p = std::move(q);
  }
  double scale = 0.0;
  for (cplx c : p) scale = std::max(scale, std::abs(c));
  Poly out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (std::abs(p[i].imag()) > 1e-9 * scale)
      throw std::domain_error("poly_from_roots: roots are not closed under conjugation");
    out[i] = p[i].real();
  }
  return out;
}

// All roots of a real polynomial via the balanced companion matrix.
inline std::vector<cplx> poly_roots(const Poly& p) {
  Poly q = poly_trim(p);
  int n = static_cast<int>(q.size()) - 1;
  if (n < 1) return {};
  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) companion(0, i) = -q[static_cast<std::size_t>(i + 1)] / q[0];
  for (int i = 1; i < n; ++i) companion(i, i - 1) = 1.0;
  Eigen::EigenSolver<Eigen::MatrixXd> es(companion, /*computeEigenvectors=*/false);
  if (es.info() != Eigen::Success) throw std::runtime_error("poly_roots: eigensolver failed");
  std::vector<cplx> roots(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) roots[static_cast<std::size_t>(i)] = es.eigenvalues()(i);
  return roots;
}

// ---------------------------------------------------------------------------
// rational transfer function
// ---------------------------------------------------------------------------

struct RationalTransferFunction {
  Poly numerator_coefficients;
  Poly denominator_coefficients;

  RationalTransferFunction() : numerator_coefficients{0.0}, denominator_coefficients{1.0} {}
  RationalTransferFunction(Poly num, Poly den)
      : numerator_coefficients(std::move(num)), denominator_coefficients(std::move(den)) {
    if (poly_trim(denominator_coefficients) == Poly{0.0})
      throw std::domain_error("RationalTransferFunction: zero denominator");
  }

  int numerator_degree() const { return poly_degree(numerator_coefficients); }
  int denominator_degree() const { return poly_degree(denominator_coefficients); }
  bool is_proper() const { return numerator_degree() <= denominator_degree(); }
  bool is_strictly_proper() const { return numerator_degree() < denominator_degree(); }
};

// Build a transfer function from gain and root sets.
inline RationalTransferFunction tf_from_zpk(const std::vector<cplx>& zeros,
                                            const std::vector<cplx>& poles, double gain) {
  return {poly_scale(poly_from_roots(zeros), gain), poly_from_roots(poles)};
}

// num(s)/den(s) by Horner evaluation.  Evaluation at (numerically) a pole
// raises UnboundedValueError unless the caller opts into an infinity result.
inline cplx evaluate(const RationalTransferFunction& tf, cplx s, bool allow_unbounded = false) {
  cplx den = poly_eval(tf.denominator_coefficients, s);
  double den_scale = poly_eval_scale(tf.denominator_coefficients, s);
  if (std::abs(den) <= 1e-12 * den_scale) {
    if (allow_unbounded) return {std::numeric_limits<double>::infinity(), 0.0};
    throw UnboundedValueError("evaluate: s is a pole of the transfer function");
  }
  return poly_eval(tf.numerator_coefficients, s) / den;
}

inline cplx reciprocal_evaluate(const RationalTransferFunction& tf, cplx s) {
  // den(s)/num(s); finite wherever the numerator does not vanish.
  cplx num = poly_eval(tf.numerator_coefficients, s);
  double num_scale = poly_eval_scale(tf.numerator_coefficients, s);
  if (std::abs(num) <= 1e-14 * num_scale)
    throw UnboundedValueError("reciprocal_evaluate: s is a zero of the transfer function");
  return poly_eval(tf.denominator_coefficients, s) / num;
}

}  // namespace vpd
