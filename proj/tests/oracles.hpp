#pragma once

// Independent reference computations used by the tests: central finite
// differences and small closed-form solutions.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace oracle {

inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double x0 = x[i];
    x[i] = x0 + h;
    double fp = f(x);
    x[i] = x0 - h;
    double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

inline double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// ||a - b|| / max(||a||, ||b||), with a floor so exactly-zero gradients compare
/// absolutely.
inline double rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-8) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return norm(d) / std::max({norm(a), norm(b), floor});
}

inline std::vector<double> uniform(std::size_t n, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

/// Positive root of the scalar DARE P = a²P - (abP)²/(b²P + r) + q.
inline double scalar_dare(double a, double b, double q, double r) {
  // Multiply through by (b²P + r): b²P² + (r - a²r - qb²)P - qr = 0.
  double A = b * b, B = r - a * a * r - q * b * b, C = -q * r;
  return (-B + std::sqrt(B * B - 4 * A * C)) / (2 * A);
}

/// Eigenvalues of a symmetric 2x2 matrix from its characteristic polynomial.
inline std::pair<double, double> sym2_eigs(double a, double b, double d) {
  double tr = a + d, det = a * d - b * b;
  double disc = std::sqrt(tr * tr / 4 - det);
  return {tr / 2 - disc, tr / 2 + disc};
}

}  // namespace oracle
