#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <lapacke.h>

namespace conicln {

using vec = std::vector<double>;

// Errors carry the process exit code used by the CLI:
// 2 config, 3 precondition, 4 convergence, 5 oracle.
struct error : std::runtime_error {
  int code;
  error(int c, const std::string& m) : std::runtime_error(m), code(c) {}
};
struct config_error : error {
  explicit config_error(const std::string& m) : error(2, m) {}
};
struct precondition_error : error {
  explicit precondition_error(const std::string& m) : error(3, m) {}
};
// Positivity/domain violations are precondition failures of the operation.
struct domain_error : precondition_error {
  explicit domain_error(const std::string& m) : precondition_error(m) {}
};
// Solvability obstruction of a shifted angular solve at a resonant rate with
// non-orthogonal data. Expected control signal for the expansion builder.
struct fredholm_obstruction : precondition_error {
  explicit fredholm_obstruction(const std::string& m) : precondition_error(m) {}
};
struct convergence_error : error {
  vec residual_history;
  convergence_error(const std::string& m, vec hist = {})
      : error(4, m), residual_history(std::move(hist)) {}
};
struct oracle_error : error {
  explicit oracle_error(const std::string& m) : error(5, m) {}
};

/// Closed-form constants of the equation for ambient dimension n.
/// Identities: s*(s-1) == kappa, s == beta + 2, p == s/beta for n > 2.
struct equation_constants {
  int n;
  double beta;   // (n-2)/2
  double S;      // (n-2)/2
  double kappa;  // n(n+2)/4
  double s;      // (n+2)/2
  double p;      // (n+2)/(n-2)
};

inline equation_constants constants_for(int n) {
  if (n < 3) throw precondition_error("dimension n must be >= 3, got " + std::to_string(n));
  equation_constants c;
  c.n = n;
  c.beta = 0.5 * (n - 2);
  c.S = 0.5 * (n - 2);
  c.kappa = 0.25 * double(n) * (n + 2);
  c.s = 0.5 * (n + 2);
  c.p = double(n + 2) / double(n - 2);
  return c;
}

// Gauss-Legendre nodes/weights on [-1,1], computed once by Newton iteration
// on the Legendre recurrence; machine accurate, deterministic.
inline const std::pair<vec, vec>& gauss_legendre_16() {
  static const std::pair<vec, vec> table = [] {
    const int m = 16;
    vec x(m), w(m);
    for (int i = 0; i < m; ++i) {
      double t = std::cos(M_PI * (i + 0.75) / (m + 0.5));
      for (int it = 0; it < 100; ++it) {
        double p0 = 1.0, p1 = t;
        for (int k = 2; k <= m; ++k) {
          double p2 = ((2 * k - 1) * t * p1 - (k - 1) * p0) / k;
          p0 = p1;
          p1 = p2;
        }
        double dp = m * (t * p1 - p0) / (t * t - 1.0);
        double dt = -p1 / dp;
        t += dt;
        if (std::abs(dt) < 1e-15) break;
      }
      double p0 = 1.0, p1 = t;
      for (int k = 2; k <= m; ++k) {
        double p2 = ((2 * k - 1) * t * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      double dp = m * (t * p1 - p0) / (t * t - 1.0);
      x[i] = t;
      w[i] = 2.0 / ((1.0 - t * t) * dp * dp);
    }
    return std::make_pair(x, w);
  }();
  return table;
}

/// integral of f over [a,b] by 16-point Gauss-Legendre.
template <class F>
double integrate_gl16(F&& f, double a, double b) {
  const auto& [x, w] = gauss_legendre_16();
  double mid = 0.5 * (a + b), half = 0.5 * (b - a), acc = 0.0;
  for (size_t i = 0; i < x.size(); ++i) acc += w[i] * f(mid + half * x[i]);
  return acc * half;
}

struct line_fit_result {
  double slope = 0, intercept = 0;
  int points = 0;
};

/// Least-squares line through (x_i, y_i).
inline line_fit_result fit_line(const vec& x, const vec& y) {
  line_fit_result r;
  r.points = int(x.size());
  if (x.size() != y.size() || x.size() < 2)
    throw precondition_error("fit_line: need >= 2 matched points, got " + std::to_string(x.size()));
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  double nn = double(x.size());
  double det = nn * sxx - sx * sx;
  r.slope = (nn * sxy - sx * sy) / det;
  r.intercept = (sy * sxx - sx * sxy) / det;
  return r;
}

/// Solve a general tridiagonal system in place; b becomes the solution.
/// dl, d, du are copied (LAPACK overwrites its inputs).
inline void solve_tridiag(vec dl, vec d, vec du, vec& b) {
  lapack_int n = lapack_int(d.size());
  lapack_int info = LAPACKE_dgtsv(LAPACK_COL_MAJOR, n, 1, dl.data(), d.data(), du.data(),
                                  b.data(), n);
  if (info != 0)
    throw convergence_error("tridiagonal solve failed, dgtsv info=" + std::to_string(info));
}

inline double sup_abs(const vec& v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace conicln
