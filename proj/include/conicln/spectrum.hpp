#pragma once

#include <memory>

#include "conicln/profile.hpp"

namespace conicln {

// Eigendecomposition of -(Lf) = -(laplacian f - (kappa/rho^2) f) with
// homogeneous Dirichlet data, in the cap-measure inner product.
// lambdas ascending and positive; gammas[i]^2 - beta^2 == lambdas[i] exactly
// as stored; eigenfields mass-orthonormal with a deterministic sign.
struct Spectrum {
  std::shared_ptr<const BoundaryProfile> profile;
  double kappa = 0;
  vec lambdas;
  vec gammas;
  std::vector<vec> eigenfields;
  int count = 0;
};

namespace detail {

// Exact energy identity with the finite-volume operator: the quadratic form
// of -L in solution coordinates.
inline double rayleigh_quotient(const BoundaryProfile& p, const vec& y) {
  const AngularGrid& g = *p.grid;
  const int N = g.node_count;
  double stiff = 0, pot = 0, mass = 0;
  for (int k = 0; k + 1 < N; ++k) {
    double d = y[k + 1] - y[k];
    stiff += g.cond[k + 1] * d * d;
  }
  stiff += g.cond[N] * y[N - 1] * y[N - 1];
  for (int k = 0; k < N; ++k) {
    pot += g.mass[k] * (p.consts.kappa / (p.rho[k] * p.rho[k])) * y[k] * y[k];
    mass += g.mass[k] * y[k] * y[k];
  }
  return (stiff + pot) / mass;
}

}  // namespace detail

inline Spectrum compute_spectrum(std::shared_ptr<const BoundaryProfile> profile, int count) {
  const BoundaryProfile& p = *profile;
  const AngularGrid& g = *p.grid;
  const int N = g.node_count;
  if (count < 1) throw precondition_error("count must be at least 1");
  if (count > N / 4)
    throw precondition_error("resolution: count exceeds node_count/4");

  // Symmetrized pencil: T = M^{-1/2} A M^{-1/2} with A the quadratic-form
  // matrix of -L and M the diagonal cell-mass matrix.
  vec sqm(N), d(N), e(N - 1);
  for (int k = 0; k < N; ++k) sqm[k] = std::sqrt(g.mass[k]);
  for (int k = 0; k < N; ++k) {
    double pot = p.consts.kappa / (p.rho[k] * p.rho[k]);
    d[k] = (g.cond[k] + g.cond[k + 1]) / g.mass[k] + pot;
  }
  for (int k = 0; k + 1 < N; ++k) e[k] = -g.cond[k + 1] / (sqm[k] * sqm[k + 1]);

  vec dw = d, ew = e, w(count);
  std::vector<double> z(static_cast<size_t>(N) * count);
  std::vector<lapack_int> isuppz(2 * static_cast<size_t>(count));
  lapack_int found = 0;
  lapack_int info = LAPACKE_dstevr(LAPACK_COL_MAJOR, 'V', 'I', N, dw.data(), ew.data(),
                                   0.0, 0.0, 1, count, 0.0, &found, w.data(), z.data(),
                                   N, isuppz.data());
  if (info != 0 || found != count)
    throw convergence_error("tridiagonal eigensolver failed", {});

  // Refine each pair: inverse iteration on the symmetrized system plus a
  // Rayleigh-quotient update in solution coordinates. The raw eigenvalues
  // carry absolute rounding of order eps * ||T||, which the huge boundary
  // potential makes visible; the energy quotient restores O(h^2) accuracy.
  Spectrum s;
  s.profile = std::move(profile);
  s.kappa = p.consts.kappa;
  s.count = count;
  s.lambdas.resize(count);
  s.gammas.resize(count);
  s.eigenfields.assign(count, vec(N));
  for (int i = 0; i < count; ++i) {
    vec zi(z.begin() + static_cast<size_t>(i) * N, z.begin() + static_cast<size_t>(i + 1) * N);
    double lam = w[i];
    for (int pass = 0; pass < 3; ++pass) {
      vec dl(e), du(e), dd(N);
      for (int k = 0; k < N; ++k) dd[k] = d[k] - lam;
      vec rhs = zi;
      try {
        solve_tridiag(dl, dd, du, rhs);
      } catch (const error&) {
        break;  // shift landed on an exact pivot; keep the current iterate
      }
      double nrm = 0;
      for (double v : rhs) nrm += v * v;
      nrm = std::sqrt(nrm);
      if (!(nrm > 0) || !std::isfinite(nrm)) break;
      for (int k = 0; k < N; ++k) zi[k] = rhs[k] / nrm;
      vec y(N);
      for (int k = 0; k < N; ++k) y[k] = zi[k] / sqm[k];
      lam = detail::rayleigh_quotient(p, y);
    }
    for (int k = 0; k < N; ++k) s.eigenfields[i][k] = zi[k] / sqm[k];
    s.lambdas[i] = lam;
  }

  // Modified Gram-Schmidt in the mass inner product keeps orthonormality at
  // machine precision without disturbing the refined pairs.
  for (int i = 0; i < count; ++i) {
    vec& yi = s.eigenfields[i];
    for (int j = 0; j < i; ++j) {
      double c = inner_product(g, yi, s.eigenfields[j]);
      for (int k = 0; k < N; ++k) yi[k] -= c * s.eigenfields[j][k];
    }
    double nrm = std::sqrt(inner_product(g, yi, yi));
    for (int k = 0; k < N; ++k) yi[k] /= nrm;
    s.lambdas[i] = detail::rayleigh_quotient(p, yi);

    // deterministic sign: first component of magnitude above 1e-6 positive
    for (int k = 0; k < N; ++k) {
      if (std::abs(yi[k]) > 1e-6) {
        if (yi[k] < 0)
          for (int q = 0; q < N; ++q) yi[q] = -yi[q];
        break;
      }
    }
  }

  for (int i = 0; i < count; ++i) {
    if (!(s.lambdas[i] > 0)) throw domain_error("nonpositive eigenvalue");
    if (i > 0 && !(s.lambdas[i] >= s.lambdas[i - 1]))
      throw domain_error("eigenvalues out of order after refinement");
    double beta = p.consts.beta;
    s.gammas[i] = std::sqrt(s.lambdas[i] + beta * beta);
    s.lambdas[i] = s.gammas[i] * s.gammas[i] - beta * beta;  // bijection exact as stored
  }
  if (count >= 2 && s.lambdas[1] - s.lambdas[0] <= 1e-8 * std::max(1.0, s.lambdas[1]))
    throw domain_error("first eigenvalue not simple");
  return s;
}

inline Spectrum compute_spectrum(BoundaryProfile profile, int count) {
  return compute_spectrum(std::make_shared<const BoundaryProfile>(std::move(profile)), count);
}

// Cluster id per eigenvalue under the declared multiplicity rule: adjacent
// eigenvalues with relative gap below 1e-8 belong to one block.
inline std::vector<int> multiplicity_blocks(const Spectrum& s) {
  std::vector<int> block(s.count, 0);
  for (int i = 1; i < s.count; ++i) {
    bool close = s.lambdas[i] - s.lambdas[i - 1] <= 1e-8 * std::max(1.0, std::abs(s.lambdas[i]));
    block[i] = close ? block[i - 1] : block[i - 1] + 1;
  }
  return block;
}

// Log-log slope of |f| against rho over the resolved boundary decade.
inline double decay_slope_of_field(const Spectrum& s, const vec& f) {
  const BoundaryProfile& p = *s.profile;
  const AngularGrid& g = *p.grid;
  const int N = g.node_count;
  if (static_cast<int>(f.size()) != N) throw precondition_error("field size mismatch");
  double sup = sup_abs(f);
  if (!(sup > 0)) throw domain_error("zero field has no decay slope");
  auto collect = [&](double lo, double hi) {
    std::vector<double> xs, ys;
    for (int k = 0; k < N; ++k) {
      double dist = g.phi_max - g.nodes[k];
      if (dist < lo || dist > hi) continue;
      if (std::abs(f[k]) < 1e-300 || p.rho[k] <= 0) continue;
      xs.push_back(std::log(p.rho[k]));
      ys.push_back(std::log(std::abs(f[k])));
    }
    return std::pair(xs, ys);
  };
  auto [xs, ys] = collect(1e-3 * g.phi_max, 1e-2 * g.phi_max);
  if (xs.size() < 6) std::tie(xs, ys) = collect(1e-3 * g.phi_max, 3e-2 * g.phi_max);
  if (xs.size() < 6) throw domain_error("boundary decade unresolved for decay fit");
  return fit_line(xs, ys).slope;
}

inline double eigen_decay_slope(const Spectrum& s, int i) {
  if (i < 0 || i >= s.count) throw precondition_error("eigenfield index out of range");
  return decay_slope_of_field(s, s.eigenfields[i]);
}

// Coefficients <f, phi_i> for i = 0..upto-1; the partial sum is the best
// weighted-L2 approximation of f in that span.
inline vec project(const Spectrum& s, const vec& f, int upto) {
  if (upto < 0 || upto > s.count) throw precondition_error("projection range exceeds count");
  if (static_cast<int>(f.size()) != s.profile->grid->node_count)
    throw precondition_error("field size mismatch");
  vec c(upto);
  for (int i = 0; i < upto; ++i) c[i] = inner_product(*s.profile->grid, f, s.eigenfields[i]);
  return c;
}

}  // namespace conicln
