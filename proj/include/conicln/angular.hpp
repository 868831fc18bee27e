#pragma once

#include <memory>

#include "conicln/core.hpp"

namespace conicln {

/// 1-D axisymmetric discretization of the spherical cap {phi < phi_max}.
/// Finite-volume cells between graded faces, unknowns at cell midpoints,
/// weight omega(phi) = sin(phi)^{n-2}. mass[k] is the exact cell measure;
/// cond[k] is the face conductance of the flux form. cond[0] = 0: the axis
/// flux vanishes with omega, which is the natural axis condition.
struct AngularGrid {
  int n = 3;
  double phi_max = 0;
  int node_count = 0;
  double grading = 2.0;
  vec faces;  // node_count+1, faces[0]=0, faces[N]=phi_max
  vec nodes;  // node_count, cell midpoints
  vec mass;   // node_count, exact integral of omega over each cell
  vec cond;   // node_count+1 face conductances; cond[0]=0
};

inline std::shared_ptr<const AngularGrid> build_grid(int n, double phi_max, int node_count,
                                                     double grading = 2.0) {
  if (n < 3) throw precondition_error("build_grid: n >= 3 required");
  if (!(phi_max > 0) || !(phi_max < M_PI))
    throw precondition_error("build_grid: phi_max must lie in (0, pi)");
  if (node_count < 8) throw precondition_error("build_grid: node_count >= 8 required");
  if (!(grading >= 1.0)) throw precondition_error("build_grid: grading >= 1 required");

  auto g = std::make_shared<AngularGrid>();
  g->n = n;
  g->phi_max = phi_max;
  g->node_count = node_count;
  g->grading = grading;
  const int N = node_count;
  g->faces.resize(N + 1);
  g->nodes.resize(N);
  g->mass.resize(N);
  g->cond.assign(N + 1, 0.0);

  // faces graded toward phi_max: phi(k) = phi_max*(1-(1-k/N)^grading)
  for (int k = 0; k <= N; ++k) {
    double u = 1.0 - double(k) / N;
    g->faces[k] = phi_max * (1.0 - std::pow(u, grading));
  }
  g->faces[0] = 0.0;
  g->faces[N] = phi_max;
  for (int k = 0; k < N; ++k) {
    double um = 1.0 - (double(k) + 0.5) / N;
    g->nodes[k] = phi_max * (1.0 - std::pow(um, grading));
  }

  auto omega = [n](double phi) { return std::pow(std::sin(phi), n - 2); };
  for (int k = 0; k < N; ++k)
    g->mass[k] = integrate_gl16(omega, g->faces[k], g->faces[k + 1]);

  for (int k = 1; k < N; ++k)
    g->cond[k] = omega(g->faces[k]) / (g->nodes[k] - g->nodes[k - 1]);
  // Dirichlet closure: boundary value sits on the last face.
  g->cond[N] = omega(phi_max) / (phi_max - g->nodes[N - 1]);
  return g;
}

/// Weighted L2 inner product sum(mass * f * g). Shared by operators, the
/// eigenproblem and all norms, so orthonormality and projections are
/// algebraically self-consistent.
inline double inner_product(const AngularGrid& g, const vec& f, const vec& h) {
  if (int(f.size()) != g.node_count || int(h.size()) != g.node_count)
    throw precondition_error("inner_product: field size mismatch");
  double acc = 0;
  for (int k = 0; k < g.node_count; ++k) acc += g.mass[k] * f[k] * h[k];
  return acc;
}

inline double weighted_l2_norm(const AngularGrid& g, const vec& f) {
  return std::sqrt(inner_product(g, f, f));
}

/// Flux-form Laplace-Beltrami: (1/m_k)[c_{k+1}(f_{k+1}-f_k) - c_k(f_k-f_{k-1})].
/// boundary_value closes the last flux at phi_max.
inline vec apply_laplacian(const AngularGrid& g, const vec& f, double boundary_value = 0.0) {
  const int N = g.node_count;
  if (int(f.size()) != N) throw precondition_error("apply_laplacian: field size mismatch");
  vec out(N);
  for (int k = 0; k < N; ++k) {
    double fl = (k == 0) ? 0.0 : g.cond[k] * (f[k] - f[k - 1]);
    double fr = (k == N - 1) ? g.cond[N] * (boundary_value - f[k])
                             : g.cond[k + 1] * (f[k + 1] - f[k]);
    out[k] = (fr - fl) / g.mass[k];
  }
  return out;
}

/// Tridiagonal rows of apply_laplacian with zero boundary value.
/// dl/du have length N with dl[0] and du[N-1] unused (kept zero).
struct TridiagMatrix {
  vec dl, d, du;  // each length N
};

inline TridiagMatrix laplacian_matrix(const AngularGrid& g) {
  const int N = g.node_count;
  TridiagMatrix T{vec(N, 0.0), vec(N, 0.0), vec(N, 0.0)};
  for (int k = 0; k < N; ++k) {
    double cl = g.cond[k], cr = g.cond[k + 1];
    T.d[k] = -(cl + cr) / g.mass[k];
    if (k > 0) T.dl[k] = cl / g.mass[k];
    if (k < N - 1) T.du[k] = cr / g.mass[k];
  }
  return T;
}

inline vec apply_tridiag(const TridiagMatrix& T, const vec& f) {
  const int N = int(T.d.size());
  vec out(N);
  for (int k = 0; k < N; ++k) {
    double acc = T.d[k] * f[k];
    if (k > 0) acc += T.dl[k] * f[k - 1];
    if (k < N - 1) acc += T.du[k] * f[k + 1];
    out[k] = acc;
  }
  return out;
}

// 3-point nonuniform first derivative. Even ghost across the axis;
// boundary_value used at phi_max (Dirichlet fields pass 0).
inline vec apply_derivative(const AngularGrid& g, const vec& f, double boundary_value = 0.0) {
  const int N = g.node_count;
  if (int(f.size()) != N) throw precondition_error("apply_derivative: field size mismatch");
  vec out(N);
  for (int k = 0; k < N; ++k) {
    double xm = (k == 0) ? -g.nodes[0] : g.nodes[k - 1];
    double xp = (k == N - 1) ? g.phi_max : g.nodes[k + 1];
    double fm = (k == 0) ? f[0] : f[k - 1];
    double fp = (k == N - 1) ? boundary_value : f[k + 1];
    double hm = g.nodes[k] - xm, hp = xp - g.nodes[k];
    out[k] = -hp / (hm * (hm + hp)) * fm + (hp - hm) / (hm * hp) * f[k] +
             hm / (hp * (hm + hp)) * fp;
  }
  return out;
}

/// Rows of apply_derivative with zero boundary value (tridiagonal).
inline TridiagMatrix derivative_matrix(const AngularGrid& g) {
  const int N = g.node_count;
  TridiagMatrix T{vec(N, 0.0), vec(N, 0.0), vec(N, 0.0)};
  for (int k = 0; k < N; ++k) {
    double xm = (k == 0) ? -g.nodes[0] : g.nodes[k - 1];
    double xp = (k == N - 1) ? g.phi_max : g.nodes[k + 1];
    double hm = g.nodes[k] - xm, hp = xp - g.nodes[k];
    double cm = -hp / (hm * (hm + hp));
    double c0 = (hp - hm) / (hm * hp);
    double cp = hm / (hp * (hm + hp));
    if (k == 0) {
      T.d[k] = c0 + cm;  // even ghost folds onto the diagonal
      T.du[k] = cp;
    } else if (k == N - 1) {
      T.dl[k] = cm;
      T.d[k] = c0;  // boundary value contributes nothing for Dirichlet fields
    } else {
      T.dl[k] = cm;
      T.d[k] = c0;
      T.du[k] = cp;
    }
  }
  return T;
}

/// One-sided second-order boundary derivative at phi_max from the last two
/// nodes and the boundary value.
inline double boundary_slope(const AngularGrid& g, const vec& f, double boundary_value = 0.0) {
  const int N = g.node_count;
  double d1 = g.phi_max - g.nodes[N - 1];
  double d2 = g.phi_max - g.nodes[N - 2];
  // derivative of the quadratic through (-d2, f[N-2]), (-d1, f[N-1]), (0, fb)
  double a = boundary_value;
  return (a * (d2 * d2 - d1 * d1) - d2 * d2 * f[N - 1] + d1 * d1 * f[N - 2]) /
         (d1 * d2 * (d2 - d1));
}

}  // namespace conicln
