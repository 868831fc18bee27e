#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "conicln/cylinder.hpp"

namespace conicln {

// One summand t^j e^{-gamma t} w(phi) of an approximate solution written as
// profile + corrections. j > 0 can only arise from resonant corrections.
struct ExpTerm {
  double gamma = 0;
  int j = 0;
  vec w;
};

// Everything the expansion dropped, with sup bounds in the weighted norm
// sup e^{mu t} rho^{2-s} |.| over t >= t0. dropped_norm covers enumerated
// products whose rate landed at or above mu; taylor_tail covers all powers
// beyond taylor_degree via the geometric envelope |omega| <= E(phi) e^{-g1 t}.
struct expansion_certificate {
  double dropped_norm = 0;
  double taylor_tail = 0;
  int taylor_degree = 0;
  double omega_ratio = 0;  // sup |omega| / xi at t = t0; must stay < 1
};

struct Expansion {
  std::shared_ptr<const BoundaryProfile> profile;
  IndexChain chain;
  std::vector<ExpTerm> terms;  // sorted by (gamma, j); keys unique
  double order_achieved = 0;
  std::vector<std::string> warnings;
};

struct residual_terms {
  std::vector<ExpTerm> families;  // rates < mu, sorted by (gamma, j)
  expansion_certificate certificate;
};

/// Coefficients of (1+x)^p for p = (n+2)/(n-2): returns a with a[k] the
/// generalized binomial coefficient, k = 0..K. Exact zeros appear past
/// integer p.
inline vec taylor_coeffs(int n, int K) {
  if (n < 3) throw precondition_error("dimension n must be >= 3");
  if (K < 0) throw precondition_error("coefficient degree must be >= 0");
  const double p = constants_for(n).p;
  vec a(size_t(K) + 1, 0.0);
  a[0] = 1.0;
  for (int k = 1; k <= K; ++k) a[k] = a[k - 1] * (p - (k - 1)) / k;
  return a;
}

namespace detail {

// Merge discipline for (gamma, j) keyed sums: rates closer than eps are the
// same slot, first-seen gamma wins. Keeps the list sorted.
inline void add_term(std::vector<ExpTerm>& terms, double gamma, int j, const vec& w, double eps) {
  for (auto& t : terms) {
    if (t.j == j && std::abs(t.gamma - gamma) <= eps) {
      for (size_t k = 0; k < w.size(); ++k) t.w[k] += w[k];
      return;
    }
  }
  ExpTerm t;
  t.gamma = gamma;
  t.j = j;
  t.w = w;
  auto pos = std::upper_bound(terms.begin(), terms.end(), t, [](const ExpTerm& a, const ExpTerm& b) {
    if (a.gamma != b.gamma) return a.gamma < b.gamma;
    return a.j < b.j;
  });
  terms.insert(pos, std::move(t));
}

// sup over t >= t0 of t^j e^{-d t}, d > 0.
inline double tpow_envelope(int j, double d, double t0) {
  double ts = j > 0 ? double(j) / d : 0.0;
  if (ts < t0) ts = t0;
  return std::pow(ts, j) * std::exp(-d * ts);
}

}  // namespace detail

/// Leading-order approximate solution ansatz: eta = sum_i c_i e^{-gamma_i t}
/// phi_i over the k1 exponents below the first combination rate. The returned
/// expansion carries the chain so later stages share one resonance tolerance.
inline Expansion free_data_modes(const Spectrum& sp, const IndexChain& chain, const vec& c) {
  if (int(c.size()) != chain.k1)
    throw precondition_error("free data must supply one coefficient per mode below the first combination rate: expected " +
                             std::to_string(chain.k1) + ", got " + std::to_string(c.size()));
  if (chain.k1 > sp.count) throw precondition_error("resolution: spectrum holds fewer modes than the chain prefix");
  Expansion e;
  e.profile = sp.profile;
  e.chain = chain;
  const double eps = std::max(chain.epsilon_res, 1e-10);
  for (int i = 0; i < chain.k1; ++i) {
    if (c[i] == 0.0) continue;
    vec w = sp.eigenfields[i];
    for (auto& v : w) v *= c[i];
    detail::add_term(e.terms, sp.gammas[i], 0, w, eps);
  }
  return e;
}

/// Residual families of N(xi + omega) grouped by (rate, t-power), for omega
/// the symbolic sum held in the expansion. Linear residues of every term are
/// evaluated against the discrete angular operator; nonlinear products are
/// enumerated to taylor_degree factors with multinomial weights and the
/// angular factor rho^{(k-1) beta - 2} prod w. Rates at or above mu are
/// dropped into the certificate. t0 anchors the weighted bounds.
inline residual_terms nonlinear_residual_expansion(const Expansion& e, double mu, double t0 = 0.0) {
  if (!e.profile) throw precondition_error("expansion carries no profile");
  if (!(mu > 0)) throw precondition_error("target order must be positive");
  const BoundaryProfile& prof = *e.profile;
  const AngularGrid& g = *prof.grid;
  const equation_constants& cs = prof.consts;
  const int N = g.node_count;
  const double beta2 = cs.beta * cs.beta;
  const double cn = 0.25 * double(cs.n) * (cs.n - 2);

  residual_terms out;
  if (e.terms.empty()) return out;

  const double eps = std::max(e.chain.epsilon_res, 1e-10);

  // Linear residues: L acting on t^j e^{-gamma t} w scatters onto t-powers
  // j, j-1, j-2 at the same rate.
  for (const auto& t : e.terms) {
    if (int(t.w.size()) != N) throw precondition_error("expansion term length does not match the angular grid");
    const double c = t.gamma * t.gamma - beta2;
    vec r0 = apply_laplacian(g, t.w, 0.0);
    for (int k = 0; k < N; ++k) r0[k] += (c - cs.kappa / (prof.rho[k] * prof.rho[k])) * t.w[k];
    detail::add_term(out.families, t.gamma, t.j, r0, eps);
    if (t.j >= 1) {
      vec r1(size_t(N), 0.0);
      for (int k = 0; k < N; ++k) r1[k] = -2.0 * t.gamma * t.j * t.w[k];
      detail::add_term(out.families, t.gamma, t.j - 1, r1, eps);
    }
    if (t.j >= 2) {
      vec r2(size_t(N), 0.0);
      for (int k = 0; k < N; ++k) r2[k] = double(t.j) * (t.j - 1) * t.w[k];
      detail::add_term(out.families, t.gamma, t.j - 2, r2, eps);
    }
  }

  // Nonlinear products. Depth cap: every power beyond it decays faster than
  // mu by construction, so the tail bound below covers the rest.
  double gmin = e.terms.front().gamma;
  for (const auto& t : e.terms) gmin = std::min(gmin, t.gamma);
  if (!(gmin > 0)) throw precondition_error("expansion rates must be positive");
  int K = int(std::ceil(mu / gmin)) + 1;
  K = std::min(std::max(K, 2), 40);
  const vec a = taylor_coeffs(cs.n, K);
  out.certificate.taylor_degree = K;

  // rho^{(k-1) beta - 2} per depth k.
  std::vector<vec> rho_pow(size_t(K) + 1);
  for (int k = 2; k <= K; ++k) {
    rho_pow[k].resize(size_t(N));
    for (int q = 0; q < N; ++q) rho_pow[k][q] = std::pow(prof.rho[q], (k - 1) * cs.beta - 2.0);
  }

  const int M = int(e.terms.size());
  long emitted = 0;
  std::vector<int> counts(size_t(M), 0);
  vec prod(size_t(N), 1.0);

  std::function<void(int, int, double, int, double)> extend = [&](int start, int depth, double rate, int jsum,
                                                                  double multinom) {
    if (depth >= 2 && a[depth] != 0.0) {
      if (++emitted > 200000)
        throw convergence_error("expansion bookkeeping exceeded the term budget; reduce the target order",
                                {double(emitted)});
      const double coef = -cn * a[depth] * multinom;
      if (rate < mu) {
        vec w(size_t(N), 0.0);
        for (int q = 0; q < N; ++q) w[q] = coef * rho_pow[depth][q] * prod[q];
        detail::add_term(out.families, rate, jsum, w, eps);
      } else {
        double sup = 0;
        for (int q = 0; q + 1 < N; ++q)
          sup = std::max(sup, std::abs(coef * rho_pow[depth][q] * prod[q]) * std::pow(prof.rho[q], 2.0 - cs.s));
        out.certificate.dropped_norm += sup * detail::tpow_envelope(jsum, rate - mu, t0);
      }
    }
    if (depth == K) return;
    for (int m = start; m < M; ++m) {
      const ExpTerm& tm = e.terms[size_t(m)];
      const double nrate = rate + tm.gamma;
      counts[size_t(m)] += 1;
      const double nmult = multinom * double(depth + 1) / counts[size_t(m)];
      vec save = prod;
      for (int q = 0; q < N; ++q) prod[q] *= tm.w[q];
      extend(m, depth + 1, nrate, jsum + tm.j, nmult);
      prod = save;
      counts[size_t(m)] -= 1;
    }
  };
  extend(0, 0, 0.0, 0, 1.0);

  // Noise floor: linear residues of eigen-modes and already-corrected slots
  // cancel to solver precision; families below 1e-9 of the largest are not
  // signal.
  double max_norm = 0;
  std::vector<double> norms(out.families.size());
  for (size_t i = 0; i < out.families.size(); ++i) {
    norms[i] = weighted_l2_norm(g, out.families[i].w);
    max_norm = std::max(max_norm, norms[i]);
  }
  std::vector<ExpTerm> kept;
  for (size_t i = 0; i < out.families.size(); ++i)
    if (norms[i] > 1e-9 * max_norm) kept.push_back(std::move(out.families[i]));
  out.families = std::move(kept);

  // Geometric tail: |omega(t, phi)| <= E(phi) e^{-gmin t} with E from the
  // per-term sup of t^j e^{-(gamma - gmin) t}; the powers beyond K sum to
  // cn xi^p rho^{2-s} sum_{k>K} |a_k| (E e^{-gmin t}/xi)^k, maximized at t0.
  vec env(size_t(N), 0.0);
  for (const auto& t : e.terms) {
    double S;
    if (t.gamma - gmin > 0)
      S = detail::tpow_envelope(t.j, t.gamma - gmin, t0);
    else
      S = std::pow(std::max(t0, 0.0), t.j);  // minimal rate slot is never resonant upstream
    for (int q = 0; q < N; ++q) env[q] += S * std::abs(t.w[q]);
  }
  const vec atail = taylor_coeffs(cs.n, K + 400);
  double ratio = 0, tail = 0;
  for (int q = 0; q < N; ++q) {
    const double r0 = env[q] * std::exp(-gmin * t0) / prof.xi[q];
    ratio = std::max(ratio, r0);
    if (r0 <= 0) continue;
    double acc = 0, pw = std::pow(r0, K + 1);
    for (int k = K + 1; k <= K + 400; ++k) {
      const double term = std::abs(atail[size_t(k)]) * pw;
      acc += term;
      pw *= r0;
      if (term < 1e-18 * acc) break;
    }
    const double xi_p = std::pow(prof.xi[q], cs.p);
    tail = std::max(tail, xi_p * std::pow(prof.rho[q], 2.0 - cs.s) * acc);
  }
  out.certificate.omega_ratio = ratio;
  if (!(ratio < 1.0))
    throw precondition_error("correction exceeds the blow-up profile: |omega|/xi reaches " + std::to_string(ratio));
  out.certificate.taylor_tail = cn * tail * std::exp(mu * t0);
  return out;
}

/// Evaluate the expansion at cylinder time t, optionally adding the profile.
inline vec evaluate_expansion(const Expansion& e, double t, bool include_xi) {
  if (!e.profile) throw precondition_error("expansion carries no profile");
  const int N = e.profile->grid->node_count;
  vec out(size_t(N), 0.0);
  for (const auto& term : e.terms) {
    if (int(term.w.size()) != N) throw precondition_error("expansion term length does not match the angular grid");
    const double f = std::pow(t, term.j) * std::exp(-term.gamma * t);
    for (int k = 0; k < N; ++k) out[k] += f * term.w[k];
  }
  if (include_xi)
    for (int k = 0; k < N; ++k) out[k] += e.profile->xi[k];
  return out;
}

/// Evaluate onto a cylinder grid (rows are t-slices).
inline CylinderField expansion_field(const Expansion& e, std::shared_ptr<const CylinderGrid> grid,
                                     bool include_xi = false) {
  if (!grid) throw precondition_error("null cylinder grid");
  if (grid->angular.get() != e.profile->grid.get())
    throw precondition_error("cylinder grid and expansion disagree on the angular grid");
  CylinderField f = zero_field(grid);
  const int N = grid->angular->node_count;
  for (int it = 0; it < grid->nt; ++it) {
    vec row = evaluate_expansion(e, grid->t_node(it), include_xi);
    for (int k = 0; k < N; ++k) f.at(it, k) = row[k];
  }
  return f;
}

/// Pointwise defect-corrected residual at time t: the t-derivatives of the
/// ansatz are exact, the angular operator is the discrete one, and the
/// nonlinearity enters as the full difference (xi+omega)^p - xi^p so the
/// profile's own discretization defect cancels out.
inline vec pointwise_residual(const Expansion& e, double t) {
  if (!e.profile) throw precondition_error("expansion carries no profile");
  const BoundaryProfile& prof = *e.profile;
  const AngularGrid& g = *prof.grid;
  const equation_constants& cs = prof.consts;
  const int N = g.node_count;
  const double beta2 = cs.beta * cs.beta;
  const double cn = 0.25 * double(cs.n) * (cs.n - 2);

  vec om = evaluate_expansion(e, t, false);
  vec r = apply_laplacian(g, om, 0.0);
  for (const auto& term : e.terms) {
    double tj = std::pow(t, term.j);
    double tj1 = term.j >= 1 ? term.j * std::pow(t, term.j - 1) : 0.0;
    double tj2 = term.j >= 2 ? double(term.j) * (term.j - 1) * std::pow(t, term.j - 2) : 0.0;
    const double fac = (term.gamma * term.gamma * tj - 2.0 * term.gamma * tj1 + tj2) * std::exp(-term.gamma * t);
    for (int k = 0; k < N; ++k) r[k] += fac * term.w[k];
  }
  for (int k = 0; k < N; ++k) {
    const double x = om[k] / prof.xi[k];
    if (x <= -1.0) throw precondition_error("correction exceeds the blow-up profile at a node");
    const double nl = std::pow(prof.xi[k], cs.p) * std::expm1(cs.p * std::log1p(x));
    r[k] += -beta2 * om[k] - cn * nl;
  }
  return r;
}

/// Append corrections until every residual family below mu is cancelled.
/// Stages run in increasing rate order. A nonresonant rate is removed by
/// shifted angular solves descending in the t-power (each level feeds the one
/// below through the first t-derivative); a rate matching an eigen-exponent
/// raises the top t-power by one, with the eigen-direction coefficients fixed
/// by the solvability cascade and the free multiple at the bottom level set
/// to zero.
inline Expansion correct_to_order(Expansion e, const Spectrum& sp, double mu, double t0 = 0.0) {
  if (!e.profile || !sp.profile) throw precondition_error("expansion or spectrum carries no profile");
  if (sp.profile.get() != e.profile.get())
    throw precondition_error("expansion and spectrum must share one profile");
  auto mem = membership(e.chain, mu);  // throws past the cutoff: need a larger chain
  if (mem.in_set)
    throw precondition_error("target order coincides with an index-set rate; shift mu away from " +
                             std::to_string(mem.nearest));
  if (!(sp.gammas[size_t(sp.count) - 1] > mu))
    throw precondition_error("resolution: spectrum does not reach past the target order");

  const AngularGrid& g = *e.profile->grid;
  const int N = g.node_count;
  const double eps = std::max(e.chain.epsilon_res, 1e-10);
  std::vector<double> corrected;

  // The ansatz modes are discrete eigenfields, so their linear residues are
  // solver noise, and every nonlinear product decays at twice the slowest
  // rate or faster: anything below that line is not correctable signal.
  double gmin = std::numeric_limits<double>::infinity();
  for (const auto& t : e.terms) gmin = std::min(gmin, t.gamma);

  for (int stage = 0; stage < 64; ++stage) {
    residual_terms res = nonlinear_residual_expansion(e, mu, t0);

    // Families arrive sorted by rate; pick the lowest cluster not yet done.
    double rate = 0;
    std::vector<std::pair<int, const vec*>> cluster;
    for (const auto& fam : res.families) {
      if (fam.gamma < 2.0 * gmin - eps) continue;
      bool done = false;
      for (double c : corrected)
        if (std::abs(fam.gamma - c) <= eps) done = true;
      if (done) continue;
      if (cluster.empty()) rate = fam.gamma;
      if (std::abs(fam.gamma - rate) <= eps)
        cluster.emplace_back(fam.j, &fam.w);
      else
        break;  // sorted: everything later is a higher rate
    }
    if (cluster.empty()) {
      e.order_achieved = mu;
      for (const auto& nr : e.chain.near_resonances)
        e.warnings.push_back("near-resonance: exponent " + std::to_string(nr.single_value) + " lies " +
                             std::to_string(nr.distance) + " from combination rate " + std::to_string(nr.combo_value) +
                             "; shifted solves are ill-conditioned nearby");
      return e;
    }

    int jmax = 0;
    for (const auto& [j, h] : cluster) jmax = std::max(jmax, j);
    auto h_at = [&](int j) -> vec {
      for (const auto& [jj, h] : cluster)
        if (jj == j) return *h;
      return vec(size_t(N), 0.0);
    };

    std::vector<int> ridx;
    for (int i = 0; i < sp.count; ++i)
      if (std::abs(rate - sp.gammas[size_t(i)]) <= e.chain.epsilon_res) ridx.push_back(i);

    if (ridx.empty()) {
      // Triangular solves from the top power down: (L + c) W_j =
      // -h_j + 2 rate (j+1) W_{j+1} - (j+1)(j+2) W_{j+2}.
      std::vector<vec> W(size_t(jmax) + 3, vec(size_t(N), 0.0));
      for (int j = jmax; j >= 0; --j) {
        vec h = h_at(j);
        for (int k = 0; k < N; ++k)
          h[k] += -2.0 * rate * (j + 1) * W[size_t(j) + 1][k] + double(j + 1) * (j + 2) * W[size_t(j) + 2][k];
        W[size_t(j)] = shifted_angular_solve(sp, h, rate, e.chain.epsilon_res);
      }
      for (int j = 0; j <= jmax; ++j) detail::add_term(e.terms, rate, j, W[size_t(j)], eps);
    } else {
      // Resonant: the eigen-direction coefficients alpha_j come first (the
      // cascade never needs the complement parts), then the complements.
      const int J = jmax + 1;
      std::vector<vec> alpha(ridx.size(), vec(size_t(J) + 3, 0.0));
      for (int j = jmax; j >= 0; --j) {
        vec h = h_at(j);
        for (size_t r = 0; r < ridx.size(); ++r) {
          const vec& phi = sp.eigenfields[size_t(ridx[r])];
          alpha[r][size_t(j) + 1] =
              (inner_product(g, h, phi) + double(j + 1) * (j + 2) * alpha[r][size_t(j) + 2]) / (2.0 * rate * (j + 1));
        }
      }
      std::vector<vec> W(size_t(J) + 3, vec(size_t(N), 0.0));
      for (size_t r = 0; r < ridx.size(); ++r) {
        const vec& phi = sp.eigenfields[size_t(ridx[r])];
        for (int k = 0; k < N; ++k) W[size_t(J)][k] += alpha[r][size_t(J)] * phi[k];
      }
      for (int j = jmax; j >= 0; --j) {
        vec h = h_at(j);
        for (int k = 0; k < N; ++k)
          h[k] += -2.0 * rate * (j + 1) * W[size_t(j) + 1][k] + double(j + 1) * (j + 2) * W[size_t(j) + 2][k];
        W[size_t(j)] = shifted_angular_solve(sp, h, rate, e.chain.epsilon_res);
        for (size_t r = 0; r < ridx.size(); ++r) {
          if (j == 0) break;  // the bottom-level free multiple is the normalization: zero
          const vec& phi = sp.eigenfields[size_t(ridx[r])];
          for (int k = 0; k < N; ++k) W[size_t(j)][k] += alpha[r][size_t(j)] * phi[k];
        }
      }
      for (int j = 0; j <= J; ++j) detail::add_term(e.terms, rate, j, W[size_t(j)], eps);
      double mind = std::numeric_limits<double>::infinity();
      for (int i : ridx) mind = std::min(mind, std::abs(rate - sp.gammas[size_t(i)]));
      if (mind > 0)
        e.warnings.push_back("resonant stage at rate " + std::to_string(rate) + " matched an eigen-exponent within " +
                             std::to_string(mind) + "; the t-power coupling is exact only in the resolved limit");
    }
    corrected.push_back(rate);
  }
  throw convergence_error("correction stages exceeded the limit before reaching the target order", {});
}

// Window diagnostic for the contraction hypotheses: eps(t) must decrease and
// the weighted residual constant must be finite.
struct assumption_report {
  vec ts;
  vec eps;                // sup rho^{-s} (|omega| + rho (|d_t omega| + |d_phi omega|))
  bool eps_decreasing = false;
  double K = 0;           // sup e^{mu t} rho^{2-s} |residual|
  double residual_rate = 0;
  bool pass = false;
};

inline assumption_report assumption_check(const Expansion& e, double mu, double t0, double t1, int samples = 17) {
  if (!e.profile) throw precondition_error("expansion carries no profile");
  if (!(t1 > t0)) throw precondition_error("empty check window");
  if (samples < 3) throw precondition_error("need at least 3 samples");
  const BoundaryProfile& prof = *e.profile;
  const AngularGrid& g = *prof.grid;
  const int N = g.node_count;

  assumption_report rep;
  rep.ts.resize(size_t(samples));
  rep.eps.resize(size_t(samples));
  vec lognorm, logt;
  for (int i = 0; i < samples; ++i) {
    const double t = t0 + (t1 - t0) * i / (samples - 1);
    rep.ts[size_t(i)] = t;

    vec om = evaluate_expansion(e, t, false);
    vec dphi = apply_derivative(g, om, 0.0);
    vec dt(size_t(N), 0.0);
    for (const auto& term : e.terms) {
      const double tj = std::pow(t, term.j);
      const double tj1 = term.j >= 1 ? term.j * std::pow(t, term.j - 1) : 0.0;
      const double fac = (tj1 - term.gamma * tj) * std::exp(-term.gamma * t);
      for (int k = 0; k < N; ++k) dt[k] += fac * term.w[k];
    }
    double sup = 0;
    for (int k = 0; k + 1 < N; ++k) {
      const double v = std::pow(prof.rho[k], -prof.consts.s) *
                       (std::abs(om[k]) + prof.rho[k] * (std::abs(dt[k]) + std::abs(dphi[k])));
      sup = std::max(sup, v);
    }
    rep.eps[size_t(i)] = sup;

    vec r = pointwise_residual(e, t);
    double rsup = 0;
    for (int k = 0; k + 1 < N; ++k)
      rsup = std::max(rsup, std::pow(prof.rho[k], 2.0 - prof.consts.s) * std::abs(r[k]));
    rep.K = std::max(rep.K, std::exp(mu * t) * rsup);
    const double rn = weighted_l2_norm(g, r);
    if (rn > 1e-300) {
      logt.push_back(t);
      lognorm.push_back(std::log(rn));
    }
  }
  rep.eps_decreasing = true;
  for (int i = 0; i + 1 < samples; ++i)
    if (rep.eps[size_t(i) + 1] > rep.eps[size_t(i)] * (1.0 + 1e-8)) rep.eps_decreasing = false;
  if (logt.size() >= size_t(std::max(3, samples / 2)))
    rep.residual_rate = -fit_line(logt, lognorm).slope;
  else
    rep.residual_rate = std::numeric_limits<double>::infinity();
  rep.pass = rep.eps_decreasing && std::isfinite(rep.K);
  return rep;
}

}  // namespace conicln
