#pragma once

#include <algorithm>
#include <limits>

#include "conicln/core.hpp"

namespace conicln {

enum class entry_kind { single, combo, both };

// One value slot of the merged chain. Certificates are multi-indices m over
// the input exponents with sum(m_i * gamma_i) at this value; singles carry
// their unit multi-index, combos carry every realization with sum(m) >= 2.
struct chain_entry {
  double value = 0;
  entry_kind kind = entry_kind::single;
  std::vector<std::vector<int>> certificates;
  bool resonant = false;
};

// A single exponent lying within warning distance (but outside epsilon_res)
// of a combination value: degrades shifted-solver conditioning downstream.
struct near_resonance {
  double single_value = 0;
  double combo_value = 0;
  double distance = 0;
};

struct IndexChain {
  vec gammas_in;
  double cutoff = 0;
  double epsilon_res = 0;  // absolute merge/resonance tolerance
  std::vector<chain_entry> entries;
  int k1 = 0;
  std::vector<near_resonance> near_resonances;
};

namespace detail {

// All multi-indices with total >= 2 and value <= cutoff + eps, depth-first so
// the certificate order is deterministic. Value accumulates as
// acc + c * gamma[i] level by level; the brute-force oracle must sum in the
// same association order to reproduce values bitwise.
inline void enumerate_combos(const vec& gammas, double cutoff, double eps, int level,
                             double acc, int total, std::vector<int>& m,
                             std::vector<std::pair<double, std::vector<int>>>& out) {
  if (level == static_cast<int>(gammas.size())) {
    if (total >= 2) out.emplace_back(acc, m);
    return;
  }
  for (int c = 0;; ++c) {
    double v = acc + c * gammas[level];
    if (v > cutoff + eps) break;
    m[level] = c;
    enumerate_combos(gammas, cutoff, eps, level + 1, v, total + c, m, out);
  }
  m[level] = 0;
}

}  // namespace detail

inline IndexChain build_index_chain(vec gammas, double cutoff, double epsilon_res) {
  if (gammas.empty()) throw precondition_error("exponent list is empty");
  for (size_t i = 0; i < gammas.size(); ++i) {
    if (!(gammas[i] > 0)) throw precondition_error("exponents must be positive");
    if (i > 0 && gammas[i] < gammas[i - 1])
      throw precondition_error("exponent list not increasing");
  }
  if (!(cutoff >= 2 * gammas[0]))
    throw precondition_error("cutoff below twice the leading exponent");
  if (epsilon_res < 0) throw precondition_error("negative resonance tolerance");

  const int K = static_cast<int>(gammas.size());
  IndexChain chain;
  chain.gammas_in = gammas;
  chain.cutoff = cutoff;
  chain.epsilon_res = epsilon_res;

  // one slot per input exponent; equal inputs keep distinct slots
  for (int i = 0; i < K; ++i) {
    chain_entry e;
    e.value = gammas[i];
    e.kind = entry_kind::single;
    e.certificates.assign(1, std::vector<int>(K, 0));
    e.certificates[0][i] = 1;
    chain.entries.push_back(std::move(e));
  }

  std::vector<std::pair<double, std::vector<int>>> combos;
  std::vector<int> m(K, 0);
  detail::enumerate_combos(gammas, cutoff, epsilon_res, 0, 0.0, 0, m, combos);
  std::sort(combos.begin(), combos.end());

  for (auto& [v, cert] : combos) {
    // attach to a matching slot, preferring singles so resonance is flagged
    chain_entry* hit = nullptr;
    for (auto& e : chain.entries) {
      if (std::abs(e.value - v) > epsilon_res) continue;
      if (!hit || (hit->kind == entry_kind::combo && e.kind != entry_kind::combo)) hit = &e;
    }
    if (!hit) {
      chain_entry e;
      e.value = v;
      e.kind = entry_kind::combo;
      e.certificates.push_back(cert);
      chain.entries.push_back(std::move(e));
      continue;
    }
    hit->certificates.push_back(cert);
    if (hit->kind == entry_kind::single) {
      hit->kind = entry_kind::both;
      hit->resonant = true;
    }
  }

  std::stable_sort(chain.entries.begin(), chain.entries.end(),
                   [](const chain_entry& a, const chain_entry& b) { return a.value < b.value; });

  for (const auto& a : chain.entries) {
    if (a.kind != entry_kind::single) continue;
    for (const auto& b : chain.entries) {
      if (b.kind == entry_kind::single) continue;
      double d = std::abs(a.value - b.value);
      if (d > epsilon_res && d <= 1e-4)
        chain.near_resonances.push_back({a.value, b.value, d});
    }
  }

  double first_combo = std::numeric_limits<double>::infinity();
  for (const auto& e : chain.entries)
    if (e.kind != entry_kind::single) {
      first_combo = e.value;
      break;
    }
  for (int i = 0; i < K; ++i) {
    bool res = false;
    for (const auto& e : chain.entries)
      if (e.resonant && std::abs(e.value - gammas[i]) <= epsilon_res) res = true;
    if (gammas[i] < first_combo && !res)
      chain.k1 = i + 1;
    else
      break;
  }
  return chain;
}

struct membership_result {
  bool in_set = false;
  double nearest = 0;
  double distance = 0;
};

inline membership_result membership(const IndexChain& chain, double mu) {
  if (mu > chain.cutoff + chain.epsilon_res)
    throw precondition_error("membership query above cutoff; rebuild with a larger cutoff");
  membership_result r;
  r.distance = std::numeric_limits<double>::infinity();
  for (const auto& e : chain.entries) {
    double d = std::abs(e.value - mu);
    if (d < r.distance) {
      r.distance = d;
      r.nearest = e.value;
    }
  }
  r.in_set = r.distance <= chain.epsilon_res;
  return r;
}

}  // namespace conicln
