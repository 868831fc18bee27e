#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

#include <json.hpp>

#include "conicln/contraction.hpp"

namespace conicln {

// ---------------------------------------------------------------------------
// run configuration

struct RunConfig {
  int n = 3;
  double phi_max = 0;
  int node_count = 400;
  double grading_exponent = 2.0;
  int eigen_count = 6;
  double cutoff = 12.0;
  double epsilon_res = 1e-8;
  double mu = 0;
  vec c;
  double t0 = 1.0;
  double t_max = 0;  // 0: pick the horizon from the spectral gap
  std::map<std::string, double> tolerances;
  std::string output_dir = "out";
  std::string cache_dir;  // empty: caching off
  std::uint64_t seed = 0;
};

namespace detail {

inline std::string fmt_g(double x) {
  char b[40];
  std::snprintf(b, sizeof b, "%.17g", x);
  return b;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex16(std::uint64_t h) {
  char b[17];
  std::snprintf(b, sizeof b, "%016llx", static_cast<unsigned long long>(h));
  return b;
}

}  // namespace detail

/// Parse and validate a JSON run configuration. Unknown keys and type
/// mismatches are rejected with the offending key in the message; module
/// preconditions checkable without building anything are enforced here, the
/// rest (mu against the index set, c against k1) at their pipeline stage.
inline RunConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw config_error(std::string("config parse: ") + e.what());
  }
  if (!j.is_object()) throw config_error("config root must be an object");

  RunConfig cfg;
  bool saw_n = false, saw_phi = false, saw_mu = false, saw_c = false;
  auto want = [](const nlohmann::json& v, bool ok, const char* key, const char* type) {
    if (!ok)
      throw config_error(std::string("config key '") + key + "' must be " + type);
  };
  for (const auto& [key, v] : j.items()) {
    if (key == "n") {
      want(v, v.is_number_integer(), "n", "an integer");
      cfg.n = v.get<int>();
      saw_n = true;
    } else if (key == "phi_max") {
      want(v, v.is_number(), "phi_max", "a number");
      cfg.phi_max = v.get<double>();
      saw_phi = true;
    } else if (key == "node_count") {
      want(v, v.is_number_integer(), "node_count", "an integer");
      cfg.node_count = v.get<int>();
    } else if (key == "grading_exponent") {
      want(v, v.is_number(), "grading_exponent", "a number");
      cfg.grading_exponent = v.get<double>();
    } else if (key == "eigen_count") {
      want(v, v.is_number_integer(), "eigen_count", "an integer");
      cfg.eigen_count = v.get<int>();
    } else if (key == "cutoff") {
      want(v, v.is_number(), "cutoff", "a number");
      cfg.cutoff = v.get<double>();
    } else if (key == "epsilon_res") {
      want(v, v.is_number(), "epsilon_res", "a number");
      cfg.epsilon_res = v.get<double>();
    } else if (key == "mu") {
      want(v, v.is_number(), "mu", "a number");
      cfg.mu = v.get<double>();
      saw_mu = true;
    } else if (key == "c") {
      want(v, v.is_array(), "c", "an array of numbers");
      cfg.c.clear();
      for (const auto& x : v) {
        want(x, x.is_number(), "c", "an array of numbers");
        cfg.c.push_back(x.get<double>());
      }
      saw_c = true;
    } else if (key == "t0") {
      want(v, v.is_number(), "t0", "a number");
      cfg.t0 = v.get<double>();
    } else if (key == "t_max") {
      want(v, v.is_number(), "t_max", "a number");
      cfg.t_max = v.get<double>();
    } else if (key == "tolerances") {
      want(v, v.is_object(), "tolerances", "an object of numbers");
      for (const auto& [tk, tv] : v.items()) {
        want(tv, tv.is_number(), "tolerances", "an object of numbers");
        cfg.tolerances[tk] = tv.get<double>();
      }
    } else if (key == "output_dir") {
      want(v, v.is_string(), "output_dir", "a string");
      cfg.output_dir = v.get<std::string>();
    } else if (key == "cache_dir") {
      want(v, v.is_string(), "cache_dir", "a string");
      cfg.cache_dir = v.get<std::string>();
    } else if (key == "seed") {
      want(v, v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0),
           "seed", "a nonnegative integer");
      cfg.seed = v.get<std::uint64_t>();
    } else {
      throw config_error("unknown config key '" + key + "'");
    }
  }
  if (!saw_n) throw config_error("missing required config key 'n'");
  if (!saw_phi) throw config_error("missing required config key 'phi_max'");
  if (!saw_mu) throw config_error("missing required config key 'mu'");
  if (!saw_c) throw config_error("missing required config key 'c'");

  if (cfg.n < 3) throw config_error("config key 'n': dimension must be >= 3");
  if (!(cfg.phi_max > 0) || !(cfg.phi_max < M_PI))
    throw config_error("config key 'phi_max': cap half-angle must lie in (0, pi)");
  if (cfg.node_count < 16) throw config_error("config key 'node_count': need at least 16 nodes");
  if (!(cfg.grading_exponent >= 1.0))
    throw config_error("config key 'grading_exponent': must be >= 1");
  if (cfg.eigen_count < 2 || cfg.eigen_count > cfg.node_count / 4)
    throw config_error("config key 'eigen_count': need 2 <= count <= node_count/4");
  if (!(cfg.cutoff > 0)) throw config_error("config key 'cutoff': must be positive");
  if (!(cfg.epsilon_res > 0) || !(cfg.epsilon_res < 0.1))
    throw config_error("config key 'epsilon_res': must lie in (0, 0.1)");
  if (!(cfg.mu > 0) || !std::isfinite(cfg.mu))
    throw config_error("config key 'mu': decay rate must be positive and finite");
  if (cfg.c.empty()) throw config_error("config key 'c': need at least one coefficient");
  for (double x : cfg.c)
    if (!std::isfinite(x)) throw config_error("config key 'c': coefficients must be finite");
  if (!(cfg.t0 >= 0)) throw config_error("config key 't0': anchor must be nonnegative");
  if (cfg.t_max != 0 && !(cfg.t_max > cfg.t0 + 4))
    throw config_error("config key 't_max': window must extend at least 4 past t0 (or 0 for automatic)");
  for (const auto& [tk, tv] : cfg.tolerances)
    if (!(tv > 0)) throw config_error("config key 'tolerances." + tk + "': must be positive");
  return cfg;
}

/// The effective config (defaults filled), as the canonical JSON object every
/// artifact echoes. Directories are excluded: artifact bytes must not depend
/// on where they are written.
inline nlohmann::json effective_config_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["n"] = cfg.n;
  j["phi_max"] = cfg.phi_max;
  j["node_count"] = cfg.node_count;
  j["grading_exponent"] = cfg.grading_exponent;
  j["eigen_count"] = cfg.eigen_count;
  j["cutoff"] = cfg.cutoff;
  j["epsilon_res"] = cfg.epsilon_res;
  j["mu"] = cfg.mu;
  j["c"] = cfg.c;
  j["t0"] = cfg.t0;
  j["t_max"] = cfg.t_max;
  j["tolerances"] = cfg.tolerances;
  j["seed"] = cfg.seed;
  return j;
}

inline std::string config_hash(const RunConfig& cfg) {
  return detail::hex16(detail::fnv1a64(effective_config_json(cfg).dump()));
}

// ---------------------------------------------------------------------------
// artifact files

namespace detail {

inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw config_error("cannot write " + tmp.string());
    f.write(content.data(), std::streamsize(content.size()));
    if (!f.flush()) throw config_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::optional<std::string> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) return std::nullopt;
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace detail

/// Artifact set of one stage: file name -> file content.
using ArtifactSet = std::map<std::string, std::string>;

// ---------------------------------------------------------------------------
// content-hash cache: one directory per (stage, key), files stored verbatim
// next to a manifest of their content hashes. Corrupt entries recompute with
// a warning.

namespace detail {

inline std::optional<ArtifactSet> cache_lookup(const std::string& cache_dir,
                                               const std::string& stage,
                                               const std::string& key_hash) {
  if (cache_dir.empty()) return std::nullopt;
  namespace fs = std::filesystem;
  fs::path dir = fs::path(cache_dir) / (stage + "-" + key_hash);
  auto man = read_file(dir / "cache_manifest.json");
  if (!man) return std::nullopt;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(*man);
  } catch (...) {
    std::cerr << "warning: cache entry " << dir.string() << " unreadable; recomputing\n";
    return std::nullopt;
  }
  if (!j.is_object() || !j.contains("files") || !j["files"].is_object()) {
    std::cerr << "warning: cache entry " << dir.string() << " malformed; recomputing\n";
    return std::nullopt;
  }
  ArtifactSet out;
  for (const auto& [name, want] : j["files"].items()) {
    auto content = read_file(dir / name);
    if (!content || !want.is_string() ||
        hex16(fnv1a64(*content)) != want.get<std::string>()) {
      std::cerr << "warning: cache entry " << dir.string() << " corrupt at '" << name
                << "'; recomputing\n";
      return std::nullopt;
    }
    out[name] = std::move(*content);
  }
  return out;
}

inline void cache_store(const std::string& cache_dir, const std::string& stage,
                        const std::string& key_hash, const ArtifactSet& files) {
  if (cache_dir.empty()) return;
  namespace fs = std::filesystem;
  fs::path dir = fs::path(cache_dir) / (stage + "-" + key_hash);
  nlohmann::json man;
  man["stage"] = stage;
  man["key"] = key_hash;
  for (const auto& [name, content] : files) {
    write_file_atomic(dir / name, content);
    man["files"][name] = hex16(fnv1a64(content));
  }
  write_file_atomic(dir / "cache_manifest.json", man.dump(2) + "\n");
}

}  // namespace detail

/// Stable cache key for a stage: hash of the canonical serialization of the
/// inputs that determine the stage output (not the whole config, so unrelated
/// parameter edits keep earlier stages warm).
inline std::string cache_key(const std::string& stage, const RunConfig& cfg) {
  using detail::fmt_g;
  // seed is part of every key: artifacts echo the config hash, which covers it
  std::string s = stage + "|n=" + std::to_string(cfg.n) + "|phi=" + fmt_g(cfg.phi_max) +
                  "|nodes=" + std::to_string(cfg.node_count) +
                  "|grading=" + fmt_g(cfg.grading_exponent) +
                  "|seed=" + std::to_string(cfg.seed);
  auto from = [&](const std::string& st) {
    // stages are ordered; each inherits the keys of the ones before it
    static const char* order[] = {"profile", "spectrum", "indexset", "expand", "solve", "verify"};
    int si = 0, ti = 0;
    for (int i = 0; i < 6; ++i) {
      if (stage == order[i]) si = i;
      if (st == order[i]) ti = i;
    }
    return si >= ti;
  };
  if (from("spectrum")) s += "|count=" + std::to_string(cfg.eigen_count);
  if (from("indexset"))
    s += "|cutoff=" + fmt_g(cfg.cutoff) + "|eps=" + fmt_g(cfg.epsilon_res);
  if (from("expand")) {
    s += "|mu=" + fmt_g(cfg.mu) + "|c=";
    for (double x : cfg.c) s += fmt_g(x) + ",";
  }
  if (from("solve")) {
    s += "|t0=" + fmt_g(cfg.t0) + "|tmax=" + fmt_g(cfg.t_max);
    for (const auto& [k, v] : cfg.tolerances) s += "|tol." + k + "=" + fmt_g(v);
  }
  if (from("verify")) s += "|oracle";
  return detail::hex16(detail::fnv1a64(s));
}

// ---------------------------------------------------------------------------
// pipeline: lazily computed shared objects, then per-stage artifact builders

class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg) : cfg_(std::move(cfg)), hash_(config_hash(cfg_)) {}

  const RunConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }

  const Spectrum& spectrum() {
    if (!spectrum_) {
      auto prof = std::make_shared<const BoundaryProfile>(solve_profile(
          build_grid(cfg_.n, cfg_.phi_max, cfg_.node_count, cfg_.grading_exponent)));
      spectrum_ = compute_spectrum(prof, cfg_.eigen_count);
    }
    return *spectrum_;
  }
  const BoundaryProfile& profile() { return *spectrum().profile; }

  const IndexChain& chain() {
    if (!chain_) chain_ = build_index_chain(spectrum().gammas, cfg_.cutoff, cfg_.epsilon_res);
    return *chain_;
  }

  const Expansion& expansion() {
    if (!expansion_) {
      auto m = membership(chain(), cfg_.mu);
      if (m.in_set)
        throw precondition_error(
            "mu = " + detail::fmt_g(cfg_.mu) + " lies in the forbidden index set (nearest value " +
            detail::fmt_g(m.nearest) + ", distance " + detail::fmt_g(m.distance) +
            "); choose a different mu");
      Expansion e = free_data_modes(spectrum(), chain(), cfg_.c);
      // the config anchor gates admissibility: the solve window starts there
      expansion_ = correct_to_order(std::move(e), spectrum(), cfg_.mu, cfg_.t0);
    }
    return *expansion_;
  }

  const std::pair<CylinderField, ContractionReport>& solution() {
    if (!solution_) {
      picard_options opts;
      if (cfg_.t_max > 0) opts.horizon = cfg_.t_max - cfg_.t0;
      if (auto it = cfg_.tolerances.find("picard_tol"); it != cfg_.tolerances.end())
        opts.tolerance = it->second;
      solution_ = picard_solve(expansion(), spectrum(), cfg_.mu, cfg_.t0, opts);
    }
    return *solution_;
  }

  // ---- stage artifact builders (pure functions of the computed objects) ----

  ArtifactSet build_profile() {
    const BoundaryProfile& p = profile();
    const AngularGrid& g = *p.grid;
    ArtifactSet a;
    std::string grid_csv = echo_line() + "phi,weight\n";
    for (int k = 0; k < g.node_count; ++k)
      grid_csv += detail::fmt_g(g.nodes[k]) + "," + detail::fmt_g(g.mass[k]) + "\n";
    a["grid.csv"] = std::move(grid_csv);

    std::string csv = echo_line() + "phi,rho,xi\n";
    for (int k = 0; k < g.node_count; ++k)
      csv += detail::fmt_g(g.nodes[k]) + "," + detail::fmt_g(p.rho[k]) + "," +
             detail::fmt_g(p.xi[k]) + "\n";
    a["profile.csv"] = std::move(csv);

    nlohmann::json j;
    j["config"] = effective_config_json(cfg_);
    j["config_hash"] = hash_;
    j["n"] = cfg_.n;
    j["phi_max"] = cfg_.phi_max;
    j["beta"] = p.consts.beta;
    j["boundary_slope"] = p.boundary_slope;
    j["residual_norm"] = p.residual_norm;
    j["node_count"] = g.node_count;
    j["newton_iterations"] = p.newton_iterations;
    a["profile.json"] = j.dump(2) + "\n";
    return a;
  }

  ArtifactSet build_spectrum() {
    const Spectrum& sp = spectrum();
    const AngularGrid& g = *sp.profile->grid;
    ArtifactSet a;
    nlohmann::json j;
    j["config_hash"] = hash_;
    j["kappa"] = sp.kappa;
    j["lambdas"] = sp.lambdas;
    j["gammas"] = sp.gammas;
    j["count"] = sp.count;
    a["spectrum.json"] = j.dump(2) + "\n";

    std::string csv = echo_line() + "phi";
    for (int i = 0; i < sp.count; ++i) csv += ",e" + std::to_string(i + 1);
    csv += "\n";
    for (int k = 0; k < g.node_count; ++k) {
      csv += detail::fmt_g(g.nodes[k]);
      for (int i = 0; i < sp.count; ++i) csv += "," + detail::fmt_g(sp.eigenfields[i][k]);
      csv += "\n";
    }
    a["eigenfields.csv"] = std::move(csv);
    return a;
  }

  ArtifactSet build_indexset() {
    const IndexChain& ch = chain();
    ArtifactSet a;
    nlohmann::json j;
    j["config_hash"] = hash_;
    j["gammas_in"] = ch.gammas_in;
    j["cutoff"] = ch.cutoff;
    j["epsilon_res"] = ch.epsilon_res;
    j["k1"] = ch.k1;
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : ch.entries) {
      nlohmann::json je;
      je["value"] = e.value;
      je["kind"] = e.kind == entry_kind::single ? "single"
                   : e.kind == entry_kind::combo ? "combo"
                                                 : "both";
      je["resonant"] = e.resonant;
      je["certificates"] = e.certificates;
      entries.push_back(std::move(je));
    }
    j["entries"] = std::move(entries);
    nlohmann::json nr = nlohmann::json::array();
    for (const auto& r : ch.near_resonances)
      nr.push_back({{"single_value", r.single_value},
                    {"combo_value", r.combo_value},
                    {"distance", r.distance}});
    j["near_resonances"] = std::move(nr);
    a["chain.json"] = j.dump(2) + "\n";
    return a;
  }

  ArtifactSet build_expand() {
    const Expansion& e = expansion();
    const AngularGrid& g = *e.profile->grid;
    ArtifactSet a;
    nlohmann::json j;
    j["config_hash"] = hash_;
    j["mu"] = cfg_.mu;
    j["c"] = cfg_.c;
    j["order_achieved"] = e.order_achieved;
    nlohmann::json terms = nlohmann::json::array();
    for (const auto& t : e.terms)
      terms.push_back({{"gamma", t.gamma}, {"j", t.j}, {"norm", sup_abs(t.w)}});
    j["terms"] = std::move(terms);
    j["warnings"] = e.warnings;
    a["expansion.json"] = j.dump(2) + "\n";

    std::string csv = echo_line() + "phi";
    for (size_t i = 0; i < e.terms.size(); ++i) csv += ",term" + std::to_string(i);
    csv += "\n";
    for (int k = 0; k < g.node_count; ++k) {
      csv += detail::fmt_g(g.nodes[k]);
      for (const auto& t : e.terms) csv += "," + detail::fmt_g(t.w[k]);
      csv += "\n";
    }
    a["expansion_coeffs.csv"] = std::move(csv);
    return a;
  }

  ArtifactSet build_solve() {
    const auto& [w, rep] = solution();
    const AngularGrid& g = *profile().grid;
    CylinderField v = assemble_solution(expansion(), w);
    ArtifactSet a;

    nlohmann::json j;
    j["config"] = effective_config_json(cfg_);
    j["config_hash"] = hash_;
    j["seed"] = cfg_.seed;
    j["mu"] = cfg_.mu;
    j["c"] = cfg_.c;
    nlohmann::json chv = nlohmann::json::array();
    for (const auto& e : chain().entries) chv.push_back(e.value);
    j["chain"] = std::move(chv);
    j["t0_used"] = rep.t0_used;
    j["horizon"] = rep.horizon;
    j["iterations"] = rep.iterations;
    j["converged"] = rep.converged;
    j["lambda"] = rep.lambda;
    j["final_residual"] = rep.final_residual;
    j["scheme_residual"] = rep.scheme_residual;
    j["fd2_residual"] = rep.fd2_residual;
    j["eps_anchor"] = rep.eps_anchor;
    j["K_window"] = rep.K_window;
    j["source_floor"] = rep.source_floor;
    j["iterate_norms"] = rep.iterate_norms;
    j["correction_norms"] = rep.correction_norms;
    j["ratios"] = rep.ratios;
    j["decay_fit"] = {{"rate", rep.decay.rate},
                      {"prefactor", rep.decay.prefactor},
                      {"points", rep.decay.points},
                      {"floor_hit", rep.decay.floor_hit}};
    j["notes"] = rep.notes;
    a["manifest.json"] = j.dump(2) + "\n";

    std::string csv = echo_line() + "t";
    for (int k = 0; k < g.node_count; ++k) csv += ",v" + std::to_string(k);
    csv += "\n";
    for (int it = 0; it < v.grid->nt; ++it) {
      csv += detail::fmt_g(v.grid->t_node(it));
      for (int k = 0; k < g.node_count; ++k) csv += "," + detail::fmt_g(v.at(it, k));
      csv += "\n";
    }
    a["solution.csv"] = std::move(csv);

    ConeSolution cone = reconstruct_cone_solution(v, expansion().profile);
    std::string samples = echo_line() + "r,phi,u\n";
    const int nr = 33;
    int step = std::max(1, g.node_count / 16);
    for (int jr = 0; jr < nr; ++jr) {
      double t = rep.t0_used + (jr + 0.5) * rep.horizon / nr;
      double r = std::exp(-t);
      for (int k = 0; k < g.node_count; k += step) {
        samples += detail::fmt_g(r) + "," + detail::fmt_g(g.nodes[k]) + "," +
                   detail::fmt_g(cone.u(r, g.nodes[k])) + "\n";
      }
    }
    a["cone_samples.csv"] = std::move(samples);
    return a;
  }

  ArtifactSet build_verify() {
    const auto& [w, rep] = solution();
    CylinderField v = assemble_solution(expansion(), w);
    const BoundaryProfile& p = profile();
    const AngularGrid& g = *p.grid;
    double ta = rep.t0_used;
    double tb = std::min(ta + 8.0, v.grid->t_max);
    CylinderField win = direct_solve_oracle(expansion().profile, v, ta, tb);

    double tol = 1e-3;
    if (auto it = cfg_.tolerances.find("oracle_rel"); it != cfg_.tolerances.end())
      tol = it->second;
    double worst = 0;
    long points = 0;
    for (int it = 0; it < win.grid->nt; ++it) {
      double t = win.grid->t_node(it);
      if (t < ta + 2.0 - 1e-9 || t > tb - 2.0 + 1e-9) continue;
      int src = int(std::lround((t - v.grid->t0) / v.grid->dt));
      for (int k = 0; k < g.node_count; ++k) {
        if (p.rho[k] <= 0.1) continue;
        worst = std::max(worst, std::abs(win.at(it, k) - v.at(src, k)) / std::abs(v.at(src, k)));
        ++points;
      }
    }
    ArtifactSet a;
    nlohmann::json j;
    j["config_hash"] = hash_;
    j["window"] = {ta, tb};
    j["compared_points"] = points;
    j["max_rel_err"] = worst;
    j["tolerance"] = tol;
    j["pass"] = worst <= tol;
    a["verify.json"] = j.dump(2) + "\n";
    if (!(worst <= tol))
      throw oracle_error("independent window re-solve disagrees: max relative error " +
                         detail::fmt_g(worst) + " exceeds " + detail::fmt_g(tol));
    return a;
  }

 private:
  std::string echo_line() const { return "# config=" + hash_ + "\n"; }

  RunConfig cfg_;
  std::string hash_;
  std::optional<Spectrum> spectrum_;
  std::optional<IndexChain> chain_;
  std::optional<Expansion> expansion_;
  std::optional<std::pair<CylinderField, ContractionReport>> solution_;
};

// ---------------------------------------------------------------------------
// stage runner: cache lookup, compute, store, materialize into the output dir

inline ArtifactSet run_stage_with(Pipeline& pl, const std::string& stage) {
  static const std::map<std::string, ArtifactSet (Pipeline::*)()> builders = {
      {"profile", &Pipeline::build_profile},   {"spectrum", &Pipeline::build_spectrum},
      {"indexset", &Pipeline::build_indexset}, {"expand", &Pipeline::build_expand},
      {"solve", &Pipeline::build_solve},       {"verify", &Pipeline::build_verify},
  };
  auto bit = builders.find(stage);
  if (bit == builders.end()) throw config_error("unknown pipeline stage '" + stage + "'");

  namespace fs = std::filesystem;
  const RunConfig& cfg = pl.config();
  const std::string key = cache_key(stage, cfg);
  ArtifactSet files;
  if (auto hit = detail::cache_lookup(cfg.cache_dir, stage, key)) {
    files = std::move(*hit);
  } else {
    try {
      files = (pl.*(bit->second))();
    } catch (const error& e) {
      // leave a marker naming the failed stage next to any partial artifacts
      nlohmann::json j;
      j["stage"] = stage;
      j["config_hash"] = pl.hash();
      j["error"] = e.what();
      j["exit_code"] = e.code;
      detail::write_file_atomic(fs::path(cfg.output_dir) / (stage + ".incomplete.json"),
                                j.dump(2) + "\n");
      throw;
    }
    detail::cache_store(cfg.cache_dir, stage, key, files);
  }
  for (const auto& [name, content] : files)
    detail::write_file_atomic(fs::path(cfg.output_dir) / name, content);
  std::error_code ec;
  fs::remove(fs::path(cfg.output_dir) / (stage + ".incomplete.json"), ec);
  return files;
}

inline ArtifactSet run_stage(const std::string& stage, const RunConfig& cfg) {
  Pipeline pl(cfg);
  return run_stage_with(pl, stage);
}

/// Run every stage up to and including `stage` (the CLI contract: a command
/// materializes its whole prerequisite chain, computing shared objects once
/// and replaying cached stages byte-identically).
inline ArtifactSet run_through(const std::string& stage, const RunConfig& cfg) {
  static const char* order[] = {"profile", "spectrum", "indexset", "expand", "solve", "verify"};
  int last = -1;
  for (int i = 0; i < 6; ++i)
    if (stage == order[i]) last = i;
  if (last < 0) throw config_error("unknown pipeline stage '" + stage + "'");
  Pipeline pl(cfg);
  ArtifactSet all;
  for (int i = 0; i <= last; ++i) {
    ArtifactSet part = run_stage_with(pl, order[i]);
    for (auto& [name, content] : part) all[name] = std::move(content);
  }
  return all;
}

}  // namespace conicln
