#pragma once

// Declarative experiments: JSON config -> jobs -> rows, traces and plot data.
// Every output is a pure function of the config, so replay can compare bytes.

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "conflab/coupled.hpp"
#include "conflab/diagnostics.hpp"
#include "conflab/validation.hpp"

namespace conflab::exp {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kVersion = "conflab 0.3.0";

// ---------------------------------------------------------------- config

struct GeometrySpec {
  Backend backend = Backend::WarpedTorus;
  int n = 3;
  int m = 128;
  int order = 2;
  std::string warp = "constant";  // constant | cosine | tabulated
  double r0 = 1.0, eps = 0.0;
  std::vector<double> samples;
};

struct TauSpec {
  std::string kind = "constant";  // constant | sine | plateau
  double tau0 = 1.0, amp = 0.0, phase = 0.0;
  double tau_min = 1.0, tau_max = std::exp(1.0);
  double plateau_width = std::numbers::pi / 4, collar_width = -1.0;
};

struct SigmaSpec {
  TTKind kind = TTKind::Zero;
  std::vector<double> centers{std::numbers::pi};
  double radius = 0.5, qnorm2 = 2.0, C = 1.0;
};

struct SeedSpec {
  TauSpec tau;
  SigmaSpec sigma;
  double a = 1.0, k = 1.0;
  bool nonexistence = false;
};

struct HomotopySpec {
  std::string f = "auto";  // auto | R | one
  double gamma_max = 1e6;
  double picard_tol = 1e-10;
  int max_picard = 60;
  double step_floor = 1e-10;
  double t_end = 1.0;
  double t0 = 1e-3;
  int steps = 64;
};

struct Config {
  std::string experiment;
  GeometrySpec geometry;
  SeedSpec seed;
  HomotopySpec homotopy;
  std::vector<int> resolutions;
  std::vector<double> gamma_max_values, a_values, k_values, t_values;
  int multistarts = 10;
  std::uint64_t rng_seed = 1;
  std::string out = "out";
  json sweep;       // axis -> list of values, expanded by `sweep`
  json raw;         // the config as read, echoed into the manifest
};

inline const std::set<std::string>& experiment_ids() {
  static const std::set<std::string> ids{"E1-existence",      "E2-blowup-limit", "E3-nonexistence-sweep",
                                         "E4-sigma-zero",     "E5-nonuniqueness", "validate",
                                         "oracle-check"};
  return ids;
}

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCode::ConfigError, what) {}
};

namespace detail {

inline void only_keys(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <class T>
void get(const json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

inline Backend parse_backend(const std::string& s) {
  if (s == "WarpedTorus") return Backend::WarpedTorus;
  if (s == "SphericalCylinder") return Backend::SphericalCylinder;
  throw ConfigError("unknown backend '" + s + "'");
}

inline TTKind parse_tt(const std::string& s) {
  if (s == "Zero") return TTKind::Zero;
  if (s == "TangentialParallel") return TTKind::TangentialParallel;
  if (s == "Diagonal") return TTKind::Diagonal;
  throw ConfigError("unknown sigma kind '" + s + "'");
}

}  // namespace detail

inline Config parse_config(const json& j) {
  using detail::get;
  using detail::only_keys;
  only_keys(j, "config", {"experiment", "geometry", "seed", "homotopy", "resolutions", "gamma_max_values",
                          "a_values", "k_values", "t_values", "multistarts", "rng_seed", "out", "sweep",
                          "description"});
  Config c;
  c.raw = j;
  get(j, "experiment", c.experiment, "config");
  if (!experiment_ids().count(c.experiment)) throw ConfigError("unknown experiment '" + c.experiment + "'");

  if (j.contains("geometry")) {
    const json& g = j["geometry"];
    only_keys(g, "geometry", {"backend", "n", "m", "order", "warp"});
    std::string b = "WarpedTorus";
    get(g, "backend", b, "geometry");
    c.geometry.backend = detail::parse_backend(b);
    get(g, "n", c.geometry.n, "geometry");
    get(g, "m", c.geometry.m, "geometry");
    get(g, "order", c.geometry.order, "geometry");
    if (g.contains("warp")) {
      const json& w = g["warp"];
      only_keys(w, "geometry.warp", {"kind", "r0", "eps", "samples"});
      get(w, "kind", c.geometry.warp, "geometry.warp");
      get(w, "r0", c.geometry.r0, "geometry.warp");
      get(w, "eps", c.geometry.eps, "geometry.warp");
      get(w, "samples", c.geometry.samples, "geometry.warp");
    }
  }
  if (j.contains("seed")) {
    const json& s = j["seed"];
    only_keys(s, "seed", {"tau", "sigma", "a", "k", "nonexistence"});
    get(s, "a", c.seed.a, "seed");
    get(s, "k", c.seed.k, "seed");
    get(s, "nonexistence", c.seed.nonexistence, "seed");
    if (s.contains("tau")) {
      const json& t = s["tau"];
      only_keys(t, "seed.tau", {"kind", "tau0", "amp", "phase", "tau_min", "tau_max", "plateau_width",
                                "collar_width"});
      auto& T = c.seed.tau;
      get(t, "kind", T.kind, "seed.tau");
      get(t, "tau0", T.tau0, "seed.tau");
      get(t, "amp", T.amp, "seed.tau");
      get(t, "phase", T.phase, "seed.tau");
      get(t, "tau_min", T.tau_min, "seed.tau");
      get(t, "tau_max", T.tau_max, "seed.tau");
      get(t, "plateau_width", T.plateau_width, "seed.tau");
      get(t, "collar_width", T.collar_width, "seed.tau");
      if (T.kind != "constant" && T.kind != "sine" && T.kind != "plateau")
        throw ConfigError("unknown tau kind '" + T.kind + "'");
    }
    if (s.contains("sigma")) {
      const json& t = s["sigma"];
      only_keys(t, "seed.sigma", {"kind", "centers", "radius", "qnorm2", "C"});
      std::string kind = "Zero";
      get(t, "kind", kind, "seed.sigma");
      c.seed.sigma.kind = detail::parse_tt(kind);
      get(t, "centers", c.seed.sigma.centers, "seed.sigma");
      get(t, "radius", c.seed.sigma.radius, "seed.sigma");
      get(t, "qnorm2", c.seed.sigma.qnorm2, "seed.sigma");
      get(t, "C", c.seed.sigma.C, "seed.sigma");
    }
  }
  if (j.contains("homotopy")) {
    const json& h = j["homotopy"];
    only_keys(h, "homotopy", {"f", "gamma_max", "picard_tol", "max_picard", "step_floor", "t_end", "t0",
                              "steps"});
    auto& H = c.homotopy;
    get(h, "f", H.f, "homotopy");
    get(h, "gamma_max", H.gamma_max, "homotopy");
    get(h, "picard_tol", H.picard_tol, "homotopy");
    get(h, "max_picard", H.max_picard, "homotopy");
    get(h, "step_floor", H.step_floor, "homotopy");
    get(h, "t_end", H.t_end, "homotopy");
    get(h, "t0", H.t0, "homotopy");
    get(h, "steps", H.steps, "homotopy");
    if (H.f != "auto" && H.f != "R" && H.f != "one") throw ConfigError("homotopy.f must be auto, R or one");
  }
  get(j, "resolutions", c.resolutions, "config");
  get(j, "gamma_max_values", c.gamma_max_values, "config");
  get(j, "a_values", c.a_values, "config");
  get(j, "k_values", c.k_values, "config");
  get(j, "t_values", c.t_values, "config");
  get(j, "multistarts", c.multistarts, "config");
  get(j, "rng_seed", c.rng_seed, "config");
  get(j, "out", c.out, "config");
  if (j.contains("sweep")) {
    c.sweep = j["sweep"];
    only_keys(c.sweep, "sweep", {"a", "k", "m", "gamma_max", "t"});
    for (auto it = c.sweep.begin(); it != c.sweep.end(); ++it)
      if (!it->is_array() || it->empty()) throw ConfigError("sweep." + it.key() + " must be a non-empty list");
  }

  // value checks
  const auto& G = c.geometry;
  if (G.n < 3) throw ConfigError("geometry.n must be at least 3");
  if (G.m < 8) throw ConfigError("geometry.m must be at least 8");
  if (G.order != 2 && G.order != 4 && G.order != 6) throw ConfigError("geometry.order must be 2, 4 or 6");
  if (G.warp != "constant" && G.warp != "cosine" && G.warp != "tabulated")
    throw ConfigError("unknown warp kind '" + G.warp + "'");
  for (int m : c.resolutions)
    if (m < 8) throw ConfigError("resolutions must be at least 8");
  if (!(c.homotopy.gamma_max > 1)) throw ConfigError("homotopy.gamma_max must exceed 1");
  if (!(c.homotopy.picard_tol > 0)) throw ConfigError("homotopy.picard_tol must be positive");
  if (c.homotopy.t_end <= 0 || c.homotopy.t_end > 1) throw ConfigError("homotopy.t_end must lie in (0,1]");
  for (double t : c.t_values)
    if (!(t > 0 && t <= 1)) throw ConfigError("t_values must lie in (0,1]");
  if (!(c.seed.a > 0)) throw ConfigError("seed.a must be positive");
  if (c.seed.k < 0) throw ConfigError("seed.k must be non-negative");
  return c;
}

inline Config load_config(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open " + p.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------- building

inline WarpProfile make_warp(const GeometrySpec& g) {
  if (g.warp == "cosine") return WarpProfile::cosine(g.r0, g.eps);
  if (g.warp == "tabulated") {
    if (g.samples.size() < 4) throw ConfigError("tabulated warp needs samples");
    return WarpProfile::tabulated(g.samples);
  }
  return WarpProfile::constant(g.r0);
}

inline Grid make_grid(const GeometrySpec& gs, int m) {
  try {
    return build_grid(gs.backend, gs.n, m, make_warp(gs), gs.order);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

inline SeedData make_seed(const Config& c, const Grid& g, double a, double k) {
  const TauSpec& T = c.seed.tau;
  TauProfile tp;
  try {
    if (T.kind == "constant") tp = make_constant_tau(T.tau0, g.period);
    else if (T.kind == "sine") tp = make_sine_tau(T.tau0, T.amp, g.period, T.phase);
    else tp = make_plateau_tau(g, T.tau_min, T.tau_max, T.plateau_width, T.collar_width).profile;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  SigmaParams sp;
  sp.centers = c.seed.sigma.centers;
  sp.radius = c.seed.sigma.radius;
  sp.qnorm2 = c.seed.sigma.qnorm2;
  sp.C = c.seed.sigma.C;
  sp.attach_receipt = false;  // receipts are produced once per run, see validate
  SeedData sd{g, tp, make_sigma(g, c.seed.sigma.kind, sp).spec, a, k};
  sd.nonexistence = c.seed.nonexistence;
  return sd;
}

inline HomotopyConfig make_homotopy(const Config& c, const Grid& g) {
  HomotopyConfig h;
  const auto& H = c.homotopy;
  if (H.f == "R") {
    if (!(g.R.minCoeff() > 0)) throw ConfigError("homotopy.f = R needs R > 0");
    h.f = g.R;
  } else if (H.f == "one") {
    h.f = Field::Ones(g.m);
  }
  h.t_schedule = default_schedule(H.t0, 1.0, H.steps);
  h.t_end = H.t_end;
  h.picard_tol = H.picard_tol;
  h.max_picard = H.max_picard;
  h.gamma_max = H.gamma_max;
  h.step_floor = H.step_floor;
  return h;
}

// ---------------------------------------------------------------- output

/// RFC 4180 field: quoted when it contains a comma, quote or line break.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string o = "\"";
  for (char ch : s) {
    if (ch == '"') o += '"';
    o += ch;
  }
  return o + "\"";
}

inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string csv() const {
    std::string o;
    auto line = [&](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size(); ++i) o += (i ? "," : "") + csv_field(r[i]);
      o += "\r\n";
    };
    line(header);
    for (const auto& r : rows) line(r);
    return o;
  }
};

inline Table trace_table(const HomotopyTrace& tr) {
  Table t;
  t.header = {"step", "t", "gamma", "t^n*gamma", "picard_iters", "defect", "limit_residual", "classification"};
  for (const auto& r : tr.rows)
    t.rows.push_back({std::to_string(r.step), num(r.t), num(r.gamma), num(r.tn_gamma),
                      std::to_string(r.picard_iters), num(r.defect), num(r.limit_residual), r.classification});
  return t;
}

/// Output of one job. `key` orders rows; files are relative to the run dir.
struct JobResult {
  std::vector<double> key;
  std::vector<std::vector<std::string>> rows;
  std::map<std::string, std::string> files;
  std::map<std::string, std::vector<std::string>> plot_lines;  // plot file -> lines
  json report;
  bool nonconvergence = false;
};

struct Job {
  std::vector<double> key;
  std::function<JobResult()> run;
};

struct RunOptions {
  int workers = 1;
  bool strict = false;
  bool trace = false;
  bool verbose = false;
};

inline int default_workers() {
  if (const char* e = std::getenv("CONFLAB_WORKERS")) {
    const int w = std::atoi(e);
    if (w > 0) return w;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Bounded pool; results land in job order regardless of completion order.
inline std::vector<JobResult> run_jobs(const std::vector<Job>& jobs, int workers, bool verbose) {
  std::vector<JobResult> out(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      out[i] = jobs[i].run();
      out[i].key = jobs[i].key;
      if (verbose) {
        std::lock_guard<std::mutex> lk(log);
        std::fprintf(stderr, "[%zu/%zu] done\n", i + 1, jobs.size());
      }
    }
  };
  const int w = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
  std::vector<std::thread> pool;
  for (int k = 1; k < w; ++k) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  return out;
}

// ---------------------------------------------------------------- experiments

struct Plan {
  std::vector<std::string> header;
  std::vector<Job> jobs;
  json reports = json::object();
};

namespace detail {

inline double max_gamma(const HomotopyTrace& tr) {
  double g = 0.0;
  for (const auto& r : tr.rows) g = std::max(g, r.gamma);
  return g;
}

inline std::string tag(const char* name, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%g", name, v);
  return buf;
}

inline json outcome_json(const SolveOutcome& o) {
  return json{{"kind", to_string(o.kind)},
              {"t_final", o.t_final},
              {"classification", to_string(o.classification)},
              {"message", o.message},
              {"rows", o.trace.rows.size()}};
}

inline Field random_field(std::mt19937_64& rng, int m) {
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  Field v(m);
  for (int j = 0; j < m; ++j) v[j] = U(rng);
  return v;
}

// one homotopy run with its independent checks
struct RunSummary {
  SolveOutcome o;
  ResidualCheck check;
  ConstraintReport cons;
  bool solved = false;
};

inline RunSummary solve_and_check(const Config& c, const SeedData& sd) {
  RunSummary r;
  HomotopyConfig h = make_homotopy(c, sd.grid);
  h.keep_states = false;
  r.o = run_homotopy(h, sd);
  if (r.o.kind == OutcomeKind::Solution) {
    r.solved = true;
    r.check = check_solution(sd, sd.grid.R, r.o.phi, r.o.w);
    r.cons = verify_constraints(sd, r.o.phi, r.o.w);
  }
  return r;
}

inline std::vector<std::string> plot_t_gamma(const HomotopyTrace& tr, const std::string& label) {
  std::vector<std::string> lines;
  for (const auto& r : tr.rows) lines.push_back(label + " " + num(r.t) + " " + num(r.gamma));
  return lines;
}

}  // namespace detail


inline std::string trace_name(const std::string& stem) { return "traces/" + stem + ".csv"; }

inline Table state_table(const Grid& g, const Field& phi, const Field& w) {
  Table t;
  t.header = {"s", "phi", "w"};
  for (int j = 0; j < g.m; ++j) t.rows.push_back({num(g.s[j]), num(phi[j]), num(w[j])});
  return t;
}

inline Plan plan_e1(const Config& c, const RunOptions& opt) {
  Plan p;
  p.header = {"m", "outcome", "t_final", "max_gamma", "lich_residual", "vector_residual", "defect_rel",
              "hamiltonian", "momentum", "hamiltonian_rel", "momentum_rel", "decoupled_gap", "message"};
  const std::vector<int> ms = c.resolutions.empty() ? std::vector<int>{c.geometry.m} : c.resolutions;
  for (int m : ms) {
    p.jobs.push_back({{double(m)}, [c, m, opt]() {
      const Grid g = make_grid(c.geometry, m);
      const SeedData sd = make_seed(c, g, c.seed.a, c.seed.k);
      auto r = detail::solve_and_check(c, sd);
      double gap = std::numeric_limits<double>::quiet_NaN();
      if (r.solved && c.seed.tau.kind == "constant") {
        // dtau = 0 decouples the system: W = 0 and a single Lichnerowicz solve
        const LichProblem lp = LichProblem::on(g, g.R, sd.tau_a().cwiseAbs2(),
                                               source_sq(g, sd.sigma, sd.k, Field::Zero(m)));
        SolverTol tol;
        tol.res = c.homotopy.picard_tol;
        gap = sup_norm(solve_lichnerowicz(lp, r.o.phi, tol).u - r.o.phi) / sup_norm(r.o.phi);
      }
      JobResult jr;
      jr.nonconvergence = r.o.kind == OutcomeKind::NonConvergence;
      jr.rows = {{std::to_string(m), to_string(r.o.kind), num(r.o.t_final), num(detail::max_gamma(r.o.trace)),
                num(r.check.lich), num(r.check.vec), num(r.check.defect_rel), num(r.cons.hamiltonian),
                num(r.cons.momentum), num(r.cons.hamiltonian_rel), num(r.cons.momentum_rel), num(gap),
                r.o.message}};
      const std::string stem = detail::tag("m", m);
      jr.files[trace_name(stem)] = trace_table(r.o.trace).csv();
      if (opt.trace && r.solved) jr.files["states/" + stem + ".csv"] = state_table(g, r.o.phi, r.o.w).csv();
      jr.plot_lines["plot_t_gamma.dat"] = detail::plot_t_gamma(r.o.trace, stem);
      jr.report = detail::outcome_json(r.o);
      return jr;
    }});
  }
  return p;
}

inline Plan plan_e2(const Config& c, const RunOptions& opt) {
  Plan p;
  p.header = {"gamma_max", "outcome", "t_final", "max_gamma", "classification", "product_limit",
              "phi_tilde_sup", "profile_residual", "limit_residual", "message"};
  const std::vector<double> gms =
      c.gamma_max_values.empty() ? std::vector<double>{c.homotopy.gamma_max} : c.gamma_max_values;
  for (double gm : gms) {
    p.jobs.push_back({{gm}, [c, gm, opt]() {
      Config cc = c;
      cc.homotopy.gamma_max = gm;
      const Grid g = make_grid(cc.geometry, cc.geometry.m);
      const SeedData sd = make_seed(cc, g, cc.seed.a, cc.seed.k);
      HomotopyConfig h = make_homotopy(cc, g);
      h.keep_states = false;
      const SolveOutcome o = run_homotopy(h, sd);
      double lim = std::numeric_limits<double>::quiet_NaN(), ptil = lim;
      if (o.kind == OutcomeKind::BlowUp) {
        ptil = sup_norm(o.phi_tilde);
        lim = sup_norm(o.w_tilde) > 0 ? limit_residual(g, sd.dlog_tau_a(), o.w_tilde, 1.0) : lim;
      }
      JobResult jr;
      jr.nonconvergence = o.kind == OutcomeKind::NonConvergence;
      jr.rows = {{num(gm), to_string(o.kind), num(o.t_final), num(detail::max_gamma(o.trace)),
                to_string(o.classification), num(o.product_limit), num(ptil), num(o.profile_residual),
                num(lim), o.message}};
      const std::string stem = detail::tag("gm", gm);
      jr.files[trace_name(stem)] = trace_table(o.trace).csv();
      if (opt.trace && o.phi.size()) jr.files["states/" + stem + ".csv"] = state_table(g, o.phi, o.w).csv();
      jr.plot_lines["plot_t_gamma.dat"] = detail::plot_t_gamma(o.trace, stem);
      jr.report = detail::outcome_json(o);
      return jr;
    }});
  }
  return p;
}

/// Runs at the first resolution, moving to the next one only when the
/// continuation stalls; under-resolved steep tau^a produces spurious stalls.
inline std::pair<SolveOutcome, int> escalate(const Config& c, double a, double k, SeedData& sd_out) {
  const std::vector<int> ms = c.resolutions.empty() ? std::vector<int>{c.geometry.m} : c.resolutions;
  SolveOutcome o;
  int used = ms.front();
  for (int m : ms) {
    used = m;
    const Grid g = make_grid(c.geometry, m);
    sd_out = make_seed(c, g, a, k);
    HomotopyConfig h = make_homotopy(c, g);
    h.keep_states = false;
    o = run_homotopy(h, sd_out);
    if (o.kind != OutcomeKind::NonConvergence) break;
  }
  return {o, used};
}

inline Plan plan_e3(const Config& c, const RunOptions& opt) {
  Plan p;
  p.header = {"a", "k", "m_used", "outcome", "t_final", "max_gamma", "classification", "I1", "I2", "I3",
              "sigma_term", "c1", "bound_holds", "limit_status", "limit_gain", "message"};
  const std::vector<double> as = c.a_values.empty() ? std::vector<double>{c.seed.a} : c.a_values;
  const std::vector<double> ks = c.k_values.empty() ? std::vector<double>{c.seed.k} : c.k_values;
  std::uint64_t idx = 0;
  for (double a : as)
    for (double k : ks) {
      const std::uint64_t seed = c.rng_seed * 1000003ULL + idx++;
      p.jobs.push_back({{a, k}, [c, a, k, seed, opt]() {
        SeedData sd;
        auto [o, used] = escalate(c, a, k, sd);
        const Grid& g = sd.grid;
        NonexistenceIntegrals ni;
        bool have_ni = false;
        Field Wa;
        if (o.kind == OutcomeKind::BlowUp && sup_norm(o.w_tilde) > 0) Wa = o.w_tilde;
        else if (o.kind == OutcomeKind::Solution && sup_norm(o.w) > 0)
          Wa = o.w / std::sqrt(lw_pointwise(g, o.w).maxCoeff());
        if (Wa.size() && sd.tau.kind == "plateau") {
          ni = nonexistence_integrals(sd, Wa, a);
          have_ni = true;
        }
        std::mt19937_64 rng(seed);
        const LimitResult lr = limit_fixed_point(g, sd.dlog_tau_a(), 1.0, detail::random_field(rng, g.m));
        const double nan = std::numeric_limits<double>::quiet_NaN();
        JobResult jr;
        jr.nonconvergence = o.kind == OutcomeKind::NonConvergence;
        jr.rows = {{num(a), num(k), std::to_string(used), to_string(o.kind), num(o.t_final),
                  num(detail::max_gamma(o.trace)), to_string(o.classification), num(have_ni ? ni.I1 : nan),
                  num(have_ni ? ni.I2 : nan), num(have_ni ? ni.I3 : nan), num(have_ni ? ni.sigma_term : nan),
                  num(have_ni ? ni.c1 : nan), have_ni ? (ni.bound_holds ? "true" : "false") : "n/a",
                  to_string(lr.status), num(lr.gain), o.message}};
        const std::string stem = detail::tag("a", a) + "_" + detail::tag("k", k);
        jr.files[trace_name(stem)] = trace_table(o.trace).csv();
        if (opt.trace && o.phi.size()) jr.files["states/" + stem + ".csv"] = state_table(g, o.phi, o.w).csv();
        if (have_ni) jr.plot_lines["plot_a_I2.dat"] = {num(k) + " " + num(a) + " " + num(ni.I2)};
        jr.plot_lines["plot_t_gamma.dat"] = detail::plot_t_gamma(o.trace, stem);
        jr.report = detail::outcome_json(o);
        jr.report["m_used"] = used;
        return jr;
      }});
    }
  return p;
}

inline Plan plan_e4(const Config& c, const RunOptions& opt) {
  Plan p;
  p.header = {"a", "verdict", "route", "reason", "aux_outcome", "aux_t_final", "aux_max_gamma", "lich", "vec",
              "hamiltonian_rel", "momentum_rel", "lw_sup", "yamabe_sign", "limit_status"};
  const std::vector<double> as = c.a_values.empty() ? std::vector<double>{c.seed.a} : c.a_values;
  std::uint64_t idx = 0;
  for (double a : as) {
    const std::uint64_t seed = c.rng_seed * 1000003ULL + idx++;
    p.jobs.push_back({{a}, [c, a, seed, opt]() {
      // the configured sigma is the auxiliary one; the answer has sigma = 0
      const Grid g = make_grid(c.geometry, c.geometry.m);
      const SeedData sd = make_seed(c, g, a, c.seed.k);
      const double nan = std::numeric_limits<double>::quiet_NaN();
      const YamabeReport y = yamabe_sign(g);
      std::mt19937_64 rng(seed);
      const LimitResult lr = limit_fixed_point(g, sd.dlog_tau_a(), 1.0, detail::random_field(rng, g.m));
      JobResult jr;
      const std::string stem = detail::tag("a", a);
      if (y.sign <= 0) {
        jr.rows = {{num(a), "NotFound", "-", "Yamabe sign is not positive", "-", num(nan), num(nan), num(nan),
                  num(nan), num(nan), num(nan), num(nan), std::to_string(y.sign), to_string(lr.status)}};
        return jr;
      }
      HomotopyConfig h = make_homotopy(c, g);
      const SigmaZeroResult r = sigma_zero_solution(h, sd);
      double hr = nan, mr = nan;
      if (r.found) {
        SeedData zero = sd;
        zero.k = 0.0;
        const auto cr = verify_constraints(zero, r.phi, r.w);
        hr = cr.hamiltonian_rel;
        mr = cr.momentum_rel;
        if (opt.trace) jr.files["states/" + stem + ".csv"] = state_table(g, r.phi, r.w).csv();
      }
      jr.nonconvergence = r.aux.kind == OutcomeKind::NonConvergence;
      jr.rows = {{num(a), r.found ? "Solution" : "NotFound", r.route.empty() ? "-" : r.route, r.reason,
                to_string(r.aux.kind), num(r.aux.t_final), num(detail::max_gamma(r.aux.trace)),
                num(r.found ? r.check.lich : nan), num(r.found ? r.check.vec : nan), num(hr), num(mr),
                num(r.found ? r.lw_sup : nan), std::to_string(y.sign), to_string(lr.status)}};
      jr.files[trace_name(stem)] = trace_table(r.aux.trace).csv();
      jr.report = detail::outcome_json(r.aux);
      jr.report["sigma_zero"] = {{"found", r.found}, {"route", r.route}, {"reason", r.reason}};
      return jr;
    }});
  }
  return p;
}

inline Plan plan_e5(const Config& c, const RunOptions& opt) {
  Plan p;
  p.header = {"t", "verdict", "reason", "gap", "a_lich", "a_vec", "b_lich", "b_vec", "a_hamiltonian_rel",
              "a_momentum_rel", "b_hamiltonian_rel", "b_momentum_rel", "branch_a", "branch_b"};
  const std::vector<double> ts = c.t_values.empty() ? std::vector<double>{0.1} : c.t_values;
  for (double t : ts) {
    p.jobs.push_back({{t}, [c, t, opt]() {
      const Grid g = make_grid(c.geometry, c.geometry.m);
      const SeedData sd = make_seed(c, g, c.seed.a, c.seed.k);
      const double nan = std::numeric_limits<double>::quiet_NaN();
      JobResult jr;
      const std::string stem = detail::tag("t", t);
      const YamabeReport y = yamabe_sign(g);
      if (y.sign <= 0) {
        jr.rows = {{num(t), "NotFound", "Yamabe sign is not positive", num(nan), num(nan), num(nan), num(nan),
                  num(nan), num(nan), num(nan), num(nan), num(nan), "-", "-"}};
        return jr;
      }
      HomotopyConfig base = make_homotopy(c, g);
      base.t_schedule.clear();
      const SecondSolution ss = find_second_solution(base, sd, t);
      double ah = nan, am = nan, bh = nan, bm = nan;
      if (ss.found) {
        const auto ca = verify_constraints(ss.seed, ss.phi_a, ss.w_a);
        const auto cb = verify_constraints(ss.seed, ss.phi_b, ss.w_b);
        ah = ca.hamiltonian_rel, am = ca.momentum_rel, bh = cb.hamiltonian_rel, bm = cb.momentum_rel;
      }
      jr.rows = {{num(t), ss.found ? "TwoSolutions" : "NotFound", ss.reason, num(ss.found ? ss.gap : nan),
                num(ss.found ? ss.check_a.lich : nan), num(ss.found ? ss.check_a.vec : nan),
                num(ss.found ? ss.check_b.lich : nan), num(ss.found ? ss.check_b.vec : nan), num(ah), num(am),
                num(bh), num(bm), to_string(ss.branch_a.kind), to_string(ss.branch_b.kind)}};
      jr.files[trace_name(stem + "_A")] = trace_table(ss.branch_a.trace).csv();
      jr.files[trace_name(stem + "_B")] = trace_table(ss.branch_b.trace).csv();
      if (opt.trace && ss.found) {
        jr.files["states/" + stem + "_A.csv"] = state_table(g, ss.phi_a, ss.w_a).csv();
        jr.files["states/" + stem + "_B.csv"] = state_table(g, ss.phi_b, ss.w_b).csv();
      }
      jr.plot_lines["plot_gap_t.dat"] = {num(t) + " " + num(ss.found ? ss.gap : 0.0)};
      jr.report = json{{"found", ss.found}, {"reason", ss.reason}, {"branch_a", detail::outcome_json(ss.branch_a)},
                       {"branch_b", detail::outcome_json(ss.branch_b)}};
      return jr;
    }});
  }
  return p;
}

inline Plan plan_validate(const Config& c, const RunOptions& opt) {
  Plan p;
  p.header = {"item", "value"};
  p.jobs.push_back({{0.0}, [c, opt]() {
    const Grid g = make_grid(c.geometry, c.geometry.m);
    const SeedData sd = make_seed(c, g, c.seed.a, c.seed.k);
    const SeedReport r = validate_seed(sd);
    const YamabeReport y = yamabe_sign(g);
    JobResult jr;
    std::vector<std::pair<std::string, std::string>> items{
        {"tau_positive", r.tau_positive ? "true" : "false"},
        {"tau_min", num(r.tau_min)},
        {"ckv_present", r.ckv_present ? "true" : "false"},
        {"ckv_note", r.ckv_note},
        {"sigma_trivial", r.sigma_trivial ? "true" : "false"},
        {"certificate_present", r.certificate.present ? "true" : "false"},
        {"certificate_c", num(r.certificate.c)},
        {"certificate_nodes_off_V", std::to_string(r.certificate.nodes_off_V)},
        {"collar_ratio_max", num(r.certificate.max_ratio_in_collars)},
        {"support_avoids_V", r.support_avoids_V ? "true" : "false"},
        {"hypotheses_ok", r.hypotheses_ok ? "true" : "false"},
        {"yamabe_lambda1", num(y.lambda1)},
        {"yamabe_sign", std::to_string(y.sign)}};
    bool receipt_ok = true;
    if (sd.sigma.kind != TTKind::Zero) {
      const oracle::Receipt rc = tt_receipt(g, sd.sigma);
      receipt_ok = rc.pass();
      items.push_back({"tt_receipt_rate", num(rc.rate)});
      items.push_back({"tt_receipt_pass", receipt_ok ? "true" : "false"});
    }
    // strict mode treats a missing hypothesis or receipt as a failed run
    jr.nonconvergence = !receipt_ok || (c.seed.nonexistence && !r.hypotheses_ok);
    for (auto& [k, v] : items) {
      jr.report[k] = v;
      jr.rows.push_back({k, v});
    }
    return jr;
  }});
  return p;
}

inline Plan plan_oracle(const Config& c, const RunOptions&) {
  Plan p;
  p.header = {"formula", "m", "error", "rate", "pass"};
  p.jobs.push_back({{0.0}, [c]() {
    const auto rs = oracle_suite(c.resolutions.empty() ? std::vector<int>{32, 64, 128} : c.resolutions);
    JobResult jr;
    bool all = true;
    json arr = json::array();
    for (const auto& r : rs) {
      for (std::size_t i = 0; i < r.resolutions.size(); ++i)
        jr.rows.push_back({r.formula, std::to_string(r.resolutions[i]), num(r.errors[i]), num(r.rate),
                           r.pass() ? "true" : "false"});
      all = all && r.pass();
      arr.push_back(json{{"formula", r.formula}, {"rate", r.rate}, {"pass", r.pass()}, {"errors", r.errors}});
    }
    jr.nonconvergence = !all;
    jr.report["receipts"] = arr;
    return jr;
  }});
  return p;
}

inline Plan make_plan(const Config& c, const RunOptions& opt) {
  if (c.experiment == "E1-existence") return plan_e1(c, opt);
  if (c.experiment == "E2-blowup-limit") return plan_e2(c, opt);
  if (c.experiment == "E3-nonexistence-sweep") return plan_e3(c, opt);
  if (c.experiment == "E4-sigma-zero") return plan_e4(c, opt);
  if (c.experiment == "E5-nonuniqueness") return plan_e5(c, opt);
  if (c.experiment == "validate") return plan_validate(c, opt);
  return plan_oracle(c, opt);
}

// ---------------------------------------------------------------- execution

struct RunReport {
  int exit_code = 0;
  std::size_t rows = 0;
  std::vector<std::string> files;
  bool any_nonconvergence = false;
};

namespace detail {

inline void write_file(const fs::path& p, const std::string& body) {
  fs::create_directories(p.parent_path());
  std::ofstream o(p, std::ios::binary);
  o << body;
  if (!o) throw Error(ErrorCode::ConfigError, "cannot write " + p.string());
}

inline std::string key_string(const std::vector<double>& key) {
  std::string s;
  for (double v : key) s += (s.empty() ? "" : ",") + num(v);
  return s;
}

struct Part {
  std::vector<std::string> prefix_cols;  // sweep axis values
  std::vector<double> prefix_key;
  std::string file_prefix;
  Plan plan;
};

/// Runs every job of every part in one pool, then merges rows by key.
inline RunReport execute(const Config& c, const std::vector<std::string>& axes, std::vector<Part> parts,
                         const fs::path& out, const RunOptions& opt, const std::string& mode) {
  std::vector<Job> jobs;
  std::vector<std::size_t> owner;
  for (std::size_t i = 0; i < parts.size(); ++i)
    for (auto& j : parts[i].plan.jobs) {
      Job jj = j;
      jj.key.insert(jj.key.begin(), parts[i].prefix_key.begin(), parts[i].prefix_key.end());
      jobs.push_back(jj);
      owner.push_back(i);
    }
  std::vector<JobResult> res = run_jobs(jobs, opt.workers, opt.verbose);

  std::vector<std::size_t> order(res.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return res[x].key < res[y].key; });

  RunReport rep;
  Table summary;
  summary.header = axes;
  const auto& h0 = parts.front().plan.header;
  summary.header.insert(summary.header.end(), h0.begin(), h0.end());
  std::map<std::string, std::string> files;
  std::map<std::string, std::vector<std::string>> plots;
  json reports = json::object();
  for (std::size_t i : order) {
    const Part& part = parts[owner[i]];
    JobResult& r = res[i];
    rep.any_nonconvergence = rep.any_nonconvergence || r.nonconvergence;
    for (const auto& row : r.rows) {
      std::vector<std::string> cells = part.prefix_cols;
      cells.insert(cells.end(), row.begin(), row.end());
      summary.rows.push_back(cells);
    }
    for (auto& [name, body] : r.files) files[part.file_prefix + name] = body;
    for (auto& [name, lines] : r.plot_lines) {
      auto& dst = plots[name];
      for (auto& l : lines) dst.push_back(part.file_prefix.empty() ? l : part.file_prefix + " " + l);
    }
    reports[part.file_prefix + key_string(r.key)] = r.report;
  }
  files["summary.csv"] = summary.csv();
  for (auto& [name, lines] : plots) {
    std::string body = "# " + name + "\n";
    for (auto& l : lines) body += l + "\n";
    files[name] = body;
  }

  fs::create_directories(out);
  json flist = json::array();
  for (auto& [name, body] : files) {
    write_file(out / name, body);
    flist.push_back(json{{"name", name}, {"bytes", body.size()}});
    rep.files.push_back(name);
  }
  rep.rows = summary.rows.size();

  json manifest;
  manifest["version"] = kVersion;
  manifest["mode"] = mode;
  manifest["experiment"] = c.experiment;
  manifest["config"] = c.raw;
  manifest["options"] = json{{"strict", opt.strict}, {"trace", opt.trace}};
  manifest["files"] = flist;
  manifest["reports"] = reports;
  manifest["summary_rows"] = rep.rows;
  if (c.experiment == "validate" || c.experiment == "oracle-check" || c.experiment == "E1-existence") {
    const Grid g = make_grid(c.geometry, c.geometry.m);
    const YamabeReport y = yamabe_sign(g);
    manifest["yamabe"] = json{{"lambda1", y.lambda1}, {"sign", y.sign}, {"rayleigh", y.rayleigh}};
  }
  write_file(out / "manifest.json", manifest.dump(2) + "\n");
  rep.exit_code = (opt.strict && rep.any_nonconvergence) ? 1 : 0;
  return rep;
}

}  // namespace detail

inline RunReport run_experiment(const Config& c, const fs::path& out, const RunOptions& opt) {
  std::vector<detail::Part> parts{{{}, {}, "", make_plan(c, opt)}};
  return detail::execute(c, {}, std::move(parts), out, opt, "run");
}

/// Cartesian product over the config's sweep block, all points through one pool.
inline RunReport run_sweep(const Config& c, const fs::path& out, const RunOptions& opt) {
  if (c.sweep.is_null() || c.sweep.empty()) throw ConfigError("sweep needs a 'sweep' block in the config");
  std::vector<std::string> axes;
  std::vector<std::vector<double>> values;
  for (auto it = c.sweep.begin(); it != c.sweep.end(); ++it) {  // json objects iterate in key order
    axes.push_back(it.key());
    try {
      values.push_back(it->get<std::vector<double>>());
    } catch (const json::exception&) {
      throw ConfigError("sweep." + it.key() + " must be a list of numbers");
    }
  }
  std::vector<detail::Part> parts;
  std::vector<std::size_t> idx(axes.size(), 0);
  for (;;) {
    Config cc = c;
    detail::Part part;
    std::string prefix = "points/";
    for (std::size_t i = 0; i < axes.size(); ++i) {
      const double v = values[i][idx[i]];
      const std::string& ax = axes[i];
      if (ax == "a") cc.seed.a = v, cc.a_values.clear();
      else if (ax == "k") cc.seed.k = v, cc.k_values.clear();
      else if (ax == "m") cc.geometry.m = static_cast<int>(v), cc.resolutions.clear();
      else if (ax == "gamma_max") cc.homotopy.gamma_max = v, cc.gamma_max_values.clear();
      else if (ax == "t") cc.homotopy.t_end = v, cc.t_values = {v};
      part.prefix_cols.push_back(num(v));
      part.prefix_key.push_back(v);
      prefix += (i ? "_" : "") + detail::tag(ax.c_str(), v);
    }
    part.file_prefix = prefix + "/";
    part.plan = make_plan(cc, opt);
    parts.push_back(std::move(part));
    std::size_t i = 0;
    for (; i < axes.size(); ++i) {
      if (++idx[i] < values[i].size()) break;
      idx[i] = 0;
    }
    if (i == axes.size()) break;
  }
  return detail::execute(c, axes, std::move(parts), out, opt, "sweep");
}

struct ReplayReport {
  int exit_code = 0;
  std::vector<std::pair<std::string, bool>> files;  // name, identical
};

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Re-runs a manifest's config into `out` and compares every recorded CSV.
inline ReplayReport replay(const fs::path& manifest_path, const fs::path& out, int workers) {
  json man;
  try {
    man = json::parse(slurp(manifest_path));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("unreadable manifest: ") + e.what());
  }
  if (!man.contains("config") || !man.contains("files")) throw ConfigError("manifest lacks config or files");
  const Config c = parse_config(man["config"]);
  RunOptions opt;
  opt.workers = workers;
  opt.strict = man["options"].value("strict", false);
  opt.trace = man["options"].value("trace", false);
  const std::string mode = man.value("mode", "run");
  if (mode == "sweep") run_sweep(c, out, opt);
  else run_experiment(c, out, opt);
  ReplayReport rep;
  const fs::path src = manifest_path.parent_path();
  for (const auto& f : man["files"]) {
    const std::string name = f["name"].get<std::string>();
    if (name.size() < 4 || name.substr(name.size() - 4) != ".csv") continue;
    const bool same = fs::exists(out / name) && slurp(src / name) == slurp(out / name);
    rep.files.push_back({name, same});
    if (!same) rep.exit_code = 1;
  }
  return rep;
}

}  // namespace conflab::exp
