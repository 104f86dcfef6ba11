// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance <scratch dir>
//
// Every shipped config is run once into <scratch>/runs/<name> and replayed into
// <scratch>/replay/<name>; the criteria that talk about shipped experiments read
// the summary tables written there. Exit status is 0 only if every line is PASS.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "conflab/experiment.hpp"
#include "conflab/validation.hpp"

#ifndef CONFLAB_SOURCE_DIR
#define CONFLAB_SOURCE_DIR "."
#endif

using namespace conflab;
namespace ex = conflab::exp;
namespace fs = std::filesystem;

namespace {

struct Line {
  bool pass = false;
  std::string text;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// summary.csv as a list of header -> cell maps
using Row = std::map<std::string, std::string>;

std::vector<std::vector<std::string>> parse_csv(const std::string& body) {
  std::vector<std::vector<std::string>> out;
  std::vector<std::string> row;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < body.size(); ++i) {
    const char ch = body[i];
    if (quoted) {
      if (ch == '"' && i + 1 < body.size() && body[i + 1] == '"') cell += '"', ++i;
      else if (ch == '"') quoted = false;
      else cell += ch;
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      row.push_back(cell), cell.clear();
    } else if (ch == '\n') {
      row.push_back(cell), cell.clear();
      out.push_back(row), row.clear();
    } else if (ch != '\r') {
      cell += ch;
    }
  }
  if (!cell.empty() || !row.empty()) row.push_back(cell), out.push_back(row);
  return out;
}

std::vector<Row> read_summary(const fs::path& dir) {
  const auto t = parse_csv(ex::slurp(dir / "summary.csv"));
  std::vector<Row> rows;
  for (std::size_t i = 1; i < t.size(); ++i) {
    Row r;
    for (std::size_t j = 0; j < t[0].size() && j < t[i].size(); ++j) r[t[0][j]] = t[i][j];
    rows.push_back(r);
  }
  return rows;
}

double dbl(const Row& r, const std::string& key) {
  const auto it = r.find(key);
  if (it == r.end()) return std::numeric_limits<double>::quiet_NaN();
  return std::strtod(it->second.c_str(), nullptr);
}

// ------------------------------------------------------------------ criteria

Line closed_form_cmc() {
  const auto t0 = std::chrono::steady_clock::now();
  const int m = 128;
  const Grid g = build_grid(Backend::WarpedTorus, 3, m, WarpProfile::constant(1.0));
  const LichProblem p = LichProblem::on(g, Field::Zero(m), Field::Constant(m, 9.0), Field::Constant(m, 6.0));
  const ScalarOutcome o = solve_lichnerowicz(p, Field::Constant(m, 0.5));
  const double err = sup_norm(o.u - Field::Ones(m));
  const double sec = seconds_since(t0);
  return {err <= 1e-8 && sec < 1.0, fmt("CMC closed form: sup error %.2e at m=128 in %.3f s", err, sec)};
}

Line oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rs = oracle_suite({32, 64, 128});
  double worst = 1e300;
  bool ok = true;
  for (const auto& r : rs) {
    ok = ok && r.pass();
    if (!r.exact()) worst = std::min(worst, r.rate);
  }
  const double sec = seconds_since(t0);
  return {ok && worst >= 1.8 && sec < 120.0,
          fmt("oracle equivalence: %zu receipts, slowest rate %.3f, %.1f s", rs.size(), worst, sec)};
}

Line bracket_suite() {
  std::mt19937_64 rng(20240611);
  int good = 0;
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const RandomProblem rp = random_lich_problem(rng);
    const BracketCheck c = bracket_check(rp.problem);
    const bool ok = c.converged && c.in_bracket && c.monotone && c.endpoint_gap <= c.tol_u;
    good += ok;
    worst = std::max(worst, c.endpoint_gap / c.tol_u);
  }
  return {good == 20, fmt("bracketed monotone iteration: %d/20 problems ok, worst gap %.2f x (2 tol)", good, worst)};
}

Line comparison_ordering() {
  std::mt19937_64 rng(99);
  double worst = -1e300;
  for (int i = 0; i < 20; ++i) worst = std::max(worst, ordering_violation(rng));
  return {worst <= 1e-8, fmt("comparison ordering: max(u0 - u1) = %.2e over 20 pairs", worst)};
}

Line covariance() {
  std::mt19937_64 rng(31);
  const SolverTol tol;
  double gap = 0.0, iN = 0.0, i2N = 0.0;
  for (int i = 0; i < 10; ++i) {
    const RandomProblem rp = random_lich_problem(rng, 128);
    const Field psi = random_smooth(rng, rp.grid, 1.5, 0.9);
    const CovarianceCheck c = covariance_check(rp.problem, psi, tol);
    gap = std::max(gap, c.solve_gap);
    iN = std::max(iN, c.integral_N);
    i2N = std::max(i2N, c.integral_2N);
  }
  return {gap <= 5 * tol.res && iN <= 1e-8 && i2N <= 1e-8,
          fmt("conformal covariance: solve gap %.2e (bound %.0e), integral identities %.2e / %.2e", gap,
              5 * tol.res, iN, i2N)};
}

// Coupled solutions of the shipped configs, re-solved at m = 128 and at 64 for
// the rate; seeds that do not converge at 64 take the rate from 128 -> 256.
struct Closure {
  std::string name;
  bool solved = false;
  int m_lo = 64, m_hi = 128;
  double res128 = NAN, rate = NAN;
  double scale_worst = NAN;
  double tol = NAN;
};

std::vector<Closure> closure_runs(const std::vector<std::pair<std::string, ex::Config>>& configs) {
  std::vector<Closure> out;
  for (const auto& [name, c] : configs) {
    if (c.experiment != "E1-existence" && c.experiment != "E2-blowup-limit" &&
        c.experiment != "E3-nonexistence-sweep" && c.experiment != "E5-nonuniqueness")
      continue;
    auto solve = [&c = c](int m) {
      const Grid g = ex::make_grid(c.geometry, m);
      const SeedData sd = ex::make_seed(c, g, c.seed.a, c.seed.k);
      return std::make_pair(sd, ex::detail::solve_and_check(c, sd));
    };
    auto residual = [](const ex::detail::RunSummary& r) {
      return std::max(r.cons.hamiltonian_rel, r.cons.momentum_rel);
    };
    Closure cl;
    cl.name = name;
    const auto [sd, r] = solve(128);
    out.push_back(cl);
    if (!r.solved) continue;
    Closure& o = out.back();
    o.res128 = residual(r);
    o.tol = ex::make_homotopy(c, sd.grid).picard_tol;
    o.scale_worst = 0.0;
    for (double C : {0.5, 2.0, 10.0}) {
      const auto [phi, w] = scale_solution(r.o.phi, r.o.w, C, sd.grid.n);
      const ResidualCheck rc = check_solution(scale_seed(sd, C), sd.grid.R, phi, w);
      o.scale_worst = std::max({o.scale_worst, rc.lich, rc.vec});
    }
    if (const auto lo = solve(64).second; lo.solved) {
      o.rate = std::log2(residual(lo) / o.res128);
    } else if (const auto hi = solve(256).second; hi.solved) {
      o.m_lo = 128, o.m_hi = 256;
      o.rate = std::log2(o.res128 / residual(hi));
    }
    o.solved = true;
  }
  return out;
}

Line scaling(const std::vector<Closure>& cs) {
  int n = 0, good = 0;
  double worst = 0.0;
  for (const auto& c : cs) {
    if (!c.solved) continue;
    ++n;
    good += c.scale_worst <= 5 * c.tol;
    worst = std::max(worst, c.scale_worst / c.tol);
  }
  return {n > 0 && good == n, fmt("scaling covariance: %d/%d solutions, worst residual %.2f x tol", good, n, worst)};
}

Line closure(const std::vector<Closure>& cs) {
  int n = 0, good = 0;
  std::string bad, unsolved;
  for (const auto& c : cs) {
    if (!c.solved) {
      unsolved += " " + c.name;
      continue;
    }
    ++n;
    const bool ok = c.res128 <= 1e-6 && (c.res128 < 1e-12 || c.rate >= 1.8);
    good += ok;
    if (!ok) bad += fmt(" %s(%.1e, rate %.2f over m=%d..%d)", c.name.c_str(), c.res128, c.rate, c.m_lo, c.m_hi);
  }
  std::string txt = fmt("constraint closure: %d/%d solved configs with residual <= 1e-6 at m=128 and rate >= 1.8;",
                        good, n);
  txt += bad.empty() ? std::string(" all ok") : " failing:" + bad;
  if (!unsolved.empty()) txt += "; no Solution at m=128:" + unsolved;
  return {n > 0 && good == n && unsolved.empty(), txt};
}

Line orthogonality() {
  std::mt19937_64 rng(8);
  double worst = 0.0;
  for (Backend b : {Backend::WarpedTorus, Backend::SphericalCylinder}) {
    const int n = b == Backend::WarpedTorus ? 3 : 4;
    const Grid g = build_grid(b, n, 128, WarpProfile::cosine(1.0, 0.2));
    SigmaParams sp;
    sp.centers = {1.0, 4.0};
    sp.radius = 0.8;
    sp.attach_receipt = false;
    const TTTensorSpec sig = make_sigma(g, TTKind::TangentialParallel, sp).spec;
    for (int i = 0; i < 20; ++i) worst = std::max(worst, std::abs(oracle_pairing_integral(g, sig, random_trig(rng))));
  }
  return {worst <= 1e-10, fmt("divergence-free orthogonality: max |int <sigma, LW>| = %.2e over 2 x 20 W", worst)};
}

Line blowup(const fs::path& dir) {
  const auto rows = read_summary(dir);
  bool ok = rows.size() == 3;
  std::string detail;
  double prev = INFINITY;
  for (const auto& r : rows) {
    const bool bu = r.at("outcome") == "BlowUp";
    const double sup = dbl(r, "phi_tilde_sup"), res = dbl(r, "profile_residual");
    ok = ok && bu && std::abs(sup - 1.0) <= 1e-12 && res < prev;
    prev = res;
    detail += fmt(" %s:%s(max gamma %.3g)", r.at("gamma_max").c_str(), r.at("outcome").c_str(),
                  dbl(r, "max_gamma"));
  }
  return {ok, "blow-up detection at a=16, k=100:" + detail};
}

Line upward_closed(const fs::path& dir) {
  const auto rows = read_summary(dir);
  std::vector<std::tuple<double, double, bool>> pts;
  int blowups = 0;
  for (const auto& r : rows) {
    const bool b = r.at("outcome") == "BlowUp";
    blowups += b;
    pts.emplace_back(dbl(r, "a"), dbl(r, "k"), b);
  }
  int violations = 0;
  for (const auto& [a, k, b] : pts)
    if (b)
      for (const auto& [a2, k2, b2] : pts)
        if (a2 >= a && k2 >= k && !b2) ++violations;
  std::string txt = fmt("nonexistence sweep: %d/%zu BlowUp points, %d upward-closure violations", blowups,
                        pts.size(), violations);
  if (blowups == 0) txt += " (holds only vacuously: no point blew up)";
  return {!pts.empty() && violations == 0, txt};
}

Line limit_collapse(const ex::Config& c) {
  const Grid g = ex::make_grid(c.geometry, c.geometry.m);
  const double n = g.n;
  bool ok = true;
  std::string detail;
  std::mt19937_64 rng(c.rng_seed);
  for (double a : c.a_values) {
    const SeedData sd = ex::make_seed(c, g, a, c.seed.k);
    const Certificate cert = sd.certificate();
    if (!cert.present) {
      ok = false;
      detail += fmt(" a=%g:no certificate", a);
      continue;
    }
    // certify() reports the certificate of tau^a; undo the a to get the seed's c
    const double threshold = std::sqrt(n / (n - 1)) * cert.c * a;
    if (!(a > threshold)) continue;
    int collapsed = 0;
    for (int i = 0; i < 10; ++i) {
      Field V0(g.m);
      std::normal_distribution<double> nd;
      for (int j = 0; j < g.m; ++j) V0[j] = nd(rng);
      collapsed += limit_fixed_point(g, sd.dlog_tau_a(), 1.0, V0).status == LimitStatus::Collapse;
    }
    ok = ok && collapsed == 10;
    detail += fmt(" a=%g:%d/10", a, collapsed);
  }
  return {ok, "limit-equation collapse from 10 random starts:" + detail};
}

Line nonuniqueness(const std::vector<std::pair<std::string, fs::path>>& dirs, const std::set<std::string>& replayed) {
  int two = 0;
  bool decisive = true;
  std::string detail;
  for (const auto& [name, dir] : dirs) {
    const auto rows = read_summary(dir);
    decisive = decisive && rows.size() >= 3 && replayed.count(name);
    for (const auto& r : rows) {
      const std::string v = r.at("verdict");
      const double t = dbl(r, "t");
      if (v == "TwoSolutions") {
        const bool closed = dbl(r, "a_hamiltonian_rel") <= 1e-6 && dbl(r, "a_momentum_rel") <= 1e-6 &&
                            dbl(r, "b_hamiltonian_rel") <= 1e-6 && dbl(r, "b_momentum_rel") <= 1e-6;
        two += closed;
      } else if (v == "NotFound") {
        const std::string stem = ex::trace_name(ex::detail::tag("t", t));
        const std::string base = stem.substr(0, stem.size() - 4);
        decisive = decisive && fs::exists(dir / (base + "_A.csv")) && fs::exists(dir / (base + "_B.csv"));
      } else {
        decisive = false;
      }
      detail += fmt(" %s@t=%g:%s", name.c_str(), t, v.c_str());
    }
  }
  return {decisive && two > 0,
          fmt("nonuniqueness probe: verdicts %s, replayable; %d two-solution configurations;",
              decisive ? "decisive" : "NOT decisive", two) +
              detail};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path scratch = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_out");
  const fs::path cfgdir = fs::path(CONFLAB_SOURCE_DIR) / "configs";
  fs::remove_all(scratch);

  std::vector<std::pair<std::string, ex::Config>> configs;
  for (const auto& e : fs::directory_iterator(cfgdir))
    if (e.path().extension() == ".json") configs.push_back({e.path().stem().string(), ex::load_config(e.path())});
  std::sort(configs.begin(), configs.end(), [](const auto& x, const auto& y) { return x.first < y.first; });

  // run and replay every shipped config
  ex::RunOptions opt;
  opt.workers = ex::default_workers();
  std::map<std::string, fs::path> run_dir;
  std::set<std::string> replayed;
  int identical_cfgs = 0;
  std::string replay_detail;
  for (const auto& [name, c] : configs) {
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path dir = scratch / "runs" / name;
    if (!c.sweep.is_null() && !c.sweep.empty()) ex::run_sweep(c, dir, opt);
    else ex::run_experiment(c, dir, opt);
    run_dir[name] = dir;
    const auto rr = ex::replay(dir / "manifest.json", scratch / "replay" / name, opt.workers);
    const bool same = rr.exit_code == 0 && !rr.files.empty();
    if (same) replayed.insert(name), ++identical_cfgs;
    else replay_detail += " " + name;
    std::fprintf(stderr, "ran %s twice in %.1f s (%zu csv files, %s)\n", name.c_str(), seconds_since(t0),
                 rr.files.size(), same ? "identical" : "DIFFERENT");
  }

  auto find = [&](const std::string& experiment) {
    std::vector<std::pair<std::string, ex::Config>> v;
    for (const auto& nc : configs)
      if (nc.second.experiment == experiment) v.push_back(nc);
    return v;
  };

  std::vector<Line> lines;
  lines.push_back(closed_form_cmc());
  lines.push_back(oracle_equivalence());
  lines.push_back(bracket_suite());
  lines.push_back(comparison_ordering());
  lines.push_back(covariance());
  const auto closures = closure_runs(configs);
  lines.push_back(scaling(closures));
  lines.push_back(closure(closures));
  lines.push_back(orthogonality());

  const auto e2 = find("E2-blowup-limit");
  lines.push_back(e2.empty() ? Line{false, "blow-up detection: no E2 config shipped"} : blowup(run_dir[e2[0].first]));
  const auto e3 = find("E3-nonexistence-sweep");
  lines.push_back(e3.empty() ? Line{false, "nonexistence sweep: no E3 config shipped"}
                             : upward_closed(run_dir[e3[0].first]));
  lines.push_back(e3.empty() ? Line{false, "limit collapse: no E3 config shipped"} : limit_collapse(e3[0].second));
  std::vector<std::pair<std::string, fs::path>> e5dirs;
  for (const auto& [name, c] : find("E5-nonuniqueness")) e5dirs.push_back({name, run_dir[name]});
  lines.push_back(nonuniqueness(e5dirs, replayed));
  lines.push_back({identical_cfgs == static_cast<int>(configs.size()),
                   fmt("replay determinism: %d/%zu shipped configs byte-identical", identical_cfgs, configs.size()) +
                       (replay_detail.empty() ? "" : "; differing:" + replay_detail)});

  int failed = 0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::printf("%s %2zu  %s\n", lines[i].pass ? "PASS" : "FAIL", i + 1, lines[i].text.c_str());
    failed += !lines[i].pass;
  }
  std::printf("%zu/%zu criteria pass\n", lines.size() - failed, lines.size());
  return failed ? 1 : 0;
}
