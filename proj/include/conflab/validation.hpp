#pragma once

// Checks shared by the tests and the acceptance run: oracle receipts at
// m = 32, 64, 128 (max nodal error over fixed sample nodes plus the fitted
// rate), the oracle-side orthogonality integral, and randomized
// Lichnerowicz problems for the bracket, comparison and covariance checks.

#include <array>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "conflab/geometry.hpp"
#include "conflab/oracle.hpp"
#include "conflab/scalar_solver.hpp"
#include "conflab/seed.hpp"

namespace conflab {

struct OracleCase {
  std::string name;
  Backend backend;
  int n;
  WarpProfile warp;
};

inline std::vector<OracleCase> default_oracle_cases() {
  return {{"torus", Backend::WarpedTorus, 3, WarpProfile::cosine(1.0, 0.3)},
          {"sphere", Backend::SphericalCylinder, 4, WarpProfile::cosine(1.0, 0.2)}};
}

namespace detail {

// generic test field, neither even nor odd
inline double probe(double s) { return std::sin(s) + 0.3 * std::cos(2.0 * s) + 0.1; }

using NodeError = std::function<double(const Grid&, const oracle::ProductGrid&, int)>;

inline oracle::Receipt sweep_receipt(const std::string& id, const OracleCase& oc, NodeError err,
                                     const std::vector<int>& ms) {
  std::vector<double> errs;
  for (int m : ms) {
    const Grid g = build_grid(oc.backend, oc.n, m, oc.warp, 2);
    const auto pg = oracle::product_grid_for(g);
    double e = 0.0;
    for (int j = 0; j < m; j += m / 16) e = std::max(e, err(g, pg, j));
    errs.push_back(e);
  }
  return oracle::make_receipt(id + "-" + oc.name, ms, errs);
}

}  // namespace detail

inline std::vector<oracle::Receipt> oracle_suite(const std::vector<int>& ms = {32, 64, 128}) {
  using namespace oracle;
  std::vector<Receipt> out;
  for (const auto& oc : default_oracle_cases()) {
    const VectorFn Wn = lift_vector(detail::probe, oc.n);
    const ScalarFn U = lift_scalar(detail::probe);

    out.push_back(detail::sweep_receipt("curvature", oc, [](const Grid& g, const ProductGrid& pg, int j) {
      return std::abs(g.R[j] - oracle_curvature(pg, fiber_point(g, g.s[j])));
    }, ms));

    out.push_back(detail::sweep_receipt("laplacian", oc, [U](const Grid& g, const ProductGrid& pg, int j) {
      const Field Lu = laplacian_apply(g, sample(g, detail::probe));
      return std::abs(Lu[j] - oracle_laplacian(pg, U, fiber_point(g, g.s[j])));
    }, ms));

    out.push_back(detail::sweep_receipt("lw-norm2", oc, [Wn](const Grid& g, const ProductGrid& pg, int j) {
      const Field lw = lw_pointwise(g, sample(g, detail::probe));
      const auto X = fiber_point(g, g.s[j]);
      const Mat T = oracle_lw(pg, Wn, X);
      return std::abs(lw[j] - oracle_norm2(pg, T, X));
    }, ms));

    out.push_back(detail::sweep_receipt("lstarl", oc, [Wn](const Grid& g, const ProductGrid& pg, int j) {
      const Field ll = lstarl_apply(g, sample(g, detail::probe));
      return std::abs(ll[j] - oracle_lstarl(pg, Wn, fiber_point(g, g.s[j]))[0]);
    }, ms));

    for (TTKind kind : {TTKind::TangentialParallel, TTKind::Diagonal}) {
      const Grid g = build_grid(oc.backend, oc.n, ms.back(), oc.warp, 2);
      SigmaParams sp;
      sp.centers = {1.0};
      sp.attach_receipt = false;
      TTTensorSpec spec = make_sigma(g, kind, sp).spec;
      Receipt r = tt_receipt(g, spec);
      r.formula = std::string("tt-") + to_string(kind) + "-" + oc.name;
      out.push_back(r);
    }
  }
  return out;
}

/// Line integral of <sigma, LW> sqrt(det g) ds along the fiber sample point,
/// with LW and the pairing taken from the full-tensor oracle. For the
/// tangential family this is the divergence-free orthogonality, not a
/// property of the reduced assembly.
inline double oracle_pairing_integral(const Grid& g, const TTTensorSpec& sig, std::function<double(double)> w,
                                      double scale = 1.0) {
  const auto pg = oracle::product_grid_for(g);
  const auto S = oracle::lift_tt(pg, sig, scale);
  const auto W = oracle::lift_vector(std::move(w), g.n);
  double acc = 0.0;
  for (int j = 0; j < g.m; ++j) {
    const auto X = oracle::fiber_point(g, g.s[j]);
    const double vol = std::sqrt(pg.metric(X).determinant());
    acc += oracle::oracle_pair(pg, S(X), oracle::oracle_lw(pg, W, X), X) * vol * g.h;
  }
  return acc;
}

/// sum_{k<=4} (a_k cos ks + b_k sin ks), standard normal coefficients.
inline std::function<double(double)> random_trig(std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  std::array<double, 4> a, b;
  for (int k = 0; k < 4; ++k) a[k] = nd(rng), b[k] = nd(rng);
  return [a, b](double s) {
    double v = 0.0;
    for (int k = 0; k < 4; ++k) v += a[k] * std::cos((k + 1) * s) + b[k] * std::sin((k + 1) * s);
    return v;
  };
}

// ---- randomized Lichnerowicz problems ----

/// c0 + sum_{k<=3} (a_k cos ks + b_k sin ks) with |a_k|, |b_k| <= amp / 3.
inline Field random_smooth(std::mt19937_64& rng, const Grid& g, double c0, double amp) {
  std::uniform_real_distribution<double> u(-amp / 3.0, amp / 3.0);
  double a[3], b[3];
  for (int k = 0; k < 3; ++k) a[k] = u(rng), b[k] = u(rng);
  return sample(g, [&](double s) {
    double v = c0;
    for (int k = 0; k < 3; ++k) v += a[k] * std::cos((k + 1) * s) + b[k] * std::sin((k + 1) * s);
    return v;
  });
}

struct RandomProblem {
  Grid grid;
  LichProblem problem;
};

/// Order-2 problem on a random warped torus (n = 3) or spherical cylinder
/// (n = 4); the coefficient may change sign, tau^2 and w^2 stay positive.
inline RandomProblem random_lich_problem(std::mt19937_64& rng, int m = 64) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const bool sphere = u(rng) < 0.5;
  const Grid g = build_grid(sphere ? Backend::SphericalCylinder : Backend::WarpedTorus, sphere ? 4 : 3, m,
                            WarpProfile::cosine(1.0 + u(rng), 0.3 * u(rng)), 2);
  const Field coeff = random_smooth(rng, g, 0.5, 1.5);
  const Field tau2 = random_smooth(rng, g, 2.0 + u(rng), 1.5).cwiseAbs2();
  const Field wsq = random_smooth(rng, g, 1.5, 1.2).cwiseAbs2();
  return {g, LichProblem::on(g, coeff, tau2, wsq)};
}

struct BracketCheck {
  bool in_bracket = true, monotone = true, converged = true;
  double endpoint_gap = 0.0;  // sup |u_upper - u_lower|
  double tol_u = 0.0;         // 2 tol in u, see below
};

/// Runs the monotone iteration from both ends of the certified bracket. The
/// residual tolerance is converted to a tolerance on u through the sup of the
/// solution, so "coincide within 2 tol" is relative.
inline BracketCheck bracket_check(const LichProblem& p, const SolverTol& tol = {}) {
  const Bracket b = build_bracket(p, tol);
  const MonotoneResult up = solve_monotone(p, b, StartEnd::Upper, tol);
  const MonotoneResult lo = solve_monotone(p, b, StartEnd::Lower, tol);
  BracketCheck r;
  r.in_bracket = up.stayed_in_bracket && lo.stayed_in_bracket;
  r.monotone = up.monotone && lo.monotone;
  r.converged = up.converged && lo.converged;
  r.endpoint_gap = sup_norm(up.u - lo.u);
  r.tol_u = 2.0 * tol.res * sup_norm(up.u);
  return r;
}

/// Solutions for w0^2 <= w1^2 (same coefficient and tau); returns
/// max(u0 - u1), which the comparison principle says is <= 0.
inline double ordering_violation(std::mt19937_64& rng, int m = 64) {
  RandomProblem rp = random_lich_problem(rng, m);
  LichProblem p0 = rp.problem, p1 = rp.problem;
  p1.wsq = p0.wsq + random_smooth(rng, rp.grid, 1.0, 0.9).cwiseAbs2();
  const Field u0 = solve_lichnerowicz(p0, Field::Ones(m)).u;
  const Field u1 = solve_lichnerowicz(p1, Field::Ones(m)).u;
  return (u0 - u1).maxCoeff();
}

struct CovarianceCheck {
  double solve_gap = 0.0;     // sup |solve(transformed) - u / psi| / sup(u / psi)
  double integral_N = 0.0;    // relative error of the k = N identity
  double integral_2N = 0.0;   // and of k = 2N
};

inline CovarianceCheck covariance_check(const LichProblem& p, const Field& psi, const SolverTol& tol = {}) {
  const Field u = solve_lichnerowicz(p, Field::Ones(p.m()), tol).u;
  const auto [q, uhat] = conformal_transform(p, u, psi);
  const Field v = solve_lichnerowicz(q, Field::Ones(q.m()), tol).u;
  CovarianceCheck r;
  r.solve_gap = sup_norm(v - uhat) / sup_norm(uhat);
  const double N = p.N();
  for (double k : {N, 2.0 * N}) {
    const double lhs = power_integral(q, uhat, k);
    const double rhs =
        (psi.array().pow(N - k) * u.array().pow(k) * p.st.wnode.array()).sum() * p.st.h;
    (k == N ? r.integral_N : r.integral_2N) = std::abs(lhs - rhs) / std::abs(rhs);
  }
  return r;
}

}  // namespace conflab
