#pragma once

// Lichnerowicz-type equation
//   kappa Delta u + coeff u + (n-1)/n tau2 u^{N-1} - wsq u^{-N-1} = 0
// with sub/supersolution brackets, an order-preserving monotone iteration, a
// damped Newton solver and the discrete conformal change of the problem.

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "conflab/geometry.hpp"

namespace conflab {

struct LichProblem {
  Stencil st;
  int n = 3;
  Field coeff, tau2, wsq;

  double N() const { return 2.0 * n / (n - 2.0); }
  double kappa() const { return 4.0 * (n - 1.0) / (n - 2.0); }
  double ctau() const { return (n - 1.0) / n; }
  int m() const { return st.m(); }

  static LichProblem on(const Grid& g, Field coeff, Field tau2, Field wsq) {
    return LichProblem{Stencil::of(g), g.n, std::move(coeff), std::move(tau2), std::move(wsq)};
  }
};

struct SolverTol {
  double res = 1e-10;   // scaled sup-norm residual
  double cert = 1e-12;  // bracket certification
  int max_iters = 20000;
  int newton_iters = 60;
};

inline void require_positive(const Field& u, const char* what) {
  if (!(u.minCoeff() > 0.0)) throw Error(ErrorCode::NonPositiveInput, what);
}

/// The zeroth-order part G(u), so that residual = kappa Delta u + G(u).
inline Field lich_nonlinearity(const LichProblem& p, const Field& u) {
  const double N = p.N();
  return (p.coeff.array() * u.array() + p.ctau() * p.tau2.array() * u.array().pow(N - 1.0) -
          p.wsq.array() * u.array().pow(-N - 1.0))
      .matrix();
}

inline Field lich_derivative(const LichProblem& p, const Field& u) {
  const double N = p.N();
  return (p.coeff.array() + p.ctau() * (N - 1.0) * p.tau2.array() * u.array().pow(N - 2.0) +
          (N + 1.0) * p.wsq.array() * u.array().pow(-N - 2.0))
      .matrix();
}

inline Field residual(const LichProblem& p, const Field& u) {
  require_positive(u, "residual needs min u > 0");
  return p.kappa() * laplacian_apply(p.st, u) + lich_nonlinearity(p, u);
}

/// Sup-norm residual divided by the size of the zeroth-order terms (at least 1).
inline double scaled_residual(const LichProblem& p, const Field& u) {
  const Field r = residual(p, u);
  const double N = p.N();
  const double scale =
      std::max({1.0, sup_norm(p.coeff.cwiseProduct(u)),
                sup_norm((p.ctau() * p.tau2.array() * u.array().pow(N - 1.0)).matrix()),
                sup_norm((p.wsq.array() * u.array().pow(-N - 1.0)).matrix())});
  return sup_norm(r) / scale;
}

struct Bracket {
  Field u_minus, u_plus;
};

inline bool is_supersolution(const LichProblem& p, const Field& u, double tol) {
  return residual(p, u).minCoeff() >= -tol;
}
inline bool is_subsolution(const LichProblem& p, const Field& u, double tol) {
  return residual(p, u).maxCoeff() <= tol;
}

/// Positive solution of the linear problem kappa Delta z + beta z = rhs.
inline Field solve_linear_shifted(const Stencil& st, double kappa, const Field& beta,
                                  const Field& rhs) {
  SpMat A = kappa * stiffness(st);
  const Field M = mass(st);
  for (int j = 0; j < st.m(); ++j) A.coeffRef(j, j) += beta[j] * M[j];
  Eigen::SimplicialLDLT<SpMat> ldlt(A);
  if (ldlt.info() != Eigen::Success)
    throw Error(ErrorCode::SingularJacobian, "shifted operator not factorizable");
  Field b = M.cwiseProduct(rhs);
  return ldlt.solve(b);
}

inline Bracket build_bracket(const LichProblem& p, const SolverTol& tol = {}) {
  const int m = p.m();
  Bracket b;
  // supersolution: a large constant
  double M = 1.0;
  int tries = 0;
  while (!is_supersolution(p, Field::Constant(m, M), 0.0) && tries < 400) {
    M *= 2.0;
    ++tries;
  }
  if (tries == 400) throw Error(ErrorCode::BracketFailure, "no constant supersolution");
  b.u_plus = Field::Constant(m, M);

  if (p.wsq.maxCoeff() <= 0.0)
    throw Error(ErrorCode::BracketFailure, "w^2 vanishes identically: only u = 0 survives");

  if (p.wsq.minCoeff() > 0.0) {
    double e = std::min(1.0, M);
    int k = 0;
    while (!is_subsolution(p, Field::Constant(m, e), tol.cert) && k < 200) {
      e *= 0.5;
      ++k;
    }
    if (k == 200) throw Error(ErrorCode::BracketFailure, "constant subsolution underflowed");
    b.u_minus = Field::Constant(m, e);
    return b;
  }
  // eps * zeta with kappa Delta zeta + (|coeff| + tau2) zeta = wsq
  Field beta = p.coeff.cwiseAbs() + p.tau2;
  if (beta.maxCoeff() <= 0.0) beta.setConstant(1.0);
  const Field zeta = solve_linear_shifted(p.st, p.kappa(), beta, p.wsq);
  if (!(zeta.minCoeff() > 0.0))
    throw Error(ErrorCode::BracketFailure, "auxiliary linear solution is not positive");
  double e = std::min(1.0, M / zeta.maxCoeff());
  for (int k = 0; k < 60; ++k) {
    const Field cand = e * zeta;
    if (is_subsolution(p, cand, tol.cert)) {
      b.u_minus = cand;
      return b;
    }
    e *= 0.5;
  }
  throw Error(ErrorCode::BracketFailure, "epsilon underflow while certifying subsolution");
}

enum class StartEnd { Upper, Lower };

struct MonotoneResult {
  Field u;
  int iterations = 0;
  bool converged = false;
  bool stayed_in_bracket = true;
  bool monotone = true;
  std::vector<double> history;  // scaled residual per iteration
};

/// (kappa Delta + lambda) u_{k+1} = lambda u_k - G(u_k) with a nodal shift
/// lambda_j >= 1.1 sup G' over the part of the bracket the iterates can visit.
/// Requires the order-2 stencil (M-matrix).
inline MonotoneResult solve_monotone(const LichProblem& p, const Bracket& b,
                                     StartEnd start = StartEnd::Upper, const SolverTol& tol = {},
                                     double shift_factor = 1.1) {
  if (p.st.order != 2)
    throw Error(ErrorCode::GeometryMismatch, "monotone iteration needs the order-2 stencil");
  const int m = p.m();
  const double N = p.N(), ct = p.ctau();
  const SpMat S = p.kappa() * stiffness(p.st);
  const Field Mw = mass(p.st);
  MonotoneResult r;
  r.u = start == StartEnd::Upper ? b.u_plus : b.u_minus;
  const double slack = 1e-9;
  for (int it = 0; it < tol.max_iters; ++it) {
    const double sr = scaled_residual(p, r.u);
    r.history.push_back(sr);
    if (sr <= tol.res) {
      r.converged = true;
      r.iterations = it;
      return r;
    }
    Field lam(m);
    for (int j = 0; j < m; ++j) {
      const double lo = start == StartEnd::Upper ? b.u_minus[j] : r.u[j];
      const double hi = start == StartEnd::Upper ? r.u[j] : b.u_plus[j];
      double l = p.coeff[j] + ct * (N - 1.0) * p.tau2[j] * std::pow(hi, N - 2.0) +
                 (N + 1.0) * p.wsq[j] * std::pow(lo, -N - 2.0);
      lam[j] = shift_factor * std::max(l, 1e-12);
    }
    SpMat A = S;
    for (int j = 0; j < m; ++j) A.coeffRef(j, j) += lam[j] * Mw[j];
    Eigen::SimplicialLDLT<SpMat> ldlt(A);
    const Field rhs = Mw.cwiseProduct(lam.cwiseProduct(r.u) - lich_nonlinearity(p, r.u));
    Field next = ldlt.solve(rhs);
    const double sc = std::max(1.0, sup_norm(r.u));
    if (start == StartEnd::Upper) {
      if ((next - r.u).maxCoeff() > slack * sc) r.monotone = false;
    } else {
      if ((next - r.u).minCoeff() < -slack * sc) r.monotone = false;
    }
    if ((next - b.u_plus).maxCoeff() > slack * sc || (b.u_minus - next).maxCoeff() > slack * sc)
      r.stayed_in_bracket = false;
    r.u = next;
  }
  r.iterations = tol.max_iters;
  r.converged = false;
  return r;
}

struct NewtonResult {
  Field u;
  int iterations = 0;
  bool converged = false;
  std::vector<double> history;
};

inline NewtonResult solve_newton(const LichProblem& p, const Field& u0, const SolverTol& tol = {}) {
  require_positive(u0, "Newton start must be positive");
  const SpMat S = p.kappa() * stiffness(p.st);
  const Field Mw = mass(p.st);
  NewtonResult r;
  r.u = u0;
  for (int it = 0; it <= tol.newton_iters; ++it) {
    const double sr = scaled_residual(p, r.u);
    r.history.push_back(sr);
    if (sr <= tol.res) {
      r.converged = true;
      r.iterations = it;
      return r;
    }
    if (it == tol.newton_iters) break;
    SpMat J = S;
    const Field dG = lich_derivative(p, r.u);
    for (int j = 0; j < p.m(); ++j) J.coeffRef(j, j) += dG[j] * Mw[j];
    Eigen::SparseLU<SpMat> lu;
    lu.compute(J);
    if (lu.info() != Eigen::Success)
      throw Error(ErrorCode::SingularJacobian, "Lichnerowicz Jacobian is singular");
    const Field rhs = -Mw.cwiseProduct(residual(p, r.u));
    const Field du = lu.solve(rhs);
    if (!du.allFinite()) throw Error(ErrorCode::SingularJacobian, "non-finite Newton step");
    const double umin = r.u.minCoeff();
    double a = 1.0;
    while ((r.u + a * du).minCoeff() <= 0.1 * umin && a > 1e-12) a *= 0.5;
    const double r0 = sup_norm(residual(p, r.u));
    Field cand = r.u + a * du;
    for (int k = 0; k < 30 && sup_norm(residual(p, cand)) > r0 && a > 1e-6; ++k) {
      a *= 0.5;
      cand = r.u + a * du;
    }
    r.u = cand;
  }
  r.iterations = tol.newton_iters;
  throw Error(ErrorCode::NoConvergence, "Newton did not reach the residual tolerance");
}

enum class ScalarStatus { Solved, ScaleFamily };

struct ScalarOutcome {
  ScalarStatus status = ScalarStatus::Solved;
  Field u;
  std::string method;
  int iterations = 0;
};

/// Newton from u0, falling back to the monotone iteration on a certified bracket.
inline ScalarOutcome solve_lichnerowicz(const LichProblem& p, const Field& u0,
                                        const SolverTol& tol = {}) {
  ScalarOutcome out;
  if (p.wsq.cwiseAbs().maxCoeff() == 0.0 && p.coeff.cwiseAbs().maxCoeff() == 0.0 &&
      p.tau2.cwiseAbs().maxCoeff() == 0.0) {
    out.status = ScalarStatus::ScaleFamily;
    out.u = Field::Ones(p.m());
    out.method = "scale-family";
    return out;
  }
  try {
    auto nr = solve_newton(p, u0, tol);
    out.u = nr.u;
    out.method = "newton";
    out.iterations = nr.iterations;
    return out;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NoConvergence && e.code() != ErrorCode::SingularJacobian) throw;
  }
  const Bracket b = build_bracket(p, tol);
  auto mr = solve_monotone(p, b, StartEnd::Upper, tol);
  if (!mr.converged) throw Error(ErrorCode::NoConvergence, "monotone iteration stalled");
  out.u = mr.u;
  out.method = "monotone";
  out.iterations = mr.iterations;
  return out;
}

/// Conformal change g -> psi^{4/(n-2)} g of the discrete problem. Node weights
/// pick up psi^N, half-node fluxes psi_j psi_{j+1}, and the zeroth-order term
/// transforms like the scalar curvature, which makes
///   residual_new(u / psi) = psi^{1-N} residual_old(u)
/// hold exactly, node by node.
inline std::pair<LichProblem, Field> conformal_transform(const LichProblem& p, const Field& u,
                                                         const Field& psi) {
  if (!(psi.minCoeff() > 0.0)) throw Error(ErrorCode::NonPositivePsi, "psi must be positive");
  if (p.st.order != 2)
    throw Error(ErrorCode::GeometryMismatch, "conformal covariance is exact for order 2 only");
  const int m = p.m();
  const double N = p.N();
  LichProblem q = p;
  for (int j = 0; j < m; ++j) {
    q.st.wnode[j] = p.st.wnode[j] * std::pow(psi[j], N);
    q.st.chalf[j] = p.st.chalf[j] * psi[j] * psi[(j + 1) % m];
  }
  const Field Lpsi = laplacian_apply(p.st, psi);
  for (int j = 0; j < m; ++j) {
    const double f = std::pow(psi[j], 1.0 - N);
    q.coeff[j] = f * (p.kappa() * Lpsi[j] + p.coeff[j] * psi[j]);
    q.wsq[j] = p.wsq[j] * std::pow(psi[j], -2.0 * N);
  }
  return {q, u.cwiseQuotient(psi)};
}

/// Discrete integral of f^k with the problem's own volume weights.
inline double power_integral(const LichProblem& p, const Field& f, double k) {
  return (f.array().pow(k) * p.st.wnode.array()).sum() * p.st.h;
}

enum class CompareKind { Super, Sub };

struct CompareReport {
  bool certified = false;
  bool ordered = false;
  double max_violation = 0.0;
};

/// Ordering of a certified super- (sub-)solution against a solution.
inline CompareReport compare(const LichProblem& p, const Field& v, const Field& u, CompareKind kind,
                             double tol = 1e-8, const SolverTol& st = {}) {
  CompareReport r;
  r.certified = kind == CompareKind::Super ? is_supersolution(p, v, st.cert)
                                           : is_subsolution(p, v, st.cert);
  if (!r.certified) return r;
  r.max_violation = kind == CompareKind::Super ? (u - v).maxCoeff() : (v - u).maxCoeff();
  r.max_violation = std::max(0.0, r.max_violation);
  r.ordered = r.max_violation <= tol;
  return r;
}

}  // namespace conflab
