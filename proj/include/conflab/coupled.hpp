#pragma once

// Coupled Lichnerowicz / vector system and its homotopy
//
//   kappa Delta psi + (tR + (1-t)f) psi + (n-1)/n T^2 psi^{N-1} = |sigma+LW|^2 psi^{-N-1}
//   -1/2 L*L W = (n-1)/n psi^N dT,                     T = t^N tau^a
//
// with the kernel direction w ~ rho handled by a multiplier, exactly as in
// the vector solver. At t = 1 the coefficient is R and (psi, W) solves the
// constraint equations; for t < 1 with f = R every point solves them for the
// data (g, t^N tau^a, k sigma).
//
// Continuation is natural in t along the schedule, with step halving, and
// switches to pseudo-arclength once halving stalls (a fold in t).

#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "conflab/diagnostics.hpp"
#include "conflab/geometry.hpp"
#include "conflab/scalar_solver.hpp"
#include "conflab/seed.hpp"
#include "conflab/tt.hpp"
#include "conflab/vector_solver.hpp"

namespace conflab {

enum class Classification { None, ProductInfty, ProductZero, ProductConst };

inline const char* to_string(Classification c) {
  switch (c) {
    case Classification::ProductInfty: return "ProductInfty";
    case Classification::ProductZero: return "ProductZero";
    case Classification::ProductConst: return "ProductConst";
    default: return "";
  }
}

enum class OutcomeKind { Solution, BlowUp, NonConvergence };

inline const char* to_string(OutcomeKind k) {
  switch (k) {
    case OutcomeKind::Solution: return "Solution";
    case OutcomeKind::BlowUp: return "BlowUp";
    default: return "NonConvergence";
  }
}

struct HomotopyConfig {
  Field f;                         // empty: chosen from the Yamabe sign
  std::vector<double> t_schedule;  // empty: 64 geometric steps 1e-3 -> 1
  double t_end = 1.0;
  double picard_tol = 1e-10;
  int max_picard = 60;
  double gamma_max = 1e6;
  double step_floor = 1e-10;
  double fold_switch = 1e-4;  // relative t-step below which arclength takes over
  int max_arclength_steps = 6000;
  double ds0 = 0.02, ds_max = 0.2;
  bool keep_states = true;
  bool scale_tau = true;  // false: tau^a is held fixed and t only moves the coefficient
  Field psi0, w0;         // optional starting guess at the first schedule point
};

inline std::vector<double> default_schedule(double t0 = 1e-3, double t1 = 1.0, int steps = 64) {
  std::vector<double> t(steps + 1);
  for (int i = 0; i <= steps; ++i) t[i] = t0 * std::pow(t1 / t0, double(i) / steps);
  t.back() = t1;
  return t;
}

/// f = max(R, 0.1) for positive Yamabe sign, otherwise 1.
inline Field default_f(const Grid& g) {
  if (yamabe_sign(g).sign > 0) return g.R.cwiseMax(0.1);
  return Field::Ones(g.m);
}

struct TraceRow {
  int step = 0;
  double t = 0.0, gamma = 0.0, tn_gamma = 0.0;
  int picard_iters = 0;
  double defect = 0.0, limit_residual = 0.0;
  std::string classification;
};

struct HomotopyTrace {
  std::vector<TraceRow> rows;
  std::vector<Field> psi, w;
  std::vector<double> turning_points;  // t values where dt/ds changes sign
};

struct SolveOutcome {
  OutcomeKind kind = OutcomeKind::NonConvergence;
  Field phi, w;
  double t_final = 0.0;
  HomotopyTrace trace;
  Classification classification = Classification::None;
  double product_limit = 0.0;
  Field phi_tilde, w_tilde;
  double profile_residual = 0.0;
  std::string message;
};

/// Relative residuals of a candidate, computed with the scalar and vector
/// solvers' own residual routines rather than the continuation's assembly.
struct ResidualCheck {
  double lich = 0.0, vec = 0.0, defect = 0.0;
  double defect_rel = 0.0;  // kernel component of the momentum source, relative
  bool ok(double tol) const { return lich <= tol && vec <= tol && defect_rel <= 100.0 * tol; }
};

/// |<F, rho>| / <|F|, rho>. The warped products carry the conformal Killing
/// field rho d_s, so the momentum equation is solvable only when this vanishes.
inline double relative_defect(const Grid& g, const Field& F) {
  const double den = pair_quadrature(g, F.cwiseAbs(), g.rho.cwiseAbs());
  return den > 0 ? std::abs(pair_quadrature(g, F, g.rho)) / den : 0.0;
}

inline ResidualCheck check_solution(const SeedData& sd, const Field& coeff, const Field& phi,
                                    const Field& w) {
  const Grid& g = sd.grid;
  const double n = g.n, N = g.N();
  const Field T = sd.tau_a();
  ResidualCheck r;
  LichProblem p = LichProblem::on(g, coeff, T.cwiseAbs2(), source_sq(g, sd.sigma, sd.k, w));
  r.lich = scaled_residual(p, phi);
  const Field F = ((n - 1.0) / n) * phi.array().pow(N).matrix().cwiseProduct(sd.dtau_a());
  VectorSolver vs(g);
  const double scale = std::max({1.0, sup_norm(F), 0.5 * sup_norm(lstarl_apply(g, w))});
  r.vec = vs.weak_residual(w, F) / scale;
  r.defect = std::abs(pair_quadrature(g, F, g.rho));
  r.defect_rel = relative_defect(g, F);
  return r;
}

class CoupledSystem {
 public:
  CoupledSystem(const SeedData& sd, Field f, bool scale_tau = true)
      : sd_(sd), g_(sd.grid), f_(std::move(f)), scale_tau_(scale_tau) {
    m_ = g_.m;
    n_ = g_.n;
    N_ = g_.N();
    ct_ = (n_ - 1.0) / n_;
    cq_ = 2.0 * (n_ - 1.0) / n_;
    const Stencil st = Stencil::of(g_);
    S_ = g_.kappa() * stiffness(st);
    M_ = mass(st);
    Mrho_ = M_.cwiseProduct(g_.rho);
    K_ = energy_matrix(g_);
    const SpMat Q = lw_half_matrix(g_);
    const NodalSquare ns = nodal_square(g_);
    beta_ = ns.beta;
    for (const auto& B : ns.B) BQ_.push_back(SpMat(B * Q));
    tau_ = sd.tau_a();
    dtau_ = sd.dtau_a();
    mu_ = sd.sigma.mu(g_, sd.k);
    sT2_ = sd.sigma.tangential_sq(g_, sd.k);
  }

  int m() const { return m_; }
  int size() const { return 2 * m_ + 1; }
  double tpow(double t) const { return scale_tau_ ? std::pow(t, N_) : 1.0; }
  const Grid& grid() const { return g_; }
  const SeedData& seed() const { return sd_; }
  Field coeff(double t) const { return t * g_.R + (1.0 - t) * f_; }

  Field source(const Field& w) const {
    Field v = sT2_;
    for (std::size_t k = 0; k < BQ_.size(); ++k) {
      const Field x = mu_ + cq_ * (BQ_[k] * w);
      v += beta_[k] * (n_ / (n_ - 1.0)) * x.cwiseAbs2();
    }
    return v;
  }

  Field residual(const Field& z, double t) const {
    const Field psi = z.head(m_), w = z.segment(m_, m_);
    const double lam = z[2 * m_];
    const double tN = tpow(t);
    const Field c = coeff(t);
    const Field src = source(w);
    Field F(size());
    const Eigen::ArrayXd p = psi.array();
    F.head(m_) = S_ * psi + (M_.array() * (c.array() * p + ct_ * tN * tN * tau_.array().square() * p.pow(N_ - 1.0) -
                                           src.array() * p.pow(-N_ - 1.0)))
                                .matrix();
    F.segment(m_, m_) = 0.5 * (K_ * w) + (M_.array() * ct_ * tN * p.pow(N_) * dtau_.array()).matrix() + lam * Mrho_;
    F[2 * m_] = Mrho_.dot(w);
    return F;
  }

  /// Relative sizes of the two residual blocks: each nodal residual against the
  /// largest term of its own equation, so a collapsing psi is not mistaken
  /// for a solution.
  std::pair<double, double> measure(const Field& z, double t) const {
    const Field F = residual(z, t);
    const Field psi = z.head(m_), w = z.segment(m_, m_);
    const double tN = tpow(t);
    const Eigen::ArrayXd p = psi.array();
    const double s1 = std::max({sup_norm((S_ * psi).cwiseQuotient(M_)), sup_norm(coeff(t).cwiseProduct(psi)),
                                sup_norm((ct_ * tN * tN * tau_.array().square() * p.pow(N_ - 1.0)).matrix()),
                                sup_norm((source(w).array() * p.pow(-N_ - 1.0)).matrix()), 1e-300});
    const double s2 = std::max({sup_norm((ct_ * tN * p.pow(N_) * dtau_.array()).matrix()),
                                0.5 * sup_norm((K_ * w).cwiseQuotient(M_)), 1e-300});
    const double r2 = sup_norm(F.segment(m_, m_).cwiseQuotient(M_));
    return {sup_norm(F.head(m_).cwiseQuotient(M_)) / s1, r2 == 0.0 ? 0.0 : r2 / s2};
  }

  /// Jacobian in (psi, w, lambda) and the t-derivative of the residual.
  SpMat jacobian(const Field& z, double t, Field* dFdt = nullptr) const {
    const Field psi = z.head(m_), w = z.segment(m_, m_);
    const double tN = tpow(t);
    const Eigen::ArrayXd p = psi.array();
    const Field c = coeff(t);
    const Field src = source(w);
    std::vector<Eigen::Triplet<double>> tr;
    tr.reserve(S_.nonZeros() + K_.nonZeros() + 8 * m_ * 8);
    const Field d11 = (M_.array() * (c.array() + ct_ * (N_ - 1.0) * tN * tN * tau_.array().square() * p.pow(N_ - 2.0) +
                                     (N_ + 1.0) * src.array() * p.pow(-N_ - 2.0)))
                          .matrix();
    for (int k = 0; k < S_.outerSize(); ++k)
      for (SpMat::InnerIterator it(S_, k); it; ++it) tr.emplace_back(it.row(), it.col(), it.value());
    for (int j = 0; j < m_; ++j) tr.emplace_back(j, j, d11[j]);
    const Field rowfac = (-M_.array() * p.pow(-N_ - 1.0)).matrix();
    for (std::size_t k = 0; k < BQ_.size(); ++k) {
      const Field x = mu_ + cq_ * (BQ_[k] * w);
      const double pref = beta_[k] * (n_ / (n_ - 1.0)) * 2.0 * cq_;
      for (int o = 0; o < BQ_[k].outerSize(); ++o)
        for (SpMat::InnerIterator it(BQ_[k], o); it; ++it)
          tr.emplace_back(it.row(), m_ + it.col(), rowfac[it.row()] * pref * x[it.row()] * it.value());
    }
    for (int j = 0; j < m_; ++j)
      tr.emplace_back(m_ + j, j, M_[j] * ct_ * N_ * tN * std::pow(psi[j], N_ - 1.0) * dtau_[j]);
    for (int k = 0; k < K_.outerSize(); ++k)
      for (SpMat::InnerIterator it(K_, k); it; ++it) tr.emplace_back(m_ + it.row(), m_ + it.col(), 0.5 * it.value());
    for (int j = 0; j < m_; ++j) {
      tr.emplace_back(m_ + j, 2 * m_, Mrho_[j]);
      tr.emplace_back(2 * m_, m_ + j, Mrho_[j]);
    }
    SpMat J(size(), size());
    J.setFromTriplets(tr.begin(), tr.end());
    if (dFdt) {
      const double tNm1 = scale_tau_ && t > 0 ? N_ * std::pow(t, N_ - 1.0) : 0.0;
      dFdt->resize(size());
      dFdt->head(m_) = (M_.array() * ((g_.R - f_).array() * p +
                                      ct_ * 2.0 * tN * tNm1 * tau_.array().square() * p.pow(N_ - 1.0)))
                           .matrix();
      dFdt->segment(m_, m_) = (M_.array() * ct_ * tNm1 * p.pow(N_) * dtau_.array()).matrix();
      (*dFdt)[2 * m_] = 0.0;
    }
    return J;
  }

  /// Scale of each unknown: psi itself, the sup of w, the multiplier.
  Field unknown_scale(const Field& z) const {
    Field s(size());
    s.head(m_) = z.head(m_);
    s.segment(m_, m_).setConstant(1.0 + sup_norm(z.segment(m_, m_)));
    s[2 * m_] = 1.0 + std::abs(z[2 * m_]);
    return s;
  }

  double sup_ratio(const Field& dz, const Field& scale) const { return sup_norm(dz.cwiseQuotient(scale)); }

  struct NewtonInfo {
    bool converged = false;
    int iterations = 0;
  };

  /// Newton at fixed t. Steps are damped to keep psi above 0.1 of its minimum.
  NewtonInfo newton(Field& z, double t, double tol, int max_iters) const {
    NewtonInfo info;
    for (int it = 0; it < max_iters; ++it) {
      const auto [r1, r2] = measure(z, t);
      if (r1 <= 0.1 * tol && r2 <= 0.1 * tol) {
        info.converged = true;
        info.iterations = it;
        return info;
      }
      const Field F = residual(z, t);
      const Field sc = unknown_scale(z);
      SpMat J = jacobian(z, t);
      const Field dz = solve_scaled(J, -F, sc);
      if (!dz.allFinite()) break;
      double a = 1.0;
      const double pmin = z.head(m_).minCoeff();
      while ((z.head(m_) + a * dz.head(m_)).minCoeff() <= 0.1 * pmin && a > 1e-12) a *= 0.5;
      z += a * dz;
      info.iterations = it + 1;
      if (a == 1.0 && sup_ratio(dz, sc) < 1e-14) {
        const auto [q1, q2] = measure(z, t);
        info.converged = q1 <= tol && q2 <= tol;
        return info;
      }
    }
    const auto [r1, r2] = measure(z, t);
    info.converged = r1 <= tol && r2 <= tol;
    return info;
  }

  /// Sign of det J; it flips exactly when a simple fold is crossed.
  double det_sign(const Field& z, double t) const {
    SpMat J = jacobian(z, t);
    J.makeCompressed();
    Eigen::SparseLU<SpMat> lu;
    lu.compute(J);
    if (lu.info() != Eigen::Success) return 0.0;
    return lu.signDeterminant();
  }

  /// Solves J dz = rhs with row equilibration and column scaling.
  Field solve_scaled(const SpMat& J, const Field& rhs, const Field& colscale) const {
    const int sz = static_cast<int>(J.rows());
    Field rmax = Field::Zero(sz);
    SpMat A = J * colscale.asDiagonal();
    for (int k = 0; k < A.outerSize(); ++k)
      for (SpMat::InnerIterator it(A, k); it; ++it) rmax[it.row()] = std::max(rmax[it.row()], std::abs(it.value()));
    for (int i = 0; i < sz; ++i) rmax[i] = rmax[i] > 0 ? 1.0 / rmax[i] : 1.0;
    A = rmax.asDiagonal() * A;
    Eigen::SparseLU<SpMat> lu;
    lu.compute(A);
    if (lu.info() != Eigen::Success) return Field::Constant(sz, std::nan(""));
    const Field y = lu.solve(rmax.cwiseProduct(rhs));
    return colscale.cwiseProduct(y);
  }

 private:
  SeedData sd_;
  Grid g_;
  Field f_;
  bool scale_tau_ = true;
  int m_ = 0;
  double n_ = 3, N_ = 6, ct_ = 0, cq_ = 0;
  SpMat S_, K_;
  std::vector<SpMat> BQ_;
  std::vector<double> beta_;
  Field M_, Mrho_, tau_, dtau_, mu_, sT2_;
};

// ---- limit equation ----

/// Relative residual of -1/2 L*L V = alpha sqrt((n-1)/n) |LV| tau'/tau, measured
/// against the left-hand side in the weighted L2 norm; 0 on the kernel.
inline double limit_residual(const Grid& g, const Field& dlogtau, const Field& V, double alpha) {
  if (sup_norm(V) == 0.0) throw Error(ErrorCode::ZeroField, "limit residual needs V != 0");
  const Field lhs = -0.5 * lstarl_apply(g, V);
  const Field rhs = alpha * std::sqrt((g.n - 1.0) / g.n) * lw_pointwise(g, V).cwiseSqrt().cwiseProduct(dlogtau);
  const Field wt = g.omega * g.h;
  const double nl = std::sqrt(lhs.cwiseAbs2().dot(wt));
  const double scale = std::max(nl, std::sqrt(rhs.cwiseAbs2().dot(wt)));
  if (scale <= 1e-14 * std::sqrt(V.cwiseAbs2().dot(wt)) || nl == 0.0) return 0.0;
  return std::sqrt((lhs - rhs).cwiseAbs2().dot(wt)) / nl;
}

enum class LimitStatus { Nontrivial, Collapse, NoFixedPoint };

inline const char* to_string(LimitStatus s) {
  switch (s) {
    case LimitStatus::Nontrivial: return "Nontrivial";
    case LimitStatus::Collapse: return "Collapse";
    default: return "NoFixedPoint";
  }
}

struct LimitResult {
  LimitStatus status = LimitStatus::Collapse;
  Field V;
  double gain = 0.0;  // ||L V_{k+1}|| / ||L V_k|| at the end
  double residual = 1.0;
  int iterations = 0;
  std::vector<double> energy;  // ||L V_k|| of the unnormalized iterates relative to V_0
};

/// Iterates V <- solve_vector(alpha sqrt((n-1)/n) |LV| tau'/tau). The map is
/// 1-homogeneous, so iterates are renormalized and the per-step gain tracked:
/// gain -> 0 or below 1 means the unnormalized sequence collapses; gain -> 1 with a
/// small residual is a nontrivial fixed point; gain above 1 means no fixed point
/// at this alpha.
inline LimitResult limit_fixed_point(const Grid& g, const Field& dlogtau, double alpha, const Field& V0,
                                     int max_iters = 400, double tol = 1e-8) {
  if (sup_norm(V0) == 0.0) throw Error(ErrorCode::ZeroField, "limit iteration needs V0 != 0");
  VectorSolver vs(g);
  const SpMat K = vs.energy();
  auto enorm = [&](const Field& v) { return std::sqrt(std::max(0.0, v.dot(K * v))); };
  LimitResult r;
  Field V = V0;
  double e = enorm(V);
  const double e0 = e;
  double log_total = 0.0;
  r.energy.push_back(1.0);
  if (e == 0.0) {
    r.status = LimitStatus::Collapse;
    r.V = Field::Zero(g.m);
    return r;
  }
  V /= e;
  double prev_gain = -1.0;
  for (int it = 0; it < max_iters; ++it) {
    const Field F = alpha * std::sqrt((g.n - 1.0) / g.n) * lw_pointwise(g, V).cwiseSqrt().cwiseProduct(dlogtau);
    const Field Vn = vs.solve(F).w;
    const double en = enorm(Vn);
    r.iterations = it + 1;
    if (en <= 1e-14) {
      r.gain = 0.0;
      r.status = LimitStatus::Collapse;
      r.V = Field::Zero(g.m);
      r.energy.push_back(0.0);
      return r;
    }
    r.gain = en;
    log_total += std::log(en);
    r.energy.push_back(std::exp(log_total));
    V = Vn / en;
    if (std::abs(r.gain - prev_gain) <= 1e-12 * std::max(1.0, r.gain)) break;
    prev_gain = r.gain;
    if (std::exp(log_total) * e0 / e0 < 1e-14) break;
  }
  r.V = V;
  r.residual = limit_residual(g, dlogtau, V, alpha);
  if (std::abs(r.gain - 1.0) <= 1e-6 && r.residual <= std::max(tol, 1e-6))
    r.status = LimitStatus::Nontrivial;
  else if (r.gain < 1.0)
    r.status = LimitStatus::Collapse;
  else
    r.status = LimitStatus::NoFixedPoint;
  return r;
}

// ---- blow-up rescaling ----

struct Rescaled {
  Field phi, w;
  double profile_residual = 0.0;
};

/// phi~ = phi/gamma, W~ = gamma^{-N} W and the sup distance of phi~ to
/// (sqrt(n/(n-1)) |LW~| / (t^N tau))^{1/N}. In the variables
/// (t^n phi, t^{n(N+2)/2} W) normalized to sup 1 the same profile appears
/// with the t^N dropped, so one formula covers every classification.
inline Rescaled rescale_blowup(const SeedData& sd, const Field& phi, const Field& w, double t) {
  const Grid& g = sd.grid;
  const double N = g.N();
  const double gamma = sup_norm(phi);
  Rescaled r;
  r.phi = phi / gamma;
  r.phi /= r.phi.maxCoeff();
  r.w = w * std::pow(gamma, -N);
  const Field lw = lw_pointwise(g, r.w).cwiseSqrt();
  if (sup_norm(lw) == 0.0) throw Error(ErrorCode::DegenerateRescale, "L W~ vanishes identically");
  const Field T = sd.tau_a() * std::pow(t, N);
  const Field prof =
      (std::sqrt(g.n / (g.n - 1.0)) * lw.array() / T.array()).pow(1.0 / N).matrix();
  r.profile_residual = sup_norm(r.phi - prof);
  return r;
}

/// Tail regression of log(t^n gamma) against log gamma over the last five rows.
inline std::pair<Classification, double> classify_tail(const std::vector<TraceRow>& rows) {
  const int k = std::min<int>(5, static_cast<int>(rows.size()));
  if (k < 2) return {Classification::None, 0.0};
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = static_cast<int>(rows.size()) - k; i < static_cast<int>(rows.size()); ++i) {
    const double x = std::log(rows[i].gamma), y = std::log(rows[i].tn_gamma);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double den = k * sxx - sx * sx;
  const double slope = den != 0.0 ? (k * sxy - sx * sy) / den : 0.0;
  if (slope > 0.1) return {Classification::ProductInfty, slope};
  if (slope < -0.1) return {Classification::ProductZero, slope};
  return {Classification::ProductConst, slope};
}

// ---- the homotopy ----

namespace detail {

struct Runner {
  const HomotopyConfig& cfg;
  const SeedData& sd;
  CoupledSystem sys;
  SolveOutcome out;
  Field dlog;
  int step = 0;

  Runner(const HomotopyConfig& c, const SeedData& s, Field f)
      : cfg(c), sd(s), sys(s, std::move(f), c.scale_tau), dlog(s.dlog_tau_a()) {}

  void record(const Field& z, double t, int iters) {
    const int m = sys.m();
    TraceRow row;
    row.step = step++;
    row.t = t;
    row.gamma = sup_norm(z.head(m));
    row.tn_gamma = std::pow(t, sd.grid.n) * row.gamma;
    row.picard_iters = iters;
    const Field psi = z.head(m);
    const Field F = ((sd.grid.n - 1.0) / sd.grid.n) * sys.tpow(t) *
                    psi.array().pow(sd.grid.N()).matrix().cwiseProduct(sd.dtau_a());
    row.defect = std::abs(pair_quadrature(sd.grid, F, sd.grid.rho));
    const Field w = z.segment(m, m);
    row.limit_residual = sup_norm(w) > 0 ? limit_residual(sd.grid, dlog, w, 1.0) : 0.0;
    out.trace.rows.push_back(row);
    if (cfg.keep_states) {
      out.trace.psi.push_back(psi);
      out.trace.w.push_back(w);
    }
  }

  bool blown(const Field& z) const { return sup_norm(z.head(sys.m())) >= cfg.gamma_max; }

  void finish_blowup(const Field& z, double t) {
    const int m = sys.m();
    out.kind = OutcomeKind::BlowUp;
    out.t_final = t;
    auto [cls, slope] = classify_tail(out.trace.rows);
    out.classification = cls;
    out.product_limit = out.trace.rows.back().tn_gamma;
    out.trace.rows.back().classification = to_string(cls);
    const Rescaled rs = rescale_blowup(sd, z.head(m), z.segment(m, m), t);
    out.phi_tilde = rs.phi;
    out.w_tilde = rs.w;
    out.profile_residual = rs.profile_residual;
    out.phi = z.head(m);
    out.w = z.segment(m, m);
    out.message = "gamma exceeded gamma_max; tail slope " + std::to_string(slope);
  }

  void finish_solution(const Field& z, double t) {
    const int m = sys.m();
    out.kind = OutcomeKind::Solution;
    out.t_final = t;
    out.phi = z.head(m);
    out.w = z.segment(m, m);
    out.message = "reached t_end";
    const double n = sd.grid.n;
    const Field F = ((n - 1.0) / n) * out.phi.array().pow(sd.grid.N()).matrix().cwiseProduct(sd.dtau_a());
    const double rel = relative_defect(sd.grid, F);
    if (rel > 100.0 * cfg.picard_tol) {
      out.kind = OutcomeKind::NonConvergence;
      out.message = "momentum source has a conformal Killing component (relative defect " +
                    std::to_string(rel) + "); only the projected system is solved";
    }
  }

  Field tangent_dt(const Field& z, double t) const {
    Field Ft;
    const SpMat J = sys.jacobian(z, t, &Ft);
    return sys.solve_scaled(J, -Ft, sys.unknown_scale(z));
  }

  SolveOutcome run() {
    const int m = sys.m();
    std::vector<double> sched = cfg.t_schedule.empty() ? default_schedule() : cfg.t_schedule;
    std::vector<double> ts;
    for (double t : sched)
      if (t <= cfg.t_end + 1e-15) ts.push_back(std::min(t, cfg.t_end));
    if (ts.empty() || ts.back() < cfg.t_end) ts.push_back(cfg.t_end);
    for (double t : ts)
      if (t < 0 || t > 1) throw Error(ErrorCode::ConfigError, "t_schedule must lie in [0,1]");

    Field z = Field::Zero(sys.size());
    z.head(m).setOnes();
    double t = ts.front();
    {
      // start from the decoupled scalar solution at the first t
      const LichProblem p = LichProblem::on(sd.grid, sys.coeff(t),
                                            (sd.tau_a() * sys.tpow(t)).cwiseAbs2(),
                                            sys.source(Field::Zero(m)));
      if (cfg.psi0.size() == m) z.head(m) = cfg.psi0;
      if (cfg.w0.size() == m) {
        z.segment(m, m) = cfg.w0;
      } else {
        try {
          z.head(m) = solve_lichnerowicz(p, z.head(m)).u;
        } catch (const Error&) {
        }
      }
      auto info = sys.newton(z, t, cfg.picard_tol, cfg.max_picard);
      if (!info.converged) {
        out.kind = OutcomeKind::NonConvergence;
        out.message = "no solution at the first schedule point";
        return out;
      }
      record(z, t, info.iterations);
    }

    // natural continuation
    double det_sign = sys.det_sign(z, t);
    std::size_t next = 1;
    double dt = next < ts.size() ? ts[next] - t : 0.0;
    while (next < ts.size()) {
      const double target = std::min(ts[next], t + dt);
      Field zp = z + (target - t) * tangent_dt(z, t);
      if (!zp.allFinite() || zp.head(m).minCoeff() <= 0) zp = z;
      const Field pred = zp;
      auto info = sys.newton(zp, target, cfg.picard_tol, cfg.max_picard);
      // a corrector that lands far from the predictor has probably jumped
      // to another branch across a fold
      const bool jumped =
          info.converged && (sys.sup_ratio(zp.head(m) - pred.head(m), pred.head(m)) > 0.1 ||
                             sys.sup_ratio(zp.head(m) - z.head(m), z.head(m)) > 0.1 ||
                             sys.det_sign(zp, target) != det_sign);
      if (info.converged && !jumped && zp.head(m).minCoeff() > 0) {
        z = zp;
        t = target;
        record(z, t, info.iterations);
        if (blown(z)) {
          finish_blowup(z, t);
          return out;
        }
        if (t >= ts[next] - 1e-15) {
          ++next;
          if (next < ts.size()) dt = std::max(dt, ts[next] - t);
        } else {
          dt *= 1.5;
        }
        continue;
      }
      dt *= 0.5;
      if (dt < cfg.fold_switch * std::max(t, 1e-12)) break;
    }
    if (next >= ts.size()) {
      finish_solution(z, t);
      return out;
    }
    return arclength(z, t);
  }

  /// [J  F_t; row] for the pseudo-arclength corrector.
  SpMat bordered(const Field& zz, double tt, const Field& row) const {
    const int sz = sys.size();
    Field Ft;
    const SpMat J = sys.jacobian(zz, tt, &Ft);
    std::vector<Eigen::Triplet<double>> tr;
    tr.reserve(J.nonZeros() + 2 * sz + 2);
    for (int o = 0; o < J.outerSize(); ++o)
      for (SpMat::InnerIterator it(J, o); it; ++it) tr.emplace_back(it.row(), it.col(), it.value());
    for (int j = 0; j < sz; ++j)
      if (Ft[j] != 0.0) tr.emplace_back(j, sz, Ft[j]);
    for (int j = 0; j <= sz; ++j) tr.emplace_back(sz, j, row[j]);
    SpMat B(sz + 1, sz + 1);
    B.setFromTriplets(tr.begin(), tr.end());
    return B;
  }

  SolveOutcome arclength(Field z, double t) {
    const int m = sys.m();
    const int sz = sys.size();
    auto weights = [&](const Field& X) {
      Field D(sz + 1);
      D.head(sz) = sys.unknown_scale(X.head(sz)).cwiseInverse();
      D[sz] = 1.0;
      return D;
    };
    Field X(sz + 1);
    X.head(sz) = z;
    X[sz] = t;
    Field Tn(sz + 1);
    Tn.head(sz) = tangent_dt(z, t);
    Tn[sz] = 1.0;
    Tn /= weights(X).cwiseProduct(Tn).norm();
    double ds = cfg.ds0;
    double prev_dt_sign = 1.0;
    auto colscale = [&](const Field& zz, double tt) {
      Field cs(sz + 1);
      cs.head(sz) = sys.unknown_scale(zz);
      cs[sz] = std::max(tt, 1e-3);
      return cs;
    };
    for (int k = 0; k < cfg.max_arclength_steps; ++k) {
      const Field D = weights(X);
      const Field D2T = D.cwiseProduct(D).cwiseProduct(Tn);
      const Field Xpred = X + ds * Tn;
      Field Xp = Xpred;
      bool ok = false;
      int iters = 0;
      for (int i = 0; i < cfg.max_picard; ++i) {
        const double tt = Xp[sz];
        if (!(tt > 0) || Xp.head(m).minCoeff() <= 0) break;
        const Field zz = Xp.head(sz);
        const SpMat B = bordered(zz, tt, D2T);
        Field rhs(sz + 1);
        rhs.head(sz) = -sys.residual(zz, tt);
        rhs[sz] = -(D2T.dot(Xp - X) - ds);
        const Field d = sys.solve_scaled(B, rhs, colscale(zz, tt));
        if (!d.allFinite()) break;
        double al = 1.0;
        const double pmin = Xp.head(m).minCoeff();
        while ((Xp.head(m) + al * d.head(m)).minCoeff() <= 0.2 * pmin && al > 1e-12) al *= 0.5;
        Xp += al * d;
        iters = i + 1;
        if (al == 1.0 && sup_norm(d.cwiseProduct(D)) < 1e-11) {
          const auto [r1, r2] = sys.measure(Xp.head(sz), Xp[sz]);
          ok = Xp[sz] > 0 && r1 <= cfg.picard_tol && r2 <= cfg.picard_tol;
          break;
        }
      }
      if (!ok) {
        ds *= 0.5;
        if (ds < cfg.step_floor) {
          out.kind = OutcomeKind::NonConvergence;
          out.t_final = X[sz];
          out.message = "arclength step fell below the floor";
          return out;
        }
        continue;
      }
      Field sec = Xp - X;
      sec /= D.cwiseProduct(sec).norm();
      // tangent at the new point from the bordered Jacobian, oriented by the
      // previous tangent through the last row
      Field e = Field::Zero(sz + 1);
      e[sz] = 1.0;
      Field Tnew = sys.solve_scaled(bordered(Xp.head(sz), Xp[sz], D2T), e, colscale(Xp.head(sz), Xp[sz]));
      Tnew /= weights(Xp).cwiseProduct(Tnew).norm();
      // a sharp turn means the corrector jumped branches or doubled back
      if (!Tnew.allFinite() || D.cwiseProduct(Xp - Xpred).norm() > 0.5 * ds ||
          D.cwiseProduct(sec).dot(D.cwiseProduct(Tn)) < 0.9 ||
          D.cwiseProduct(Tnew).dot(D.cwiseProduct(Tn)) < 0.9) {
        ds *= 0.5;
        if (ds < cfg.step_floor) {
          out.kind = OutcomeKind::NonConvergence;
          out.t_final = X[sz];
          out.message = "arclength step fell below the floor";
          return out;
        }
        continue;
      }
      const double sgn = Tnew[sz] >= 0 ? 1.0 : -1.0;
      if (sgn != prev_dt_sign) out.trace.turning_points.push_back(X[sz]);
      prev_dt_sign = sgn;
      if (Xp[sz] >= cfg.t_end) {
        // land exactly on t_end from the last accepted point
        Field zz = X.head(sz) + (cfg.t_end - X[sz]) / (Xp[sz] - X[sz]) * (Xp.head(sz) - X.head(sz));
        auto info = sys.newton(zz, cfg.t_end, cfg.picard_tol, cfg.max_picard);
        if (info.converged && zz.head(m).minCoeff() > 0) {
          record(zz, cfg.t_end, info.iterations);
          finish_solution(zz, cfg.t_end);
          return out;
        }
        ds *= 0.5;
        continue;
      }
      X = Xp;
      Tn = Tnew;
      record(X.head(sz), X[sz], iters);
      if (blown(X.head(sz))) {
        finish_blowup(X.head(sz), X[sz]);
        return out;
      }
      ds = std::min(iters <= 4 ? ds * 1.5 : ds, cfg.ds_max);
    }
    out.kind = OutcomeKind::NonConvergence;
    out.t_final = X[sz];
    out.message = "arclength step budget exhausted";
    return out;
  }
};

}  // namespace detail

inline SolveOutcome run_homotopy(const HomotopyConfig& cfg, const SeedData& sd) {
  Field f = cfg.f.size() ? cfg.f : default_f(sd.grid);
  if (f.size() != sd.grid.m) throw Error(ErrorCode::GeometryMismatch, "f has the wrong length");
  if (!(f.minCoeff() > 0)) throw Error(ErrorCode::NonPositiveInput, "f must be positive");
  detail::Runner r(cfg, sd, std::move(f));
  return r.run();
}

// ---- Picard map ----

struct TfResult {
  Field value;  // t psi
  Field w;
  bool zero = false;
};

/// One application of the fixed-point map: W from (n-1)/n x^N dtau, then the
/// modified Lichnerowicz equation with coefficient tR + (1-t)f, tau-term
/// t^{2N} tau^2 and source |sigma + LW|^2; returns t psi. A fixed point x = t psi
/// makes (psi, W) a solution for the data (t^N tau, sigma).
inline TfResult tf_map(const HomotopyConfig& cfg, const SeedData& sd, const Field& x, double t) {
  const Grid& g = sd.grid;
  if (t < 0 || t > 1) throw Error(ErrorCode::ConfigError, "t must lie in [0,1]");
  require_positive(x, "tf_map needs a positive field");
  TfResult r;
  if (t == 0.0) {
    r.value = Field::Zero(g.m);
    r.w = Field::Zero(g.m);
    r.zero = true;
    return r;
  }
  const Field f = cfg.f.size() ? cfg.f : default_f(g);
  const double n = g.n, N = g.N();
  const Field F = ((n - 1.0) / n) * x.array().pow(N).matrix().cwiseProduct(sd.dtau_a());
  r.w = solve_vector(g, F).w;
  const LichProblem p = LichProblem::on(g, t * g.R + (1.0 - t) * f,
                                        (sd.tau_a() * std::pow(t, N)).cwiseAbs2(),
                                        source_sq(g, sd.sigma, sd.k, r.w));
  SolverTol tol;
  tol.res = cfg.picard_tol;
  r.value = t * solve_lichnerowicz(p, x / t, tol).u;
  return r;
}

// ---- scaling ----

inline std::pair<Field, Field> scale_solution(const Field& phi, const Field& w, double C, int n) {
  if (!(C > 0)) throw Error(ErrorCode::NonPositiveC, "scaling constant must be positive");
  const double N = 2.0 * n / (n - 2.0);
  return {phi / C, w * std::pow(C, -0.5 * (N + 2.0))};
}

// ---- second solution ----

inline constexpr double kDistinctRel = 1e-6;

struct SecondSolution {
  bool found = false;
  std::string reason;
  double t = 0.0;
  SeedData seed;  // the data (g, t^N tau^a, k sigma) both branches solve
  Field phi_a, w_a, phi_b, w_b;
  ResidualCheck check_a, check_b;
  double gap = 0.0;
  SolveOutcome branch_a, branch_b;
};

/// Branch A continues from small t to the target along the bounded branch;
/// branch B runs past the fold into blow-up and returns to the target from the
/// large branch, starting from the rescaled tail profile or, failing that,
/// from the trace crossing, and finally from scaled copies of the bounded
/// solution. Both use f = R, so every point solves the constraint equations
/// for t^N tau^a.
inline SecondSolution find_second_solution(const HomotopyConfig& base, const SeedData& sd, double t) {
  SecondSolution out;
  out.t = t;
  const Grid& g = sd.grid;
  const int m = g.m, n = g.n;
  const double N = g.N();
  out.seed = sd;
  out.seed.tau_scale *= std::pow(t, N);
  if (!(g.R.minCoeff() > 0)) {
    out.reason = "R is not positive; f = R is unavailable";
    return out;
  }
  HomotopyConfig ca = base;
  ca.f = g.R;
  ca.t_end = t;
  if (ca.t_schedule.empty()) ca.t_schedule = default_schedule(std::min(1e-3, 0.5 * t), t, 32);
  out.branch_a = run_homotopy(ca, sd);
  HomotopyConfig cb = base;
  cb.f = g.R;
  cb.t_end = 1.0;
  cb.keep_states = true;
  out.branch_b = run_homotopy(cb, sd);

  if (out.branch_a.kind != OutcomeKind::Solution || out.branch_a.t_final != t) {
    out.reason = "branch A did not reach t";
    return out;
  }
  out.phi_a = out.branch_a.phi;
  out.w_a = out.branch_a.w;
  const CoupledSystem sys(sd, g.R);
  std::vector<Field> starts;
  const auto& tr = out.branch_b.trace;
  if (out.branch_b.kind == OutcomeKind::BlowUp && !tr.psi.empty()) {
    const double tl = tr.rows.back().t;
    Field z(sys.size());
    z.head(m) = tr.psi.back() * std::pow(tl / t, n);
    z.segment(m, m) = tr.w.back() * std::pow(tl / t, 0.5 * n * (N + 2.0));
    z[2 * m] = 0.0;
    starts.push_back(z);
  }
  // crossings of t after the first turning point
  bool turned = false;
  for (std::size_t i = 1; i < tr.rows.size() && i < tr.psi.size(); ++i) {
    const double t0 = tr.rows[i - 1].t, t1 = tr.rows[i].t;
    if (t1 < t0) turned = true;
    if (!turned) continue;
    if ((t0 - t) * (t1 - t) <= 0 && t0 != t1) {
      const double th = (t - t0) / (t1 - t0);
      Field z(sys.size());
      z.head(m) = (1 - th) * tr.psi[i - 1] + th * tr.psi[i];
      z.segment(m, m) = (1 - th) * tr.w[i - 1] + th * tr.w[i];
      z[2 * m] = 0.0;
      starts.push_back(z);
    }
  }
  // scaled copies of the bounded solution as a last resort; W moves like phi^N
  for (double c : {10.0, 100.0}) {
    Field z(sys.size());
    z.head(m) = c * out.phi_a;
    z.segment(m, m) = std::pow(c, N) * out.w_a;
    z[2 * m] = 0.0;
    starts.push_back(z);
  }
  const double tol = base.picard_tol;
  for (Field z : starts) {
    if (!z.allFinite() || z.head(m).minCoeff() <= 0) continue;
    auto info = sys.newton(z, t, tol, 2 * base.max_picard);
    if (!info.converged) continue;
    const Field pb = z.head(m);
    const double gap = sup_norm(pb - out.phi_a);
    const double big = std::max(sup_norm(pb), sup_norm(out.phi_a));
    // 10 tol alone sits below what a residual tolerance of tol pins down in the
    // solution itself; a second relative floor keeps re-converged copies of the
    // same root from counting as a pair.
    if (gap > 10.0 * tol * big && gap > kDistinctRel * big) {
      out.phi_b = pb;
      out.w_b = z.segment(m, m);
      out.gap = gap;
      break;
    }
  }
  if (out.phi_b.size() == 0) {
    out.reason = out.branch_b.kind == OutcomeKind::BlowUp
                     ? "large branch did not return to t"
                     : std::string("no second root; unscaled run ended in ") +
                           to_string(out.branch_b.kind);
    return out;
  }
  out.check_a = check_solution(out.seed, g.R, out.phi_a, out.w_a);
  out.check_b = check_solution(out.seed, g.R, out.phi_b, out.w_b);
  if (!out.check_a.ok(tol) || !out.check_b.ok(tol)) {
    out.reason = "a branch failed the independent residual check";
    return out;
  }
  out.found = true;
  out.reason = "two solutions";
  return out;
}

// ---- sigma = 0 ----

struct SigmaZeroResult {
  bool found = false;
  std::string route;   // "blowup-rescale", "k-continuation" or "scaled-start"
  std::string reason;
  Field phi, w;
  ResidualCheck check;
  double lw_sup = 0.0;  // sup |LW|; zero would mean the trivial branch
  SolveOutcome aux;     // the homotopy with the auxiliary sigma
};

/// Looks for a nontrivial solution of the constraint equations for
/// (g, tau^a, 0) with f = R. The auxiliary homotopy runs with the seed's own
/// sigma. If it blows up, the last state is rescaled to (t^n psi,
/// t^{n(N+2)/2} W), which solves the same equations with sigma multiplied by
/// t^{n(N+2)/2}, and Newton removes the remaining sigma. If it reaches t = 1,
/// the amplitude k is halved down to 1e-6 k and then set to 0, one Newton
/// solve per step.
inline SigmaZeroResult sigma_zero_solution(const HomotopyConfig& base, const SeedData& sd) {
  SigmaZeroResult out;
  const Grid& g = sd.grid;
  const int m = g.m, n = g.n;
  const double N = g.N();
  if (!(g.R.minCoeff() > 0)) {
    out.reason = "R is not positive; f = R is unavailable";
    return out;
  }
  if (sd.sigma.kind == TTKind::Zero || sd.k == 0.0) {
    out.reason = "the auxiliary sigma is zero";
    return out;
  }
  HomotopyConfig h = base;
  h.f = g.R;
  h.t_end = 1.0;
  h.keep_states = false;
  out.aux = run_homotopy(h, sd);
  const double tol = base.picard_tol;

  SeedData zero = sd;
  zero.k = 0.0;
  const CoupledSystem sys0(zero, g.R);
  Field z(sys0.size());
  z[2 * m] = 0.0;
  if (out.aux.kind == OutcomeKind::BlowUp) {
    out.route = "blowup-rescale";
    const double t = out.aux.t_final;
    z.head(m) = out.aux.phi * std::pow(t, n);
    z.segment(m, m) = out.aux.w * std::pow(t, 0.5 * n * (N + 2.0));
    // the rescaled pair solves the sigma = 0 system at t = 1 up to the leftover
    // sigma and the change of coefficient, both small in the ProductConst case
    if (!sys0.newton(z, 1.0, tol, 2 * base.max_picard).converged) {
      out.reason = "Newton from the rescaled blow-up state did not converge";
      return out;
    }
  } else if (out.aux.kind == OutcomeKind::Solution) {
    out.route = "k-continuation";
    z.head(m) = out.aux.phi;
    z.segment(m, m) = out.aux.w;
    std::vector<double> ks;
    for (double k = 0.5 * sd.k; k > 1e-6 * sd.k; k *= 0.5) ks.push_back(k);
    ks.push_back(0.0);
    for (double k : ks) {
      SeedData s = sd;
      s.k = k;
      const CoupledSystem sys(s, g.R);
      const Field keep = z;
      if (!sys.newton(z, 1.0, tol, 2 * base.max_picard).converged || z.head(m).minCoeff() <= 0) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "continuation in k stalled at k = %.3g with sup psi = %.3g", k,
                      sup_norm(keep.head(m)));
        out.reason = buf;
        z = keep;
        break;
      }
    }
    if (!out.reason.empty()) {
      // the small branch collapses as sigma -> 0; try the large one directly
      bool hit = false;
      for (double c : {2.0, 5.0, 10.0, 100.0}) {
        Field y(sys0.size());
        y.head(m) = c * out.aux.phi;
        y.segment(m, m) = std::pow(c, N) * out.aux.w;
        y[2 * m] = 0.0;
        if (sys0.newton(y, 1.0, tol, 2 * base.max_picard).converged && y.head(m).minCoeff() > 0) {
          z = y;
          out.route = "scaled-start";
          hit = true;
          break;
        }
      }
      if (!hit) {
        out.phi = z.head(m);
        out.w = z.segment(m, m);
        out.reason += "; scaled starts did not converge";
        return out;
      }
      out.reason.clear();
    }
  } else {
    out.reason = std::string("auxiliary homotopy ended in ") + to_string(out.aux.kind);
    return out;
  }
  out.phi = z.head(m);
  out.w = z.segment(m, m);
  out.lw_sup = std::sqrt(sup_norm(lw_pointwise(g, out.w)));
  out.check = check_solution(zero, g.R, out.phi, out.w);
  const double big = sup_norm(out.phi);
  // LW against tau phi^N, the size the vector equation gives it
  if (!(out.lw_sup > 1e-8 * sup_norm(zero.tau_a()) * std::pow(big, N))) {
    out.reason = "converged to the trivial branch (LW = 0)";
    return out;
  }
  if (!out.check.ok(tol)) {
    out.reason = "candidate failed the independent residual check";
    return out;
  }
  out.found = true;
  out.reason = "nontrivial solution with sigma = 0";
  return out;
}

}  // namespace conflab
