#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "conflab/geometry.hpp"
#include "conflab/seed.hpp"
#include "conflab/tt.hpp"

namespace conflab {

// ---- Yamabe sign ----

struct YamabeReport {
  double lambda1 = 0.0;
  int sign = 0;
  Field eigenfunction;
  double rayleigh = 0.0;
};

/// Rayleigh quotient of kappa Delta + R in the weighted discrete inner product.
inline double rayleigh_quotient(const Grid& g, const Field& u) {
  const Stencil st = Stencil::of(g);
  const SpMat S = stiffness(st);
  const Field M = mass(st);
  const double num = g.kappa() * u.dot(S * u) + (u.cwiseAbs2().cwiseProduct(g.R).cwiseProduct(M)).sum();
  const double den = u.cwiseAbs2().cwiseProduct(M).sum();
  return num / den;
}

inline YamabeReport yamabe_sign(const Grid& g, double deadband = 1e-8) {
  const Stencil st = Stencil::of(g);
  const Eigen::MatrixXd S = Eigen::MatrixXd(stiffness(st));
  const Field M = mass(st);
  Eigen::MatrixXd A = g.kappa() * S;
  A.diagonal() += g.R.cwiseProduct(M);
  Eigen::MatrixXd B = M.asDiagonal();
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(A, B);
  YamabeReport r;
  r.lambda1 = es.eigenvalues()[0];
  r.eigenfunction = es.eigenvectors().col(0);
  if (r.eigenfunction.sum() < 0) r.eigenfunction = -r.eigenfunction;
  r.eigenfunction /= r.eigenfunction.maxCoeff();
  r.rayleigh = rayleigh_quotient(g, r.eigenfunction);
  r.sign = std::abs(r.lambda1) < deadband ? 0 : (r.lambda1 > 0 ? 1 : -1);
  return r;
}

// ---- spectral derivatives of nodal data ----

/// k-th derivative of the trigonometric interpolant of periodic nodal data.
/// The Nyquist mode is dropped for odd k.
inline Field spectral_derivative(const Field& v, double period, int k) {
  const int m = static_cast<int>(v.size());
  const int K = m / 2;
  const double w = 2.0 * std::numbers::pi / period;
  std::vector<double> a(K + 1, 0.0), b(K + 1, 0.0);
  for (int q = 0; q <= K; ++q) {
    double c = 0.0, s = 0.0;
    for (int j = 0; j < m; ++j) {
      const double th = 2.0 * std::numbers::pi * double(q) * j / m;
      c += v[j] * std::cos(th);
      s += v[j] * std::sin(th);
    }
    const double scale = (q == 0 || q == K) ? 1.0 / m : 2.0 / m;
    a[q] = c * scale;
    b[q] = s * scale;
  }
  Field out = Field::Zero(m);
  for (int j = 0; j < m; ++j) {
    const double x = period * j / m;
    double acc = (k == 0) ? a[0] : 0.0;
    for (int q = 1; q <= K; ++q) {
      if (q == K && (k % 2 == 1)) continue;
      const double kw = q * w, th = kw * x;
      const double c = std::cos(th), s = std::sin(th);
      const double p = std::pow(kw, k);
      switch (k % 4) {
        case 0: acc += p * (a[q] * c + b[q] * s); break;
        case 1: acc += p * (-a[q] * s + b[q] * c); break;
        case 2: acc += p * (-a[q] * c - b[q] * s); break;
        default: acc += p * (a[q] * s - b[q] * c); break;
      }
    }
    out[j] = acc;
  }
  return out;
}

// ---- constraint verification ----

struct ConstraintReport {
  double hamiltonian = 0.0;  // sup |R - |K|^2 + (tr K)^2|
  double momentum = 0.0;     // sup |div K - d tr K|
  double hamiltonian_rel = 0.0;  // sup residual / sup of the largest term
  double momentum_rel = 0.0;
  Field ham_nodal, mom_nodal;
};

/// Reconstructs g^ = phi^{N-2} g and K^ = (tau/n) phi^{N-2} g + phi^{-2}(sigma + LW)
/// and evaluates the vacuum constraints with the warped-product tensor formulas
/// in arclength of g^. Derivatives of the nodal solution come from its
/// trigonometric interpolant; tau, rho and sigma are evaluated from their exact
/// profiles. None of the solver's discrete operators are used.
inline ConstraintReport verify_constraints(const SeedData& sd, const Field& phi, const Field& w) {
  const Grid& g = sd.grid;
  const int m = g.m, n = g.n, d = n - 1;
  const double N = g.N(), P = g.period;
  const Field p1 = spectral_derivative(phi, P, 1);
  const Field p2 = spectral_derivative(phi, P, 2);
  const Field w1 = spectral_derivative(w, P, 1);
  const Field tau = sd.tau_a();
  const Field mu = sd.sigma.mu(g, sd.k);
  const Field sT2 = sd.sigma.tangential_sq(g, sd.k);
  const double e = 0.5 * (N - 2.0);

  Field Pss(m), Qf(m), Tn2(m), a(m), bb(m), db(m);
  ConstraintReport r;
  double ham_scale = 0.0, mom_scale = 0.0;
  r.ham_nodal.resize(m);
  r.mom_nodal.resize(m);
  for (int j = 0; j < m; ++j) {
    const double ph = phi[j], rho = g.rho[j], r1 = g.drho[j], r2 = g.ddrho[j];
    const double A = std::pow(ph, e);
    const double A1 = e * std::pow(ph, e - 1.0) * p1[j];
    const double A2 = e * (e - 1.0) * std::pow(ph, e - 2.0) * p1[j] * p1[j] +
                      e * std::pow(ph, e - 1.0) * p2[j];
    const double b = rho * A, b1 = r1 * A + rho * A1, b2 = r2 * A + 2.0 * r1 * A1 + rho * A2;
    const double bs = b1 / A;                          // db/dsigma
    const double bss = (b2 * A - b1 * A1) / (A * A * A);  // d2b/dsigma2
    const double Rhat = warped_curvature(g.fiber_curvature(), d, b, bs, bss);
    const double q = w1[j] - (r1 / rho) * w[j];
    const double phN = std::pow(ph, -N);
    Pss[j] = tau[j] / n + phN * (mu[j] + 2.0 * (n - 1.0) / n * q);
    Qf[j] = tau[j] / n - phN * (mu[j] / d + 2.0 / n * q);
    Tn2[j] = phN * phN * sT2[j];
    const double K2 = Pss[j] * Pss[j] + d * Qf[j] * Qf[j] + Tn2[j];
    const double tr = Pss[j] + d * Qf[j];
    r.ham_nodal[j] = Rhat - K2 + tr * tr;
    ham_scale = std::max({ham_scale, std::abs(Rhat), K2, tr * tr});
    a[j] = A;
    bb[j] = b;
    db[j] = b1;
  }
  const Field P1 = spectral_derivative(Pss, P, 1);
  const Field tr1 = sample(g, [&](double s) {
    return sd.tau_scale * std::exp(sd.a * sd.tau.logtau(s)) * sd.a * sd.tau.dlogtau(s);
  });
  for (int j = 0; j < m; ++j) {
    const double div = (P1[j] + d * (db[j] / bb[j]) * (Pss[j] - Qf[j])) / a[j];
    r.mom_nodal[j] = div - tr1[j] / a[j];
    // |K|/length keeps the scale honest when every term vanishes (dtau = 0, W = 0)
    const double kfloor = (std::abs(Pss[j]) + d * std::abs(Qf[j])) * (2.0 * std::numbers::pi / P) / a[j];
    mom_scale = std::max({mom_scale, std::abs(P1[j] / a[j]), std::abs(tr1[j] / a[j]),
                          std::abs(d * (db[j] / bb[j]) * (Pss[j] - Qf[j]) / a[j]), kfloor});
  }
  r.hamiltonian = sup_norm(r.ham_nodal);
  r.momentum = sup_norm(r.mom_nodal);
  r.hamiltonian_rel = r.hamiltonian / std::max(ham_scale, 1e-300);
  r.momentum_rel = r.momentum / std::max(mom_scale, 1e-300);
  return r;
}

// ---- integral obstructions ----

struct NonexistenceIntegrals {
  double I1 = 0.0, I2 = 0.0, I3 = 0.0;
  double sigma_term = 0.0;  // int |sigma| |dtau/tau|^2
  double c1 = 0.0;
  bool bound_holds = false;  // (a - c1) I2 <= sigma_term
};

/// Quadratures around the limit equation for tau^a; dtau/tau is that of the
/// base profile tau and c1 = sqrt(n/(n-1)) c from the seed certificate.
inline NonexistenceIntegrals nonexistence_integrals(const SeedData& sd, const Field& Wa, double a) {
  const Grid& g = sd.grid;
  const Certificate cert = certify(g, sd.tau, 1.0);
  if (!cert.present) throw Error(ErrorCode::MissingCertificate, "seed tau has no certificate");
  const Field dl = sample(g, sd.tau.dlogtau);
  const Field dl2 = dl.cwiseAbs2();
  const Field lw = lw_pointwise(g, Wa).cwiseSqrt();
  const Field mix = source_sq(g, sd.sigma, sd.k, a * Wa).cwiseSqrt();
  const Field sabs = sd.sigma.sigma_sq(g, sd.k).cwiseSqrt();
  const Field one = Field::Ones(g.m);
  NonexistenceIntegrals r;
  r.I1 = pair_quadrature(g, mix.cwiseProduct(dl2), one);
  r.I2 = pair_quadrature(g, dl2.cwiseProduct(lw), one);
  r.I3 = pair_quadrature(g, sd.sigma.pairing(g, Wa, sd.k), one);
  r.sigma_term = pair_quadrature(g, sabs.cwiseProduct(dl2), one);
  r.c1 = std::sqrt(g.n / (g.n - 1.0)) * cert.c;
  r.bound_holds = (a - r.c1) * r.I2 <= r.sigma_term * (1.0 + 1e-12) + 1e-14;
  return r;
}

}  // namespace conflab
