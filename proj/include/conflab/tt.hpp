#pragma once

// Symmetric TT tensor families that stay inside the cohomogeneity-one class.
//
// Diagonal:           sigma = mu ds^2 - (mu/d) rho^2 g_F, mu = C rho^{-n}
// TangentialParallel: sigma = f(s) Q_ab e^a e^b, Q constant and trace-free in a
//                     parallel coframe of the fiber (coordinate coframe on the
//                     flat torus, left-invariant coframe on the unit S^3).

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "conflab/geometry.hpp"

namespace conflab {

enum class TTKind { Zero, TangentialParallel, Diagonal };

inline const char* to_string(TTKind k) {
  switch (k) {
    case TTKind::Zero: return "Zero";
    case TTKind::TangentialParallel: return "TangentialParallel";
    case TTKind::Diagonal: return "Diagonal";
  }
  return "?";
}

/// Smooth bumps exp(-1/(1-x^2)) on periodic arcs. Used for the profile f.
struct BumpProfile {
  std::vector<double> centers;
  double radius = 0.5;
  double period = 2.0 * std::numbers::pi;

  static double core(double x) { return std::abs(x) < 1.0 ? std::exp(-1.0 / (1.0 - x * x)) : 0.0; }

  double dist(double s, double c) const {
    double d = std::fmod(s - c, period);
    if (d > 0.5 * period) d -= period;
    if (d < -0.5 * period) d += period;
    return d;
  }

  double operator()(double s) const {
    double v = 0.0;
    for (double c : centers) v += core(dist(s, c) / radius);
    return v;
  }

  bool supported_at(double s) const {
    for (double c : centers)
      if (std::abs(dist(s, c)) < radius) return true;
    return false;
  }
};

struct TTTensorSpec {
  TTKind kind = TTKind::Zero;
  BumpProfile f;       // TangentialParallel
  double qnorm2 = 2.0;  // |Q|^2
  double C = 0.0;      // Diagonal

  std::string pairing_rule() const {
    switch (kind) {
      case TTKind::Zero: return "none";
      case TTKind::TangentialParallel: return "orthogonal";
      case TTKind::Diagonal: return "2*mu*q";
    }
    return "?";
  }

  double f_at(double s) const { return kind == TTKind::TangentialParallel ? f(s) : 0.0; }

  /// mu = sigma_ss for the diagonal family, zero otherwise.
  Field mu(const Grid& g, double scale = 1.0) const {
    Field v = Field::Zero(g.m);
    if (kind == TTKind::Diagonal)
      for (int j = 0; j < g.m; ++j) v[j] = scale * C * std::pow(g.rho[j], -g.n);
    return v;
  }

  /// Tangential part of |sigma|^2 (the part never paired with LW).
  Field tangential_sq(const Grid& g, double scale = 1.0) const {
    Field v = Field::Zero(g.m);
    if (kind == TTKind::TangentialParallel)
      for (int j = 0; j < g.m; ++j) {
        const double fj = scale * f(g.s[j]);
        v[j] = fj * fj * qnorm2 / std::pow(g.rho[j], 4);
      }
    return v;
  }

  Field sigma_sq(const Grid& g, double scale = 1.0) const {
    Field v = tangential_sq(g, scale);
    if (kind == TTKind::Diagonal) {
      const Field mu_ = mu(g, scale);
      v += mu_.cwiseAbs2() * (g.n / (g.n - 1.0));
    }
    return v;
  }

  /// Nodal <sigma, LW>, assembled like lw_pointwise.
  Field pairing(const Grid& g, const Field& w, double scale = 1.0) const {
    Field v = Field::Zero(g.m);
    if (kind != TTKind::Diagonal) return v;
    const Field q = lw_half(g, w);
    const Field mu_ = mu(g, scale);
    const NodalSquare ns = nodal_square(g);
    for (std::size_t k = 0; k < ns.B.size(); ++k)
      v += ns.beta[k] * 2.0 * mu_.cwiseProduct(ns.B[k] * q);
    return v;
  }
};

/// |sigma + LW|^2 at nodes. The diagonal family pairs with LW through the
/// ss-block, so the square is formed on the same pieces lw_pointwise uses.
inline Field source_sq(const Grid& g, const TTTensorSpec& sig, double scale, const Field& w) {
  const Field q = lw_half(g, w);
  const Field mu_ = sig.mu(g, scale);
  const NodalSquare ns = nodal_square(g);
  const double n = g.n;
  const double cq = 2.0 * (n - 1.0) / n;
  Field v = sig.tangential_sq(g, scale);
  for (std::size_t k = 0; k < ns.B.size(); ++k) {
    const Field x = mu_ + cq * (ns.B[k] * q);
    v += ns.beta[k] * (n / (n - 1.0)) * x.cwiseAbs2();
  }
  return v;
}

}  // namespace conflab
