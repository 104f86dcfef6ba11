#pragma once

// Cohomogeneity-one backends. Everything lives on the circle s in [0, period)
// with a warped fiber: g = ds^2 + rho(s)^2 g_F, F a flat torus or a unit round
// sphere of dimension n-1. Fields are fiber-invariant, so every operator is a
// periodic 1D weighted stencil.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "conflab/errors.hpp"

namespace conflab {

using Field = Eigen::VectorXd;
using SpMat = Eigen::SparseMatrix<double>;

enum class Backend { WarpedTorus, SphericalCylinder };

inline const char* to_string(Backend b) {
  return b == Backend::WarpedTorus ? "WarpedTorus" : "SphericalCylinder";
}

/// Periodic warp given as a finite Fourier series in theta = 2 pi s / period.
/// Constant and cosine profiles are the one- and two-term cases; a tabulated
/// profile is its trigonometric interpolant.
struct WarpProfile {
  std::string kind = "constant";
  double period = 2.0 * std::numbers::pi;
  double a0 = 1.0;
  std::vector<double> ak;  // cos(k theta), k = 1..
  std::vector<double> bk;  // sin(k theta)
  std::vector<double> samples;  // kept for the manifest when tabulated

  static WarpProfile constant(double r, double period = 2.0 * std::numbers::pi) {
    WarpProfile p;
    p.kind = "constant";
    p.period = period;
    p.a0 = r;
    return p;
  }

  // r0 (1 + eps cos theta)
  static WarpProfile cosine(double r0, double eps, double period = 2.0 * std::numbers::pi) {
    WarpProfile p;
    p.kind = "cosine";
    p.period = period;
    p.a0 = r0;
    p.ak = {r0 * eps};
    p.bk = {0.0};
    return p;
  }

  static WarpProfile tabulated(const std::vector<double>& vals,
                               double period = 2.0 * std::numbers::pi) {
    WarpProfile p;
    p.kind = "tabulated";
    p.period = period;
    p.samples = vals;
    const int L = static_cast<int>(vals.size());
    const int K = L / 2;
    p.a0 = 0.0;
    for (double v : vals) p.a0 += v;
    p.a0 /= L;
    p.ak.assign(K, 0.0);
    p.bk.assign(K, 0.0);
    for (int k = 1; k <= K; ++k) {
      double c = 0.0, s = 0.0;
      for (int j = 0; j < L; ++j) {
        const double th = 2.0 * std::numbers::pi * k * j / L;
        c += vals[j] * std::cos(th);
        s += vals[j] * std::sin(th);
      }
      // the Nyquist mode is shared between +K and -K
      const double scale = (2 * k == L) ? 1.0 / L : 2.0 / L;
      p.ak[k - 1] = c * scale;
      p.bk[k - 1] = (2 * k == L) ? 0.0 : s * scale;
    }
    return p;
  }

  /// d-th derivative in s (d = 0, 1, 2).
  double eval(double s, int d = 0) const {
    const double w = 2.0 * std::numbers::pi / period;
    double v = (d == 0) ? a0 : 0.0;
    for (std::size_t i = 0; i < ak.size(); ++i) {
      const double k = static_cast<double>(i + 1);
      const double th = k * w * s;
      const double c = std::cos(th), sn = std::sin(th);
      const double kw = k * w;
      switch (d) {
        case 0: v += ak[i] * c + bk[i] * sn; break;
        case 1: v += kw * (-ak[i] * sn + bk[i] * c); break;
        default: v += kw * kw * (-ak[i] * c - bk[i] * sn); break;
      }
    }
    return v;
  }
};

struct Grid {
  Backend backend = Backend::WarpedTorus;
  int n = 3;
  int m = 64;
  int order = 2;  // flux-form stencil order
  double period = 2.0 * std::numbers::pi;
  double h = 0.0;
  WarpProfile profile;

  Field s, s_half;
  Field rho, rho_half, drho, ddrho;
  Field omega, omega_half;
  Field R;

  int d() const { return n - 1; }
  double N() const { return 2.0 * n / (n - 2.0); }
  double kappa() const { return 4.0 * (n - 1.0) / (n - 2.0); }
  double fiber_curvature() const {
    return backend == Backend::SphericalCylinder ? double(d()) * (d() - 1) : 0.0;
  }
  int next(int j) const { return j + 1 == m ? 0 : j + 1; }
  int prev(int j) const { return j == 0 ? m - 1 : j - 1; }
};

inline std::vector<double> staggered_weights(int order);

/// Scalar curvature of ds^2 + b(s)^2 g_F given b, b', b''.
inline double warped_curvature(double RF, int d, double b, double db, double ddb) {
  return RF / (b * b) - 2.0 * d * ddb / b - d * (d - 1.0) * (db / b) * (db / b);
}

inline Grid build_grid(Backend backend, int n, int m, const WarpProfile& prof, int order = 2) {
  if (n < 3) throw Error(ErrorCode::GeometryMismatch, "dimension must be at least 3");
  if (m < 16 || m % 2 != 0) throw Error(ErrorCode::GeometryMismatch, "m must be even and >= 16");
  Grid g;
  g.backend = backend;
  g.n = n;
  g.m = m;
  g.order = order;
  staggered_weights(order);
  g.period = prof.period;
  g.profile = prof;
  g.h = g.period / m;
  g.s.resize(m);
  g.s_half.resize(m);
  g.rho.resize(m);
  g.rho_half.resize(m);
  g.drho.resize(m);
  g.ddrho.resize(m);
  g.omega.resize(m);
  g.omega_half.resize(m);
  g.R.resize(m);
  const int d = n - 1;
  for (int j = 0; j < m; ++j) {
    g.s[j] = j * g.h;
    g.s_half[j] = (j + 0.5) * g.h;
    g.rho[j] = prof.eval(g.s[j]);
    g.rho_half[j] = prof.eval(g.s_half[j]);
    if (!(g.rho[j] > 0.0) || !(g.rho_half[j] > 0.0))
      throw Error(ErrorCode::NonPositiveWarp, "warp must stay positive");
    g.drho[j] = prof.eval(g.s[j], 1);
    g.ddrho[j] = prof.eval(g.s[j], 2);
    g.omega[j] = std::pow(g.rho[j], d);
    g.omega_half[j] = std::pow(g.rho_half[j], d);
    g.R[j] = warped_curvature(g.fiber_curvature(), d, g.rho[j], g.drho[j], g.ddrho[j]);
  }
  return g;
}

template <class Fn>
Field sample(const Grid& g, Fn&& fn) {
  Field v(g.m);
  for (int j = 0; j < g.m; ++j) v[j] = fn(g.s[j]);
  return v;
}

/// Staggered first-derivative weights for offsets (k - 1/2) h, k = 1..order/2.
inline std::vector<double> staggered_weights(int order) {
  switch (order) {
    case 2: return {1.0};
    case 4: return {9.0 / 8.0, -1.0 / 24.0};
    case 6: return {75.0 / 64.0, -25.0 / 384.0, 3.0 / 640.0};
    default: throw Error(ErrorCode::GeometryMismatch, "stencil order must be 2, 4 or 6");
  }
}

/// Midpoint interpolation weights (half nodes -> node), same offsets.
inline std::vector<double> midpoint_weights(int order) {
  switch (order) {
    case 2: return {0.5};
    case 4: return {9.0 / 16.0, -1.0 / 16.0};
    case 6: return {150.0 / 256.0, -25.0 / 256.0, 3.0 / 256.0};
    default: throw Error(ErrorCode::GeometryMismatch, "stencil order must be 2, 4 or 6");
  }
}

/// Nodes -> half nodes derivative: (Du)_{j+1/2} = sum_k a_k (u_{j+k} - u_{j+1-k}) / h.
inline SpMat staggered_derivative(int m, double h, int order) {
  const auto a = staggered_weights(order);
  std::vector<Eigen::Triplet<double>> trip;
  for (int j = 0; j < m; ++j)
    for (std::size_t k = 1; k <= a.size(); ++k) {
      const int ip = ((j + int(k)) % m + m) % m;
      const int im = ((j + 1 - int(k)) % m + m) % m;
      trip.emplace_back(j, ip, a[k - 1] / h);
      trip.emplace_back(j, im, -a[k - 1] / h);
    }
  SpMat D(m, m);
  D.setFromTriplets(trip.begin(), trip.end());
  return D;
}

/// Half nodes -> nodes interpolation, symmetric about each node.
inline SpMat midpoint_interp(int m, int order) {
  const auto b = midpoint_weights(order);
  std::vector<Eigen::Triplet<double>> trip;
  for (int j = 0; j < m; ++j)
    for (std::size_t k = 1; k <= b.size(); ++k) {
      // node j sits between half nodes j-1/2 (index j-1) and j+1/2 (index j)
      const int hp = ((j + int(k) - 1) % m + m) % m;
      const int hm = ((j - int(k)) % m + m) % m;
      trip.emplace_back(j, hp, b[k - 1]);
      trip.emplace_back(j, hm, b[k - 1]);
    }
  SpMat I(m, m);
  I.setFromTriplets(trip.begin(), trip.end());
  return I;
}

/// Node weights and half-node flux coefficients of the weighted Laplacian.
/// Kept separate from Grid so that a conformal change can rescale them.
struct Stencil {
  double h = 0.0;
  int order = 2;
  Field wnode;  // omega_j
  Field chalf;  // c_{j+1/2}

  static Stencil of(const Grid& g) { return Stencil{g.h, g.order, g.omega, g.omega_half}; }
  int m() const { return static_cast<int>(wnode.size()); }
};

/// Symmetric stiffness S = D^T diag(c h) D, so that M Delta = S for M = diag(w h).
inline SpMat stiffness(const Stencil& st) {
  const SpMat D = staggered_derivative(st.m(), st.h, st.order);
  Field wt = st.chalf * st.h;
  SpMat S = SpMat(D.transpose()) * wt.asDiagonal() * D;
  S.makeCompressed();
  return S;
}

inline Field mass(const Stencil& st) { return st.wnode * st.h; }

// Delta u = -(1/w)(c u')' in flux form; at order 2 this is
// -(1/w_j h^2) [c_{j+1/2}(u_{j+1}-u_j) - c_{j-1/2}(u_j-u_{j-1})]
inline Field laplacian_apply(const Stencil& st, const Field& u) {
  const int m = st.m();
  if (st.order == 2) {
    Field out(m);
    const double ih2 = 1.0 / (st.h * st.h);
    for (int j = 0; j < m; ++j) {
      const int jp = (j + 1) % m, jm = (j + m - 1) % m;
      out[j] = -ih2 / st.wnode[j] *
               (st.chalf[j] * (u[jp] - u[j]) - st.chalf[jm] * (u[j] - u[jm]));
    }
    return out;
  }
  Field su = stiffness(st) * u;
  return su.array() / mass(st).array();
}

inline Field laplacian_apply(const Grid& g, const Field& u) {
  return laplacian_apply(Stencil::of(g), u);
}

inline double pair_quadrature(const Grid& g, const Field& a, const Field& b) {
  return (a.array() * b.array() * g.omega.array()).sum() * g.h;
}

/// The operator w -> q = rho (w/rho)' at half nodes. Vanishes exactly on w = c rho.
inline SpMat lw_half_matrix(const Grid& g) {
  const SpMat D = staggered_derivative(g.m, g.h, g.order);
  Field inv = g.rho.cwiseInverse();
  SpMat Q = g.rho_half.asDiagonal() * D * inv.asDiagonal();
  Q.makeCompressed();
  return Q;
}

inline Field lw_half(const Grid& g, const Field& w) { return lw_half_matrix(g) * w; }

inline double lw_coef(int n) { return 4.0 * (n - 1.0) / n; }

/// How nodal |LW|^2 is assembled from half-node q: sum_k beta_k (B_k q)^2.
/// Order 2 averages the two adjacent squares; higher orders square the
/// interpolated value.
struct NodalSquare {
  std::vector<double> beta;
  std::vector<SpMat> B;
};

inline NodalSquare nodal_square(const Grid& g) {
  NodalSquare ns;
  if (g.order == 2) {
    std::vector<Eigen::Triplet<double>> tp, tm;
    for (int j = 0; j < g.m; ++j) {
      tp.emplace_back(j, j, 1.0);
      tm.emplace_back(j, g.prev(j), 1.0);
    }
    SpMat Bp(g.m, g.m), Bm(g.m, g.m);
    Bp.setFromTriplets(tp.begin(), tp.end());
    Bm.setFromTriplets(tm.begin(), tm.end());
    ns.beta = {0.5, 0.5};
    ns.B = {Bp, Bm};
  } else {
    ns.beta = {1.0};
    ns.B = {midpoint_interp(g.m, g.order)};
  }
  return ns;
}

/// |LW|^2 at nodes.
inline Field lw_pointwise(const Grid& g, const Field& w) {
  const Field q = lw_half(g, w);
  const NodalSquare ns = nodal_square(g);
  Field out = Field::Zero(g.m);
  for (std::size_t k = 0; k < ns.B.size(); ++k) out += ns.beta[k] * (ns.B[k] * q).cwiseAbs2();
  return out * lw_coef(g.n);
}

/// Energy matrix: v^T K w = int <LW, LV> dv.
inline SpMat energy_matrix(const Grid& g) {
  const SpMat Q = lw_half_matrix(g);
  Field wt = g.omega_half * (g.h * lw_coef(g.n));
  SpMat K = SpMat(Q.transpose()) * wt.asDiagonal() * Q;
  K.makeCompressed();
  return K;
}

/// Strong-form L*L w, consistent with the weak form: M^{-1} K w.
inline Field lstarl_apply(const Grid& g, const Field& w) {
  const SpMat K = energy_matrix(g);
  Field kw = K * w;
  return kw.array() / (g.omega.array() * g.h);
}

inline double sup_norm(const Field& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace conflab
