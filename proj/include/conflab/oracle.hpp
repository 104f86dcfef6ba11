#pragma once

// Full-tensor finite differences in a chart of M = S^1 x F, used only to check
// the reduced formulas. Nothing here knows about the symmetry reduction: the
// metric is handed over as components in coordinates X = (s, y_1..y_d) and all
// Christoffel symbols, covariant derivatives and curvature come from central
// differences with steps (hs, hy).
//
// Flat torus fiber: g = ds^2 + rho^2 |dy|^2.
// Round fiber:      g = ds^2 + rho^2 4|dy|^2/(1+|y|^2)^2 (stereographic chart).

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "conflab/geometry.hpp"
#include "conflab/tt.hpp"

namespace conflab::oracle {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Point = Eigen::VectorXd;

using ScalarFn = std::function<double(const Point&)>;
using VectorFn = std::function<Vec(const Point&)>;  // contravariant components
using TensorFn = std::function<Mat(const Point&)>;  // covariant (0,2) components

struct ProductGrid {
  Backend backend = Backend::WarpedTorus;
  int n = 3;
  double hs = 0.1;  // s-step
  double hy = 0.1;  // fiber step
  std::function<double(double)> rho;
  // replaces the warped metric entirely, e.g. by a conformally changed one
  std::function<Mat(const Point&)> metric_override;

  int d() const { return n - 1; }
  double step(int i) const { return i == 0 ? hs : hy; }

  /// Unit-fiber metric factor: 1 for the torus, 4/(1+|y|^2)^2 for the sphere.
  double fiber_factor(const Point& X) const {
    if (backend == Backend::WarpedTorus) return 1.0;
    double r2 = 0.0;
    for (int a = 1; a < n; ++a) r2 += X[a] * X[a];
    return 4.0 / ((1.0 + r2) * (1.0 + r2));
  }

  Mat metric(const Point& X) const {
    if (metric_override) return metric_override(X);
    Mat g = Mat::Zero(n, n);
    g(0, 0) = 1.0;
    const double r = rho(X[0]);
    const double f = r * r * fiber_factor(X);
    for (int a = 1; a < n; ++a) g(a, a) = f;
    return g;
  }
};

inline Point shifted(const Point& X, int i, double dh) {
  Point Y = X;
  Y[i] += dh;
  return Y;
}

/// dg[k](i,j) = d_k g_ij
inline std::vector<Mat> metric_derivative(const ProductGrid& pg, const Point& X) {
  std::vector<Mat> dg(pg.n);
  for (int k = 0; k < pg.n; ++k) {
    const double hk = pg.step(k);
    dg[k] = (pg.metric(shifted(X, k, hk)) - pg.metric(shifted(X, k, -hk))) / (2.0 * hk);
  }
  return dg;
}

/// Gamma[k](i,j) = Gamma^k_ij
inline std::vector<Mat> christoffel(const ProductGrid& pg, const Point& X) {
  const int n = pg.n;
  const Mat gi = pg.metric(X).inverse();
  const auto dg = metric_derivative(pg, X);
  std::vector<Mat> G(n, Mat::Zero(n, n));
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double v = 0.0;
        for (int l = 0; l < n; ++l) v += gi(k, l) * (dg[i](l, j) + dg[j](l, i) - dg[l](i, j));
        G[k](i, j) = 0.5 * v;
      }
  return G;
}

inline double oracle_curvature(const ProductGrid& pg, const Point& X) {
  const int n = pg.n;
  const Mat gi = pg.metric(X).inverse();
  const auto G = christoffel(pg, X);
  // dG[l][k](i,j) = d_l Gamma^k_ij
  std::vector<std::vector<Mat>> dG(n);
  for (int l = 0; l < n; ++l) {
    const double hl = pg.step(l);
    const auto Gp = christoffel(pg, shifted(X, l, hl));
    const auto Gm = christoffel(pg, shifted(X, l, -hl));
    dG[l].resize(n);
    for (int k = 0; k < n; ++k) dG[l][k] = (Gp[k] - Gm[k]) / (2.0 * hl);
  }
  double R = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double Ric = 0.0;
      for (int k = 0; k < n; ++k) {
        Ric += dG[k][k](i, j) - dG[j][k](i, k);
        for (int l = 0; l < n; ++l) Ric += G[k](k, l) * G[l](i, j) - G[k](j, l) * G[l](i, k);
      }
      R += gi(i, j) * Ric;
    }
  return R;
}

/// Nonnegative Laplacian -g^{ij}(d_i d_j u - Gamma^k_ij d_k u).
inline double oracle_laplacian(const ProductGrid& pg, const ScalarFn& u, const Point& X) {
  const int n = pg.n;
  const Mat gi = pg.metric(X).inverse();
  const auto G = christoffel(pg, X);
  Vec du(n);
  for (int k = 0; k < n; ++k) {
    const double hk = pg.step(k);
    du[k] = (u(shifted(X, k, hk)) - u(shifted(X, k, -hk))) / (2.0 * hk);
  }
  double out = 0.0;
  const double u0 = u(X);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (gi(i, j) == 0.0) continue;
      double dij;
      if (i == j) {
        const double hi = pg.step(i);
        dij = (u(shifted(X, i, hi)) - 2.0 * u0 + u(shifted(X, i, -hi))) / (hi * hi);
      } else {
        const double hi = pg.step(i), hj = pg.step(j);
        auto at = [&](double a, double b) { return u(shifted(shifted(X, i, a), j, b)); };
        dij = (at(hi, hj) - at(hi, -hj) - at(-hi, hj) + at(-hi, -hj)) / (4.0 * hi * hj);
      }
      double conn = 0.0;
      for (int k = 0; k < n; ++k) conn += G[k](i, j) * du[k];
      out -= gi(i, j) * (dij - conn);
    }
  return out;
}

inline Mat oracle_lw(const ProductGrid& pg, const VectorFn& W, const Point& X) {
  const int n = pg.n;
  const Mat g = pg.metric(X);
  const auto G = christoffel(pg, X);
  auto lower = [&](const Point& Y) -> Vec { return pg.metric(Y) * W(Y); };
  const Vec Wl = lower(X);
  Mat nab(n, n);  // nab(i,j) = nabla_i W_j
  for (int i = 0; i < n; ++i) {
    const double hi = pg.step(i);
    const Vec dW = (lower(shifted(X, i, hi)) - lower(shifted(X, i, -hi))) / (2.0 * hi);
    for (int j = 0; j < n; ++j) {
      double v = dW[j];
      for (int k = 0; k < n; ++k) v -= G[k](i, j) * Wl[k];
      nab(i, j) = v;
    }
  }
  const double div = (g.inverse() * nab).trace();
  return nab + nab.transpose() - (2.0 / n) * div * g;
}

inline double oracle_trace(const ProductGrid& pg, const Mat& S, const Point& X) {
  return (pg.metric(X).inverse() * S).trace();
}

inline double oracle_norm2(const ProductGrid& pg, const Mat& S, const Point& X) {
  const Mat gi = pg.metric(X).inverse();
  return (gi * S * gi * S.transpose()).trace();
}

inline double oracle_pair(const ProductGrid& pg, const Mat& A, const Mat& B, const Point& X) {
  const Mat gi = pg.metric(X).inverse();
  return (gi * A * gi * B.transpose()).trace();
}

/// (div S)_j = g^{ik} nabla_i S_kj, covariant components.
inline Vec oracle_div(const ProductGrid& pg, const TensorFn& S, const Point& X) {
  const int n = pg.n;
  const Mat gi = pg.metric(X).inverse();
  const auto G = christoffel(pg, X);
  const Mat S0 = S(X);
  std::vector<Mat> dS(n);
  for (int i = 0; i < n; ++i) {
    const double hi = pg.step(i);
    dS[i] = (S(shifted(X, i, hi)) - S(shifted(X, i, -hi))) / (2.0 * hi);
  }
  Vec out = Vec::Zero(n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < n; ++k) {
        if (gi(i, k) == 0.0) continue;
        double v = dS[i](k, j);
        for (int l = 0; l < n; ++l) v -= G[l](i, k) * S0(l, j) + G[l](i, j) * S0(k, l);
        out[j] += gi(i, k) * v;
      }
  return out;
}

/// L*L W = -2 div(LW), returned with the index raised.
inline Vec oracle_lstarl(const ProductGrid& pg, const VectorFn& W, const Point& X) {
  TensorFn LW = [&](const Point& Y) { return oracle_lw(pg, W, Y); };
  const Vec cov = -2.0 * oracle_div(pg, LW, X);
  return pg.metric(X).inverse() * cov;
}

/// Vacuum constraints of (g, K): R - |K|^2 + (tr K)^2 and div K - d(tr K).
struct ConstraintValues {
  double hamiltonian = 0.0;
  Vec momentum;
};

inline ConstraintValues oracle_constraints(const ProductGrid& pg, const TensorFn& K,
                                           const Point& X) {
  ConstraintValues cv;
  const Mat K0 = K(X);
  const double tr = oracle_trace(pg, K0, X);
  cv.hamiltonian = oracle_curvature(pg, X) - oracle_norm2(pg, K0, X) + tr * tr;
  cv.momentum = oracle_div(pg, K, X);
  for (int i = 0; i < pg.n; ++i) {
    const double hi = pg.step(i);
    const double dtr = (oracle_trace(pg, K(shifted(X, i, hi)), shifted(X, i, hi)) -
                        oracle_trace(pg, K(shifted(X, i, -hi)), shifted(X, i, -hi))) /
                       (2.0 * hi);
    cv.momentum[i] -= dtr;
  }
  return cv;
}

// ---- lifts of the reduced objects ----

inline VectorFn lift_vector(std::function<double(double)> w, int n) {
  return [w, n](const Point& X) {
    Vec v = Vec::Zero(n);
    v[0] = w(X[0]);
    return v;
  };
}

inline ScalarFn lift_scalar(std::function<double(double)> u) {
  return [u](const Point& X) { return u(X[0]); };
}

/// Left-invariant coframe of the unit S^3 pulled back through the inverse
/// stereographic chart: e^a_mu = <dx/dy^mu, x * i_a> in R^4 = H.
inline Mat s3_coframe(const Point& X) {
  const double y1 = X[1], y2 = X[2], y3 = X[3];
  const double r2 = y1 * y1 + y2 * y2 + y3 * y3;
  const double D = 1.0 + r2;
  const std::array<double, 4> x{(1.0 - r2) / D, 2.0 * y1 / D, 2.0 * y2 / D, 2.0 * y3 / D};
  const std::array<double, 3> y{y1, y2, y3};
  // dx/dy^mu, mu = 0..2
  Mat J(4, 3);
  for (int mu = 0; mu < 3; ++mu) {
    J(0, mu) = -4.0 * y[mu] / (D * D);
    for (int k = 0; k < 3; ++k)
      J(k + 1, mu) = (k == mu ? 2.0 / D : 0.0) - 4.0 * y[k] * y[mu] / (D * D);
  }
  // right multiplication by i, j, k
  const double a = x[0], b = x[1], c = x[2], d = x[3];
  Mat E(3, 4);
  E.row(0) << -b, a, d, -c;
  E.row(1) << -c, -d, a, b;
  E.row(2) << -d, c, -b, a;
  return E * J;  // 3 x 3, rows = frame index a
}

/// A fixed trace-free Q with |Q|^2 = qnorm2: diag(1, -1, 0, ...) scaled.
inline Mat reference_Q(int d, double qnorm2) {
  Mat Q = Mat::Zero(d, d);
  Q(0, 0) = 1.0;
  Q(1, 1) = -1.0;
  return Q * std::sqrt(qnorm2 / 2.0);
}

inline TensorFn lift_tt(const ProductGrid& pg, const TTTensorSpec& sig, double scale = 1.0) {
  const int n = pg.n, d = pg.d();
  if (sig.kind == TTKind::Diagonal) {
    return [pg, sig, scale, n, d](const Point& X) {
      const double r = pg.rho(X[0]);
      const double mu = scale * sig.C * std::pow(r, -n);
      Mat S = Mat::Zero(n, n);
      S(0, 0) = mu;
      const double f = -mu / d * r * r * pg.fiber_factor(X);
      for (int a = 1; a < n; ++a) S(a, a) = f;
      return S;
    };
  }
  if (sig.kind == TTKind::TangentialParallel) {
    const Mat Q = reference_Q(d, sig.qnorm2);
    if (pg.backend == Backend::WarpedTorus) {
      return [sig, scale, n, d, Q](const Point& X) {
        Mat S = Mat::Zero(n, n);
        S.block(1, 1, d, d) = scale * sig.f(X[0]) * Q;
        return S;
      };
    }
    if (n != 4) throw Error(ErrorCode::UnsupportedOnBackend, "round fiber needs n = 4");
    return [sig, scale, n, Q](const Point& X) {
      const Mat e = s3_coframe(X);
      Mat S = Mat::Zero(n, n);
      S.block(1, 1, 3, 3) = scale * sig.f(X[0]) * (e.transpose() * Q * e);
      return S;
    };
  }
  return [n](const Point&) { return Mat::Zero(n, n); };
}

// ---- receipts ----

struct Receipt {
  std::string formula;
  std::vector<int> resolutions;
  std::vector<double> errors;
  double rate = 0.0;
  double floor = 1e-10;  // errors below this are treated as exact
  double min_rate = 1.8;

  bool exact() const {
    for (double e : errors)
      if (e > floor) return false;
    return true;
  }
  bool pass() const { return exact() || rate >= min_rate; }
};

/// Least-squares slope of -log(err) against log(m).
inline double fitted_rate(const std::vector<int>& ms, const std::vector<double>& errs) {
  const int k = static_cast<int>(ms.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = 0; i < k; ++i) {
    const double x = std::log(double(ms[i]));
    const double y = std::log(std::max(errs[i], 1e-300));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return -(k * sxy - sx * sy) / (k * sxx - sx * sx);
}

inline Receipt make_receipt(const std::string& id, const std::vector<int>& ms,
                            const std::vector<double>& errs) {
  Receipt r;
  r.formula = id;
  r.resolutions = ms;
  r.errors = errs;
  r.rate = fitted_rate(ms, errs);
  return r;
}

inline ProductGrid product_grid_for(const Grid& g) {
  ProductGrid pg;
  pg.backend = g.backend;
  pg.n = g.n;
  pg.hs = g.h;
  pg.hy = g.h;
  WarpProfile prof = g.profile;
  pg.rho = [prof](double s) { return prof.eval(s); };
  return pg;
}

/// A generic fiber sample point, away from the chart's symmetric centre.
inline Point fiber_point(const Grid& g, double s) {
  Point X = Point::Zero(g.n);
  X[0] = s;
  const double base[] = {0.31, -0.17, 0.23, 0.11, -0.29};
  for (int a = 1; a < g.n; ++a) X[a] = base[(a - 1) % 5];
  return X;
}

}  // namespace conflab::oracle
