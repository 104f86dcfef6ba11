#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "conflab/geometry.hpp"
#include "conflab/oracle.hpp"
#include "conflab/tt.hpp"

namespace conflab {

/// C-infinity step: 0 for x <= 0, 1 for x >= 1.
inline double smooth_step(double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double a = std::exp(-1.0 / x), b = std::exp(-1.0 / (1.0 - x));
  return a / (a + b);
}

/// Certificate for |L(dtau/tau)| <= c |dtau/tau|^2 off a neighbourhood V of the
/// critical set of tau.
struct Certificate {
  bool present = false;
  double c = std::numeric_limits<double>::quiet_NaN();
  std::vector<char> in_V;  // per node
  double min_dlog2_off_V = 0.0;
  double max_L_off_V = 0.0;
  double max_ratio_in_collars = 0.0;  // where the inequality is not claimed
  int nodes_off_V = 0;
  std::vector<std::pair<double, double>> V_intervals;
};

/// Mean curvature profile, stored through log tau and its derivative so that
/// tau^a and d(tau^a) = a tau^a (log tau)' are exact for every a.
struct TauProfile {
  std::string kind = "constant";
  double tau_min = 1.0, tau_max = 1.0;
  double plateau_width = 0.0, collar_width = 0.0;
  double amp = 0.0;  // sine family
  double period = 2.0 * std::numbers::pi;

  std::function<double(double)> logtau;
  std::function<double(double)> dlogtau;

  double tau(double s) const { return std::exp(logtau(s)); }

  // intervals (mod period) where tau is constant, and the collars around them
  std::vector<std::pair<double, double>> plateaus() const {
    if (kind != "plateau") return {};
    const double p = 0.5 * plateau_width, P = period;
    return {{-p, p}, {0.5 * P - p, 0.5 * P + p}};
  }
  std::vector<std::pair<double, double>> neighbourhood() const {
    if (kind != "plateau") return {};
    const double p = 0.5 * plateau_width + collar_width, P = period;
    return {{-p, p}, {0.5 * P - p, 0.5 * P + p}};
  }
};

inline bool in_arcs(double s, const std::vector<std::pair<double, double>>& arcs, double P) {
  for (auto [a, b] : arcs) {
    double x = std::fmod(s - a, P);
    if (x < 0) x += P;
    if (x <= b - a) return true;
  }
  return false;
}

inline TauProfile make_constant_tau(double tau0, double period = 2.0 * std::numbers::pi) {
  if (!(tau0 > 0)) throw Error(ErrorCode::GeometryMismatch, "tau must be positive");
  TauProfile t;
  t.kind = "constant";
  t.tau_min = t.tau_max = tau0;
  t.period = period;
  const double l = std::log(tau0);
  t.logtau = [l](double) { return l; };
  t.dlogtau = [](double) { return 0.0; };
  return t;
}

// tau0 (1 + amp sin(2 pi s / P + phase))
inline TauProfile make_sine_tau(double tau0, double amp, double period = 2.0 * std::numbers::pi,
                                double phase = 0.0) {
  if (!(tau0 > 0) || std::abs(amp) >= 1.0)
    throw Error(ErrorCode::GeometryMismatch, "tau must be positive");
  TauProfile t;
  t.kind = "sine";
  t.tau_min = tau0 * (1 - std::abs(amp));
  t.tau_max = tau0 * (1 + std::abs(amp));
  t.amp = amp;
  t.period = period;
  const double w = 2.0 * std::numbers::pi / period;
  t.logtau = [=](double s) { return std::log(tau0 * (1.0 + amp * std::sin(w * s + phase))); };
  t.dlogtau = [=](double s) {
    return amp * w * std::cos(w * s + phase) / (1.0 + amp * std::sin(w * s + phase));
  };
  return t;
}

namespace detail {

/// Cumulative integral of a smooth periodic integrand on a fine panel table,
/// 8-point Gauss-Legendre per panel.
struct Cumulative {
  std::function<double(double)> f;
  double P = 0.0;
  int panels = 0;
  std::vector<double> acc;

  static constexpr double x8[8] = {-0.9602898564975363, -0.7966664774136267, -0.5255324099163290,
                                   -0.1834346424956498, 0.1834346424956498,  0.5255324099163290,
                                   0.7966664774136267,  0.9602898564975363};
  static constexpr double w8[8] = {0.1012285362903763, 0.2223810344533745, 0.3137066458778873,
                                   0.3626837833783620, 0.3626837833783620, 0.3137066458778873,
                                   0.2223810344533745, 0.1012285362903763};

  double gl(double a, double b) const {
    const double c = 0.5 * (a + b), r = 0.5 * (b - a);
    double v = 0.0;
    for (int i = 0; i < 8; ++i) v += w8[i] * f(c + r * x8[i]);
    return v * r;
  }

  void build(std::function<double(double)> fn, double period, int np) {
    f = std::move(fn);
    P = period;
    panels = np;
    acc.assign(np + 1, 0.0);
    const double dh = P / np;
    for (int i = 0; i < np; ++i) acc[i + 1] = acc[i] + gl(i * dh, (i + 1) * dh);
  }

  // integral over [0, s], s in [0, P)
  double operator()(double s) const {
    const double dh = P / panels;
    int i = static_cast<int>(std::floor(s / dh));
    i = std::clamp(i, 0, panels - 1);
    return acc[i] + gl(i * dh, s);
  }
};

}  // namespace detail

/// Plateau mean curvature: tau == tau_min on an arc around s = 0, tau == tau_max
/// on an arc around s = P/2, each of full width plateau_width. Between them
/// (log tau)' = +-U chi(s) rho(s), where chi is a smooth cutoff that is 1 on the
/// transition core and ramps to 0 across collars next to the plateaus. On the
/// core dtau/tau is a multiple of the conformal Killing candidate rho ds, so
/// L(dtau/tau) = 0 there.
inline TauProfile make_plateau_tau_profile(std::function<double(double)> rho, double tau_min,
                                           double tau_max, double plateau_width,
                                           double collar_width = -1.0,
                                           double period = 2.0 * std::numbers::pi) {
  if (!(tau_min > 0) || !(tau_max > tau_min))
    throw Error(ErrorCode::GeometryMismatch, "need 0 < tau_min < tau_max");
  if (!(plateau_width > 0) || !(plateau_width < 0.25 * period))
    throw Error(ErrorCode::GeometryMismatch, "plateau_width must lie in (0, period/4)");
  if (collar_width < 0) collar_width = 0.5 * plateau_width;
  const double P = period, p = 0.5 * plateau_width, c = collar_width;
  if (!(0.5 * P - 2 * p - 2 * c > 0))
    throw Error(ErrorCode::GeometryMismatch, "plateaus and collars leave no transition core");

  auto chi_half = [=](double x) {  // x in [0, P/2]: ascending half
    const double lo = p, hi = 0.5 * P - p;
    if (x <= lo || x >= hi) return 0.0;
    return smooth_step((x - lo) / c) * smooth_step((hi - x) / c);
  };
  auto shape = [=](double s) {
    double x = std::fmod(s, P);
    if (x < 0) x += P;
    if (x <= 0.5 * P) return chi_half(x) * rho(x);
    return -chi_half(x - 0.5 * P) * rho(x);
  };
  auto raw = std::make_shared<detail::Cumulative>();
  raw->build(shape, P, 4096);
  const double up = (*raw)(0.5 * P);
  const double down = -(raw->acc.back() - up);
  const double L = std::log(tau_max / tau_min);
  const double Uu = L / up, Ud = L / down;

  auto dlog = [=](double s) {
    double x = std::fmod(s, P);
    if (x < 0) x += P;
    const double v = shape(x);
    return x <= 0.5 * P ? Uu * v : Ud * v;
  };
  const double ltmin = std::log(tau_min);
  auto logt = [=](double s) {
    double x = std::fmod(s, P);
    if (x < 0) x += P;
    const double I = (*raw)(x);
    if (x <= 0.5 * P) return ltmin + Uu * I;
    return ltmin + L + Ud * (I - up);
  };

  TauProfile t;
  t.kind = "plateau";
  t.tau_min = tau_min;
  t.tau_max = tau_max;
  t.plateau_width = plateau_width;
  t.collar_width = c;
  t.period = P;
  t.logtau = logt;
  t.dlogtau = dlog;
  return t;
}

/// Evaluates the inequality |L(dtau/tau)| <= c |dtau/tau|^2 at the nodes of M\V,
/// using the discrete reduced operator. A node counts as off V only when its
/// whole stencil lies outside V. Scaling tau -> tau^a divides c by a.
inline Certificate certify(const Grid& g, const TauProfile& tp, double a = 1.0) {
  Certificate cert;
  if (tp.kind != "plateau") return cert;
  cert.present = true;
  const auto V = tp.neighbourhood();
  cert.V_intervals = V;
  const Field dl = sample(g, tp.dlogtau) * a;
  const Field L2 = lw_pointwise(g, dl);
  const int reach = g.order / 2 + 1;
  cert.in_V.assign(g.m, 0);
  for (int j = 0; j < g.m; ++j) {
    bool inside = false;
    for (int k = -reach; k <= reach; ++k)
      inside = inside || in_arcs(g.s[j] + k * g.h, V, g.period);
    cert.in_V[j] = inside ? 1 : 0;
  }
  double maxL = 0.0, mind = std::numeric_limits<double>::infinity(), collar = 0.0;
  int off = 0;
  for (int j = 0; j < g.m; ++j) {
    const double Lj = std::sqrt(L2[j]), dj = dl[j] * dl[j];
    if (cert.in_V[j]) {
      if (dj > 0 && !in_arcs(g.s[j], tp.plateaus(), g.period))
        collar = std::max(collar, Lj / dj);
      continue;
    }
    ++off;
    maxL = std::max(maxL, Lj);
    mind = std::min(mind, dj);
  }
  cert.nodes_off_V = off;
  cert.max_L_off_V = maxL;
  cert.min_dlog2_off_V = mind;
  cert.max_ratio_in_collars = collar;
  cert.c = (off > 0 && mind > 0) ? maxL / mind : std::numeric_limits<double>::infinity();
  return cert;
}

struct PlateauTau {
  Field tau;
  TauProfile profile;
  Certificate certificate;
};

inline PlateauTau make_plateau_tau(const Grid& g, double tau_min, double tau_max,
                                   double plateau_width, double collar_width = -1.0) {
  WarpProfile prof = g.profile;
  auto tp = make_plateau_tau_profile([prof](double s) { return prof.eval(s); }, tau_min, tau_max,
                                     plateau_width, collar_width, g.period);
  PlateauTau out;
  out.profile = tp;
  out.tau = sample(g, [&](double s) { return tp.tau(s); });
  out.certificate = certify(g, tp);
  if (!std::isfinite(out.certificate.c))
    throw Error(ErrorCode::GeometryMismatch, "plateau certificate is not finite");
  return out;
}

// ---- sigma ----

/// Max over sample nodes of |div sigma| + |tr sigma| from the full-tensor oracle
/// at resolutions {32, 64, 128}.
inline oracle::Receipt tt_receipt(const Grid& g, const TTTensorSpec& sig) {
  std::vector<int> ms{32, 64, 128};
  std::vector<double> errs;
  for (int m : ms) {
    const Grid gm = build_grid(g.backend, g.n, m, g.profile, 2);
    auto pg = oracle::product_grid_for(gm);
    auto S = oracle::lift_tt(pg, sig);
    double e = 0.0;
    for (int j = 0; j < m; j += m / 16) {
      const auto X = oracle::fiber_point(gm, gm.s[j]);
      const auto dv = oracle::oracle_div(pg, S, X);
      e = std::max(e, dv.norm() + std::abs(oracle::oracle_trace(pg, S(X), X)));
    }
    errs.push_back(e);
  }
  return oracle::make_receipt(std::string("tt-") + to_string(sig.kind) + "-" + to_string(g.backend),
                              ms, errs);
}

struct SigmaParams {
  std::vector<double> centers{std::numbers::pi};
  double radius = 0.5;
  double qnorm2 = 2.0;
  double C = 1.0;
  bool attach_receipt = true;
};

struct SigmaBuild {
  TTTensorSpec spec;
  bool has_receipt = false;
  oracle::Receipt receipt;
};

/// TangentialParallel lives on the flat torus, and on the round S^3 fiber
/// (n = 4) through the left-invariant coframe; other round fibers have no
/// parallel trace-free frame.
inline SigmaBuild make_sigma(const Grid& g, TTKind kind, const SigmaParams& p = {}) {
  SigmaBuild out;
  out.spec.kind = kind;
  if (kind == TTKind::TangentialParallel) {
    if (g.backend == Backend::SphericalCylinder && g.n != 4)
      throw Error(ErrorCode::UnsupportedOnBackend,
                  "TangentialParallel on a round fiber needs n = 4");
    out.spec.f.centers = p.centers;
    out.spec.f.radius = p.radius;
    out.spec.f.period = g.period;
    out.spec.qnorm2 = p.qnorm2;
  } else if (kind == TTKind::Diagonal) {
    out.spec.C = p.C;
  }
  if (p.attach_receipt && kind != TTKind::Zero) {
    out.receipt = tt_receipt(g, out.spec);
    out.has_receipt = true;
    if (!out.receipt.pass())
      throw Error(ErrorCode::NotTransverse, "oracle divergence does not converge to zero");
  }
  return out;
}

// ---- seed ----

struct SeedData {
  Grid grid;
  TauProfile tau;
  TTTensorSpec sigma;
  double a = 1.0;           // tau -> tau^a
  double k = 1.0;           // sigma -> k sigma
  double tau_scale = 1.0;   // extra constant multiplying tau^a (homotopy / scaling)
  bool nonexistence = false;  // require supp sigma to avoid V

  Field tau_a() const {
    return sample(grid, [&](double s) { return tau_scale * std::exp(a * tau.logtau(s)); });
  }
  Field dtau_a() const {
    return sample(grid, [&](double s) {
      return tau_scale * std::exp(a * tau.logtau(s)) * a * tau.dlogtau(s);
    });
  }
  Field dlog_tau_a() const { return sample(grid, tau.dlogtau) * a; }
  Certificate certificate() const { return certify(grid, tau, a); }
};

/// Scaling symmetry of the system: (g, C^{(N-2)/2} tau, C^{-(N+2)/2} sigma).
inline SeedData scale_seed(const SeedData& s, double C) {
  if (!(C > 0)) throw Error(ErrorCode::NonPositiveC, "scaling constant must be positive");
  SeedData o = s;
  const double N = s.grid.N();
  o.tau_scale *= std::pow(C, 0.5 * (N - 2.0));
  o.k *= std::pow(C, -0.5 * (N + 2.0));
  return o;
}

struct SeedReport {
  bool tau_positive = false;
  double tau_min = 0.0;
  bool ckv_present = false;
  double ckv_quadrature = 0.0;
  std::string ckv_note;
  bool sigma_trivial = true;
  Certificate certificate;
  bool support_avoids_V = true;
  bool hypotheses_ok = false;
};

inline SeedReport validate_seed(const SeedData& sd, double kernel_tol = 1e-20) {
  SeedReport r;
  const Field t = sd.tau_a();
  r.tau_min = t.minCoeff();
  r.tau_positive = r.tau_min > 0;
  const Grid& g = sd.grid;
  const Field lw = lw_pointwise(g, g.rho);
  r.ckv_quadrature = pair_quadrature(g, lw, Field::Ones(g.m));
  r.ckv_present = r.ckv_quadrature < kernel_tol;
  r.ckv_note = r.ckv_present ? "kernel present; vector solve will project" : "no kernel found";
  r.sigma_trivial = sd.sigma.kind == TTKind::Zero || sd.k == 0.0 ||
                    sd.sigma.sigma_sq(g, sd.k).maxCoeff() == 0.0;
  r.certificate = sd.certificate();
  if (r.certificate.present && sd.sigma.kind == TTKind::TangentialParallel) {
    const auto V = sd.tau.neighbourhood();
    for (int j = 0; j < g.m; ++j)
      if (sd.sigma.f(g.s[j]) != 0.0 && in_arcs(g.s[j], V, g.period)) r.support_avoids_V = false;
    // also check the bump arcs themselves against V
    for (double c : sd.sigma.f.centers)
      for (double x = -sd.sigma.f.radius; x <= sd.sigma.f.radius; x += sd.sigma.f.radius / 64)
        if (in_arcs(c + x, V, g.period)) r.support_avoids_V = false;
  } else if (r.certificate.present && sd.sigma.kind == TTKind::Diagonal) {
    r.support_avoids_V = false;  // full support
  }
  r.hypotheses_ok = r.tau_positive && !r.sigma_trivial &&
                    (!sd.nonexistence || (r.certificate.present && r.support_avoids_V &&
                                          std::isfinite(r.certificate.c)));
  return r;
}

}  // namespace conflab
