#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "conflab/seed.hpp"

using namespace conflab;

namespace {
constexpr double pi = std::numbers::pi;

Grid torus(int m = 128) { return build_grid(Backend::WarpedTorus, 3, m, WarpProfile::cosine(1.0, 0.3)); }
}  // namespace

TEST(Seed, ConstantTauHasNoCertificate) {
  const Grid g = torus();
  const TauProfile tp = make_constant_tau(3.0);
  EXPECT_FALSE(certify(g, tp).present);
  EXPECT_DOUBLE_EQ(tp.tau(1.234), 3.0);
}

TEST(Seed, SineTauDerivative) {
  const TauProfile tp = make_sine_tau(2.0, 0.1, 2 * pi, 0.5);
  for (double s : {0.0, 0.7, 2.9, 5.1}) {
    const double h = 1e-6;
    const double fd = (tp.logtau(s + h) - tp.logtau(s - h)) / (2 * h);
    EXPECT_NEAR(tp.dlogtau(s), fd, 1e-8);
  }
}

TEST(Seed, PlateauTauIsFlatOnPlateausAndCertified) {
  const Grid g = torus();
  const PlateauTau pt = make_plateau_tau(g, 1.0, std::exp(1.0), pi / 4);
  EXPECT_TRUE(pt.certificate.present);
  EXPECT_TRUE(std::isfinite(pt.certificate.c));
  EXPECT_GT(pt.certificate.c, 0.0);
  EXPECT_NEAR(pt.profile.tau(0.0), 1.0, 1e-12);
  EXPECT_NEAR(pt.profile.tau(pi), std::exp(1.0), 1e-12);
  for (const auto& [lo, hi] : pt.profile.plateaus())
    for (double s = lo; s <= hi; s += (hi - lo) / 8) EXPECT_EQ(pt.profile.dlogtau(s), 0.0);
  EXPECT_GT(pt.tau.minCoeff(), 0.0);
}

TEST(Seed, CertificateScalesWithExponent) {
  // |L(dtau^a/tau^a)| <= c_a |dtau^a/tau^a|^2 with c_a = c / a
  const Grid g = torus();
  const PlateauTau pt = make_plateau_tau(g, 1.0, std::exp(1.0), pi / 4);
  const Certificate c1 = certify(g, pt.profile, 1.0), c4 = certify(g, pt.profile, 4.0);
  EXPECT_NEAR(c4.c, c1.c / 4.0, 1e-9 * c1.c);
}

TEST(Seed, TangentialParallelNeedsFlatOrThreeSphereFiber) {
  const Grid s3 = build_grid(Backend::SphericalCylinder, 3, 64, WarpProfile::constant(1.0));
  SigmaParams sp;
  sp.attach_receipt = false;
  try {
    make_sigma(s3, TTKind::TangentialParallel, sp);
    FAIL() << "expected UnsupportedOnBackend";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnsupportedOnBackend);
  }
  const Grid s4 = build_grid(Backend::SphericalCylinder, 4, 64, WarpProfile::constant(1.0));
  EXPECT_NO_THROW(make_sigma(s4, TTKind::TangentialParallel, sp));
}

TEST(Seed, SigmaReceiptsPass) {
  const Grid g = torus(64);
  for (TTKind kind : {TTKind::TangentialParallel, TTKind::Diagonal}) {
    const SigmaBuild sb = make_sigma(g, kind);
    EXPECT_TRUE(sb.has_receipt);
    EXPECT_TRUE(sb.receipt.pass()) << sb.receipt.formula << " rate " << sb.receipt.rate;
  }
}

TEST(Seed, DiagonalSigmaSquare) {
  const Grid g = torus(32);
  SigmaParams sp;
  sp.C = 2.0;
  sp.attach_receipt = false;
  const TTTensorSpec sig = make_sigma(g, TTKind::Diagonal, sp).spec;
  const Field s2 = sig.sigma_sq(g, 0.5);
  for (int j = 0; j < g.m; ++j) {
    const double mu = 0.5 * 2.0 * std::pow(g.rho[j], -3);
    EXPECT_NEAR(s2[j], 1.5 * mu * mu, 1e-12);
  }
}

TEST(Seed, ScaleSeedExponents) {
  const Grid g = torus(32);
  SeedData sd{g, make_constant_tau(3.0), {}, 2.0, 5.0};
  const SeedData s = scale_seed(sd, 2.0);
  // n = 3, N = 6: tau picks up C^2, sigma C^-4
  EXPECT_DOUBLE_EQ(s.tau_scale, 4.0);
  EXPECT_DOUBLE_EQ(s.k, 5.0 / 16.0);
  EXPECT_THROW(scale_seed(sd, 0.0), Error);
  EXPECT_THROW(scale_seed(sd, -1.0), Error);
}

TEST(Seed, ValidateFlagsKernelAndSupport) {
  const Grid g = torus();
  const PlateauTau pt = make_plateau_tau(g, 1.0, std::exp(1.0), pi / 4);
  SigmaParams sp;
  sp.centers = {pi / 2, 3 * pi / 2};
  sp.radius = 0.5;
  sp.attach_receipt = false;
  SeedData sd{g, pt.profile, make_sigma(g, TTKind::TangentialParallel, sp).spec, 16.0, 100.0};
  sd.nonexistence = true;
  SeedReport r = validate_seed(sd);
  EXPECT_TRUE(r.tau_positive);
  EXPECT_TRUE(r.ckv_present);
  EXPECT_FALSE(r.sigma_trivial);
  EXPECT_TRUE(r.support_avoids_V);
  EXPECT_TRUE(r.hypotheses_ok);

  // a bump sitting on a plateau violates the support condition
  sp.centers = {0.0};
  sd.sigma = make_sigma(g, TTKind::TangentialParallel, sp).spec;
  r = validate_seed(sd);
  EXPECT_FALSE(r.support_avoids_V);
  EXPECT_FALSE(r.hypotheses_ok);

  sd.k = 0.0;
  EXPECT_TRUE(validate_seed(sd).sigma_trivial);
}

TEST(Seed, TauPowerAndDerivative) {
  const Grid g = torus(64);
  const TauProfile tp = make_sine_tau(2.0, 0.2);
  SeedData sd{g, tp, {}, 3.0, 0.0, 1.5};
  const Field T = sd.tau_a(), dT = sd.dtau_a();
  for (int j = 0; j < g.m; ++j) {
    const double t = tp.tau(g.s[j]);
    EXPECT_NEAR(T[j], 1.5 * t * t * t, 1e-10 * T[j]);
    EXPECT_NEAR(dT[j], 3.0 * T[j] * tp.dlogtau(g.s[j]), 1e-10 * (1 + std::abs(dT[j])));
  }
}
