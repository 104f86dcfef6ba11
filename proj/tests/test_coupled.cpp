#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "conflab/coupled.hpp"

using namespace conflab;

namespace {

constexpr double pi = std::numbers::pi;

SigmaParams quiet(double C = 1.0) {
  SigmaParams sp;
  sp.C = C;
  sp.attach_receipt = false;
  return sp;
}

// symmetric about s = 0, so the momentum source has no kernel component
SeedData sphere_seed(int m) {
  const Grid g = build_grid(Backend::SphericalCylinder, 4, m, WarpProfile::cosine(1.0, 0.2), 4);
  return SeedData{g, make_sine_tau(1.0, 0.05, 2 * pi, pi / 2), make_sigma(g, TTKind::Diagonal, quiet()).spec, 1.0,
                  1.0};
}

}  // namespace

TEST(Coupled, ConstantTauDecouples) {
  const Grid g = build_grid(Backend::WarpedTorus, 3, 64, WarpProfile::cosine(1.0, 0.3));
  const SeedData sd{g, make_constant_tau(3.0), make_sigma(g, TTKind::Diagonal, quiet()).spec, 1.0, 1.0};
  HomotopyConfig cfg;
  const SolveOutcome o = run_homotopy(cfg, sd);
  ASSERT_EQ(o.kind, OutcomeKind::Solution) << o.message;
  EXPECT_LT(sup_norm(o.w), 1e-12);
  const LichProblem p = LichProblem::on(g, g.R, sd.tau_a().cwiseAbs2(), source_sq(g, sd.sigma, sd.k, Field::Zero(64)));
  const Field u = solve_lichnerowicz(p, Field::Ones(64)).u;
  EXPECT_LT(sup_norm(o.phi - u) / sup_norm(u), 1e-8);
}

TEST(Coupled, SolutionPassesIndependentCheck) {
  const SeedData sd = sphere_seed(64);
  HomotopyConfig cfg;
  cfg.f = sd.grid.R;
  const SolveOutcome o = run_homotopy(cfg, sd);
  ASSERT_EQ(o.kind, OutcomeKind::Solution) << o.message;
  EXPECT_DOUBLE_EQ(o.t_final, 1.0);
  const ResidualCheck c = check_solution(sd, sd.grid.R, o.phi, o.w);
  EXPECT_TRUE(c.ok(1e-8)) << c.lich << " " << c.vec << " " << c.defect_rel;
  EXPECT_GT(sup_norm(o.w), 0.0);
  // trace rows are monotone in t on this branch and carry t^n gamma
  for (const auto& r : o.trace.rows) EXPECT_NEAR(r.tn_gamma, std::pow(r.t, 4) * r.gamma, 1e-12 * r.gamma);
}

TEST(Coupled, ScalingCovariance) {
  const SeedData sd = sphere_seed(64);
  HomotopyConfig cfg;
  cfg.f = sd.grid.R;
  const SolveOutcome o = run_homotopy(cfg, sd);
  ASSERT_EQ(o.kind, OutcomeKind::Solution);
  const double tol = cfg.picard_tol;
  for (double C : {0.5, 2.0, 10.0}) {
    const auto [phi, w] = scale_solution(o.phi, o.w, C, sd.grid.n);
    const ResidualCheck c = check_solution(scale_seed(sd, C), sd.grid.R, phi, w);
    EXPECT_LE(c.lich, 5 * tol) << C;
    EXPECT_LE(c.vec, 5 * tol) << C;
  }
  EXPECT_THROW(scale_solution(o.phi, o.w, 0.0, 4), Error);
}

TEST(Coupled, FixedPointOfPicardMap) {
  const SeedData sd = sphere_seed(64);
  HomotopyConfig cfg;
  cfg.f = sd.grid.R;
  cfg.t_end = 0.5;
  const SolveOutcome o = run_homotopy(cfg, sd);
  ASSERT_EQ(o.kind, OutcomeKind::Solution);
  // x = t psi is a fixed point of T_f(., t)
  const Field x = 0.5 * o.phi;
  const TfResult r = tf_map(cfg, sd, x, 0.5);
  EXPECT_LT(sup_norm(r.value - x) / sup_norm(x), 1e-7);
  EXPECT_TRUE(tf_map(cfg, sd, x, 0.0).zero);
  EXPECT_THROW(tf_map(cfg, sd, x, 1.5), Error);
}

TEST(Coupled, KernelComponentIsNotCalledASolution) {
  // sin tau on a cos warp: tau' has a rho-component, so only the projected system is solvable
  const Grid g = build_grid(Backend::WarpedTorus, 3, 64, WarpProfile::cosine(1.0, 0.3));
  const SeedData sd{g, make_sine_tau(3.0, 0.1), make_sigma(g, TTKind::Diagonal, quiet()).spec, 1.0, 1.0};
  const Field F = sd.dtau_a();
  EXPECT_GT(relative_defect(g, F), 1e-3);
  HomotopyConfig cfg;
  const SolveOutcome o = run_homotopy(cfg, sd);
  EXPECT_EQ(o.kind, OutcomeKind::NonConvergence);
  EXPECT_NE(o.message.find("conformal Killing"), std::string::npos) << o.message;
}

TEST(Coupled, RejectsBadForcing) {
  const SeedData sd = sphere_seed(32);
  HomotopyConfig cfg;
  cfg.f = Field::Zero(32);
  EXPECT_THROW(run_homotopy(cfg, sd), Error);
  cfg.f = Field::Ones(16);
  EXPECT_THROW(run_homotopy(cfg, sd), Error);
}

TEST(Coupled, TailClassification) {
  auto rows = [](double power) {
    std::vector<TraceRow> v;
    for (int i = 0; i < 6; ++i) {
      TraceRow r;
      r.gamma = std::pow(10.0, i + 1);
      r.tn_gamma = std::pow(r.gamma, power);
      v.push_back(r);
    }
    return v;
  };
  EXPECT_EQ(classify_tail(rows(1.0)).first, Classification::ProductInfty);
  EXPECT_EQ(classify_tail(rows(-0.5)).first, Classification::ProductZero);
  EXPECT_EQ(classify_tail(rows(0.0)).first, Classification::ProductConst);
  EXPECT_EQ(classify_tail({}).first, Classification::None);
}

TEST(Coupled, RescaleNormalizesAndRejectsZeroField) {
  const SeedData sd = sphere_seed(64);
  const Field phi = sample(sd.grid, [](double s) { return 50.0 + 10.0 * std::cos(s); });
  const Field w = sample(sd.grid, [](double s) { return 1e9 * std::sin(s); });
  const Rescaled r = rescale_blowup(sd, phi, w, 0.5);
  EXPECT_NEAR(sup_norm(r.phi), 1.0, 1e-15);
  EXPECT_GE(r.profile_residual, 0.0);
  try {
    rescale_blowup(sd, phi, Field::Zero(64), 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateRescale);
  }
}

TEST(Coupled, LimitIterationGainIsLinearInExponent) {
  // the iteration is 1-homogeneous and tau^a enters through a (log tau)', so
  // V_k(a) = a^k V_k(1): collapse for small a, growth for large a
  const Grid g = build_grid(Backend::WarpedTorus, 3, 128, WarpProfile::cosine(1.0, 0.3));
  const PlateauTau pt = make_plateau_tau(g, 1.0, std::exp(1.0), pi / 4);
  const Field dl = sample(g, pt.profile.dlogtau);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  Field V0(g.m);
  for (int j = 0; j < g.m; ++j) V0[j] = nd(rng);
  const LimitResult r4 = limit_fixed_point(g, 4.0 * dl, 1.0, V0, 40);
  const LimitResult r16 = limit_fixed_point(g, 16.0 * dl, 1.0, V0, 40);
  EXPECT_NEAR(r16.gain / r4.gain, 4.0, 1e-9);
  EXPECT_EQ(limit_fixed_point(g, 4.0 * dl, 1.0, V0).status, LimitStatus::Collapse);
  EXPECT_NE(limit_fixed_point(g, 16.0 * dl, 1.0, V0).status, LimitStatus::Nontrivial);
  EXPECT_EQ(limit_fixed_point(g, 0.0 * dl, 1.0, V0).status, LimitStatus::Collapse);
  EXPECT_THROW(limit_fixed_point(g, dl, 1.0, Field::Zero(g.m)), Error);
}

TEST(Coupled, SecondSolutionNeedsPositiveCurvature) {
  const Grid g = build_grid(Backend::WarpedTorus, 3, 32, WarpProfile::constant(1.0));
  const SeedData sd{g, make_constant_tau(1.0), make_sigma(g, TTKind::Diagonal, quiet()).spec, 1.0, 1.0};
  const SecondSolution ss = find_second_solution(HomotopyConfig{}, sd, 0.1);
  EXPECT_FALSE(ss.found);
  EXPECT_NE(ss.reason.find("not positive"), std::string::npos);
  const SigmaZeroResult z = sigma_zero_solution(HomotopyConfig{}, sd);
  EXPECT_FALSE(z.found);
}

TEST(Coupled, SigmaZeroNeedsAuxiliarySigma) {
  const Grid g = build_grid(Backend::SphericalCylinder, 4, 32, WarpProfile::constant(1.0));
  const SeedData sd{g, make_constant_tau(1.0), TTTensorSpec{}, 1.0, 1.0};
  const SigmaZeroResult z = sigma_zero_solution(HomotopyConfig{}, sd);
  EXPECT_FALSE(z.found);
  EXPECT_NE(z.reason.find("zero"), std::string::npos);
}
