#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "conflab/scalar_solver.hpp"
#include "conflab/validation.hpp"

using namespace conflab;

namespace {

LichProblem cmc_problem(int m) {
  const Grid g = build_grid(Backend::WarpedTorus, 3, m, WarpProfile::constant(1.0));
  return LichProblem::on(g, Field::Zero(m), Field::Constant(m, 9.0), Field::Constant(m, 6.0));
}

}  // namespace

TEST(Lichnerowicz, CmcClosedFormRoot) {
  // (2/3) 9 u^5 = 6 u^-7 at u = 1
  const LichProblem p = cmc_problem(128);
  EXPECT_LT(sup_norm(residual(p, Field::Ones(128))), 1e-14);
  const ScalarOutcome o = solve_lichnerowicz(p, Field::Constant(128, 0.5));
  EXPECT_LT(sup_norm(o.u - Field::Ones(128)), 1e-8);
}

TEST(Lichnerowicz, CmcClosedFormGeneralConstants) {
  // u = (n w^2 / ((n-1) tau^2))^{1/(2N)}
  const Grid g = build_grid(Backend::WarpedTorus, 3, 64, WarpProfile::constant(1.0));
  const double tau = 2.0, w2 = 5.0;
  const LichProblem p = LichProblem::on(g, Field::Zero(64), Field::Constant(64, tau * tau), Field::Constant(64, w2));
  const double exact = std::pow(3.0 * w2 / (2.0 * tau * tau), 1.0 / 12.0);
  EXPECT_NEAR(solve_lichnerowicz(p, Field::Ones(64)).u.maxCoeff(), exact, 1e-10);
}

TEST(Lichnerowicz, ScaleFamilyIsReportedNotSolved) {
  const Grid g = build_grid(Backend::WarpedTorus, 3, 32, WarpProfile::constant(1.0));
  const Field z = Field::Zero(32);
  const LichProblem p = LichProblem::on(g, z, z, z);
  EXPECT_EQ(solve_lichnerowicz(p, Field::Ones(32)).status, ScalarStatus::ScaleFamily);
}

TEST(Lichnerowicz, RejectsNonPositiveStart) {
  const LichProblem p = cmc_problem(32);
  Field u = Field::Ones(32);
  u[3] = -1.0;
  EXPECT_THROW(solve_newton(p, u), Error);
}

TEST(Lichnerowicz, MonotoneIterationNeedsOrderTwo) {
  const Grid g = build_grid(Backend::WarpedTorus, 3, 32, WarpProfile::constant(1.0), 4);
  const LichProblem p = LichProblem::on(g, Field::Zero(32), Field::Constant(32, 9.0), Field::Constant(32, 6.0));
  const Bracket b{Field::Constant(32, 0.5), Field::Constant(32, 2.0)};
  EXPECT_THROW(solve_monotone(p, b), Error);
}

TEST(Lichnerowicz, BracketFromBothEnds) {
  std::mt19937_64 rng(20240611);
  for (int i = 0; i < 20; ++i) {
    const RandomProblem rp = random_lich_problem(rng);
    const BracketCheck c = bracket_check(rp.problem);
    EXPECT_TRUE(c.converged) << i;
    EXPECT_TRUE(c.in_bracket) << i;
    EXPECT_TRUE(c.monotone) << i;
    EXPECT_LE(c.endpoint_gap, c.tol_u) << i;
  }
}

TEST(Lichnerowicz, NewtonAgreesWithMonotone) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 5; ++i) {
    const RandomProblem rp = random_lich_problem(rng);
    const Bracket b = build_bracket(rp.problem);
    const Field um = solve_monotone(rp.problem, b).u;
    const Field un = solve_newton(rp.problem, Field::Ones(rp.grid.m)).u;
    EXPECT_LT(sup_norm(um - un) / sup_norm(un), 1e-8);
  }
}

TEST(Lichnerowicz, ComparisonOrdering) {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 20; ++i) EXPECT_LE(ordering_violation(rng), 1e-8) << i;
}

TEST(Lichnerowicz, CompareCertifiesSupersolution) {
  const LichProblem p = cmc_problem(64);
  const Field u = solve_lichnerowicz(p, Field::Ones(64)).u;
  const CompareReport up = compare(p, Field::Constant(64, 1.5), u, CompareKind::Super);
  EXPECT_TRUE(up.certified);
  EXPECT_TRUE(up.ordered);
  // 0.5 is a subsolution, not a supersolution
  EXPECT_FALSE(compare(p, Field::Constant(64, 0.5), u, CompareKind::Super).certified);
  EXPECT_TRUE(compare(p, Field::Constant(64, 0.5), u, CompareKind::Sub).ordered);
}

TEST(Lichnerowicz, ConformalCovariance) {
  std::mt19937_64 rng(31);
  for (int i = 0; i < 5; ++i) {
    const RandomProblem rp = random_lich_problem(rng, 128);
    const Field psi = random_smooth(rng, rp.grid, 1.5, 0.9);
    const CovarianceCheck c = covariance_check(rp.problem, psi);
    EXPECT_LE(c.solve_gap, 5e-10) << i;
    EXPECT_LE(c.integral_N, 1e-8) << i;
    EXPECT_LE(c.integral_2N, 1e-8) << i;
  }
}

TEST(Lichnerowicz, ConformalTransformResidualIdentity) {
  // residual_new(u / psi) = psi^{1-N} residual_old(u), node by node, for any u
  std::mt19937_64 rng(5);
  const RandomProblem rp = random_lich_problem(rng);
  const Field psi = random_smooth(rng, rp.grid, 1.5, 0.9);
  const Field u = random_smooth(rng, rp.grid, 2.0, 0.9);
  const auto [q, uhat] = conformal_transform(rp.problem, u, psi);
  const Field lhs = residual(q, uhat);
  const Field rhs = (psi.array().pow(1.0 - q.N()) * residual(rp.problem, u).array()).matrix();
  EXPECT_LT(sup_norm(lhs - rhs), 1e-9 * (1.0 + sup_norm(rhs)));
}
