#pragma once

// -1/2 L*L W = F for W = w(s) d_s, in weak form
//   1/2 int <LW, LV> dv = - int F v dv   for all symmetric V,
// on the complement of the kernel direction w ~ rho. A Lagrange multiplier
// borders the energy matrix, so the kernel part of F is removed and reported
// as the defect instead of making the system singular.

#include <Eigen/SparseLU>

#include <cmath>
#include <memory>

#include "conflab/geometry.hpp"

namespace conflab {

struct VectorSolution {
  Field w;
  double defect = 0.0;      // |<F, rho>| in the weighted quadrature
  double multiplier = 0.0;  // coefficient of the removed kernel part of F
};

class VectorSolver {
 public:
  explicit VectorSolver(const Grid& g) : g_(g) {
    K_ = energy_matrix(g);
    Mrho_ = g.omega.cwiseProduct(g.rho) * g.h;
    const int m = g.m;
    std::vector<Eigen::Triplet<double>> trip;
    for (int k = 0; k < K_.outerSize(); ++k)
      for (SpMat::InnerIterator it(K_, k); it; ++it)
        trip.emplace_back(it.row(), it.col(), 0.5 * it.value());
    for (int j = 0; j < m; ++j) {
      trip.emplace_back(j, m, Mrho_[j]);
      trip.emplace_back(m, j, Mrho_[j]);
    }
    SpMat A(m + 1, m + 1);
    A.setFromTriplets(trip.begin(), trip.end());
    lu_ = std::make_shared<Eigen::SparseLU<SpMat>>();
    lu_->compute(A);
    if (lu_->info() != Eigen::Success)
      throw Error(ErrorCode::SingularJacobian, "bordered vector operator is singular");
  }

  const Grid& grid() const { return g_; }
  const SpMat& energy() const { return K_; }

  VectorSolution solve(const Field& F) const {
    const int m = g_.m;
    Eigen::VectorXd rhs(m + 1);
    rhs.head(m) = -(g_.omega * g_.h).cwiseProduct(F);
    rhs[m] = 0.0;
    const Eigen::VectorXd x = lu_->solve(rhs);
    VectorSolution out;
    out.w = x.head(m);
    // 1/2 K w + lambda M rho = -M F; pairing with rho gives lambda <rho,rho> = -<F,rho>
    out.multiplier = x[m];
    out.defect = std::abs(pair_quadrature(g_, F, g_.rho));
    return out;
  }

  /// Sup of the weak residual against nodal test functions, after removing the
  /// kernel part of F.
  double weak_residual(const Field& w, const Field& F) const {
    const double c = pair_quadrature(g_, F, g_.rho) / pair_quadrature(g_, g_.rho, g_.rho);
    const Field Fp = F - c * g_.rho;
    const Field r = 0.5 * (K_ * w) + (g_.omega * g_.h).cwiseProduct(Fp);
    return sup_norm(r.cwiseQuotient(g_.omega * g_.h));
  }

 private:
  Grid g_;
  SpMat K_;
  Field Mrho_;
  std::shared_ptr<Eigen::SparseLU<SpMat>> lu_;
};

inline VectorSolution solve_vector(const Grid& g, const Field& F) { return VectorSolver(g).solve(F); }

}  // namespace conflab
