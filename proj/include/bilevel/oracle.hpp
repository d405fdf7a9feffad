#ifndef BILEVEL_ORACLE_HPP
#define BILEVEL_ORACLE_HPP

#include <Eigen/Dense>

namespace bilevel {

struct ConvexityBounds {
    double hessian_floor = 0.0;    // H* on the convexity region
    double gradient_floor = 0.0;   // L* outside the 4/3 lambda* band
    double region_lo = 0.0;        // [5/6, 7/6] lambda* band
    double region_hi = 0.0;
};

/// Closed-form population quantities for the linear-Gaussian model
///   y = A u + xi,  u ~ N(0, C0/lambda*),  xi ~ N(0, Gamma).
/// Everything is evaluated in the eigenbasis of D D^T with
/// D = C0^{1/2} A^T Gamma^{-1/2}, where Q_lambda = (D D^T + lambda I)^{-1}
/// is diagonal.
class LinearOracle {
public:
    LinearOracle(const Eigen::MatrixXd& A, const Eigen::MatrixXd& C0,
                 double gamma, double lambda_star);

    double lambda_star() const { return lambda_star_; }
    /// Largest eigenvalue of D D^T.
    double lambda_d() const { return spectrum_.maxCoeff(); }
    const Eigen::VectorXd& spectrum() const { return spectrum_; }

    /// E f(lambda, Z) = E || u_lambda(Y) - U ||^2.
    double loss(double lambda) const;
    /// dF/dlambda = (1 - lambda/lambda*) Tr(P2 D D^T).
    double gradient(double lambda) const;
    /// d2F/dlambda2 = Tr(D D^T ((1 - lambda/lambda*) P3 - P2/lambda*)).
    double hessian(double lambda) const;

    /// H*, L* and the local convexity region around lambda*.
    ConvexityBounds convexity_bounds(double lambda_u) const;

private:
    double lambda_star_;
    double norm_normal_matrix_;   // ||A^T Gamma^{-1} A||
    Eigen::VectorXd spectrum_;    // eigenvalues of D D^T
    Eigen::VectorXd c0_diag_;     // diag of V^T C0 V in that basis
};

}  // namespace bilevel

#endif
