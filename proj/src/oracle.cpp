#include "bilevel/oracle.hpp"

#include <cmath>

#include "bilevel/errors.hpp"

namespace bilevel {

LinearOracle::LinearOracle(const Eigen::MatrixXd& A, const Eigen::MatrixXd& C0,
                           double gamma, double lambda_star)
    : lambda_star_(lambda_star) {
    if (!(lambda_star > 0.0)) throw ValidationError("oracle: lambda_star must be positive");
    if (!(gamma > 0.0)) throw ValidationError("oracle: gamma must be positive");
    if (C0.rows() != C0.cols() || A.cols() != C0.rows())
        throw ValidationError("oracle: A and C0 dimensions are inconsistent");

    // C0^{1/2} via symmetric eigensolve.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_c(C0);
    if (es_c.info() != Eigen::Success || es_c.eigenvalues().minCoeff() <= 0.0)
        throw NumericalError("oracle: C0 is not positive definite");
    const Eigen::MatrixXd c0_sqrt = es_c.operatorSqrt();

    // D = C0^{1/2} A^T Gamma^{-1/2}; Gamma = gamma^2 I.
    const Eigen::MatrixXd D = c0_sqrt * A.transpose() / gamma;
    const Eigen::MatrixXd DDt = D * D.transpose();
    norm_normal_matrix_ = (A.transpose() * A).operatorNorm() / (gamma * gamma);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(DDt);
    if (es.info() != Eigen::Success)
        throw NumericalError("oracle: eigendecomposition of D D^T failed");
    spectrum_ = es.eigenvalues().cwiseMax(0.0);
    const Eigen::MatrixXd& V = es.eigenvectors();
    c0_diag_ = (V.transpose() * C0 * V).diagonal();
}

double LinearOracle::loss(double lambda) const {
    // F(lambda) = E||u_lambda(Y) - U||^2 with u_lambda expressed through
    // Q = (D D^T + lambda I)^{-1}:
    //   u_lambda - u = C0^{1/2} (Q D zeta - lambda Q C0^{-1/2} u) in law,
    // independent terms, so
    //   F = sum_i C~_ii q_i^2 (lambda_i + lambda^2/lambda*),  q_i = 1/(lambda_i+lambda).
    if (!(lambda >= 0.0)) throw ValidationError("oracle: lambda must be nonnegative");
    double f = 0.0;
    for (int i = 0; i < spectrum_.size(); ++i) {
        const double q = 1.0 / (spectrum_[i] + lambda);
        f += c0_diag_[i] * q * q * (spectrum_[i] + lambda * lambda / lambda_star_);
    }
    return f;
}

double LinearOracle::gradient(double lambda) const {
    // (1 - lambda/lambda*) Tr(P2 D D^T) with Tr(P2 D D^T) = -sum 2 C~_ii l_i q_i^3.
    if (!(lambda >= 0.0)) throw ValidationError("oracle: lambda must be nonnegative");
    double trace = 0.0;
    for (int i = 0; i < spectrum_.size(); ++i) {
        const double q = 1.0 / (spectrum_[i] + lambda);
        trace -= 2.0 * c0_diag_[i] * spectrum_[i] * q * q * q;
    }
    return (1.0 - lambda / lambda_star_) * trace;
}

double LinearOracle::hessian(double lambda) const {
    if (!(lambda >= 0.0)) throw ValidationError("oracle: lambda must be nonnegative");
    double h = 0.0;
    for (int i = 0; i < spectrum_.size(); ++i) {
        const double q = 1.0 / (spectrum_[i] + lambda);
        const double q3 = q * q * q;
        h += spectrum_[i] * c0_diag_[i] *
             ((1.0 - lambda / lambda_star_) * 6.0 * q3 * q + 2.0 * q3 / lambda_star_);
    }
    return h;
}

ConvexityBounds LinearOracle::convexity_bounds(double lambda_u) const {
    const double ld = lambda_d();
    if (!(ld > 0.0)) throw NumericalError("oracle: D D^T has no positive eigenvalue");
    ConvexityBounds b;
    const double denom = (ld + 2.0 * lambda_star_);
    b.hessian_floor = ld * ld / (denom * denom * lambda_star_ * norm_normal_matrix_);
    b.gradient_floor = 2.0 * ld * ld /
                       (3.0 * std::pow(ld + lambda_u, 3.0) * norm_normal_matrix_);
    b.region_lo = 5.0 * lambda_star_ / 6.0;
    b.region_hi = 7.0 * lambda_star_ / 6.0;
    return b;
}

}  // namespace bilevel
