#ifndef BILEVEL_KL_HPP
#define BILEVEL_KL_HPP

#include <Eigen/Dense>

#include "bilevel/covariance.hpp"
#include "bilevel/rng.hpp"

namespace bilevel {

/// Zero-mean, unit-variance, symmetric coefficient laws for the KL expansion.
/// Uniform and Rademacher give sub-Gaussian, non-Gaussian priors.
enum class CoefficientLaw { Gaussian, Uniform, Rademacher };

/// Truncated Karhunen-Loeve prior: u = sum_{i<=d} xi_i sqrt(sigma_i/lambda*) phi_i.
struct KlPrior {
    const CovarianceModel* covariance = nullptr;
    int truncation = 0;  // number of KL terms d
    double lambda_star = 1.0;
    CoefficientLaw law = CoefficientLaw::Gaussian;

    void validate() const;
};

struct KlSample {
    Eigen::VectorXd field;         // u on the mesh dofs
    Eigen::VectorXd coefficients;  // xi, length = truncation
};

double draw_coefficient(CoefficientLaw law, RngStream& rng);

KlSample kl_sample(const KlPrior& prior, RngStream& rng);

}  // namespace bilevel

#endif
