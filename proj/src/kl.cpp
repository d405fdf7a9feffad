#include "bilevel/kl.hpp"

#include <cmath>

#include "bilevel/errors.hpp"

namespace bilevel {

void KlPrior::validate() const {
    if (!covariance) throw ValidationError("KlPrior: covariance not set");
    if (truncation < 1 || truncation > covariance->dim())
        throw ValidationError("KlPrior: truncation must be in [1, dim]");
    if (lambda_star <= 0.0)
        throw ValidationError("KlPrior: lambda_star must be positive");
}

double draw_coefficient(CoefficientLaw law, RngStream& rng) {
    switch (law) {
        case CoefficientLaw::Gaussian:
            return rng.normal();
        case CoefficientLaw::Uniform:
            // U(-sqrt(3), sqrt(3)) has unit variance
            return std::sqrt(3.0) * (2.0 * rng.uniform() - 1.0);
        case CoefficientLaw::Rademacher:
            return rng.uniform() < 0.5 ? -1.0 : 1.0;
    }
    throw ValidationError("unknown coefficient law");
}

KlSample kl_sample(const KlPrior& prior, RngStream& rng) {
    prior.validate();
    const auto& cov = *prior.covariance;
    KlSample sample;
    sample.coefficients.resize(prior.truncation);
    for (int i = 0; i < prior.truncation; ++i)
        sample.coefficients[i] = draw_coefficient(prior.law, rng);
    Eigen::VectorXd scaled =
        (cov.eigenvalues().head(prior.truncation) / prior.lambda_star)
            .cwiseSqrt()
            .cwiseProduct(sample.coefficients);
    sample.field = cov.eigenvectors().leftCols(prior.truncation) * scaled;
    return sample;
}

}  // namespace bilevel
