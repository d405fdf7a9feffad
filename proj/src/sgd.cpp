#include "bilevel/sgd.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "bilevel/errors.hpp"

namespace bilevel {

void SgdConfig::validate(int iterations) const {
    interval.validate();
    if (!(beta0 > 0.0)) throw ValidationError("sgd: beta0 must be positive");
    if (!(exponent > 0.5 && exponent <= 1.0))
        throw ValidationError("sgd: step exponent must lie in (1/2, 1] "
                              "(Robbins-Monro)");
    if (!(h0 > 0.0)) throw ValidationError("sgd: h0 must be positive");
    if (m < 1) throw ValidationError("sgd: averaging window m must be >= 1");
    if (iterations < 1) throw ValidationError("sgd: need at least one iteration");
    if (m > iterations)
        throw ValidationError("sgd: averaging window m exceeds iteration count");
    if (!interval.contains(lambda0))
        throw ValidationError("sgd: lambda0 = " + std::to_string(lambda0) +
                              " outside interval [" + std::to_string(interval.lower) +
                              ", " + std::to_string(interval.upper) + "]");
}

double sgd_gradient_exact(const TikhonovSpec& spec, const Eigen::VectorXd& y,
                          const Eigen::VectorXd& u,
                          const Eigen::VectorXd* warm_start,
                          Eigen::VectorXd* minimizer_out) {
    LowerSolveReport base = lower_solve(spec, y, warm_start);
    if (minimizer_out) *minimizer_out = base.minimizer;
    Eigen::VectorXd deriv = dlambda_u_exact(spec, y, &base.minimizer);
    return upper_loss_gradient(base.minimizer, u).dot(deriv);
}

ApproxGradient sgd_gradient_approx(const TikhonovSpec& spec,
                                   const Eigen::VectorXd& y,
                                   const Eigen::VectorXd& u, double h,
                                   const Eigen::VectorXd* warm_start,
                                   Eigen::VectorXd* minimizer_out) {
    if (!(h > 0.0)) throw ValidationError("sgd: difference step h must be positive");
    ApproxGradient result;
    result.h_used = h;
    if (spec.lambda - h <= 0.0) {
        result.h_used = h / 2.0;  // shrink once before flagging
        if (spec.lambda - result.h_used <= 0.0) {
            result.trusted = false;
            result.value = std::numeric_limits<double>::quiet_NaN();
            return result;
        }
    }
    LowerSolveReport base = lower_solve(spec, y, warm_start);
    if (minimizer_out) *minimizer_out = base.minimizer;
    CentralDiffResult diff =
        dlambda_u_central(spec, y, result.h_used, &base.minimizer);
    result.trusted = diff.trusted;
    result.value = upper_loss_gradient(base.minimizer, u).dot(diff.derivative);
    return result;
}

double sgd_gradient_loss_diff(const TikhonovSpec& spec, const Eigen::VectorXd& y,
                              const Eigen::VectorXd& u, double h) {
    if (!(h > 0.0 && spec.lambda - h > 0.0))
        throw ValidationError("sgd: need 0 < h < lambda for the loss difference");
    TikhonovSpec plus = spec, minus = spec;
    plus.lambda += h;
    minus.lambda -= h;
    double f_plus = upper_loss(lower_solve(plus, y).minimizer, u);
    double f_minus = upper_loss(lower_solve(minus, y).minimizer, u);
    return (f_plus - f_minus) / (2.0 * h);
}

SgdTrace run_bsgd(const ForwardProblem& problem,
                  const Eigen::MatrixXd* prior_precision, PairStream stream,
                  const SgdConfig& config, int iterations, GradientKind kind) {
    config.validate(iterations);

    TikhonovSpec spec;
    spec.problem = &problem;
    spec.prior_precision = prior_precision;

    SgdTrace trace;
    trace.iterates.reserve(iterations + 1);
    trace.gradients.reserve(iterations);
    trace.data_indices.reserve(iterations);

    double lambda = config.lambda0;
    trace.iterates.push_back(lambda);
    Eigen::VectorXd warm;

    for (int k = 1; k <= iterations; ++k) {
        auto [y, u] = stream(k);
        spec.lambda = lambda;
        const Eigen::VectorXd* ws = warm.size() > 0 ? &warm : nullptr;

        double g;
        if (kind == GradientKind::Exact) {
            g = sgd_gradient_exact(spec, y, u, ws, &warm);
        } else {
            double h = config.h0;
            const double beta_k = config.beta0 * std::pow(k, -config.exponent);
            if (config.h_decay == HDecay::StepScaled)
                h = config.h0 * std::pow(beta_k, 0.25);
            ApproxGradient ag = sgd_gradient_approx(spec, y, u, h, ws, &warm);
            // A flagged (not fully converged) difference quotient is still a
            // usable descent signal; only non-finite gradients are skipped.
            g = ag.value;
        }

        trace.data_indices.push_back(k);
        trace.gradients.push_back(g);
        if (!std::isfinite(g)) {
            ++trace.skipped;
            trace.iterates.push_back(lambda);  // skipped step leaves lambda
            continue;
        }

        const double beta_k = config.beta0 * std::pow(k, -config.exponent);
        double step = beta_k * g;
        if (config.movement_cap) {
            const double cap = config.lambda0 / k;
            if (step > cap) step = cap;
            if (step < -cap) step = -cap;
        }
        lambda = config.interval.project(lambda - step);
        trace.iterates.push_back(lambda);
    }

    if (trace.skipped > 0.05 * iterations)
        throw NumericalError("sgd: " + std::to_string(trace.skipped) + " of " +
                             std::to_string(iterations) +
                             " steps skipped on NaN gradients (> 5%)");

    double sum = 0.0;
    for (int k = iterations - config.m + 1; k <= iterations; ++k)
        sum += trace.iterates[static_cast<size_t>(k)];
    trace.bar_lambda = sum / config.m;
    return trace;
}

std::vector<double> c_n_sequence(double a, double c, double beta0,
                                 double exponent, int count) {
    if (!(a > 0.0 && c > 0.0 && beta0 > 0.0))
        throw ValidationError("c_n: a, c, beta0 must be positive");
    if (count < 1) throw ValidationError("c_n: count must be >= 1");
    std::vector<double> beta(count + 1);
    for (int k = 1; k <= count; ++k) beta[k] = beta0 * std::pow(k, -exponent);

    // products[k] = prod_{j=k+1..n} (1 - c beta_j), updated incrementally in n.
    std::vector<double> products;
    products.reserve(count + 1);
    std::vector<double> out;
    out.reserve(count);
    for (int n = 1; n <= count; ++n) {
        for (double& p : products) p *= (1.0 - c * beta[n]);
        products.push_back(1.0);  // k = n contributes an empty product
        double best = std::numeric_limits<double>::infinity();
        for (int k = 1; k <= n; ++k) {
            const double term =
                std::max(std::abs(products[static_cast<size_t>(k - 1)]),
                         a * beta[k] / c);
            best = std::min(best, term);
        }
        out.push_back(best);
    }
    return out;
}

}  // namespace bilevel
