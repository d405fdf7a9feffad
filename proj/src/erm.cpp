#include "bilevel/erm.hpp"

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

#include "bilevel/errors.hpp"

namespace bilevel {

void TrainingSet::validate() const {
    if (observations.cols() != targets.cols())
        throw ValidationError("training set: observation/target counts differ");
    if (observations.cols() == 0)
        throw ValidationError("training set: empty");
}

void LambdaInterval::validate() const {
    if (!(lower > 0.0))
        throw ValidationError("lambda interval: lower bound must be positive");
    if (!(upper > lower))
        throw ValidationError("lambda interval: upper bound must exceed lower bound");
}

double LambdaInterval::project(double lambda) const {
    if (lambda < lower) return lower;
    if (lambda > upper) return upper;
    return lambda;
}

double empirical_loss(const ForwardProblem& problem,
                      const Eigen::MatrixXd* prior_precision,
                      const TrainingSet& data, double lambda) {
    data.validate();
    TikhonovSpec spec;
    spec.problem = &problem;
    spec.prior_precision = prior_precision;
    spec.lambda = lambda;
    spec.validate();

    const int n = data.size();
    double total = 0.0;
    Eigen::VectorXd warm;
    for (int j = 0; j < n; ++j) {
        try {
            const Eigen::VectorXd* ws = warm.size() > 0 ? &warm : nullptr;
            LowerSolveReport report = lower_solve(spec, data.observations.col(j), ws);
            warm = report.minimizer;
            total += (report.minimizer - data.targets.col(j)).squaredNorm();
        } catch (const NumericalError& e) {
            throw NumericalError("empirical loss: lower solve failed for pair " +
                                 std::to_string(j) + ": " + e.what());
        }
    }
    return total / n;
}

namespace {

struct GoldenResult {
    double x;
    double fx;
    int evaluations;
};

// Golden-section search on [a, b], refined to width `width`.
GoldenResult golden_section(const std::function<double(double)>& f, double a,
                            double b, double width) {
    const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
    double x1 = b - invphi * (b - a);
    double x2 = a + invphi * (b - a);
    double f1 = f(x1);
    double f2 = f(x2);
    int evals = 2;
    while (b - a > width) {
        if (f1 <= f2) {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - invphi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + invphi * (b - a);
            f2 = f(x2);
        }
        ++evals;
    }
    const double x = 0.5 * (a + b);
    return {x, f(x), evals + 1};
}

}  // namespace

OfflineResult offline_minimize(const std::function<double(double)>& loss,
                               const LambdaInterval& interval) {
    interval.validate();

    // Bracket on a log-spaced grid first; the loss may be multimodal.
    constexpr int kGrid = 64;
    const double log_lo = std::log(interval.lower);
    const double log_hi = std::log(interval.upper);
    int best = 0;
    double best_f = 0.0;
    std::array<double, kGrid> grid{};
    for (int i = 0; i < kGrid; ++i) {
        grid[i] = std::exp(log_lo + (log_hi - log_lo) * i / (kGrid - 1));
        const double fi = loss(grid[i]);
        if (!std::isfinite(fi))
            throw NumericalError("offline minimize: non-finite loss at lambda = " +
                                 std::to_string(grid[i]));
        if (i == 0 || fi < best_f) {
            best = i;
            best_f = fi;
        }
    }

    const double a = grid[best > 0 ? best - 1 : 0];
    const double b = grid[best < kGrid - 1 ? best + 1 : kGrid - 1];
    GoldenResult g = golden_section(loss, a, b, 1e-8);

    OfflineResult result;
    result.lambda_hat = g.x;
    result.loss = g.fx;
    result.evaluations = kGrid + g.evaluations;
    const double edge = 1e-7 * (interval.upper - interval.lower);
    result.at_boundary = (g.x - interval.lower <= edge) ||
                         (interval.upper - g.x <= edge);
    return result;
}

OfflineResult offline_minimize(const ForwardProblem& problem,
                               const Eigen::MatrixXd* prior_precision,
                               const TrainingSet& data,
                               const LambdaInterval& interval) {
    return offline_minimize(
        [&](double lambda) {
            return empirical_loss(problem, prior_precision, data, lambda);
        },
        interval);
}

LinearDesign::LinearDesign(const Eigen::MatrixXd& A, const Eigen::MatrixXd& C0,
                           double gamma) {
    if (!(gamma > 0.0))
        throw ValidationError("erm accelerator: gamma must be positive");
    if (A.cols() != C0.rows() || C0.rows() != C0.cols())
        throw ValidationError("erm accelerator: A and C0 dimensions are inconsistent");

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_c(C0);
    if (es_c.info() != Eigen::Success || es_c.eigenvalues().minCoeff() <= 0.0)
        throw NumericalError("erm accelerator: C0 is not positive definite");
    const Eigen::MatrixXd c0_sqrt = es_c.operatorSqrt();
    const Eigen::MatrixXd c0_inv_sqrt = es_c.operatorInverseSqrt();

    const Eigen::MatrixXd D = c0_sqrt * A.transpose() / gamma;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(D * D.transpose());
    if (es.info() != Eigen::Success)
        throw NumericalError("erm accelerator: eigendecomposition failed");
    spectrum_ = es.eigenvalues().cwiseMax(0.0);
    const Eigen::MatrixXd& V = es.eigenvectors();
    metric_ = V.transpose() * C0 * V;
    obs_map_ = V.transpose() * c0_sqrt * A.transpose() / (gamma * gamma);
    target_map_ = V.transpose() * c0_inv_sqrt;
}

LinearErmAccelerator::LinearErmAccelerator(const LinearDesign& design,
                                           const TrainingSet& data) {
    data.validate();
    if (data.targets.rows() != design.target_map_.cols() ||
        data.observations.rows() != design.obs_map_.cols())
        throw ValidationError("erm accelerator: dataset dimensions do not match "
                              "the design");
    spectrum_ = design.spectrum_;

    // In the eigenbasis, u_lambda(y_j) - u_j = C0^{1/2} V (q .* b_j - a_j)
    // with a_j = V^T C0^{-1/2} u_j and b_j = V^T D Gamma^{-1/2} y_j, so the
    // averaged loss is a quadratic form in q with fixed second moments.
    const int n = data.size();
    const Eigen::MatrixXd Bcols = design.obs_map_ * data.observations;
    const Eigen::MatrixXd Acols = design.target_map_ * data.targets;
    const Eigen::MatrixXd Bbb = Bcols * Bcols.transpose() / n;
    const Eigen::MatrixXd Bba = Bcols * Acols.transpose() / n;
    const Eigen::MatrixXd Baa = Acols * Acols.transpose() / n;

    quad_ = design.metric_.cwiseProduct(Bbb);
    cross_ = (Bba * design.metric_).diagonal();
    constant_ = (design.metric_ * Baa).trace();
}

LinearErmAccelerator::LinearErmAccelerator(const Eigen::MatrixXd& A,
                                           const Eigen::MatrixXd& C0,
                                           double gamma, const TrainingSet& data)
    : LinearErmAccelerator(LinearDesign(A, C0, gamma), data) {}

double LinearErmAccelerator::loss(double lambda) const {
    if (!(lambda >= 0.0))
        throw ValidationError("erm accelerator: lambda must be nonnegative");
    const Eigen::VectorXd q =
        (spectrum_.array() + lambda).inverse().matrix();
    return q.dot(quad_ * q) - 2.0 * q.dot(cross_) + constant_;
}

OfflineResult LinearErmAccelerator::minimize(const LambdaInterval& interval) const {
    return offline_minimize([this](double l) { return loss(l); }, interval);
}

}  // namespace bilevel
