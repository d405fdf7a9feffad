#include "bilevel/lower_solver.hpp"

#include <cmath>
#include <string>

#include "bilevel/errors.hpp"

namespace bilevel {

namespace {

constexpr double kJacobianStep = 1e-6;
constexpr int kMaxHalvings = 30;

/// SPD solve with eigensolve fallback; throws with a conditioning estimate.
Eigen::VectorXd spd_solve(const Eigen::MatrixXd& M, const Eigen::VectorXd& rhs,
                          double lambda) {
    Eigen::LLT<Eigen::MatrixXd> llt(M);
    if (llt.info() == Eigen::Success) {
        Eigen::VectorXd x = llt.solve(rhs);
        double rel = (M * x - rhs).norm() / std::max(rhs.norm(), 1e-300);
        if (rel <= 1e-10) return x;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(M);
    if (eig.info() != Eigen::Success)
        throw NumericalError("spd_solve: eigensolve fallback failed at lambda=" +
                             std::to_string(lambda));
    double emin = eig.eigenvalues().minCoeff();
    double emax = eig.eigenvalues().maxCoeff();
    if (emax <= 0.0 || emin <= -1e-12 * emax)
        throw NumericalError("spd_solve: system not SPD at lambda=" +
                             std::to_string(lambda) + " (min eigenvalue " +
                             std::to_string(emin) + ", cond est " +
                             std::to_string(emax / std::abs(emin)) + ")");
    // Eigenvalues that are nonpositive only at roundoff level relative to
    // the largest one get floored so ill-conditioned systems stay solvable.
    Eigen::VectorXd evals = eig.eigenvalues().cwiseMax(1e-14 * emax);
    return eig.eigenvectors() *
           (eig.eigenvectors().transpose() * rhs).cwiseQuotient(evals);
}

Eigen::MatrixXd signal_penalty(const ForwardProblem& problem) {
    const Eigen::MatrixXd& L = problem.signal().L;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(L);
    if (eig.info() != Eigen::Success || eig.eigenvalues().minCoeff() <= 0.0)
        throw NumericalError("solve_signal: regularization matrix L is singular "
                             "or not SPD");
    return eig.eigenvectors() *
           eig.eigenvalues().cwiseInverse().asDiagonal() *
           eig.eigenvectors().transpose();
}

Eigen::MatrixXd forward_jacobian(const ForwardProblem& problem,
                                 const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& base) {
    Eigen::MatrixXd J(base.size(), x.size());
    Eigen::VectorXd xp = x;
    for (int j = 0; j < x.size(); ++j) {
        xp[j] += kJacobianStep;
        J.col(j) = (problem.predict(xp) - base) / kJacobianStep;
        xp[j] = x[j];
    }
    return J;
}

}  // namespace

void TikhonovSpec::validate() const {
    if (!problem) throw ValidationError("TikhonovSpec: problem not set");
    if (lambda <= 0.0 && !problem->is_signal())
        throw ValidationError("TikhonovSpec: lambda must be positive");
}

Eigen::MatrixXd TikhonovSpec::precision_or_identity() const {
    if (prior_precision) return *prior_precision;
    return Eigen::MatrixXd::Identity(problem->input_dim(), problem->input_dim());
}

Eigen::VectorXd solve_linear(const TikhonovSpec& spec, const Eigen::VectorXd& y) {
    spec.validate();
    const ForwardProblem& fp = *spec.problem;
    if (!fp.is_linear())
        throw ValidationError("solve_linear: linear forward problem required");
    double g2 = fp.gamma() * fp.gamma();
    if (g2 <= 0.0)
        throw ValidationError("solve_linear: gamma must be positive");
    Eigen::MatrixXd M = fp.normal_matrix() + spec.lambda * spec.precision_or_identity();
    return spd_solve(M, fp.linear().A.transpose() * y / g2, spec.lambda);
}

Eigen::VectorXd solve_signal(const TikhonovSpec& spec, const Eigen::VectorXd& y) {
    if (!spec.problem || !spec.problem->is_signal())
        throw ValidationError("solve_signal: signal forward problem required");
    if (spec.lambda < 0.0)
        throw ValidationError("solve_signal: lambda must be nonnegative");
    if (spec.lambda == 0.0) return y;
    double g2 = spec.problem->gamma() * spec.problem->gamma();
    if (g2 <= 0.0)
        throw ValidationError("solve_signal: gamma must be positive");
    Eigen::MatrixXd Linv = signal_penalty(*spec.problem);
    int d = static_cast<int>(Linv.rows());
    Eigen::MatrixXd M = Eigen::MatrixXd::Identity(d, d) / g2 + spec.lambda * Linv;
    return spd_solve(M, y / g2, spec.lambda);
}

LowerSolveReport solve_nonlinear(const TikhonovSpec& spec, const Eigen::VectorXd& y,
                                 const Eigen::VectorXd& init, int max_iters,
                                 double tol) {
    spec.validate();
    const ForwardProblem& fp = *spec.problem;
    // Linear kinds are admitted for verification (GN is exact for linear
    // residuals); the identity prior weight is used either way.
    if (fp.is_signal())
        throw ValidationError("solve_nonlinear: signal problems solve in closed form");
    if (tol <= 0.0) throw ValidationError("solve_nonlinear: tol must be positive");
    double g2 = fp.gamma() * fp.gamma();
    if (g2 <= 0.0)
        throw ValidationError("solve_nonlinear: gamma must be positive");
    double lambda = spec.lambda;

    Eigen::VectorXd x = init;
    Eigen::VectorXd pred = fp.predict(x);
    if (!pred.allFinite())
        throw NumericalError("solve_nonlinear: non-finite forward value at start");
    auto objective = [&](const Eigen::VectorXd& p, const Eigen::VectorXd& xi) {
        return 0.5 * (p - y).squaredNorm() / g2 + 0.5 * lambda * xi.squaredNorm();
    };
    double obj = objective(pred, x);

    LowerSolveReport report;
    report.converged = false;
    int iter = 0;
    for (; iter < max_iters; ++iter) {
        Eigen::MatrixXd J = forward_jacobian(fp, x, pred);
        Eigen::VectorXd grad = J.transpose() * (pred - y) / g2 + lambda * x;
        report.gradient_norm = grad.norm();
        if (report.gradient_norm <= tol) {
            report.converged = true;
            break;
        }
        Eigen::MatrixXd H = J.transpose() * J / g2 +
                            lambda * Eigen::MatrixXd::Identity(x.size(), x.size());
        Eigen::VectorXd step = spd_solve(H, -grad, lambda);

        double alpha = 1.0;
        bool improved = false;
        for (int halving = 0; halving < kMaxHalvings; ++halving) {
            Eigen::VectorXd cand = x + alpha * step;
            Eigen::VectorXd cand_pred = fp.predict(cand);
            if (!cand_pred.allFinite()) {
                // An over-long trial step can push the forward map out of
                // its stable range; treat it as non-improving and backtrack.
                alpha *= 0.5;
                continue;
            }
            double cand_obj = objective(cand_pred, cand);
            if (cand_obj < obj) {
                x = cand;
                pred = cand_pred;
                obj = cand_obj;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!improved) break;  // line-search failure: non-converged report
    }
    report.minimizer = x;
    report.iterations = iter;
    report.objective = obj;
    if (!report.converged) {
        Eigen::MatrixXd J = forward_jacobian(fp, x, pred);
        report.gradient_norm = (J.transpose() * (pred - y) / g2 + lambda * x).norm();
        report.converged = report.gradient_norm <= tol;
    }
    return report;
}

LowerSolveReport lower_solve(const TikhonovSpec& spec, const Eigen::VectorXd& y,
                             const Eigen::VectorXd* warm_start) {
    const ForwardProblem& fp = *spec.problem;
    if (fp.is_linear() || fp.is_signal()) {
        LowerSolveReport report;
        report.minimizer = fp.is_linear() ? solve_linear(spec, y)
                                          : solve_signal(spec, y);
        return report;
    }
    Eigen::VectorXd init = warm_start
                               ? *warm_start
                               : Eigen::VectorXd::Zero(fp.input_dim()).eval();
    return solve_nonlinear(spec, y, init, 50, 1e-6);
}

Eigen::VectorXd dlambda_u_exact(const TikhonovSpec& spec, const Eigen::VectorXd& y,
                                const Eigen::VectorXd* warm_start) {
    spec.validate();
    const ForwardProblem& fp = *spec.problem;
    double g2 = fp.gamma() * fp.gamma();
    if (fp.is_linear()) {
        Eigen::VectorXd u = solve_linear(spec, y);
        Eigen::MatrixXd W = spec.precision_or_identity();
        Eigen::MatrixXd M = fp.normal_matrix() + spec.lambda * W;
        return -spd_solve(M, W * u, spec.lambda);
    }
    if (fp.is_signal()) {
        Eigen::VectorXd u = solve_signal(spec, y);
        Eigen::MatrixXd Linv = signal_penalty(fp);
        int d = static_cast<int>(Linv.rows());
        Eigen::MatrixXd M = Eigen::MatrixXd::Identity(d, d) / g2 +
                            spec.lambda * Linv;
        return -spd_solve(M, Linv * u, spec.lambda);
    }
    LowerSolveReport report = lower_solve(spec, y, warm_start);
    Eigen::VectorXd pred = fp.predict(report.minimizer);
    Eigen::MatrixXd J = forward_jacobian(fp, report.minimizer, pred);
    Eigen::MatrixXd H =
        J.transpose() * J / g2 +
        spec.lambda * Eigen::MatrixXd::Identity(report.minimizer.size(),
                                                report.minimizer.size());
    return -spd_solve(H, report.minimizer, spec.lambda);
}

CentralDiffResult dlambda_u_central(const TikhonovSpec& spec,
                                    const Eigen::VectorXd& y, double h,
                                    const Eigen::VectorXd* warm_start) {
    spec.validate();
    if (h <= 0.0 || spec.lambda - h <= 0.0)
        throw ValidationError("dlambda_u_central: need 0 < h < lambda");
    CentralDiffResult result;
    const ForwardProblem& fp = *spec.problem;
    if (fp.is_nonlinear()) {
        LowerSolveReport base = lower_solve(spec, y, warm_start);
        TikhonovSpec plus = spec, minus = spec;
        plus.lambda += h;
        minus.lambda -= h;
        LowerSolveReport up = lower_solve(plus, y, &base.minimizer);
        LowerSolveReport down = lower_solve(minus, y, &base.minimizer);
        result.trusted = up.converged && down.converged;
        result.derivative = (up.minimizer - down.minimizer) / (2.0 * h);
        return result;
    }
    TikhonovSpec plus = spec, minus = spec;
    plus.lambda += h;
    minus.lambda -= h;
    result.derivative =
        (lower_solve(plus, y).minimizer - lower_solve(minus, y).minimizer) /
        (2.0 * h);
    return result;
}

// --- SignalSpectral --------------------------------------------------------

SignalSpectral::SignalSpectral(const Eigen::MatrixXd& L, double gamma) {
    if (gamma <= 0.0) throw ValidationError("SignalSpectral: gamma must be positive");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(L);
    if (eig.info() != Eigen::Success || eig.eigenvalues().minCoeff() <= 0.0)
        throw NumericalError("SignalSpectral: L is singular or not SPD");
    basis_ = eig.eigenvectors();
    modes_ = eig.eigenvalues();
    gamma2_ = gamma * gamma;
}

Eigen::VectorXd SignalSpectral::project(const Eigen::VectorXd& v) const {
    return basis_.transpose() * v;
}

Eigen::VectorXd SignalSpectral::lift(const Eigen::VectorXd& coeffs) const {
    return basis_ * coeffs;
}

Eigen::VectorXd SignalSpectral::solve_coeffs(const Eigen::VectorXd& y_coeffs,
                                             double lambda) const {
    // (1/g2 + lambda/m_i)^{-1} * y_i / g2 = y_i / (1 + lambda*g2/m_i)
    return y_coeffs.array() / (1.0 + lambda * gamma2_ / modes_.array());
}

Eigen::VectorXd SignalSpectral::dlambda_coeffs(const Eigen::VectorXd& y_coeffs,
                                               double lambda) const {
    Eigen::ArrayXd r = gamma2_ / modes_.array();
    return -(y_coeffs.array() * r / ((1.0 + lambda * r) * (1.0 + lambda * r)));
}

double SignalSpectral::loss(const Eigen::VectorXd& y_coeffs,
                            const Eigen::VectorXd& u_coeffs, double lambda) const {
    return (solve_coeffs(y_coeffs, lambda) - u_coeffs).squaredNorm();
}

}  // namespace bilevel
