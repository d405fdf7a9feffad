#ifndef BILEVEL_LOWER_SOLVER_HPP
#define BILEVEL_LOWER_SOLVER_HPP

#include <Eigen/Dense>
#include <optional>

#include "bilevel/forward.hpp"

namespace bilevel {

/// Lower-level Tikhonov problem
///   min_u 1/2 ||G(u) - y||^2_Gamma + lambda/2 u^T W u,
/// with W the prior precision (C0^{-1} for field-space problems, identity for
/// KL-coefficient problems when `prior_precision` is null). The signal kind
/// uses the penalty weight L^{-1} from the problem itself.
struct TikhonovSpec {
    const ForwardProblem* problem = nullptr;
    const Eigen::MatrixXd* prior_precision = nullptr;  // null = identity
    double lambda = 1.0;

    void validate() const;
    Eigen::MatrixXd precision_or_identity() const;
};

struct LowerSolveReport {
    Eigen::VectorXd minimizer;
    int iterations = 0;
    double gradient_norm = 0.0;
    double objective = 0.0;
    bool converged = true;
};

/// Closed form u_lambda(y) = (A^T Gamma^{-1} A + lambda W)^{-1} A^T Gamma^{-1} y.
/// SPD factorization with a symmetric-eigensolve fallback; errors carry lambda
/// and a conditioning estimate.
Eigen::VectorXd solve_linear(const TikhonovSpec& spec, const Eigen::VectorXd& y);

/// Signal closed form u_lambda(y) = (Gamma^{-1} + lambda L^{-1})^{-1} Gamma^{-1} y.
Eigen::VectorXd solve_signal(const TikhonovSpec& spec, const Eigen::VectorXd& y);

/// Damped Gauss-Newton for the nonlinear kinds, Jacobian by forward
/// differences, backtracking line search. Line-search failure yields a
/// non-converged report; NaN forward values are hard errors.
LowerSolveReport solve_nonlinear(const TikhonovSpec& spec, const Eigen::VectorXd& y,
                                 const Eigen::VectorXd& init, int max_iters = 50,
                                 double tol = 1e-8);

/// Kind-dispatching lower solve; `warm_start` seeds the nonlinear solver.
LowerSolveReport lower_solve(const TikhonovSpec& spec, const Eigen::VectorXd& y,
                             const Eigen::VectorXd* warm_start = nullptr);

/// d/dlambda of u_lambda(y) from the implicit-function formula
/// -(hess_u Psi)^{-1} d2_{lambda u} Psi at the minimizer. Nonlinear kinds use
/// the Gauss-Newton Hessian J^T Gamma^{-1} J + lambda I.
Eigen::VectorXd dlambda_u_exact(const TikhonovSpec& spec, const Eigen::VectorXd& y,
                                const Eigen::VectorXd* warm_start = nullptr);

struct CentralDiffResult {
    Eigen::VectorXd derivative;
    bool trusted = true;  // false when a perturbed solve did not converge
};

/// (u_{lambda+h}(y) - u_{lambda-h}(y)) / (2h); the converged iterate of the
/// base solve warm-starts both perturbed nonlinear solves.
CentralDiffResult dlambda_u_central(const TikhonovSpec& spec,
                                    const Eigen::VectorXd& y, double h,
                                    const Eigen::VectorXd* warm_start = nullptr);

/// Diagonalized signal solver: one eigendecomposition of L, then every solve,
/// derivative, and loss evaluation is O(d) in the eigenbasis. Agrees with
/// solve_signal to round-off.
class SignalSpectral {
public:
    SignalSpectral(const Eigen::MatrixXd& L, double gamma);

    int dim() const { return static_cast<int>(modes_.size()); }

    /// Coefficients of v in the eigenbasis of L.
    Eigen::VectorXd project(const Eigen::VectorXd& v) const;
    Eigen::VectorXd lift(const Eigen::VectorXd& coeffs) const;

    /// u_lambda coefficients from observation coefficients.
    Eigen::VectorXd solve_coeffs(const Eigen::VectorXd& y_coeffs, double lambda) const;
    Eigen::VectorXd dlambda_coeffs(const Eigen::VectorXd& y_coeffs, double lambda) const;

    /// ||u_lambda(y) - u||^2 in coefficient space (the basis is orthonormal).
    double loss(const Eigen::VectorXd& y_coeffs, const Eigen::VectorXd& u_coeffs,
                double lambda) const;

private:
    Eigen::MatrixXd basis_;   // eigenvectors of L
    Eigen::VectorXd modes_;   // eigenvalues of L, all > 0
    double gamma2_ = 1.0;
};

}  // namespace bilevel

#endif
