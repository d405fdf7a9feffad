#ifndef BILEVEL_ERM_HPP
#define BILEVEL_ERM_HPP

#include <Eigen/Dense>
#include <functional>

#include "bilevel/lower_solver.hpp"

namespace bilevel {

/// Training pairs stored column-wise: observations y^(j) and targets u^(j)
/// (field dofs, KL coefficients, or signal values depending on the problem).
struct TrainingSet {
    Eigen::MatrixXd observations;  // K x n
    Eigen::MatrixXd targets;       // d x n

    int size() const { return static_cast<int>(observations.cols()); }
    void validate() const;
};

struct LambdaInterval {
    double lower = 1e-4;
    double upper = 10.0;

    void validate() const;
    double project(double lambda) const;
    bool contains(double lambda) const {
        return lambda >= lower && lambda <= upper;
    }
};

/// (1/n) sum_j ||u_lambda(y_j) - u_j||^2 via per-pair lower solves. A hard
/// solver failure is rethrown with the offending pair index.
double empirical_loss(const ForwardProblem& problem,
                      const Eigen::MatrixXd* prior_precision,
                      const TrainingSet& data, double lambda);

struct OfflineResult {
    double lambda_hat = 0.0;
    double loss = 0.0;
    bool at_boundary = false;  // minimizer pinned to an interval endpoint
    int evaluations = 0;
};

/// Minimizes a scalar loss over [lambda_l, lambda_u]: bracket on a 64-point
/// log-spaced grid, then golden-section refinement to width 1e-8. The loss may
/// be multimodal; the grid stage picks the best bracket.
OfflineResult offline_minimize(const std::function<double(double)>& loss,
                               const LambdaInterval& interval);

/// Convenience wrapper for the solve-based empirical loss.
OfflineResult offline_minimize(const ForwardProblem& problem,
                               const Eigen::MatrixXd* prior_precision,
                               const TrainingSet& data,
                               const LambdaInterval& interval);

/// Eigenbasis of D D^T (D = C0^{1/2} A^T Gamma^{-1/2}) with the transforms
/// needed to fold datasets into that basis. Built once per (A, C0, gamma)
/// and shared across Monte Carlo repetitions.
class LinearDesign {
public:
    LinearDesign(const Eigen::MatrixXd& A, const Eigen::MatrixXd& C0,
                 double gamma);

    int dim() const { return static_cast<int>(spectrum_.size()); }
    const Eigen::VectorXd& spectrum() const { return spectrum_; }

private:
    friend class LinearErmAccelerator;
    Eigen::VectorXd spectrum_;  // eigenvalues of D D^T
    Eigen::MatrixXd metric_;    // G = V^T C0 V
    Eigen::MatrixXd obs_map_;   // V^T C0^{1/2} A^T / gamma^2, applied to y
    Eigen::MatrixXd target_map_;  // V^T C0^{-1/2}, applied to u
};

/// Empirical loss for the linear-Gaussian kind with the dataset folded into
/// moment matrices in the D D^T eigenbasis: one O(d^3) setup, then each
/// F_n(lambda) evaluation is O(d^2) independent of n. Matches the per-pair
/// empirical_loss to round-off.
class LinearErmAccelerator {
public:
    LinearErmAccelerator(const LinearDesign& design, const TrainingSet& data);
    LinearErmAccelerator(const Eigen::MatrixXd& A, const Eigen::MatrixXd& C0,
                         double gamma, const TrainingSet& data);

    double loss(double lambda) const;
    OfflineResult minimize(const LambdaInterval& interval) const;

private:
    Eigen::VectorXd spectrum_;   // eigenvalues of D D^T
    Eigen::MatrixXd quad_;       // (V^T C0 V) .* B_bb
    Eigen::VectorXd cross_;      // diag(B_ba V^T C0 V)
    double constant_ = 0.0;      // tr(V^T C0 V B_aa)
};

}  // namespace bilevel

#endif
