#ifndef BILEVEL_SGD_HPP
#define BILEVEL_SGD_HPP

#include <Eigen/Dense>
#include <functional>
#include <utility>
#include <vector>

#include "bilevel/erm.hpp"
#include "bilevel/lower_solver.hpp"

namespace bilevel {

/// Upper-level L2 discrepancy and its gradient in the first argument.
inline double upper_loss(const Eigen::VectorXd& w, const Eigen::VectorXd& u) {
    return (w - u).squaredNorm();
}
inline Eigen::VectorXd upper_loss_gradient(const Eigen::VectorXd& w,
                                           const Eigen::VectorXd& u) {
    return 2.0 * (w - u);
}

enum class HDecay {
    Fixed,       // h_k = h0
    StepScaled,  // h_k = h0 * beta_k^{1/4}
};

enum class GradientKind {
    Exact,              // implicit-function derivative (linear/signal/GN)
    CentralDifference,  // central difference of u_lambda in lambda
};

struct SgdConfig {
    double beta0 = 1.0;       // step scale, beta_k = beta0 * k^{-exponent}
    double exponent = 1.0;    // Robbins-Monro range (1/2, 1]
    bool movement_cap = false;  // clamp |beta_k g_k| <= lambda0 / k
    double h0 = 0.01;         // finite-difference step for the approximate kind
    HDecay h_decay = HDecay::Fixed;
    LambdaInterval interval;
    int m = 50;               // tail-averaging window
    double lambda0 = 1.0;
    unsigned long long seed = 0;  // echoed into traces for bookkeeping

    void validate(int iterations) const;
};

struct SgdTrace {
    std::vector<double> iterates;   // lambda_0 .. lambda_n
    std::vector<double> gradients;  // g_1 .. g_n (NaN where skipped)
    std::vector<int> data_indices;  // stream position consumed per step
    double bar_lambda = 0.0;        // mean of the last m iterates
    int skipped = 0;                // NaN-gradient steps
};

/// Produces the training pair (y, u) for SGD step k (1-based). Fresh-sample
/// streams return a new draw each call.
using PairStream =
    std::function<std::pair<Eigen::VectorXd, Eigen::VectorXd>(int k)>;

/// 2 (u_lambda(y) - u)^T d/dlambda u_lambda(y) with the exact derivative.
/// `minimizer_out`, when given, receives u_lambda(y) for warm-start chaining.
double sgd_gradient_exact(const TikhonovSpec& spec, const Eigen::VectorXd& y,
                          const Eigen::VectorXd& u,
                          const Eigen::VectorXd* warm_start = nullptr,
                          Eigen::VectorXd* minimizer_out = nullptr);

struct ApproxGradient {
    double value = 0.0;
    double h_used = 0.0;
    bool trusted = true;  // false if h had to shrink and still failed
};

/// 2 (u_lambda(y) - u)^T (u_{lambda+h}(y) - u_{lambda-h}(y)) / (2h).
/// If lambda - h <= 0 the step is halved once before flagging.
ApproxGradient sgd_gradient_approx(const TikhonovSpec& spec,
                                   const Eigen::VectorXd& y,
                                   const Eigen::VectorXd& u, double h,
                                   const Eigen::VectorXd* warm_start = nullptr,
                                   Eigen::VectorXd* minimizer_out = nullptr);

/// Loss-space central difference (f(lambda+h, z) - f(lambda-h, z)) / (2h).
double sgd_gradient_loss_diff(const TikhonovSpec& spec, const Eigen::VectorXd& y,
                              const Eigen::VectorXd& u, double h);

/// Projected bilevel SGD: lambda_{k+1} = chi(lambda_k - beta_k g_k). NaN
/// gradients skip the step and are counted; more than 5% skips aborts.
SgdTrace run_bsgd(const ForwardProblem& problem,
                  const Eigen::MatrixXd* prior_precision, PairStream stream,
                  const SgdConfig& config, int iterations, GradientKind kind);

/// C_n = min_{k<=n} max{ prod_{j=k+1..n} (1 - c beta_j), a beta_k / c } for
/// beta_k = beta0 k^{-exponent}; returned for n = 1..count.
std::vector<double> c_n_sequence(double a, double c, double beta0,
                                 double exponent, int count);

}  // namespace bilevel

#endif
