#ifndef BILEVEL_STUDIES_HPP
#define BILEVEL_STUDIES_HPP

#include <Eigen/Dense>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bilevel/covariance.hpp"
#include "bilevel/erm.hpp"
#include "bilevel/forward.hpp"
#include "bilevel/kl.hpp"
#include "bilevel/preset.hpp"
#include "bilevel/sgd.hpp"

namespace bilevel {

enum class PresetCategory { Linear, Nonlinear, Signal };
PresetCategory preset_category(const ExperimentPreset& p);

/// Resolved linear-Gaussian instance: training samples are
/// u = sample_basis * xi / sqrt(lambda*), y = A u + gamma * eta.
struct LinearInstance {
    Eigen::MatrixXd A;
    Eigen::MatrixXd C0;
    Eigen::MatrixXd sample_basis;
    double gamma = 1.0;
    double lambda_star = 1.0;
    CoefficientLaw law = CoefficientLaw::Gaussian;
    double prior_trace = 0.0;  // sum of the sampled KL eigenvalues
};

LinearInstance make_linear_instance(const ExperimentPreset& p);
/// Per-mesh instance for the dimension study; the same physical observation
/// points are shared across meshes.
LinearInstance make_laplace1d_instance(const ExperimentPreset& p, int mesh_nodes,
                                       const std::vector<Eigen::Vector2d>& points);

TrainingSet sample_linear_dataset(const LinearInstance& inst, int n,
                                  RngStream& rng);

/// Nonlinear (Darcy/eikonal) instance; training targets are KL coefficients.
struct NonlinearInstance {
    ForwardProblem problem;
    double lambda_star = 1.0;
};

NonlinearInstance make_nonlinear_instance(const ExperimentPreset& p);
std::pair<Eigen::VectorXd, Eigen::VectorXd> sample_nonlinear_pair(
    const NonlinearInstance& inst, RngStream& rng);  // (y, theta)

/// Preset-dispatched dataset generation, deterministic under the stream.
TrainingSet generate_dataset(const ExperimentPreset& p, int n, RngStream& rng);

struct SlopeFit {
    double slope = 0.0;
    double intercept = 0.0;
    double half_width = 0.0;  // 95% confidence half-width of the slope
};

/// Ordinary least squares on (log x, log y).
SlopeFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y);

struct StudyResult {
    std::string study;
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
    double slope = std::numeric_limits<double>::quiet_NaN();
    double slope_half_width = std::numeric_limits<double>::quiet_NaN();
    nlohmann::json extra;  // study-specific scalars (flags, ratios, ...)
    nlohmann::json preset_echo;
    std::string preset_hash;
    unsigned long long master_seed = 0;
    double runtime_seconds = 0.0;
};

/// MSE of the offline estimator vs n with a log-log rate fit.
StudyResult consistency_study(const ExperimentPreset& p);

/// MSE of the offline estimator across mesh refinements at fixed n.
StudyResult dimension_study(const ExperimentPreset& p);

/// Distribution of |bar_lambda - lambda*|^2 over seeds for projected SGD.
StudyResult online_study(const ExperimentPreset& p, GradientKind kind,
                         std::vector<SgdTrace>* traces = nullptr);

/// Table-1-style comparison of fixed, learned, and grid-optimal lambda.
StudyResult denoise_study(const ExperimentPreset& p);

/// Second-difference regularization matrix L = Delta^{-1} for the signal
/// model on a grid of `dim` points with spacing horizon/dim.
Eigen::MatrixXd signal_regularization(int dim, double horizon);

std::string preset_hash(const ExperimentPreset& p);
void write_csv(const std::string& path, const StudyResult& r);
void write_manifest(const std::string& path, const ExperimentPreset& p,
                    const StudyResult* result,
                    const std::vector<std::string>& outputs, bool success,
                    const std::string& error = "");

}  // namespace bilevel

#endif
