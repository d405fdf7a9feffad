#include "bilevel/studies.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <memory>
#include <numeric>

#include "bilevel/errors.hpp"

namespace bilevel {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

CoefficientLaw law_from_string(const std::string& law) {
    if (law == "gaussian") return CoefficientLaw::Gaussian;
    if (law == "uniform") return CoefficientLaw::Uniform;
    if (law == "rademacher") return CoefficientLaw::Rademacher;
    throw ValidationError("unknown coefficient law '" + law + "'");
}

Boundary boundary_from_string(const std::string& b) {
    return b == "neumann" ? Boundary::Neumann : Boundary::Dirichlet;
}

struct MeanStderr {
    double mean;
    double stderr_;  // NaN for a single sample
};

MeanStderr mean_stderr(const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    if (v.size() < 2)
        return {mean, std::numeric_limits<double>::quiet_NaN()};
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / (n - 1.0) / n)};
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// 97.5% Student-t quantiles for small degrees of freedom; 1.96 beyond.
double t_quantile_975(int df) {
    static const double table[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447,
                                   2.365,  2.306, 2.262, 2.228, 2.201, 2.179,
                                   2.160,  2.145, 2.131, 2.120, 2.110, 2.101,
                                   2.093,  2.086, 2.080, 2.074, 2.069, 2.064,
                                   2.060,  2.056, 2.052, 2.048, 2.045, 2.042};
    if (df < 1) return std::numeric_limits<double>::quiet_NaN();
    if (df <= 30) return table[df - 1];
    return 1.96;
}

// Distinct stream salts per consumer so studies never share random numbers.
constexpr std::uint64_t kSaltConsistency = 0xC0;
constexpr std::uint64_t kSaltDimension = 0xD1;
constexpr std::uint64_t kSaltOnline = 0x0E;
constexpr std::uint64_t kSaltDenoise = 0xDE;
constexpr std::uint64_t kSaltInstance = 0x1A;

}  // namespace

PresetCategory preset_category(const ExperimentPreset& p) {
    if (p.name == "linear-scalar" || p.name == "linear-matrix" ||
        p.name == "laplace2d" || p.name == "laplace1d-dim")
        return PresetCategory::Linear;
    if (p.name == "darcy2d" || p.name == "eikonal2d")
        return PresetCategory::Nonlinear;
    if (p.name == "signal-denoise") return PresetCategory::Signal;
    throw ValidationError("preset '" + p.name + "' has no study category");
}

LinearInstance make_linear_instance(const ExperimentPreset& p) {
    LinearInstance inst;
    inst.gamma = p.gamma;
    inst.lambda_star = p.lambda_star;
    inst.law = law_from_string(p.law);

    if (p.name == "linear-scalar") {
        inst.A = Eigen::MatrixXd::Identity(1, 1);
        inst.C0 = Eigen::MatrixXd::Identity(1, 1);
        inst.sample_basis = Eigen::MatrixXd::Identity(1, 1);
        inst.prior_trace = 1.0;
        return inst;
    }
    if (p.name == "linear-matrix") {
        const int d = p.linear_dimension;
        RngStream rng = RngStream::split(p.master_seed, kSaltInstance);
        inst.A.resize(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                inst.A(i, j) = rng.normal() / std::sqrt(static_cast<double>(d));
        Eigen::VectorXd sigma(d);
        for (int i = 0; i < d; ++i) sigma[i] = 1.0 / ((i + 1.0) * (i + 1.0));
        inst.C0 = sigma.asDiagonal();
        inst.sample_basis = sigma.cwiseSqrt().asDiagonal();
        inst.prior_trace = sigma.sum();
        return inst;
    }
    if (p.name == "laplace2d" || p.name == "laplace1d-dim") {
        Mesh mesh{p.mesh_dimension, p.mesh_nodes, boundary_from_string(p.boundary)};
        CovarianceModel cov = build_covariance(mesh, p.beta, p.tau, p.alpha);
        RngStream obs_rng = RngStream::split(p.observation_seed, 0);
        ObservationOperator obs =
            ObservationOperator::random(mesh, p.observation_count, obs_rng);
        inst.A = build_linear_A(mesh, obs);
        inst.C0 = cov.matrix();
        const int t = std::min(p.truncation, cov.dim());
        inst.sample_basis =
            cov.eigenvectors().leftCols(t) *
            cov.eigenvalues().head(t).cwiseSqrt().asDiagonal();
        inst.prior_trace = cov.eigenvalues().head(t).sum();
        return inst;
    }
    throw ValidationError("preset '" + p.name + "' is not a linear instance");
}

LinearInstance make_laplace1d_instance(const ExperimentPreset& p, int mesh_nodes,
                                       const std::vector<Eigen::Vector2d>& points) {
    Mesh mesh{1, mesh_nodes, Boundary::Dirichlet};
    CovarianceModel cov = build_covariance(mesh, p.beta, p.tau, p.alpha);
    ObservationOperator obs = ObservationOperator::from_points(mesh, points);

    LinearInstance inst;
    inst.gamma = p.gamma;
    inst.lambda_star = p.lambda_star;
    inst.law = law_from_string(p.law);
    inst.A = build_linear_A(mesh, obs);
    inst.C0 = cov.matrix();
    const int t = std::min(p.truncation, cov.dim());
    inst.sample_basis = cov.eigenvectors().leftCols(t) *
                        cov.eigenvalues().head(t).cwiseSqrt().asDiagonal();
    inst.prior_trace = cov.eigenvalues().head(t).sum();
    return inst;
}

TrainingSet sample_linear_dataset(const LinearInstance& inst, int n,
                                  RngStream& rng) {
    if (n < 0) throw ValidationError("sample_linear_dataset: n must be >= 0");
    const int d = static_cast<int>(inst.A.cols());
    const int k = static_cast<int>(inst.A.rows());
    const int r = static_cast<int>(inst.sample_basis.cols());
    const double scale = 1.0 / std::sqrt(inst.lambda_star);

    TrainingSet ds;
    ds.targets.resize(d, n);
    ds.observations.resize(k, n);
    Eigen::VectorXd xi(r);
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < r; ++i) xi[i] = draw_coefficient(inst.law, rng);
        ds.targets.col(j) = inst.sample_basis * xi * scale;
        ds.observations.col(j) = inst.A * ds.targets.col(j);
        for (int i = 0; i < k; ++i)
            ds.observations(i, j) += inst.gamma * rng.normal();
    }
    return ds;
}

NonlinearInstance make_nonlinear_instance(const ExperimentPreset& p) {
    if (p.name != "darcy2d" && p.name != "eikonal2d")
        throw ValidationError("preset '" + p.name + "' is not a nonlinear instance");

    // The prior field lives on the full grid (Neumann layout) so the KL basis
    // can be evaluated at every PDE node.
    Mesh prior_mesh{p.mesh_dimension, p.mesh_nodes, Boundary::Neumann};
    CovarianceModel cov = build_covariance(prior_mesh, p.beta, p.tau, p.alpha);
    // The Neumann Laplacian annihilates constants, so the leading KL mode's
    // variance is set by tau alone. For the eikonal prior (small tau) that
    // mode would dominate exp(u) by orders of magnitude, so it is excluded;
    // the Darcy prior's larger tau keeps it on the scale of the other modes.
    const int skip = p.name == "eikonal2d" ? 1 : 0;
    const int t = std::min(p.truncation, cov.dim() - skip);
    Eigen::MatrixXd basis = cov.eigenvectors().middleCols(skip, t) *
                            cov.eigenvalues().segment(skip, t).cwiseSqrt().asDiagonal();

    RngStream obs_rng = RngStream::split(p.observation_seed, 1);
    if (p.name == "darcy2d") {
        Mesh mesh{p.mesh_dimension, p.mesh_nodes, Boundary::Dirichlet};
        ObservationOperator obs =
            ObservationOperator::random(mesh, p.observation_count, obs_rng);
        return NonlinearInstance{
            ForwardProblem(DarcyModel{mesh, 1.0, std::move(basis)}, std::move(obs),
                           p.gamma),
            p.lambda_star};
    }
    Mesh grid{p.mesh_dimension, p.mesh_nodes, Boundary::Neumann};
    const int source = grid.nearest_dof(Eigen::Vector2d(0.5, 0.5));
    ObservationOperator obs =
        ObservationOperator::random(grid, p.observation_count, obs_rng);
    return NonlinearInstance{
        ForwardProblem(EikonalModel{grid, source, std::move(basis)},
                       std::move(obs), p.gamma),
        p.lambda_star};
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> sample_nonlinear_pair(
    const NonlinearInstance& inst, RngStream& rng) {
    const int d = inst.problem.input_dim();
    Eigen::VectorXd theta(d);
    for (int i = 0; i < d; ++i)
        theta[i] = rng.normal() / std::sqrt(inst.lambda_star);
    Eigen::VectorXd y = inst.problem.predict(theta);
    for (int i = 0; i < y.size(); ++i)
        y[i] += inst.problem.gamma() * rng.normal();
    return {std::move(y), std::move(theta)};
}

TrainingSet generate_dataset(const ExperimentPreset& p, int n, RngStream& rng) {
    if (n < 1) throw ValidationError("generate_dataset: n must be >= 1");
    switch (preset_category(p)) {
        case PresetCategory::Linear: {
            LinearInstance inst = make_linear_instance(p);
            return sample_linear_dataset(inst, n, rng);
        }
        case PresetCategory::Nonlinear: {
            NonlinearInstance inst = make_nonlinear_instance(p);
            TrainingSet ds;
            ds.targets.resize(inst.problem.input_dim(), n);
            ds.observations.resize(inst.problem.output_dim(), n);
            for (int j = 0; j < n; ++j) {
                try {
                    auto [y, theta] = sample_nonlinear_pair(inst, rng);
                    ds.observations.col(j) = y;
                    ds.targets.col(j) = theta;
                } catch (const NumericalError& e) {
                    throw NumericalError("generate_dataset: forward solve failed "
                                         "for pair " + std::to_string(j) + ": " +
                                         e.what());
                }
            }
            return ds;
        }
        case PresetCategory::Signal: {
            TrainingSet ds;
            ds.targets.resize(p.signal_grid, n);
            ds.observations.resize(p.signal_grid, n);
            for (int j = 0; j < n; ++j) {
                SignalPath path = signal_sample(p.signal_rate, p.signal_horizon,
                                                p.signal_grid, rng);
                ds.targets.col(j) = path.values;
                ds.observations.col(j) = path.values;
                for (int i = 0; i < p.signal_grid; ++i)
                    ds.observations(i, j) += p.signal_sigma * rng.normal();
            }
            return ds;
        }
    }
    throw ValidationError("generate_dataset: unreachable category");
}

SlopeFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw ValidationError("fit_loglog: need at least two points");
    const int n = static_cast<int>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int i = 0; i < n; ++i) {
        if (!(x[i] > 0.0) || !(y[i] > 0.0))
            throw ValidationError("fit_loglog: inputs must be positive");
        const double lx = std::log(x[i]);
        const double ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double det = n * sxx - sx * sx;
    if (det <= 0.0) throw ValidationError("fit_loglog: degenerate abscissae");
    SlopeFit fit;
    fit.slope = (n * sxy - sx * sy) / det;
    fit.intercept = (sy - fit.slope * sx) / n;
    if (n > 2) {
        double rss = 0.0;
        for (int i = 0; i < n; ++i) {
            const double r =
                std::log(y[i]) - fit.intercept - fit.slope * std::log(x[i]);
            rss += r * r;
        }
        const double se = std::sqrt(rss / (n - 2) / (sxx - sx * sx / n));
        fit.half_width = t_quantile_975(n - 2) * se;
    } else {
        fit.half_width = std::numeric_limits<double>::quiet_NaN();
    }
    return fit;
}

StudyResult consistency_study(const ExperimentPreset& p) {
    const auto t0 = Clock::now();
    if (preset_category(p) != PresetCategory::Linear)
        throw ValidationError("consistency study: linear preset required");
    if (p.n_list.size() < 2)
        throw ValidationError("consistency study: need at least two n values");

    const LinearInstance inst = make_linear_instance(p);
    const LinearDesign design(inst.A, inst.C0, inst.gamma);
    const LambdaInterval interval{p.lambda_lower, p.lambda_upper};

    StudyResult result;
    result.study = "consistency";
    result.columns = {"n", "mse", "stderr", "repetitions", "boundary_flags"};

    int boundary_total = 0;
    std::vector<double> ns, mses;
    for (size_t i_n = 0; i_n < p.n_list.size(); ++i_n) {
        const int n = p.n_list[i_n];
        std::vector<double> sq;
        sq.reserve(p.repetitions);
        int boundary = 0;
        for (int rep = 0; rep < p.repetitions; ++rep) {
            RngStream rng = RngStream::split(
                p.master_seed, kSaltConsistency + (i_n + 1) * 1000003ULL + rep);
            TrainingSet ds = sample_linear_dataset(inst, n, rng);
            LinearErmAccelerator acc(design, ds);
            OfflineResult r = acc.minimize(interval);
            if (r.at_boundary) ++boundary;
            const double e = r.lambda_hat - p.lambda_star;
            sq.push_back(e * e);
        }
        boundary_total += boundary;
        MeanStderr ms = mean_stderr(sq);
        result.rows.push_back({static_cast<double>(n), ms.mean, ms.stderr_,
                               static_cast<double>(p.repetitions),
                               static_cast<double>(boundary)});
        ns.push_back(n);
        mses.push_back(ms.mean);
    }

    const int total_runs = static_cast<int>(p.n_list.size()) * p.repetitions;
    if (boundary_total > 0.1 * total_runs)
        throw NumericalError("consistency study: " + std::to_string(boundary_total) +
                             " of " + std::to_string(total_runs) +
                             " minimizers pinned at the interval boundary (> 10%)");

    SlopeFit fit = fit_loglog(ns, mses);
    result.slope = fit.slope;
    result.slope_half_width = fit.half_width;
    result.extra["boundary_flags_total"] = boundary_total;
    result.preset_echo = preset_to_json(p);
    result.preset_hash = preset_hash(p);
    result.master_seed = p.master_seed;
    result.runtime_seconds = seconds_since(t0);
    return result;
}

StudyResult dimension_study(const ExperimentPreset& p) {
    const auto t0 = Clock::now();
    if (p.mesh_nodes_list.empty())
        throw ValidationError("dimension study: preset has no mesh list");
    if (p.n_list.empty())
        throw ValidationError("dimension study: preset has no n list");

    // The same physical observation points are observed on every mesh.
    RngStream point_rng = RngStream::split(p.observation_seed, 2);
    std::vector<Eigen::Vector2d> points;
    points.reserve(p.observation_count);
    for (int i = 0; i < p.observation_count; ++i)
        points.emplace_back(0.1 + 0.8 * point_rng.uniform(), 0.0);

    StudyResult result;
    result.study = "dimension";
    result.columns = {"mesh_nodes", "h",       "dofs",           "prior_trace",
                      "n",          "mse",     "stderr",         "repetitions",
                      "boundary_flags"};

    const LambdaInterval interval{p.lambda_lower, p.lambda_upper};
    // flatness[i_n] collects the per-mesh MSEs at n_list[i_n]
    std::vector<std::vector<double>> per_n(p.n_list.size());
    int boundary_total = 0, total_runs = 0;

    for (size_t i_m = 0; i_m < p.mesh_nodes_list.size(); ++i_m) {
        const int nodes = p.mesh_nodes_list[i_m];
        const LinearInstance inst = make_laplace1d_instance(p, nodes, points);
        const LinearDesign design(inst.A, inst.C0, inst.gamma);
        const Mesh mesh{1, nodes, Boundary::Dirichlet};
        for (size_t i_n = 0; i_n < p.n_list.size(); ++i_n) {
            const int n = p.n_list[i_n];
            std::vector<double> sq;
            sq.reserve(p.repetitions);
            int boundary = 0;
            for (int rep = 0; rep < p.repetitions; ++rep) {
                RngStream rng = RngStream::split(
                    p.master_seed,
                    kSaltDimension + ((i_m * 97 + i_n + 1) * 1000003ULL) + rep);
                TrainingSet ds = sample_linear_dataset(inst, n, rng);
                LinearErmAccelerator acc(design, ds);
                OfflineResult r = acc.minimize(interval);
                if (r.at_boundary) ++boundary;
                const double e = r.lambda_hat - p.lambda_star;
                sq.push_back(e * e);
            }
            boundary_total += boundary;
            total_runs += p.repetitions;
            MeanStderr ms = mean_stderr(sq);
            per_n[i_n].push_back(ms.mean);
            result.rows.push_back({static_cast<double>(nodes), mesh.spacing(),
                                   static_cast<double>(mesh.dofs()),
                                   inst.prior_trace, static_cast<double>(n),
                                   ms.mean, ms.stderr_,
                                   static_cast<double>(p.repetitions),
                                   static_cast<double>(boundary)});
        }
    }

    if (boundary_total > 0.1 * total_runs)
        throw NumericalError("dimension study: too many boundary-pinned "
                             "minimizers (> 10%)");

    nlohmann::json flatness = nlohmann::json::object();
    for (size_t i_n = 0; i_n < p.n_list.size(); ++i_n) {
        const auto [lo, hi] =
            std::minmax_element(per_n[i_n].begin(), per_n[i_n].end());
        flatness[std::to_string(p.n_list[i_n])] = *hi / *lo;
    }
    result.extra["flatness_ratio"] = flatness;
    result.extra["boundary_flags_total"] = boundary_total;
    result.preset_echo = preset_to_json(p);
    result.preset_hash = preset_hash(p);
    result.master_seed = p.master_seed;
    result.runtime_seconds = seconds_since(t0);
    return result;
}

StudyResult online_study(const ExperimentPreset& p, GradientKind kind,
                         std::vector<SgdTrace>* traces) {
    const auto t0 = Clock::now();
    const PresetCategory cat = preset_category(p);
    if (cat == PresetCategory::Signal)
        throw ValidationError("online study: use the denoise study for the "
                              "signal preset");

    SgdConfig config;
    config.beta0 = p.sgd_beta0;
    config.exponent = p.sgd_exponent;
    config.movement_cap = p.sgd_movement_cap;
    config.h0 = p.sgd_h0;
    config.h_decay =
        p.sgd_h_decay == "step-scaled" ? HDecay::StepScaled : HDecay::Fixed;
    config.interval = LambdaInterval{p.lambda_lower, p.lambda_upper};
    config.m = p.sgd_m;
    config.lambda0 = p.sgd_lambda0;

    StudyResult result;
    result.study = "online";
    result.columns = {"seed", "bar_lambda", "sq_error", "skipped"};
    std::vector<double> errors;

    auto run_seed = [&](const ForwardProblem& problem,
                        const Eigen::MatrixXd* precision, PairStream stream,
                        int s) {
        config.seed = p.master_seed + s;
        SgdTrace trace =
            run_bsgd(problem, precision, std::move(stream), config,
                     p.sgd_iterations, kind);
        const double err = (trace.bar_lambda - p.lambda_star) *
                           (trace.bar_lambda - p.lambda_star);
        errors.push_back(err);
        result.rows.push_back({static_cast<double>(s), trace.bar_lambda, err,
                               static_cast<double>(trace.skipped)});
        if (traces) traces->push_back(std::move(trace));
    };

    if (cat == PresetCategory::Linear) {
        const LinearInstance inst = make_linear_instance(p);
        ForwardProblem problem(
            LinearModel{inst.A},
            ObservationOperator::identity(static_cast<int>(inst.A.rows())),
            inst.gamma);
        const Eigen::MatrixXd precision = inst.C0.inverse();
        for (int s = 0; s < p.seeds; ++s) {
            auto rng = std::make_shared<RngStream>(
                RngStream::split(p.master_seed, kSaltOnline + s));
            run_seed(problem, &precision,
                     [&inst, rng](int) {
                         TrainingSet one = sample_linear_dataset(inst, 1, *rng);
                         return std::make_pair(Eigen::VectorXd(one.observations.col(0)),
                                               Eigen::VectorXd(one.targets.col(0)));
                     },
                     s);
        }
    } else {
        const NonlinearInstance inst = make_nonlinear_instance(p);
        for (int s = 0; s < p.seeds; ++s) {
            auto rng = std::make_shared<RngStream>(
                RngStream::split(p.master_seed, kSaltOnline + s));
            run_seed(inst.problem, nullptr,
                     [&inst, rng](int) { return sample_nonlinear_pair(inst, *rng); },
                     s);
        }
    }

    result.extra["median_sq_error"] = median(errors);
    result.preset_echo = preset_to_json(p);
    result.preset_hash = preset_hash(p);
    result.master_seed = p.master_seed;
    result.runtime_seconds = seconds_since(t0);
    return result;
}

Eigen::MatrixXd signal_regularization(int dim, double horizon) {
    if (dim < 2) throw ValidationError("signal_regularization: dim must be >= 2");
    if (!(horizon > 0.0))
        throw ValidationError("signal_regularization: horizon must be positive");
    const double h = horizon / dim;
    Eigen::MatrixXd delta = Eigen::MatrixXd::Zero(dim, dim);
    for (int i = 0; i < dim; ++i) {
        delta(i, i) = 2.0 / (h * h);
        if (i > 0) delta(i, i - 1) = -1.0 / (h * h);
        if (i + 1 < dim) delta(i, i + 1) = -1.0 / (h * h);
    }
    // L = Delta^{-1}: the second-order smoothing penalty is ||u||_{L^{-1}}^2.
    Eigen::LLT<Eigen::MatrixXd> llt(delta);
    if (llt.info() != Eigen::Success)
        throw NumericalError("signal_regularization: Delta factorization failed");
    return llt.solve(Eigen::MatrixXd::Identity(dim, dim));
}

StudyResult denoise_study(const ExperimentPreset& p) {
    const auto t0 = Clock::now();
    if (preset_category(p) != PresetCategory::Signal)
        throw ValidationError("denoise study: signal preset required");

    const int d = p.signal_grid;
    const Eigen::MatrixXd L = signal_regularization(d, p.signal_horizon);
    const SignalSpectral spectral(L, p.signal_sigma);
    const LambdaInterval interval{p.lambda_lower, p.lambda_upper};

    const double fixed_large = 1e-2, fixed_small = 1e-5;
    constexpr int kGrid = 200;

    StudyResult result;
    result.study = "denoise";
    result.columns = {"seed",       "bar_lambda", "mse_lambda_1e-2",
                      "mse_lambda_1e-5", "mse_learned", "lambda_grid",
                      "mse_grid"};

    int learned_beats_fixed = 0, within_ratio = 0;
    for (int s = 0; s < p.seeds; ++s) {
        RngStream rng = RngStream::split(p.master_seed, kSaltDenoise + s);

        // Training: projected SGD with the exact spectral derivative.
        double lambda = p.sgd_lambda0;
        std::vector<double> tail;
        tail.reserve(p.sgd_iterations);
        for (int k = 1; k <= p.sgd_iterations; ++k) {
            SignalPath path =
                signal_sample(p.signal_rate, p.signal_horizon, d, rng);
            Eigen::VectorXd y = path.values;
            for (int i = 0; i < d; ++i) y[i] += p.signal_sigma * rng.normal();
            const Eigen::VectorXd yc = spectral.project(y);
            const Eigen::VectorXd uc = spectral.project(path.values);
            // The discretized L2 loss carries the grid weight h = T/d, which
            // keeps the paper's step schedule on the right scale.
            const double g =
                2.0 * (p.signal_horizon / d) *
                (spectral.solve_coeffs(yc, lambda) - uc)
                    .dot(spectral.dlambda_coeffs(yc, lambda));
            const double beta_k = p.sgd_beta0 * std::pow(k, -p.sgd_exponent);
            double step = beta_k * g;
            if (p.sgd_movement_cap) {
                // The gradient magnitude blows up near the lower interval
                // bound; the capped variant keeps the iterates in the stable
                // region around the optimum.
                const double cap = p.sgd_lambda0 / k;
                step = std::clamp(step, -cap, cap);
            }
            lambda = interval.project(lambda - step);
            tail.push_back(lambda);
        }
        double bar_lambda = 0.0;
        for (int k = p.sgd_iterations - p.sgd_m; k < p.sgd_iterations; ++k)
            bar_lambda += tail[static_cast<size_t>(k)];
        bar_lambda /= p.sgd_m;

        // Fresh test instance.
        SignalPath truth = signal_sample(p.signal_rate, p.signal_horizon, d, rng);
        Eigen::VectorXd y_obs = truth.values;
        for (int i = 0; i < d; ++i) y_obs[i] += p.signal_sigma * rng.normal();
        const Eigen::VectorXd yc = spectral.project(y_obs);
        const Eigen::VectorXd uc = spectral.project(truth.values);
        auto mse = [&](double l) { return spectral.loss(yc, uc, l) / d; };

        double best_lambda = interval.lower;
        double best_mse = std::numeric_limits<double>::infinity();
        const double log_lo = std::log(interval.lower);
        const double log_hi = std::log(interval.upper);
        for (int i = 0; i < kGrid; ++i) {
            const double l =
                std::exp(log_lo + (log_hi - log_lo) * i / (kGrid - 1));
            const double m = mse(l);
            if (m < best_mse) {
                best_mse = m;
                best_lambda = l;
            }
        }

        const double m_learned = mse(bar_lambda);
        const double m_large = mse(fixed_large);
        const double m_small = mse(fixed_small);
        if (m_learned <= std::min(m_large, m_small)) ++learned_beats_fixed;
        if (m_learned <= 1.15 * best_mse) ++within_ratio;
        result.rows.push_back({static_cast<double>(s), bar_lambda, m_large,
                               m_small, m_learned, best_lambda, best_mse});
    }

    result.extra["learned_beats_fixed_fraction"] =
        static_cast<double>(learned_beats_fixed) / p.seeds;
    result.extra["within_1p15_of_grid_fraction"] =
        static_cast<double>(within_ratio) / p.seeds;
    result.preset_echo = preset_to_json(p);
    result.preset_hash = preset_hash(p);
    result.master_seed = p.master_seed;
    result.runtime_seconds = seconds_since(t0);
    return result;
}

std::string preset_hash(const ExperimentPreset& p) {
    const std::string dump = preset_to_json(p).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a 64
    for (unsigned char c : dump) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(h));
    return buf;
}

void write_csv(const std::string& path, const StudyResult& r) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw NumericalError("write_csv: cannot open '" + path + "'");
    out << "# bilevel-csv v1 study=" << r.study << " preset="
        << r.preset_echo.value("name", std::string("?")) << " hash="
        << r.preset_hash << " seed=" << r.master_seed << "\n";
    for (size_t i = 0; i < r.columns.size(); ++i)
        out << (i ? "," : "") << r.columns[i];
    out << "\n";
    char buf[32];
    for (const auto& row : r.rows) {
        for (size_t i = 0; i < row.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.17g", row[i]);
            out << (i ? "," : "") << buf;
        }
        out << "\n";
    }
    if (!out) throw NumericalError("write_csv: write failed for '" + path + "'");
}

void write_manifest(const std::string& path, const ExperimentPreset& p,
                    const StudyResult* result,
                    const std::vector<std::string>& outputs, bool success,
                    const std::string& error) {
    nlohmann::json j;
    j["preset"] = preset_to_json(p);
    j["preset_hash"] = preset_hash(p);
    j["success"] = success;
    j["outputs"] = outputs;
    j["timestamp"] = static_cast<long long>(std::time(nullptr));
    if (!error.empty()) j["error"] = error;
    if (result) {
        j["study"] = result->study;
        j["runtime_seconds"] = result->runtime_seconds;
        if (std::isfinite(result->slope)) {
            j["slope"] = result->slope;
            j["slope_half_width"] = result->slope_half_width;
        }
        j["extra"] = result->extra;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw NumericalError("write_manifest: cannot open '" + path + "'");
    out << j.dump(2) << "\n";
}

}  // namespace bilevel
