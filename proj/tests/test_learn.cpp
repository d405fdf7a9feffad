#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "bilevel/erm.hpp"
#include "bilevel/errors.hpp"
#include "bilevel/forward.hpp"
#include "bilevel/lower_solver.hpp"
#include "bilevel/oracle.hpp"
#include "bilevel/rng.hpp"
#include "bilevel/sgd.hpp"

using namespace bilevel;

namespace {

// scalar model A = Gamma = C0 = 1, u ~ N(0, 1/lambda*)
constexpr double kLambdaStar = 1.0;

double scalar_population_loss(double lambda) {
    return (1.0 + lambda * lambda / kLambdaStar) / ((1.0 + lambda) * (1.0 + lambda));
}
double scalar_population_gradient(double lambda) {
    return 2.0 * (lambda / kLambdaStar - 1.0) /
           ((1.0 + lambda) * (1.0 + lambda) * (1.0 + lambda));
}

ForwardProblem scalar_problem() {
    return ForwardProblem(LinearModel{Eigen::MatrixXd::Ones(1, 1)},
                          ObservationOperator::identity(1), 1.0);
}

TrainingSet scalar_dataset(int n, RngStream& rng) {
    TrainingSet data;
    data.observations.resize(1, n);
    data.targets.resize(1, n);
    for (int j = 0; j < n; ++j) {
        double u = rng.normal() / std::sqrt(kLambdaStar);
        data.targets(0, j) = u;
        data.observations(0, j) = u + rng.normal();
    }
    return data;
}

struct RandomInstance {
    Eigen::MatrixXd A, C0;
    double gamma;
};

RandomInstance random_instance(int K, int d, unsigned long long seed) {
    RngStream rng(seed);
    Eigen::MatrixXd A(K, d);
    for (int i = 0; i < K; ++i)
        for (int j = 0; j < d; ++j) A(i, j) = rng.normal();
    Eigen::MatrixXd B(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) B(i, j) = rng.normal();
    Eigen::MatrixXd C0 = B * B.transpose() + Eigen::MatrixXd::Identity(d, d);
    return {A, C0, 0.5 + 0.5 * rng.uniform()};
}

Eigen::MatrixXd random_orthogonal(int n, RngStream& rng) {
    Eigen::MatrixXd M(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) M(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(M);
    return qr.householderQ();
}

}  // namespace

TEST_CASE("empirical_loss basics: exact pairs and duplication invariance") {
    ForwardProblem problem = scalar_problem();
    TikhonovSpec spec{&problem, nullptr, 0.7};

    // target manufactured to equal the Tikhonov output: loss 0
    TrainingSet exact;
    exact.observations.resize(1, 1);
    exact.targets.resize(1, 1);
    exact.observations(0, 0) = 2.0;
    exact.targets(0, 0) = solve_linear(spec, exact.observations.col(0))[0];
    CHECK(empirical_loss(problem, nullptr, exact, 0.7) == doctest::Approx(0.0));

    RngStream rng(1);
    TrainingSet data = scalar_dataset(6, rng);
    TrainingSet doubled;
    doubled.observations.resize(1, 12);
    doubled.targets.resize(1, 12);
    doubled.observations << data.observations, data.observations;
    doubled.targets << data.targets, data.targets;
    CHECK(empirical_loss(problem, nullptr, data, 0.7) ==
          doctest::Approx(empirical_loss(problem, nullptr, doubled, 0.7))
              .epsilon(1e-14));
}

TEST_CASE("empirical_loss is an unbiased estimate of the population loss") {
    ForwardProblem problem = scalar_problem();
    RngStream rng(42);
    const int n = 100000;
    TrainingSet data = scalar_dataset(n, rng);
    const double lambda = 0.6;

    double emp = empirical_loss(problem, nullptr, data, lambda);

    // per-pair losses for a plug-in standard error
    double sum2 = 0.0;
    for (int j = 0; j < n; ++j) {
        double f = data.observations(0, j) / (1.0 + lambda) - data.targets(0, j);
        sum2 += f * f * f * f;
    }
    double mean = emp;
    double var = sum2 / n - mean * mean;
    double se = std::sqrt(var / n);
    CHECK(std::abs(emp - scalar_population_loss(lambda)) <= 3.0 * se);
}

TEST_CASE("offline_minimize recovers the scalar population minimizer") {
    LambdaInterval interval{0.01, 10.0};
    OfflineResult r = offline_minimize(scalar_population_loss, interval);
    CHECK(std::abs(r.lambda_hat - kLambdaStar) <= 1e-6);
    CHECK_FALSE(r.at_boundary);
    CHECK(r.evaluations > 0);

    // monotone loss pins the boundary flag
    OfflineResult edge = offline_minimize([](double l) { return l; }, interval);
    CHECK(edge.at_boundary);
    CHECK(edge.lambda_hat == doctest::Approx(interval.lower).epsilon(1e-6));
}

TEST_CASE("offline estimator is invariant under duplication and isometries") {
    ForwardProblem problem = scalar_problem();
    LambdaInterval interval{0.01, 10.0};
    RngStream rng(11);
    TrainingSet data = scalar_dataset(40, rng);

    OfflineResult base = offline_minimize(problem, nullptr, data, interval);
    TrainingSet doubled;
    doubled.observations.resize(1, 80);
    doubled.targets.resize(1, 80);
    doubled.observations << data.observations, data.observations;
    doubled.targets << data.targets, data.targets;
    OfflineResult dup = offline_minimize(problem, nullptr, doubled, interval);
    CHECK(std::abs(base.lambda_hat - dup.lambda_hat) <= 1e-7);

    // conjugating the design by orthogonal maps leaves lambda-hat unchanged
    RandomInstance inst = random_instance(5, 3, 19);
    Eigen::MatrixXd R = random_orthogonal(5, rng);
    Eigen::MatrixXd Q = random_orthogonal(3, rng);

    int n = 30;
    Eigen::MatrixXd U(3, n), Y(5, n);
    Eigen::LLT<Eigen::MatrixXd> chol(inst.C0);
    for (int j = 0; j < n; ++j) {
        Eigen::VectorXd xi(3), eta(5);
        for (int i = 0; i < 3; ++i) xi[i] = rng.normal();
        for (int i = 0; i < 5; ++i) eta[i] = rng.normal();
        U.col(j) = chol.matrixL() * xi;
        Y.col(j) = inst.A * U.col(j) + inst.gamma * eta;
    }
    TrainingSet orig{Y, U};
    TrainingSet mapped{R * Y, Q * U};

    LinearErmAccelerator acc_orig(inst.A, inst.C0, inst.gamma, orig);
    LinearErmAccelerator acc_mapped(R * inst.A * Q.transpose(),
                                    Q * inst.C0 * Q.transpose(), inst.gamma,
                                    mapped);
    OfflineResult a = acc_orig.minimize(interval);
    OfflineResult b = acc_mapped.minimize(interval);
    CHECK(std::abs(a.lambda_hat - b.lambda_hat) <= 1e-6 * (1.0 + a.lambda_hat));
}

TEST_CASE("LinearErmAccelerator reproduces the per-pair empirical loss") {
    RandomInstance inst = random_instance(6, 4, 3);
    ForwardProblem problem(LinearModel{inst.A}, ObservationOperator::identity(6),
                           inst.gamma);
    Eigen::MatrixXd C0inv = inst.C0.inverse();

    RngStream rng(8);
    int n = 15;
    Eigen::MatrixXd U(4, n), Y(6, n);
    Eigen::LLT<Eigen::MatrixXd> chol(inst.C0);
    for (int j = 0; j < n; ++j) {
        Eigen::VectorXd xi(4), eta(6);
        for (int i = 0; i < 4; ++i) xi[i] = rng.normal();
        for (int i = 0; i < 6; ++i) eta[i] = rng.normal();
        U.col(j) = chol.matrixL() * xi;
        Y.col(j) = inst.A * U.col(j) + inst.gamma * eta;
    }
    TrainingSet data{Y, U};

    LinearDesign design(inst.A, inst.C0, inst.gamma);
    LinearErmAccelerator acc(design, data);
    for (double lambda : {0.05, 0.3, 1.0, 4.0}) {
        double slow = empirical_loss(problem, &C0inv, data, lambda);
        CHECK(acc.loss(lambda) == doctest::Approx(slow).epsilon(1e-10));
    }
}

TEST_CASE("sgd_gradient_exact: fixed points, scalar value, finite differences") {
    ForwardProblem problem = scalar_problem();
    TikhonovSpec spec{&problem, nullptr, 1.0};
    Eigen::VectorXd y(1), u(1);
    y << 2.0;
    u << 0.0;

    // residual-free pair has zero gradient
    Eigen::VectorXd fixed(1);
    fixed << solve_linear(spec, y)[0];
    CHECK(sgd_gradient_exact(spec, y, fixed) == doctest::Approx(0.0));

    // scalar hand value: 2 (1 - 0) * (-1/2) = -1
    CHECK(sgd_gradient_exact(spec, y, u) == doctest::Approx(-1.0).epsilon(1e-12));

    // approximate gradient agrees to O(h^2)
    RandomInstance inst = random_instance(5, 3, 27);
    ForwardProblem rp(LinearModel{inst.A}, ObservationOperator::identity(5),
                      inst.gamma);
    Eigen::MatrixXd C0inv = inst.C0.inverse();
    TikhonovSpec rspec{&rp, &C0inv, 0.9};
    RngStream rng(5);
    Eigen::VectorXd ry(5), ru(3);
    for (int i = 0; i < 5; ++i) ry[i] = rng.normal();
    for (int i = 0; i < 3; ++i) ru[i] = rng.normal();

    double exact = sgd_gradient_exact(rspec, ry, ru);
    ApproxGradient fine = sgd_gradient_approx(rspec, ry, ru, 1e-4);
    REQUIRE(fine.trusted);
    CHECK(std::abs(fine.value - exact) <= 1e-6 * (1.0 + std::abs(exact)));

    double e1 = std::abs(sgd_gradient_approx(rspec, ry, ru, 2e-1).value - exact);
    double e2 = std::abs(sgd_gradient_approx(rspec, ry, ru, 1e-1).value - exact);
    double ratio = e1 / e2;
    CHECK(ratio >= 3.5);
    CHECK(ratio <= 4.5);

    // h larger than lambda is halved before giving up
    ApproxGradient shrunk = sgd_gradient_approx(rspec, ry, ru, 1.2);
    CHECK(shrunk.h_used == doctest::Approx(0.6));
}

TEST_CASE("stochastic gradients are unbiased for the population gradient") {
    ForwardProblem problem = scalar_problem();
    RngStream rng(100);
    const int n = 100000;
    TrainingSet data = scalar_dataset(n, rng);

    for (double lambda : {0.5, 1.0, 2.0}) {
        double sum = 0.0, sum2 = 0.0;
        for (int j = 0; j < n; ++j) {
            double q = 1.0 / (1.0 + lambda);
            double ul = q * data.observations(0, j);
            double g = 2.0 * (ul - data.targets(0, j)) *
                       (-q * q * data.observations(0, j));
            sum += g;
            sum2 += g * g;
        }
        double mean = sum / n;
        double se = std::sqrt((sum2 / n - mean * mean) / n);
        CHECK(std::abs(mean - scalar_population_gradient(lambda)) <= 4.0 * se);

        // the library gradient equals the hand formula on one pair
        TikhonovSpec spec{&problem, nullptr, lambda};
        Eigen::VectorXd y = data.observations.col(0);
        Eigen::VectorXd u = data.targets.col(0);
        double q = 1.0 / (1.0 + lambda);
        double hand = 2.0 * (q * y[0] - u[0]) * (-q * q * y[0]);
        CHECK(sgd_gradient_exact(spec, y, u) ==
              doctest::Approx(hand).epsilon(1e-12));
    }

    // MC check of the library path at lambda = 2: mean ~ dF(2) = 2/27
    double sum = 0.0, sum2 = 0.0;
    ForwardProblem p2 = scalar_problem();
    TikhonovSpec spec{&p2, nullptr, 2.0};
    for (int j = 0; j < 20000; ++j) {
        double g = sgd_gradient_exact(spec, data.observations.col(j),
                                      data.targets.col(j));
        sum += g;
        sum2 += g * g;
    }
    double mean = sum / 20000;
    double se = std::sqrt((sum2 / 20000 - mean * mean) / 20000);
    CHECK(std::abs(mean - 2.0 / 27.0) <= 4.0 * se);
}

TEST_CASE("LinearOracle closed forms on the scalar instance") {
    Eigen::MatrixXd one = Eigen::MatrixXd::Ones(1, 1);
    LinearOracle oracle(one, one, 1.0, 1.0);
    CHECK(oracle.lambda_d() == doctest::Approx(1.0));
    for (double lambda : {0.3, 1.0, 2.0, 5.0}) {
        CHECK(oracle.loss(lambda) ==
              doctest::Approx(scalar_population_loss(lambda)).epsilon(1e-12));
        CHECK(oracle.gradient(lambda) ==
              doctest::Approx(scalar_population_gradient(lambda)).epsilon(1e-12));
    }
    CHECK(oracle.gradient(2.0) == doctest::Approx(2.0 / 27.0).epsilon(1e-12));
    CHECK(oracle.hessian(1.0) == doctest::Approx(0.25).epsilon(1e-12));

    ConvexityBounds bounds = oracle.convexity_bounds(1.5);
    CHECK(bounds.hessian_floor == doctest::Approx(1.0 / 9.0).epsilon(1e-12));
    // L* = 2 lambda_D^2 / (3 (lambda_D + lambda_u)^3 ||A^T Gamma^-1 A||)
    CHECK(bounds.gradient_floor ==
          doctest::Approx(2.0 / (3.0 * 2.5 * 2.5 * 2.5)).epsilon(1e-12));
    CHECK(bounds.region_lo == doctest::Approx(5.0 / 6.0));
    CHECK(bounds.region_hi == doctest::Approx(7.0 / 6.0));

    // convexity floor holds across the region; gradient floor at lambda_u
    for (int i = 0; i < 20; ++i) {
        double lambda = bounds.region_lo +
                        (bounds.region_hi - bounds.region_lo) * i / 19.0;
        CHECK(oracle.hessian(lambda) >= bounds.hessian_floor * (1.0 - 1e-12));
    }
    CHECK(oracle.gradient(1.5) >= bounds.gradient_floor / 2.0);

    // non-convexity far from lambda*: F''(lambda) < 0 for lambda >= 10
    CHECK(oracle.hessian(10.0) < 0.0);
}

TEST_CASE("LinearOracle stationarity and sign structure on random instances") {
    for (unsigned long long seed = 1; seed <= 10; ++seed) {
        RandomInstance inst = random_instance(5, 4, seed);
        double lambda_star = 0.2 + 0.1 * static_cast<double>(seed);
        LinearOracle oracle(inst.A, inst.C0, inst.gamma, lambda_star);
        CHECK(std::abs(oracle.gradient(lambda_star)) <= 1e-12);
        CHECK(oracle.hessian(lambda_star) > 0.0);
        CHECK(oracle.gradient(0.5 * lambda_star) < 0.0);
        CHECK(oracle.gradient(2.0 * lambda_star) > 0.0);
        CHECK(oracle.loss(lambda_star) <
              std::min(oracle.loss(0.5 * lambda_star),
                       oracle.loss(2.0 * lambda_star)));
    }
}

TEST_CASE("oracle gradients match finite differences of the oracle loss") {
    RandomInstance inst = random_instance(6, 4, 77);
    LinearOracle oracle(inst.A, inst.C0, inst.gamma, 0.8);
    const double h = 1e-6;
    for (double lambda : {0.3, 0.8, 2.0}) {
        double fd = (oracle.loss(lambda + h) - oracle.loss(lambda - h)) / (2 * h);
        CHECK(oracle.gradient(lambda) == doctest::Approx(fd).epsilon(1e-6));
        double fd2 = (oracle.gradient(lambda + h) - oracle.gradient(lambda - h)) /
                     (2 * h);
        CHECK(oracle.hessian(lambda) == doctest::Approx(fd2).epsilon(1e-5));
    }
}

TEST_CASE("run_bsgd degenerate and projection behavior") {
    SgdConfig config;
    config.beta0 = 1.0;
    config.exponent = 1.0;
    config.interval = LambdaInterval{0.5, 10.0};
    config.lambda0 = 2.0;
    config.m = 10;

    // A = 0: the gradient vanishes, iterates never move
    ForwardProblem degenerate(LinearModel{Eigen::MatrixXd::Zero(1, 1)},
                              ObservationOperator::identity(1), 1.0);
    PairStream ones = [](int) {
        return std::make_pair(Eigen::VectorXd::Ones(1), Eigen::VectorXd::Ones(1));
    };
    SgdTrace still = run_bsgd(degenerate, nullptr, ones, config, 50,
                              GradientKind::Exact);
    for (double l : still.iterates) CHECK(l == 2.0);
    CHECK(still.bar_lambda == 2.0);

    // pairs with u far above any reconstruction drive lambda onto the bound
    ForwardProblem scalar = scalar_problem();
    PairStream overshoot = [](int) {
        Eigen::VectorXd y(1), u(1);
        y << 2.0;
        u << 10.0;
        return std::make_pair(y, u);
    };
    SgdConfig fast = config;
    fast.beta0 = 5.0;
    SgdTrace trace = run_bsgd(scalar, nullptr, overshoot, fast, 200,
                              GradientKind::Exact);
    for (double l : trace.iterates) {
        CHECK(l >= fast.interval.lower);
        CHECK(l <= fast.interval.upper);
    }
    CHECK(trace.iterates.back() == fast.interval.lower);  // exact clamp
    CHECK(static_cast<int>(trace.iterates.size()) == 201);

    // bar_lambda is exactly the tail-window mean
    double mean = 0.0;
    for (int k = 200 - fast.m + 1; k <= 200; ++k) mean += trace.iterates[k];
    CHECK(trace.bar_lambda == doctest::Approx(mean / fast.m).epsilon(1e-15));
}

TEST_CASE("interval projection is non-expansive") {
    LambdaInterval interval{0.2, 3.0};
    RngStream rng(64);
    for (int i = 0; i < 10000; ++i) {
        double x = 20.0 * (rng.uniform() - 0.5);
        double y = 20.0 * (rng.uniform() - 0.5);
        CHECK(std::abs(interval.project(x) - interval.project(y)) <=
              std::abs(x - y) + 1e-15);
        double px = interval.project(x);
        CHECK(px >= interval.lower);
        CHECK(px <= interval.upper);
    }
}

TEST_CASE("SgdConfig validation enforces Robbins-Monro and window bounds") {
    SgdConfig config;
    config.lambda0 = 1.0;
    config.m = 10;
    config.validate(100);

    SgdConfig bad_exp = config;
    bad_exp.exponent = 0.4;
    CHECK_THROWS_AS(bad_exp.validate(100), ValidationError);

    SgdConfig bad_m = config;
    bad_m.m = 200;
    CHECK_THROWS_AS(bad_m.validate(100), ValidationError);

    SgdConfig bad_l0 = config;
    bad_l0.lambda0 = 100.0;  // outside the interval
    CHECK_THROWS_AS(bad_l0.validate(100), ValidationError);
}

TEST_CASE("scalar bilevel SGD converges at the expected rate") {
    ForwardProblem problem = scalar_problem();
    SgdConfig config;
    config.beta0 = 2.0;
    config.exponent = 1.0;
    config.interval = LambdaInterval{0.01, 10.0};
    config.lambda0 = 2.0;
    config.m = 50;

    auto median_sq_err = [&](int iterations) {
        std::vector<double> errs;
        for (int s = 0; s < 50; ++s) {
            auto rng = std::make_shared<RngStream>(RngStream::split(900, s));
            PairStream stream = [rng](int) {
                Eigen::VectorXd y(1), u(1);
                u << rng->normal() / std::sqrt(kLambdaStar);
                y << u[0] + rng->normal();
                return std::make_pair(y, u);
            };
            SgdTrace trace = run_bsgd(problem, nullptr, stream, config,
                                      iterations, GradientKind::Exact);
            double e = trace.bar_lambda - kLambdaStar;
            errs.push_back(e * e);
        }
        std::nth_element(errs.begin(), errs.begin() + 25, errs.end());
        return errs[25];
    };

    double coarse = median_sq_err(1000);
    double fine = median_sq_err(10000);
    CHECK(fine * 3.0 <= coarse);
}

TEST_CASE("c_n_sequence decays to zero monotonically") {
    std::vector<double> cn = c_n_sequence(1.0, 0.5, 2.0, 1.0, 2000);
    REQUIRE(static_cast<int>(cn.size()) == 2000);
    for (size_t i = 1; i < cn.size(); ++i) CHECK(cn[i] <= cn[i - 1] + 1e-15);
    CHECK(cn.back() < 0.05);
    CHECK(cn.back() < cn.front() / 20.0);
}
