#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>

#include "bilevel/covariance.hpp"
#include "bilevel/errors.hpp"
#include "bilevel/kl.hpp"
#include "bilevel/mesh.hpp"
#include "bilevel/observation.hpp"
#include "bilevel/rng.hpp"

using namespace bilevel;

namespace {
constexpr double kPi = std::numbers::pi;

Eigen::VectorXd laplacian_spectrum(const Mesh& mesh) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(assemble_laplacian(mesh));
    REQUIRE(es.info() == Eigen::Success);
    return es.eigenvalues();
}
}  // namespace

TEST_CASE("mesh validation and geometry") {
    Mesh mesh{1, 5, Boundary::Dirichlet};
    mesh.validate();
    CHECK(mesh.spacing() == doctest::Approx(0.25));
    CHECK(mesh.dofs() == 3);
    CHECK(mesh.weight() == doctest::Approx(0.25));
    CHECK(mesh.coordinate(0).x() == doctest::Approx(0.25));

    Mesh neumann{1, 5, Boundary::Neumann};
    CHECK(neumann.dofs() == 5);

    Mesh bad{1, 1, Boundary::Dirichlet};
    CHECK_THROWS_AS(bad.validate(), ValidationError);

    Mesh square{2, 5, Boundary::Dirichlet};
    CHECK(square.dofs() == 9);
    CHECK(square.weight() == doctest::Approx(0.0625));
}

TEST_CASE("1D Dirichlet Laplacian is the textbook stencil") {
    Mesh mesh{1, 5, Boundary::Dirichlet};
    const double h2 = mesh.spacing() * mesh.spacing();
    Eigen::MatrixXd lap = assemble_laplacian(mesh);
    REQUIRE(lap.rows() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(lap(i, i) == doctest::Approx(2.0 / h2));
        if (i > 0) CHECK(lap(i, i - 1) == doctest::Approx(-1.0 / h2));
    }
    CHECK(lap(0, 2) == doctest::Approx(0.0));
}

TEST_CASE("smallest Laplacian eigenvalue approaches pi^2 under refinement") {
    Mesh mesh{1, 257, Boundary::Dirichlet};
    const double mu_min = laplacian_spectrum(mesh).minCoeff();
    CHECK(mu_min == doctest::Approx(kPi * kPi).epsilon(1e-3));
}

TEST_CASE("Neumann Laplacian annihilates constants") {
    for (int dim : {1, 2}) {
        Mesh mesh{dim, 9, Boundary::Neumann};
        Eigen::MatrixXd lap = assemble_laplacian(mesh);
        Eigen::VectorXd ones = Eigen::VectorXd::Ones(mesh.dofs());
        CHECK((lap * ones).norm() <= 1e-10);
        // positive semidefinite
        CHECK(laplacian_spectrum(mesh).minCoeff() >= -1e-10);
    }
}

TEST_CASE("2D Dirichlet eigenvalues are tensor sums of the 1D ones") {
    Mesh mesh1{1, 6, Boundary::Dirichlet};  // 4 interior nodes
    Mesh mesh2{2, 6, Boundary::Dirichlet};  // 4x4 interior grid
    Eigen::VectorXd mu1 = laplacian_spectrum(mesh1);
    Eigen::VectorXd mu2 = laplacian_spectrum(mesh2);

    std::vector<double> sums;
    for (int i = 0; i < mu1.size(); ++i)
        for (int j = 0; j < mu1.size(); ++j) sums.push_back(mu1[i] + mu1[j]);
    std::sort(sums.begin(), sums.end());
    REQUIRE(static_cast<int>(sums.size()) == mu2.size());
    for (int i = 0; i < mu2.size(); ++i)
        CHECK(mu2[i] == doctest::Approx(sums[static_cast<size_t>(i)]).epsilon(1e-10));
}

TEST_CASE("covariance eigenvectors diagonalize the Laplacian") {
    Mesh mesh{1, 17, Boundary::Dirichlet};
    CovarianceModel cov = build_covariance(mesh, 2.0, 0.5, 2.0);
    Eigen::MatrixXd lap = assemble_laplacian(mesh);
    for (int i = 0; i < cov.dim(); ++i) {
        // recover mu_i from sigma_i = beta (tau^2 + mu_i)^{-alpha}
        const double mu =
            std::pow(cov.beta() / cov.eigenvalues()[i], 1.0 / cov.alpha()) -
            cov.tau() * cov.tau();
        Eigen::VectorXd phi = cov.eigenvectors().col(i);
        CHECK((lap * phi - mu * phi).norm() <= 1e-7 * (1.0 + mu));
    }
}

TEST_CASE("covariance spectrum matches the closed form") {
    Mesh mesh{1, 17, Boundary::Dirichlet};
    const double mu_min = laplacian_spectrum(mesh).minCoeff();

    // the Laplace experiment parameters
    CovarianceModel cov = build_covariance(mesh, 100.0, 0.1, 2.0);
    CHECK(cov.eigenvalues()[0] ==
          doctest::Approx(100.0 * std::pow(0.01 + mu_min, -2.0)).epsilon(1e-12));

    // one-dof mesh: sigma_1 = beta / (1 + 2/h^2) for alpha = tau = 1
    Mesh tiny{1, 3, Boundary::Dirichlet};
    CovarianceModel scalar = build_covariance(tiny, 5.0, 1.0, 1.0);
    const double h = tiny.spacing();
    CHECK(scalar.eigenvalues()[0] ==
          doctest::Approx(5.0 / (1.0 + 2.0 / (h * h))).epsilon(1e-12));
}

TEST_CASE("covariance invariants: descending SPD spectrum, mesh-orthonormality") {
    Mesh mesh{2, 9, Boundary::Dirichlet};
    CovarianceModel cov = build_covariance(mesh, 100.0, 0.1, 2.0);
    for (int i = 1; i < cov.dim(); ++i)
        CHECK(cov.eigenvalues()[i] <= cov.eigenvalues()[i - 1]);
    CHECK(cov.eigenvalues().minCoeff() > 0.0);

    Eigen::MatrixXd gram =
        cov.eigenvectors().transpose() * cov.eigenvectors() * mesh.weight();
    CHECK((gram - Eigen::MatrixXd::Identity(cov.dim(), cov.dim())).norm() <= 1e-10);

    Eigen::MatrixXd C0 = cov.matrix();
    CHECK((C0 - C0.transpose()).norm() <= 1e-10 * C0.norm());
    CHECK((C0 * cov.precision() - Eigen::MatrixXd::Identity(cov.dim(), cov.dim()))
              .norm() <= 1e-8);
    CHECK((cov.sqrt_matrix() * cov.sqrt_matrix() - C0).norm() <=
          1e-10 * C0.norm());
}

TEST_CASE("Neumann with tau = 0 is rejected as non-SPD") {
    Mesh mesh{1, 9, Boundary::Neumann};
    CHECK_THROWS_AS(build_covariance(mesh, 1.0, 0.0, 2.0), NumericalError);
}

TEST_CASE("covariance save/load round-trips exactly") {
    Mesh mesh{1, 9, Boundary::Dirichlet};
    CovarianceModel cov = build_covariance(mesh, 3.0, 0.2, 2.0);
    const auto dir = std::filesystem::temp_directory_path() / "bilevel_cov_rt";
    std::filesystem::create_directories(dir);
    const std::string header = (dir / "cov.json").string();
    const std::string payload = (dir / "cov.csv").string();
    cov.save(header, payload);
    CovarianceModel loaded = CovarianceModel::load(header, payload);
    CHECK(loaded.beta() == cov.beta());
    CHECK((loaded.eigenvalues() - cov.eigenvalues()).norm() == 0.0);
    CHECK((loaded.eigenvectors() - cov.eigenvectors()).norm() == 0.0);
    std::filesystem::remove_all(dir);
}

TEST_CASE("trace of (-Delta)^{-1} converges under refinement") {
    std::vector<double> traces;
    for (int nodes : {33, 65, 129, 257}) {
        Mesh mesh{1, nodes, Boundary::Dirichlet};
        traces.push_back(build_covariance(mesh, 1.0, 0.0, 1.0).trace());
    }
    double prev_diff = std::abs(traces[1] - traces[0]);
    for (size_t i = 2; i < traces.size(); ++i) {
        const double diff = std::abs(traces[i] - traces[i - 1]);
        CHECK(diff < prev_diff);
        prev_diff = diff;
    }
}

TEST_CASE("KL sampling: lambda* scaling, determinism, truncation span") {
    Mesh mesh{1, 17, Boundary::Dirichlet};
    CovarianceModel cov = build_covariance(mesh, 2.0, 0.5, 2.0);

    KlPrior prior{&cov, 5, 1.0, CoefficientLaw::Gaussian};
    KlPrior doubled{&cov, 5, 2.0, CoefficientLaw::Gaussian};

    RngStream a(42), b(42), c(42);
    KlSample s1 = kl_sample(prior, a);
    KlSample s2 = kl_sample(doubled, b);
    KlSample s3 = kl_sample(prior, c);

    // doubling lambda* scales samples by 1/sqrt(2) for the same stream
    CHECK((s1.field / std::sqrt(2.0) - s2.field).norm() <= 1e-14);
    // bit-level determinism
    CHECK((s1.field - s3.field).norm() == 0.0);
    CHECK((s1.coefficients - s3.coefficients).norm() == 0.0);

    // truncated sample is mesh-orthogonal to the next eigenvector
    Eigen::VectorXd phi6 = cov.eigenvectors().col(5);
    CHECK(std::abs(mesh.weight() * phi6.dot(s1.field)) <= 1e-10);
}

TEST_CASE("KL sample covariance matches C0/lambda*") {
    Mesh mesh{1, 9, Boundary::Dirichlet};
    CovarianceModel cov = build_covariance(mesh, 2.0, 0.5, 2.0);
    const double lambda_star = 0.5;
    KlPrior prior{&cov, cov.dim(), lambda_star, CoefficientLaw::Gaussian};

    const int N = 20000;
    RngStream rng(7);
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(cov.dim(), cov.dim());
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(cov.dim());
    for (int i = 0; i < N; ++i) {
        KlSample s = kl_sample(prior, rng);
        sum += s.field * s.field.transpose();
        mean += s.field;
    }
    Eigen::MatrixXd emp = sum / N;
    Eigen::MatrixXd target = cov.matrix() / lambda_star;
    CHECK((emp - target).norm() / target.norm() <= 0.05);

    // zero mean within 4 plug-in standard errors componentwise
    for (int i = 0; i < cov.dim(); ++i) {
        const double sd = std::sqrt(emp(i, i));
        CHECK(std::abs(mean[i] / N) <= 4.0 * sd / std::sqrt(static_cast<double>(N)));
    }
}

TEST_CASE("non-Gaussian coefficient laws are symmetric with unit variance") {
    RngStream rng(3);
    for (CoefficientLaw law : {CoefficientLaw::Uniform, CoefficientLaw::Rademacher}) {
        double sum = 0.0, sum2 = 0.0;
        const int N = 50000;
        for (int i = 0; i < N; ++i) {
            const double x = draw_coefficient(law, rng);
            sum += x;
            sum2 += x * x;
        }
        CHECK(std::abs(sum / N) <= 0.02);
        CHECK(sum2 / N == doctest::Approx(1.0).epsilon(0.02));
    }
}

TEST_CASE("observation operators are unit-indicator selections") {
    Mesh mesh{1, 9, Boundary::Dirichlet};

    ObservationOperator obs =
        ObservationOperator::from_points(mesh, {{0.26, 0.0}, {0.74, 0.0}});
    REQUIRE(obs.count() == 2);
    Eigen::VectorXd state(mesh.dofs());
    for (int i = 0; i < state.size(); ++i) state[i] = 10.0 + i;
    Eigen::VectorXd y = obs.apply(state);
    CHECK(y[0] == state[obs.indices()[0]]);
    // nearest dof of x=0.26 on h=1/8 interior grid is node at 0.25
    CHECK(mesh.coordinate(obs.indices()[0]).x() == doctest::Approx(0.25));
    CHECK(mesh.coordinate(obs.indices()[1]).x() == doctest::Approx(0.75));

    Eigen::MatrixXd M = obs.matrix();
    CHECK(M.rows() == 2);
    for (int r = 0; r < M.rows(); ++r) {
        CHECK(M.row(r).sum() == doctest::Approx(1.0));
        CHECK(M.row(r).maxCoeff() == doctest::Approx(1.0));
    }

    RngStream rng(11);
    ObservationOperator rnd = ObservationOperator::random(mesh, 5, rng);
    std::vector<int> idx = rnd.indices();
    std::sort(idx.begin(), idx.end());
    CHECK(std::adjacent_find(idx.begin(), idx.end()) == idx.end());  // no repeats
    CHECK_THROWS_AS(ObservationOperator::random(mesh, 100, rng), ValidationError);

    ObservationOperator id = ObservationOperator::identity(4);
    Eigen::VectorXd v(4);
    v << 1, 2, 3, 4;
    CHECK((id.apply(v) - v).norm() == 0.0);
}

TEST_CASE("rng splitting is deterministic and order-independent") {
    RngStream a = RngStream::split(99, 3);
    RngStream b = RngStream::split(99, 3);
    CHECK(a.normal() == b.normal());
    RngStream c = RngStream::split(99, 4);
    CHECK(RngStream::split(99, 4).normal() == c.normal());
}
