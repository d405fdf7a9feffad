#include "bilevel/covariance.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bilevel/errors.hpp"

namespace bilevel {

namespace {

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void fix_sign(Eigen::Ref<Eigen::VectorXd> v) {
    for (int i = 0; i < v.size(); ++i) {
        if (v[i] != 0.0) {
            if (v[i] < 0.0) v = -v;
            return;
        }
    }
}

}  // namespace

CovarianceModel build_covariance(const Mesh& mesh, double beta, double tau,
                                 double alpha) {
    mesh.validate();
    if (beta <= 0.0) throw ValidationError("build_covariance: beta must be positive");
    if (alpha < 1.0) throw ValidationError("build_covariance: alpha must be >= 1");
    if (tau < 0.0) throw ValidationError("build_covariance: tau must be nonnegative");
    if (mesh.boundary == Boundary::Neumann && tau == 0.0)
        throw NumericalError(
            "build_covariance: Neumann Laplacian with tau=0 is singular, C0 "
            "would not be SPD");

    Eigen::MatrixXd lap = assemble_laplacian(mesh);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(lap);
    if (eig.info() != Eigen::Success)
        throw NumericalError("build_covariance: eigendecomposition failed");

    int d = mesh.dofs();
    CovarianceModel model;
    model.beta_ = beta;
    model.tau_ = tau;
    model.alpha_ = alpha;
    model.mesh_ = mesh;
    model.eigenvalues_.resize(d);
    model.eigenvectors_.resize(d, d);

    // mu ascending -> sigma descending after the reversal below
    double scale = 1.0 / std::sqrt(mesh.weight());
    for (int i = 0; i < d; ++i) {
        double mu = eig.eigenvalues()[i];
        double shifted = tau * tau + mu;
        if (shifted <= 0.0)
            throw NumericalError("build_covariance: operator not SPD (shifted "
                                 "eigenvalue " + std::to_string(shifted) + ")");
        model.eigenvalues_[i] = beta * std::pow(shifted, -alpha);
        model.eigenvectors_.col(i) = scale * eig.eigenvectors().col(i);
        fix_sign(model.eigenvectors_.col(i));
    }
    return model;
}

Eigen::MatrixXd CovarianceModel::matrix() const {
    return eigenvectors_ * eigenvalues_.asDiagonal() * eigenvectors_.transpose();
}

Eigen::MatrixXd CovarianceModel::precision() const {
    double w = mesh_.weight();
    return (w * w) * eigenvectors_ * eigenvalues_.cwiseInverse().asDiagonal() *
           eigenvectors_.transpose();
}

Eigen::MatrixXd CovarianceModel::sqrt_matrix() const {
    double w = mesh_.weight();
    return std::sqrt(w) * eigenvectors_ * eigenvalues_.cwiseSqrt().asDiagonal() *
           eigenvectors_.transpose();
}

void CovarianceModel::save(const std::string& json_path,
                           const std::string& payload_path) const {
    nlohmann::json header = {
        {"beta", beta_},
        {"tau", tau_},
        {"alpha", alpha_},
        {"mesh", {{"dimension", mesh_.dimension},
                  {"nodes", mesh_.nodes},
                  {"boundary", mesh_.boundary == Boundary::Dirichlet
                                   ? "dirichlet" : "neumann"}}},
        {"payload", payload_path}};
    std::ofstream js(json_path);
    if (!js) throw ValidationError("cannot write " + json_path);
    js << header.dump(2) << "\n";

    std::ofstream out(payload_path);
    if (!out) throw ValidationError("cannot write " + payload_path);
    int d = dim();
    for (int i = 0; i < d; ++i)
        out << fmt_double(eigenvalues_[i]) << (i + 1 < d ? "," : "\n");
    for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c)
            out << fmt_double(eigenvectors_(r, c)) << (c + 1 < d ? "," : "\n");
}

CovarianceModel CovarianceModel::load(const std::string& json_path,
                                      const std::string& payload_path) {
    std::ifstream js(json_path);
    if (!js) throw ValidationError("cannot read " + json_path);
    nlohmann::json header = nlohmann::json::parse(js);

    CovarianceModel model;
    model.beta_ = header.at("beta").get<double>();
    model.tau_ = header.at("tau").get<double>();
    model.alpha_ = header.at("alpha").get<double>();
    model.mesh_.dimension = header.at("mesh").at("dimension").get<int>();
    model.mesh_.nodes = header.at("mesh").at("nodes").get<int>();
    std::string bc = header.at("mesh").at("boundary").get<std::string>();
    if (bc == "dirichlet") model.mesh_.boundary = Boundary::Dirichlet;
    else if (bc == "neumann") model.mesh_.boundary = Boundary::Neumann;
    else throw ValidationError("unknown boundary: " + bc);
    model.mesh_.validate();

    std::ifstream in(payload_path);
    if (!in) throw ValidationError("cannot read " + payload_path);
    int d = model.mesh_.dofs();
    model.eigenvalues_.resize(d);
    model.eigenvectors_.resize(d, d);
    auto read_row = [&](Eigen::Ref<Eigen::VectorXd> row) {
        std::string line;
        if (!std::getline(in, line))
            throw ValidationError("truncated payload: " + payload_path);
        std::stringstream ss(line);
        std::string cell;
        for (int i = 0; i < row.size(); ++i) {
            if (!std::getline(ss, cell, ','))
                throw ValidationError("short row in payload: " + payload_path);
            row[i] = std::strtod(cell.c_str(), nullptr);
        }
    };
    read_row(model.eigenvalues_);
    for (int r = 0; r < d; ++r) {
        Eigen::VectorXd row(d);
        read_row(row);
        model.eigenvectors_.row(r) = row;
    }
    return model;
}

}  // namespace bilevel
