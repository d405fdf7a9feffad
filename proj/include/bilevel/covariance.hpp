#ifndef BILEVEL_COVARIANCE_HPP
#define BILEVEL_COVARIANCE_HPP

#include <Eigen/Dense>
#include <iosfwd>
#include <string>

#include "bilevel/mesh.hpp"

namespace bilevel {

/// Discretized prior covariance C0 = beta * (tau^2 I - Delta_h)^(-alpha),
/// held through its eigendecomposition.
///
/// Eigenvectors are orthonormal in the mesh inner product (h^dim-scaled
/// Euclidean) and carry a fixed sign convention: first nonzero component
/// positive. Eigenvalues sigma_i = beta * (tau^2 + mu_i)^(-alpha) are sorted
/// descending, with mu_i the eigenvalues of -Delta_h.
class CovarianceModel {
public:
    CovarianceModel() = default;

    double beta() const { return beta_; }
    double tau() const { return tau_; }
    double alpha() const { return alpha_; }
    const Mesh& mesh() const { return mesh_; }

    const Eigen::VectorXd& eigenvalues() const { return eigenvalues_; }
    /// Columns phi_i, mesh-orthonormal.
    const Eigen::MatrixXd& eigenvectors() const { return eigenvectors_; }

    int dim() const { return static_cast<int>(eigenvalues_.size()); }

    /// Operator trace, sum of sigma_i (basis independent).
    double trace() const { return eigenvalues_.sum(); }

    /// Dense covariance matrix Phi Sigma Phi^T. This is the covariance of a
    /// full-spectrum KL sample with unit lambda*.
    Eigen::MatrixXd matrix() const;

    /// Dense precision C0^{-1}, the Tikhonov prior weight.
    Eigen::MatrixXd precision() const;

    Eigen::MatrixXd sqrt_matrix() const;

    /// JSON header (parameters + mesh descriptor) and CSV eigenpair payload;
    /// round-trips bit exactly.
    void save(const std::string& json_path, const std::string& payload_path) const;
    static CovarianceModel load(const std::string& json_path,
                                const std::string& payload_path);

    friend CovarianceModel build_covariance(const Mesh&, double, double, double);

private:
    double beta_ = 1.0, tau_ = 0.0, alpha_ = 1.0;
    Mesh mesh_;
    Eigen::VectorXd eigenvalues_;
    Eigen::MatrixXd eigenvectors_;
};

/// Eigendecomposes beta * (tau^2 I - Delta_h)^(-alpha) on the mesh.
/// Requires beta > 0, alpha > 1 (alpha = 1 is allowed for the canonical
/// (-Delta)^{-1} prior used in refinement studies), tau >= 0; Neumann meshes
/// need tau > 0 to keep the operator SPD.
CovarianceModel build_covariance(const Mesh& mesh, double beta, double tau,
                                 double alpha);

}  // namespace bilevel

#endif
