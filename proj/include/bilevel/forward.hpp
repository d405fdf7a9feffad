#ifndef BILEVEL_FORWARD_HPP
#define BILEVEL_FORWARD_HPP

#include <Eigen/Dense>
#include <optional>
#include <variant>
#include <vector>

#include "bilevel/covariance.hpp"
#include "bilevel/mesh.hpp"
#include "bilevel/observation.hpp"
#include "bilevel/rng.hpp"

namespace bilevel {

/// Solves -Delta_h p = u on the mesh with homogeneous Dirichlet boundary.
/// `u` lives on the interior dofs.
Eigen::VectorXd laplace_forward(const Mesh& mesh, const Eigen::VectorXd& u);

struct DarcyStats {
    int clamped_nodes = 0;  // |log-permeability| clamped at the overflow guard
};

/// Solves -div(exp(u) grad p) = f with homogeneous Dirichlet boundary.
/// `log_perm` holds the log-permeability on the FULL grid (nodes^dim values,
/// row-major), so priors with Neumann covariance can be used directly;
/// pressure is returned on the interior dofs. Face coefficients use harmonic
/// averaging. |log_perm| is clamped at 40 (counted in `stats`); NaN input is
/// a hard error naming the node.
Eigen::VectorXd darcy_forward(const Mesh& mesh, const Eigen::VectorXd& log_perm,
                              double source, DarcyStats* stats = nullptr);

/// Same solve with a spatially varying source on the interior dofs
/// (manufactured-solution refinement tests).
Eigen::VectorXd darcy_forward(const Mesh& mesh, const Eigen::VectorXd& log_perm,
                              const Eigen::VectorXd& source_field,
                              DarcyStats* stats = nullptr);

/// Embeds dof values into the full grid (zero on the Dirichlet boundary;
/// identity for Neumann meshes).
Eigen::VectorXd to_full_grid(const Mesh& mesh, const Eigen::VectorXd& dof_values);

/// First-order fast-marching solve of |grad T| = s with T = 0 at the source
/// node; `slowness` is given on the full grid (all nodes are unknowns, the
/// boundary condition is the one-sided upwind update). If `acceptance_order`
/// is given, the node indices are recorded in the order they were finalized.
Eigen::VectorXd eikonal_forward(const Mesh& grid, const Eigen::VectorXd& slowness,
                                int source_node,
                                std::vector<int>* acceptance_order = nullptr);

struct SignalPath {
    Eigen::VectorXd values;  // path sampled at t_i = i*T/d, i=1..d
    std::vector<double> jump_times;
    std::vector<double> jump_sizes;
};

/// Compound Poisson path: Poisson(rate*horizon) jumps at uniform times with
/// standard normal sizes; piecewise constant, right continuous.
SignalPath signal_sample(double rate, double horizon, int grid_size,
                         RngStream& rng);

// --- forward problem -------------------------------------------------------

struct LinearModel {
    Eigen::MatrixXd A;  // K x d
};

struct DarcyModel {
    Mesh mesh;               // Dirichlet pressure mesh
    double source = 1.0;     // constant right-hand side f
    Eigen::MatrixXd basis;   // full-grid KL basis columns sqrt(sigma_i) phi_i
};

struct EikonalModel {
    Mesh grid;               // all-nodes grid (Neumann-style dof layout)
    int source_node = 0;
    Eigen::MatrixXd basis;   // full-grid KL basis columns sqrt(sigma_i) phi_i
};

struct SignalModel {
    Eigen::MatrixXd L;  // regularization matrix of the quadratic penalty
};

/// A forward map G plus the observation operator and noise level. The
/// nonlinear kinds act on KL coefficients; the basis maps coefficients to the
/// full-grid field whose exponential enters the PDE.
class ForwardProblem {
public:
    ForwardProblem(LinearModel model, ObservationOperator obs, double gamma);
    ForwardProblem(DarcyModel model, ObservationOperator obs, double gamma);
    ForwardProblem(EikonalModel model, ObservationOperator obs, double gamma);
    ForwardProblem(SignalModel model, double gamma);

    bool is_linear() const { return std::holds_alternative<LinearModel>(model_); }
    bool is_signal() const { return std::holds_alternative<SignalModel>(model_); }
    bool is_nonlinear() const {
        return std::holds_alternative<DarcyModel>(model_) ||
               std::holds_alternative<EikonalModel>(model_);
    }

    const LinearModel& linear() const { return std::get<LinearModel>(model_); }
    const DarcyModel& darcy() const { return std::get<DarcyModel>(model_); }
    const EikonalModel& eikonal() const { return std::get<EikonalModel>(model_); }
    const SignalModel& signal() const { return std::get<SignalModel>(model_); }

    double gamma() const { return gamma_; }
    const ObservationOperator& observation() const { return observation_; }

    /// Input dimension of G: field dofs (linear), KL coefficient count
    /// (nonlinear), or the signal grid size.
    int input_dim() const;
    int output_dim() const { return observation_.count(); }

    /// Noise-free prediction G(input) in observation space.
    Eigen::VectorXd predict(const Eigen::VectorXd& input) const;

    /// y = O(state) + eta, eta ~ N(0, gamma^2 I). `state` lives on the
    /// model's full state (pressure dofs, travel-time grid, or signal grid).
    Eigen::VectorXd observe(const Eigen::VectorXd& state, RngStream& rng) const;

    /// Cached A^T Gamma^{-1} A for the linear kind.
    const Eigen::MatrixXd& normal_matrix() const;

private:
    std::variant<LinearModel, DarcyModel, EikonalModel, SignalModel> model_;
    ObservationOperator observation_;
    double gamma_ = 0.0;
    Eigen::MatrixXd normal_matrix_;  // linear only
};

/// Assembles the Laplace observation matrix A = O o (-Delta_h)^{-1}.
Eigen::MatrixXd build_linear_A(const Mesh& mesh, const ObservationOperator& obs);

}  // namespace bilevel

#endif
