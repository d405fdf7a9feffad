#ifndef BILEVEL_OBSERVATION_HPP
#define BILEVEL_OBSERVATION_HPP

#include <Eigen/Dense>
#include <vector>

#include "bilevel/mesh.hpp"
#include "bilevel/rng.hpp"

namespace bilevel {

/// Pointwise observation of a state vector: each row of the selection matrix
/// is a unit indicator picking one state entry.
class ObservationOperator {
public:
    ObservationOperator() = default;

    /// Observation at given domain locations, mapped to the nearest dof.
    static ObservationOperator from_points(
        const Mesh& mesh, const std::vector<Eigen::Vector2d>& points);

    /// K locations drawn uniformly without replacement from the mesh dofs
    /// (interior nodes for Dirichlet meshes).
    static ObservationOperator random(const Mesh& mesh, int count, RngStream& rng);

    /// Identity observation of a length-d state (signal denoising).
    static ObservationOperator identity(int state_dim);

    int count() const { return static_cast<int>(indices_.size()); }
    int state_dim() const { return state_dim_; }
    const std::vector<int>& indices() const { return indices_; }

    Eigen::VectorXd apply(const Eigen::VectorXd& state) const;

    /// Dense selection matrix (count x state_dim).
    Eigen::MatrixXd matrix() const;

private:
    std::vector<int> indices_;
    int state_dim_ = 0;
};

}  // namespace bilevel

#endif
