#ifndef BILEVEL_MESH_HPP
#define BILEVEL_MESH_HPP

#include <Eigen/Dense>

#include "bilevel/errors.hpp"

namespace bilevel {

enum class Boundary { Dirichlet, Neumann };

/// Uniform grid on the unit interval (1D) or unit square (2D).
///
/// `nodes` counts grid points per axis including the boundary, so the spacing
/// is h = 1/(nodes-1). Degrees of freedom are the interior nodes for Dirichlet
/// conditions and all nodes for Neumann conditions. The discrete inner product
/// is the h^dim-scaled Euclidean product.
struct Mesh {
    int dimension = 1;  // 1 or 2
    int nodes = 2;      // grid points per axis, boundary included
    Boundary boundary = Boundary::Dirichlet;

    double spacing() const { return 1.0 / (nodes - 1); }

    int dofs_per_axis() const {
        return boundary == Boundary::Dirichlet ? nodes - 2 : nodes;
    }

    /// Total degrees of freedom d.
    int dofs() const {
        int per_axis = dofs_per_axis();
        return dimension == 1 ? per_axis : per_axis * per_axis;
    }

    /// Weight of the mesh inner product, h^dim.
    double weight() const {
        double h = spacing();
        return dimension == 1 ? h : h * h;
    }

    /// Coordinate of dof `i` along one axis (1D) or unflattened (2D).
    /// 2D dofs are flattened row-major: i = ix * dofs_per_axis + iy.
    Eigen::Vector2d coordinate(int i) const;

    /// Index of the dof nearest to a point in [0,1]^dim; used by pointwise
    /// observation operators.
    int nearest_dof(const Eigen::Vector2d& x) const;

    void validate() const;
};

/// Negative discrete Laplacian -Delta_h as a dense symmetric matrix on the
/// mesh dofs. SPD for Dirichlet; positive semidefinite with the constant
/// null vector for Neumann. 2D is the Kronecker sum of the 1D stencils.
Eigen::MatrixXd assemble_laplacian(const Mesh& mesh);

}  // namespace bilevel

#endif
