#include "bilevel/mesh.hpp"

#include <cmath>

namespace bilevel {

void Mesh::validate() const {
    if (dimension != 1 && dimension != 2)
        throw ValidationError("Mesh: dimension must be 1 or 2");
    if (nodes < 2)
        throw ValidationError("Mesh: need at least 2 nodes per axis");
    if (dofs() < 1)
        throw ValidationError("Mesh: no interior degrees of freedom");
}

Eigen::Vector2d Mesh::coordinate(int i) const {
    double h = spacing();
    int offset = boundary == Boundary::Dirichlet ? 1 : 0;
    if (dimension == 1) return {(i + offset) * h, 0.0};
    int per_axis = dofs_per_axis();
    int ix = i / per_axis, iy = i % per_axis;
    return {(ix + offset) * h, (iy + offset) * h};
}

int Mesh::nearest_dof(const Eigen::Vector2d& x) const {
    int per_axis = dofs_per_axis();
    int offset = boundary == Boundary::Dirichlet ? 1 : 0;
    auto clamp_axis = [&](double c) {
        int node = static_cast<int>(std::lround(c / spacing())) - offset;
        return std::max(0, std::min(per_axis - 1, node));
    };
    int ix = clamp_axis(x[0]);
    if (dimension == 1) return ix;
    return ix * per_axis + clamp_axis(x[1]);
}

namespace {

Eigen::MatrixXd laplacian_1d(int n, double h, Boundary bc) {
    Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(n, n);
    double w = 1.0 / (h * h);
    for (int i = 0; i < n; ++i) {
        lap(i, i) = 2.0 * w;
        if (i > 0) lap(i, i - 1) = -w;
        if (i + 1 < n) lap(i, i + 1) = -w;
    }
    if (bc == Boundary::Neumann) {
        // one-sided ends keep symmetry and the constant null vector
        lap(0, 0) = w;
        lap(n - 1, n - 1) = w;
    }
    return lap;
}

}  // namespace

Eigen::MatrixXd assemble_laplacian(const Mesh& mesh) {
    mesh.validate();
    int n = mesh.dofs_per_axis();
    Eigen::MatrixXd lap1 = laplacian_1d(n, mesh.spacing(), mesh.boundary);
    if (mesh.dimension == 1) return lap1;
    // Kronecker sum lap1 (x) I + I (x) lap1
    Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(n * n, n * n);
    for (int ix = 0; ix < n; ++ix)
        for (int iy = 0; iy < n; ++iy) {
            int row = ix * n + iy;
            for (int j = 0; j < n; ++j) {
                lap(row, j * n + iy) += lap1(ix, j);
                lap(row, ix * n + j) += lap1(iy, j);
            }
        }
    return lap;
}

}  // namespace bilevel
