#include "bilevel/observation.hpp"

#include <algorithm>
#include <numeric>

#include "bilevel/errors.hpp"

namespace bilevel {

ObservationOperator ObservationOperator::from_points(
    const Mesh& mesh, const std::vector<Eigen::Vector2d>& points) {
    mesh.validate();
    if (points.empty())
        throw ValidationError("ObservationOperator: need at least one point");
    ObservationOperator op;
    op.state_dim_ = mesh.dofs();
    op.indices_.reserve(points.size());
    for (const auto& p : points) {
        if (p[0] < 0.0 || p[0] > 1.0 || (mesh.dimension == 2 && (p[1] < 0.0 || p[1] > 1.0)))
            throw ValidationError("ObservationOperator: point outside the unit domain");
        op.indices_.push_back(mesh.nearest_dof(p));
    }
    return op;
}

ObservationOperator ObservationOperator::random(const Mesh& mesh, int count,
                                                RngStream& rng) {
    mesh.validate();
    int d = mesh.dofs();
    if (count < 1 || count > d)
        throw ValidationError("ObservationOperator: count must be in [1, dofs]");
    // Fisher-Yates prefix for sampling without replacement
    std::vector<int> pool(d);
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < count; ++i) {
        int j = i + static_cast<int>(rng.below(d - i));
        std::swap(pool[i], pool[j]);
    }
    ObservationOperator op;
    op.state_dim_ = d;
    op.indices_.assign(pool.begin(), pool.begin() + count);
    return op;
}

ObservationOperator ObservationOperator::identity(int state_dim) {
    if (state_dim < 1) throw ValidationError("ObservationOperator: empty state");
    ObservationOperator op;
    op.state_dim_ = state_dim;
    op.indices_.resize(state_dim);
    std::iota(op.indices_.begin(), op.indices_.end(), 0);
    return op;
}

Eigen::VectorXd ObservationOperator::apply(const Eigen::VectorXd& state) const {
    if (state.size() != state_dim_)
        throw ValidationError("ObservationOperator: state dimension mismatch");
    Eigen::VectorXd out(count());
    for (int i = 0; i < count(); ++i) out[i] = state[indices_[i]];
    return out;
}

Eigen::MatrixXd ObservationOperator::matrix() const {
    Eigen::MatrixXd sel = Eigen::MatrixXd::Zero(count(), state_dim_);
    for (int i = 0; i < count(); ++i) sel(i, indices_[i]) = 1.0;
    return sel;
}

}  // namespace bilevel
