#include "bilevel/forward.hpp"

#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>

#include "bilevel/errors.hpp"

namespace bilevel {

namespace {

constexpr double kLogPermClamp = 40.0;

double harmonic_mean(double a, double b) { return 2.0 * a * b / (a + b); }

/// Solves -div(a grad p) = rhs on the interior dofs of a Dirichlet mesh,
/// with a = exp(clamped log_perm) given on the full grid.
Eigen::VectorXd diffusion_solve(const Mesh& mesh, const Eigen::VectorXd& coeff,
                                const Eigen::VectorXd& rhs) {
    mesh.validate();
    if (mesh.boundary != Boundary::Dirichlet)
        throw ValidationError("diffusion_solve: Dirichlet mesh required");
    int N = mesh.nodes;
    int n = N - 2;  // interior per axis
    double h = mesh.spacing();
    double w = 1.0 / (h * h);

    using Trip = Eigen::Triplet<double>;
    std::vector<Trip> trips;
    Eigen::SparseMatrix<double> sys(mesh.dofs(), mesh.dofs());

    if (mesh.dimension == 1) {
        for (int i = 0; i < n; ++i) {
            int node = i + 1;
            double aW = harmonic_mean(coeff[node - 1], coeff[node]);
            double aE = harmonic_mean(coeff[node], coeff[node + 1]);
            trips.emplace_back(i, i, (aW + aE) * w);
            if (i > 0) trips.emplace_back(i, i - 1, -aW * w);
            if (i + 1 < n) trips.emplace_back(i, i + 1, -aE * w);
        }
    } else {
        auto full = [N](int ix, int iy) { return ix * N + iy; };
        auto dof = [n](int ix, int iy) { return (ix - 1) * n + (iy - 1); };
        for (int ix = 1; ix <= n; ++ix)
            for (int iy = 1; iy <= n; ++iy) {
                int row = dof(ix, iy);
                double ac = coeff[full(ix, iy)];
                double aW = harmonic_mean(coeff[full(ix - 1, iy)], ac);
                double aE = harmonic_mean(coeff[full(ix + 1, iy)], ac);
                double aS = harmonic_mean(coeff[full(ix, iy - 1)], ac);
                double aN = harmonic_mean(coeff[full(ix, iy + 1)], ac);
                trips.emplace_back(row, row, (aW + aE + aS + aN) * w);
                if (ix > 1) trips.emplace_back(row, dof(ix - 1, iy), -aW * w);
                if (ix < n) trips.emplace_back(row, dof(ix + 1, iy), -aE * w);
                if (iy > 1) trips.emplace_back(row, dof(ix, iy - 1), -aS * w);
                if (iy < n) trips.emplace_back(row, dof(ix, iy + 1), -aN * w);
            }
    }
    sys.setFromTriplets(trips.begin(), trips.end());
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(sys);
    if (solver.info() != Eigen::Success)
        throw NumericalError("diffusion_solve: factorization failed (singular system)");
    Eigen::VectorXd p = solver.solve(rhs);
    if (!p.allFinite())
        throw NumericalError("diffusion_solve: non-finite solution");
    return p;
}

}  // namespace

Eigen::VectorXd laplace_forward(const Mesh& mesh, const Eigen::VectorXd& u) {
    if (u.size() != mesh.dofs())
        throw ValidationError("laplace_forward: source dimension mismatch");
    int full = mesh.dimension == 1 ? mesh.nodes : mesh.nodes * mesh.nodes;
    return diffusion_solve(mesh, Eigen::VectorXd::Ones(full), u);
}

Eigen::VectorXd to_full_grid(const Mesh& mesh, const Eigen::VectorXd& dof_values) {
    if (dof_values.size() != mesh.dofs())
        throw ValidationError("to_full_grid: dof dimension mismatch");
    if (mesh.boundary == Boundary::Neumann) return dof_values;
    int N = mesh.nodes, n = N - 2;
    if (mesh.dimension == 1) {
        Eigen::VectorXd full = Eigen::VectorXd::Zero(N);
        full.segment(1, n) = dof_values;
        return full;
    }
    Eigen::VectorXd full = Eigen::VectorXd::Zero(N * N);
    for (int ix = 1; ix <= n; ++ix)
        for (int iy = 1; iy <= n; ++iy)
            full[ix * N + iy] = dof_values[(ix - 1) * n + (iy - 1)];
    return full;
}

Eigen::VectorXd darcy_forward(const Mesh& mesh, const Eigen::VectorXd& log_perm,
                              double source, DarcyStats* stats) {
    return darcy_forward(mesh, log_perm,
                         Eigen::VectorXd::Constant(mesh.dofs(), source), stats);
}

Eigen::VectorXd darcy_forward(const Mesh& mesh, const Eigen::VectorXd& log_perm,
                              const Eigen::VectorXd& source_field,
                              DarcyStats* stats) {
    int full = mesh.dimension == 1 ? mesh.nodes : mesh.nodes * mesh.nodes;
    if (log_perm.size() != full)
        throw ValidationError("darcy_forward: log-permeability must live on the full grid");
    Eigen::VectorXd coeff(full);
    int clamped = 0;
    for (int i = 0; i < full; ++i) {
        double v = log_perm[i];
        if (std::isnan(v))
            throw NumericalError("darcy_forward: NaN log-permeability at node " +
                                 std::to_string(i));
        if (std::abs(v) > kLogPermClamp) {
            v = std::copysign(kLogPermClamp, v);
            ++clamped;
        }
        coeff[i] = std::exp(v);
    }
    if (stats) stats->clamped_nodes += clamped;
    if (source_field.size() != mesh.dofs())
        throw ValidationError("darcy_forward: source field must live on the dofs");
    return diffusion_solve(mesh, coeff, source_field);
}

Eigen::VectorXd eikonal_forward(const Mesh& grid, const Eigen::VectorXd& slowness,
                                int source_node, std::vector<int>* acceptance_order) {
    grid.validate();
    int N = grid.nodes;
    int total = grid.dimension == 1 ? N : N * N;
    if (slowness.size() != total)
        throw ValidationError("eikonal_forward: slowness must live on the full grid");
    if ((slowness.array() <= 0.0).any())
        throw ValidationError("eikonal_forward: slowness must be strictly positive");
    if (source_node < 0 || source_node >= total)
        throw ValidationError("eikonal_forward: source node out of range");

    double h = grid.spacing();
    const double inf = std::numeric_limits<double>::infinity();
    Eigen::VectorXd T = Eigen::VectorXd::Constant(total, inf);
    std::vector<char> accepted(total, 0);

    using Entry = std::pair<double, int>;
    std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
    T[source_node] = 0.0;
    heap.emplace(0.0, source_node);

    // Seed a small box around the source with straight-ray values; the upwind
    // stencil is least accurate where the wavefront curvature is highest, so
    // exact local initialization removes the dominant point-source error.
    {
        auto seed = [&](int idx, double dist) {
            if (idx == source_node) return;
            double t = 0.5 * (slowness[source_node] + slowness[idx]) * dist;
            if (t < T[idx]) {
                T[idx] = t;
                heap.emplace(t, idx);
            }
        };
        if (grid.dimension == 1) {
            for (int dx = -2; dx <= 2; ++dx) {
                int ix = source_node + dx;
                if (ix >= 0 && ix < N) seed(ix, std::abs(dx) * h);
            }
        } else {
            int sx = source_node / N, sy = source_node % N;
            for (int dx = -2; dx <= 2; ++dx)
                for (int dy = -2; dy <= 2; ++dy) {
                    int ix = sx + dx, iy = sy + dy;
                    if (ix < 0 || ix >= N || iy < 0 || iy >= N) continue;
                    seed(ix * N + iy, std::hypot(dx, dy) * h);
                }
        }
    }

    auto neighbors = [&](int idx, auto&& visit) {
        if (grid.dimension == 1) {
            if (idx > 0) visit(idx - 1, 0);
            if (idx + 1 < N) visit(idx + 1, 0);
        } else {
            int ix = idx / N, iy = idx % N;
            if (ix > 0) visit(idx - N, 0);
            if (ix + 1 < N) visit(idx + N, 0);
            if (iy > 0) visit(idx - 1, 1);
            if (iy + 1 < N) visit(idx + 1, 1);
        }
    };

    // Godunov upwind update from accepted neighbor values per axis
    auto update = [&](int idx) {
        double tx = inf, ty = inf;
        neighbors(idx, [&](int nb, int axis) {
            if (!accepted[nb]) return;
            if (axis == 0) tx = std::min(tx, T[nb]);
            else ty = std::min(ty, T[nb]);
        });
        double sh = slowness[idx] * h;
        double a = std::min(tx, ty), b = std::max(tx, ty);
        if (b == inf || b - a >= sh) return a + sh;
        double sum = tx + ty;
        double disc = 2.0 * sh * sh - (tx - ty) * (tx - ty);
        return 0.5 * (sum + std::sqrt(disc));
    };

    while (!heap.empty()) {
        auto [t, idx] = heap.top();
        heap.pop();
        if (accepted[idx]) continue;
        accepted[idx] = 1;
        if (acceptance_order) acceptance_order->push_back(idx);
        neighbors(idx, [&](int nb, int) {
            if (accepted[nb]) return;
            double cand = update(nb);
            if (cand < T[nb]) {
                T[nb] = cand;
                heap.emplace(cand, nb);
            }
        });
    }
    return T;
}

SignalPath signal_sample(double rate, double horizon, int grid_size,
                         RngStream& rng) {
    if (rate < 0.0) throw ValidationError("signal_sample: rate must be nonnegative");
    if (grid_size < 1) throw ValidationError("signal_sample: grid_size must be >= 1");
    SignalPath path;
    int jumps = rate > 0.0 ? rng.poisson(rate * horizon) : 0;
    path.jump_times.resize(jumps);
    path.jump_sizes.resize(jumps);
    for (int j = 0; j < jumps; ++j) path.jump_times[j] = horizon * rng.uniform();
    for (int j = 0; j < jumps; ++j) path.jump_sizes[j] = rng.normal();
    std::vector<int> order(jumps);
    for (int j = 0; j < jumps; ++j) order[j] = j;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return path.jump_times[a] < path.jump_times[b];
    });

    path.values.resize(grid_size);
    double level = 0.0;
    std::size_t next = 0;
    for (int i = 0; i < grid_size; ++i) {
        double t = horizon * (i + 1) / grid_size;
        while (next < order.size() && path.jump_times[order[next]] <= t)
            level += path.jump_sizes[order[next++]];
        path.values[i] = level;
    }
    return path;
}

// --- ForwardProblem --------------------------------------------------------

namespace {

Eigen::MatrixXd linear_normal_matrix(const LinearModel& model, double gamma) {
    if (gamma <= 0.0) return {};
    return model.A.transpose() * model.A / (gamma * gamma);
}

}  // namespace

ForwardProblem::ForwardProblem(LinearModel model, ObservationOperator obs,
                               double gamma)
    : model_(std::move(model)), observation_(std::move(obs)), gamma_(gamma) {
    if (gamma < 0.0) throw ValidationError("ForwardProblem: gamma must be >= 0");
    normal_matrix_ = linear_normal_matrix(linear(), gamma);
}

ForwardProblem::ForwardProblem(DarcyModel model, ObservationOperator obs,
                               double gamma)
    : model_(std::move(model)), observation_(std::move(obs)), gamma_(gamma) {
    if (gamma < 0.0) throw ValidationError("ForwardProblem: gamma must be >= 0");
}

ForwardProblem::ForwardProblem(EikonalModel model, ObservationOperator obs,
                               double gamma)
    : model_(std::move(model)), observation_(std::move(obs)), gamma_(gamma) {
    if (gamma < 0.0) throw ValidationError("ForwardProblem: gamma must be >= 0");
}

ForwardProblem::ForwardProblem(SignalModel model, double gamma)
    : model_(std::move(model)), gamma_(gamma) {
    if (gamma < 0.0) throw ValidationError("ForwardProblem: gamma must be >= 0");
    observation_ = ObservationOperator::identity(
        static_cast<int>(std::get<SignalModel>(model_).L.rows()));
}

int ForwardProblem::input_dim() const {
    if (is_linear()) return static_cast<int>(linear().A.cols());
    if (is_signal()) return static_cast<int>(signal().L.rows());
    if (std::holds_alternative<DarcyModel>(model_))
        return static_cast<int>(darcy().basis.cols());
    return static_cast<int>(eikonal().basis.cols());
}

Eigen::VectorXd ForwardProblem::predict(const Eigen::VectorXd& input) const {
    if (input.size() != input_dim())
        throw ValidationError("ForwardProblem::predict: input dimension mismatch");
    if (is_linear()) return linear().A * input;
    if (is_signal()) return input;  // identity observation of the signal itself
    if (std::holds_alternative<DarcyModel>(model_)) {
        const auto& m = darcy();
        return observation_.apply(
            darcy_forward(m.mesh, m.basis * input, m.source));
    }
    const auto& m = eikonal();
    // Clamp the log-slowness field like the Darcy coefficient: extreme
    // values underflow exp to zero, which the eikonal solver rejects.
    Eigen::VectorXd log_s = (m.basis * input)
                                .array()
                                .min(kLogPermClamp)
                                .max(-kLogPermClamp)
                                .matrix();
    return observation_.apply(
        eikonal_forward(m.grid, log_s.array().exp().matrix(), m.source_node));
}

Eigen::VectorXd ForwardProblem::observe(const Eigen::VectorXd& state,
                                        RngStream& rng) const {
    Eigen::VectorXd y = observation_.apply(state);
    if (gamma_ > 0.0)
        for (int i = 0; i < y.size(); ++i) y[i] += gamma_ * rng.normal();
    return y;
}

const Eigen::MatrixXd& ForwardProblem::normal_matrix() const {
    if (!is_linear() || normal_matrix_.size() == 0)
        throw NumericalError("ForwardProblem: normal matrix unavailable "
                             "(nonlinear kind or gamma = 0)");
    return normal_matrix_;
}

Eigen::MatrixXd build_linear_A(const Mesh& mesh, const ObservationOperator& obs) {
    mesh.validate();
    if (mesh.boundary != Boundary::Dirichlet)
        throw ValidationError("build_linear_A: Dirichlet mesh required");
    if (obs.state_dim() != mesh.dofs())
        throw ValidationError("build_linear_A: observation built for another mesh");
    // A^T = (-Delta_h)^{-1} O^T by symmetry of the Laplacian
    Eigen::MatrixXd lap = assemble_laplacian(mesh);
    Eigen::LLT<Eigen::MatrixXd> llt(lap);
    if (llt.info() != Eigen::Success)
        throw NumericalError("build_linear_A: Laplacian factorization failed");
    Eigen::MatrixXd A(obs.count(), mesh.dofs());
    Eigen::VectorXd e = Eigen::VectorXd::Zero(mesh.dofs());
    for (int i = 0; i < obs.count(); ++i) {
        e[obs.indices()[i]] = 1.0;
        A.row(i) = llt.solve(e).transpose();
        e[obs.indices()[i]] = 0.0;
    }
    return A;
}

}  // namespace bilevel
