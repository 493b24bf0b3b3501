#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mfct/errors.hpp"
#include "mfct/fields.hpp"
#include "mfct/majorant.hpp"
#include "mfct/measure.hpp"
#include "mfct/model.hpp"
#include "mfct/pde.hpp"

namespace mfct {

/// Gradient of a scalar field: centered differences at interior nodes,
/// second-order one-sided at the boundary nodes (exact on quadratics).
inline VectorField gradient(const ScalarField& V) {
    if (!V.all_finite()) throw BlowUp("gradient: field contains non-finite values");
    VectorField g(V.mesh, V.grid);
    for (int i = 0; i < V.mesh.n_nodes(); ++i) {
        const auto d = gradient_slice(V.grid, V.slice(i));
        g.set_slice(i, d);
    }
    return g;
}

/// One backward solve of the HJB equation with the coupling measure flow
/// frozen: V, its gradient, the feedback policy and the weighted-seminorm
/// diagnostics.
struct HJBSolution {
    ScalarField V;
    VectorField DV;
    VectorField policy;
    double max_abs_V = 0.0;
    double max_abs_DV = 0.0;
    // pi_gamma-weighted squared space-time integrals (gamma+1 for dDV/ds)
    double wnorm_dV_ds = 0.0;
    double wnorm_D2V = 0.0;
    double wnorm_dDV_ds = 0.0;
};

/// policy(s,x) = vhat(s, x, DV(s,x)).
inline VectorField extract_policy(const ModelSpec& model, const VectorField& DV) {
    VectorField u(DV.mesh, DV.grid);
    for (int i = 0; i < DV.mesh.n_nodes(); ++i) {
        const double s = DV.mesh.time(i);
        for (int j = 0; j < DV.grid.n_points; ++j) {
            const double v = model.minimizer(s, DV.grid.x(j), DV.at(i, j));
            if (!std::isfinite(v))
                throw MinimizerDomain("extract_policy: vhat non-finite at s=" + std::to_string(s) +
                                      ", x=" + std::to_string(DV.grid.x(j)));
            u.at(i, j) = v;
        }
    }
    return u;
}

/// Derived fields and diagnostics for a value field V: its gradient (with the
/// analytic terminal derivative), the feedback policy, and the weighted
/// seminorms. Used by solve_hjb and by the damped fixed-point iterates.
inline HJBSolution assemble_solution(const ModelSpec& model, const MeasureFlow& flow,
                                     ScalarField V) {
    const TimeMesh mesh = V.mesh;
    const Grid1D grid = V.grid;
    const int n = grid.n_points;

    HJBSolution sol;
    sol.V = std::move(V);
    sol.DV = gradient(sol.V);
    {
        const MeasureRef mT = slice_ref(flow, mesh.n_steps);
        for (int j = 0; j < n; ++j)
            sol.DV.at(mesh.n_steps, j) =
                model.terminal_dh(grid.x(j)) + model.mf_terminal.ddnu_dx(mT, grid.x(j));
    }
    sol.policy = extract_policy(model, sol.DV);
    sol.max_abs_V = sol.V.max_abs();
    sol.max_abs_DV = sol.DV.max_abs();

    const double gamma = model.constants.gamma;
    const WeightedNorm wg(gamma, grid), wg1(gamma + 1.0, grid);
    const double dt = mesh.dt();
    for (int i = 0; i < mesh.n_steps; ++i) {
        for (int j = 0; j < n; ++j) {
            const double dvds = (sol.V.at(i + 1, j) - sol.V.at(i, j)) / dt;
            const double ddvds = (sol.DV.at(i + 1, j) - sol.DV.at(i, j)) / dt;
            sol.wnorm_dV_ds += dt * grid.weight(j) * wg.values[j] * dvds * dvds;
            sol.wnorm_dDV_ds += dt * grid.weight(j) * wg1.values[j] * ddvds * ddvds;
        }
    }
    for (int i = 0; i <= mesh.n_steps; ++i) {
        const auto d2 = second_diff_slice(grid, sol.V.slice(i));
        const double wt = (i == 0 || i == mesh.n_steps) ? 0.5 * dt : dt;
        for (int j = 0; j < n; ++j)
            sol.wnorm_D2V += wt * grid.weight(j) * wg.values[j] * d2[j] * d2[j];
    }
    return sol;
}

namespace hjb_detail {

/// Ghost value past the left (side = -1) or right (side = +1) boundary.
inline double ghost(const std::vector<double>& u, int side, BoundaryPolicy bc) {
    const int n = static_cast<int>(u.size());
    if (bc == BoundaryPolicy::HomogeneousNeumann)
        return side < 0 ? u[1] : u[n - 2];
    return side < 0 ? 3.0 * u[0] - 3.0 * u[1] + u[2] : 3.0 * u[n - 1] - 3.0 * u[n - 2] + u[n - 3];
}

inline std::vector<double> central_gradient(const std::vector<double>& u, double dx,
                                            BoundaryPolicy bc) {
    const int n = static_cast<int>(u.size());
    std::vector<double> p(n);
    for (int j = 1; j + 1 < n; ++j) p[j] = (u[j + 1] - u[j - 1]) / (2.0 * dx);
    p[0] = (u[1] - ghost(u, -1, bc)) / (2.0 * dx);
    p[n - 1] = (ghost(u, +1, bc) - u[n - 2]) / (2.0 * dx);
    return p;
}

inline std::vector<double> second_difference(const std::vector<double>& u, double dx,
                                             BoundaryPolicy bc) {
    const int n = static_cast<int>(u.size());
    const double dx2 = dx * dx;
    std::vector<double> d(n);
    for (int j = 1; j + 1 < n; ++j) d[j] = (u[j + 1] - 2.0 * u[j] + u[j - 1]) / dx2;
    d[0] = (u[1] - 2.0 * u[0] + ghost(u, -1, bc)) / dx2;
    d[n - 1] = (ghost(u, +1, bc) - 2.0 * u[n - 1] + u[n - 2]) / dx2;
    return d;
}

} // namespace hjb_detail

/// Backward IMEX sweep for
///   -dV/ds + A V = H(s, x, DV) + dF/dnu(m_s)(x),
///   V(T,x) = h(x) + dF_T/dnu(m_T)(x),
/// with implicit diffusion and explicit Hamiltonian. The gradient inside H is
/// the central difference; a local Lax-Friedrichs viscosity tops up exactly
/// the amount of dissipation the implicit diffusion cannot cover, so the step
/// stays monotone without losing second order where diffusion dominates.
/// Optional blow-up gate: abort when |V| exceeds 10x the supplied majorant.
inline HJBSolution solve_hjb(const ModelSpec& model, const MeasureFlow& flow,
                             const TimeMesh& mesh, const Grid1D& grid, BoundaryPolicy bc,
                             const ScalarField* blowup_majorant = nullptr) {
    if (!(flow.mesh == mesh)) throw MeshMismatch("solve_hjb: flow on a different mesh");
    if (flow.n_slices() != mesh.n_nodes())
        throw MeshMismatch("solve_hjb: flow slice count does not match the mesh");
    if (blowup_majorant &&
        (!(blowup_majorant->mesh == mesh) || !(blowup_majorant->grid == grid)))
        throw MeshMismatch("solve_hjb: majorant field on a different mesh/grid");

    const int n = grid.n_points;
    const double dx = grid.dx(), a = model.a1();

    ScalarField V(mesh, grid);

    // Terminal slice, exact at the nodes.
    std::vector<double> u(n);
    {
        const MeasureRef mT = slice_ref(flow, mesh.n_steps);
        for (int j = 0; j < n; ++j)
            u[j] = model.terminal_h(grid.x(j)) + model.mf_terminal.ddnu(mT, grid.x(j));
    }
    V.set_slice(mesh.n_steps, u);

    for (int i = mesh.n_steps - 1; i >= 0; --i) {
        const double s = mesh.time(i);
        const MeasureRef m_i = slice_ref(flow, i);
        std::vector<double> f(n);
        for (int j = 0; j < n; ++j) f[j] = model.mf_running.ddnu(m_i, grid.x(j));

        // Drift CFL from the current gradient decides the substep count.
        {
            const auto p = hjb_detail::central_gradient(u, dx, bc);
            double gmax = 0.0;
            for (int j = 0; j < n; ++j)
                gmax = std::max(gmax, std::abs(model.hamiltonian_dp(s, grid.x(j), p[j])));
            const int n_sub = pde_detail::substeps_for(mesh.dt(), dx, gmax);
            const double dtau = mesh.dt() / n_sub;
            const double nu = 0.5 * a * dtau / (dx * dx);
            const double decay =
                nu > 0.0 ? ((1.0 + 2.0 * nu) - std::sqrt(1.0 + 4.0 * nu)) / (2.0 * nu) : 0.0;
            const double covered = 2.0 * dx * decay / dtau; // |D_p H| the implicit step absorbs
            const Banded5 D = pde_detail::assemble_implicit(grid, a, bc, dtau);

            for (int sub = 0; sub < n_sub; ++sub) {
                const auto grad = hjb_detail::central_gradient(u, dx, bc);
                const auto lap = hjb_detail::second_difference(u, dx, bc);
                std::vector<double> rhs(n);
                for (int j = 0; j < n; ++j) {
                    const double x = grid.x(j);
                    const double hp = model.hamiltonian_dp(s, x, grad[j]);
                    const double theta = std::max(0.0, std::abs(hp) - covered);
                    rhs[j] = u[j] + dtau * (model.hamiltonian(s, x, grad[j]) + f[j] +
                                            0.5 * theta * dx * lap[j]);
                }
                u = band_solve(D, std::move(rhs));
            }
        }

        for (int j = 0; j < n; ++j) {
            if (!std::isfinite(u[j]))
                throw BlowUp("solve_hjb: non-finite value at s=" + std::to_string(s) +
                             ", x=" + std::to_string(grid.x(j)));
            if (blowup_majorant && std::abs(u[j]) > 10.0 * blowup_majorant->at(i, j))
                throw BlowUp("solve_hjb: |V| exceeded 10x the majorant at s=" +
                             std::to_string(s) + ", x=" + std::to_string(grid.x(j)) +
                             " (|V|=" + std::to_string(std::abs(u[j])) + ")");
        }
        V.set_slice(i, u);
    }

    return assemble_solution(model, flow, std::move(V));
}

} // namespace mfct
