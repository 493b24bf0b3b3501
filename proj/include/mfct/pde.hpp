#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mfct/banded.hpp"
#include "mfct/errors.hpp"
#include "mfct/fields.hpp"
#include "mfct/grid.hpp"
#include "mfct/measure.hpp"
#include "mfct/parallel.hpp"

namespace mfct {

/// How the finite box stands in for conditions at infinity. Quadratic-growth
/// extrapolation extends ghost values so the discrete second derivative at the
/// boundary matches the adjacent interior stencil.
enum class BoundaryPolicy { QuadraticExtrapolation, HomogeneousNeumann };

/// Coefficients (g, l, l_T) of the generic backward linear equation
///   -du/ds + A u - g . Du = l,  u(T) = l_T.
/// Fields take precedence over callables when both are set.
struct LinearPDECoefficients {
    std::function<double(double, double)> drift;  // g(s, x)
    std::function<double(double, double)> source; // l(s, x)
    std::function<double(double)> terminal;       // l_T(x)
    const VectorField* drift_field = nullptr;
    const ScalarField* source_field = nullptr;
};

namespace pde_detail {

constexpr double kDriftCourant = 0.9;
constexpr double kGrowthCap = 1e6;

inline int substeps_for(double dtau, double dx, double g_max) {
    if (!(g_max > 0.0)) return 1;
    const double courant = dtau * g_max / dx;
    return std::max(1, static_cast<int>(std::ceil(courant / kDriftCourant)));
}

/// Implicit-diffusion system D = I - dtau (a/2) L with the boundary policy
/// folded into the first and last rows.
inline Banded5 assemble_implicit(const Grid1D& grid, double a, BoundaryPolicy bc, double dtau) {
    const int n = grid.n_points;
    const double nu = 0.5 * a * dtau / (grid.dx() * grid.dx());
    Banded5 D(n);
    for (int j = 1; j + 1 < n; ++j) {
        D.at(j, -1) = -nu;
        D.at(j, 0) = 1.0 + 2.0 * nu;
        D.at(j, 1) = -nu;
    }
    if (bc == BoundaryPolicy::QuadraticExtrapolation) {
        // ghost = 3u_0 - 3u_1 + u_2 makes the boundary second difference equal
        // the interior one; same one node in from the right.
        D.at(0, 0) = 1.0 - nu;
        D.at(0, 1) = 2.0 * nu;
        D.at(0, 2) = -nu;
        D.at(n - 1, 0) = 1.0 - nu;
        D.at(n - 1, -1) = 2.0 * nu;
        D.at(n - 1, -2) = -nu;
    } else {
        D.at(0, 0) = 1.0 + 2.0 * nu;
        D.at(0, 1) = -2.0 * nu;
        D.at(n - 1, 0) = 1.0 + 2.0 * nu;
        D.at(n - 1, -1) = -2.0 * nu;
    }
    return D;
}

/// Explicit advection operator E = I + dtau g . D_x, hybrid central/upwind.
/// A row uses the second-order central difference whenever the combined step
/// D^{-1} E provably stays nonnegative, i.e. the advection weight
/// dtau |g| / (2 dx) does not exceed the off-diagonal decay ratio r of the
/// implicit-diffusion inverse (r solves nu r^2 - (1+2nu) r + nu = 0). As
/// dtau -> 0 this reduces to the cell Peclet criterion |g| dx <= a; rows that
/// fail it fall back to first-order upwinding.
inline Banded5 assemble_explicit(const Grid1D& grid, double a, BoundaryPolicy bc,
                                 const std::vector<double>& g, double dtau) {
    const int n = grid.n_points;
    const double dx = grid.dx();
    const double nu = 0.5 * a * dtau / (dx * dx);
    const double decay =
        nu > 0.0 ? ((1.0 + 2.0 * nu) - std::sqrt(1.0 + 4.0 * nu)) / (2.0 * nu) : 0.0;
    Banded5 E(n);
    for (int j = 0; j < n; ++j) E.at(j, 0) = 1.0;

    // Ghost-node expansion coefficients over {u_0, u_1, u_2} (left side).
    double gh0, gh1, gh2;
    if (bc == BoundaryPolicy::QuadraticExtrapolation) {
        gh0 = 3.0;
        gh1 = -3.0;
        gh2 = 1.0;
    } else {
        gh0 = 0.0;
        gh1 = 1.0;
        gh2 = 0.0;
    }

    for (int j = 0; j < n; ++j) {
        const double gj = g[j];
        if (gj == 0.0) continue;
        const double cc = dtau * gj / (2.0 * dx); // central weight
        const double cu = dtau * gj / dx;         // upwind weight
        const bool central = std::abs(cc) <= decay;

        auto add3 = [&](double w, int base, double c0, double c1, double c2) {
            // w * (c0 u_{base} + c1 u_{base+1} + c2 u_{base+2})
            if (c0 != 0.0) E.add(j, base, w * c0);
            if (c1 != 0.0) E.add(j, base + 1, w * c1);
            if (c2 != 0.0) E.add(j, base + 2, w * c2);
        };

        if (j >= 1 && j + 1 < n) {
            if (central) {
                E.add(j, j + 1, cc);
                E.add(j, j - 1, -cc);
            } else if (gj > 0.0) {
                E.add(j, j + 1, cu);
                E.add(j, j, -cu);
            } else {
                E.add(j, j, cu);
                E.add(j, j - 1, -cu);
            }
        } else if (j == 0) {
            if (central) {
                // (u_1 - ghost) / (2 dx)
                E.add(j, 1, cc);
                add3(-cc, 0, gh0, gh1, gh2);
            } else if (gj > 0.0) {
                E.add(j, 1, cu);
                E.add(j, 0, -cu);
            } else {
                E.add(j, 0, cu);
                add3(-cu, 0, gh0, gh1, gh2);
            }
        } else { // j == n-1, mirrored
            if (central) {
                add3(cc, n - 3, gh2, gh1, gh0);
                E.add(j, n - 2, -cc);
            } else if (gj > 0.0) {
                add3(cu, n - 3, gh2, gh1, gh0);
                E.add(j, n - 1, -cu);
            } else {
                E.add(j, n - 1, cu);
                E.add(j, n - 2, -cu);
            }
        }
    }
    return E;
}

/// One mesh step of the backward IMEX scheme, rebuilt per time node so the
/// drift can be time dependent. step() marches a value slice toward t;
/// step_forward_adjoint() applies the exact transpose to a weighted density.
class Stepper {
public:
    Stepper(const Grid1D& grid, double a, BoundaryPolicy bc) : grid_(grid), a_(a), bc_(bc) {}

    void prepare(const std::vector<double>& g_nodes, double dtau) {
        double gmax = 0.0;
        for (double g : g_nodes) {
            if (!std::isfinite(g)) throw GrowthViolation("drift is not finite");
            gmax = std::max(gmax, std::abs(g));
        }
        n_sub_ = substeps_for(dtau, grid_.dx(), gmax);
        dtau_sub_ = dtau / n_sub_;
        E_ = assemble_explicit(grid_, a_, bc_, g_nodes, dtau_sub_);
        D_ = assemble_implicit(grid_, a_, bc_, dtau_sub_);
        Et_ = E_.transpose();
        Dt_ = D_.transpose();
    }

    void step(std::vector<double>& u, const std::vector<double>* source) const {
        for (int k = 0; k < n_sub_; ++k) {
            std::vector<double> rhs = band_matvec(E_, u);
            if (source)
                for (int j = 0; j < grid_.n_points; ++j) rhs[j] += dtau_sub_ * (*source)[j];
            u = band_solve(D_, std::move(rhs));
        }
    }

    /// Acts on v = C m (density times trapezoid cell widths).
    void step_forward_adjoint(std::vector<double>& v) const {
        for (int k = 0; k < n_sub_; ++k) {
            v = band_solve(Dt_, std::move(v));
            v = band_matvec(Et_, v);
        }
    }

    int substeps() const { return n_sub_; }

private:
    Grid1D grid_;
    double a_;
    BoundaryPolicy bc_;
    Banded5 E_, D_, Et_, Dt_;
    int n_sub_ = 1;
    double dtau_sub_ = 0.0;
};

inline std::vector<double> drift_nodes(const LinearPDECoefficients& c, const TimeMesh& mesh,
                                       const Grid1D& grid, int i) {
    std::vector<double> g(grid.n_points);
    if (c.drift_field) {
        if (!(c.drift_field->mesh == mesh) || !(c.drift_field->grid == grid))
            throw MeshMismatch("solve_backward_linear: drift field on a different mesh/grid");
        const double* p = c.drift_field->slice(i);
        std::copy(p, p + grid.n_points, g.begin());
    } else if (c.drift) {
        const double s = mesh.time(i);
        for (int j = 0; j < grid.n_points; ++j) g[j] = c.drift(s, grid.x(j));
    } else {
        std::fill(g.begin(), g.end(), 0.0);
    }
    return g;
}

inline std::vector<double> source_nodes(const LinearPDECoefficients& c, const TimeMesh& mesh,
                                        const Grid1D& grid, int i) {
    std::vector<double> l(grid.n_points, 0.0);
    if (c.source_field) {
        if (!(c.source_field->mesh == mesh) || !(c.source_field->grid == grid))
            throw MeshMismatch("solve_backward_linear: source field on a different mesh/grid");
        const double* p = c.source_field->slice(i);
        std::copy(p, p + grid.n_points, l.begin());
    } else if (c.source) {
        const double s = mesh.time(i);
        for (int j = 0; j < grid.n_points; ++j) l[j] = c.source(s, grid.x(j));
    }
    return l;
}

/// Sampled growth self-check of (g, l, l_T) against the generic-coefficient
/// bounds; rejects non-finite or absurdly growing data before time stepping.
inline void check_growth(const LinearPDECoefficients& c, const TimeMesh& mesh,
                         const Grid1D& grid) {
    const int si = std::max(1, mesh.n_steps / 8);
    const int sj = std::max(1, grid.n_points / 16);
    for (int i = 0; i <= mesh.n_steps; i += si) {
        const auto g = drift_nodes(c, mesh, grid, i);
        const auto l = source_nodes(c, mesh, grid, i);
        for (int j = 0; j < grid.n_points; j += sj) {
            const double x = grid.x(j);
            if (!std::isfinite(g[j]) || std::abs(g[j]) > kGrowthCap * (1.0 + std::abs(x)))
                throw GrowthViolation("drift violates |g| <= C(1+|x|) at sampled point");
            if (!std::isfinite(l[j]) || std::abs(l[j]) > kGrowthCap * (1.0 + x * x))
                throw GrowthViolation("source violates |l| <= C(1+|x|^2) at sampled point");
        }
    }
    if (c.terminal) {
        for (int j = 0; j < grid.n_points; j += sj) {
            const double x = grid.x(j);
            const double lT = c.terminal(x);
            if (!std::isfinite(lT) || std::abs(lT) > kGrowthCap * (1.0 + x * x))
                throw GrowthViolation("terminal violates |l_T| <= C(1+|x|^2) at sampled point");
        }
    }
}

} // namespace pde_detail

/// Backward linear advection-diffusion solve of
///   -du/ds + A u - g . Du = l,  u(T, x) = l_T(x)
/// on the full mesh, implicit in the diffusion, explicit hybrid drift and
/// source, sub-stepped to keep the drift Courant number below 0.9.
inline ScalarField solve_backward_linear(const LinearPDECoefficients& coeffs, double sigma,
                                         const TimeMesh& mesh, const Grid1D& grid,
                                         BoundaryPolicy bc) {
    pde_detail::check_growth(coeffs, mesh, grid);
    const double a = sigma * sigma;
    ScalarField u(mesh, grid);

    std::vector<double> slice(grid.n_points);
    for (int j = 0; j < grid.n_points; ++j)
        slice[j] = coeffs.terminal ? coeffs.terminal(grid.x(j)) : 0.0;
    u.set_slice(mesh.n_steps, slice);

    pde_detail::Stepper stepper(grid, a, bc);
    for (int i = mesh.n_steps - 1; i >= 0; --i) {
        const auto g = pde_detail::drift_nodes(coeffs, mesh, grid, i);
        const auto l = pde_detail::source_nodes(coeffs, mesh, grid, i);
        stepper.prepare(g, mesh.dt());
        stepper.step(slice, &l);
        for (double v : slice)
            if (!std::isfinite(v))
                throw BlowUp("solve_backward_linear: non-finite value at s = " +
                             std::to_string(mesh.time(i)));
        u.set_slice(i, slice);
    }
    return u;
}

/// Forward Fokker-Planck flow of the density under the given drift field,
/// constructed as the exact discrete adjoint of the backward stepper. The
/// scheme preserves total mass to rounding; negative round-off values are
/// clipped and accounted as leak.
inline MeasureFlow solve_forward_fp(const VectorField& drift_field, double sigma,
                                    const TimeMesh& mesh, const Grid1D& grid,
                                    const GridDensity& m0, bool renormalize = false) {
    if (!(drift_field.mesh == mesh) || !(drift_field.grid == grid))
        throw MeshMismatch("solve_forward_fp: drift field on a different mesh/grid");
    if (!(m0.grid == grid)) throw MeshMismatch("solve_forward_fp: m0 on a different grid");
    if (!m0.is_normalized(1e-9))
        throw SolverError("solve_forward_fp: m0 is not normalized");
    if (!drift_field.all_finite())
        throw GrowthViolation("solve_forward_fp: drift field not finite");

    const double a = sigma * sigma;
    const int n = grid.n_points;

    MeasureFlow flow;
    flow.mesh = mesh;
    flow.representation = MeasureFlow::Representation::GridDensities;
    flow.grid_slices.reserve(mesh.n_nodes());
    flow.grid_slices.push_back(m0);

    std::vector<double> weights(n);
    for (int j = 0; j < n; ++j) weights[j] = grid.weight(j);

    // The density flow always runs the no-flux (Neumann) form: its transpose
    // is an M-matrix, so the adjoint stepping stays stable and nonnegative,
    // and total mass is conserved exactly. The extrapolation policy's adjoint
    // amplifies the boundary nodes and is unusable for densities.
    std::vector<double> m = m0.values;
    pde_detail::Stepper stepper(grid, a, BoundaryPolicy::HomogeneousNeumann);
    for (int i = 0; i < mesh.n_steps; ++i) {
        std::vector<double> g(drift_field.slice(i), drift_field.slice(i) + n);
        stepper.prepare(g, mesh.dt());

        std::vector<double> v(n);
        for (int j = 0; j < n; ++j) v[j] = weights[j] * m[j];
        stepper.step_forward_adjoint(v);
        for (int j = 0; j < n; ++j) m[j] = v[j] / weights[j];

        for (int j = 0; j < n; ++j) {
            if (m[j] < 0.0) {
                flow.cumulative_leak += -m[j] * weights[j];
                m[j] = 0.0;
            }
        }
        if (flow.cumulative_leak > 1e-6)
            throw MassLeak("solve_forward_fp: cumulative leak " +
                           std::to_string(flow.cumulative_leak) + " exceeds 1e-6");

        GridDensity slice(grid, m);
        if (renormalize) {
            slice.normalize();
            m = slice.values;
        }
        flow.max_boundary_density = std::max(flow.max_boundary_density, slice.boundary_density());
        flow.grid_slices.push_back(std::move(slice));
    }
    return flow;
}

/// Green function table G[tau][z][zeta] for a fixed terminal index: one
/// backward solve per terminal node with discrete-delta data 1/dx.
struct GreenTable {
    TimeMesh mesh;
    Grid1D grid;
    int s_index = 0;
    std::vector<double> values; // (s_index+1) x n x n, tau major

    double G(int tau, int z, int zeta) const {
        const int n = grid.n_points;
        return values[(static_cast<size_t>(tau) * n + z) * n + zeta];
    }
    double& G(int tau, int z, int zeta) {
        const int n = grid.n_points;
        return values[(static_cast<size_t>(tau) * n + z) * n + zeta];
    }
};

inline GreenTable tabulate_green(const VectorField& drift_field, double sigma,
                                 const TimeMesh& mesh, const Grid1D& grid, int s_index,
                                 BoundaryPolicy bc = BoundaryPolicy::QuadraticExtrapolation,
                                 int workers = 1) {
    if (s_index < 0 || s_index > mesh.n_steps)
        throw MeshMismatch("tabulate_green: s_index outside the mesh");
    if (!(drift_field.mesh == mesh) || !(drift_field.grid == grid))
        throw MeshMismatch("tabulate_green: drift field on a different mesh/grid");
    const int n = grid.n_points;
    const size_t total = static_cast<size_t>(s_index + 1) * n * n;
    if (total > 300u * 1000u * 1000u)
        throw ConfigError("tabulate_green: table would exceed the memory guard");

    GreenTable table;
    table.mesh = mesh;
    table.grid = grid;
    table.s_index = s_index;
    table.values.assign(total, 0.0);

    const double a = sigma * sigma;
    // columns[zeta] holds the running slice for terminal node zeta. The
    // discrete delta carries 1/weight(zeta) so it is the exact adjoint of
    // nodal evaluation under trapezoid quadrature; that is 1/dx at interior
    // nodes and 2/dx on the two boundary half-cells, and it makes constant
    // test functions propagate to 1 exactly.
    std::vector<std::vector<double>> columns(n, std::vector<double>(n, 0.0));
    for (int zeta = 0; zeta < n; ++zeta) {
        columns[zeta][zeta] = 1.0 / grid.weight(zeta);
        table.G(s_index, zeta, zeta) = 1.0 / grid.weight(zeta);
    }

    pde_detail::Stepper stepper(grid, a, bc);
    for (int i = s_index - 1; i >= 0; --i) {
        std::vector<double> g(drift_field.slice(i), drift_field.slice(i) + n);
        stepper.prepare(g, mesh.dt());
        parallel_for(n, workers, [&](int zeta) {
            stepper.step(columns[zeta], nullptr);
            for (int z = 0; z < n; ++z) table.G(i, z, zeta) = columns[zeta][z];
        });
    }
    return table;
}

} // namespace mfct
