#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mfct/errors.hpp"
#include "mfct/fields.hpp"
#include "mfct/fixedpoint.hpp"
#include "mfct/flow.hpp"
#include "mfct/hjb.hpp"
#include "mfct/measure.hpp"
#include "mfct/model.hpp"
#include "mfct/parallel.hpp"
#include "mfct/pde.hpp"
#include "mfct/rng.hpp"

namespace mfct {

/// Value of the control problem along the computed optimal flow:
///   Phi = int_t^T [ int l(s, x, vhat) dm_s + F(m_s) ] ds + int h dm_T + F_T(m_T),
/// by trapezoid time quadrature; phi equals the sum of its recorded parts.
struct ValueRecord {
    double phi = 0.0;
    std::vector<double> running; // integrand per time node
    double terminal = 0.0;
};

inline ValueRecord value_from_solution(const ModelSpec& model, const HJBSolution& sol,
                                       const MeasureFlow& flow) {
    if (!(sol.V.mesh == flow.mesh))
        throw MeshMismatch("value_from_solution: solution and flow mesh differ");
    if (!model.mf_running.value || !model.mf_terminal.value)
        throw Unsupported("value_from_solution: model must supply F(m) and F_T(m) values");
    const TimeMesh& mesh = sol.V.mesh;
    const Grid1D& grid = sol.V.grid;

    ValueRecord rec;
    rec.running.resize(mesh.n_nodes());
    for (int i = 0; i < mesh.n_nodes(); ++i) {
        const double s = mesh.time(i);
        const MeasureRef m = slice_ref(flow, i);
        std::vector<double> policy_slice(sol.policy.slice(i), sol.policy.slice(i) + grid.n_points);
        const double run_l = m.integrate([&](double x) {
            const double v = lerp_on_grid(grid, policy_slice, x);
            return model.running_cost(s, x, v);
        });
        rec.running[i] = run_l + model.mf_running.value(m);
    }
    {
        const MeasureRef mT = slice_ref(flow, mesh.n_steps);
        rec.terminal = mT.integrate(model.terminal_h) + model.mf_terminal.value(mT);
    }
    const double dt = mesh.dt();
    for (int i = 0; i < mesh.n_nodes(); ++i)
        rec.phi += ((i == 0 || i == mesh.n_steps) ? 0.5 * dt : dt) * rec.running[i];
    rec.phi += rec.terminal;
    return rec;
}

/// Monte-Carlo estimate of the cost of a feedback control, by direct Euler
/// simulation of the controlled dynamics. Mean-field terms are evaluated on
/// per-batch empirical measures; the standard error comes from batch means,
/// so it covers the nonlinear F terms as well.
struct MCCost {
    double J = 0.0;
    double stderr_J = 0.0;
};

inline MCCost mc_cost(const ModelSpec& model, const std::function<double(double, double)>& policy,
                      const GridDensity& m0, const TimeMesh& mesh, const MCParams& mc,
                      int n_batches = 16) {
    if (!model.mf_running.value || !model.mf_terminal.value)
        throw Unsupported("mc_cost: model must supply F(m) and F_T(m) values");
    const int N = mc.n_particles;
    const int B = std::max(1, std::min(n_batches, N));
    const double sigma = model.sigma1();
    const double dt = mesh.dt(), sq = std::sqrt(dt);

    // growth precheck of the policy (admissibility |v| <= C(1+|x|), sampled)
    for (double x = -8.0; x <= 8.0; x += 1.0)
        for (int i = 0; i <= mesh.n_steps; i += std::max(1, mesh.n_steps / 8)) {
            const double v = policy(mesh.time(i), x);
            if (!std::isfinite(v) || std::abs(v) > 1e6 * (1.0 + std::abs(x)))
                throw GrowthViolation("mc_cost: policy violates the linear-growth bound");
        }

    std::vector<double> positions = flow_detail::sample_initial(m0, N, mc.seed);
    std::vector<double> path_cost(N, 0.0); // per-particle running + terminal part
    std::vector<double> mf_batch(B, 0.0);  // per-batch mean-field running integral

    auto batch_of = [&](int p) { return static_cast<int>((static_cast<long>(p) * B) / N); };

    for (int i = 0; i <= mesh.n_steps; ++i) {
        const double s = mesh.time(i);
        const double wt = (i == 0 || i == mesh.n_steps) ? 0.5 * dt : dt;

        // per-batch empirical mean-field term
        for (int b = 0; b < B; ++b) {
            const int lo = static_cast<int>(static_cast<long>(b) * N / B);
            const int hi = static_cast<int>(static_cast<long>(b + 1) * N / B);
            ParticleEnsemble emp;
            emp.positions.assign(positions.begin() + lo, positions.begin() + hi);
            emp.weights.assign(hi - lo, 1.0 / (hi - lo));
            const MeasureRef ref(emp);
            if (i < mesh.n_steps)
                mf_batch[b] += wt * model.mf_running.value(ref);
            else
                mf_batch[b] += wt * model.mf_running.value(ref) + model.mf_terminal.value(ref);
        }

        parallel_for(N, mc.workers, [&](int p) {
            const double x = positions[p];
            const double v = policy(s, x);
            path_cost[p] += wt * model.running_cost(s, x, v);
            if (i == mesh.n_steps) {
                path_cost[p] += model.terminal_h(x);
                return;
            }
            positions[p] = x + dt * v + sigma * sq * rng::normal(mc.seed, p, i + 1);
        });
    }

    // batch means
    std::vector<double> J_b(B, 0.0);
    for (int p = 0; p < N; ++p) J_b[batch_of(p)] += path_cost[p];
    double J = 0.0;
    for (int b = 0; b < B; ++b) {
        const int lo = static_cast<int>(static_cast<long>(b) * N / B);
        const int hi = static_cast<int>(static_cast<long>(b + 1) * N / B);
        J_b[b] = J_b[b] / (hi - lo) + mf_batch[b];
        J += J_b[b];
    }
    J /= B;
    double var = 0.0;
    for (int b = 0; b < B; ++b) var += (J_b[b] - J) * (J_b[b] - J);
    var = B > 1 ? var / (B - 1) : 0.0;
    return {J, std::sqrt(var / B)};
}

/// Girsanov-reweighted variant of the cost (cross-check): base paths carry the
/// exponential-martingale weights of the policy drift.
inline MCCost mc_cost_girsanov(const ModelSpec& model,
                               const std::function<double(double, double)>& policy,
                               const GridDensity& m0, const TimeMesh& mesh, const MCParams& mc,
                               int n_batches = 16) {
    if (!model.mf_running.value || !model.mf_terminal.value)
        throw Unsupported("mc_cost_girsanov: model must supply F(m) and F_T(m) values");
    const int N = mc.n_particles;
    const int B = std::max(1, std::min(n_batches, N));
    const double sigma = model.sigma1();
    const double dt = mesh.dt(), sq = std::sqrt(dt);

    std::vector<double> positions = flow_detail::sample_initial(m0, N, mc.seed);
    std::vector<double> logw(N, 0.0), path_cost(N, 0.0);
    std::vector<double> mf_batch(B, 0.0);
    auto batch_of = [&](int p) { return static_cast<int>((static_cast<long>(p) * B) / N); };

    for (int i = 0; i <= mesh.n_steps; ++i) {
        const double s = mesh.time(i);
        const double wt = (i == 0 || i == mesh.n_steps) ? 0.5 * dt : dt;

        for (int b = 0; b < B; ++b) {
            const int lo = static_cast<int>(static_cast<long>(b) * N / B);
            const int hi = static_cast<int>(static_cast<long>(b + 1) * N / B);
            ParticleEnsemble emp;
            emp.positions.assign(positions.begin() + lo, positions.begin() + hi);
            emp.weights.resize(hi - lo);
            double sw = 0.0, lmax = -1e300;
            for (int p = lo; p < hi; ++p) lmax = std::max(lmax, logw[p]);
            for (int p = lo; p < hi; ++p) {
                emp.weights[p - lo] = std::exp(logw[p] - lmax);
                sw += emp.weights[p - lo];
            }
            const double ess = [&] {
                double s2 = 0.0;
                for (double w : emp.weights) s2 += (w / sw) * (w / sw);
                return 1.0 / s2;
            }();
            if (ess < 0.01 * (hi - lo))
                throw WeightDegenerate("mc_cost_girsanov: ESS collapsed at node " +
                                       std::to_string(i));
            for (double& w : emp.weights) w /= sw;
            const MeasureRef ref(emp);
            if (i < mesh.n_steps)
                mf_batch[b] += wt * model.mf_running.value(ref);
            else
                mf_batch[b] += wt * model.mf_running.value(ref) + model.mf_terminal.value(ref);
        }

        parallel_for(N, mc.workers, [&](int p) {
            const double x = positions[p];
            const double w = std::exp(logw[p]);
            const double v = policy(s, x);
            path_cost[p] += wt * w * model.running_cost(s, x, v);
            if (i == mesh.n_steps) {
                path_cost[p] += w * model.terminal_h(x);
                return;
            }
            const double g = v / sigma;
            const double dw = sq * rng::normal(mc.seed, p, i + 1);
            logw[p] += g * dw - 0.5 * g * g * dt;
            positions[p] = x + sigma * dw;
        });
    }

    std::vector<double> J_b(B, 0.0);
    for (int p = 0; p < N; ++p) J_b[batch_of(p)] += path_cost[p];
    double J = 0.0;
    for (int b = 0; b < B; ++b) {
        const int lo = static_cast<int>(static_cast<long>(b) * N / B);
        const int hi = static_cast<int>(static_cast<long>(b + 1) * N / B);
        J_b[b] = J_b[b] / (hi - lo) + mf_batch[b];
        J += J_b[b];
    }
    J /= B;
    double var = 0.0;
    for (int b = 0; b < B; ++b) var += (J_b[b] - J) * (J_b[b] - J);
    var = B > 1 ? var / (B - 1) : 0.0;
    return {J, std::sqrt(var / B)};
}

/// Checks the value-derivative identity: the directional derivative of Phi at
/// m0 along the pushforward direction X equals int DV(t,.) X dm0. Returns the
/// absolute discrepancy; requires one full re-solve at the shifted measure.
inline double value_derivative_check(const ModelSpec& model, const GridDensity& m0,
                                     const TimeMesh& mesh, const Grid1D& grid,
                                     const FixedPointConfig& cfg,
                                     const std::function<double(double)>& direction, double eps) {
    const MFTCSolution base = solve_mftc(model, m0, mesh, grid, cfg);

    // central difference in the perturbation strength; the one-sided quotient
    // carries an O(eps) curvature bias that would dominate the check
    auto phi_at = [&](double e) {
        const GridDensity shifted =
            pushforward_monotone(m0, [&](double x) { return x + e * direction(x); });
        const MFTCSolution sol = solve_mftc(model, shifted, mesh, grid, cfg);
        return value_from_solution(model, sol.hjb, sol.flow).phi;
    };
    const double fd = (phi_at(eps) - phi_at(-eps)) / (2.0 * eps);
    std::vector<double> dv0 = base.hjb.DV.slice_copy(0);
    const MeasureRef ref(m0);
    const double pairing =
        ref.integrate([&](double x) { return lerp_on_grid(grid, dv0, x) * direction(x); });
    return std::abs(fd - pairing);
}

/// First-order linear functional derivative field Vbar(s, x, z) of the HJB
/// solution in the initial measure, on a desk-scale tensor mesh. The x and z
/// slots share one grid (the Green contraction runs over it).
struct DerivativeField {
    TimeMesh mesh;
    Grid1D grid;
    std::vector<double> vbar;          // (n_nodes) x n x n, time major, then x, then z
    std::vector<double> source;        // assembled source rho(s, x, z), same layout
    std::vector<double> source_direct; // Green-propagated part (no Vbar coupling)
    int inner_iterations = 0;
    double inner_residual = 0.0;

    double at(int i, int jx, int jz) const {
        const int n = grid.n_points;
        return vbar[(static_cast<size_t>(i) * n + jx) * n + jz];
    }
    double& at(int i, int jx, int jz) {
        const int n = grid.n_points;
        return vbar[(static_cast<size_t>(i) * n + jx) * n + jz];
    }
};

struct VbarConfig {
    Grid1D grid{-8.0, 8.0, 81};
    int n_steps = 80;
    double inner_tol = 1e-6;
    int max_inner = 60;
    double damping = 0.5;
    int workers = 1;
    BoundaryPolicy bc = BoundaryPolicy::QuadraticExtrapolation;
};

namespace valuefn_detail {

/// Time-interpolated resample of a field onto the desk mesh/grid.
inline std::vector<double> resample_slice(const detail::TimeGridValues& f, double s,
                                          const Grid1D& grid) {
    const TimeMesh& m = f.mesh;
    double u = (s - m.t) / m.dt();
    int i = static_cast<int>(std::floor(u));
    if (i < 0) i = 0;
    if (i > m.n_steps - 1) i = m.n_steps - 1;
    const double w = u - i;
    std::vector<double> lo(f.slice(i), f.slice(i) + f.grid.n_points);
    std::vector<double> hi(f.slice(i + 1), f.slice(i + 1) + f.grid.n_points);
    std::vector<double> out(grid.n_points);
    for (int j = 0; j < grid.n_points; ++j) {
        const double x = grid.x(j);
        out[j] = (1.0 - w) * lerp_on_grid(f.grid, lo, x) + w * lerp_on_grid(f.grid, hi, x);
    }
    return out;
}

inline GridDensity resample_density(const MeasureFlow& flow, double s, const Grid1D& grid) {
    const TimeMesh& m = flow.mesh;
    double u = (s - m.t) / m.dt();
    int i = static_cast<int>(std::lround(u));
    if (i < 0) i = 0;
    if (i > m.n_steps) i = m.n_steps;
    GridDensity src = flow.representation == MeasureFlow::Representation::GridDensities
                          ? flow.grid_slices[i]
                          : flow_detail::deposit(flow.particle_slices[i], grid);
    if (src.grid == grid) return src;
    std::vector<double> v(grid.n_points);
    for (int j = 0; j < grid.n_points; ++j)
        v[j] = std::max(0.0, lerp_on_grid(src.grid, src.values, grid.x(j)));
    GridDensity out(grid, std::move(v));
    out.normalize();
    return out;
}

} // namespace valuefn_detail

/// Solves the linear nonlocal equation for Vbar = dV/dnu:
///   -dVbar/ds + A_x Vbar = D_p H(s,x,DV) . D_x Vbar + rho(s,x,z),
/// where the source rho is the derivative of the coupling term in the initial
/// measure, represented through Green propagation of d2F/dnu2 plus the
/// drift-response term that couples back through D_x Vbar (resolved by a
/// damped inner Picard iteration).
inline DerivativeField solve_vbar(const ModelSpec& model, const HJBSolution& solution,
                                  const MeasureFlow& flow, const VbarConfig& cfg) {
    if (!model.mf_running.d2dnu2 || !model.mf_terminal.d2dnu2)
        throw Unsupported("solve_vbar: model must supply d2F/dnu2 and d2F_T/dnu2");

    const Grid1D grid = cfg.grid;
    const int n = grid.n_points;
    const TimeMesh mesh(solution.V.mesh.t, solution.V.mesh.T, cfg.n_steps);
    const int ns = mesh.n_steps;
    const double dx = grid.dx(), a = model.a1();

    // Resampled data on the desk mesh: gradient, drift, D_p^2 H, densities.
    std::vector<std::vector<double>> g(ns + 1), dpp(ns + 1), dens(ns + 1);
    std::vector<GridDensity> slices;
    slices.reserve(ns + 1);
    for (int i = 0; i <= ns; ++i) {
        const double s = mesh.time(i);
        const auto dv = valuefn_detail::resample_slice(solution.DV, s, grid);
        g[i].resize(n);
        dpp[i].resize(n);
        for (int j = 0; j < n; ++j) {
            g[i][j] = model.hamiltonian_dp(s, grid.x(j), dv[j]);
            dpp[i][j] = hamiltonian_dpp_fd(model, s, grid.x(j), dv[j]);
        }
        slices.push_back(valuefn_detail::resample_density(flow, s, grid));
        dens[i] = slices.back().values;
    }

    // Second functional derivatives at each slice (x rows, zeta columns).
    auto f2_matrix = [&](const MfFunctional& f, int i) {
        const MeasureRef m(slices[i]);
        std::vector<double> M(static_cast<size_t>(n) * n);
        for (int jx = 0; jx < n; ++jx)
            for (int jz = 0; jz < n; ++jz)
                M[static_cast<size_t>(jx) * n + jz] = f.d2dnu2(m, grid.x(jx), grid.x(jz));
        return M;
    };
    std::vector<std::vector<double>> F2run(ns + 1);
    for (int i = 0; i <= ns; ++i) F2run[i] = f2_matrix(model.mf_running, i);
    const std::vector<double> F2term = f2_matrix(model.mf_terminal, ns);

    DerivativeField out;
    out.mesh = mesh;
    out.grid = grid;
    const size_t tensor = static_cast<size_t>(ns + 1) * n * n;
    out.vbar.assign(tensor, 0.0);
    out.source.assign(tensor, 0.0);
    out.source_direct.assign(tensor, 0.0);

    pde_detail::Stepper stepper(grid, a, cfg.bc);
    std::vector<double> terminal(static_cast<size_t>(n) * n, 0.0);

    std::vector<double> W; // m_theta(zeta) Dp2H(theta,zeta) D_x vbar(theta,zeta,z) w_zeta
    W.assign(tensor, 0.0);

    double residual = 1e300;
    int iter = 0;
    for (; iter < cfg.max_inner; ++iter) {
        // coupling kernel from the current vbar iterate
        for (int i = 0; i <= ns; ++i) {
            for (int jz = 0; jz < n; ++jz) {
                // D_x vbar along the x slot at fixed z
                for (int jx = 0; jx < n; ++jx) {
                    double dxv;
                    if (jx == 0)
                        dxv = (-3.0 * out.at(i, 0, jz) + 4.0 * out.at(i, 1, jz) -
                               out.at(i, 2, jz)) /
                              (2.0 * dx);
                    else if (jx == n - 1)
                        dxv = (3.0 * out.at(i, n - 1, jz) - 4.0 * out.at(i, n - 2, jz) +
                               out.at(i, n - 3, jz)) /
                              (2.0 * dx);
                    else
                        dxv = (out.at(i, jx + 1, jz) - out.at(i, jx - 1, jz)) / (2.0 * dx);
                    W[(static_cast<size_t>(i) * n + jx) * n + jz] =
                        dens[i][jx] * dpp[i][jx] * dxv * grid.weight(jx);
                }
            }
        }

        // Assemble the source at every slice: per terminal index jmax, sweep the
        // Green propagation of F2 back to t, accumulating the coupling integral.
        auto assemble_for = [&](int jmax, const std::vector<double>& F2,
                                std::vector<double>& rho_slice,
                                std::vector<double>& rho_direct_slice) {
            // Phi[x][zeta] carries Psi(x)(theta, .), swept from theta = jmax to 0.
            std::vector<std::vector<double>> Phi(n, std::vector<double>(n));
            for (int jx = 0; jx < n; ++jx)
                for (int jz = 0; jz < n; ++jz)
                    Phi[jx][jz] = F2[static_cast<size_t>(jx) * n + jz];

            std::vector<std::vector<double>> C(n, std::vector<double>(n, 0.0));
            const double dtheta = mesh.dt();
            auto accumulate = [&](int theta, double wt) {
                // C[x][z] += wt sum_zeta DPhi[x][zeta] W[theta][zeta][z]
                parallel_for(n, cfg.workers, [&](int jx) {
                    const auto dphi = gradient_slice(grid, Phi[jx].data());
                    double* crow = C[jx].data();
                    for (int jzeta = 0; jzeta < n; ++jzeta) {
                        const double f = wt * dphi[jzeta];
                        if (f == 0.0) continue;
                        const double* wrow = &W[(static_cast<size_t>(theta) * n + jzeta) * n];
                        for (int jz = 0; jz < n; ++jz) crow[jz] += f * wrow[jz];
                    }
                });
            };

            if (jmax > 0) accumulate(jmax, 0.5 * dtheta);
            for (int theta = jmax - 1; theta >= 0; --theta) {
                stepper.prepare(g[theta], mesh.dt());
                parallel_for(n, cfg.workers, [&](int jx) { stepper.step(Phi[jx], nullptr); });
                accumulate(theta, theta == 0 ? 0.5 * dtheta : dtheta);
            }

            for (int jx = 0; jx < n; ++jx)
                for (int jz = 0; jz < n; ++jz) {
                    const size_t idx = static_cast<size_t>(jx) * n + jz;
                    rho_direct_slice[idx] = Phi[jx][jz];
                    rho_slice[idx] = Phi[jx][jz] + C[jx][jz];
                }
        };

        std::vector<double> rho_slice(static_cast<size_t>(n) * n),
            rho_direct(static_cast<size_t>(n) * n);
        for (int i = 0; i <= ns; ++i) {
            assemble_for(i, F2run[i], rho_slice, rho_direct);
            std::copy(rho_slice.begin(), rho_slice.end(),
                      out.source.begin() + static_cast<size_t>(i) * n * n);
            std::copy(rho_direct.begin(), rho_direct.end(),
                      out.source_direct.begin() + static_cast<size_t>(i) * n * n);
        }
        assemble_for(ns, F2term, terminal, rho_direct);

        // Solve the linear backward PDE per z column with the assembled source.
        std::vector<double> next(tensor, 0.0);
        {
            // column-major working copies
            std::vector<std::vector<double>> cols(n, std::vector<double>(n));
            for (int jz = 0; jz < n; ++jz)
                for (int jx = 0; jx < n; ++jx)
                    cols[jz][jx] = terminal[static_cast<size_t>(jx) * n + jz];
            for (int jz = 0; jz < n; ++jz)
                for (int jx = 0; jx < n; ++jx)
                    next[(static_cast<size_t>(ns) * n + jx) * n + jz] = cols[jz][jx];

            for (int i = ns - 1; i >= 0; --i) {
                stepper.prepare(g[i], mesh.dt());
                parallel_for(n, cfg.workers, [&](int jz) {
                    std::vector<double> source_col(n);
                    for (int jx = 0; jx < n; ++jx)
                        source_col[jx] = out.source[(static_cast<size_t>(i) * n + jx) * n + jz];
                    stepper.step(cols[jz], &source_col);
                    for (int jx = 0; jx < n; ++jx)
                        next[(static_cast<size_t>(i) * n + jx) * n + jz] = cols[jz][jx];
                });
            }
        }

        // damped update and residual
        residual = 0.0;
        for (size_t idx = 0; idx < tensor; ++idx) {
            const double updated =
                (1.0 - cfg.damping) * out.vbar[idx] + cfg.damping * next[idx];
            residual = std::max(residual, std::abs(updated - out.vbar[idx]));
            out.vbar[idx] = updated;
        }
        if (!std::isfinite(residual))
            throw InnerNonConvergence("solve_vbar: non-finite inner iterate");
        if (residual <= cfg.inner_tol) {
            ++iter;
            break;
        }
    }
    out.inner_iterations = iter;
    out.inner_residual = residual;
    if (residual > cfg.inner_tol)
        throw InnerNonConvergence("solve_vbar: inner Picard residual " +
                                  std::to_string(residual) + " after " + std::to_string(iter) +
                                  " iterations");
    return out;
}

/// Master-equation residual at probe points (s = t, m = m0): every term of
/// the equation is reconstructed from the solved fields; dU/ds comes from a
/// re-solve at a shifted start time.
struct MasterResidual {
    std::vector<double> probe_x;
    std::vector<double> residuals;
    double max_abs = 0.0;
    int mesh_steps = 0;
    int grid_points = 0;
};

struct MasterConfig {
    FixedPointConfig fixed_point;
    VbarConfig vbar;
    int eps_steps = 4; // dU/ds finite-difference offset, in mesh steps
};

inline MasterResidual master_residual(const ModelSpec& model, const GridDensity& m0,
                                      const std::vector<double>& probe_points,
                                      const TimeMesh& mesh, const Grid1D& grid,
                                      const MasterConfig& cfg) {
    const MFTCSolution sol = solve_mftc(model, m0, mesh, grid, cfg.fixed_point);
    const DerivativeField vbar = solve_vbar(model, sol.hjb, sol.flow, cfg.vbar);

    // dU/ds by re-solving from the same m0 at a start time eps later.
    const int k = std::max(1, std::min(cfg.eps_steps, mesh.n_steps - 1));
    const double eps = k * mesh.dt();
    ModelSpec shifted = model;
    shifted.t = mesh.time(k);
    const MFTCSolution sol_eps = solve_mftc(shifted, m0, mesh.restarted_at(k), grid,
                                            cfg.fixed_point);

    const double a = model.a1();
    const Grid1D& zg = vbar.grid;
    const int nz = zg.n_points;
    const GridDensity m0_desk = valuefn_detail::resample_density(sol.flow, mesh.t, zg);

    MasterResidual out;
    out.mesh_steps = mesh.n_steps;
    out.grid_points = grid.n_points;

    const auto d2v0 = second_diff_slice(grid, sol.hjb.V.slice(0));
    std::vector<double> dv0 = sol.hjb.DV.slice_copy(0);

    for (double xp : probe_points) {
        const int j = grid.nearest(xp);
        const double x = grid.x(j);

        const double dUds = (sol_eps.hjb.V.at(0, j) - sol.hjb.V.at(0, j)) / eps;
        const double AU = -0.5 * a * d2v0[j];

        // nonlocal terms through the z slot of vbar at the probe's x row
        const int jx = zg.nearest(x);
        std::vector<double> row(nz);
        for (int jz = 0; jz < nz; ++jz) row[jz] = vbar.at(0, jx, jz);
        const auto drow = gradient_slice(zg, row.data());
        const auto d2row = second_diff_slice(zg, row.data());

        double nonlocal_A = 0.0, nonlocal_H = 0.0;
        for (int jz = 0; jz < nz; ++jz) {
            const double w = zg.weight(jz) * m0_desk.values[jz];
            nonlocal_A += w * (-0.5 * a * d2row[jz]);
            const double dv_z = lerp_on_grid(grid, dv0, zg.x(jz));
            nonlocal_H += w * model.hamiltonian_dp(mesh.t, zg.x(jz), dv_z) * drow[jz];
        }

        const MeasureRef m0ref(m0);
        const double rhs = model.hamiltonian(mesh.t, x, dv0[j]) + nonlocal_H +
                           model.mf_running.ddnu(m0ref, x);
        const double lhs = -dUds + AU + nonlocal_A;

        out.probe_x.push_back(x);
        out.residuals.push_back(lhs - rhs);
        out.max_abs = std::max(out.max_abs, std::abs(lhs - rhs));
    }
    return out;
}

} // namespace mfct
