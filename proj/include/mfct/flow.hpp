#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mfct/errors.hpp"
#include "mfct/fields.hpp"
#include "mfct/measure.hpp"
#include "mfct/model.hpp"
#include "mfct/parallel.hpp"
#include "mfct/pde.hpp"
#include "mfct/rng.hpp"

namespace mfct {

enum class FlowMethod { FP_GRID, PARTICLE_SDE, GIRSANOV_REWEIGHT };

struct MCParams {
    int n_particles = 100000;
    uint64_t seed = 12345;
    int substeps = 1; // Euler substeps per mesh step
    int workers = 1;
};

/// Base-path Girsanov sample: driftless paths, per-node log-weights of the
/// exponential martingale, and the effective sample size track.
struct GirsanovBatch {
    TimeMesh mesh;
    int n_particles = 0;
    uint64_t seed = 0;
    // node-major storage, n_nodes x n_particles
    std::vector<std::vector<double>> positions;
    std::vector<std::vector<double>> log_weights;
    std::vector<double> ess;
};

namespace flow_detail {

/// Initial particle positions: inverse-CDF draws from a grid density, or the
/// particle positions themselves when the count matches (resampled otherwise).
inline std::vector<double> sample_initial(const GridDensity& m0, int n, uint64_t seed) {
    const std::vector<double> F = m0.cdf();
    std::vector<double> x(n);
    for (int p = 0; p < n; ++p) x[p] = m0.quantile(rng::uniform(seed, p, 0), F);
    return x;
}

inline std::vector<double> sample_initial(const ParticleEnsemble& m0, int n, uint64_t seed) {
    if (m0.size() == n) return m0.positions;
    // weighted resampling through the quantile function
    std::vector<double> x(n);
    for (int p = 0; p < n; ++p) {
        const double u = rng::uniform(seed, p, 0);
        double cum = 0.0;
        int i = 0;
        while (i < m0.size() - 1 && cum + m0.weights[i] < u) cum += m0.weights[i++];
        x[p] = m0.positions[i];
    }
    return x;
}

/// Deposits weighted particles on a grid (linear cloud-in-cell) and normalizes.
inline GridDensity deposit(const ParticleEnsemble& mu, const Grid1D& grid) {
    std::vector<double> v(grid.n_points, 0.0);
    const double dx = grid.dx();
    for (int p = 0; p < mu.size(); ++p) {
        const double u = (mu.positions[p] - grid.x_min) / dx;
        int j = static_cast<int>(std::floor(u));
        if (j < 0) j = 0;
        if (j > grid.n_points - 2) j = grid.n_points - 2;
        const double w = u - j;
        v[j] += mu.weights[p] * (1.0 - w);
        v[j + 1] += mu.weights[p] * w;
    }
    for (int j = 0; j < grid.n_points; ++j) v[j] /= grid.weight(j);
    GridDensity out(grid, std::move(v));
    out.normalize();
    return out;
}

inline GridDensity initial_density(const GridDensity& m0, const Grid1D&) { return m0; }
inline GridDensity initial_density(const ParticleEnsemble& m0, const Grid1D& grid) {
    return deposit(m0, grid);
}

} // namespace flow_detail

/// Simulates the driftless base paths X = x + sigma (w_s - w_t) together with
/// the exponential-martingale log-weights of the drift D_p H(s, x, DV).
/// Per-particle counter-based streams keep the result independent of the
/// worker count.
template <typename Measure>
GirsanovBatch simulate_girsanov_batch(const ModelSpec& model, const VectorField& DV,
                                      const Measure& m0, const MCParams& mc) {
    const TimeMesh& mesh = DV.mesh;
    const int N = mc.n_particles, n_sub = std::max(1, mc.substeps);
    const double sigma = model.sigma1();
    const double dt = mesh.dt() / n_sub, sq = std::sqrt(dt);

    GirsanovBatch batch;
    batch.mesh = mesh;
    batch.n_particles = N;
    batch.seed = mc.seed;
    batch.positions.assign(mesh.n_nodes(), std::vector<double>(N, 0.0));
    batch.log_weights.assign(mesh.n_nodes(), std::vector<double>(N, 0.0));
    batch.ess.assign(mesh.n_nodes(), 0.0);

    batch.positions[0] = flow_detail::sample_initial(m0, N, mc.seed);

    for (int i = 0; i < mesh.n_steps; ++i) {
        const double s = mesh.time(i);
        SliceView dv(DV.grid, DV.slice(i));
        const auto& xs = batch.positions[i];
        const auto& lw = batch.log_weights[i];
        auto& xs1 = batch.positions[i + 1];
        auto& lw1 = batch.log_weights[i + 1];
        parallel_for(N, mc.workers, [&](int p) {
            double x = xs[p], l = lw[p];
            for (int k = 0; k < n_sub; ++k) {
                const double g = model.hamiltonian_dp(s, x, dv(x)) / sigma;
                const double dw = sq * rng::normal(mc.seed, p, static_cast<uint64_t>(i) * n_sub + k + 1);
                l += g * dw - 0.5 * g * g * dt;
                x += sigma * dw;
            }
            xs1[p] = x;
            lw1[p] = l;
        });
    }

    for (int i = 0; i < mesh.n_nodes(); ++i) {
        double lmax = -1e300;
        for (double l : batch.log_weights[i]) lmax = std::max(lmax, l);
        double sw = 0.0, sw2 = 0.0;
        for (double l : batch.log_weights[i]) {
            const double w = std::exp(l - lmax);
            sw += w;
            sw2 += w * w;
        }
        batch.ess[i] = sw2 > 0.0 ? sw * sw / sw2 : 0.0;
    }
    return batch;
}

/// Summary statistics of a Girsanov batch: the martingale check E[M] = 1 and
/// the weighted second moment E[M |X|^2], per time node.
struct GirsanovDiagnostics {
    std::vector<double> mean_weight;   // sample mean of M
    std::vector<double> stderr_weight; // its standard error
    std::vector<double> mean_wx2;      // sample mean of M |X|^2
    std::vector<double> ess;
    bool martingale_flag = false; // set when |mean - 1| > 3 s.e. at some node
};

inline GirsanovDiagnostics girsanov_diagnostics(const GirsanovBatch& batch) {
    GirsanovDiagnostics d;
    const int N = batch.n_particles;
    for (int i = 0; i < batch.mesh.n_nodes(); ++i) {
        double sw = 0.0, sw2 = 0.0, swx = 0.0;
        for (int p = 0; p < N; ++p) {
            const double w = std::exp(batch.log_weights[i][p]);
            const double x = batch.positions[i][p];
            sw += w;
            sw2 += w * w;
            swx += w * x * x;
        }
        const double mean = sw / N;
        const double var = std::max(0.0, sw2 / N - mean * mean);
        const double se = std::sqrt(var / N);
        d.mean_weight.push_back(mean);
        d.stderr_weight.push_back(se);
        d.mean_wx2.push_back(swx / N);
        d.ess.push_back(batch.ess[i]);
        if (std::abs(mean - 1.0) > 3.0 * se && se > 0.0) d.martingale_flag = true;
    }
    return d;
}

/// Measure flow induced by a frozen gradient field, by one of three routes:
/// grid Fokker-Planck, particle simulation of the controlled SDE, or Girsanov
/// reweighting of driftless base paths.
template <typename Measure>
MeasureFlow flow_from_gradient(const ModelSpec& model, const VectorField& DV, const Measure& m0,
                               FlowMethod method, const MCParams& mc) {
    const TimeMesh& mesh = DV.mesh;
    const Grid1D& grid = DV.grid;
    if (!DV.all_finite()) throw GrowthViolation("flow_from_gradient: DV not finite");

    if (method == FlowMethod::FP_GRID) {
        VectorField drift(mesh, grid);
        for (int i = 0; i < mesh.n_nodes(); ++i) {
            const double s = mesh.time(i);
            for (int j = 0; j < grid.n_points; ++j)
                drift.at(i, j) = model.hamiltonian_dp(s, grid.x(j), DV.at(i, j));
        }
        const GridDensity start = flow_detail::initial_density(m0, grid);
        return solve_forward_fp(drift, model.sigma1(), mesh, grid, start);
    }

    MeasureFlow flow;
    flow.mesh = mesh;
    flow.representation = MeasureFlow::Representation::Particles;

    if (method == FlowMethod::GIRSANOV_REWEIGHT) {
        const GirsanovBatch batch = simulate_girsanov_batch(model, DV, m0, mc);
        const int N = batch.n_particles;
        for (int i = 0; i < mesh.n_nodes(); ++i) {
            if (batch.ess[i] < 0.01 * N)
                throw WeightDegenerate("flow_from_gradient: ESS " +
                                       std::to_string(batch.ess[i]) + " below 1% of " +
                                       std::to_string(N) + " at node " + std::to_string(i));
            ParticleEnsemble e;
            e.rng_seed = mc.seed;
            e.positions = batch.positions[i];
            e.weights.resize(N);
            double lmax = -1e300;
            for (double l : batch.log_weights[i]) lmax = std::max(lmax, l);
            double sw = 0.0;
            for (int p = 0; p < N; ++p) {
                e.weights[p] = std::exp(batch.log_weights[i][p] - lmax);
                sw += e.weights[p];
            }
            for (double& w : e.weights) w /= sw;
            flow.particle_slices.push_back(std::move(e));
        }
        return flow;
    }

    // PARTICLE_SDE: Euler-Maruyama on the controlled dynamics.
    const int N = mc.n_particles, n_sub = std::max(1, mc.substeps);
    const double sigma = model.sigma1();
    const double dt = mesh.dt() / n_sub, sq = std::sqrt(dt);

    ParticleEnsemble current;
    current.positions = flow_detail::sample_initial(m0, N, mc.seed);
    current.weights.assign(N, 1.0 / N);
    current.rng_seed = mc.seed;
    flow.particle_slices.push_back(current);

    for (int i = 0; i < mesh.n_steps; ++i) {
        const double s = mesh.time(i);
        SliceView dv(grid, DV.slice(i));
        auto& xs = current.positions;
        parallel_for(N, mc.workers, [&](int p) {
            double x = xs[p];
            for (int k = 0; k < n_sub; ++k) {
                const double drift = model.hamiltonian_dp(s, x, dv(x));
                x += dt * drift +
                     sigma * sq * rng::normal(mc.seed, p, static_cast<uint64_t>(i) * n_sub + k + 1);
            }
            xs[p] = x;
        });
        flow.particle_slices.push_back(current);
    }
    return flow;
}

/// Lemma-4.1 dual evaluation: solves the backward test-function equation with
/// drift D_p H(., ., DV) from time node s_index down to t, then integrates the
/// t-slice against m0.
template <typename Measure>
double dual_expectation(const ModelSpec& model, const VectorField& DV,
                        const std::function<double(double)>& phi, const Measure& m0,
                        int s_index,
                        BoundaryPolicy bc = BoundaryPolicy::QuadraticExtrapolation) {
    const TimeMesh& mesh = DV.mesh;
    const Grid1D& grid = DV.grid;
    if (s_index < 0 || s_index > mesh.n_steps)
        throw MeshMismatch("dual_expectation: s_index outside the mesh");

    for (int j = 0; j < grid.n_points; j += std::max(1, grid.n_points / 32)) {
        const double z = grid.x(j), v = phi(z);
        if (!std::isfinite(v) || std::abs(v) > 1e6 * (1.0 + z * z))
            throw GrowthViolation("dual_expectation: phi violates |phi| <= C(1+z^2)");
    }
    if (s_index == 0) return MeasureRef(m0).integrate(phi);

    const TimeMesh sub(mesh.t, mesh.time(s_index), s_index);
    VectorField drift(sub, grid);
    for (int i = 0; i <= s_index; ++i) {
        const double s = mesh.time(i);
        for (int j = 0; j < grid.n_points; ++j)
            drift.at(i, j) = model.hamiltonian_dp(s, grid.x(j), DV.at(i, j));
    }
    LinearPDECoefficients coeffs;
    coeffs.drift_field = &drift;
    coeffs.terminal = phi;
    const ScalarField psi = solve_backward_linear(coeffs, model.sigma1(), sub, grid, bc);

    std::vector<double> slice0 = psi.slice_copy(0);
    const MeasureRef ref(m0);
    return ref.integrate([&](double z) { return lerp_on_grid(grid, slice0, z); });
}

} // namespace mfct
