#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "mfct/errors.hpp"
#include "mfct/fields.hpp"
#include "mfct/grid.hpp"

namespace mfct {

/// Probability measure as nonnegative nodal density values on a Grid1D,
/// normalized so the trapezoid integral is 1.
struct GridDensity {
    Grid1D grid;
    std::vector<double> values;

    GridDensity() = default;
    GridDensity(const Grid1D& g, std::vector<double> v) : grid(g), values(std::move(v)) {}

    static GridDensity gaussian(const Grid1D& g, double mean, double sd) {
        std::vector<double> v(g.n_points);
        for (int j = 0; j < g.n_points; ++j) {
            const double z = (g.x(j) - mean) / sd;
            v[j] = std::exp(-0.5 * z * z);
        }
        GridDensity d(g, std::move(v));
        d.normalize();
        return d;
    }

    double total_mass() const { return trapz(grid, values); }

    void normalize() {
        const double m = total_mass();
        if (!(m > 0.0) || !std::isfinite(m))
            throw SolverError("GridDensity: cannot normalize, mass = " + std::to_string(m));
        for (double& v : values) v /= m;
    }

    bool is_normalized(double tol = 1e-12) const {
        return std::abs(total_mass() - 1.0) <= tol;
    }

    /// Largest density value on the two boundary nodes; the truncation-leak monitor.
    double boundary_density() const {
        return std::max(values.front(), values.back());
    }

    /// CDF values at the nodes (cumulative trapezoid), cdf[0] = 0.
    std::vector<double> cdf() const {
        std::vector<double> F(grid.n_points, 0.0);
        const double dx = grid.dx();
        for (int j = 1; j < grid.n_points; ++j)
            F[j] = F[j - 1] + 0.5 * dx * (values[j - 1] + values[j]);
        return F;
    }

    /// Inverse CDF at level q in (0,1), linear between CDF nodes.
    double quantile(double q, const std::vector<double>& F) const {
        const double target = q * F.back();
        auto it = std::lower_bound(F.begin(), F.end(), target);
        int k = static_cast<int>(it - F.begin());
        if (k <= 0) return grid.x_min;
        if (k >= grid.n_points) return grid.x_max;
        const double dF = F[k] - F[k - 1];
        const double w = dF > 0.0 ? (target - F[k - 1]) / dF : 0.0;
        return grid.x(k - 1) + w * grid.dx();
    }
};

/// Weighted particle representation of a probability measure.
struct ParticleEnsemble {
    std::vector<double> positions;
    std::vector<double> weights;
    uint64_t rng_seed = 0;

    int size() const { return static_cast<int>(positions.size()); }

    static ParticleEnsemble equal_weighted(std::vector<double> pos, uint64_t seed = 0) {
        ParticleEnsemble e;
        const double w = 1.0 / static_cast<double>(pos.size());
        e.weights.assign(pos.size(), w);
        e.positions = std::move(pos);
        e.rng_seed = seed;
        return e;
    }

    double weight_sum() const {
        return std::accumulate(weights.begin(), weights.end(), 0.0);
    }

    bool is_normalized(double tol = 1e-12) const {
        return size() >= 1 && std::abs(weight_sum() - 1.0) <= tol;
    }

    /// Effective sample size 1 / sum(w^2) for normalized weights.
    double ess() const {
        double s2 = 0.0;
        for (double w : weights) s2 += w * w;
        return s2 > 0.0 ? 1.0 / s2 : 0.0;
    }
};

/// k-th raw moment.
inline double moments(const GridDensity& mu, int order) {
    std::vector<double> integrand(mu.grid.n_points);
    for (int j = 0; j < mu.grid.n_points; ++j)
        integrand[j] = std::pow(mu.grid.x(j), order) * mu.values[j];
    return trapz(mu.grid, integrand);
}

inline double moments(const ParticleEnsemble& mu, int order) {
    double s = 0.0;
    for (int i = 0; i < mu.size(); ++i)
        s += mu.weights[i] * std::pow(mu.positions[i], order);
    return s;
}

/// Pushforward of a particle measure by a pointwise map; weights carry over.
inline ParticleEnsemble pushforward(const ParticleEnsemble& mu,
                                    const std::function<double(double)>& map) {
    ParticleEnsemble out = mu;
    for (double& x : out.positions) {
        x = map(x);
        if (!std::isfinite(x)) throw NonFiniteMap("pushforward: map produced non-finite value");
    }
    return out;
}

/// Pushforward of a grid density by a strictly increasing map, via the CDF
/// transform: F_new(y) = F(map^{-1}(y)), inverted by bisection per node.
inline GridDensity pushforward_monotone(const GridDensity& mu,
                                        const std::function<double(double)>& map) {
    const Grid1D& g = mu.grid;
    const std::vector<double> F = mu.cdf();
    std::vector<double> Fnew(g.n_points);
    for (int j = 0; j < g.n_points; ++j) {
        const double y = g.x(j);
        double lo = g.x_min - 1.0, hi = g.x_max + 1.0;
        for (int it = 0; it < 60; ++it) {
            const double mid = 0.5 * (lo + hi);
            (map(mid) < y ? lo : hi) = mid;
        }
        const double xinv = std::clamp(0.5 * (lo + hi), g.x_min, g.x_max);
        Fnew[j] = lerp_on_grid(g, F, xinv);
    }
    std::vector<double> dens(g.n_points);
    const double dx = g.dx();
    for (int j = 1; j + 1 < g.n_points; ++j) dens[j] = (Fnew[j + 1] - Fnew[j - 1]) / (2.0 * dx);
    dens[0] = std::max(0.0, (Fnew[1] - Fnew[0]) / dx);
    dens[g.n_points - 1] = std::max(0.0, (Fnew[g.n_points - 1] - Fnew[g.n_points - 2]) / dx);
    for (double& v : dens) v = std::max(v, 0.0);
    GridDensity out(g, std::move(dens));
    out.normalize();
    return out;
}

namespace detail {

inline std::vector<double> quantiles_of(const GridDensity& mu, int K) {
    const std::vector<double> F = mu.cdf();
    std::vector<double> q(K);
    for (int k = 0; k < K; ++k) q[k] = mu.quantile((k + 0.5) / K, F);
    return q;
}

inline std::vector<double> quantiles_of(const ParticleEnsemble& mu, int K) {
    std::vector<int> idx(mu.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](int a, int b) { return mu.positions[a] < mu.positions[b]; });
    const double total = mu.weight_sum();
    std::vector<double> q(K);
    double cum = 0.0;
    int i = 0;
    for (int k = 0; k < K; ++k) {
        const double target = (k + 0.5) / K * total;
        while (i < mu.size() - 1 && cum + mu.weights[idx[i]] < target) cum += mu.weights[idx[i++]];
        q[k] = mu.positions[idx[i]];
    }
    return q;
}

inline double w2_from_quantiles(const std::vector<double>& qa, const std::vector<double>& qb) {
    double s = 0.0;
    for (size_t k = 0; k < qa.size(); ++k) {
        const double d = qa[k] - qb[k];
        s += d * d;
    }
    return std::sqrt(s / qa.size());
}

} // namespace detail

/// 1-D Wasserstein-2 distance by inverse-CDF quadrature at K quantile levels.
template <typename MuT, typename NuT>
double wasserstein2_1d(const MuT& mu, const NuT& nu, int K = 512) {
    return detail::w2_from_quantiles(detail::quantiles_of(mu, K), detail::quantiles_of(nu, K));
}

/// Time-indexed measure flow; one slice per mesh node in a single
/// representation.
struct MeasureFlow {
    enum class Representation { GridDensities, Particles };

    TimeMesh mesh;
    Representation representation = Representation::GridDensities;
    std::vector<GridDensity> grid_slices;
    std::vector<ParticleEnsemble> particle_slices;
    double cumulative_leak = 0.0;
    double max_boundary_density = 0.0;

    int n_slices() const {
        return representation == Representation::GridDensities
                   ? static_cast<int>(grid_slices.size())
                   : static_cast<int>(particle_slices.size());
    }

    double moment(int i, int order) const {
        return representation == Representation::GridDensities ? moments(grid_slices[i], order)
                                                               : moments(particle_slices[i], order);
    }

    double node_w2(const MeasureFlow& other, int i, int K = 512) const {
        if (representation == Representation::GridDensities &&
            other.representation == Representation::GridDensities)
            return wasserstein2_1d(grid_slices[i], other.grid_slices[i], K);
        if (representation == Representation::Particles &&
            other.representation == Representation::Particles)
            return wasserstein2_1d(particle_slices[i], other.particle_slices[i], K);
        if (representation == Representation::GridDensities)
            return wasserstein2_1d(grid_slices[i], other.particle_slices[i], K);
        return wasserstein2_1d(particle_slices[i], other.grid_slices[i], K);
    }
};

/// Read-only view of one measure slice handed to model callables; memoizes
/// the low moments so per-node coefficient evaluations stay cheap.
class MeasureRef {
public:
    explicit MeasureRef(const GridDensity& g) : grid_(&g) {}
    explicit MeasureRef(const ParticleEnsemble& p) : particles_(&p) {}

    double moment(int order) const {
        if (order <= 4) {
            if (!have_[order]) {
                cache_[order] = raw_moment(order);
                have_[order] = true;
            }
            return cache_[order];
        }
        return raw_moment(order);
    }

    double mean() const { return moment(1); }

    double integrate(const std::function<double(double)>& f) const {
        if (grid_) {
            std::vector<double> integrand(grid_->grid.n_points);
            for (int j = 0; j < grid_->grid.n_points; ++j)
                integrand[j] = f(grid_->grid.x(j)) * grid_->values[j];
            return trapz(grid_->grid, integrand);
        }
        double s = 0.0;
        for (int i = 0; i < particles_->size(); ++i)
            s += particles_->weights[i] * f(particles_->positions[i]);
        return s;
    }

private:
    double raw_moment(int order) const {
        return grid_ ? moments(*grid_, order) : moments(*particles_, order);
    }

    const GridDensity* grid_ = nullptr;
    const ParticleEnsemble* particles_ = nullptr;
    mutable double cache_[5] = {0, 0, 0, 0, 0};
    mutable bool have_[5] = {false, false, false, false, false};
};

inline MeasureRef slice_ref(const MeasureFlow& flow, int i) {
    return flow.representation == MeasureFlow::Representation::GridDensities
               ? MeasureRef(flow.grid_slices[i])
               : MeasureRef(flow.particle_slices[i]);
}

/// Test functional for the measure chain rule: value F(m) plus the x-derivatives
/// of its linear functional derivative.
struct TestFunctional {
    std::function<double(const MeasureRef&)> value;
    std::function<double(const MeasureRef&, double)> ddnu;     // dF/dnu(m)(x)
    std::function<double(const MeasureRef&, double)> ddnu_dx;  // D_x dF/dnu
    std::function<double(const MeasureRef&, double)> ddnu_dxx; // D_x^2 dF/dnu
};

/// Numerical check of the chain rule along a measure flow generated by
/// drift_field: returns the max over interior mesh nodes of
/// | d/ds F(m_s) - int [ D dF/dnu . v + (a/2) D^2 dF/dnu ] dm_s |,
/// with d/ds by centered differences. Expected O(dt + dx^2).
inline double chain_rule_check(double a, const TestFunctional& F_test, const MeasureFlow& flow,
                               const VectorField& drift_field) {
    if (!(flow.mesh == drift_field.mesh))
        throw MeshMismatch("chain_rule_check: flow and drift mesh differ");
    const double dt = flow.mesh.dt();
    double worst = 0.0;
    for (int i = 1; i + 1 < flow.mesh.n_nodes(); ++i) {
        const MeasureRef m_prev = slice_ref(flow, i - 1);
        const MeasureRef m_next = slice_ref(flow, i + 1);
        const double lhs = (F_test.value(m_next) - F_test.value(m_prev)) / (2.0 * dt);

        const MeasureRef m = slice_ref(flow, i);
        SliceView v(drift_field.grid, drift_field.slice(i));
        const double rhs = m.integrate([&](double x) {
            return F_test.ddnu_dx(m, x) * v(x) + 0.5 * a * F_test.ddnu_dxx(m, x);
        });
        worst = std::max(worst, std::abs(lhs - rhs));
    }
    return worst;
}

} // namespace mfct
