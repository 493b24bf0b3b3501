#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mfct/errors.hpp"

namespace mfct {

/// Uniform 1-D spatial grid on a truncated domain [x_min, x_max].
struct Grid1D {
    double x_min = -8.0;
    double x_max = 8.0;
    int n_points = 401;

    Grid1D() = default;
    Grid1D(double a, double b, int n) : x_min(a), x_max(b), n_points(n) {
        if (n_points < 3 || !(x_max > x_min))
            throw ConfigError("Grid1D: need x_max > x_min and n_points >= 3");
    }

    double dx() const { return (x_max - x_min) / (n_points - 1); }
    double x(int j) const { return x_min + j * dx(); }

    std::vector<double> nodes() const {
        std::vector<double> xs(n_points);
        for (int j = 0; j < n_points; ++j) xs[j] = x(j);
        return xs;
    }

    /// Trapezoid quadrature weight of node j (also the finite-volume cell width).
    double weight(int j) const {
        return (j == 0 || j == n_points - 1) ? 0.5 * dx() : dx();
    }

    /// Index of the closest node to xq (clamped to the grid).
    int nearest(double xq) const {
        int j = static_cast<int>(std::lround((xq - x_min) / dx()));
        if (j < 0) j = 0;
        if (j >= n_points) j = n_points - 1;
        return j;
    }

    bool operator==(const Grid1D& o) const {
        return x_min == o.x_min && x_max == o.x_max && n_points == o.n_points;
    }
};

/// Uniform time mesh on [t, T] with n_steps intervals (n_steps + 1 nodes).
struct TimeMesh {
    double t = 0.0;
    double T = 1.0;
    int n_steps = 1000;

    TimeMesh() = default;
    TimeMesh(double t0, double t1, int n) : t(t0), T(t1), n_steps(n) {
        if (n_steps < 1 || !(T > t))
            throw ConfigError("TimeMesh: need T > t and n_steps >= 1");
    }

    static TimeMesh with_dt(double t0, double t1, double dt) {
        int n = static_cast<int>(std::ceil((t1 - t0) / dt - 1e-12));
        return TimeMesh(t0, t1, n < 1 ? 1 : n);
    }

    double dt() const { return (T - t) / n_steps; }
    int n_nodes() const { return n_steps + 1; }
    double time(int i) const { return t + i * dt(); }

    /// Sub-mesh on [time(i0), T] keeping the node spacing.
    TimeMesh restarted_at(int i0) const {
        if (i0 < 0 || i0 >= n_steps)
            throw MeshMismatch("TimeMesh::restarted_at: index out of range");
        return TimeMesh(time(i0), T, n_steps - i0);
    }

    bool operator==(const TimeMesh& o) const {
        return t == o.t && T == o.T && n_steps == o.n_steps;
    }
};

/// Trapezoid rule over grid nodes.
inline double trapz(const Grid1D& g, const std::vector<double>& v) {
    double s = 0.0;
    for (int j = 0; j < g.n_points; ++j) s += g.weight(j) * v[j];
    return s;
}

/// Piecewise-linear interpolation of nodal values, linearly extrapolated
/// outside the grid from the first/last segment.
inline double lerp_on_grid(const Grid1D& g, const std::vector<double>& v, double xq) {
    const double dx = g.dx();
    double u = (xq - g.x_min) / dx;
    int j = static_cast<int>(std::floor(u));
    if (j < 0) j = 0;
    if (j > g.n_points - 2) j = g.n_points - 2;
    const double w = u - j;
    return v[j] * (1.0 - w) + v[j + 1] * w;
}

} // namespace mfct
