#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "mfct/grid.hpp"

namespace mfct {

namespace detail {

/// Shared storage for a time-indexed grid function values[time][node],
/// kept flat and row-major (time major).
struct TimeGridValues {
    TimeMesh mesh;
    Grid1D grid;
    std::vector<double> data;

    TimeGridValues() = default;
    TimeGridValues(const TimeMesh& m, const Grid1D& g)
        : mesh(m), grid(g), data(static_cast<size_t>(m.n_nodes()) * g.n_points, 0.0) {}

    double& at(int i, int j) { return data[static_cast<size_t>(i) * grid.n_points + j]; }
    double at(int i, int j) const { return data[static_cast<size_t>(i) * grid.n_points + j]; }

    double* slice(int i) { return data.data() + static_cast<size_t>(i) * grid.n_points; }
    const double* slice(int i) const {
        return data.data() + static_cast<size_t>(i) * grid.n_points;
    }

    std::vector<double> slice_copy(int i) const {
        const double* p = slice(i);
        return std::vector<double>(p, p + grid.n_points);
    }

    void set_slice(int i, const std::vector<double>& v) {
        std::copy(v.begin(), v.end(), slice(i));
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data) m = std::max(m, std::abs(v));
        return m;
    }
};

} // namespace detail

/// Scalar-valued field on a time mesh x spatial grid (V, Psi, densities...).
struct ScalarField : detail::TimeGridValues {
    using detail::TimeGridValues::TimeGridValues;

    /// Value at (time node i, arbitrary x) by linear interpolation in x.
    double eval(int i, double x) const {
        std::vector<double> tmp(slice(i), slice(i) + grid.n_points);
        return lerp_on_grid(grid, tmp, x);
    }
};

/// Vector-valued field; n = 1 throughout the solvers, so one scalar per node
/// (gradients DV, drifts, feedback policies).
struct VectorField : detail::TimeGridValues {
    using detail::TimeGridValues::TimeGridValues;

    static VectorField constant(const TimeMesh& m, const Grid1D& g, double value) {
        VectorField f(m, g);
        std::fill(f.data.begin(), f.data.end(), value);
        return f;
    }
};

/// Fast interpolation view over one time slice of a field.
class SliceView {
public:
    SliceView(const Grid1D& g, const double* v) : grid_(g), v_(v) {}

    double operator()(double xq) const {
        const double dx = grid_.dx();
        double u = (xq - grid_.x_min) / dx;
        int j = static_cast<int>(std::floor(u));
        if (j < 0) j = 0;
        if (j > grid_.n_points - 2) j = grid_.n_points - 2;
        const double w = u - j;
        return v_[j] * (1.0 - w) + v_[j + 1] * w;
    }

private:
    const Grid1D& grid_;
    const double* v_;
};

/// Centered differences at interior nodes, second-order one-sided at the ends.
inline std::vector<double> gradient_slice(const Grid1D& g, const double* v) {
    const int n = g.n_points;
    const double dx = g.dx();
    std::vector<double> d(n);
    for (int j = 1; j + 1 < n; ++j) d[j] = (v[j + 1] - v[j - 1]) / (2.0 * dx);
    d[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * dx);
    d[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * dx);
    return d;
}

/// Second differences; boundary values copy the adjacent interior stencil
/// (consistent with quadratic-growth extrapolation).
inline std::vector<double> second_diff_slice(const Grid1D& g, const double* v) {
    const int n = g.n_points;
    const double dx2 = g.dx() * g.dx();
    std::vector<double> d(n);
    for (int j = 1; j + 1 < n; ++j) d[j] = (v[j + 1] - 2.0 * v[j] + v[j - 1]) / dx2;
    d[0] = d[1];
    d[n - 1] = d[n - 2];
    return d;
}

/// Max |a - b| over nodes with |x| <= x_cut, all time slices.
inline double max_diff_core(const ScalarField& a, const ScalarField& b, double x_cut) {
    double m = 0.0;
    for (int i = 0; i < a.mesh.n_nodes(); ++i)
        for (int j = 0; j < a.grid.n_points; ++j)
            if (std::abs(a.grid.x(j)) <= x_cut)
                m = std::max(m, std::abs(a.at(i, j) - b.at(i, j)));
    return m;
}

} // namespace mfct
