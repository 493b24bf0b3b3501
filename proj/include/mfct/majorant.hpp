#pragma once

#include <cmath>
#include <functional>
#include <utility>

#include "mfct/errors.hpp"
#include "mfct/fields.hpp"
#include "mfct/grid.hpp"
#include "mfct/model.hpp"

namespace mfct {

enum class MajorantMode { SMALL_TIME, GLOBAL_CONVEX };

/// Root function for the gradient-majorant Riccati reduction:
/// l(eta) = (1/eta)(1 + 1/(4 eta))^2 - 1 - 1/eta, monotone decreasing from
/// +infinity to -1 on (0, infinity).
inline double eta_root_function(double eta) {
    const double q = 1.0 + 1.0 / (4.0 * eta);
    return q * q / eta - 1.0 - 1.0 / eta;
}

/// Unique positive root of eta_root_function by bisection.
inline double eta_star(double tolerance = 1e-12) {
    if (!(tolerance > 0.0)) throw ConfigError("eta_star: tolerance must be positive");
    double lo = 1e-6, hi = 1e3;
    double flo = eta_root_function(lo), fhi = eta_root_function(hi);
    if (!(flo > 0.0) || !(fhi < 0.0))
        throw BracketFailure("eta_star: no sign change on the bracket (arithmetic bug)");
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double fm = eta_root_function(mid);
        if (std::abs(fm) <= tolerance && (hi - lo) <= 1e-14 * (1.0 + mid)) return mid;
        (fm > 0.0 ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

/// Maximal horizon lengths for the small-time a priori bounds: the first from
/// the Riccati blow-up of beta, the second from the gradient-majorant
/// reduction with eta = eta*.
inline std::pair<double, double> feasibility_windows(const AssumptionConstants& cst) {
    const double c = cst.c, cT = cst.c_T, delta = cst.delta;
    const double window_V =
        (0.5 * M_PI - std::atan(2.0 * cT * std::sqrt(delta / c))) / (2.0 * std::sqrt(delta * c));
    const double eta = eta_star();
    const double K = 1.0 / eta + 1.0 / (4.0 * eta * eta);
    const double window_DV = 1.0 / (2.0 * c * eta * (2.0 * cT + K));
    return {window_V, window_DV};
}

/// Closed-form majorant coefficients and feasibility data for one model.
struct MajorantParams {
    std::function<double(double)> beta;     // z = beta |x|^2 / 2 + mu
    std::function<double(double)> mu;
    std::function<double(double)> beta_bar; // z_bar = beta_bar |x|^2 / 2 + mu_bar
    std::function<double(double)> mu_bar;
    double eta_star = 0.0;
    double window_V = 0.0;
    double window_DV = 0.0;
    bool global_mode = false;
};

namespace majorant_detail {

/// Composite-Simpson quadrature of f over [a, b] with a fixed even panel count.
inline double simpson(const std::function<double(double)>& f, double a, double b, int panels) {
    if (b <= a) return 0.0;
    const double h = (b - a) / panels;
    double s = f(a) + f(b);
    for (int k = 1; k < panels; ++k) s += f(a + k * h) * ((k % 2) ? 4.0 : 2.0);
    return s * h / 3.0;
}

} // namespace majorant_detail

/// Builds the majorant coefficient functions for the given constants and
/// horizon. SMALL_TIME uses the tangent/rational closed forms and requires the
/// horizon inside both feasibility windows; GLOBAL_CONVEX uses the linear-in-
/// time forms valid under the convexity assumption, with the non-constructive
/// constants supplied as global_C (value level) and global_C_grad (gradient
/// level).
inline MajorantParams majorant_params(const AssumptionConstants& cst, double t, double T,
                                      double tr_a, MajorantMode mode, double global_C = 5.0,
                                      double global_C_grad = 5.0) {
    MajorantParams out;
    const double c = cst.c, cT = cst.c_T, delta = cst.delta;
    const auto windows = feasibility_windows(cst);
    out.window_V = windows.first;
    out.window_DV = windows.second;
    out.eta_star = eta_star();

    if (mode == MajorantMode::SMALL_TIME) {
        if (!(T - t < out.window_V))
            throw InfeasibleHorizon("horizon T-t = " + std::to_string(T - t) +
                                    " is not inside window_V = " + std::to_string(out.window_V));
        if (!(T - t < out.window_DV))
            throw InfeasibleHorizon("horizon T-t = " + std::to_string(T - t) +
                                    " is not inside window_DV = " + std::to_string(out.window_DV));

        const double theta_T = std::atan(2.0 * cT * std::sqrt(delta / c));
        const double rate = 2.0 * std::sqrt(delta * c);
        out.beta = [=](double s) {
            return 2.0 * std::sqrt(c / delta) * std::tan(theta_T + (T - s) * rate);
        };
        // mu(s) = 2 c_T + int_s^T [2c + beta tr(a)/2], with the tangent
        // integral in closed form.
        out.mu = [=](double s) {
            const double theta_s = theta_T + (T - s) * rate;
            return 2.0 * cT + 2.0 * c * (T - s) +
                   (tr_a / (2.0 * delta)) * std::log(std::cos(theta_T) / std::cos(theta_s));
        };

        const double eta = out.eta_star;
        const double K = 1.0 / eta + 1.0 / (4.0 * eta * eta);
        out.beta_bar = [=](double s) {
            return 1.0 / (1.0 / (2.0 * cT + K) - 2.0 * c * eta * (T - s)) - K;
        };
        const double growth = c * (4.0 + 1.0 / eta);
        auto beta_bar = out.beta_bar;
        out.mu_bar = [=](double s) {
            const double direct = cT * std::exp(growth * (T - s));
            const double integral = majorant_detail::simpson(
                [&](double tau) {
                    return (c * (1.0 + 1.0 / eta) + 0.5 * tr_a * beta_bar(tau)) *
                           std::exp(growth * (T - tau));
                },
                s, T, 512);
            return direct + integral;
        };
    } else {
        if (!(cst.lambda > 0.0))
            throw ConfigError("GLOBAL_CONVEX majorants require lambda > 0 (strong convexity)");
        out.global_mode = true;
        const double C = global_C;
        out.beta = [=](double s) { return 4.0 * cT + 2.0 * C * (T - s); };
        out.mu = [=](double s) {
            const double h = T - s;
            return 2.0 * cT + C * h + tr_a * (2.0 * cT * h + 0.5 * C * h * h);
        };
        // |DV| <= C_grad (1+|x|) gives 1/2 |DV|^2 <= C_grad^2 (1+|x|^2).
        const double Cg2 = global_C_grad * global_C_grad;
        out.beta_bar = [=](double) { return 2.0 * Cg2; };
        out.mu_bar = [=](double) { return Cg2; };
    }
    return out;
}

/// Nodal evaluations z(s,x) = beta(s)|x|^2/2 + mu(s) and the gradient analog.
inline std::pair<ScalarField, ScalarField> majorant_fields(const AssumptionConstants& cst,
                                                           const TimeMesh& mesh,
                                                           const Grid1D& grid, double tr_a,
                                                           MajorantMode mode,
                                                           double global_C = 5.0,
                                                           double global_C_grad = 5.0) {
    const MajorantParams p =
        majorant_params(cst, mesh.t, mesh.T, tr_a, mode, global_C, global_C_grad);
    ScalarField z(mesh, grid), z_bar(mesh, grid);
    for (int i = 0; i < mesh.n_nodes(); ++i) {
        const double s = mesh.time(i);
        const double b = p.beta(s), m = p.mu(s);
        const double bb = p.beta_bar(s), mb = p.mu_bar(s);
        for (int j = 0; j < grid.n_points; ++j) {
            const double x2 = grid.x(j) * grid.x(j);
            z.at(i, j) = 0.5 * b * x2 + m;
            z_bar.at(i, j) = 0.5 * bb * x2 + mb;
        }
    }
    return {std::move(z), std::move(z_bar)};
}

/// Polynomial decay weight pi_gamma(x) = (1+|x|^2)^(-gamma) sampled on a grid.
struct WeightedNorm {
    double gamma = 4.0;
    Grid1D grid;
    std::vector<double> values;

    WeightedNorm(double g, const Grid1D& gr) : gamma(g), grid(gr), values(gr.n_points) {
        if (!(gamma > 0.5 * 1 + 2.0))
            throw ConfigError("WeightedNorm: gamma must exceed n/2 + 2");
        for (int j = 0; j < gr.n_points; ++j)
            values[j] = std::pow(1.0 + gr.x(j) * gr.x(j), -gamma);
    }
};

/// Trapezoidal space-time integral of |field|^2 pi_gamma(x).
template <typename FieldT>
double weighted_norm(const FieldT& field, double gamma) {
    const WeightedNorm w(gamma, field.grid);
    const TimeMesh& mesh = field.mesh;
    double acc = 0.0;
    for (int i = 0; i < mesh.n_nodes(); ++i) {
        double slice = 0.0;
        for (int j = 0; j < field.grid.n_points; ++j) {
            const double v = field.at(i, j);
            slice += field.grid.weight(j) * v * v * w.values[j];
        }
        const double wt = (i == 0 || i == mesh.n_steps) ? 0.5 * mesh.dt() : mesh.dt();
        acc += wt * slice;
    }
    return acc;
}

} // namespace mfct
