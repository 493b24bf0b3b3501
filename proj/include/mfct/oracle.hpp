#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "mfct/errors.hpp"
#include "mfct/fields.hpp"
#include "mfct/grid.hpp"
#include "mfct/measure.hpp"
#include "mfct/model.hpp"
#include "mfct/rng.hpp"

// Ground-truth solutions used by the acceptance suite. Everything here is
// built from quadrature, fixed-step RK4 and plain Monte Carlo only, so the
// oracles share no machinery with the PDE/HJB solvers they arbitrate.

namespace mfct {

namespace oracle_detail {

inline double simpson(const std::function<double(double)>& f, double a, double b, int panels) {
    if (b <= a) return 0.0;
    const double h = (b - a) / panels;
    double s = f(a) + f(b);
    for (int k = 1; k < panels; ++k) s += f(a + k * h) * ((k % 2) ? 4.0 : 2.0);
    return s * h / 3.0;
}

template <size_t N>
using State = std::array<double, N>;

/// One RK4 step of y' = f(s, y).
template <size_t N, typename Fn>
State<N> rk4_step(const Fn& f, double s, const State<N>& y, double h) {
    auto add = [](const State<N>& a, const State<N>& b, double w) {
        State<N> r;
        for (size_t i = 0; i < N; ++i) r[i] = a[i] + w * b[i];
        return r;
    };
    const State<N> k1 = f(s, y);
    const State<N> k2 = f(s + 0.5 * h, add(y, k1, 0.5 * h));
    const State<N> k3 = f(s + 0.5 * h, add(y, k2, 0.5 * h));
    const State<N> k4 = f(s + h, add(y, k3, h));
    State<N> out;
    for (size_t i = 0; i < N; ++i)
        out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    return out;
}

} // namespace oracle_detail

/// Exact solution of the decoupled HJB equation with H = -1/2 |p|^2 via the
/// Cole-Hopf transform: V*(s,x) = -a ln w(s,x) with w the backward heat
/// solution from w(T,x) = exp(-h(x)/a), h(x) = curvature/2 x^2. The heat
/// convolution and its derivatives are evaluated by Gaussian-kernel Simpson
/// quadrature.
class ColeHopfOracle {
public:
    ColeHopfOracle(double curvature, double a, double t, double T)
        : curvature_(curvature), a_(a), t_(t), T_(T) {
        if (!(curvature > 0.0))
            throw KernelOverflow("cole_hopf: curvature must be positive for an integrable kernel");
        if (!(a > 0.0)) throw KernelOverflow("cole_hopf: need a > 0");
    }

    double value(double s, double x) const {
        const double v = a_ * (T_ - s);
        if (v <= 1e-14) return 0.5 * curvature_ * x * x;
        return -a_ * std::log(w_moment(s, x, 0));
    }

    /// |−V_s − (a/2) V_xx + 1/2 V_x^2| with every derivative taken through
    /// the quadrature representation (independent kernel-derivative formulas).
    double pde_residual(double s, double x) const {
        const double v = a_ * (T_ - s);
        if (v <= 1e-10) return 0.0;
        const double w = w_moment(s, x, 0);
        const double wx = w_moment(s, x, 1);
        const double wxx = w_moment(s, x, 2);
        const double wv = w_moment(s, x, 3);
        const double ws = -a_ * wv; // v(s) = a (T - s)
        const double Vs = -a_ * ws / w;
        const double Vx = -a_ * wx / w;
        const double Vxx = -a_ * (wxx / w - (wx / w) * (wx / w));
        return std::abs(-Vs - 0.5 * a_ * Vxx + 0.5 * Vx * Vx);
    }

private:
    // moment: 0 -> w, 1 -> w_x, 2 -> w_xx, 3 -> w_v
    double w_moment(double s, double x, int moment) const {
        const double v = a_ * (T_ - s);
        const double precision = 1.0 / v + curvature_ / a_;
        if (!(precision > 0.0))
            throw KernelOverflow("cole_hopf: convolution integrand is not integrable");
        const double center = (x / v) / precision;
        const double sd = 1.0 / std::sqrt(precision);
        const double norm = 1.0 / std::sqrt(2.0 * M_PI * v);
        auto integrand = [&](double y) {
            const double u = x - y;
            const double expo = -0.5 * u * u / v - 0.5 * curvature_ * y * y / a_;
            if (expo > 700.0) throw KernelOverflow("cole_hopf: integrand exceeds float range");
            const double base = norm * std::exp(expo);
            switch (moment) {
            case 0: return base;
            case 1: return -u / v * base;
            case 2: return (u * u / (v * v) - 1.0 / v) * base;
            default: return (0.5 * u * u / (v * v) - 0.5 / v) * base;
            }
        };
        return oracle_detail::simpson(integrand, center - 12.0 * sd, center + 12.0 * sd, 512);
    }

    double curvature_, a_, t_, T_;
};

/// Nodal evaluation of the Cole-Hopf oracle.
inline ScalarField cole_hopf_solution(double curvature, double a, const TimeMesh& mesh,
                                      const Grid1D& grid) {
    const ColeHopfOracle oracle(curvature, a, mesh.t, mesh.T);
    ScalarField f(mesh, grid);
    for (int i = 0; i < mesh.n_nodes(); ++i)
        for (int j = 0; j < grid.n_points; ++j) f.at(i, j) = oracle.value(mesh.time(i), grid.x(j));
    return f;
}

/// Closed-form (ODE-level) solution of the LQ mean-field family:
///   V(s,x) = 1/2 P(s) x^2 + r(s) x + k(s),   mbar(s) the flow mean,
/// with P' = P^2, r' = P r - q_bar mbar, mbar' = -(P mbar + r),
/// k' = 1/2 r^2 - a/2 P, terminal P(T) = h_T, r(T) = q_bar_T mbar(T),
/// k(T) = 0. alpha(s) is the sensitivity d r(s) / d mbar(t), the bilinear
/// coefficient of the first-order derivative field. The two-point coupling is
/// resolved by exact affine shooting (the system is linear in (r, mbar)).
struct LQClosedForm {
    double t = 0.0, T = 1.0, a = 1.0;
    double m0_mean = 0.0;
    FamilyParams params;
    int n_fine = 4000;
    std::vector<double> P, r, k, mbar, alpha, alpha_mean, m2;

    double h_fine() const { return (T - t) / n_fine; }
    double s_at(int i) const { return t + i * h_fine(); }

    double interp(const std::vector<double>& ys, double s) const {
        const double u = (s - t) / h_fine();
        int i = static_cast<int>(std::floor(u));
        if (i < 0) i = 0;
        if (i > n_fine - 1) i = n_fine - 1;
        const double w = u - i;
        return ys[i] * (1.0 - w) + ys[i + 1] * w;
    }

    double P_at(double s) const { return interp(P, s); }
    double r_at(double s) const { return interp(r, s); }
    double k_at(double s) const { return interp(k, s); }
    double mbar_at(double s) const { return interp(mbar, s); }
    double alpha_at(double s) const { return interp(alpha, s); }
    double m2_at(double s) const { return interp(m2, s); }

    double value(double s, double x) const {
        return 0.5 * P_at(s) * x * x + r_at(s) * x + k_at(s);
    }
    double gradient(double s, double x) const { return P_at(s) * x + r_at(s); }
    double policy(double s, double x) const { return -gradient(s, x); }

    /// Optimal value Phi(t, m0) from the running/terminal cost integrals.
    double phi_value() const {
        const double qb = params.q_bar, qbT = params.q_bar_T, hT = params.h_T;
        auto running = [&](double s) {
            const double Ps = P_at(s), rs = r_at(s), ms = mbar_at(s), m2s = m2_at(s);
            const double control = 0.5 * (Ps * Ps * m2s + 2.0 * Ps * rs * ms + rs * rs);
            return control + 0.5 * qb * ms * ms;
        };
        const double run = oracle_detail::simpson(running, t, T, 2048);
        const double mT = mbar_at(T), m2T = m2_at(T);
        return run + 0.5 * hT * m2T + 0.5 * qbT * mT * mT;
    }

    /// Max residual of all governing ODEs at interior fine nodes, derivatives
    /// by 5-point centered differences.
    double max_ode_residual() const {
        auto d5 = [&](const std::vector<double>& y, int i) {
            return (-y[i + 2] + 8.0 * y[i + 1] - 8.0 * y[i - 1] + y[i - 2]) / (12.0 * h_fine());
        };
        double worst = 0.0;
        const double qb = params.q_bar;
        for (int i = 2; i + 2 <= n_fine; i += 3) {
            worst = std::max(worst, std::abs(d5(P, i) - P[i] * P[i]));
            worst = std::max(worst, std::abs(d5(r, i) - (P[i] * r[i] - qb * mbar[i])));
            worst = std::max(worst, std::abs(d5(mbar, i) + (P[i] * mbar[i] + r[i])));
            worst = std::max(worst, std::abs(d5(k, i) - (0.5 * r[i] * r[i] - 0.5 * a * P[i])));
            worst = std::max(worst, std::abs(d5(alpha, i) - (P[i] * alpha[i] - qb * alpha_mean[i])));
        }
        return worst;
    }
};

inline LQClosedForm lq_closed_form(const FamilyParams& params, double t, double T, double a,
                                   double m0_mean, double m0_second_moment = 0.0,
                                   int n_fine = 4000) {
    using oracle_detail::rk4_step;
    LQClosedForm out;
    out.t = t;
    out.T = T;
    out.a = a;
    out.m0_mean = m0_mean;
    out.params = params;
    out.n_fine = n_fine;
    const double h = out.h_fine();
    const double qb = params.q_bar, qbT = params.q_bar_T, hT = params.h_T;

    // P from the Riccati closed form, evaluated exactly wherever the RK4
    // stages of the coupled states need it.
    auto P_of = [=](double s) {
        const double den = 1.0 + hT * (T - s);
        if (!(den > 0.0)) throw ShootingDivergence("lq_closed_form: Riccati blow-up on [t, T]");
        return hT / den;
    };
    out.P.assign(n_fine + 1, 0.0);
    for (int i = 0; i <= n_fine; ++i) out.P[i] = P_of(out.s_at(i));

    // Basis sweep for the homogeneous linear pair (r, mbar) with terminal
    // (qbT u, u), u = 1; solutions scale linearly in u.
    std::vector<double> basis_r(n_fine + 1), basis_m(n_fine + 1);
    {
        oracle_detail::State<2> y{qbT, 1.0};
        basis_r[n_fine] = y[0];
        basis_m[n_fine] = y[1];
        auto f = [&](double s, const oracle_detail::State<2>& v) {
            return oracle_detail::State<2>{P_of(s) * v[0] - qb * v[1],
                                           -(P_of(s) * v[1] + v[0])};
        };
        for (int i = n_fine; i > 0; --i) {
            y = rk4_step(f, out.s_at(i), y, -h);
            basis_r[i - 1] = y[0];
            basis_m[i - 1] = y[1];
        }
    }
    const double mean_response = basis_m.front(); // d mbar(t) / d mbar(T)
    if (!std::isfinite(mean_response) || std::abs(mean_response) < 1e-12)
        throw ShootingDivergence("lq_closed_form: shooting for the mean is singular");
    const double ustar = m0_mean / mean_response;

    out.r.assign(n_fine + 1, 0.0);
    out.mbar.assign(n_fine + 1, 0.0);
    out.alpha.assign(n_fine + 1, 0.0);
    out.alpha_mean.assign(n_fine + 1, 0.0);
    for (int i = 0; i <= n_fine; ++i) {
        out.r[i] = ustar * basis_r[i];
        out.mbar[i] = ustar * basis_m[i];
        // sensitivity to the initial mean: same basis normalized to A(t) = 1
        out.alpha[i] = basis_r[i] / mean_response;
        out.alpha_mean[i] = basis_m[i] / mean_response;
    }

    // Final joint backward pass for (r, mbar, k); integrating them together
    // keeps the RK4 stages consistent (no interpolation inside stages).
    out.k.assign(n_fine + 1, 0.0);
    {
        oracle_detail::State<3> y{qbT * ustar, ustar, 0.0};
        auto f = [&](double s, const oracle_detail::State<3>& v) {
            return oracle_detail::State<3>{P_of(s) * v[0] - qb * v[1],
                                           -(P_of(s) * v[1] + v[0]),
                                           0.5 * v[0] * v[0] - 0.5 * a * P_of(s)};
        };
        for (int i = n_fine; i > 0; --i) {
            y = rk4_step(f, out.s_at(i), y, -h);
            out.k[i - 1] = y[2];
        }
    }

    // Forward joint pass (r, mbar, m2) from the now-known initial slope;
    // m2' = -2 P m2 - 2 r mbar + a.
    out.m2.assign(n_fine + 1, 0.0);
    {
        oracle_detail::State<3> y{out.r.front(), m0_mean, m0_second_moment};
        out.m2[0] = m0_second_moment;
        auto f = [&](double s, const oracle_detail::State<3>& v) {
            return oracle_detail::State<3>{P_of(s) * v[0] - qb * v[1],
                                           -(P_of(s) * v[1] + v[0]),
                                           -2.0 * P_of(s) * v[2] - 2.0 * v[0] * v[1] + a};
        };
        for (int i = 0; i < n_fine; ++i) {
            y = rk4_step(f, out.s_at(i), y, h);
            out.m2[i + 1] = y[2];
        }
    }
    return out;
}

/// Plain Monte-Carlo Feynman-Kac estimate of E[phi(X_s)] along Euler paths of
/// the controlled SDE with drift D_p H(s, x, DV(s,x)); the independent check
/// of the dual backward-PDE route. Returns (estimate, standard error).
inline std::pair<double, double> brute_force_dual(const ModelSpec& model, const VectorField& DV,
                                                  const std::function<double(double)>& phi,
                                                  const GridDensity& m0, int s_index,
                                                  int n_paths, uint64_t seed = 2024) {
    if (n_paths < 1000) throw ConfigError("brute_force_dual: need n_paths >= 1000");
    if (s_index < 0 || s_index > DV.mesh.n_steps)
        throw MeshMismatch("brute_force_dual: s_index outside the mesh");
    const TimeMesh& mesh = DV.mesh;
    const double dt = mesh.dt(), sq = std::sqrt(dt), sigma = model.sigma1();
    const std::vector<double> F = m0.cdf();

    double sum = 0.0, sumsq = 0.0;
    for (int p = 0; p < n_paths; ++p) {
        double x = m0.quantile(rng::uniform(seed, p, 0), F);
        for (int i = 0; i < s_index; ++i) {
            SliceView dv(DV.grid, DV.slice(i));
            const double drift = model.hamiltonian_dp(mesh.time(i), x, dv(x));
            x += dt * drift + sigma * sq * rng::normal(seed, p, i + 1);
        }
        const double val = phi(x);
        sum += val;
        sumsq += val * val;
    }
    const double mean = sum / n_paths;
    const double var = std::max(0.0, sumsq / n_paths - mean * mean);
    return {mean, std::sqrt(var / n_paths)};
}

} // namespace mfct
