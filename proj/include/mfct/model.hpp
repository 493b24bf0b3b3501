#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "mfct/errors.hpp"
#include "mfct/measure.hpp"
#include "mfct/rng.hpp"

namespace mfct {

/// Constants of the coefficient assumptions: growth bounds c (running) and
/// c_T (terminal), the Hamiltonian gradient-weight delta, the strong-convexity
/// modulus lambda of l in v, and the weight exponent gamma of pi_gamma.
struct AssumptionConstants {
    double c = 1.0;
    double c_T = 1.0;
    double delta = 1.0;
    double lambda = 0.0;
    double gamma = 4.0;

    void validate(int dim) const {
        // c_T = 0 is the legitimate degenerate case of vanishing terminal data
        if (!(c > 0.0) || c_T < 0.0 || !(delta > 0.0))
            throw ConfigError("AssumptionConstants: need c > 0, delta > 0, c_T >= 0");
        if (lambda < 0.0) throw ConfigError("AssumptionConstants: lambda must be >= 0");
        if (!(gamma > 0.5 * dim + 3.0))
            throw ConfigError("AssumptionConstants: gamma must exceed dim/2 + 3");
    }
};

enum class FamilyTag { LQ_MEANFIELD, COLE_HOPF, CUSTOM };

/// Parameters of the built-in model families.
struct FamilyParams {
    double q_bar = 1.0;   // LQ: weight of the mean-coupling running cost F(m) = q_bar/2 (mean m)^2
    double h_T = 1.0;     // LQ: terminal curvature h(x) = h_T/2 x^2
    double q_bar_T = 0.0; // LQ: weight of the mean-coupling terminal cost F_T
    double curvature = 1.0; // Cole-Hopf: terminal curvature
};

struct BuiltinFamily {
    FamilyTag tag = FamilyTag::LQ_MEANFIELD;
    FamilyParams params;
};

/// One mean-field cost component: the functional value, its linear functional
/// derivative with x-derivative, and (optionally) the second functional
/// derivative with its z-derivative. The second-order callables may be left
/// empty when a model does not support derivative fields.
struct MfFunctional {
    std::function<double(const MeasureRef&)> value;
    std::function<double(const MeasureRef&, double)> ddnu;
    std::function<double(const MeasureRef&, double)> ddnu_dx;
    std::function<double(const MeasureRef&, double, double)> d2dnu2;
    std::function<double(const MeasureRef&, double, double)> d2dnu2_dz;

    static MfFunctional zero() {
        MfFunctional f;
        f.value = [](const MeasureRef&) { return 0.0; };
        f.ddnu = [](const MeasureRef&, double) { return 0.0; };
        f.ddnu_dx = [](const MeasureRef&, double) { return 0.0; };
        f.d2dnu2 = [](const MeasureRef&, double, double) { return 0.0; };
        f.d2dnu2_dz = [](const MeasureRef&, double, double) { return 0.0; };
        return f;
    }
};

/// The mean field control problem data. Immutable after construction; all
/// callables must be pure, so concurrent evaluation is safe.
struct ModelSpec {
    int dim = 1;
    double t = 0.0;
    double T = 1.0;
    std::vector<double> sigma; // row-major dim x dim volatility matrix

    std::function<double(double, double, double)> hamiltonian;     // H(s,x,p)
    std::function<double(double, double, double)> hamiltonian_dp;  // D_p H
    std::function<double(double, double, double)> hamiltonian_dx;  // D_x H
    std::function<double(double, double, double)> running_cost;    // l(s,x,v)
    std::function<double(double, double, double)> running_cost_dv; // D_v l
    std::function<double(double, double, double)> minimizer;       // vhat(s,x,p)

    std::function<double(double)> terminal_h;
    std::function<double(double)> terminal_dh;
    std::function<double(double)> terminal_d2h;

    MfFunctional mf_running;  // F
    MfFunctional mf_terminal; // F_T

    AssumptionConstants constants;
    FamilyTag family = FamilyTag::CUSTOM;
    FamilyParams family_params;

    double horizon() const { return T - t; }

    double sigma1() const { return sigma.at(0); }
    double a1() const { return sigma1() * sigma1(); }

    std::vector<double> a_matrix() const {
        std::vector<double> a(static_cast<size_t>(dim) * dim, 0.0);
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < dim; ++j)
                for (int k = 0; k < dim; ++k)
                    a[i * dim + j] += sigma[i * dim + k] * sigma[j * dim + k];
        return a;
    }

    double tr_a() const {
        const auto a = a_matrix();
        double tr = 0.0;
        for (int i = 0; i < dim; ++i) tr += a[i * dim + i];
        return tr;
    }
};

namespace detail {

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
inline double symmetric_min_eigenvalue(std::vector<double> a, int n) {
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off < 1e-28) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::abs(apq) < 1e-30) continue;
                const double theta = 0.5 * std::atan2(2.0 * apq, a[q * n + q] - a[p * n + p]);
                const double cth = std::cos(theta), sth = std::sin(theta);
                for (int k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = cth * akp - sth * akq;
                    a[k * n + q] = sth * akp + cth * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = cth * apk - sth * aqk;
                    a[q * n + k] = sth * apk + cth * aqk;
                }
            }
    }
    double lmin = a[0];
    for (int i = 1; i < n; ++i) lmin = std::min(lmin, a[i * n + i]);
    return lmin;
}

} // namespace detail

/// Central finite difference of D_p H in p; the second derivative needed by
/// the derivative-field machinery, which the model data does not carry.
inline double hamiltonian_dpp_fd(const ModelSpec& model, double s, double x, double p,
                                 double eps = 1e-5) {
    return (model.hamiltonian_dp(s, x, p + eps) - model.hamiltonian_dp(s, x, p - eps)) /
           (2.0 * eps);
}

/// Non-degeneracy of a = sigma sigma^T plus the minimizer compatibility
/// identities at a fixed deterministic sample. Raises on violations.
inline void validate_model(const ModelSpec& model) {
    if (model.dim < 1) throw ConfigError("ModelSpec: dim must be >= 1");
    if (!(model.T > model.t)) throw ConfigError("ModelSpec: need T > t");
    model.constants.validate(model.dim);
    if (static_cast<int>(model.sigma.size()) != model.dim * model.dim)
        throw ConfigError("ModelSpec: sigma must be dim x dim");

    const double lmin = detail::symmetric_min_eigenvalue(model.a_matrix(), model.dim);
    if (!(lmin > 1e-12))
        throw SingularSigma("a = sigma sigma^T is numerically singular (lambda_min = " +
                            std::to_string(lmin) + ")");

    if (model.dim != 1)
        throw Unsupported("reference numerics require dim = 1, got dim = " +
                          std::to_string(model.dim));

    // Compatibility identities (def. of vhat and D_p H = vhat) on a fixed sample.
    const uint64_t seed = 0xA0D17ULL;
    for (int k = 0; k < 64; ++k) {
        const double s = model.t + model.horizon() * rng::uniform(seed, 1, k);
        const double x = -6.0 + 12.0 * rng::uniform(seed, 2, k);
        const double p = -6.0 + 12.0 * rng::uniform(seed, 3, k);
        const double vh = model.minimizer(s, x, p);
        if (!std::isfinite(vh))
            throw MinimizerDomain("vhat non-finite at sampled (s,x,p)");
        const double foc = model.running_cost_dv(s, x, vh) + p;
        if (std::abs(foc) > 1e-8)
            throw AssumptionViolation("minimizer first-order condition D_v l + p = 0 fails at s=" +
                                      std::to_string(s) + ", x=" + std::to_string(x) +
                                      ", p=" + std::to_string(p) + " (residual " +
                                      std::to_string(foc) + ")");
        const double gap = model.hamiltonian_dp(s, x, p) - vh;
        if (std::abs(gap) > 1e-8)
            throw AssumptionViolation("identity D_p H = vhat fails at s=" + std::to_string(s) +
                                      ", x=" + std::to_string(x) + ", p=" + std::to_string(p));
        const double bound = model.constants.c * (1.0 + x * x) +
                             0.5 * model.constants.delta * p * p;
        if (std::abs(model.hamiltonian(s, x, p)) > bound * (1.0 + 1e-9))
            throw AssumptionViolation("Hamiltonian growth bound |H| <= c(1+|x|^2) + delta/2 |p|^2 "
                                      "fails at x=" + std::to_string(x) + ", p=" + std::to_string(p));
    }
}

/// Builds a ModelSpec for one of the built-in families and validates it.
inline ModelSpec build_model(const BuiltinFamily& family, std::pair<double, double> horizon,
                             double sigma, const AssumptionConstants& constants) {
    ModelSpec m;
    m.dim = 1;
    m.t = horizon.first;
    m.T = horizon.second;
    m.sigma = {sigma};
    m.constants = constants;
    m.family = family.tag;
    m.family_params = family.params;

    // Both built-in families run the quadratic control cost l = 1/2 |v|^2,
    // hence H(s,x,p) = -1/2 |p|^2 and vhat = -p.
    m.running_cost = [](double, double, double v) { return 0.5 * v * v; };
    m.running_cost_dv = [](double, double, double v) { return v; };
    m.minimizer = [](double, double, double p) { return -p; };
    m.hamiltonian = [](double, double, double p) { return -0.5 * p * p; };
    m.hamiltonian_dp = [](double, double, double p) { return -p; };
    m.hamiltonian_dx = [](double, double, double) { return 0.0; };

    switch (family.tag) {
    case FamilyTag::COLE_HOPF: {
        const double kappa = family.params.curvature;
        m.terminal_h = [kappa](double x) { return 0.5 * kappa * x * x; };
        m.terminal_dh = [kappa](double x) { return kappa * x; };
        m.terminal_d2h = [kappa](double) { return kappa; };
        m.mf_running = MfFunctional::zero();
        m.mf_terminal = MfFunctional::zero();
        break;
    }
    case FamilyTag::LQ_MEANFIELD: {
        const double hT = family.params.h_T;
        m.terminal_h = [hT](double x) { return 0.5 * hT * x * x; };
        m.terminal_dh = [hT](double x) { return hT * x; };
        m.terminal_d2h = [hT](double) { return hT; };

        auto mean_coupling = [](double weight) {
            MfFunctional f;
            f.value = [weight](const MeasureRef& mu) {
                const double mb = mu.mean();
                return 0.5 * weight * mb * mb;
            };
            f.ddnu = [weight](const MeasureRef& mu, double x) { return weight * mu.mean() * x; };
            f.ddnu_dx = [weight](const MeasureRef& mu, double) { return weight * mu.mean(); };
            f.d2dnu2 = [weight](const MeasureRef&, double x, double z) { return weight * x * z; };
            f.d2dnu2_dz = [weight](const MeasureRef&, double x, double) { return weight * x; };
            return f;
        };
        m.mf_running = mean_coupling(family.params.q_bar);
        m.mf_terminal = mean_coupling(family.params.q_bar_T);
        break;
    }
    case FamilyTag::CUSTOM:
        throw ConfigError("build_model: CUSTOM models are constructed directly as a ModelSpec "
                          "and checked with validate_model");
    }

    validate_model(m);
    return m;
}

/// One line of the assumption audit.
struct AuditEntry {
    std::string name;
    double max_ratio = 0.0;
    double at_s = 0.0, at_x = 0.0, at_p = 0.0;
    bool flagged = false;
};

struct AuditReport {
    std::vector<AuditEntry> entries;
    double max_minimizer_residual = 0.0; // |D_v l(s,x,vhat) + p|
    double max_dph_residual = 0.0;       // |D_p H - vhat|

    bool ok() const {
        for (const auto& e : entries)
            if (e.flagged) return false;
        return true;
    }
};

/// Samples the growth-bound ratios of the coefficient assumptions and reports
/// the largest observed value of each; a ratio above 1 is flagged. Report
/// only, never throws.
inline AuditReport audit_assumptions(const ModelSpec& model, int sample_budget) {
    if (sample_budget < 1) throw ConfigError("audit_assumptions: sample_budget must be >= 1");
    AuditReport rep;
    const auto& cst = model.constants;

    auto ratio_of = [](double num, double den) {
        if (num == 0.0) return 0.0; // degenerate bounds with zero data are fine
        return den > 0.0 ? num / den : std::numeric_limits<double>::infinity();
    };
    auto track = [&](std::vector<AuditEntry>& es, const std::string& name, double ratio, double s,
                     double x, double p) {
        for (auto& e : es) {
            if (e.name == name) {
                if (ratio > e.max_ratio) {
                    e.max_ratio = ratio;
                    e.at_s = s;
                    e.at_x = x;
                    e.at_p = p;
                    e.flagged = ratio > 1.0 + 1e-9;
                }
                return;
            }
        }
        es.push_back({name, ratio, s, x, p, ratio > 1.0 + 1e-9});
    };

    // Reference measures for the mean-field terms.
    const Grid1D g(-8.0, 8.0, 201);
    const std::vector<GridDensity> refs = {GridDensity::gaussian(g, 0.0, 1.0),
                                           GridDensity::gaussian(g, 1.0, 0.7),
                                           GridDensity::gaussian(g, -1.0, 1.5)};

    const uint64_t seed = 0xA0D17ULL;
    for (int k = 0; k < sample_budget; ++k) {
        const double s = model.t + model.horizon() * rng::uniform(seed, 11, k);
        const double x = -10.0 + 20.0 * rng::uniform(seed, 12, k);
        const double p = -10.0 + 20.0 * rng::uniform(seed, 13, k);

        track(rep.entries, "|H| / (c(1+|x|^2) + delta/2 |p|^2)",
              ratio_of(std::abs(model.hamiltonian(s, x, p)),
                       cst.c * (1.0 + x * x) + 0.5 * cst.delta * p * p),
              s, x, p);
        track(rep.entries, "|D_x H| / (c(1+|x|+|p|))",
              ratio_of(std::abs(model.hamiltonian_dx(s, x, p)),
                       cst.c * (1.0 + std::abs(x) + std::abs(p))),
              s, x, p);
        track(rep.entries, "|D_p H| / (c(1+|x|+|p|))",
              ratio_of(std::abs(model.hamiltonian_dp(s, x, p)),
                       cst.c * (1.0 + std::abs(x) + std::abs(p))),
              s, x, p);
        track(rep.entries, "|h| / (c_T(1+|x|^2))",
              ratio_of(std::abs(model.terminal_h(x)), cst.c_T * (1.0 + x * x)), s, x, 0.0);
        track(rep.entries, "|Dh| / (c_T(1+|x|))",
              ratio_of(std::abs(model.terminal_dh(x)), cst.c_T * (1.0 + std::abs(x))), s, x, 0.0);
        track(rep.entries, "|D^2 h| / c_T", ratio_of(std::abs(model.terminal_d2h(x)), cst.c_T), s,
              x, 0.0);

        const MeasureRef mu(refs[k % refs.size()]);
        track(rep.entries, "|dF/dnu| / (c(1+|x|^2))",
              ratio_of(std::abs(model.mf_running.ddnu(mu, x)), cst.c * (1.0 + x * x)), s, x, 0.0);
        track(rep.entries, "|D dF/dnu| / (c(1+|x|))",
              ratio_of(std::abs(model.mf_running.ddnu_dx(mu, x)), cst.c * (1.0 + std::abs(x))), s,
              x, 0.0);
        track(rep.entries, "|dF_T/dnu| / (c_T(1+|x|^2))",
              ratio_of(std::abs(model.mf_terminal.ddnu(mu, x)), cst.c_T * (1.0 + x * x)), s, x,
              0.0);
        track(rep.entries, "|D dF_T/dnu| / (c_T(1+|x|))",
              ratio_of(std::abs(model.mf_terminal.ddnu_dx(mu, x)), cst.c_T * (1.0 + std::abs(x))),
              s, x, 0.0);

        const double vh = model.minimizer(s, x, p);
        rep.max_minimizer_residual =
            std::max(rep.max_minimizer_residual, std::abs(model.running_cost_dv(s, x, vh) + p));
        rep.max_dph_residual =
            std::max(rep.max_dph_residual, std::abs(model.hamiltonian_dp(s, x, p) - vh));
    }
    return rep;
}

/// Overload wiring the measure-module chain rule to a model's diffusion.
inline double chain_rule_check(const ModelSpec& model, const TestFunctional& F_test,
                               const MeasureFlow& flow, const VectorField& drift_field) {
    return chain_rule_check(model.a1(), F_test, flow, drift_field);
}

} // namespace mfct
