#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mfct/oracle.hpp"
#include "mfct/valuefn.hpp"

using namespace mfct;

namespace {

ModelSpec lq_model(double t, double T, double q_bar, double h_T, double q_bar_T, double c) {
    BuiltinFamily fam;
    fam.tag = FamilyTag::LQ_MEANFIELD;
    fam.params.q_bar = q_bar;
    fam.params.h_T = h_T;
    fam.params.q_bar_T = q_bar_T;
    AssumptionConstants cst;
    cst.c = c;
    cst.c_T = std::max(1.0, h_T);
    cst.delta = 1.0;
    cst.lambda = 0.5;
    return build_model(fam, {t, T}, 1.0, cst);
}

} // namespace

TEST_CASE("value of the zero problem is zero") {
    const ModelSpec model = lq_model(0.0, 0.2, 0.0, 0.0, 0.0, 1.0);
    const Grid1D grid(-8.0, 8.0, 201);
    const TimeMesh mesh(0.0, 0.2, 100);
    const GridDensity m0 = GridDensity::gaussian(grid, 0.3, 0.8);
    FixedPointConfig cfg;
    const MFTCSolution sol = solve_mftc(model, m0, mesh, grid, cfg);
    const ValueRecord rec = value_from_solution(model, sol.hjb, sol.flow);
    CHECK(std::abs(rec.phi) <= 1e-10);
}

TEST_CASE("value record sums its parts exactly") {
    const ModelSpec model = lq_model(0.0, 0.2, 1.0, 1.0, 0.5, 0.5);
    const Grid1D grid(-8.0, 8.0, 201);
    const TimeMesh mesh(0.0, 0.2, 100);
    const GridDensity m0 = GridDensity::gaussian(grid, 0.5, 0.7);
    FixedPointConfig cfg;
    const MFTCSolution sol = solve_mftc(model, m0, mesh, grid, cfg);
    const ValueRecord rec = value_from_solution(model, sol.hjb, sol.flow);

    double acc = 0.0;
    const double dt = mesh.dt();
    for (int i = 0; i < mesh.n_nodes(); ++i)
        acc += ((i == 0 || i == mesh.n_steps) ? 0.5 * dt : dt) * rec.running[i];
    acc += rec.terminal;
    CHECK(rec.phi == acc);
}

TEST_CASE("lq value matches the oracle") {
    const double T = 0.2;
    const ModelSpec model = lq_model(0.0, T, 1.0, 1.0, 0.5, 0.5);
    const Grid1D grid(-8.0, 8.0, 201);
    const TimeMesh mesh(0.0, T, 100);
    const GridDensity m0 = GridDensity::gaussian(grid, 0.5, 0.7);
    FixedPointConfig cfg;
    const MFTCSolution sol = solve_mftc(model, m0, mesh, grid, cfg);
    const ValueRecord rec = value_from_solution(model, sol.hjb, sol.flow);

    const LQClosedForm lq =
        lq_closed_form(model.family_params, 0.0, T, 1.0, moments(m0, 1), moments(m0, 2));
    CHECK(std::abs(rec.phi - lq.phi_value()) <= 2e-3);
}

TEST_CASE("cole-hopf value collapses to the point value for a narrow start") {
    BuiltinFamily fam;
    fam.tag = FamilyTag::COLE_HOPF;
    AssumptionConstants cst;
    cst.c = 1.0;
    cst.c_T = 1.0;
    cst.delta = 1.0;
    cst.lambda = 0.5;
    const double T = 0.2;
    const ModelSpec model = build_model(fam, {0.0, T}, 1.0, cst);
    const Grid1D grid(-8.0, 8.0, 401);
    const TimeMesh mesh(0.0, T, 100);
    const GridDensity m0 = GridDensity::gaussian(grid, 0.0, 0.2);
    FixedPointConfig cfg;
    const MFTCSolution sol = solve_mftc(model, m0, mesh, grid, cfg);
    const ValueRecord rec = value_from_solution(model, sol.hjb, sol.flow);

    const ColeHopfOracle oracle(1.0, 1.0, 0.0, T);
    // decoupled: Phi = int V dm0; narrow m0 makes it approach V(t, 0)
    CHECK(std::abs(rec.phi - oracle.value(0.0, 0.0)) <= 0.025);

    std::vector<double> v0 = sol.hjb.V.slice_copy(0);
    const MeasureRef ref(m0);
    const double linear = ref.integrate([&](double x) { return lerp_on_grid(grid, v0, x); });
    CHECK(std::abs(rec.phi - linear) <= 5e-3);
}

TEST_CASE("mc cost") {
    const double T = 0.2;
    const ModelSpec model = lq_model(0.0, T, 1.0, 1.0, 0.5, 0.5);
    const Grid1D grid(-8.0, 8.0, 201);
    const TimeMesh mesh(0.0, T, 100);
    const GridDensity m0 = GridDensity::gaussian(grid, 0.5, 0.7);
    FixedPointConfig cfg;
    const MFTCSolution sol = solve_mftc(model, m0, mesh, grid, cfg);
    const ValueRecord rec = value_from_solution(model, sol.hjb, sol.flow);

    MCParams mc;
    mc.n_particles = 20000;
    mc.seed = 314;

    const VectorField& policy_field = sol.hjb.policy;
    auto policy = [&](double s, double x) {
        const int i = std::min(static_cast<int>(std::lround((s - mesh.t) / mesh.dt())),
                               mesh.n_steps);
        std::vector<double> slice(policy_field.slice(i), policy_field.slice(i) + grid.n_points);
        return lerp_on_grid(grid, slice, x);
    };

    SECTION("zero policy with zero costs gives exactly zero") {
        const ModelSpec zero = lq_model(0.0, T, 0.0, 0.0, 0.0, 1.0);
        const MCCost out =
            mc_cost(zero, [](double, double) { return 0.0; }, m0, mesh, mc);
        CHECK(out.J == 0.0);
        CHECK(out.stderr_J == 0.0);
    }
    SECTION("optimal policy reproduces the value") {
        const MCCost out = mc_cost(model, policy, m0, mesh, mc);
        CHECK(std::abs(out.J - rec.phi) <= 3.0 * out.stderr_J + 2e-3);
    }
    SECTION("perturbed policies cost at least the value") {
        auto perturbed = [&](double s, double x) { return policy(s, x) + 0.2 * std::sin(x); };
        const MCCost out = mc_cost(model, perturbed, m0, mesh, mc);
        CHECK(out.J >= rec.phi - 3.0 * out.stderr_J);
    }
    SECTION("girsanov-reweighted variant agrees with direct simulation") {
        const MCCost direct = mc_cost(model, policy, m0, mesh, mc);
        const MCCost rewt = mc_cost_girsanov(model, policy, m0, mesh, mc);
        CHECK(std::abs(direct.J - rewt.J) <=
              3.0 * std::hypot(direct.stderr_J, rewt.stderr_J) + 2e-3);
    }
    SECTION("policy growth violation raises") {
        CHECK_THROWS_AS(mc_cost(model, [](double, double x) { return std::exp(5.0 * std::abs(x)); },
                                m0, mesh, mc),
                        GrowthViolation);
    }
}

TEST_CASE("value derivative identity") {
    const double T = 0.2;
    const Grid1D grid(-8.0, 8.0, 201);
    const TimeMesh mesh(0.0, T, 100);
    const GridDensity m0 = GridDensity::gaussian(grid, 0.4, 0.7);
    FixedPointConfig cfg;

    SECTION("zero direction is exact") {
        const ModelSpec model = lq_model(0.0, T, 1.0, 1.0, 0.0, 0.5);
        CHECK(value_derivative_check(model, m0, mesh, grid, cfg, [](double) { return 0.0; },
                                     1e-2) <= 1e-12);
    }
    SECTION("mean shift on the lq family") {
        const ModelSpec model = lq_model(0.0, T, 1.0, 1.0, 0.5, 0.5);
        CHECK(value_derivative_check(model, m0, mesh, grid, cfg, [](double) { return 1.0; },
                                     5e-3) <= 5e-3);
    }
}

TEST_CASE("vbar field") {
    const double T = 0.2;
    const ModelSpec model = lq_model(0.0, T, 1.0, 1.0, 0.5, 0.5);
    const Grid1D grid(-8.0, 8.0, 201);
    const TimeMesh mesh(0.0, T, 100);
    const GridDensity m0 = GridDensity::gaussian(grid, 0.5, 0.7);
    FixedPointConfig cfg;
    // shared across sections; the solves are the expensive part
    static const MFTCSolution sol = solve_mftc(model, m0, mesh, grid, cfg);

    VbarConfig vcfg;
    vcfg.grid = Grid1D(-8.0, 8.0, 81);
    vcfg.n_steps = 50;
    static const DerivativeField vbar = solve_vbar(model, sol.hjb, sol.flow, vcfg);

    const LQClosedForm lq =
        lq_closed_form(model.family_params, 0.0, T, 1.0, moments(m0, 1), moments(m0, 2));

    SECTION("bilinear coefficient matches the sensitivity ode") {
        // mixed second difference isolates the x z coefficient
        const Grid1D& g = vcfg.grid;
        const int j1 = g.nearest(1.0), j0 = g.nearest(-1.0);
        for (int i : {0, vcfg.n_steps / 2}) {
            const double mixed = (vbar.at(i, j1, j1) - vbar.at(i, j1, j0) -
                                  vbar.at(i, j0, j1) + vbar.at(i, j0, j0)) /
                                 ((g.x(j1) - g.x(j0)) * (g.x(j1) - g.x(j0)));
            const double s = vbar.mesh.time(i);
            CHECK(std::abs(mixed - lq.alpha_at(s)) <= 5e-3);
        }
    }
    SECTION("symmetry at the initial time") {
        double worst = 0.0;
        const Grid1D& g = vcfg.grid;
        for (double xa : {-2.0, -0.5, 1.0, 2.5})
            for (double xb : {-1.5, 0.5, 2.0}) {
                const int ja = g.nearest(xa), jb = g.nearest(xb);
                worst = std::max(worst, std::abs(vbar.at(0, ja, jb) - vbar.at(0, jb, ja)));
            }
        CHECK(worst <= 1e-2);
    }
    SECTION("zero second derivative data gives the zero field") {
        BuiltinFamily fam;
        fam.tag = FamilyTag::COLE_HOPF;
        AssumptionConstants cst;
        cst.c = 1.0;
        cst.c_T = 1.0;
        cst.delta = 1.0;
        cst.lambda = 0.5;
        const ModelSpec decoupled = build_model(fam, {0.0, T}, 1.0, cst);
        const MFTCSolution dsol = solve_mftc(decoupled, m0, mesh, grid, cfg);
        const DerivativeField zero = solve_vbar(decoupled, dsol.hjb, dsol.flow, vcfg);
        double worst = 0.0;
        for (double v : zero.vbar) worst = std::max(worst, std::abs(v));
        CHECK(worst == 0.0);
    }
    SECTION("green-source consistency against the direct table route") {
        // the direct part of the source at the terminal index must equal the
        // green-table quadrature of d2F/dnu2 (two readings of one linear map)
        const Grid1D& g = vcfg.grid;
        const TimeMesh& vm = vbar.mesh;
        VectorField drift(vm, g);
        for (int i = 0; i < vm.n_nodes(); ++i) {
            const auto dv = valuefn_detail::resample_slice(sol.hjb.DV, vm.time(i), g);
            for (int j = 0; j < g.n_points; ++j)
                drift.at(i, j) = model.hamiltonian_dp(vm.time(i), g.x(j), dv[j]);
        }
        const GreenTable table = tabulate_green(drift, model.sigma1(), vm, g, vm.n_steps);
        const MeasureRef mT = slice_ref(sol.flow, mesh.n_steps);
        double worst = 0.0;
        for (int jx = 20; jx <= 60; jx += 20) {
            for (int jz = 20; jz <= 60; jz += 10) {
                double acc = 0.0;
                for (int zeta = 0; zeta < g.n_points; ++zeta)
                    acc += g.weight(zeta) * table.G(0, jz, zeta) *
                           model.mf_running.d2dnu2(mT, g.x(jx), g.x(zeta));
                const size_t idx =
                    (static_cast<size_t>(vm.n_steps) * g.n_points + jx) * g.n_points + jz;
                worst = std::max(worst, std::abs(acc - vbar.source_direct[idx]));
            }
        }
        CHECK(worst <= 1e-6);
    }
}

TEST_CASE("master residual") {
    const double T = 0.2;
    const Grid1D grid(-8.0, 8.0, 201);
    const TimeMesh mesh(0.0, T, 100);
    const std::vector<double> probes = {-2.0, -1.0, 0.0, 1.0, 2.0};

    SECTION("decoupled case reduces to the hjb discretization error") {
        BuiltinFamily fam;
        fam.tag = FamilyTag::COLE_HOPF;
        AssumptionConstants cst;
        cst.c = 1.0;
        cst.c_T = 1.0;
        cst.delta = 1.0;
        cst.lambda = 0.5;
        const ModelSpec model = build_model(fam, {0.0, T}, 1.0, cst);
        const GridDensity m0 = GridDensity::gaussian(grid, 0.0, 0.8);
        MasterConfig mcfg;
        mcfg.vbar.grid = Grid1D(-8.0, 8.0, 81);
        mcfg.vbar.n_steps = 50;
        const MasterResidual res = master_residual(model, m0, probes, mesh, grid, mcfg);
        CHECK(res.max_abs <= 0.02);
    }
    SECTION("zero data has zero residual") {
        const ModelSpec model = lq_model(0.0, T, 0.0, 0.0, 0.0, 1.0);
        const GridDensity m0 = GridDensity::gaussian(grid, 0.0, 0.8);
        MasterConfig mcfg;
        mcfg.vbar.grid = Grid1D(-8.0, 8.0, 81);
        mcfg.vbar.n_steps = 50;
        const MasterResidual res = master_residual(model, m0, probes, mesh, grid, mcfg);
        CHECK(res.max_abs <= 1e-9);
    }
    SECTION("lq family stays within the loose threshold") {
        const ModelSpec model = lq_model(0.0, T, 1.0, 1.0, 0.5, 0.5);
        const GridDensity m0 = GridDensity::gaussian(grid, 0.5, 0.7);
        MasterConfig mcfg;
        mcfg.vbar.grid = Grid1D(-8.0, 8.0, 81);
        mcfg.vbar.n_steps = 50;
        const MasterResidual res = master_residual(model, m0, probes, mesh, grid, mcfg);
        CHECK(res.max_abs <= 0.05);
    }
}
