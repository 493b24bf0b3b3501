#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mfct/flow.hpp"
#include "mfct/oracle.hpp"

using namespace mfct;

namespace {

ModelSpec lq_model(double t, double T, double q_bar = 0.0, double h_T = 1.0,
                   double q_bar_T = 0.0, double sigma = 1.0, double c = 1.0) {
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
    return build_model(fam, {t, T}, sigma, cst);
}

} // namespace

TEST_CASE("pure diffusion flows agree with the heat kernel") {
    const double T = 0.25;
    const ModelSpec model = lq_model(0.0, T);
    const Grid1D grid(-8.0, 8.0, 401);
    const TimeMesh mesh(0.0, T, 250);
    const GridDensity m0 = GridDensity::gaussian(grid, 0.0, 0.7);
    const VectorField DV(mesh, grid); // zero gradient -> zero drift

    MCParams mc;
    mc.n_particles = 20000;
    mc.seed = 99;

    const double target = 0.49 + T; // second moment grows by tr(a) (s - t)

    SECTION("fp grid") {
        MeasureFlow f = flow_from_gradient(model, DV, m0, FlowMethod::FP_GRID, mc);
        CHECK(std::abs(f.moment(mesh.n_steps, 2) - target) <= 2e-3);
    }
    SECTION("particle sde") {
        MeasureFlow f = flow_from_gradient(model, DV, m0, FlowMethod::PARTICLE_SDE, mc);
        const double se = std::sqrt(2.0) * target / std::sqrt(static_cast<double>(mc.n_particles));
        CHECK(std::abs(f.moment(mesh.n_steps, 2) - target) <= 3.0 * se + 2e-3);
    }
    SECTION("girsanov reweighting") {
        MeasureFlow f = flow_from_gradient(model, DV, m0, FlowMethod::GIRSANOV_REWEIGHT, mc);
        const double se = std::sqrt(2.0) * target / std::sqrt(static_cast<double>(mc.n_particles));
        CHECK(std::abs(f.moment(mesh.n_steps, 2) - target) <= 3.0 * se + 2e-3);
    }
}

TEST_CASE("transport flow moves the mean") {
    // DV = -1 makes the LQ drift D_p H = +1
    const double T = 0.3;
    const ModelSpec model = lq_model(0.0, T, 0.0, 1.0, 0.0, 0.05);
    const Grid1D grid(-8.0, 8.0, 401);
    const TimeMesh mesh(0.0, T, 300);
    const GridDensity m0 = GridDensity::gaussian(grid, -0.8, 0.3);
    VectorField DV = VectorField::constant(mesh, grid, -1.0);

    MCParams mc;
    mc.n_particles = 20000;
    mc.seed = 7;

    MeasureFlow grid_flow = flow_from_gradient(model, DV, m0, FlowMethod::FP_GRID, mc);
    CHECK(std::abs(grid_flow.moment(mesh.n_steps, 1) - (-0.8 + T)) <= 1e-3);

    MeasureFlow sde_flow = flow_from_gradient(model, DV, m0, FlowMethod::PARTICLE_SDE, mc);
    CHECK(std::abs(sde_flow.moment(mesh.n_steps, 1) - (-0.8 + T)) <= 3e-3);
}

TEST_CASE("tri-method agreement on an lq gradient") {
    const double T = 0.2;
    const ModelSpec model = lq_model(0.0, T, 1.0, 1.0, 0.5, 1.0, 0.5);
    const Grid1D grid(-8.0, 8.0, 401);
    const TimeMesh mesh(0.0, T, 200);
    const GridDensity m0 = GridDensity::gaussian(grid, 0.5, 0.7);

    const LQClosedForm lq = lq_closed_form(model.family_params, 0.0, T, 1.0, 0.5);
    VectorField DV(mesh, grid);
    for (int i = 0; i < mesh.n_nodes(); ++i)
        for (int j = 0; j < grid.n_points; ++j)
            DV.at(i, j) = lq.gradient(mesh.time(i), grid.x(j));

    MCParams mc;
    mc.n_particles = 20000;
    mc.seed = 4242;

    MeasureFlow fp = flow_from_gradient(model, DV, m0, FlowMethod::FP_GRID, mc);
    MeasureFlow sde = flow_from_gradient(model, DV, m0, FlowMethod::PARTICLE_SDE, mc);
    MeasureFlow gir = flow_from_gradient(model, DV, m0, FlowMethod::GIRSANOV_REWEIGHT, mc);

    auto se_of = [&](const MeasureFlow& f, int i, int order) {
        if (f.representation == MeasureFlow::Representation::GridDensities) return 0.0;
        const auto& e = f.particle_slices[i];
        double m = 0.0, m2 = 0.0;
        for (int p = 0; p < e.size(); ++p) {
            const double v = std::pow(e.positions[p], order);
            m += e.weights[p] * v;
            m2 += e.weights[p] * v * v;
        }
        return std::sqrt(std::max(0.0, m2 - m * m) / e.size());
    };

    for (int i = 0; i <= mesh.n_steps; i += mesh.n_steps / 10)
        for (int order : {1, 2}) {
            const double se_fp_sde =
                3.0 * std::hypot(se_of(fp, i, order), se_of(sde, i, order)) + 5e-3;
            CHECK(std::abs(fp.moment(i, order) - sde.moment(i, order)) <= se_fp_sde);
            const double se_fp_gir =
                3.0 * std::hypot(se_of(fp, i, order), se_of(gir, i, order)) + 5e-3;
            CHECK(std::abs(fp.moment(i, order) - gir.moment(i, order)) <= se_fp_gir);
            const double se_sde_gir =
                3.0 * std::hypot(se_of(sde, i, order), se_of(gir, i, order)) + 5e-3;
            CHECK(std::abs(sde.moment(i, order) - gir.moment(i, order)) <= se_sde_gir);
        }
}

TEST_CASE("dual expectation") {
    const double T = 0.25;
    const ModelSpec model = lq_model(0.0, T);
    const Grid1D grid(-8.0, 8.0, 401);
    const TimeMesh mesh(0.0, T, 250);
    const GridDensity m0 = GridDensity::gaussian(grid, 0.3, 0.7);
    const VectorField DV(mesh, grid);
    MCParams mc;

    SECTION("constants propagate exactly") {
        const double v = dual_expectation(
            model, DV, [](double) { return 1.0; }, m0, mesh.n_steps);
        CHECK(std::abs(v - 1.0) <= 1e-9);
    }
    SECTION("martingale mean under zero drift") {
        const double v = dual_expectation(
            model, DV, [](double z) { return z; }, m0, mesh.n_steps);
        CHECK(std::abs(v - moments(m0, 1)) <= 1e-6);
    }
    SECTION("duality with the forward grid flow") {
        MeasureFlow fp = flow_from_gradient(model, DV, m0, FlowMethod::FP_GRID, mc);
        const double v = dual_expectation(
            model, DV, [](double z) { return z * z; }, m0, mesh.n_steps);
        CHECK(std::abs(v - fp.moment(mesh.n_steps, 2)) <= 5e-3);
    }
    SECTION("growth violation rejected") {
        CHECK_THROWS_AS(dual_expectation(
                            model, DV, [](double z) { return std::exp(4.0 * std::abs(z)); }, m0,
                            mesh.n_steps),
                        GrowthViolation);
    }
}

TEST_CASE("girsanov diagnostics") {
    const double T = 0.5;
    const ModelSpec model = lq_model(0.0, T);
    const Grid1D grid(-8.0, 8.0, 201);
    const TimeMesh mesh(0.0, T, 250);
    const GridDensity m0 = GridDensity::gaussian(grid, 0.0, 0.7);
    MCParams mc;
    mc.n_particles = 10000;
    mc.seed = 11;

    SECTION("zero drift gives unit weights exactly") {
        const VectorField DV(mesh, grid);
        const GirsanovBatch batch = simulate_girsanov_batch(model, DV, m0, mc);
        const GirsanovDiagnostics d = girsanov_diagnostics(batch);
        for (int i = 0; i <= mesh.n_steps; i += 50) {
            CHECK(d.mean_weight[i] == 1.0);
            CHECK(d.stderr_weight[i] == 0.0);
        }
        CHECK_FALSE(d.martingale_flag);
    }
    SECTION("bounded drift keeps the martingale mean at one") {
        const VectorField DV = VectorField::constant(mesh, grid, -0.5); // drift 0.5
        const GirsanovBatch batch = simulate_girsanov_batch(model, DV, m0, mc);
        const GirsanovDiagnostics d = girsanov_diagnostics(batch);
        const int last = mesh.n_steps;
        CHECK(std::abs(d.mean_weight[last] - 1.0) <= 3.0 * d.stderr_weight[last]);
        CHECK(std::isfinite(d.mean_wx2[last]));
        CHECK(d.mean_wx2[last] > 0.0);
    }
    SECTION("weight degeneracy raises") {
        MCParams small = mc;
        small.n_particles = 1000;
        const VectorField DV = VectorField::constant(mesh, grid, -40.0);
        CHECK_THROWS_AS(
            flow_from_gradient(model, DV, m0, FlowMethod::GIRSANOV_REWEIGHT, small),
            WeightDegenerate);
    }
}

TEST_CASE("particle flows are deterministic") {
    const double T = 0.1;
    const ModelSpec model = lq_model(0.0, T);
    const Grid1D grid(-8.0, 8.0, 201);
    const TimeMesh mesh(0.0, T, 50);
    const GridDensity m0 = GridDensity::gaussian(grid, 0.0, 1.0);
    VectorField DV(mesh, grid);
    for (int i = 0; i < mesh.n_nodes(); ++i)
        for (int j = 0; j < grid.n_points; ++j) DV.at(i, j) = 0.3 * grid.x(j);

    MCParams mc;
    mc.n_particles = 5000;
    mc.seed = 123;

    MeasureFlow f1 = flow_from_gradient(model, DV, m0, FlowMethod::PARTICLE_SDE, mc);
    MeasureFlow f2 = flow_from_gradient(model, DV, m0, FlowMethod::PARTICLE_SDE, mc);
    CHECK(f1.particle_slices.back().positions == f2.particle_slices.back().positions);

    MCParams mc4 = mc;
    mc4.workers = 4;
    MeasureFlow f4 = flow_from_gradient(model, DV, m0, FlowMethod::PARTICLE_SDE, mc4);
    CHECK(f1.particle_slices.back().positions == f4.particle_slices.back().positions);

    MCParams other = mc;
    other.seed = 124;
    MeasureFlow f5 = flow_from_gradient(model, DV, m0, FlowMethod::PARTICLE_SDE, other);
    CHECK(f1.particle_slices.back().positions != f5.particle_slices.back().positions);
}
