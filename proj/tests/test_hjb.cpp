#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mfct/hjb.hpp"
#include "mfct/oracle.hpp"
#include "mfct/pde.hpp"

using namespace mfct;

namespace {

AssumptionConstants test_constants(double c = 1.0, double cT = 1.0) {
    AssumptionConstants cst;
    cst.c = c;
    cst.c_T = cT;
    cst.delta = 1.0;
    cst.lambda = 0.5;
    cst.gamma = 4.0;
    return cst;
}

MeasureFlow diffusion_flow(const TimeMesh& mesh, const Grid1D& grid, const GridDensity& m0,
                           double sigma) {
    VectorField drift = VectorField::constant(mesh, grid, 0.0);
    return solve_forward_fp(drift, sigma, mesh, grid, m0);
}

/// Least-squares fit of one field slice to 1/2 P x^2 + r x + k on |x| <= x_cut.
struct QuadraticFit {
    double P, r, k;
};
QuadraticFit fit_quadratic(const ScalarField& V, int i, double x_cut) {
    double s4 = 0, s3 = 0, s2 = 0, s1 = 0, s0 = 0;
    double b2 = 0, b1 = 0, b0 = 0;
    for (int j = 0; j < V.grid.n_points; ++j) {
        const double x = V.grid.x(j);
        if (std::abs(x) > x_cut) continue;
        const double y = V.at(i, j);
        s4 += x * x * x * x;
        s3 += x * x * x;
        s2 += x * x;
        s1 += x;
        s0 += 1;
        b2 += y * x * x;
        b1 += y * x;
        b0 += y;
    }
    // solve the 3x3 normal equations by Cramer
    const double A[3][3] = {{s4, s3, s2}, {s3, s2, s1}, {s2, s1, s0}};
    const double B[3] = {b2, b1, b0};
    auto det3 = [](const double M[3][3]) {
        return M[0][0] * (M[1][1] * M[2][2] - M[1][2] * M[2][1]) -
               M[0][1] * (M[1][0] * M[2][2] - M[1][2] * M[2][0]) +
               M[0][2] * (M[1][0] * M[2][1] - M[1][1] * M[2][0]);
    };
    const double d = det3(A);
    double M[3][3];
    double sol[3];
    for (int c = 0; c < 3; ++c) {
        for (int rr = 0; rr < 3; ++rr)
            for (int cc = 0; cc < 3; ++cc) M[rr][cc] = (cc == c) ? B[rr] : A[rr][cc];
        sol[c] = det3(M) / d;
    }
    return {2.0 * sol[0], sol[1], sol[2]};
}

} // namespace

TEST_CASE("gradient operator") {
    const Grid1D grid(-8.0, 8.0, 401);
    const TimeMesh mesh(0.0, 0.1, 10);

    SECTION("exact on quadratics everywhere including boundaries") {
        ScalarField V(mesh, grid);
        for (int i = 0; i < mesh.n_nodes(); ++i)
            for (int j = 0; j < grid.n_points; ++j) V.at(i, j) = grid.x(j) * grid.x(j);
        const VectorField g = gradient(V);
        for (int j = 0; j < grid.n_points; ++j)
            CHECK(g.at(0, j) == Catch::Approx(2.0 * grid.x(j)).margin(1e-10));
    }
    SECTION("zero on constants") {
        ScalarField V(mesh, grid);
        std::fill(V.data.begin(), V.data.end(), 3.7);
        const VectorField g = gradient(V);
        CHECK(g.max_abs() <= 1e-12);
    }
}

TEST_CASE("hjb with zero data has the zero solution") {
    BuiltinFamily fam;
    fam.tag = FamilyTag::LQ_MEANFIELD;
    fam.params.h_T = 0.0;
    fam.params.q_bar = 0.0;
    fam.params.q_bar_T = 0.0;
    const ModelSpec model = build_model(fam, {0.0, 0.3}, 1.0, test_constants());

    const Grid1D grid(-8.0, 8.0, 201);
    const TimeMesh mesh(0.0, 0.3, 100);
    const MeasureFlow flow = diffusion_flow(mesh, grid, GridDensity::gaussian(grid, 0.0, 1.0), 1.0);

    const HJBSolution sol = solve_hjb(model, flow, mesh, grid, BoundaryPolicy::QuadraticExtrapolation);
    CHECK(sol.V.max_abs() <= 1e-13);
    CHECK(sol.policy.max_abs() <= 1e-12);
}

TEST_CASE("hjb matches the cole-hopf closed form") {
    BuiltinFamily fam;
    fam.tag = FamilyTag::COLE_HOPF;
    fam.params.curvature = 1.0;
    const double T = 0.5;
    const ModelSpec model = build_model(fam, {0.0, T}, 1.0, test_constants());

    const Grid1D grid(-8.0, 8.0, 401);
    const TimeMesh mesh(0.0, T, 500);
    const MeasureFlow flow = diffusion_flow(mesh, grid, GridDensity::gaussian(grid, 0.0, 1.0), 1.0);
    const HJBSolution sol = solve_hjb(model, flow, mesh, grid, BoundaryPolicy::QuadraticExtrapolation);

    const ColeHopfOracle oracle(1.0, 1.0, 0.0, T);
    double worst = 0.0, worst_grad = 0.0;
    for (int i = 0; i <= mesh.n_steps; i += 25) {
        const double s = mesh.time(i);
        for (int j = 0; j < grid.n_points; ++j) {
            const double x = grid.x(j);
            if (std::abs(x) > 4.0) continue;
            worst = std::max(worst, std::abs(sol.V.at(i, j) - oracle.value(s, x)));
            const double tau = T - s;
            worst_grad = std::max(worst_grad, std::abs(sol.DV.at(i, j) - x / (1.0 + tau)));
        }
    }
    CHECK(worst <= 2e-3);
    CHECK(worst_grad <= 2e-3);
}

TEST_CASE("hjb matches the lq closed form on a frozen oracle flow") {
    BuiltinFamily fam;
    fam.tag = FamilyTag::LQ_MEANFIELD;
    fam.params.q_bar = 1.0;
    fam.params.q_bar_T = 0.5;
    fam.params.h_T = 1.0;
    const double T = 0.2;
    const ModelSpec model = build_model(fam, {0.0, T}, 1.0, test_constants(0.5, 1.0));

    const Grid1D grid(-8.0, 8.0, 401);
    const TimeMesh mesh(0.0, T, 200);
    const LQClosedForm lq = lq_closed_form(fam.params, 0.0, T, 1.0, 0.5, 0.5);

    // Freeze the coupling measure at Gaussians carrying the oracle means; the
    // LQ coefficients only read the flow through its mean.
    MeasureFlow flow;
    flow.mesh = mesh;
    flow.representation = MeasureFlow::Representation::GridDensities;
    for (int i = 0; i < mesh.n_nodes(); ++i)
        flow.grid_slices.push_back(GridDensity::gaussian(grid, lq.mbar_at(mesh.time(i)), 0.8));

    const HJBSolution sol = solve_hjb(model, flow, mesh, grid, BoundaryPolicy::QuadraticExtrapolation);
    const QuadraticFit fit = fit_quadratic(sol.V, 0, 4.0);
    CHECK(std::abs(fit.P - lq.P_at(0.0)) <= 1e-3);
    CHECK(std::abs(fit.r - lq.r_at(0.0)) <= 1e-3);
    CHECK(std::abs(fit.k - lq.k_at(0.0)) <= 1e-3);

    SECTION("policy equals minus the gradient for the quadratic control cost") {
        for (int i = 0; i < mesh.n_nodes(); i += 50)
            for (int j = 0; j < grid.n_points; j += 40)
                CHECK(sol.policy.at(i, j) == Catch::Approx(-sol.DV.at(i, j)).margin(1e-12));
    }
    SECTION("policy agrees with D_p H at the gradient") {
        for (int i = 0; i < mesh.n_nodes(); i += 50)
            for (int j = 0; j < grid.n_points; j += 40) {
                const double dph =
                    model.hamiltonian_dp(mesh.time(i), grid.x(j), sol.DV.at(i, j));
                CHECK(std::abs(sol.policy.at(i, j) - dph) <= 1e-10);
            }
    }
}

TEST_CASE("blow-up gate fires when the majorant is exceeded") {
    BuiltinFamily fam;
    fam.tag = FamilyTag::COLE_HOPF;
    const ModelSpec model = build_model(fam, {0.0, 0.3}, 1.0, test_constants());

    const Grid1D grid(-8.0, 8.0, 201);
    const TimeMesh mesh(0.0, 0.3, 100);
    const MeasureFlow flow = diffusion_flow(mesh, grid, GridDensity::gaussian(grid, 0.0, 1.0), 1.0);

    ScalarField tiny_majorant(mesh, grid);
    std::fill(tiny_majorant.data.begin(), tiny_majorant.data.end(), 1e-6);
    CHECK_THROWS_AS(solve_hjb(model, flow, mesh, grid, BoundaryPolicy::QuadraticExtrapolation,
                              &tiny_majorant),
                    BlowUp);
}

TEST_CASE("weighted seminorm diagnostics are mesh stable") {
    BuiltinFamily fam;
    fam.tag = FamilyTag::COLE_HOPF;
    const double T = 0.25;
    const ModelSpec model = build_model(fam, {0.0, T}, 1.0, test_constants());

    auto run = [&](int n_pts, int n_steps) {
        const Grid1D grid(-8.0, 8.0, n_pts);
        const TimeMesh mesh(0.0, T, n_steps);
        const MeasureFlow flow =
            diffusion_flow(mesh, grid, GridDensity::gaussian(grid, 0.0, 1.0), 1.0);
        return solve_hjb(model, flow, mesh, grid, BoundaryPolicy::QuadraticExtrapolation);
    };
    const HJBSolution coarse = run(201, 125);
    const HJBSolution fine = run(401, 250);
    CHECK(std::isfinite(coarse.wnorm_dV_ds));
    CHECK(fine.wnorm_dV_ds <= 10.0 * coarse.wnorm_dV_ds + 1e-12);
    CHECK(fine.wnorm_D2V <= 10.0 * coarse.wnorm_D2V + 1e-12);
    CHECK(fine.wnorm_dDV_ds <= 10.0 * coarse.wnorm_dDV_ds + 1e-12);
}
