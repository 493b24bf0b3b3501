#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mfct/errors.hpp"
#include "mfct/fields.hpp"
#include "mfct/flow.hpp"
#include "mfct/hjb.hpp"
#include "mfct/majorant.hpp"
#include "mfct/measure.hpp"
#include "mfct/model.hpp"
#include "mfct/pde.hpp"

namespace mfct {

enum class FlowInit { DiffusedInitial, FrozenInitial };

struct FixedPointConfig {
    int max_iters = 50;
    double tol_V = 1e-6;  // both the weighted L2(H1) and the core-window max norm
    double tol_W2 = 1e-6;
    double damping = 1.0; // theta in (0, 1], halved automatically on residual increase
    FlowMethod flow_method = FlowMethod::FP_GRID;
    MCParams mc;
    BoundaryPolicy bc = BoundaryPolicy::QuadraticExtrapolation;
    bool majorant_gate = true;
    FlowInit init = FlowInit::DiffusedInitial;
    double global_C = 5.0;      // C(lambda, T) stand-in for the global-mode majorants
    double global_C_grad = 5.0;

    void validate() const {
        if (max_iters < 1) throw ConfigError("FixedPointConfig: max_iters must be >= 1");
        if (!(tol_V > 0.0) || !(tol_W2 > 0.0))
            throw ConfigError("FixedPointConfig: tolerances must be positive");
        if (!(damping > 0.0) || damping > 1.0)
            throw ConfigError("FixedPointConfig: damping must lie in (0, 1]");
    }
};

enum class FixedPointVerdict { CONVERGED, MAX_ITERS, BLOWUP };

inline const char* to_string(FixedPointVerdict v) {
    switch (v) {
    case FixedPointVerdict::CONVERGED: return "CONVERGED";
    case FixedPointVerdict::MAX_ITERS: return "MAX_ITERS";
    default: return "BLOWUP";
    }
}

struct IterationRecord {
    int iteration = 0;
    double residual_weighted = 0.0; // sqrt pi_gamma-weighted L2(H1) of the V update
    double residual_max_core = 0.0; // max |dV| on the core window
    double w2_max = 0.0;            // max over nodes of W2 between successive flows
    double damping_used = 1.0;
    bool majorant_V_ok = true;
    bool majorant_DV_ok = true;
};

struct FixedPointReport {
    std::vector<IterationRecord> iterations;
    FixedPointVerdict verdict = FixedPointVerdict::MAX_ITERS;
    std::string message;
    bool feasibility_warning = false; // horizon outside the windows, no convexity backup
    bool global_mode = false;
    double window_V = 0.0;
    double window_DV = 0.0;
};

struct MFTCSolution {
    HJBSolution hjb;
    MeasureFlow flow;
    FixedPointReport report;
};

namespace fixedpoint_detail {

inline double core_window_cut(const Grid1D& grid) {
    return 0.5 * std::max(std::abs(grid.x_min), std::abs(grid.x_max));
}

/// Majorant-domination flags with the discretization allowance 5e-3 (1+x^2).
inline void domination_flags(const HJBSolution& sol, const ScalarField& z,
                             const ScalarField& z_bar, IterationRecord& rec) {
    rec.majorant_V_ok = true;
    rec.majorant_DV_ok = true;
    for (int i = 0; i < sol.V.mesh.n_nodes(); ++i)
        for (int j = 0; j < sol.V.grid.n_points; ++j) {
            const double slack = 5e-3 * (1.0 + sol.V.grid.x(j) * sol.V.grid.x(j));
            if (std::abs(sol.V.at(i, j)) > z.at(i, j) + slack) rec.majorant_V_ok = false;
            const double w = 0.5 * sol.DV.at(i, j) * sol.DV.at(i, j);
            if (w > z_bar.at(i, j) + slack) rec.majorant_DV_ok = false;
        }
}

} // namespace fixedpoint_detail

/// Picard iteration for the coupled problem: freeze the measure flow, solve
/// the HJB equation, recompute the flow from the new gradient, damp, repeat.
/// The first iterate starts from the zero-drift diffusion of m0.
inline MFTCSolution solve_mftc(const ModelSpec& model, const GridDensity& m0,
                               const TimeMesh& mesh, const Grid1D& grid,
                               const FixedPointConfig& cfg) {
    cfg.validate();
    if (!(m0.grid == grid)) throw MeshMismatch("solve_mftc: m0 on a different grid");

    MFTCSolution out;
    FixedPointReport& report = out.report;

    const auto windows = feasibility_windows(model.constants);
    report.window_V = windows.first;
    report.window_DV = windows.second;
    const double horizon = mesh.T - mesh.t;
    const bool small_time_ok = horizon < windows.first && horizon < windows.second;
    const bool convex = model.constants.lambda > 0.0;
    report.feasibility_warning = !small_time_ok && !convex;
    report.global_mode = !small_time_ok && convex;

    // Majorant fields for the blow-up gate and the domination flags.
    std::optional<ScalarField> z, z_bar;
    if (cfg.majorant_gate && (small_time_ok || convex)) {
        auto fields = majorant_fields(model.constants, mesh, grid, model.tr_a(),
                                      small_time_ok ? MajorantMode::SMALL_TIME
                                                    : MajorantMode::GLOBAL_CONVEX,
                                      cfg.global_C, cfg.global_C_grad);
        z = std::move(fields.first);
        z_bar = std::move(fields.second);
    }

    // Iterate 0: HJB against the zero-drift diffusion of m0, or against the
    // flow frozen at m0 (the alternative start used by the reproducibility
    // checks).
    MeasureFlow flow;
    if (cfg.init == FlowInit::DiffusedInitial) {
        VectorField no_drift = VectorField::constant(mesh, grid, 0.0);
        flow = solve_forward_fp(no_drift, model.sigma1(), mesh, grid, m0);
    } else {
        flow.mesh = mesh;
        flow.representation = MeasureFlow::Representation::GridDensities;
        flow.grid_slices.assign(mesh.n_nodes(), m0);
    }

    HJBSolution current;
    try {
        current = solve_hjb(model, flow, mesh, grid, cfg.bc, z ? &*z : nullptr);
    } catch (const BlowUp& e) {
        report.verdict = FixedPointVerdict::BLOWUP;
        report.message = e.what();
        return out;
    }

    const double x_cut = fixedpoint_detail::core_window_cut(grid);
    double theta = cfg.damping;
    double prev_resid = 1e300;

    for (int iter = 1; iter <= cfg.max_iters; ++iter) {
        MeasureFlow new_flow = flow_from_gradient(model, current.DV, m0, cfg.flow_method, cfg.mc);

        HJBSolution proposal;
        try {
            proposal = solve_hjb(model, new_flow, mesh, grid, cfg.bc, z ? &*z : nullptr);
        } catch (const BlowUp& e) {
            report.verdict = FixedPointVerdict::BLOWUP;
            report.message = e.what();
            out.hjb = std::move(current);
            out.flow = std::move(flow);
            return out;
        }

        // Damped update V <- (1-theta) V + theta proposal.
        ScalarField V_next = proposal.V;
        if (theta < 1.0)
            for (size_t idx = 0; idx < V_next.data.size(); ++idx)
                V_next.data[idx] = (1.0 - theta) * current.V.data[idx] + theta * V_next.data[idx];

        IterationRecord rec;
        rec.iteration = iter;
        rec.damping_used = theta;
        {
            ScalarField diff = V_next;
            for (size_t idx = 0; idx < diff.data.size(); ++idx) diff.data[idx] -= current.V.data[idx];
            const VectorField ddiff = gradient(diff);
            rec.residual_weighted = std::sqrt(weighted_norm(diff, model.constants.gamma) +
                                              weighted_norm(ddiff, model.constants.gamma));
            rec.residual_max_core = max_diff_core(V_next, current.V, x_cut);
        }
        {
            // full node scan for grid flows; particle flows sample every few
            // nodes since each W2 evaluation sorts the ensemble
            const bool grids =
                new_flow.representation == MeasureFlow::Representation::GridDensities &&
                flow.representation == MeasureFlow::Representation::GridDensities;
            const int stride = grids ? 1 : std::max(1, mesh.n_steps / 16);
            for (int i = 0; i < mesh.n_nodes(); i += stride)
                rec.w2_max = std::max(rec.w2_max, new_flow.node_w2(flow, i));
        }

        HJBSolution next = assemble_solution(model, new_flow, std::move(V_next));
        if (z) fixedpoint_detail::domination_flags(next, *z, *z_bar, rec);
        report.iterations.push_back(rec);

        current = std::move(next);
        flow = std::move(new_flow);

        // The first W2 value compares against the initializer flow, which is
        // not an iterate of the map, so it does not gate convergence; when V
        // has stopped moving, the produced flow has too.
        const bool w2_ok = iter == 1 || rec.w2_max <= cfg.tol_W2;
        if (rec.residual_weighted <= cfg.tol_V && rec.residual_max_core <= cfg.tol_V && w2_ok) {
            report.verdict = FixedPointVerdict::CONVERGED;
            break;
        }
        // Halve the damping when the update grew; Picard has no guaranteed
        // contraction rate here.
        if (rec.residual_max_core > prev_resid && theta > 1.0 / 64.0) theta *= 0.5;
        prev_resid = rec.residual_max_core;
    }

    if (report.verdict != FixedPointVerdict::CONVERGED &&
        report.verdict != FixedPointVerdict::BLOWUP) {
        report.verdict = FixedPointVerdict::MAX_ITERS;
        report.message = "residual tolerances not met within max_iters";
    }
    out.hjb = std::move(current);
    out.flow = std::move(flow);
    return out;
}

/// Flow-property consistency: restart the whole problem at mesh node tau from
/// the computed flow slice and compare the restarted value field against the
/// original on [tau, T] over the core window.
inline double flow_property_check(const ModelSpec& model, const MFTCSolution& solution,
                                  const TimeMesh& mesh, const Grid1D& grid,
                                  const FixedPointConfig& cfg, int tau_index) {
    if (tau_index < 0 || tau_index >= mesh.n_steps)
        throw MeshMismatch("flow_property_check: tau outside the mesh");

    GridDensity m_tau =
        solution.flow.representation == MeasureFlow::Representation::GridDensities
            ? solution.flow.grid_slices[tau_index]
            : flow_detail::deposit(solution.flow.particle_slices[tau_index], grid);
    if (!m_tau.is_normalized(1e-12)) m_tau.normalize();

    ModelSpec restarted = model;
    restarted.t = mesh.time(tau_index);
    const TimeMesh sub = mesh.restarted_at(tau_index);
    const MFTCSolution again = solve_mftc(restarted, m_tau, sub, grid, cfg);

    const double x_cut = fixedpoint_detail::core_window_cut(grid);
    double worst = 0.0;
    for (int i = 0; i < sub.n_nodes(); ++i)
        for (int j = 0; j < grid.n_points; ++j)
            if (std::abs(grid.x(j)) <= x_cut)
                worst = std::max(worst, std::abs(again.hjb.V.at(i, j) -
                                                 solution.hjb.V.at(tau_index + i, j)));
    return worst;
}

} // namespace mfct
