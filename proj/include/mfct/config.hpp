#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mfct/errors.hpp"
#include "mfct/fixedpoint.hpp"
#include "mfct/grid.hpp"
#include "mfct/measure.hpp"
#include "mfct/model.hpp"
#include "mfct/valuefn.hpp"

namespace mfct {

/// Parsed experiment configuration: nested key/value text with [section]
/// headers, '#' comments, and dot-path overrides. Unknown sections or keys
/// are rejected with line diagnostics.
class RunConfig {
public:
    enum class OutputFormat { Csv, Binary, Both };

    static const std::set<std::string>& schema() {
        static const std::set<std::string> keys = {
            "seed",
            "model.family",
            "model.dim",
            "model.t",
            "model.T",
            "model.sigma",
            "model.family.q_bar",
            "model.family.h_T",
            "model.family.q_bar_T",
            "model.family.curvature",
            "constants.c",
            "constants.c_T",
            "constants.delta",
            "constants.lambda",
            "constants.gamma",
            "initial.mean",
            "initial.sd",
            "numerics.bc",
            "numerics.grid.x_min",
            "numerics.grid.x_max",
            "numerics.grid.n_points",
            "numerics.mesh.dt",
            "numerics.mesh.n_steps",
            "numerics.fixedpoint.max_iters",
            "numerics.fixedpoint.tol_V",
            "numerics.fixedpoint.tol_W2",
            "numerics.fixedpoint.damping",
            "numerics.fixedpoint.flow_method",
            "numerics.mc.n_particles",
            "numerics.mc.substeps",
            "numerics.vbar.n_points",
            "numerics.vbar.n_steps",
            "output.directory",
            "output.format",
        };
        return keys;
    }

    static RunConfig parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        std::stringstream buf;
        buf << in.rdbuf();
        return parse_text(buf.str());
    }

    static RunConfig parse_text(const std::string& text) {
        RunConfig cfg;
        cfg.raw_text_ = text;
        std::istringstream in(text);
        std::string line, section;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw ConfigError("line " + std::to_string(line_no) +
                                      ": malformed section header '" + line + "'");
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            const std::string full = section.empty() ? key : section + "." + key;
            if (!schema().count(full))
                throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + full +
                                  "'");
            cfg.values_[full] = value;
        }
        return cfg;
    }

    /// Applies one --set override, e.g. numerics.grid.n_points=801.
    void set_override(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects KEY=VALUE, got '" + assignment + "'");
        const std::string key = trim(assignment.substr(0, eq));
        const std::string value = trim(assignment.substr(eq + 1));
        if (!schema().count(key)) throw ConfigError("--set: unknown key '" + key + "'");
        values_[key] = value;
        overrides_.push_back(key + "=" + value);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': expected a number, got '" + it->second + "'");
        }
    }

    long get_int(const std::string& key, long fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            size_t pos = 0;
            const long v = std::stol(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': expected an integer, got '" + it->second + "'");
        }
    }

    /// Canonical serialization of the effective configuration (sorted keys);
    /// its hash identifies the experiment in the manifest.
    std::string canonical() const {
        std::string s;
        for (const auto& [k, v] : values_) s += k + "=" + v + "\n";
        return s;
    }

    const std::vector<std::string>& overrides() const { return overrides_; }

    // ---- typed views of the configuration ----

    ModelSpec build() const {
        require("model.family");
        require("model.T");
        const std::string fam_name = get_string("model.family", "");
        BuiltinFamily fam;
        if (fam_name == "lq_meanfield")
            fam.tag = FamilyTag::LQ_MEANFIELD;
        else if (fam_name == "cole_hopf")
            fam.tag = FamilyTag::COLE_HOPF;
        else
            throw ConfigError("model.family must be lq_meanfield or cole_hopf, got '" + fam_name +
                              "'");
        fam.params.q_bar = get_double("model.family.q_bar", 1.0);
        fam.params.h_T = get_double("model.family.h_T", 1.0);
        fam.params.q_bar_T = get_double("model.family.q_bar_T", 0.0);
        fam.params.curvature = get_double("model.family.curvature", 1.0);

        AssumptionConstants cst;
        cst.c = get_double("constants.c", 1.0);
        cst.c_T = get_double("constants.c_T", 1.0);
        cst.delta = get_double("constants.delta", 1.0);
        cst.lambda = get_double("constants.lambda", 0.5);
        cst.gamma = get_double("constants.gamma", 4.0);

        if (get_int("model.dim", 1) != 1)
            throw Unsupported("reference numerics require model.dim = 1");
        return build_model(fam, {get_double("model.t", 0.0), get_double("model.T", 0.0)},
                           get_double("model.sigma", 1.0), cst);
    }

    Grid1D grid() const {
        return Grid1D(get_double("numerics.grid.x_min", -8.0),
                      get_double("numerics.grid.x_max", 8.0),
                      static_cast<int>(get_int("numerics.grid.n_points", 401)));
    }

    TimeMesh mesh() const {
        const double t = get_double("model.t", 0.0);
        const double T = get_double("model.T", 0.0);
        if (has("numerics.mesh.n_steps"))
            return TimeMesh(t, T, static_cast<int>(get_int("numerics.mesh.n_steps", 0)));
        return TimeMesh::with_dt(t, T, get_double("numerics.mesh.dt", 1e-3));
    }

    GridDensity initial_density() const {
        return GridDensity::gaussian(grid(), get_double("initial.mean", 0.0),
                                     get_double("initial.sd", 1.0));
    }

    BoundaryPolicy boundary() const {
        const std::string bc = get_string("numerics.bc", "quadratic");
        if (bc == "quadratic") return BoundaryPolicy::QuadraticExtrapolation;
        if (bc == "neumann") return BoundaryPolicy::HomogeneousNeumann;
        throw ConfigError("numerics.bc must be quadratic or neumann, got '" + bc + "'");
    }

    uint64_t seed() const { return static_cast<uint64_t>(get_int("seed", 12345)); }

    FixedPointConfig fixed_point(int workers) const {
        FixedPointConfig fp;
        fp.max_iters = static_cast<int>(get_int("numerics.fixedpoint.max_iters", 50));
        fp.tol_V = get_double("numerics.fixedpoint.tol_V", 1e-6);
        fp.tol_W2 = get_double("numerics.fixedpoint.tol_W2", 1e-6);
        fp.damping = get_double("numerics.fixedpoint.damping", 1.0);
        fp.bc = boundary();
        const std::string fm = get_string("numerics.fixedpoint.flow_method", "fp_grid");
        if (fm == "fp_grid")
            fp.flow_method = FlowMethod::FP_GRID;
        else if (fm == "particle_sde")
            fp.flow_method = FlowMethod::PARTICLE_SDE;
        else if (fm == "girsanov")
            fp.flow_method = FlowMethod::GIRSANOV_REWEIGHT;
        else
            throw ConfigError("numerics.fixedpoint.flow_method must be fp_grid, particle_sde or "
                              "girsanov, got '" + fm + "'");
        fp.mc = mc_params(workers);
        fp.validate();
        return fp;
    }

    MCParams mc_params(int workers) const {
        MCParams mc;
        mc.n_particles = static_cast<int>(get_int("numerics.mc.n_particles", 100000));
        mc.substeps = static_cast<int>(get_int("numerics.mc.substeps", 1));
        mc.seed = seed();
        mc.workers = workers;
        if (mc.n_particles < 1) throw ConfigError("numerics.mc.n_particles must be positive");
        return mc;
    }

    VbarConfig vbar(int workers) const {
        VbarConfig v;
        const Grid1D g = grid();
        v.grid = Grid1D(g.x_min, g.x_max,
                        static_cast<int>(get_int("numerics.vbar.n_points", 81)));
        v.n_steps = static_cast<int>(get_int("numerics.vbar.n_steps", 80));
        v.workers = workers;
        v.bc = boundary();
        return v;
    }

    std::string output_directory(const std::string& flag_override) const {
        if (!flag_override.empty()) return flag_override;
        return get_string("output.directory", "out");
    }

    OutputFormat output_format(const std::string& flag_override) const {
        const std::string f =
            flag_override.empty() ? get_string("output.format", "both") : flag_override;
        if (f == "csv") return OutputFormat::Csv;
        if (f == "binary") return OutputFormat::Binary;
        if (f == "both") return OutputFormat::Both;
        throw ConfigError("output.format must be csv, binary or both, got '" + f + "'");
    }

private:
    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }

    void require(const std::string& key) const {
        if (!has(key)) {
            const auto dot = key.rfind('.');
            const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
            throw ConfigError("missing required key '" + key + "' (section [" + section + "])");
        }
    }

    std::map<std::string, std::string> values_;
    std::vector<std::string> overrides_;
    std::string raw_text_;
};

} // namespace mfct
