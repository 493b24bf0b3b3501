#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mfct/errors.hpp"
#include "mfct/fields.hpp"
#include "mfct/measure.hpp"

namespace mfct {

namespace io_detail {

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::ofstream open_out(const std::string& path, bool binary = false) {
    std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
    if (!out) throw SolverError("cannot open output file: " + path);
    return out;
}

} // namespace io_detail

/// FNV-1a hash of a string; used for config fingerprints in run manifests.
inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

/// Tall CSV of a time-grid field: columns s, x, <name>.
inline void write_field_csv(const std::string& path, const detail::TimeGridValues& f,
                            const std::string& name) {
    auto out = io_detail::open_out(path);
    out << "s,x," << name << "\n";
    for (int i = 0; i < f.mesh.n_nodes(); ++i)
        for (int j = 0; j < f.grid.n_points; ++j)
            out << io_detail::fmt(f.mesh.time(i)) << ',' << io_detail::fmt(f.grid.x(j)) << ','
                << io_detail::fmt(f.at(i, j)) << "\n";
}

/// CSV of one density slice: columns x, density.
inline void write_density_csv(const std::string& path, const GridDensity& d) {
    auto out = io_detail::open_out(path);
    out << "x,density\n";
    for (int j = 0; j < d.grid.n_points; ++j)
        out << io_detail::fmt(d.grid.x(j)) << ',' << io_detail::fmt(d.values[j]) << "\n";
}

/// Binary block: one textual header line
///   n_steps n_points x_min x_max t T
/// followed by float64 values, row-major with time as the slow index.
inline void write_field_binary(const std::string& path, const detail::TimeGridValues& f) {
    auto out = io_detail::open_out(path, true);
    out << f.mesh.n_steps << ' ' << f.grid.n_points << ' ' << io_detail::fmt(f.grid.x_min) << ' '
        << io_detail::fmt(f.grid.x_max) << ' ' << io_detail::fmt(f.mesh.t) << ' '
        << io_detail::fmt(f.mesh.T) << "\n";
    out.write(reinterpret_cast<const char*>(f.data.data()),
              static_cast<std::streamsize>(f.data.size() * sizeof(double)));
}

/// Binary block of a grid-density flow, same layout and header as a field.
inline void write_flow_binary(const std::string& path, const MeasureFlow& flow) {
    if (flow.representation != MeasureFlow::Representation::GridDensities)
        throw Unsupported("write_flow_binary: particle flows are exported as CSV slices");
    const Grid1D& grid = flow.grid_slices.front().grid;
    auto out = io_detail::open_out(path, true);
    out << flow.mesh.n_steps << ' ' << grid.n_points << ' ' << io_detail::fmt(grid.x_min) << ' '
        << io_detail::fmt(grid.x_max) << ' ' << io_detail::fmt(flow.mesh.t) << ' '
        << io_detail::fmt(flow.mesh.T) << "\n";
    for (const auto& slice : flow.grid_slices)
        out.write(reinterpret_cast<const char*>(slice.values.data()),
                  static_cast<std::streamsize>(slice.values.size() * sizeof(double)));
}

/// Reads a binary field block back (round-trip checks and downstream tools).
inline ScalarField read_field_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SolverError("cannot open input file: " + path);
    int n_steps = 0, n_points = 0;
    double x_min = 0, x_max = 0, t = 0, T = 0;
    std::string header;
    std::getline(in, header);
    if (std::sscanf(header.c_str(), "%d %d %lf %lf %lf %lf", &n_steps, &n_points, &x_min, &x_max,
                    &t, &T) != 6)
        throw SolverError("bad binary field header in " + path);
    ScalarField f(TimeMesh(t, T, n_steps), Grid1D(x_min, x_max, n_points));
    in.read(reinterpret_cast<char*>(f.data.data()),
            static_cast<std::streamsize>(f.data.size() * sizeof(double)));
    if (!in) throw SolverError("truncated binary field in " + path);
    return f;
}

} // namespace mfct
