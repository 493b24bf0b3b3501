#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mfct/errors.hpp"

namespace mfct {

/// Pentadiagonal matrix (bands -2..+2). The implicit-diffusion systems are
/// tridiagonal in the interior; the extrapolation boundary rows and their
/// transposes reach two nodes further, which still fits in this band.
struct Banded5 {
    int n = 0;
    std::vector<double> b; // b[i*5 + (d+2)] = A(i, i+d), d in [-2, 2]

    Banded5() = default;
    explicit Banded5(int size) : n(size), b(static_cast<size_t>(size) * 5, 0.0) {}

    double& at(int i, int d) { return b[static_cast<size_t>(i) * 5 + (d + 2)]; }
    double at(int i, int d) const { return b[static_cast<size_t>(i) * 5 + (d + 2)]; }

    void add(int i, int j, double v) {
        const int d = j - i;
        if (j < 0 || j >= n || d < -2 || d > 2)
            throw LinearSolveFailure("Banded5: entry outside the band");
        at(i, d) += v;
    }

    Banded5 transpose() const {
        Banded5 t(n);
        for (int i = 0; i < n; ++i)
            for (int d = -2; d <= 2; ++d) {
                const int j = i + d;
                if (j >= 0 && j < n) t.at(j, -d) += at(i, d);
            }
        return t;
    }
};

inline std::vector<double> band_matvec(const Banded5& A, const std::vector<double>& x) {
    std::vector<double> y(A.n, 0.0);
    for (int i = 0; i < A.n; ++i) {
        double s = 0.0;
        for (int d = -2; d <= 2; ++d) {
            const int j = i + d;
            if (j >= 0 && j < A.n) s += A.at(i, d) * x[j];
        }
        y[i] = s;
    }
    return y;
}

/// LU elimination without pivoting (the diffusion systems are strictly
/// diagonally dominant). A vanishing pivot means the assembled operator is
/// broken, not ill-conditioned data.
inline std::vector<double> band_solve(Banded5 A, std::vector<double> rhs) {
    const int n = A.n;
    if (static_cast<int>(rhs.size()) != n)
        throw LinearSolveFailure("band_solve: rhs size mismatch");
    constexpr double tiny = 1e-300;
    for (int i = 0; i < n; ++i) {
        const double piv = A.at(i, 0);
        if (std::abs(piv) < tiny)
            throw LinearSolveFailure("band_solve: zero pivot at row " + std::to_string(i));
        for (int r = i + 1; r <= std::min(i + 2, n - 1); ++r) {
            const double f = A.at(r, i - r) / piv;
            if (f == 0.0) continue;
            for (int j = i; j <= std::min(i + 2, n - 1); ++j) A.at(r, j - r) -= f * A.at(i, j - i);
            rhs[r] -= f * rhs[i];
        }
    }
    std::vector<double> x(n);
    for (int i = n - 1; i >= 0; --i) {
        double s = rhs[i];
        for (int j = i + 1; j <= std::min(i + 2, n - 1); ++j) s -= A.at(i, j - i) * x[j];
        x[i] = s / A.at(i, 0);
    }
    return x;
}

} // namespace mfct
