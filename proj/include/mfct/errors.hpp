#pragma once

#include <stdexcept>
#include <string>

namespace mfct {

/// Base class for all solver-side failures. Configuration problems use
/// ConfigError instead so the CLI can map them to a distinct exit code.
class SolverError : public std::runtime_error {
public:
    explicit SolverError(const std::string& msg) : std::runtime_error(msg) {}
};

class SingularSigma : public SolverError {
public:
    using SolverError::SolverError;
};

class AssumptionViolation : public SolverError {
public:
    using SolverError::SolverError;
};

class Unsupported : public SolverError {
public:
    using SolverError::SolverError;
};

class NonFiniteMap : public SolverError {
public:
    using SolverError::SolverError;
};

class MeshMismatch : public SolverError {
public:
    using SolverError::SolverError;
};

class LinearSolveFailure : public SolverError {
public:
    using SolverError::SolverError;
};

class GrowthViolation : public SolverError {
public:
    using SolverError::SolverError;
};

class MassLeak : public SolverError {
public:
    using SolverError::SolverError;
};

class WeightDegenerate : public SolverError {
public:
    using SolverError::SolverError;
};

class BlowUp : public SolverError {
public:
    using SolverError::SolverError;
};

class MinimizerDomain : public SolverError {
public:
    using SolverError::SolverError;
};

class InfeasibleHorizon : public SolverError {
public:
    using SolverError::SolverError;
};

class BracketFailure : public SolverError {
public:
    using SolverError::SolverError;
};

class ShootingDivergence : public SolverError {
public:
    using SolverError::SolverError;
};

class InnerNonConvergence : public SolverError {
public:
    using SolverError::SolverError;
};

class KernelOverflow : public SolverError {
public:
    using SolverError::SolverError;
};

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace mfct
