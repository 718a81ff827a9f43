#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dtwin {

// Shapes or widths that do not line up.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Caller broke a documented precondition (non-scalar loss, p >= 1, ...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Pointwise op hit a value outside its domain (log of a non-positive, x/0).
class DomainError : public std::domain_error {
public:
    DomainError(const std::string& what, std::size_t index)
        : std::domain_error(what + " at flat index " + std::to_string(index)), index_(index) {}
    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

// Requested an index that is not in a dictionary (embedding vocabulary, node id).
class LookupError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

// Numerical process went non-finite or otherwise broke.
class RuntimeFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Input data is insufficient or malformed for the requested operation.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Declared structure disagrees with what the numbers say (undeclared ODE
// dependency, dangling edge index).
class ConsistencyError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// ODE integration produced NaN or a negative volume.
class IntegrationError : public RuntimeFailure {
public:
    IntegrationError(const std::string& variable, double t, const std::string& what)
        : RuntimeFailure(what + " in '" + variable + "' at t=" + std::to_string(t) + " s"), variable_(variable), t_(t) {}
    const std::string& variable() const noexcept { return variable_; }
    double time() const noexcept { return t_; }

private:
    std::string variable_;
    double t_;
};

}  // namespace dtwin
