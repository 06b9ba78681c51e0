#ifndef FLOWIAR_ERRORS_HPP
#define FLOWIAR_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace flowiar {

// Base for all library errors so callers can catch one type at the boundary.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed observation / action shapes, bad config fields.
class SchemaError : public Error {
public:
    using Error::Error;
};

// Validation of user-supplied specs and CLI arguments.
class ValidationError : public Error {
public:
    using Error::Error;
};

// Enumeration guards (M^D too large for an enumerable head or mask).
class CapacityError : public Error {
public:
    using Error::Error;
};

// Non-finite intermediates in flow / estimator evaluation.
class NumericalError : public Error {
public:
    using Error::Error;
};

// Rejection sampling found no valid action within the retry budget.
class StarvationError : public Error {
public:
    StarvationError(const std::string& msg, long total_draws)
        : Error(msg), total_draws(total_draws) {}
    long total_draws;
};

// An internal contract was broken (e.g. invalid action reached era_step).
class ContractViolation : public Error {
public:
    using Error::Error;
};

}  // namespace flowiar

#endif
