#ifndef FLOWIAR_ORACLE_HPP
#define FLOWIAR_ORACLE_HPP

#include <cstdint>
#include <functional>
#include <memory>

#include "flowiar/types.hpp"

namespace flowiar {

// Black-box validity predicate for the environment's *current* state. The
// answer must be deterministic per (state, action) within a timestep.
class ConstraintOracle {
public:
    virtual ~ConstraintOracle() = default;
    virtual bool is_valid(const Action& action) = 0;
};

class AcceptAllOracle : public ConstraintOracle {
public:
    bool is_valid(const Action&) override { return true; }
};

class FnOracle : public ConstraintOracle {
public:
    explicit FnOracle(std::function<bool(const Action&)> fn) : fn_(std::move(fn)) {}
    bool is_valid(const Action& action) override { return fn_(action); }

private:
    std::function<bool(const Action&)> fn_;
};

// Counts every query so the masking baseline's M^D-per-step cost and IAR's
// S-per-step cost come from the same meter.
class MeteredOracle : public ConstraintOracle {
public:
    explicit MeteredOracle(ConstraintOracle& inner) : inner_(inner) {}
    bool is_valid(const Action& action) override {
        ++count_;
        return inner_.is_valid(action);
    }
    int64_t count() const { return count_; }
    void reset() { count_ = 0; }

private:
    ConstraintOracle& inner_;
    int64_t count_ = 0;
};

}  // namespace flowiar

#endif
