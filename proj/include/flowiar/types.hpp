#ifndef FLOWIAR_TYPES_HPP
#define FLOWIAR_TYPES_HPP

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "flowiar/errors.hpp"

namespace flowiar {

// A D-dimensional categorical action, each entry in {0..M-1}.
using Action = std::vector<int64_t>;

struct ActionSpace {
    int64_t dims = 0;        // D
    int64_t categories = 0;  // M

    // M^D, with an overflow/capacity guard.
    int64_t flat_size(int64_t guard = 1'000'000) const {
        int64_t n = 1;
        for (int64_t d = 0; d < dims; ++d) {
            n *= categories;
            if (n > guard) {
                throw CapacityError("action space size exceeds enumeration guard of " +
                                    std::to_string(guard));
            }
        }
        return n;
    }

    int64_t flat_index(const Action& a) const {
        check(a);
        int64_t idx = 0;
        for (int64_t d = 0; d < dims; ++d) idx = idx * categories + a[d];
        return idx;
    }

    Action from_flat(int64_t idx) const {
        Action a(dims);
        for (int64_t d = dims - 1; d >= 0; --d) {
            a[d] = idx % categories;
            idx /= categories;
        }
        return a;
    }

    void check(const Action& a) const {
        if (static_cast<int64_t>(a.size()) != dims) {
            throw SchemaError("action has " + std::to_string(a.size()) +
                              " dims, expected " + std::to_string(dims));
        }
        for (int64_t v : a) {
            if (v < 0 || v >= categories) {
                throw SchemaError("action entry " + std::to_string(v) +
                                  " outside [0, " + std::to_string(categories) + ")");
            }
        }
    }

    bool operator==(const ActionSpace&) const = default;
};

// Sandwich log-probability estimate and its two bounds.
struct LogProbBounds {
    double elbo = 0.0;
    double cubo = 0.0;
    double sandwich = 0.0;
    double alpha_used = 0.0;
};

// Differentiable counterpart of LogProbBounds; tensors are 0-dim.
struct BoundTensors {
    torch::Tensor elbo;
    torch::Tensor cubo;
    torch::Tensor sandwich;
    torch::Tensor alpha;

    LogProbBounds values() const {
        return {elbo.item<double>(), cubo.item<double>(), sandwich.item<double>(),
                alpha.item<double>()};
    }
};

// A Monte-Carlo estimate with its standard error.
struct OracleEstimate {
    double value = 0.0;
    double std_error = 0.0;
    int64_t n_samples = 0;
};

inline void check_finite(const torch::Tensor& t, const char* what) {
    if (!t.isfinite().all().item<bool>()) {
        throw NumericalError(std::string("non-finite values in ") + what);
    }
}

}  // namespace flowiar

#endif
