#ifndef FLOWIAR_IAR_HPP
#define FLOWIAR_IAR_HPP

#include <utility>
#include <vector>

#include <torch/torch.h>

#include "flowiar/oracle.hpp"
#include "flowiar/policy.hpp"
#include "flowiar/types.hpp"

namespace flowiar {

// One rejection-sampling decision: S draws, the valid subset kept with
// multiplicity in draw order, and a uniform pick among them.
struct ValidActionBatch {
    int64_t S = 0;
    int64_t attempts = 0;     // batches drawn until one had a valid action
    int64_t total_draws = 0;  // attempts * S, counted before memoization
    std::vector<Action> valid_actions;
    int64_t chosen_index = -1;  // position within valid_actions
    Action chosen;
    // Filled by the caller when differentiable scores are needed.
    std::vector<LogProbBounds> logprob_bounds_of_valid;

    int64_t l() const { return static_cast<int64_t>(valid_actions.size()); }
    double valid_fraction() const { return static_cast<double>(l()) / S; }
    double correction_weight() const {
        return static_cast<double>(S) / (static_cast<double>(l()) * l());
    }
};

// Draws S actions from the policy, keeps the valid ones (duplicates keep
// their draw weight), and picks one uniformly; the pick is then distributed
// exactly as the validity-renormalized policy. Redraws a fresh batch when no
// draw is valid, up to max_retries, then raises a starvation error.
ValidActionBatch rejection_sample(PolicyInterface& policy, const torch::Tensor& obs_row,
                                  ConstraintOracle& oracle, int64_t S,
                                  torch::Generator& gen, int64_t max_retries = 16);

// (valid_fraction l/S, correction_weight S/l^2)
std::pair<double, double> correction_statistics(const ValidActionBatch& batch);

// Coefficient on the summed per-valid-sample score inside the corrected
// gradient. Consistent = 1/l, the plug-in of the unbiased numerator
// (1/S) sum_j grad log pi over the unbiased denominator l/S; its mean is
// exactly sum_C grad pi / sum_C pi. AsPublished = S/l^2, which divides by
// the valid fraction once too often and overweights the correction by a
// factor of about 1 / sum_C pi (kept for comparison; see the bias test).
enum class CorrectionWeight { Consistent, AsPublished };

inline double correction_coefficient(int64_t S, int64_t l, CorrectionWeight mode) {
    double ld = static_cast<double>(l);
    return mode == CorrectionWeight::Consistent ? 1.0 / ld
                                                : static_cast<double>(S) / (ld * ld);
}

// Surrogate whose gradient is the corrected per-step policy gradient:
// -advantage * (grad chosen_logprob - c(S,l) * sum_j grad valid_logprobs_j)
// with c from correction_coefficient. The advantage and the coefficient are
// constants; only the log-probabilities carry gradient.
torch::Tensor iar_surrogate_loss(double advantage, const torch::Tensor& chosen_logprob,
                                 const std::vector<torch::Tensor>& valid_logprobs,
                                 int64_t S,
                                 CorrectionWeight mode = CorrectionWeight::Consistent);

// Validity-renormalized policy distribution over the flat action space
// (test oracle; requires an enumerable policy).
torch::Tensor exact_effective_policy(PolicyInterface& policy, const torch::Tensor& obs_row,
                                     ConstraintOracle& oracle);

}  // namespace flowiar

#endif
