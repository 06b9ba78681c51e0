#include "flowiar/iar.hpp"

#include <map>
#include <string>

#include "flowiar/errors.hpp"

namespace flowiar {

ValidActionBatch rejection_sample(PolicyInterface& policy, const torch::Tensor& obs_row,
                                  ConstraintOracle& oracle, int64_t S,
                                  torch::Generator& gen, int64_t max_retries) {
    if (S < 1) throw ValidationError("sample count must be at least 1");
    ValidActionBatch batch;
    batch.S = S;
    std::map<Action, bool> memo;  // one decision = one state; answers are stable
    for (int64_t attempt = 0; attempt < max_retries; ++attempt) {
        ++batch.attempts;
        batch.total_draws += S;
        auto draws = policy.sample_batch(obs_row, S, gen);
        for (auto& a : draws) {
            auto it = memo.find(a);
            bool ok = (it != memo.end()) ? it->second : (memo[a] = oracle.is_valid(a));
            if (ok) batch.valid_actions.push_back(std::move(a));
        }
        if (!batch.valid_actions.empty()) {
            auto pick = torch::randint(batch.l(), {1}, gen, torch::kInt64);
            batch.chosen_index = pick.item<int64_t>();
            batch.chosen = batch.valid_actions[batch.chosen_index];
            return batch;
        }
    }
    throw StarvationError("no valid action after " + std::to_string(batch.attempts) +
                              " batches of " + std::to_string(S) + " draws",
                          batch.total_draws);
}

std::pair<double, double> correction_statistics(const ValidActionBatch& batch) {
    if (batch.l() < 1 || batch.l() > batch.S) {
        throw ContractViolation("malformed rejection batch: l=" +
                                std::to_string(batch.l()) + ", S=" +
                                std::to_string(batch.S));
    }
    return {batch.valid_fraction(), batch.correction_weight()};
}

torch::Tensor iar_surrogate_loss(double advantage, const torch::Tensor& chosen_logprob,
                                 const std::vector<torch::Tensor>& valid_logprobs,
                                 int64_t S, CorrectionWeight mode) {
    if (valid_logprobs.empty()) {
        throw ContractViolation("surrogate loss needs at least one valid sample");
    }
    const double weight =
        correction_coefficient(S, static_cast<int64_t>(valid_logprobs.size()), mode);
    auto correction = torch::stack(valid_logprobs).sum();
    return -advantage * (chosen_logprob - weight * correction);
}

torch::Tensor exact_effective_policy(PolicyInterface& policy, const torch::Tensor& obs_row,
                                     ConstraintOracle& oracle) {
    auto dist = policy.full_distribution(obs_row);
    auto space = policy.space();
    std::vector<bool> mask(space.flat_size());
    for (int64_t i = 0; i < space.flat_size(); ++i) {
        mask[i] = oracle.is_valid(space.from_flat(i));
    }
    return apply_mask(dist, mask);
}

}  // namespace flowiar
