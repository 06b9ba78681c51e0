#ifndef FLOWIAR_POLICY_HPP
#define FLOWIAR_POLICY_HPP

#include <memory>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "flowiar/flow_model.hpp"
#include "flowiar/oracle.hpp"
#include "flowiar/types.hpp"

namespace flowiar {

// Uniform stochastic-policy surface: draw actions and score them with a
// differentiable log-probability (exact for the baseline heads, sandwich
// estimate for the flow policy).
class PolicyInterface {
public:
    virtual ~PolicyInterface() = default;

    virtual ActionSpace space() const = 0;
    virtual int64_t obs_dim() const = 0;

    // n i.i.d. draws for one observation row; no gradients.
    virtual std::vector<Action> sample_batch(const torch::Tensor& obs_row, int64_t n,
                                             torch::Generator& gen) = 0;

    // Differentiable log prob (or estimate) for each action at this state.
    virtual torch::Tensor log_prob_batch(const torch::Tensor& obs_row,
                                         const std::vector<Action>& actions,
                                         torch::Generator& gen) = 0;

    virtual bool enumerable() const { return false; }
    // Probability vector over all M^D flat actions (enumerable heads only).
    virtual torch::Tensor full_distribution(const torch::Tensor& obs_row);

    virtual std::vector<torch::Tensor> parameters() = 0;

    std::pair<Action, torch::Tensor> sample(const torch::Tensor& obs_row,
                                            torch::Generator& gen);
    torch::Tensor log_prob(const torch::Tensor& obs_row, const Action& action,
                           torch::Generator& gen);
};

// Softmax over flat logits for the whole joint action space (guarded).
class CategoricalHead : public PolicyInterface {
public:
    CategoricalHead(int64_t obs_dim, ActionSpace space, int hidden = 64);

    ActionSpace space() const override { return space_; }
    int64_t obs_dim() const override { return obs_dim_; }
    std::vector<Action> sample_batch(const torch::Tensor& obs_row, int64_t n,
                                     torch::Generator& gen) override;
    torch::Tensor log_prob_batch(const torch::Tensor& obs_row,
                                 const std::vector<Action>& actions,
                                 torch::Generator& gen) override;
    bool enumerable() const override { return true; }
    torch::Tensor full_distribution(const torch::Tensor& obs_row) override;
    std::vector<torch::Tensor> parameters() override { return net_->parameters(); }

    torch::nn::Sequential net() { return net_; }

private:
    torch::Tensor logits(const torch::Tensor& obs_row);
    ActionSpace space_;
    int64_t obs_dim_;
    torch::nn::Sequential net_{nullptr};
};

// D independent per-dimension categorical distributions.
class FactoredHead : public PolicyInterface {
public:
    FactoredHead(int64_t obs_dim, ActionSpace space, int hidden = 64);

    ActionSpace space() const override { return space_; }
    int64_t obs_dim() const override { return obs_dim_; }
    std::vector<Action> sample_batch(const torch::Tensor& obs_row, int64_t n,
                                     torch::Generator& gen) override;
    torch::Tensor log_prob_batch(const torch::Tensor& obs_row,
                                 const std::vector<Action>& actions,
                                 torch::Generator& gen) override;
    bool enumerable() const override { return true; }
    torch::Tensor full_distribution(const torch::Tensor& obs_row) override;
    std::vector<torch::Tensor> parameters() override { return net_->parameters(); }

    // [D, M] log-probabilities of the marginals.
    torch::Tensor marginal_log_probs(const torch::Tensor& obs_row);

private:
    ActionSpace space_;
    int64_t obs_dim_;
    torch::nn::Sequential net_{nullptr};
};

// Sequential per-dimension head with shared weights: dimension d's logits are
// conditioned on the state embedding, a one-hot of the dimension index, and
// one-hot embeddings of the previously sampled dimensions.
class AutoregressiveHead : public PolicyInterface {
public:
    AutoregressiveHead(int64_t obs_dim, ActionSpace space, int hidden = 64,
                       std::vector<int64_t> dim_order = {});

    ActionSpace space() const override { return space_; }
    int64_t obs_dim() const override { return obs_dim_; }
    std::vector<Action> sample_batch(const torch::Tensor& obs_row, int64_t n,
                                     torch::Generator& gen) override;
    torch::Tensor log_prob_batch(const torch::Tensor& obs_row,
                                 const std::vector<Action>& actions,
                                 torch::Generator& gen) override;
    bool enumerable() const override { return true; }
    torch::Tensor full_distribution(const torch::Tensor& obs_row) override;
    std::vector<torch::Tensor> parameters() override;

    // Conditional distribution of the next dimension given a forced prefix
    // (in generation order); prefix may be shorter than D.
    torch::Tensor conditional_probs(const torch::Tensor& obs_row, const Action& prefix);

    // Zeroes the weights that read the prefix one-hots, removing all
    // conditioning signal between dimensions.
    void zero_conditioning();

private:
    // logits for one generation step; prefix_oh [B, D*M].
    torch::Tensor step_logits(const torch::Tensor& emb, const torch::Tensor& prefix_oh,
                              int64_t order_pos);

    ActionSpace space_;
    int64_t obs_dim_;
    std::vector<int64_t> order_;
    torch::nn::Sequential trunk_{nullptr};
    torch::nn::Linear in_emb_{nullptr}, in_prefix_{nullptr}, in_dim_{nullptr};
    torch::nn::Linear out_{nullptr};
};

// Flow policy behind the shared interface; log_prob is the sandwich estimate.
class FlowPolicyAdapter : public PolicyInterface {
public:
    explicit FlowPolicyAdapter(FlowModel model) : model_(std::move(model)) {}

    ActionSpace space() const override { return model_->space(); }
    int64_t obs_dim() const override { return model_->config().obs_dim; }
    std::vector<Action> sample_batch(const torch::Tensor& obs_row, int64_t n,
                                     torch::Generator& gen) override;
    torch::Tensor log_prob_batch(const torch::Tensor& obs_row,
                                 const std::vector<Action>& actions,
                                 torch::Generator& gen) override;
    std::vector<torch::Tensor> parameters() override { return model_->parameters(); }

    FlowModel& model() { return model_; }

private:
    FlowModel model_;
};

// Invalid entries zeroed and the remainder renormalized.
torch::Tensor apply_mask(const torch::Tensor& dist, const std::vector<bool>& mask);

// Enumerates the whole action space through the oracle each step and samples
// from the masked, renormalized distribution.
class MaskedPolicy : public PolicyInterface {
public:
    MaskedPolicy(std::shared_ptr<PolicyInterface> inner, ConstraintOracle& oracle);

    ActionSpace space() const override { return inner_->space(); }
    int64_t obs_dim() const override { return inner_->obs_dim(); }
    std::vector<Action> sample_batch(const torch::Tensor& obs_row, int64_t n,
                                     torch::Generator& gen) override;
    torch::Tensor log_prob_batch(const torch::Tensor& obs_row,
                                 const std::vector<Action>& actions,
                                 torch::Generator& gen) override;
    bool enumerable() const override { return true; }
    torch::Tensor full_distribution(const torch::Tensor& obs_row) override;
    std::vector<torch::Tensor> parameters() override { return inner_->parameters(); }

private:
    std::vector<bool> current_mask(const torch::Tensor& obs_row);
    std::shared_ptr<PolicyInterface> inner_;
    ConstraintOracle& oracle_;
};

}  // namespace flowiar

#endif
