#ifndef FLOWIAR_TRAINER_HPP
#define FLOWIAR_TRAINER_HPP

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "flowiar/env.hpp"
#include "flowiar/iar.hpp"
#include "flowiar/policy.hpp"

namespace flowiar {

struct TrainConfig {
    double gamma = 0.99;
    int64_t t_max = 8;        // rollout length per environment
    int64_t e_max = 200;      // episode budget across all environments
    int64_t max_env_steps = 0;  // optional hard cap, 0 = none
    int64_t n_envs = 4;
    int64_t S = 16;           // rejection batch size
    int64_t max_retries = 16;
    int64_t n_elbo_steps = 4;
    int64_t elbo_batch_size = 64;
    int64_t n_posterior_samples = 2;
    double lr = 3e-4;
    double critic_lr = 3e-4;
    double elbo_lr = 3e-4;
    double grad_clip = 0.5;
    double value_loss_coef = 0.5;
    double entropy_coef = 0.0;  // enumerable heads only; off by default
    bool use_correction = true;  // false: plain policy gradient with rejection
    CorrectionWeight correction_weight = CorrectionWeight::Consistent;
    // Full-enumeration action masking instead of rejection sampling. Every
    // action is validated through the oracle each step, the policy is
    // renormalized over the valid set, and no correction term applies.
    // Requires an enumerable policy head.
    bool mask_mode = false;
    uint64_t seed = 0;
    int64_t eval_every = 2500;  // environment steps between evaluations
    int64_t n_eval_envs = 10;

    void validate() const;
};

struct Transition {
    torch::Tensor obs;
    torch::Tensor next_obs;
    double reward = 0.0;
    bool done = false;
    ValidActionBatch batch;  // batch.chosen is the executed action
};

// One rollout segment per environment, in step order.
using Rollout = std::vector<std::vector<Transition>>;

// Backward recursion R <- r + gamma * R starting from the bootstrap value
// (0 for terminal tails).
std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma,
                                       double bootstrap);

class CriticImpl : public torch::nn::Module {
public:
    CriticImpl(int64_t obs_dim, int hidden = 64);
    torch::Tensor forward(const torch::Tensor& obs);  // [B, obs_dim] -> [B]

private:
    torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(Critic);

struct UpdateReport {
    double actor_loss = 0.0;
    double critic_loss = 0.0;
    double actor_grad_norm = 0.0;
    double critic_grad_norm = 0.0;
    bool skipped_actor = false;
    bool skipped_critic = false;
    double elbo_mean = 0.0;  // flow policy only
    double cubo_mean = 0.0;
};

struct MetricsRow {
    double wall_clock_s = 0.0;
    int64_t env_steps = 0;
    int64_t episode = 0;
    double mean_return = 0.0;
    double best_return = 0.0;
    double valid_fraction_mean = 0.0;
    int64_t oracle_queries_cum = 0;
    double elbo_mean = 0.0;
    double cubo_mean = 0.0;
    double actor_loss = 0.0;
    double critic_loss = 0.0;
    uint64_t seed = 0;
};

struct TrainResult {
    std::vector<MetricsRow> history;
    double best_return = 0.0;
    double final_return = 0.0;
    int64_t env_steps = 0;
    int64_t episodes = 0;
    int64_t skipped_steps = 0;
};

using EnvFactory = std::function<std::unique_ptr<EnvInterface>()>;

// One evaluation pass: one episode per evaluation environment with fixed
// seeds, actions from rejection sampling. Returns the mean episode return.
double evaluate_policy(PolicyInterface& policy, const EnvFactory& factory,
                       const TrainConfig& cfg, uint64_t eval_seed_base);

class Trainer {
public:
    Trainer(std::shared_ptr<PolicyInterface> policy, Critic critic,
            const EnvFactory& factory, TrainConfig cfg);

    // t_max steps per environment, actions via rejection sampling against
    // each environment's own oracle. Starvation errors carry env index/step.
    Rollout collect_rollout();

    // Aligned (return, advantage) pairs for a rollout segment.
    std::pair<std::vector<double>, std::vector<double>> compute_returns(
        const std::vector<Transition>& segment);

    UpdateReport a2c_update(const Rollout& rollout);

    // Algorithm-1-style interleaved ELBO ascent on rollout states; returns
    // the per-step ELBO trace. No-op for non-flow policies.
    std::vector<double> elbo_optimize(const Rollout& rollout);

    TrainResult train(const std::function<void(const MetricsRow&)>& on_metrics = {});

    int64_t oracle_queries() const;
    torch::Generator& generator() { return gen_; }
    FlowModel* flow_model();
    torch::optim::RMSprop& actor_optimizer() { return *actor_opt_; }
    torch::optim::RMSprop& critic_optimizer() { return *critic_opt_; }
    torch::optim::RMSprop* elbo_optimizer() { return elbo_opt_.get(); }

private:
    ValidActionBatch enumerate_masked(size_t env_index, const torch::Tensor& obs);

    std::shared_ptr<PolicyInterface> policy_;
    Critic critic_;
    EnvFactory factory_;
    TrainConfig cfg_;
    torch::Generator gen_;

    std::vector<std::unique_ptr<EnvInterface>> envs_;
    std::vector<std::unique_ptr<MeteredOracle>> meters_;
    std::vector<torch::Tensor> current_obs_;
    uint64_t next_episode_seed_ = 0;
    int64_t episodes_ = 0;
    int64_t env_steps_ = 0;
    int64_t skipped_ = 0;

    std::unique_ptr<torch::optim::RMSprop> actor_opt_;
    std::unique_ptr<torch::optim::RMSprop> critic_opt_;
    std::unique_ptr<torch::optim::RMSprop> elbo_opt_;
};

}  // namespace flowiar

#endif
