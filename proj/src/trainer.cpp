#include "flowiar/trainer.hpp"

#include <chrono>
#include <cmath>

#include "flowiar/errors.hpp"

namespace flowiar {

namespace {

bool grads_finite(const std::vector<torch::Tensor>& params) {
    for (const auto& p : params) {
        if (p.grad().defined() && !p.grad().isfinite().all().item<bool>()) return false;
    }
    return true;
}

void zero_grads(const std::vector<torch::Tensor>& params) {
    for (const auto& p : params) {
        if (p.grad().defined()) p.mutable_grad().zero_();
    }
}

double clip_norm(const std::vector<torch::Tensor>& params, double max_norm) {
    return torch::nn::utils::clip_grad_norm_(params, max_norm);
}

}  // namespace

void TrainConfig::validate() const {
    if (gamma <= 0.0 || gamma >= 1.0) throw ValidationError("gamma must lie in (0,1)");
    if (t_max < 1) throw ValidationError("t_max must be positive");
    if (e_max < 1) throw ValidationError("e_max must be positive");
    if (n_envs < 1) throw ValidationError("n_envs must be positive");
    if (S < 1) throw ValidationError("S must be positive");
    if (max_retries < 1) throw ValidationError("max_retries must be positive");
    if (lr <= 0 || critic_lr <= 0 || elbo_lr <= 0) {
        throw ValidationError("learning rates must be positive");
    }
    if (n_posterior_samples < 1) {
        throw ValidationError("n_posterior_samples must be positive");
    }
    if (eval_every < 1) throw ValidationError("eval_every must be positive");
    if (n_eval_envs < 1) throw ValidationError("n_eval_envs must be positive");
    if (max_env_steps < 0) throw ValidationError("max_env_steps must be nonnegative");
    if (entropy_coef < 0) throw ValidationError("entropy_coef must be nonnegative");
}

std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma,
                                       double bootstrap) {
    std::vector<double> out(rewards.size());
    double r = bootstrap;
    for (size_t i = rewards.size(); i-- > 0;) {
        r = rewards[i] + gamma * r;
        out[i] = r;
    }
    return out;
}

CriticImpl::CriticImpl(int64_t obs_dim, int hidden) {
    net_ = torch::nn::Sequential(torch::nn::Linear(obs_dim, hidden), torch::nn::Tanh(),
                                 torch::nn::Linear(hidden, hidden), torch::nn::Tanh(),
                                 torch::nn::Linear(hidden, 1));
    net_->to(torch::kFloat64);
    register_module("net", net_);
}

torch::Tensor CriticImpl::forward(const torch::Tensor& obs) {
    auto v = net_->forward(obs.to(torch::kFloat64)).squeeze(-1);
    check_finite(v, "critic value");
    return v;
}

double evaluate_policy(PolicyInterface& policy, const EnvFactory& factory,
                       const TrainConfig& cfg, uint64_t eval_seed_base) {
    torch::NoGradGuard ng;
    double total = 0.0;
    for (int64_t i = 0; i < cfg.n_eval_envs; ++i) {
        auto env = factory();
        auto gen = at::detail::createCPUGenerator(eval_seed_base + i);
        auto obs = env->reset(eval_seed_base + i);
        bool done = false;
        while (!done) {
            auto batch = rejection_sample(policy, obs, env->oracle(), cfg.S, gen,
                                          cfg.max_retries);
            auto res = env->step(batch.chosen);
            total += res.reward;
            obs = res.obs;
            done = res.done;
        }
    }
    return total / static_cast<double>(cfg.n_eval_envs);
}

Trainer::Trainer(std::shared_ptr<PolicyInterface> policy, Critic critic,
                 const EnvFactory& factory, TrainConfig cfg)
    : policy_(std::move(policy)),
      critic_(std::move(critic)),
      factory_(factory),
      cfg_(std::move(cfg)),
      gen_(at::detail::createCPUGenerator(cfg_.seed)) {
    cfg_.validate();
    if (cfg_.mask_mode && !policy_->enumerable()) {
        throw ValidationError("mask_mode requires an enumerable policy head");
    }
    next_episode_seed_ = cfg_.seed * 1000 + 1;
    for (int64_t i = 0; i < cfg_.n_envs; ++i) {
        envs_.push_back(factory_());
        meters_.push_back(std::make_unique<MeteredOracle>(envs_.back()->oracle()));
        current_obs_.push_back(envs_.back()->reset(next_episode_seed_++));
    }
    actor_opt_ = std::make_unique<torch::optim::RMSprop>(
        policy_->parameters(), torch::optim::RMSpropOptions(cfg_.lr));
    critic_opt_ = std::make_unique<torch::optim::RMSprop>(
        critic_->parameters(), torch::optim::RMSpropOptions(cfg_.critic_lr));
    if (auto* fm = flow_model()) {
        elbo_opt_ = std::make_unique<torch::optim::RMSprop>(
            (*fm)->elbo_parameters(), torch::optim::RMSpropOptions(cfg_.elbo_lr));
    }
}

FlowModel* Trainer::flow_model() {
    if (auto* adapter = dynamic_cast<FlowPolicyAdapter*>(policy_.get())) {
        return &adapter->model();
    }
    return nullptr;
}

int64_t Trainer::oracle_queries() const {
    int64_t total = 0;
    for (const auto& m : meters_) total += m->count();
    return total;
}

ValidActionBatch Trainer::enumerate_masked(size_t env_index, const torch::Tensor& obs) {
    const auto space = policy_->space();
    const int64_t total = space.flat_size();
    ValidActionBatch batch;
    batch.S = total;
    batch.attempts = 1;
    batch.total_draws = total;
    std::vector<int64_t> valid_flat;
    for (int64_t idx = 0; idx < total; ++idx) {
        auto action = space.from_flat(idx);
        if (meters_[env_index]->is_valid(action)) {
            batch.valid_actions.push_back(std::move(action));
            valid_flat.push_back(idx);
        }
    }
    if (batch.valid_actions.empty()) {
        throw StarvationError("no valid action in the enumerated action space", total);
    }
    torch::Tensor probs;
    {
        torch::NoGradGuard ng;
        auto dist = policy_->full_distribution(obs);
        auto keep = torch::tensor(valid_flat, torch::kInt64);
        probs = dist.index_select(0, keep);
        auto mass = probs.sum();
        if (mass.item<double>() <= 0.0) {
            throw NumericalError("masked policy has zero mass on the valid set");
        }
        probs = probs / mass;
    }
    batch.chosen_index = torch::multinomial(probs, 1, true, gen_).item<int64_t>();
    batch.chosen = batch.valid_actions[batch.chosen_index];
    return batch;
}

Rollout Trainer::collect_rollout() {
    Rollout rollout(envs_.size());
    for (size_t e = 0; e < envs_.size(); ++e) {
        for (int64_t t = 0; t < cfg_.t_max; ++t) {
            Transition tr;
            tr.obs = current_obs_[e];
            try {
                tr.batch = cfg_.mask_mode
                               ? enumerate_masked(e, tr.obs)
                               : rejection_sample(*policy_, tr.obs, *meters_[e], cfg_.S,
                                                  gen_, cfg_.max_retries);
            } catch (const StarvationError& err) {
                throw StarvationError("environment " + std::to_string(e) + " at step " +
                                          std::to_string(env_steps_) + ": " + err.what(),
                                      err.total_draws);
            }
            auto res = envs_[e]->step(tr.batch.chosen);
            tr.next_obs = res.obs;
            tr.reward = res.reward;
            tr.done = res.done;
            ++env_steps_;
            rollout[e].push_back(std::move(tr));
            if (res.done) {
                ++episodes_;
                current_obs_[e] = envs_[e]->reset(next_episode_seed_++);
                break;
            }
            current_obs_[e] = res.obs;
        }
    }
    return rollout;
}

std::pair<std::vector<double>, std::vector<double>> Trainer::compute_returns(
    const std::vector<Transition>& segment) {
    if (segment.empty()) throw ContractViolation("empty rollout segment");
    torch::NoGradGuard ng;
    double bootstrap = 0.0;
    if (!segment.back().done) {
        bootstrap = critic_->forward(segment.back().next_obs.unsqueeze(0)).item<double>();
    }
    std::vector<double> rewards;
    for (const auto& tr : segment) rewards.push_back(tr.reward);
    auto returns = discounted_returns(rewards, cfg_.gamma, bootstrap);
    std::vector<double> advantages(returns.size());
    for (size_t i = 0; i < segment.size(); ++i) {
        double v = critic_->forward(segment[i].obs.unsqueeze(0)).item<double>();
        advantages[i] = returns[i] - v;
    }
    return {returns, advantages};
}

UpdateReport Trainer::a2c_update(const Rollout& rollout) {
    UpdateReport report;
    std::vector<const Transition*> flat;
    std::vector<double> advantages, returns;
    for (const auto& segment : rollout) {
        if (segment.empty()) continue;
        auto [rets, advs] = compute_returns(segment);
        for (size_t i = 0; i < segment.size(); ++i) {
            flat.push_back(&segment[i]);
            returns.push_back(rets[i]);
            advantages.push_back(advs[i]);
        }
    }
    if (flat.empty()) throw ContractViolation("empty rollout");
    const int64_t n = static_cast<int64_t>(flat.size());

    // critic regression toward the bootstrapped returns
    {
        std::vector<torch::Tensor> obs;
        for (auto* tr : flat) obs.push_back(tr->obs);
        auto v = critic_->forward(torch::stack(obs));
        auto target = torch::tensor(returns, torch::kFloat64);
        auto loss = cfg_.value_loss_coef * torch::mse_loss(v, target);
        report.critic_loss = loss.item<double>();
        critic_opt_->zero_grad();
        loss.backward();
        report.critic_grad_norm = clip_norm(critic_->parameters(), cfg_.grad_clip);
        if (grads_finite(critic_->parameters())) {
            critic_opt_->step();
        } else {
            zero_grads(critic_->parameters());
            report.skipped_critic = true;
            ++skipped_;
        }
    }

    // actor: per-transition corrected surrogate over the valid-sample scores
    if (cfg_.entropy_coef > 0.0 && !policy_->enumerable()) {
        throw ValidationError("entropy bonus requires an enumerable policy head");
    }
    auto* fm = flow_model();
    std::vector<torch::Tensor> scores(n);
    if (fm) {
        std::vector<torch::Tensor> obs_rows;
        std::vector<Action> acts;
        for (auto* tr : flat) {
            for (const auto& a : tr->batch.valid_actions) {
                obs_rows.push_back(tr->obs);
                acts.push_back(a);
            }
        }
        auto bb = (*fm)->bounds(torch::stack(obs_rows), acts, cfg_.n_posterior_samples,
                                gen_);
        report.elbo_mean = bb.elbo.mean().item<double>();
        report.cubo_mean = bb.cubo.mean().item<double>();
        int64_t off = 0;
        for (int64_t i = 0; i < n; ++i) {
            int64_t l = flat[i]->batch.l();
            scores[i] = bb.sandwich.slice(0, off, off + l);
            off += l;
        }
    } else {
        for (int64_t i = 0; i < n; ++i) {
            scores[i] = policy_->log_prob_batch(flat[i]->obs,
                                                flat[i]->batch.valid_actions, gen_);
        }
    }

    auto actor_loss = torch::zeros({}, torch::kFloat64);
    for (int64_t i = 0; i < n; ++i) {
        const auto& batch = flat[i]->batch;
        auto chosen_lp = scores[i][batch.chosen_index];
        if (cfg_.mask_mode) {
            // exact log-prob under the mask-renormalized policy
            actor_loss =
                actor_loss - advantages[i] * (chosen_lp - scores[i].logsumexp(0));
        } else if (cfg_.use_correction) {
            std::vector<torch::Tensor> valid_lps;
            for (int64_t j = 0; j < batch.l(); ++j) valid_lps.push_back(scores[i][j]);
            actor_loss = actor_loss + iar_surrogate_loss(advantages[i], chosen_lp,
                                                         valid_lps, batch.S,
                                                         cfg_.correction_weight);
        } else {
            actor_loss = actor_loss - advantages[i] * chosen_lp;
        }
        if (cfg_.entropy_coef > 0.0) {
            auto dist = policy_->full_distribution(flat[i]->obs);
            auto entropy = -(dist * (dist + 1e-12).log()).sum();
            actor_loss = actor_loss - cfg_.entropy_coef * entropy;
        }
    }
    actor_loss = actor_loss / static_cast<double>(n);
    report.actor_loss = actor_loss.item<double>();

    auto params = policy_->parameters();
    zero_grads(params);
    actor_loss.backward();
    report.actor_grad_norm = clip_norm(params, cfg_.grad_clip);
    if (grads_finite(params)) {
        actor_opt_->step();
    } else {
        zero_grads(params);
        report.skipped_actor = true;
        ++skipped_;
    }
    return report;
}

std::vector<double> Trainer::elbo_optimize(const Rollout& rollout) {
    auto* fm = flow_model();
    if (!fm) return {};
    std::vector<torch::Tensor> states;
    for (const auto& segment : rollout) {
        for (const auto& tr : segment) states.push_back(tr.obs);
    }
    if (states.empty()) throw ContractViolation("empty rollout");
    auto all = torch::stack(states);
    int64_t take = std::min<int64_t>(cfg_.elbo_batch_size, all.size(0));
    auto perm = torch::randperm(all.size(0), gen_, torch::kInt64).slice(0, 0, take);
    auto batch_obs = all.index_select(0, perm);

    auto elbo_params = (*fm)->elbo_parameters();
    std::vector<double> trace;
    for (int64_t step = 0; step < cfg_.n_elbo_steps; ++step) {
        std::vector<Action> actions;
        {
            torch::NoGradGuard ng;
            actions = (*fm)->sample_actions(batch_obs, gen_);
        }
        try {
            auto bb = (*fm)->bounds(batch_obs, actions, cfg_.n_posterior_samples, gen_);
            auto loss = -bb.elbo.mean();
            zero_grads((*fm)->parameters());
            loss.backward();
            clip_norm(elbo_params, cfg_.grad_clip);
            if (grads_finite(elbo_params)) {
                elbo_opt_->step();
                trace.push_back(-loss.item<double>());
            } else {
                ++skipped_;
            }
            zero_grads((*fm)->parameters());
        } catch (const NumericalError&) {
            ++skipped_;
        }
    }
    return trace;
}

TrainResult Trainer::train(const std::function<void(const MetricsRow&)>& on_metrics) {
    TrainResult result;
    auto t0 = std::chrono::steady_clock::now();
    const uint64_t eval_base = cfg_.seed * 7919 + 500000;
    double best = -std::numeric_limits<double>::infinity();
    int64_t next_eval = 0;
    double vf_sum = 0.0;
    int64_t vf_n = 0;
    UpdateReport last_report;

    auto emit = [&]() {
        double mean_ret = evaluate_policy(*policy_, factory_, cfg_, eval_base);
        best = std::max(best, mean_ret);
        MetricsRow row;
        row.wall_clock_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        row.env_steps = env_steps_;
        row.episode = episodes_;
        row.mean_return = mean_ret;
        row.best_return = best;
        row.valid_fraction_mean = vf_n ? vf_sum / vf_n : 0.0;
        row.oracle_queries_cum = oracle_queries();
        row.elbo_mean = last_report.elbo_mean;
        row.cubo_mean = last_report.cubo_mean;
        row.actor_loss = last_report.actor_loss;
        row.critic_loss = last_report.critic_loss;
        row.seed = cfg_.seed;
        result.history.push_back(row);
        if (on_metrics) on_metrics(row);
        vf_sum = 0.0;
        vf_n = 0;
    };

    while (episodes_ < cfg_.e_max &&
           (cfg_.max_env_steps == 0 || env_steps_ < cfg_.max_env_steps)) {
        auto rollout = collect_rollout();
        for (const auto& segment : rollout) {
            for (const auto& tr : segment) {
                vf_sum += tr.batch.valid_fraction();
                ++vf_n;
            }
        }
        last_report = a2c_update(rollout);
        elbo_optimize(rollout);
        if (env_steps_ >= next_eval) {
            emit();
            next_eval += cfg_.eval_every;
        }
    }
    emit();
    result.best_return = best;
    result.final_return = result.history.back().mean_return;
    result.env_steps = env_steps_;
    result.episodes = episodes_;
    result.skipped_steps = skipped_;
    return result;
}

}  // namespace flowiar
