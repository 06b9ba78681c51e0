#include "flowiar/policy.hpp"

namespace flowiar {

namespace {
torch::TensorOptions opts() { return torch::TensorOptions().dtype(torch::kFloat64); }

torch::nn::Sequential head_mlp(int64_t in, int hidden, int64_t out) {
    torch::nn::Sequential net(torch::nn::Linear(in, hidden), torch::nn::Tanh(),
                              torch::nn::Linear(hidden, hidden), torch::nn::Tanh(),
                              torch::nn::Linear(hidden, out));
    net->to(torch::kFloat64);
    return net;
}

torch::Tensor as_row(const torch::Tensor& obs_row, int64_t obs_dim) {
    auto obs = obs_row.reshape({1, -1}).to(torch::kFloat64);
    if (obs.size(1) != obs_dim) {
        throw SchemaError("observation has " + std::to_string(obs.size(1)) +
                          " entries, expected " + std::to_string(obs_dim));
    }
    return obs;
}

std::vector<int64_t> flat_indices(const ActionSpace& sp, const std::vector<Action>& actions) {
    std::vector<int64_t> out;
    out.reserve(actions.size());
    for (const auto& a : actions) out.push_back(sp.flat_index(a));
    return out;
}
}  // namespace

std::pair<Action, torch::Tensor> PolicyInterface::sample(const torch::Tensor& obs_row,
                                                         torch::Generator& gen) {
    auto a = sample_batch(obs_row, 1, gen)[0];
    return {a, log_prob(obs_row, a, gen)};
}

torch::Tensor PolicyInterface::log_prob(const torch::Tensor& obs_row, const Action& action,
                                        torch::Generator& gen) {
    return log_prob_batch(obs_row, {action}, gen)[0];
}

torch::Tensor PolicyInterface::full_distribution(const torch::Tensor&) {
    throw CapacityError("policy does not expose a full distribution");
}

// ---------------------------------------------------------------------------
// CategoricalHead

CategoricalHead::CategoricalHead(int64_t obs_dim, ActionSpace space, int hidden)
    : space_(space), obs_dim_(obs_dim) {
    net_ = head_mlp(obs_dim, hidden, space.flat_size());  // guard triggers here
}

torch::Tensor CategoricalHead::logits(const torch::Tensor& obs_row) {
    return net_->forward(as_row(obs_row, obs_dim_)).squeeze(0);
}

std::vector<Action> CategoricalHead::sample_batch(const torch::Tensor& obs_row, int64_t n,
                                                  torch::Generator& gen) {
    torch::NoGradGuard ng;
    auto probs = torch::softmax(logits(obs_row), -1);
    auto idx = torch::multinomial(probs, n, /*replacement=*/true, gen);
    std::vector<Action> out;
    out.reserve(n);
    for (int64_t i = 0; i < n; ++i) out.push_back(space_.from_flat(idx[i].item<int64_t>()));
    return out;
}

torch::Tensor CategoricalHead::log_prob_batch(const torch::Tensor& obs_row,
                                              const std::vector<Action>& actions,
                                              torch::Generator&) {
    auto lp = torch::log_softmax(logits(obs_row), -1);
    auto idx = torch::tensor(flat_indices(space_, actions), torch::kInt64);
    return lp.index_select(0, idx);
}

torch::Tensor CategoricalHead::full_distribution(const torch::Tensor& obs_row) {
    return torch::softmax(logits(obs_row), -1);
}

// ---------------------------------------------------------------------------
// FactoredHead

FactoredHead::FactoredHead(int64_t obs_dim, ActionSpace space, int hidden)
    : space_(space), obs_dim_(obs_dim) {
    net_ = head_mlp(obs_dim, hidden, space.dims * space.categories);
}

torch::Tensor FactoredHead::marginal_log_probs(const torch::Tensor& obs_row) {
    auto logits = net_->forward(as_row(obs_row, obs_dim_))
                      .reshape({space_.dims, space_.categories});
    return torch::log_softmax(logits, -1);
}

std::vector<Action> FactoredHead::sample_batch(const torch::Tensor& obs_row, int64_t n,
                                               torch::Generator& gen) {
    torch::NoGradGuard ng;
    auto probs = marginal_log_probs(obs_row).exp();
    auto idx = torch::multinomial(probs, n, /*replacement=*/true, gen);  // [D, n]
    std::vector<Action> out(n, Action(space_.dims));
    for (int64_t d = 0; d < space_.dims; ++d) {
        for (int64_t i = 0; i < n; ++i) out[i][d] = idx[d][i].item<int64_t>();
    }
    return out;
}

torch::Tensor FactoredHead::log_prob_batch(const torch::Tensor& obs_row,
                                           const std::vector<Action>& actions,
                                           torch::Generator&) {
    auto lp = marginal_log_probs(obs_row);
    auto target = torch::zeros({static_cast<int64_t>(actions.size()), space_.dims},
                               torch::kInt64);
    for (size_t b = 0; b < actions.size(); ++b) {
        space_.check(actions[b]);
        for (int64_t d = 0; d < space_.dims; ++d) target[b][d] = actions[b][d];
    }
    // sum_d log p_d(a_d)
    auto expanded = lp.unsqueeze(0).expand({target.size(0), space_.dims, space_.categories});
    return expanded.gather(-1, target.unsqueeze(-1)).squeeze(-1).sum(-1);
}

torch::Tensor FactoredHead::full_distribution(const torch::Tensor& obs_row) {
    space_.flat_size();  // capacity guard
    auto probs = marginal_log_probs(obs_row).exp();
    auto joint = torch::ones({1}, opts());
    for (int64_t d = 0; d < space_.dims; ++d) {
        joint = (joint.unsqueeze(-1) * probs[d]).reshape({-1});
    }
    return joint;
}

// ---------------------------------------------------------------------------
// AutoregressiveHead

AutoregressiveHead::AutoregressiveHead(int64_t obs_dim, ActionSpace space, int hidden,
                                       std::vector<int64_t> dim_order)
    : space_(space), obs_dim_(obs_dim), order_(std::move(dim_order)) {
    if (order_.empty()) {
        order_.resize(space.dims);
        for (int64_t d = 0; d < space.dims; ++d) order_[d] = d;
    }
    if (static_cast<int64_t>(order_.size()) != space.dims) {
        throw ValidationError("dimension ordering must be a permutation of all dims");
    }
    trunk_ = head_mlp(obs_dim, hidden, hidden);
    in_emb_ = torch::nn::Linear(hidden, hidden);
    in_prefix_ = torch::nn::Linear(torch::nn::LinearOptions(space.dims * space.categories,
                                                            hidden).bias(false));
    in_dim_ = torch::nn::Linear(torch::nn::LinearOptions(space.dims, hidden).bias(false));
    out_ = torch::nn::Linear(hidden, space.categories);
    for (auto* m : {&in_emb_, &in_prefix_, &in_dim_, &out_}) (*m)->to(torch::kFloat64);
}

std::vector<torch::Tensor> AutoregressiveHead::parameters() {
    auto out = trunk_->parameters();
    for (auto& p : in_emb_->parameters()) out.push_back(p);
    for (auto& p : in_prefix_->parameters()) out.push_back(p);
    for (auto& p : in_dim_->parameters()) out.push_back(p);
    for (auto& p : out_->parameters()) out.push_back(p);
    return out;
}

void AutoregressiveHead::zero_conditioning() {
    torch::NoGradGuard ng;
    in_prefix_->weight.zero_();
}

torch::Tensor AutoregressiveHead::step_logits(const torch::Tensor& emb,
                                              const torch::Tensor& prefix_oh,
                                              int64_t order_pos) {
    auto dim_oh = torch::zeros({emb.size(0), space_.dims}, opts());
    dim_oh.index_put_({torch::indexing::Slice(), order_[order_pos]}, 1.0);
    auto h = torch::tanh(in_emb_->forward(emb) + in_prefix_->forward(prefix_oh) +
                         in_dim_->forward(dim_oh));
    return out_->forward(h);
}

std::vector<Action> AutoregressiveHead::sample_batch(const torch::Tensor& obs_row, int64_t n,
                                                     torch::Generator& gen) {
    torch::NoGradGuard ng;
    auto emb = trunk_->forward(as_row(obs_row, obs_dim_)).repeat({n, 1});
    auto prefix = torch::zeros({n, space_.dims * space_.categories}, opts());
    std::vector<Action> out(n, Action(space_.dims));
    for (int64_t pos = 0; pos < space_.dims; ++pos) {
        int64_t d = order_[pos];
        auto probs = torch::softmax(step_logits(emb, prefix, pos), -1);
        auto idx = torch::multinomial(probs, 1, /*replacement=*/true, gen).squeeze(-1);
        for (int64_t i = 0; i < n; ++i) {
            int64_t a = idx[i].item<int64_t>();
            out[i][d] = a;
            prefix[i][d * space_.categories + a] = 1.0;
        }
    }
    return out;
}

torch::Tensor AutoregressiveHead::log_prob_batch(const torch::Tensor& obs_row,
                                                 const std::vector<Action>& actions,
                                                 torch::Generator&) {
    const int64_t B = static_cast<int64_t>(actions.size());
    auto emb = trunk_->forward(as_row(obs_row, obs_dim_)).repeat({B, 1});
    auto prefix = torch::zeros({B, space_.dims * space_.categories}, opts());
    auto lp = torch::zeros({B}, opts());
    for (int64_t pos = 0; pos < space_.dims; ++pos) {
        int64_t d = order_[pos];
        auto step_lp = torch::log_softmax(step_logits(emb, prefix, pos), -1);
        auto target = torch::zeros({B, 1}, torch::kInt64);
        for (int64_t b = 0; b < B; ++b) {
            space_.check(actions[b]);
            target[b][0] = actions[b][d];
        }
        lp = lp + step_lp.gather(-1, target).squeeze(-1);
        auto next = prefix.clone();
        for (int64_t b = 0; b < B; ++b) {
            next[b][d * space_.categories + actions[b][d]] = 1.0;
        }
        prefix = next;
    }
    return lp;
}

torch::Tensor AutoregressiveHead::full_distribution(const torch::Tensor& obs_row) {
    const int64_t n = space_.flat_size();
    std::vector<Action> all(n);
    for (int64_t i = 0; i < n; ++i) all[i] = space_.from_flat(i);
    auto gen = at::detail::createCPUGenerator(0);  // unused by log_prob_batch
    return log_prob_batch(obs_row, all, gen).exp();
}

torch::Tensor AutoregressiveHead::conditional_probs(const torch::Tensor& obs_row,
                                                    const Action& prefix_vals) {
    const int64_t k = static_cast<int64_t>(prefix_vals.size());
    if (k >= space_.dims) throw ValidationError("prefix must leave at least one dimension");
    auto emb = trunk_->forward(as_row(obs_row, obs_dim_));
    auto prefix = torch::zeros({1, space_.dims * space_.categories}, opts());
    for (int64_t pos = 0; pos < k; ++pos) {
        prefix[0][order_[pos] * space_.categories + prefix_vals[pos]] = 1.0;
    }
    return torch::softmax(step_logits(emb, prefix, k), -1).squeeze(0);
}

// ---------------------------------------------------------------------------
// FlowPolicyAdapter

std::vector<Action> FlowPolicyAdapter::sample_batch(const torch::Tensor& obs_row, int64_t n,
                                                    torch::Generator& gen) {
    auto obs = obs_row.reshape({1, -1}).repeat({n, 1});
    return model_->sample_actions(obs, gen);
}

torch::Tensor FlowPolicyAdapter::log_prob_batch(const torch::Tensor& obs_row,
                                                const std::vector<Action>& actions,
                                                torch::Generator& gen) {
    auto obs = obs_row.reshape({1, -1}).repeat({static_cast<int64_t>(actions.size()), 1});
    return model_->bounds(obs, actions, -1, gen).sandwich;
}

// ---------------------------------------------------------------------------
// Masking

torch::Tensor apply_mask(const torch::Tensor& dist, const std::vector<bool>& mask) {
    if (dist.size(0) != static_cast<int64_t>(mask.size())) {
        throw SchemaError("mask length does not match distribution size");
    }
    auto m = torch::zeros_like(dist);
    bool any = false;
    for (size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) {
            m[i] = 1.0;
            any = true;
        }
    }
    if (!any) throw ValidationError("mask has no valid action");
    auto masked = dist * m;
    auto total = masked.sum();
    if (total.item<double>() <= 0.0) {
        throw NumericalError("masked distribution has zero total probability");
    }
    return masked / total;
}

MaskedPolicy::MaskedPolicy(std::shared_ptr<PolicyInterface> inner, ConstraintOracle& oracle)
    : inner_(std::move(inner)), oracle_(oracle) {
    if (!inner_->enumerable()) {
        throw CapacityError("masking requires an enumerable policy head");
    }
    inner_->space().flat_size();  // capacity guard
}

std::vector<bool> MaskedPolicy::current_mask(const torch::Tensor&) {
    const int64_t n = inner_->space().flat_size();
    std::vector<bool> mask(n);
    for (int64_t i = 0; i < n; ++i) {
        mask[i] = oracle_.is_valid(inner_->space().from_flat(i));
    }
    return mask;
}

torch::Tensor MaskedPolicy::full_distribution(const torch::Tensor& obs_row) {
    return apply_mask(inner_->full_distribution(obs_row), current_mask(obs_row));
}

std::vector<Action> MaskedPolicy::sample_batch(const torch::Tensor& obs_row, int64_t n,
                                               torch::Generator& gen) {
    torch::NoGradGuard ng;
    auto dist = full_distribution(obs_row);
    auto idx = torch::multinomial(dist, n, /*replacement=*/true, gen);
    std::vector<Action> out;
    out.reserve(n);
    for (int64_t i = 0; i < n; ++i) {
        out.push_back(inner_->space().from_flat(idx[i].item<int64_t>()));
    }
    return out;
}

torch::Tensor MaskedPolicy::log_prob_batch(const torch::Tensor& obs_row,
                                           const std::vector<Action>& actions,
                                           torch::Generator&) {
    auto dist = full_distribution(obs_row);
    auto idx = torch::tensor(flat_indices(inner_->space(), actions), torch::kInt64);
    return torch::log(dist.index_select(0, idx));
}

}  // namespace flowiar
