#include "flowiar/flow_model.hpp"

#include <cmath>

namespace flowiar {

namespace {
const double kLog2Pi = std::log(2.0 * M_PI);

torch::TensorOptions opts() { return torch::TensorOptions().dtype(torch::kFloat64); }

torch::nn::Sequential mlp(int64_t in, int hidden, int64_t out, bool zero_last) {
    torch::nn::Sequential net(
        torch::nn::Linear(in, hidden), torch::nn::Tanh(),
        torch::nn::Linear(hidden, hidden), torch::nn::Tanh(),
        torch::nn::Linear(hidden, out));
    if (zero_last) {
        auto last = net[net->size() - 1]->as<torch::nn::Linear>();
        torch::NoGradGuard ng;
        last->weight.zero_();
        last->bias.zero_();
    }
    return net;
}
}  // namespace

torch::Tensor gaussian_logpdf(const torch::Tensor& x, const torch::Tensor& mu,
                              const torch::Tensor& sigma) {
    auto z = (x - mu) / sigma;
    return (-0.5 * kLog2Pi - torch::log(sigma) - 0.5 * z * z).sum(-1);
}

std::vector<Action> argmax_decode(const torch::Tensor& z, const ActionSpace& space) {
    check_finite(z, "argmax_decode input");
    auto zr = z.reshape({-1, space.dims, space.categories}).contiguous();
    auto acc = zr.accessor<double, 3>();
    std::vector<Action> out(zr.size(0));
    for (int64_t b = 0; b < zr.size(0); ++b) {
        Action a(space.dims);
        for (int64_t d = 0; d < space.dims; ++d) {
            int64_t best = 0;
            for (int64_t m = 1; m < space.categories; ++m) {
                if (acc[b][d][m] > acc[b][d][best]) best = m;  // ties keep lowest index
            }
            a[d] = best;
        }
        out[b] = std::move(a);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Coupling layers

CouplingLayerImpl::CouplingLayerImpl(int64_t dim, int64_t ctx_dim, int hidden, bool odd,
                                     double scale_clamp)
    : scale_clamp_(scale_clamp) {
    auto mask = torch::zeros({dim}, opts());
    for (int64_t i = 0; i < dim; ++i) {
        if ((i + (odd ? 1 : 0)) % 2 == 0) mask[i] = 1.0;
    }
    mask_ = register_buffer("mask", mask);
    net_ = register_module("net", mlp(dim + ctx_dim, hidden, 2 * dim, /*zero_last=*/true));
}

std::pair<torch::Tensor, torch::Tensor> CouplingLayerImpl::shift_scale(
    const torch::Tensor& z, const torch::Tensor& ctx) {
    auto h = net_->forward(torch::cat({z * mask_, ctx}, -1));
    auto chunks = h.chunk(2, -1);
    auto free = 1.0 - mask_;
    auto s = scale_clamp_ * torch::tanh(chunks[0] / scale_clamp_) * free;
    auto t = chunks[1] * free;
    return {s, t};
}

std::pair<torch::Tensor, torch::Tensor> CouplingLayerImpl::forward(
    const torch::Tensor& z, const torch::Tensor& ctx) {
    auto [s, t] = shift_scale(z, ctx);
    auto out = mask_ * z + (1.0 - mask_) * (z * torch::exp(s) + t);
    return {out, s.sum(-1)};
}

std::pair<torch::Tensor, torch::Tensor> CouplingLayerImpl::inverse(
    const torch::Tensor& z, const torch::Tensor& ctx) {
    // The masked half is untouched by forward, so s and t are recoverable.
    auto [s, t] = shift_scale(z, ctx);
    auto out = mask_ * z + (1.0 - mask_) * ((z - t) * torch::exp(-s));
    return {out, -s.sum(-1)};
}

CouplingFlowImpl::CouplingFlowImpl(int64_t dim, int64_t ctx_dim, int n_layers, int hidden,
                                   double scale_clamp) {
    for (int k = 0; k < n_layers; ++k) {
        layers_.push_back(register_module(
            "layer" + std::to_string(k),
            CouplingLayer(dim, ctx_dim, hidden, /*odd=*/k % 2 == 1, scale_clamp)));
    }
}

LatentPoint CouplingFlowImpl::forward(const torch::Tensor& z0, const torch::Tensor& ctx) {
    check_finite(z0, "flow_forward input");
    auto z = z0;
    auto log_det = torch::zeros({z0.size(0)}, opts());
    for (size_t k = 0; k < layers_.size(); ++k) {
        auto [zn, ld] = layers_[k]->forward(z, ctx);
        if (!zn.isfinite().all().item<bool>()) {
            throw NumericalError("non-finite latent after forward coupling layer " +
                                 std::to_string(k));
        }
        z = zn;
        log_det = log_det + ld;
    }
    return {z, log_det};
}

LatentPoint CouplingFlowImpl::inverse(const torch::Tensor& zK, const torch::Tensor& ctx) {
    check_finite(zK, "flow_inverse input");
    auto z = zK;
    auto log_det = torch::zeros({zK.size(0)}, opts());
    for (size_t k = layers_.size(); k-- > 0;) {
        auto [zn, ld] = layers_[k]->inverse(z, ctx);
        if (!zn.isfinite().all().item<bool>()) {
            throw NumericalError("non-finite latent after inverse coupling layer " +
                                 std::to_string(k));
        }
        z = zn;
        log_det = log_det + ld;
    }
    return {z, log_det};
}

// ---------------------------------------------------------------------------
// FlowModel

FlowModelImpl::FlowModelImpl(FlowConfig cfg) : cfg_(std::move(cfg)) {
    const int64_t dm = cfg_.latent_dim();
    encoder_ = register_module(
        "encoder", torch::nn::Sequential(torch::nn::Linear(cfg_.obs_dim, cfg_.encoder_hidden),
                                         torch::nn::Tanh(),
                                         torch::nn::Linear(cfg_.encoder_hidden, cfg_.embed_dim),
                                         torch::nn::Tanh()));
    base_mu_ = register_module("base_mu", torch::nn::Linear(cfg_.embed_dim, dm));
    base_pre_sigma_ = register_module("base_pre_sigma", torch::nn::Linear(cfg_.embed_dim, dm));
    {
        torch::NoGradGuard ng;
        base_mu_->weight.zero_();
        base_mu_->bias.zero_();
        base_pre_sigma_->weight.zero_();
        base_pre_sigma_->bias.zero_();
    }
    flow_ = register_module("flow", CouplingFlow(dm, cfg_.embed_dim, cfg_.n_coupling_layers,
                                                 cfg_.coupling_hidden, cfg_.scale_clamp));

    const int64_t qctx = cfg_.embed_dim + dm;  // state embedding + one-hot action
    post_trunk_ = register_module(
        "post_trunk",
        torch::nn::Sequential(torch::nn::Linear(qctx, cfg_.posterior_hidden), torch::nn::Tanh()));
    post_mu_ = register_module("post_mu", torch::nn::Linear(cfg_.posterior_hidden, dm));
    post_pre_sigma_ =
        register_module("post_pre_sigma", torch::nn::Linear(cfg_.posterior_hidden, dm));
    if (cfg_.posterior_mode == PosteriorMode::Flow) {
        post_flow_ = register_module(
            "post_flow", CouplingFlow(dm, qctx, cfg_.posterior_layers, cfg_.posterior_hidden,
                                      cfg_.scale_clamp));
    }

    alpha_raw_ = register_parameter("alpha_raw", torch::zeros({}, opts()));
    alpha_c0_ = register_parameter("alpha_c0", torch::zeros({}, opts()));
    alpha_c1_ = register_parameter("alpha_c1", torch::full({}, -1.0, opts()));

    this->to(torch::kFloat64);
}

torch::Tensor FlowModelImpl::embed(const torch::Tensor& obs) {
    if (obs.dim() != 2 || obs.size(1) != cfg_.obs_dim) {
        throw SchemaError("observation batch has shape " +
                          c10::str(obs.sizes()) + ", expected [*, " +
                          std::to_string(cfg_.obs_dim) + "]");
    }
    return encoder_->forward(obs.to(torch::kFloat64));
}

BaseParams FlowModelImpl::base_params(const torch::Tensor& emb) {
    auto mu = base_mu_->forward(emb);
    auto sigma = torch::softplus(base_pre_sigma_->forward(emb)).clamp_min(cfg_.sigma_min);
    check_finite(mu, "base mu");
    return {mu, sigma};
}

LatentPoint FlowModelImpl::flow_forward(const torch::Tensor& z0, const torch::Tensor& emb) {
    return flow_->forward(z0, emb);
}

LatentPoint FlowModelImpl::flow_inverse(const torch::Tensor& zK, const torch::Tensor& emb) {
    return flow_->inverse(zK, emb);
}

torch::Tensor FlowModelImpl::action_onehot(const std::vector<Action>& actions) {
    auto oh = torch::zeros({static_cast<int64_t>(actions.size()), cfg_.latent_dim()}, opts());
    auto acc = oh.accessor<double, 2>();
    for (size_t b = 0; b < actions.size(); ++b) {
        space().check(actions[b]);
        for (int64_t d = 0; d < cfg_.dims; ++d) {
            acc[b][d * cfg_.categories + actions[b][d]] = 1.0;
        }
    }
    return oh;
}

std::vector<Action> FlowModelImpl::sample_actions(const torch::Tensor& obs,
                                                  torch::Generator& gen,
                                                  torch::Tensor* zK_out) {
    torch::NoGradGuard ng;
    auto emb = embed(obs);
    auto [mu, sigma] = base_params(emb);
    auto eps = torch::randn(mu.sizes(), gen, opts());
    auto zK = flow_->forward(mu + sigma * eps, emb).z;
    if (zK_out) *zK_out = zK;
    return argmax_decode(zK, space());
}

std::pair<torch::Tensor, torch::Tensor> FlowModelImpl::posterior_u(const torch::Tensor& ctx,
                                                                   torch::Generator& gen) {
    auto h = post_trunk_->forward(ctx);
    auto mu = post_mu_->forward(h);
    auto sigma = torch::softplus(post_pre_sigma_->forward(h)).clamp_min(cfg_.sigma_min);
    auto eps = torch::randn(mu.sizes(), gen, opts());
    auto u0 = mu + sigma * eps;
    auto log_q = gaussian_logpdf(u0, mu, sigma);
    if (cfg_.posterior_mode == PosteriorMode::Flow) {
        auto pushed = post_flow_->forward(u0, ctx);
        return {pushed.z, log_q - pushed.log_det_accum};
    }
    return {u0, log_q};
}

PosteriorBatch FlowModelImpl::posterior_sample(const Action& action,
                                               const torch::Tensor& emb_row, int64_t n,
                                               torch::Generator& gen) {
    space().check(action);
    auto oh = action_onehot({action});
    auto ctx = torch::cat({emb_row.reshape({1, -1}), oh}, -1).repeat({n, 1});
    auto [u, log_q_u] = posterior_u(ctx, gen);
    auto target = torch::from_blob(const_cast<int64_t*>(action.data()),
                                   {cfg_.dims}, torch::kInt64)
                      .clone()
                      .unsqueeze(0)
                      .repeat({n, 1});
    auto [v, ld_t] = soft_threshold(u.reshape({n, cfg_.dims, cfg_.categories}), target);
    return {v.reshape({n, cfg_.latent_dim()}), log_q_u - ld_t.sum(-1)};
}

BatchBounds FlowModelImpl::bounds(const torch::Tensor& obs, const std::vector<Action>& actions,
                                  int64_t n_samples, torch::Generator& gen) {
    const int64_t B = obs.size(0);
    const int64_t n = n_samples > 0 ? n_samples : cfg_.n_bound_samples;
    TORCH_CHECK(static_cast<int64_t>(actions.size()) == B, "obs/action count mismatch");

    auto emb = embed(obs);
    auto oh = action_onehot(actions);
    auto ctx = torch::cat({emb, oh}, -1).repeat({n, 1});
    auto emb_rep = emb.repeat({n, 1});

    auto [u, log_q_u] = posterior_u(ctx, gen);

    auto target = torch::zeros({B, cfg_.dims}, torch::kInt64);
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t d = 0; d < cfg_.dims; ++d) target[b][d] = actions[b][d];
    }
    auto [v, ld_t] = soft_threshold(u.reshape({n * B, cfg_.dims, cfg_.categories}),
                                    target.repeat({n, 1}));
    auto log_q = log_q_u - ld_t.sum(-1);

    auto inv = flow_->inverse(v.reshape({n * B, cfg_.latent_dim()}), emb_rep);
    auto [mu, sigma] = base_params(emb);
    auto log_p0 = gaussian_logpdf(inv.z, mu.repeat({n, 1}), sigma.repeat({n, 1}));

    // Importance weight per posterior sample: log p(z0) - log|det F| - log q(v).
    auto w = (log_p0 + inv.log_det_accum - log_q).reshape({n, B});
    auto elbo = w.mean(0);
    auto cubo = 0.5 * torch::logsumexp(2.0 * w, 0) - 0.5 * std::log(static_cast<double>(n));
    if (!cubo.isfinite().all().item<bool>()) {
        throw NumericalError("degenerate posterior: all importance weights vanished");
    }
    check_finite(elbo, "elbo estimate");

    auto alpha = alpha_for(elbo, cubo);
    auto sandwich = alpha * elbo + (1.0 - alpha) * cubo;
    return {elbo, cubo, sandwich, alpha};
}

torch::Tensor FlowModelImpl::alpha_for(const torch::Tensor& elbo, const torch::Tensor& cubo) {
    if (elbo_only_) return torch::ones_like(elbo);
    switch (cfg_.alpha_mode) {
        case AlphaMode::Static:
            return torch::full_like(elbo, cfg_.static_alpha);
        case AlphaMode::Trainable:
            return torch::sigmoid(alpha_raw_).expand_as(elbo);
        case AlphaMode::Adaptive:
            // Larger CUBO-ELBO gaps down-weight the looser upper bound.
            return torch::sigmoid(alpha_c0_ + alpha_c1_ * (cubo - elbo));
    }
    return torch::full_like(elbo, 0.5);
}

BoundTensors FlowModelImpl::sandwich_logprob(const torch::Tensor& obs_row, const Action& action,
                                             torch::Generator& gen, int64_t n_samples) {
    auto b = bounds(obs_row.reshape({1, -1}), {action}, n_samples, gen);
    return b.row(0);
}

std::pair<Action, BoundTensors> FlowModelImpl::sample_action(const torch::Tensor& obs_row,
                                                             torch::Generator& gen) {
    auto obs = obs_row.reshape({1, -1});
    auto action = sample_actions(obs, gen)[0];
    return {action, sandwich_logprob(obs_row, action, gen)};
}

std::vector<torch::Tensor> FlowModelImpl::elbo_parameters() {
    std::vector<torch::Tensor> out;
    for (auto& p : encoder_->parameters()) out.push_back(p);
    out.push_back(base_mu_->weight);
    out.push_back(base_mu_->bias);
    out.push_back(base_pre_sigma_->weight);
    out.push_back(base_pre_sigma_->bias);
    for (auto& p : flow_->parameters()) out.push_back(p);
    for (auto& p : post_trunk_->parameters()) out.push_back(p);
    out.push_back(post_mu_->weight);
    out.push_back(post_mu_->bias);
    out.push_back(post_pre_sigma_->weight);
    out.push_back(post_pre_sigma_->bias);
    if (post_flow_) {
        for (auto& p : post_flow_->parameters()) out.push_back(p);
    }
    return out;
}

}  // namespace flowiar
