#ifndef FLOWIAR_FLOW_MODEL_HPP
#define FLOWIAR_FLOW_MODEL_HPP

#include <utility>
#include <vector>

#include <torch/torch.h>

#include "flowiar/soft_threshold.hpp"
#include "flowiar/types.hpp"

namespace flowiar {

enum class PosteriorMode { Gaussian, Flow };
enum class AlphaMode { Static, Trainable, Adaptive };

struct FlowConfig {
    int64_t dims = 1;        // D
    int64_t categories = 2;  // M
    int64_t obs_dim = 1;

    int embed_dim = 32;
    int encoder_hidden = 64;
    int n_coupling_layers = 4;
    int coupling_hidden = 64;
    int posterior_layers = 2;
    int posterior_hidden = 64;
    double sigma_min = 1e-3;
    double scale_clamp = 5.0;

    PosteriorMode posterior_mode = PosteriorMode::Flow;
    AlphaMode alpha_mode = AlphaMode::Adaptive;
    double static_alpha = 0.5;
    int n_bound_samples = 2;

    int64_t latent_dim() const { return dims * categories; }
};

// Diagonal Gaussian base parameters, shapes [B, D*M].
struct BaseParams {
    torch::Tensor mu;
    torch::Tensor sigma;
};

// A latent with its accumulated log |det| along the transform path.
struct LatentPoint {
    torch::Tensor z;              // [B, D*M]
    torch::Tensor log_det_accum;  // [B]
};

// Per-row bounds; each tensor has shape [B].
struct BatchBounds {
    torch::Tensor elbo;
    torch::Tensor cubo;
    torch::Tensor sandwich;
    torch::Tensor alpha;

    BoundTensors row(int64_t i) const {
        return {elbo[i], cubo[i], sandwich[i], alpha[i]};
    }
};

// Posterior samples for one (action, state) pair: v satisfies the argmax
// constraint exactly, log_q is the posterior log-density of v.
struct PosteriorBatch {
    torch::Tensor v;      // [n, D*M]
    torch::Tensor log_q;  // [n]
};

torch::Tensor gaussian_logpdf(const torch::Tensor& x, const torch::Tensor& mu,
                              const torch::Tensor& sigma);  // summed over last dim

// Deterministic per-row argmax over the category axis; exact ties go to the
// lowest index so repeated runs decode identically.
std::vector<Action> argmax_decode(const torch::Tensor& z, const ActionSpace& space);

// One affine coupling layer over the flattened D*M latent, conditioned on the
// state embedding. Zero-initialized conditioner, so the layer starts as the
// identity map.
class CouplingLayerImpl : public torch::nn::Module {
public:
    CouplingLayerImpl(int64_t dim, int64_t ctx_dim, int hidden, bool odd, double scale_clamp);

    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& z,
                                                    const torch::Tensor& ctx);
    std::pair<torch::Tensor, torch::Tensor> inverse(const torch::Tensor& z,
                                                    const torch::Tensor& ctx);

private:
    std::pair<torch::Tensor, torch::Tensor> shift_scale(const torch::Tensor& z,
                                                        const torch::Tensor& ctx);
    torch::Tensor mask_;
    torch::nn::Sequential net_{nullptr};
    double scale_clamp_;
};
TORCH_MODULE(CouplingLayer);

// K alternating-mask coupling layers.
class CouplingFlowImpl : public torch::nn::Module {
public:
    CouplingFlowImpl(int64_t dim, int64_t ctx_dim, int n_layers, int hidden,
                     double scale_clamp);

    LatentPoint forward(const torch::Tensor& z0, const torch::Tensor& ctx);
    LatentPoint inverse(const torch::Tensor& zK, const torch::Tensor& ctx);

private:
    std::vector<CouplingLayer> layers_;
};
TORCH_MODULE(CouplingFlow);

// The conditional argmax-flow model: state encoder, Gaussian base, coupling
// flow, variational posterior with per-dimension soft threshold, and the
// ELBO / CUBO / sandwich log-probability estimators.
class FlowModelImpl : public torch::nn::Module {
public:
    explicit FlowModelImpl(FlowConfig cfg);

    const FlowConfig& config() const { return cfg_; }
    ActionSpace space() const { return {cfg_.dims, cfg_.categories}; }

    // obs [B, obs_dim] -> state embedding [B, embed_dim]
    torch::Tensor embed(const torch::Tensor& obs);

    BaseParams base_params(const torch::Tensor& emb);
    BaseParams encode_state(const torch::Tensor& obs) { return base_params(embed(obs)); }

    LatentPoint flow_forward(const torch::Tensor& z0, const torch::Tensor& emb);
    LatentPoint flow_inverse(const torch::Tensor& zK, const torch::Tensor& emb);

    // Draws one action per row of obs. zK_out (optional) receives the latent.
    std::vector<Action> sample_actions(const torch::Tensor& obs, torch::Generator& gen,
                                       torch::Tensor* zK_out = nullptr);

    // n posterior samples for a single (action, state-embedding) pair.
    // Every sample decodes to `action` exactly.
    PosteriorBatch posterior_sample(const Action& action, const torch::Tensor& emb_row,
                                    int64_t n, torch::Generator& gen);

    // ELBO / CUBO / sandwich for aligned rows of obs and actions, sharing one
    // set of posterior samples between the two bounds.
    BatchBounds bounds(const torch::Tensor& obs, const std::vector<Action>& actions,
                       int64_t n_samples, torch::Generator& gen);

    BoundTensors sandwich_logprob(const torch::Tensor& obs_row, const Action& action,
                                  torch::Generator& gen, int64_t n_samples = -1);

    std::pair<Action, BoundTensors> sample_action(const torch::Tensor& obs_row,
                                                  torch::Generator& gen);

    // Parameters of the actor (everything incl. posterior and alpha).
    std::vector<torch::Tensor> actor_parameters() { return parameters(); }
    // Parameters updated by the ELBO subroutine (encoder, flow, posterior).
    std::vector<torch::Tensor> elbo_parameters();

    // Overrides the sandwich to pure ELBO (the estimator ablation).
    void set_elbo_only(bool on) { elbo_only_ = on; }

private:
    // u-space posterior sample for [n*B] rows. Returns (u, log_q_u).
    std::pair<torch::Tensor, torch::Tensor> posterior_u(const torch::Tensor& ctx,
                                                        torch::Generator& gen);
    torch::Tensor alpha_for(const torch::Tensor& elbo, const torch::Tensor& cubo);
    torch::Tensor action_onehot(const std::vector<Action>& actions);

    FlowConfig cfg_;
    bool elbo_only_ = false;

    torch::nn::Sequential encoder_{nullptr};
    torch::nn::Linear base_mu_{nullptr}, base_pre_sigma_{nullptr};
    CouplingFlow flow_{nullptr};

    torch::nn::Sequential post_trunk_{nullptr};
    torch::nn::Linear post_mu_{nullptr}, post_pre_sigma_{nullptr};
    CouplingFlow post_flow_{nullptr};

    torch::Tensor alpha_raw_;  // trainable-scalar mode
    torch::Tensor alpha_c0_, alpha_c1_;  // adaptive mode
};
TORCH_MODULE(FlowModel);

}  // namespace flowiar

#endif
