#include "flowiar/soft_threshold.hpp"

#include "flowiar/types.hpp"

namespace flowiar {

std::pair<torch::Tensor, torch::Tensor> soft_threshold(const torch::Tensor& u,
                                                       const torch::Tensor& target) {
    check_finite(u, "soft_threshold input");
    auto idx = target.unsqueeze(-1);                       // [..., 1]
    auto u_i = u.gather(-1, idx);                          // [..., 1]
    auto diff = u_i - u;                                   // u_i - u_j
    auto v = u_i - torch::softplus(diff);
    // softplus underflows to 0 when u_j >> u_i, which would leave v_j equal
    // to u_i at double precision and break the exact-argmax guarantee; keep
    // every off-target entry at least one representable step below u_i.
    v = torch::min(v, u_i - (u_i.abs() + 1.0) * 1e-12);
    v = v.scatter(-1, idx, u_i);                           // v_i = u_i exactly
    auto log_sig = torch::log_sigmoid(diff);
    // The target column contributes log sigmoid(0); mask it out of the sum.
    auto log_det = log_sig.sum(-1) - log_sig.gather(-1, idx).squeeze(-1);
    return {v, log_det};
}

}  // namespace flowiar
