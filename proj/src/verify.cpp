#include "flowiar/verify.hpp"

#include <cmath>

namespace flowiar::verify {

Mat finite_diff_jacobian(const std::function<Vec(const Vec&)>& map, const Vec& point,
                         double eps) {
    const size_t n_in = point.size();
    Vec probe = point;
    probe[0] += 0.0;
    const size_t n_out = map(point).size();
    Mat jac(n_out, Vec(n_in, 0.0));
    for (size_t j = 0; j < n_in; ++j) {
        Vec hi = point, lo = point;
        hi[j] += eps;
        lo[j] -= eps;
        Vec fhi = map(hi), flo = map(lo);
        for (size_t i = 0; i < n_out; ++i) {
            double d = (fhi[i] - flo[i]) / (2.0 * eps);
            if (!std::isfinite(d)) throw NumericalError("non-finite finite difference");
            jac[i][j] = d;
        }
    }
    return jac;
}

double determinant(Mat m) {
    const size_t n = m.size();
    double det = 1.0;
    for (size_t col = 0; col < n; ++col) {
        size_t pivot = col;
        for (size_t r = col + 1; r < n; ++r) {
            if (std::fabs(m[r][col]) > std::fabs(m[pivot][col])) pivot = r;
        }
        if (m[pivot][col] == 0.0) return 0.0;
        if (pivot != col) {
            std::swap(m[pivot], m[col]);
            det = -det;
        }
        det *= m[col][col];
        for (size_t r = col + 1; r < n; ++r) {
            double f = m[r][col] / m[col][col];
            for (size_t c = col; c < n; ++c) m[r][c] -= f * m[col][c];
        }
    }
    return det;
}

OracleEstimate mc_logprob_oracle(FlowModel& model, const Action& action,
                                 const torch::Tensor& obs_row, int64_t n,
                                 torch::Generator& gen) {
    auto space = model->space();
    const int64_t want = space.flat_index(action);
    int64_t hits = 0;
    const int64_t chunk = 50'000;
    for (int64_t done = 0; done < n; done += chunk) {
        int64_t b = std::min(chunk, n - done);
        auto obs = obs_row.reshape({1, -1}).repeat({b, 1});
        for (const auto& a : model->sample_actions(obs, gen)) {
            if (space.flat_index(a) == want) ++hits;
        }
    }
    if (hits == 0) {
        return {-std::numeric_limits<double>::infinity(),
                std::numeric_limits<double>::infinity(), n};
    }
    double p = static_cast<double>(hits) / static_cast<double>(n);
    double se = std::sqrt((1.0 - p) / (static_cast<double>(n) * p));
    return {std::log(p), se, n};
}

std::vector<double> mc_action_frequencies(FlowModel& model, const torch::Tensor& obs_row,
                                          int64_t n, torch::Generator& gen) {
    auto space = model->space();
    std::vector<double> freq(space.flat_size(), 0.0);
    const int64_t chunk = 50'000;
    for (int64_t done = 0; done < n; done += chunk) {
        int64_t b = std::min(chunk, n - done);
        auto obs = obs_row.reshape({1, -1}).repeat({b, 1});
        for (const auto& a : model->sample_actions(obs, gen)) {
            freq[space.flat_index(a)] += 1.0;
        }
    }
    for (auto& f : freq) f /= static_cast<double>(n);
    return freq;
}

namespace {
torch::Tensor effective_policy_matrix(const TabularMdp& mdp, const torch::Tensor& theta) {
    auto pi = torch::softmax(theta, -1);
    auto mask = torch::zeros({mdp.n_states, mdp.n_actions}, torch::kFloat64);
    for (int64_t s = 0; s < mdp.n_states; ++s) {
        for (int64_t a = 0; a < mdp.n_actions; ++a) {
            if (mdp.valid[s][a]) mask[s][a] = 1.0;
        }
    }
    auto masked = pi * mask;
    return masked / masked.sum(-1, /*keepdim=*/true);
}

torch::Tensor enumerate_return(const TabularMdp& mdp, const torch::Tensor& theta) {
    auto pi_eff = effective_policy_matrix(mdp, theta);
    auto reward = torch::zeros({mdp.n_states, mdp.n_actions}, torch::kFloat64);
    auto trans = torch::zeros({mdp.n_states, mdp.n_actions, mdp.n_states}, torch::kFloat64);
    for (int64_t s = 0; s < mdp.n_states; ++s) {
        for (int64_t a = 0; a < mdp.n_actions; ++a) {
            reward[s][a] = mdp.reward[s][a];
            for (int64_t s2 = 0; s2 < mdp.n_states; ++s2) {
                trans[s][a][s2] = mdp.transition[s][a][s2];
            }
        }
    }
    // Horizon-unrolled dynamic programming; differentiable w.r.t. theta.
    auto v = torch::zeros({mdp.n_states}, torch::kFloat64);
    for (int64_t t = 0; t < mdp.horizon; ++t) {
        auto q = reward + mdp.gamma * torch::matmul(trans, v);  // [S, A]
        v = (pi_eff * q).sum(-1);
    }
    auto init = torch::zeros({mdp.n_states}, torch::kFloat64);
    for (int64_t s = 0; s < mdp.n_states; ++s) init[s] = mdp.init_dist[s];
    return (init * v).sum();
}
}  // namespace

torch::Tensor exact_policy_gradient(const TabularMdp& mdp, const torch::Tensor& theta) {
    auto th = theta.detach().clone().set_requires_grad(true);
    auto j = enumerate_return(mdp, th);
    auto grads = torch::autograd::grad({j}, {th});
    return grads[0];
}

double exact_return(const TabularMdp& mdp, const torch::Tensor& theta) {
    torch::NoGradGuard ng;
    return enumerate_return(mdp, theta.detach()).item<double>();
}

}  // namespace flowiar::verify
