#ifndef FLOWIAR_VERIFY_HPP
#define FLOWIAR_VERIFY_HPP

#include <functional>
#include <vector>

#include "flowiar/flow_model.hpp"
#include "flowiar/types.hpp"

namespace flowiar::verify {

using Vec = std::vector<double>;
using Mat = std::vector<std::vector<double>>;

// Central-difference Jacobian, one column per input coordinate.
Mat finite_diff_jacobian(const std::function<Vec(const Vec&)>& map, const Vec& point,
                         double eps = 1e-5);

// Determinant by LU elimination with partial pivoting (small matrices only).
double determinant(Mat m);

// Monte-Carlo estimate of log pi(action | state) for an argmax flow: draws n
// base samples, pushes them through the flow and the argmax decode, and
// returns the log empirical frequency with a delta-method standard error
//   sigma_log ~ sqrt((1 - p) / (n p)).
// Zero hits give value = -inf with infinite std_error.
OracleEstimate mc_logprob_oracle(FlowModel& model, const Action& action,
                                 const torch::Tensor& obs_row, int64_t n,
                                 torch::Generator& gen);

// Empirical action frequencies over all M^D actions from n flow samples.
std::vector<double> mc_action_frequencies(FlowModel& model, const torch::Tensor& obs_row,
                                          int64_t n, torch::Generator& gen);

// A small finite MDP over flat action indices, used to cross-check the
// rejection-corrected policy gradient against exact enumeration.
struct TabularMdp {
    int64_t n_states = 0;
    int64_t n_actions = 0;
    int64_t horizon = 0;
    std::vector<double> init_dist;                   // [n_states]
    std::vector<Mat> transition;                     // [s][a][s']
    Mat reward;                                      // [s][a]
    std::vector<std::vector<bool>> valid;            // [s][a]
    double gamma = 1.0;
};

// Exact gradient of J(pi') for a tabular softmax policy with logits
// theta [n_states, n_actions]. pi' is pi renormalized onto the valid set per
// state; the gradient is obtained by enumerating all trajectories of length
// `horizon` and differentiating through the renormalization.
torch::Tensor exact_policy_gradient(const TabularMdp& mdp, const torch::Tensor& theta);

// Exact J(pi') by the same enumeration (used for sanity checks).
double exact_return(const TabularMdp& mdp, const torch::Tensor& theta);

}  // namespace flowiar::verify

#endif
