#ifndef FLOWIAR_SOFT_THRESHOLD_HPP
#define FLOWIAR_SOFT_THRESHOLD_HPP

#include <torch/torch.h>

namespace flowiar {

// Smoothly forces coordinate `target` of each row to be the strict maximum:
//   v_i = u_i,   v_j = u_i - log(1 + exp(u_i - u_j))  for j != i.
// Since log(1+e^x) > max(0, x), every off-target entry ends strictly below
// v_i, so argmax(v) == target with no tolerance involved.
//
// u:      [..., M]
// target: [...] integer tensor of indices into the last dimension
// Returns (v, log_det) where log_det has shape [...] and equals
//   sum_{j != i} log sigmoid(u_i - u_j),
// the log-determinant of dv/du.
std::pair<torch::Tensor, torch::Tensor> soft_threshold(const torch::Tensor& u,
                                                       const torch::Tensor& target);

}  // namespace flowiar

#endif
