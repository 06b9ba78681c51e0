#ifndef FLOWIAR_ENV_HPP
#define FLOWIAR_ENV_HPP

#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "flowiar/oracle.hpp"
#include "flowiar/types.hpp"

namespace flowiar {

struct StepResult {
    torch::Tensor obs;
    double reward = 0.0;
    bool done = false;
};

// Minimal seeded episodic environment. The oracle is bound to the *current*
// state: query it between reset/step calls only.
class EnvInterface {
public:
    virtual ~EnvInterface() = default;
    virtual ActionSpace space() const = 0;
    virtual int64_t obs_dim() const = 0;
    virtual torch::Tensor reset(uint64_t seed) = 0;
    virtual StepResult step(const Action& action) = 0;
    virtual ConstraintOracle& oracle() = 0;
};

// Graph-allocation environment: resources sit on nodes of a graph, move to
// adjacent nodes each step under a pairwise proximity limit, and earn rewards
// by covering randomly arriving events.
struct EraConfig {
    std::vector<std::vector<bool>> adjacency;   // N x N, symmetric
    std::vector<std::vector<double>> cost;      // N x N, zero diagonal
    int64_t n_resources = 1;
    int64_t max_hops = 1;
    std::vector<double> event_type_dist;                  // [T]
    std::vector<std::vector<double>> event_node_dist;     // [T][N]
    double reward_resolve = 10.0;
    double penalty_miss = 10.0;
    int64_t episode_length = 100;
    bool events_persist = false;  // default: unattended events expire

    int64_t n_nodes() const { return static_cast<int64_t>(adjacency.size()); }
    int64_t n_event_types() const { return static_cast<int64_t>(event_type_dist.size()); }
};

// Throws ValidationError naming the first offending field (with row/column
// indices for matrix entries).
void validate_era_config(const EraConfig& cfg);

EraConfig era_config_from_json(const std::string& json_text);
std::string era_config_to_json(const EraConfig& cfg);

// All-pairs unweighted hop distances on the adjacency graph; unreachable
// pairs get n_nodes (strictly above any feasible max_hops).
std::vector<std::vector<int64_t>> hop_distances(
    const std::vector<std::vector<bool>>& adjacency);

struct EraEvent {
    int64_t node = 0;
    int64_t type = 0;
};

struct EraState {
    std::vector<int64_t> allocation;  // node per resource
    std::vector<EraEvent> live_events;
    int64_t step_index = 0;
};

// Valid iff every resource stays or moves to an adjacent node and all
// pairwise hop distances among target nodes stay within max_hops.
// Out-of-range nodes are schema errors, not mere invalidity.
bool era_is_valid(const EraConfig& cfg, const std::vector<std::vector<int64_t>>& hops,
                  const EraState& state, const Action& action);

// Applies a valid action: movement costs, event resolution, expiry or
// persistence, and one new event draw. Rejects invalid actions loudly.
std::pair<EraState, double> era_step(const EraConfig& cfg,
                                     const std::vector<std::vector<int64_t>>& hops,
                                     const EraState& state, const Action& action,
                                     std::mt19937_64& rng);

class EraEnv : public EnvInterface {
public:
    explicit EraEnv(EraConfig cfg);

    ActionSpace space() const override {
        return {cfg_.n_resources, cfg_.n_nodes()};
    }
    int64_t obs_dim() const override;
    torch::Tensor reset(uint64_t seed) override;
    StepResult step(const Action& action) override;
    ConstraintOracle& oracle() override { return oracle_; }

    const EraConfig& config() const { return cfg_; }
    const EraState& state() const { return state_; }

private:
    torch::Tensor observe() const;

    EraConfig cfg_;
    std::vector<std::vector<int64_t>> hops_;
    EraState state_;
    std::mt19937_64 rng_;
    bool done_ = true;
    FnOracle oracle_;
};

enum class EraVersion { Partial, V1, V2, V3, V4, V5 };

EraVersion era_version_from_string(const std::string& name);

// Deterministic stand-in configuration for a named version: connected
// pseudo-random graph seeded by the version, hop-count costs, uniform events.
EraConfig make_era_config(EraVersion version);

std::unique_ptr<EnvInterface> make_era(EraVersion version);

// Two aliased latent states, D=2/M=2 actions. (0,1) is correct in latent 0,
// (1,0) in latent 1 (reward +r, latent flips); anything else costs -r and
// leaves the latent unchanged. The observation carries no information.
std::unique_ptr<EnvInterface> make_toy_partial(double r = 1.0,
                                               int64_t episode_length = 100);

// Three latent states behind one constant observation, D=2/M=3. Each latent
// state has one pattern action that advances the latent cycle for +r; all
// other actions cost -r. No constraints.
std::unique_ptr<EnvInterface> make_era_partial(double r = 1.0,
                                               int64_t episode_length = 100);

}  // namespace flowiar

#endif
