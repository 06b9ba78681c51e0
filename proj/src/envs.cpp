#include "flowiar/env.hpp"

#include <algorithm>
#include <deque>
#include <sstream>

#include <json.hpp>

#include "flowiar/errors.hpp"

namespace flowiar {

namespace {
using nlohmann::json;

std::discrete_distribution<int64_t> make_discrete(const std::vector<double>& p) {
    return std::discrete_distribution<int64_t>(p.begin(), p.end());
}
}  // namespace

void validate_era_config(const EraConfig& cfg) {
    const int64_t n = cfg.n_nodes();
    if (n < 1) throw ValidationError("adjacency: empty matrix");
    for (int64_t i = 0; i < n; ++i) {
        if (static_cast<int64_t>(cfg.adjacency[i].size()) != n) {
            throw ValidationError("adjacency: row " + std::to_string(i) +
                                  " has wrong length");
        }
    }
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            if (cfg.adjacency[i][j] != cfg.adjacency[j][i]) {
                throw ValidationError("adjacency: asymmetric at row " +
                                      std::to_string(i) + ", col " + std::to_string(j));
            }
        }
    }
    if (static_cast<int64_t>(cfg.cost.size()) != n) {
        throw ValidationError("cost: matrix must match adjacency size");
    }
    for (int64_t i = 0; i < n; ++i) {
        if (static_cast<int64_t>(cfg.cost[i].size()) != n) {
            throw ValidationError("cost: row " + std::to_string(i) + " has wrong length");
        }
        if (cfg.cost[i][i] != 0.0) {
            throw ValidationError("cost: nonzero diagonal at row " + std::to_string(i));
        }
        for (int64_t j = 0; j < n; ++j) {
            if (cfg.cost[i][j] < 0.0) {
                throw ValidationError("cost: negative entry at row " + std::to_string(i) +
                                      ", col " + std::to_string(j));
            }
        }
    }
    if (cfg.n_resources < 1) throw ValidationError("n_resources: must be at least 1");
    if (cfg.max_hops < 0) throw ValidationError("max_hops: must be nonnegative");
    if (cfg.episode_length < 1) throw ValidationError("episode_length: must be positive");
    if (cfg.event_type_dist.empty()) {
        throw ValidationError("event_type_dist: must be nonempty");
    }
    double type_sum = 0.0;
    for (size_t t = 0; t < cfg.event_type_dist.size(); ++t) {
        if (cfg.event_type_dist[t] < 0.0) {
            throw ValidationError("event_type_dist: negative entry at index " +
                                  std::to_string(t));
        }
        type_sum += cfg.event_type_dist[t];
    }
    if (std::abs(type_sum - 1.0) > 1e-9) {
        throw ValidationError("event_type_dist: probabilities sum to " +
                              std::to_string(type_sum));
    }
    if (cfg.event_node_dist.size() != cfg.event_type_dist.size()) {
        throw ValidationError("event_node_dist: need one node distribution per type");
    }
    for (size_t t = 0; t < cfg.event_node_dist.size(); ++t) {
        if (static_cast<int64_t>(cfg.event_node_dist[t].size()) != n) {
            throw ValidationError("event_node_dist: type " + std::to_string(t) +
                                  " has wrong length");
        }
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            if (cfg.event_node_dist[t][i] < 0.0) {
                throw ValidationError("event_node_dist: negative entry at type " +
                                      std::to_string(t) + ", node " + std::to_string(i));
            }
            s += cfg.event_node_dist[t][i];
        }
        if (std::abs(s - 1.0) > 1e-9) {
            throw ValidationError("event_node_dist: type " + std::to_string(t) +
                                  " sums to " + std::to_string(s));
        }
    }
}

EraConfig era_config_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw SchemaError(std::string("config parse failure: ") + e.what());
    }
    EraConfig cfg;
    try {
        for (const auto& row : j.at("adjacency")) {
            std::vector<bool> r;
            for (const auto& v : row) r.push_back(v.get<int>() != 0);
            cfg.adjacency.push_back(std::move(r));
        }
        cfg.cost = j.at("cost").get<std::vector<std::vector<double>>>();
        cfg.n_resources = j.at("n_resources").get<int64_t>();
        cfg.max_hops = j.at("max_hops").get<int64_t>();
        cfg.event_type_dist = j.at("event_type_dist").get<std::vector<double>>();
        cfg.event_node_dist =
            j.at("event_node_dist").get<std::vector<std::vector<double>>>();
        cfg.reward_resolve = j.at("reward_resolve").get<double>();
        cfg.penalty_miss = j.at("penalty_miss").get<double>();
        cfg.episode_length = j.at("episode_length").get<int64_t>();
        cfg.events_persist = j.value("events_persist", false);
    } catch (const json::exception& e) {
        throw SchemaError(std::string("config field error: ") + e.what());
    }
    validate_era_config(cfg);
    return cfg;
}

std::string era_config_to_json(const EraConfig& cfg) {
    json j;
    for (const auto& row : cfg.adjacency) {
        std::vector<int> r;
        for (bool b : row) r.push_back(b ? 1 : 0);
        j["adjacency"].push_back(r);
    }
    j["cost"] = cfg.cost;
    j["n_resources"] = cfg.n_resources;
    j["max_hops"] = cfg.max_hops;
    j["event_type_dist"] = cfg.event_type_dist;
    j["event_node_dist"] = cfg.event_node_dist;
    j["reward_resolve"] = cfg.reward_resolve;
    j["penalty_miss"] = cfg.penalty_miss;
    j["episode_length"] = cfg.episode_length;
    j["events_persist"] = cfg.events_persist;
    return j.dump(2);
}

std::vector<std::vector<int64_t>> hop_distances(
    const std::vector<std::vector<bool>>& adjacency) {
    const int64_t n = static_cast<int64_t>(adjacency.size());
    std::vector<std::vector<int64_t>> dist(n, std::vector<int64_t>(n, n));
    for (int64_t src = 0; src < n; ++src) {
        dist[src][src] = 0;
        std::deque<int64_t> queue = {src};
        while (!queue.empty()) {
            int64_t u = queue.front();
            queue.pop_front();
            for (int64_t v = 0; v < n; ++v) {
                if (adjacency[u][v] && v != u && dist[src][v] == n) {
                    dist[src][v] = dist[src][u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    return dist;
}

bool era_is_valid(const EraConfig& cfg, const std::vector<std::vector<int64_t>>& hops,
                  const EraState& state, const Action& action) {
    if (static_cast<int64_t>(action.size()) != cfg.n_resources) {
        throw SchemaError("action has " + std::to_string(action.size()) +
                          " entries, expected " + std::to_string(cfg.n_resources));
    }
    for (auto a : action) {
        if (a < 0 || a >= cfg.n_nodes()) {
            throw SchemaError("node index " + std::to_string(a) + " out of range");
        }
    }
    for (int64_t r = 0; r < cfg.n_resources; ++r) {
        int64_t from = state.allocation[r], to = action[r];
        if (to != from && !cfg.adjacency[from][to]) return false;
    }
    for (int64_t r = 0; r < cfg.n_resources; ++r) {
        for (int64_t s = r + 1; s < cfg.n_resources; ++s) {
            if (hops[action[r]][action[s]] > cfg.max_hops) return false;
        }
    }
    return true;
}

std::pair<EraState, double> era_step(const EraConfig& cfg,
                                     const std::vector<std::vector<int64_t>>& hops,
                                     const EraState& state, const Action& action,
                                     std::mt19937_64& rng) {
    if (!era_is_valid(cfg, hops, state, action)) {
        throw ContractViolation("invalid action passed to era_step");
    }
    EraState next;
    next.allocation.assign(action.begin(), action.end());
    next.step_index = state.step_index + 1;

    double reward = 0.0;
    for (int64_t r = 0; r < cfg.n_resources; ++r) {
        reward -= cfg.cost[state.allocation[r]][action[r]];
    }
    std::vector<bool> occupied(cfg.n_nodes(), false);
    for (auto node : next.allocation) occupied[node] = true;
    for (const auto& ev : state.live_events) {
        if (occupied[ev.node]) {
            reward += cfg.reward_resolve;
        } else {
            reward -= cfg.penalty_miss;
            if (cfg.events_persist) next.live_events.push_back(ev);
        }
    }

    auto type_dist = make_discrete(cfg.event_type_dist);
    int64_t type = type_dist(rng);
    auto node_dist = make_discrete(cfg.event_node_dist[type]);
    next.live_events.push_back({node_dist(rng), type});
    return {next, reward};
}

EraEnv::EraEnv(EraConfig cfg)
    : cfg_(std::move(cfg)),
      oracle_([this](const Action& a) {
          if (done_) throw ContractViolation("oracle queried outside an episode");
          return era_is_valid(cfg_, hops_, state_, a);
      }) {
    validate_era_config(cfg_);
    hops_ = hop_distances(cfg_.adjacency);
}

int64_t EraEnv::obs_dim() const {
    return cfg_.n_resources * cfg_.n_nodes() + cfg_.n_event_types() * cfg_.n_nodes();
}

torch::Tensor EraEnv::observe() const {
    auto obs = torch::zeros({obs_dim()}, torch::kFloat64);
    auto acc = obs.accessor<double, 1>();
    const int64_t n = cfg_.n_nodes();
    for (int64_t r = 0; r < cfg_.n_resources; ++r) {
        acc[r * n + state_.allocation[r]] = 1.0;
    }
    const int64_t base = cfg_.n_resources * n;
    for (const auto& ev : state_.live_events) {
        acc[base + ev.type * n + ev.node] += 1.0;
    }
    return obs;
}

torch::Tensor EraEnv::reset(uint64_t seed) {
    rng_.seed(seed);
    state_ = EraState{};
    state_.allocation.assign(cfg_.n_resources, 0);
    auto type_dist = make_discrete(cfg_.event_type_dist);
    int64_t type = type_dist(rng_);
    auto node_dist = make_discrete(cfg_.event_node_dist[type]);
    state_.live_events.push_back({node_dist(rng_), type});
    done_ = false;
    return observe();
}

StepResult EraEnv::step(const Action& action) {
    if (done_) throw ContractViolation("step called on a finished episode");
    auto [next, reward] = era_step(cfg_, hops_, state_, action, rng_);
    state_ = std::move(next);
    done_ = state_.step_index >= cfg_.episode_length;
    return {observe(), reward, done_};
}

EraVersion era_version_from_string(const std::string& name) {
    if (name == "partial") return EraVersion::Partial;
    if (name == "v1") return EraVersion::V1;
    if (name == "v2") return EraVersion::V2;
    if (name == "v3") return EraVersion::V3;
    if (name == "v4") return EraVersion::V4;
    if (name == "v5") return EraVersion::V5;
    throw ValidationError("unknown environment version: " + name);
}

EraConfig make_era_config(EraVersion version) {
    int64_t nodes = 0, resources = 0, hops = 0;
    uint64_t seed = 0;
    switch (version) {
        case EraVersion::Partial:
            throw ValidationError("the partial variant has no graph configuration");
        case EraVersion::V1: nodes = 6; resources = 3; hops = 1; seed = 101; break;
        case EraVersion::V2: nodes = 7; resources = 3; hops = 1; seed = 102; break;
        case EraVersion::V3: nodes = 8; resources = 3; hops = 2; seed = 103; break;
        case EraVersion::V4: nodes = 9; resources = 3; hops = 2; seed = 104; break;
        case EraVersion::V5: nodes = 10; resources = 3; hops = 3; seed = 105; break;
    }
    EraConfig cfg;
    cfg.n_resources = resources;
    cfg.max_hops = hops;
    cfg.adjacency.assign(nodes, std::vector<bool>(nodes, false));
    // ring for connectivity plus seeded chords
    for (int64_t i = 0; i < nodes; ++i) {
        int64_t j = (i + 1) % nodes;
        cfg.adjacency[i][j] = cfg.adjacency[j][i] = true;
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int64_t> pick(0, nodes - 1);
    for (int64_t extra = 0; extra < nodes; ++extra) {
        int64_t i = pick(rng), j = pick(rng);
        if (i != j) cfg.adjacency[i][j] = cfg.adjacency[j][i] = true;
    }
    auto dist = hop_distances(cfg.adjacency);
    cfg.cost.assign(nodes, std::vector<double>(nodes, 0.0));
    for (int64_t i = 0; i < nodes; ++i) {
        for (int64_t j = 0; j < nodes; ++j) {
            cfg.cost[i][j] = static_cast<double>(dist[i][j]);
        }
    }
    cfg.event_type_dist = {0.6, 0.4};
    std::vector<double> uniform(nodes, 1.0 / nodes);
    std::vector<double> skewed(nodes);
    double norm = nodes * (nodes + 1) / 2.0;
    for (int64_t i = 0; i < nodes; ++i) skewed[i] = (i + 1) / norm;
    cfg.event_node_dist = {uniform, skewed};
    cfg.reward_resolve = 10.0;
    cfg.penalty_miss = 10.0;
    cfg.episode_length = 100;
    validate_era_config(cfg);
    return cfg;
}

namespace {

// Shared shape for the two aliased-latent toy environments: a cyclic chain
// of latent states, each with a single rewarded pattern action.
class LatentCycleEnv : public EnvInterface {
public:
    LatentCycleEnv(std::vector<Action> patterns, ActionSpace space, double r,
                   int64_t episode_length)
        : patterns_(std::move(patterns)),
          space_(space),
          r_(r),
          episode_length_(episode_length) {}

    ActionSpace space() const override { return space_; }
    int64_t obs_dim() const override { return 1; }

    torch::Tensor reset(uint64_t seed) override {
        (void)seed;  // aliased observation; fixed start keeps runs comparable
        latent_ = 0;
        step_index_ = 0;
        done_ = false;
        return torch::zeros({1}, torch::kFloat64);
    }

    StepResult step(const Action& action) override {
        if (done_) throw ContractViolation("step called on a finished episode");
        space_.check(action);
        double reward;
        if (action == patterns_[latent_]) {
            reward = r_;
            latent_ = (latent_ + 1) % static_cast<int64_t>(patterns_.size());
        } else {
            reward = -r_;
        }
        ++step_index_;
        done_ = step_index_ >= episode_length_;
        return {torch::zeros({1}, torch::kFloat64), reward, done_};
    }

    ConstraintOracle& oracle() override { return oracle_; }

    int64_t latent() const { return latent_; }

private:
    std::vector<Action> patterns_;
    ActionSpace space_;
    double r_;
    int64_t episode_length_;
    int64_t latent_ = 0;
    int64_t step_index_ = 0;
    bool done_ = true;
    AcceptAllOracle oracle_;
};

}  // namespace

std::unique_ptr<EnvInterface> make_toy_partial(double r, int64_t episode_length) {
    // latent 0 wants (0,1) = action A, latent 1 wants (1,0) = action B
    return std::make_unique<LatentCycleEnv>(
        std::vector<Action>{{0, 1}, {1, 0}}, ActionSpace{2, 2}, r, episode_length);
}

std::unique_ptr<EnvInterface> make_era_partial(double r, int64_t episode_length) {
    return std::make_unique<LatentCycleEnv>(
        std::vector<Action>{{0, 1}, {1, 2}, {2, 0}}, ActionSpace{2, 3}, r,
        episode_length);
}

std::unique_ptr<EnvInterface> make_era(EraVersion version) {
    if (version == EraVersion::Partial) return make_era_partial();
    return std::make_unique<EraEnv>(make_era_config(version));
}

}  // namespace flowiar
