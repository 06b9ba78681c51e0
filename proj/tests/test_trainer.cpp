#include <cmath>
#include <memory>
#include <vector>

#include "flowiar/trainer.hpp"
#include "flowiar/verify.hpp"

#ifdef CHECK
#undef CHECK
#endif
#include <doctest.h>

using namespace flowiar;

namespace {

torch::Generator make_gen(uint64_t seed) {
    auto gen = at::detail::createCPUGenerator(seed);
    return gen;
}

TrainConfig quick_config(uint64_t seed = 0) {
    TrainConfig cfg;
    cfg.gamma = 0.95;
    cfg.t_max = 5;
    cfg.e_max = 2;
    cfg.n_envs = 2;
    cfg.S = 4;
    cfg.n_elbo_steps = 2;
    cfg.elbo_batch_size = 8;
    cfg.eval_every = 1000000;  // just the mandatory first/last evaluations
    cfg.n_eval_envs = 2;
    cfg.seed = seed;
    return cfg;
}

std::shared_ptr<PolicyInterface> make_factored_toy() {
    return std::make_shared<FactoredHead>(1, ActionSpace{2, 2}, 16);
}

EnvFactory toy_factory(int64_t episode_length = 20) {
    return [episode_length] { return make_toy_partial(1.0, episode_length); };
}

}  // namespace

TEST_CASE("returns: backward recursion matches hand arithmetic") {
    auto r1 = discounted_returns({1, 1, 1}, 0.5, 0.0);
    CHECK(r1[0] == doctest::Approx(1.75));
    CHECK(r1[1] == doctest::Approx(1.5));
    CHECK(r1[2] == doctest::Approx(1.0));

    auto r2 = discounted_returns({0.3, -2.0, 7.0}, 0.0, 5.0);
    CHECK(r2[0] == doctest::Approx(0.3));
    CHECK(r2[1] == doctest::Approx(-2.0));
    CHECK(r2[2] == doctest::Approx(7.0));

    auto r3 = discounted_returns({0, 0}, 0.9, 2.0);
    CHECK(r3[0] == doctest::Approx(1.62));
    CHECK(r3[1] == doctest::Approx(1.8));
}

TEST_CASE("config validation rejects out-of-range fields") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.gamma = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = TrainConfig{};
    cfg.S = 0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = TrainConfig{};
    cfg.lr = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("rollout: bounded size, executed actions always from the valid set") {
    auto cfg = quick_config(3);
    Trainer trainer(make_factored_toy(), Critic(1), toy_factory(), cfg);
    auto rollout = trainer.collect_rollout();
    CHECK(rollout.size() == 2);
    int64_t total = 0;
    for (const auto& segment : rollout) {
        CHECK(static_cast<int64_t>(segment.size()) <= cfg.t_max);
        for (const auto& tr : segment) {
            total += 1;
            CHECK(tr.batch.S == cfg.S);
            CHECK(tr.batch.l() >= 1);
            CHECK(tr.batch.chosen == tr.batch.valid_actions[tr.batch.chosen_index]);
        }
    }
    CHECK(total <= cfg.t_max * cfg.n_envs);
    CHECK(total > 0);
}

TEST_CASE("rollout: constrained env actions satisfy a replayed validity check") {
    torch::manual_seed(41);  // deterministic head init, keeps rejection away
                             // from starvation on the constrained env
    auto cfg = quick_config(4);
    cfg.t_max = 30;
    cfg.S = 16;
    auto era_cfg = make_era_config(EraVersion::V1);
    auto factory = [&] { return std::make_unique<EraEnv>(era_cfg); };
    auto policy = std::make_shared<FactoredHead>(EraEnv(era_cfg).obs_dim(),
                                                 ActionSpace{3, 6}, 32);
    Trainer trainer(policy, Critic(EraEnv(era_cfg).obs_dim()), factory, cfg);
    auto rollout = trainer.collect_rollout();
    // replay: every executed move respects adjacency and proximity given the
    // previous executed allocation (decoded from the stored observations)
    auto hops = hop_distances(era_cfg.adjacency);
    for (const auto& segment : rollout) {
        for (const auto& tr : segment) {
            EraState st;
            for (int64_t r = 0; r < era_cfg.n_resources; ++r) {
                auto row = tr.obs.slice(0, r * 6, (r + 1) * 6);
                st.allocation.push_back(row.argmax().item<int64_t>());
            }
            CHECK(era_is_valid(era_cfg, hops, st, tr.batch.chosen));
        }
    }
}

TEST_CASE("critic: regression on a fixed synthetic set converges") {
    auto gen = make_gen(5);
    auto obs = torch::randn({64, 3}, gen, torch::kFloat64);
    auto target = (obs * torch::tensor({1.0, -2.0, 0.5}, torch::kFloat64)).sum(-1);
    Critic critic(3);
    torch::optim::RMSprop opt(critic->parameters(), torch::optim::RMSpropOptions(1e-2));
    double initial = -1.0, final = -1.0;
    for (int step = 0; step < 200; ++step) {
        opt.zero_grad();
        auto loss = torch::mse_loss(critic->forward(obs), target);
        if (step == 0) initial = loss.item<double>();
        final = loss.item<double>();
        loss.backward();
        opt.step();
    }
    CHECK(final < initial / 10.0);
}

TEST_CASE("a2c update: runs and reports finite losses for every policy kind") {
    for (bool flow : {false, true}) {
        auto cfg = quick_config(6);
        std::shared_ptr<PolicyInterface> policy;
        if (flow) {
            FlowConfig fc;
            fc.dims = 2;
            fc.categories = 2;
            fc.obs_dim = 1;
            fc.n_coupling_layers = 2;
            fc.coupling_hidden = 16;
            fc.encoder_hidden = 16;
            fc.embed_dim = 8;
            fc.posterior_hidden = 16;
            policy = std::make_shared<FlowPolicyAdapter>(FlowModel(fc));
        } else {
            policy = make_factored_toy();
        }
        Trainer trainer(policy, Critic(1), toy_factory(), cfg);
        auto rollout = trainer.collect_rollout();
        auto report = trainer.a2c_update(rollout);
        CHECK(std::isfinite(report.actor_loss));
        CHECK(std::isfinite(report.critic_loss));
        CHECK_FALSE(report.skipped_actor);
        CHECK_FALSE(report.skipped_critic);
        if (flow) {
            // shared posterior samples force the bound ordering
            CHECK(report.elbo_mean <= report.cubo_mean + 1e-9);
            auto trace = trainer.elbo_optimize(rollout);
            CHECK(static_cast<int64_t>(trace.size()) == cfg.n_elbo_steps);
        } else {
            CHECK(trainer.elbo_optimize(rollout).empty());
        }
    }
}

TEST_CASE("elbo ascent: a badly initialized posterior improves on a frozen flow") {
    FlowConfig fc;
    fc.dims = 1;
    fc.categories = 3;
    fc.obs_dim = 1;
    fc.n_coupling_layers = 2;
    fc.coupling_hidden = 16;
    fc.encoder_hidden = 16;
    fc.embed_dim = 8;
    fc.posterior_hidden = 16;
    fc.posterior_mode = PosteriorMode::Gaussian;
    FlowModel model(fc);

    auto gen = make_gen(7);
    {
        torch::NoGradGuard ng;
        for (auto& item : model->named_parameters()) {
            if (item.key().find("post") != std::string::npos) {
                item.value().add_(torch::randn(item.value().sizes(), gen,
                                               item.value().options()) *
                                  0.4);
            }
        }
    }
    std::vector<torch::Tensor> post_params;
    for (auto& item : model->named_parameters()) {
        if (item.key().find("post") != std::string::npos) {
            post_params.push_back(item.value());
        }
    }

    auto obs = torch::zeros({1, 1}, torch::kFloat64);
    Action action = {1};
    torch::optim::RMSprop opt(post_params, torch::optim::RMSpropOptions(5e-3));
    std::vector<double> trace;
    for (int step = 0; step < 100; ++step) {
        auto bb = model->bounds(obs, {action}, 8, gen);
        auto loss = -bb.elbo.mean();
        opt.zero_grad();
        loss.backward();
        opt.step();
        trace.push_back(-loss.item<double>());
    }
    double first10 = 0, last10 = 0;
    for (int i = 0; i < 10; ++i) {
        first10 += trace[i] / 10.0;
        last10 += trace[90 + i] / 10.0;
    }
    CHECK(last10 > first10);

    // the lower bound stays below the Monte-Carlo truth
    auto oracle = verify::mc_logprob_oracle(model, action, obs.squeeze(0), 200000, gen);
    CHECK(last10 <= oracle.value + 3.0 * oracle.std_error + 1e-6);
}

TEST_CASE("training: identical seeds give identical metric logs") {
    std::vector<std::vector<MetricsRow>> logs;
    for (int rep = 0; rep < 2; ++rep) {
        torch::manual_seed(99);  // network init draws from the global RNG
        auto cfg = quick_config(11);
        cfg.e_max = 4;
        Trainer trainer(make_factored_toy(), Critic(1), toy_factory(), cfg);
        logs.push_back(trainer.train().history);
    }
    REQUIRE(logs[0].size() == logs[1].size());
    for (size_t i = 0; i < logs[0].size(); ++i) {
        CHECK(logs[0][i].env_steps == logs[1][i].env_steps);
        CHECK(logs[0][i].mean_return == logs[1][i].mean_return);
        CHECK(logs[0][i].valid_fraction_mean == logs[1][i].valid_fraction_mean);
        CHECK(logs[0][i].actor_loss == logs[1][i].actor_loss);
        CHECK(logs[0][i].critic_loss == logs[1][i].critic_loss);
    }
}

TEST_CASE("training: smoke run completes with sane bookkeeping") {
    torch::manual_seed(1);
    auto cfg = quick_config(13);
    cfg.e_max = 6;
    Trainer trainer(make_factored_toy(), Critic(1), toy_factory(10), cfg);
    auto result = trainer.train();
    CHECK(result.episodes >= cfg.e_max);
    CHECK(result.env_steps >= result.episodes * 10 / 2);
    CHECK(result.history.size() >= 2);
    CHECK(std::isfinite(result.final_return));
    CHECK(result.best_return >= result.final_return - 1e-12);
    // accept-all oracle: every rejection batch is fully valid
    for (const auto& row : result.history) {
        if (row.env_steps > 0) CHECK(row.valid_fraction_mean == doctest::Approx(1.0));
    }
    // memoization dedupes repeated draws, but each step queries at least once
    CHECK(result.history.back().oracle_queries_cum >= result.env_steps);
}

TEST_CASE("training: oracle meter counts rejection queries on constrained envs") {
    torch::manual_seed(2);
    auto cfg = quick_config(17);
    cfg.e_max = 2;
    cfg.t_max = 10;
    auto era_cfg = make_era_config(EraVersion::V1);
    era_cfg.episode_length = 15;
    auto factory = [&] { return std::make_unique<EraEnv>(era_cfg); };
    int64_t obs_dim = EraEnv(era_cfg).obs_dim();
    auto policy = std::make_shared<FactoredHead>(obs_dim, ActionSpace{3, 6}, 32);
    Trainer trainer(policy, Critic(obs_dim), factory, cfg);
    auto rollout = trainer.collect_rollout();
    CHECK(trainer.oracle_queries() > 0);
    // memoization can only reduce below the raw draw count
    int64_t draws = 0;
    for (const auto& seg : rollout) {
        for (const auto& tr : seg) draws += tr.batch.total_draws;
    }
    CHECK(trainer.oracle_queries() <= draws);
    double vf = 0;
    int64_t n = 0;
    for (const auto& seg : rollout) {
        for (const auto& tr : seg) {
            vf += tr.batch.valid_fraction();
            ++n;
        }
    }
    CHECK(vf / n < 1.0 + 1e-12);  // constraints actually bite sometimes
}

TEST_CASE("mask mode: enumerates every action per step and renormalizes") {
    torch::manual_seed(8);
    auto cfg = quick_config(23);
    cfg.mask_mode = true;
    cfg.t_max = 6;
    auto era_cfg = make_era_config(EraVersion::V1);
    era_cfg.episode_length = 12;
    auto factory = [&] { return std::make_unique<EraEnv>(era_cfg); };
    int64_t obs_dim = EraEnv(era_cfg).obs_dim();
    auto policy = std::make_shared<CategoricalHead>(obs_dim, ActionSpace{3, 6}, 32);
    Trainer trainer(policy, Critic(obs_dim), factory, cfg);
    auto rollout = trainer.collect_rollout();
    int64_t steps = 0;
    auto hops = hop_distances(era_cfg.adjacency);
    for (const auto& seg : rollout) {
        for (const auto& tr : seg) {
            ++steps;
            CHECK(tr.batch.S == 216);
            CHECK(tr.batch.l() < 216);
            CHECK(tr.batch.chosen == tr.batch.valid_actions[tr.batch.chosen_index]);
        }
    }
    // one oracle query per enumerated action per step, nothing memoized away
    CHECK(trainer.oracle_queries() == steps * 216);
    auto report = trainer.a2c_update(rollout);
    CHECK(std::isfinite(report.actor_loss));
    CHECK_FALSE(report.skipped_actor);

    auto bad = quick_config(23);
    bad.mask_mode = true;
    FlowConfig fc;
    fc.obs_dim = 1;
    auto flow = std::make_shared<FlowPolicyAdapter>(FlowModel(fc));
    CHECK_THROWS_AS(Trainer(flow, Critic(1), toy_factory(), bad), ValidationError);
}

TEST_CASE("evaluation: fixed seeds make evaluation deterministic") {
    torch::manual_seed(3);
    auto policy = make_factored_toy();
    auto cfg = quick_config(19);
    auto factory = toy_factory(15);
    double a = evaluate_policy(*policy, factory, cfg, 1234);
    double b = evaluate_policy(*policy, factory, cfg, 1234);
    CHECK(a == b);
}
