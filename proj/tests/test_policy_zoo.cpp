#include <cmath>
#include <map>
#include <memory>
#include <vector>

#include "flowiar/policy.hpp"

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

void randomize(std::vector<torch::Tensor> params, uint64_t seed, double scale) {
    torch::NoGradGuard ng;
    auto gen = make_gen(seed);
    for (auto& p : params) {
        p.add_(torch::randn(p.sizes(), gen, p.options()) * scale);
    }
}

void zero_last_linear(torch::nn::Sequential net) {
    torch::NoGradGuard ng;
    auto params = net->parameters();
    params[params.size() - 2].zero_();  // weight
    params[params.size() - 1].zero_();  // bias
}

// empirical flat-action frequencies from n draws
torch::Tensor sample_freqs(PolicyInterface& pol, const torch::Tensor& obs, int64_t n,
                           uint64_t seed) {
    auto gen = make_gen(seed);
    auto sp = pol.space();
    auto counts = torch::zeros({sp.flat_size()}, torch::kFloat64);
    for (const auto& a : pol.sample_batch(obs, n, gen)) {
        counts[sp.flat_index(a)] += 1.0;
    }
    return counts / static_cast<double>(n);
}

double total_variation(const torch::Tensor& p, const torch::Tensor& q) {
    return 0.5 * (p - q).abs().sum().item<double>();
}

void check_fidelity(PolicyInterface& pol, const torch::Tensor& obs, uint64_t seed) {
    auto dist = pol.full_distribution(obs);
    CHECK(std::abs(dist.sum().item<double>() - 1.0) < 1e-6);
    auto freqs = sample_freqs(pol, obs, 100000, seed);
    CHECK(total_variation(dist, freqs) < 0.02);

    // exp(log_prob) over the whole space reproduces the distribution
    auto gen = make_gen(seed + 1);
    std::vector<Action> all;
    for (int64_t i = 0; i < pol.space().flat_size(); ++i) {
        all.push_back(pol.space().from_flat(i));
    }
    auto lp = pol.log_prob_batch(obs, all, gen).exp();
    CHECK((lp - dist).abs().max().item<double>() < 1e-9);
}

}  // namespace

TEST_CASE("categorical head: zero logits give the uniform distribution") {
    ActionSpace sp{2, 3};
    CategoricalHead head(4, sp);
    zero_last_linear(head.net());
    auto obs = torch::randn({4}, make_gen(0), torch::kFloat64);
    auto dist = head.full_distribution(obs);
    CHECK(dist.size(0) == 9);
    CHECK((dist - 1.0 / 9.0).abs().max().item<double>() < 1e-12);
}

TEST_CASE("categorical head: constant logit shift leaves the distribution unchanged") {
    ActionSpace sp{2, 2};
    CategoricalHead head(3, sp);
    randomize(head.parameters(), 11, 0.3);
    auto obs = torch::randn({3}, make_gen(1), torch::kFloat64);
    auto before = head.full_distribution(obs);
    {
        torch::NoGradGuard ng;
        auto params = head.net()->parameters();
        params.back().add_(1.0);  // final bias: same shift for every logit
    }
    auto after = head.full_distribution(obs);
    CHECK((before - after).abs().max().item<double>() < 1e-12);
}

TEST_CASE("categorical head: one dominant logit captures nearly all mass") {
    ActionSpace sp{1, 5};
    CategoricalHead head(2, sp);
    zero_last_linear(head.net());
    {
        torch::NoGradGuard ng;
        head.net()->parameters().back()[3] = 20.0;
    }
    auto obs = torch::zeros({2}, torch::kFloat64);
    auto dist = head.full_distribution(obs);
    CHECK(dist[3].item<double>() > 0.999);
    auto gen = make_gen(2);
    auto draws = head.sample_batch(obs, 50, gen);
    for (const auto& a : draws) CHECK(a[0] == 3);
}

TEST_CASE("categorical head: sampling fidelity and normalization") {
    ActionSpace sp{2, 3};
    CategoricalHead head(4, sp);
    randomize(head.parameters(), 21, 0.2);
    auto obs = torch::randn({4}, make_gen(3), torch::kFloat64);
    check_fidelity(head, obs, 1000);
}

TEST_CASE("categorical head: capacity guard rejects huge flat spaces") {
    CHECK_THROWS_AS(CategoricalHead(4, ActionSpace{10, 10}), CapacityError);
}

TEST_CASE("factored head: uniform marginals give every joint action 1/4") {
    ActionSpace sp{2, 2};
    FactoredHead head(3, sp);
    {
        torch::NoGradGuard ng;
        auto params = head.parameters();
        params[params.size() - 2].zero_();
        params[params.size() - 1].zero_();
    }
    auto obs = torch::randn({3}, make_gen(4), torch::kFloat64);
    auto dist = head.full_distribution(obs);
    CHECK((dist - 0.25).abs().max().item<double>() < 1e-12);
}

TEST_CASE("factored head: joint probability is the product of the marginals") {
    ActionSpace sp{3, 4};
    FactoredHead head(5, sp);
    randomize(head.parameters(), 31, 0.3);
    auto obs = torch::randn({5}, make_gen(5), torch::kFloat64);
    auto marg = head.marginal_log_probs(obs).exp();
    auto dist = head.full_distribution(obs);
    for (int64_t i = 0; i < sp.flat_size(); ++i) {
        auto a = sp.from_flat(i);
        double expected = 1.0;
        for (int64_t d = 0; d < sp.dims; ++d) expected *= marg[d][a[d]].item<double>();
        CHECK(std::abs(dist[i].item<double>() - expected) < 1e-12);
    }
}

TEST_CASE("factored head: deterministic marginals give a deterministic joint") {
    ActionSpace sp{2, 3};
    FactoredHead head(2, sp);
    {
        torch::NoGradGuard ng;
        auto params = head.parameters();
        params[params.size() - 2].zero_();
        auto& bias = params[params.size() - 1];
        bias.zero_();
        bias[1] = 40.0;   // dim 0 -> category 1
        bias[3 + 2] = 40.0;  // dim 1 -> category 2
    }
    auto obs = torch::zeros({2}, torch::kFloat64);
    auto dist = head.full_distribution(obs);
    CHECK(dist[sp.flat_index({1, 2})].item<double>() > 1.0 - 1e-12);
    auto gen = make_gen(6);
    auto draws = head.sample_batch(obs, 20, gen);
    for (const auto& a : draws) CHECK((a == Action{1, 2}));
}

TEST_CASE("factored head: no product fit gives both anti-correlated actions > 1/4") {
    // Target joint: 0.5 on (0,1) and 0.5 on (1,0). Under product marginals
    // (p,1-p)x(q,1-q), P(0,1) = p(1-q) and P(1,0) = (1-p)q. Grid search shows
    // the smaller of the two never exceeds 1/4, so a fit that serves both
    // actions equally is capped at 1/2 combined mass, reached only at
    // uniform marginals. (The unbalanced sum alone can reach 1 by dumping
    // everything on one action, which is useless for the 0.5/0.5 target.)
    double best_min = 0.0;
    double best_p = -1.0, best_q = -1.0;
    for (int i = 0; i <= 1000; ++i) {
        for (int j = 0; j <= 1000; ++j) {
            double p = i / 1000.0, q = j / 1000.0;
            double m = std::min(p * (1.0 - q), (1.0 - p) * q);
            if (m > best_min) {
                best_min = m;
                best_p = p;
                best_q = q;
            }
        }
    }
    CHECK(best_min <= 0.25 + 1e-12);
    CHECK(best_min == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(best_p == doctest::Approx(0.5));
    CHECK(best_q == doctest::Approx(0.5));
    CHECK(2.0 * best_min <= 0.5 + 1e-12);  // balanced combined mass cap
}

TEST_CASE("factored head: sampling fidelity and normalization") {
    ActionSpace sp{2, 3};
    FactoredHead head(4, sp);
    randomize(head.parameters(), 41, 0.2);
    auto obs = torch::randn({4}, make_gen(7), torch::kFloat64);
    check_fidelity(head, obs, 2000);
}

TEST_CASE("autoregressive head: chain-rule distribution sums to one (D=3, M=4)") {
    ActionSpace sp{3, 4};
    AutoregressiveHead head(5, sp);
    randomize(head.parameters(), 51, 0.2);
    auto obs = torch::randn({5}, make_gen(8), torch::kFloat64);
    auto dist = head.full_distribution(obs);
    CHECK(dist.size(0) == 64);
    CHECK(std::abs(dist.sum().item<double>() - 1.0) < 1e-6);
}

TEST_CASE("autoregressive head: zeroed conditioning reduces to a product of marginals") {
    ActionSpace sp{3, 3};
    AutoregressiveHead head(4, sp);
    randomize(head.parameters(), 61, 0.3);
    head.zero_conditioning();
    auto obs = torch::randn({4}, make_gen(9), torch::kFloat64);

    // conditionals must ignore the prefix entirely (per-logit equality)
    auto base0 = head.conditional_probs(obs, {});
    auto alt1 = head.conditional_probs(obs, Action{});
    CHECK((base0 - alt1).abs().max().item<double>() == 0.0);
    auto cond_d1_a = head.conditional_probs(obs, {0});
    auto cond_d1_b = head.conditional_probs(obs, {2});
    CHECK((cond_d1_a - cond_d1_b).abs().max().item<double>() == 0.0);
    auto cond_d2_a = head.conditional_probs(obs, {0, 0});
    auto cond_d2_b = head.conditional_probs(obs, {2, 1});
    CHECK((cond_d2_a - cond_d2_b).abs().max().item<double>() == 0.0);

    // joint equals the product of the per-dimension distributions
    auto dist = head.full_distribution(obs);
    std::vector<torch::Tensor> marg = {base0, cond_d1_a, cond_d2_a};
    for (int64_t i = 0; i < sp.flat_size(); ++i) {
        auto a = sp.from_flat(i);
        double expected = 1.0;
        for (int64_t d = 0; d < sp.dims; ++d) expected *= marg[d][a[d]].item<double>();
        CHECK(std::abs(dist[i].item<double>() - expected) < 1e-12);
    }
}

TEST_CASE("autoregressive head: conditioning changes the downstream distribution") {
    ActionSpace sp{2, 3};
    AutoregressiveHead head(3, sp);
    randomize(head.parameters(), 71, 0.5);
    auto obs = torch::randn({3}, make_gen(10), torch::kFloat64);
    auto c0 = head.conditional_probs(obs, {0});
    auto c1 = head.conditional_probs(obs, {1});
    CHECK((c0 - c1).abs().max().item<double>() > 1e-6);
}

TEST_CASE("autoregressive head: sampling fidelity and normalization") {
    ActionSpace sp{2, 3};
    AutoregressiveHead head(4, sp);
    randomize(head.parameters(), 81, 0.2);
    auto obs = torch::randn({4}, make_gen(11), torch::kFloat64);
    check_fidelity(head, obs, 3000);
}

TEST_CASE("autoregressive head: custom dimension ordering still normalizes") {
    ActionSpace sp{3, 2};
    AutoregressiveHead head(3, sp, 32, {2, 0, 1});
    randomize(head.parameters(), 91, 0.3);
    auto obs = torch::randn({3}, make_gen(12), torch::kFloat64);
    auto dist = head.full_distribution(obs);
    CHECK(std::abs(dist.sum().item<double>() - 1.0) < 1e-6);
    CHECK_THROWS_AS(AutoregressiveHead(3, sp, 32, {0, 1}), ValidationError);
}

TEST_CASE("apply_mask: worked examples") {
    auto uniform = torch::full({4}, 0.25, torch::kFloat64);
    auto m1 = apply_mask(uniform, {true, true, false, false});
    CHECK(m1[0].item<double>() == doctest::Approx(0.5));
    CHECK(m1[1].item<double>() == doctest::Approx(0.5));
    CHECK(m1[2].item<double>() == 0.0);
    CHECK(m1[3].item<double>() == 0.0);

    auto dist = torch::tensor({0.2, 0.3, 0.5}, torch::kFloat64);
    auto all_true = apply_mask(dist, {true, true, true});
    CHECK((all_true - dist).abs().max().item<double>() < 1e-12);

    auto m2 = apply_mask(dist, {true, true, false});
    CHECK(m2[0].item<double>() == doctest::Approx(0.4));
    CHECK(m2[1].item<double>() == doctest::Approx(0.6));
    CHECK(m2[2].item<double>() == 0.0);
}

TEST_CASE("apply_mask: an all-invalid mask is an error, not a fallback") {
    auto dist = torch::tensor({0.2, 0.3, 0.5}, torch::kFloat64);
    CHECK_THROWS_AS(apply_mask(dist, {false, false, false}), ValidationError);
    CHECK_THROWS_AS(apply_mask(dist, {false, false}), SchemaError);
}

TEST_CASE("masked policy: support matches the oracle exactly and renormalizes") {
    ActionSpace sp{2, 3};
    auto inner = std::make_shared<CategoricalHead>(3, sp);
    randomize(inner->parameters(), 101, 0.3);
    FnOracle oracle([&](const Action& a) { return (a[0] + a[1]) % 2 == 0; });
    MeteredOracle meter(oracle);
    MaskedPolicy masked(inner, meter);
    auto obs = torch::randn({3}, make_gen(13), torch::kFloat64);

    auto raw = inner->full_distribution(obs);
    auto dist = masked.full_distribution(obs);
    CHECK(meter.count() == sp.flat_size());
    CHECK(std::abs(dist.sum().item<double>() - 1.0) < 1e-12);
    double valid_mass = 0.0;
    for (int64_t i = 0; i < sp.flat_size(); ++i) {
        auto a = sp.from_flat(i);
        if ((a[0] + a[1]) % 2 == 0) {
            valid_mass += raw[i].item<double>();
        } else {
            CHECK(dist[i].item<double>() == 0.0);
        }
    }
    for (int64_t i = 0; i < sp.flat_size(); ++i) {
        auto a = sp.from_flat(i);
        if ((a[0] + a[1]) % 2 == 0) {
            CHECK(dist[i].item<double>() ==
                  doctest::Approx(raw[i].item<double>() / valid_mass));
        }
    }

    auto gen = make_gen(14);
    for (const auto& a : masked.sample_batch(obs, 200, gen)) {
        CHECK((a[0] + a[1]) % 2 == 0);
    }
}

TEST_CASE("masked policy: sampling fidelity against the masked distribution") {
    ActionSpace sp{2, 2};
    auto inner = std::make_shared<FactoredHead>(2, sp);
    randomize(inner->parameters(), 111, 0.2);
    FnOracle oracle([](const Action& a) { return !(a[0] == 1 && a[1] == 1); });
    MaskedPolicy masked(inner, oracle);
    auto obs = torch::randn({2}, make_gen(15), torch::kFloat64);
    check_fidelity(masked, obs, 4000);
}

TEST_CASE("policy interface: single-draw sample agrees with its own log_prob") {
    ActionSpace sp{2, 3};
    CategoricalHead head(3, sp);
    randomize(head.parameters(), 121, 0.3);
    auto obs = torch::randn({3}, make_gen(16), torch::kFloat64);
    auto gen = make_gen(17);
    auto [action, lp] = head.sample(obs, gen);
    auto dist = head.full_distribution(obs);
    CHECK(lp.exp().item<double>() ==
          doctest::Approx(dist[sp.flat_index(action)].item<double>()));
}
