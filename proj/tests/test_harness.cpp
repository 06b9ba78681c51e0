#include <filesystem>
#include <fstream>
#include <sstream>

#include "flowiar/harness.hpp"
#include "flowiar/verify.hpp"

#ifdef CHECK
#undef CHECK
#endif
#include <doctest.h>

using namespace flowiar;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ExperimentSpec tiny_spec(const std::string& out_dir) {
    ExperimentSpec spec;
    spec.env = "toy-partial";
    spec.policy = PolicyKind::Factored;
    spec.hidden = 16;
    spec.train.t_max = 4;
    spec.train.e_max = 2;
    spec.train.n_envs = 2;
    spec.train.S = 4;
    spec.train.eval_every = 1000000;
    spec.train.n_eval_envs = 2;
    spec.seeds = {0};
    spec.output_dir = out_dir;
    return spec;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// metrics.csv with the wall-clock column blanked out
std::string metrics_without_wallclock(const std::string& path) {
    std::ifstream in(path);
    std::string line, out;
    while (std::getline(in, line)) {
        auto comma = line.find(',');
        out += line.substr(comma) + "\n";
    }
    return out;
}

fs::path fresh_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / "flowiar_harness" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("spec: JSON round trip preserves every field") {
    auto spec = tiny_spec("runs/x");
    spec.policy = PolicyKind::ArIar;
    spec.elbo_only = false;
    spec.flow.posterior_mode = PosteriorMode::Gaussian;
    spec.train.use_correction = false;
    spec.train.correction_weight = CorrectionWeight::AsPublished;
    spec.seeds = {3, 1, 4};
    auto j = spec_to_json(spec);
    auto back = spec_from_json(j);
    CHECK(spec_to_json(back) == j);
    CHECK(back.policy == PolicyKind::ArIar);
    CHECK(back.flow.posterior_mode == PosteriorMode::Gaussian);
    CHECK(back.train.correction_weight == CorrectionWeight::AsPublished);
    CHECK(back.seeds == std::vector<uint64_t>{3, 1, 4});
}

TEST_CASE("spec: validation reports the first error with its field path") {
    auto spec = tiny_spec("runs/x");
    CHECK_NOTHROW(spec.validate());

    auto bad = spec;
    bad.seeds = {1, 1};
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("seeds"), ValidationError);

    bad = spec;
    bad.train.gamma = 2.0;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("train.gamma"),
                         ValidationError);

    bad = spec;
    bad.env = "era-v9";
    CHECK_THROWS_AS(bad.validate(), ValidationError);

    CHECK_THROWS_WITH_AS(policy_kind_from_string("boltzmann"),
                         doctest::Contains("unknown policy kind"), ValidationError);

    json j = spec_to_json(spec);
    j["train"]["momentum"] = 0.9;
    CHECK_THROWS_WITH_AS(spec_from_json(j), doctest::Contains("train.momentum"),
                         ValidationError);
}

TEST_CASE("spec: masking on the thousand-action environment is refused") {
    auto spec = tiny_spec("runs/x");
    spec.env = "era-v5";
    spec.policy = PolicyKind::Mask;
    CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("1000"), CapacityError);
    spec.env = "era-v4";  // 729 actions, still enumerable
    CHECK_NOTHROW(spec.validate());
}

TEST_CASE("spec: dotted-path overrides reach nested fields") {
    auto j = spec_to_json(tiny_spec("runs/x"));
    apply_override(j, "train.lr=0.001");
    apply_override(j, "policy=categorical");
    apply_override(j, "train.use_correction=false");
    apply_override(j, "seeds=[5,6]");
    auto spec = spec_from_json(j);
    CHECK(spec.train.lr == doctest::Approx(0.001));
    CHECK(spec.policy == PolicyKind::Categorical);
    CHECK_FALSE(spec.train.use_correction);
    CHECK(spec.seeds == std::vector<uint64_t>{5, 6});
    CHECK_THROWS_AS(apply_override(j, "no_equals_sign"), ValidationError);
}

TEST_CASE("metrics: CSV writer and reader are exact inverses") {
    auto dir = fresh_dir("metrics");
    std::vector<MetricsRow> rows(2);
    rows[0] = {0.5, 100, 3, -1.25, -1.0, 0.875, 640, -2.5, -2.25, 0.1, 0.2, 7};
    rows[1] = {1.5, 200, 6, 0.75, 0.75, 0.9, 1280, -2.0, -1.75, -0.1, 0.05, 7};
    auto path = (dir / "metrics.csv").string();
    write_metrics_csv(path, rows);
    auto back = read_metrics_csv(path);
    REQUIRE(back.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
        CHECK(back[i].wall_clock_s == rows[i].wall_clock_s);
        CHECK(back[i].env_steps == rows[i].env_steps);
        CHECK(back[i].episode == rows[i].episode);
        CHECK(back[i].mean_return == rows[i].mean_return);
        CHECK(back[i].best_return == rows[i].best_return);
        CHECK(back[i].valid_fraction_mean == rows[i].valid_fraction_mean);
        CHECK(back[i].oracle_queries_cum == rows[i].oracle_queries_cum);
        CHECK(back[i].elbo_mean == rows[i].elbo_mean);
        CHECK(back[i].cubo_mean == rows[i].cubo_mean);
        CHECK(back[i].actor_loss == rows[i].actor_loss);
        CHECK(back[i].critic_loss == rows[i].critic_loss);
        CHECK(back[i].seed == rows[i].seed);
    }
    // header order is part of the format
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header ==
          "wall_clock_s,env_steps,episode,mean_return,best_return,"
          "valid_fraction_mean,oracle_queries_cum,elbo_mean,cubo_mean,actor_loss,"
          "critic_loss,seed");
}

TEST_CASE("checkpoint: parameters survive a save/load round trip") {
    auto dir = fresh_dir("ckpt");
    auto spec = tiny_spec(dir.string());
    torch::manual_seed(21);
    auto policy = make_policy(spec, 1, {2, 2});
    Critic critic(1);
    auto path = (dir / "ck.pt").string();
    save_checkpoint(path, *policy, critic, "deadbeef");

    torch::manual_seed(22);  // different init
    auto policy2 = make_policy(spec, 1, {2, 2});
    Critic critic2(1);
    auto stored = load_checkpoint(path, *policy2, critic2);
    CHECK(stored == "deadbeef");
    auto p1 = policy->parameters();
    auto p2 = policy2->parameters();
    REQUIRE(p1.size() == p2.size());
    for (size_t i = 0; i < p1.size(); ++i) {
        CHECK(torch::equal(p1[i], p2[i]));
    }
    auto obs = torch::zeros({8, 1}, torch::kFloat64);
    CHECK(torch::equal(critic->forward(obs), critic2->forward(obs)));

    CHECK_THROWS_WITH_AS(load_checkpoint(path, *policy2, critic2, "cafebabe"),
                         doctest::Contains("hash mismatch"), ValidationError);

    // a model built for a different environment cannot absorb the checkpoint
    auto other = make_policy(spec, 3, {2, 2});
    Critic other_critic(3);
    CHECK_THROWS_AS(load_checkpoint(path, *other, other_critic), ValidationError);
}

TEST_CASE("runs: a seed run leaves config, manifest, metrics, and checkpoints") {
    auto dir = fresh_dir("single");
    auto spec = tiny_spec(dir.string());
    auto result = run_single_seed(spec, 11);
    CHECK_FALSE(result.aborted);
    CHECK(fs::exists(result.run_dir + "/config.json"));
    CHECK(fs::exists(result.run_dir + "/manifest.json"));
    CHECK(fs::exists(result.run_dir + "/metrics.csv"));
    CHECK(fs::exists(result.run_dir + "/checkpoint_best.pt"));
    CHECK(fs::exists(result.run_dir + "/checkpoint_final.pt"));

    auto manifest = json::parse(slurp(result.run_dir + "/manifest.json"));
    CHECK(manifest.at("seed") == 11);
    CHECK(manifest.at("env") == "toy-partial");

    auto rows = read_metrics_csv(result.run_dir + "/metrics.csv");
    CHECK(rows.size() == result.train.history.size());
    for (size_t i = 1; i < rows.size(); ++i) {
        CHECK(rows[i].env_steps >= rows[i - 1].env_steps);
        CHECK(rows[i].wall_clock_s >= rows[i - 1].wall_clock_s);
    }
}

TEST_CASE("runs: identical specs give identical metrics apart from wall clock") {
    auto dir_a = fresh_dir("det_a");
    auto dir_b = fresh_dir("det_b");
    auto ra = run_single_seed(tiny_spec(dir_a.string()), 5);
    auto rb = run_single_seed(tiny_spec(dir_b.string()), 5);
    CHECK(metrics_without_wallclock(ra.run_dir + "/metrics.csv") ==
          metrics_without_wallclock(rb.run_dir + "/metrics.csv"));
}

TEST_CASE("runs: one subdirectory per seed") {
    auto dir = fresh_dir("multi");
    auto spec = tiny_spec(dir.string());
    spec.seeds = {1, 2, 3};
    auto results = run_experiment(spec);
    CHECK(results.size() == 3);
    for (auto seed : {1, 2, 3}) {
        CHECK(fs::exists(dir / ("seed_" + std::to_string(seed))));
    }
}

TEST_CASE("evaluation: rejection keeps executed actions valid even for a raw policy") {
    auto dir = fresh_dir("eval");
    auto spec = tiny_spec(dir.string());
    spec.env = "era-v1";
    spec.policy = PolicyKind::Categorical;
    spec.train.e_max = 1;
    spec.train.t_max = 2;
    spec.train.S = 32;  // enough draws that rejection never starves on era-v1
    auto result = run_single_seed(spec, 2);

    CHECK_THROWS_AS(evaluate_checkpoint(spec, result.run_dir + "/checkpoint_final.pt",
                                        0, 1),
                    ValidationError);

    auto summary = evaluate_checkpoint(spec, result.run_dir + "/checkpoint_final.pt",
                                       3, 90);
    CHECK(summary.n_episodes == 3);
    CHECK(std::isfinite(summary.mean_return));
    CHECK(summary.std_return >= 0.0);
    // an untrained policy proposes invalid actions, but IAR never executes one
    CHECK(summary.raw_valid_ratio < 1.0);
    CHECK(summary.executed_valid_ratio == 1.0);
    int64_t total = 0;
    for (const auto& [action, count] : summary.histogram) total += count;
    CHECK(total == 200);
}

TEST_CASE("plots: single run collapses the band onto the curve") {
    auto dir = fresh_dir("plot1");
    auto spec = tiny_spec(dir.string());
    auto result = run_single_seed(spec, 9);
    auto prefix = (dir / "curve").string();
    write_plot({{"run", {result.run_dir}}}, "env_steps", "mean_return", prefix);
    CHECK(fs::exists(prefix + ".svg"));
    CHECK(fs::exists(prefix + ".csv"));

    // tidy data holds exactly the raw metric points
    auto rows = read_metrics_csv(result.run_dir + "/metrics.csv");
    std::ifstream tidy(prefix + ".csv");
    std::string line;
    std::getline(tidy, line);
    CHECK(line == "label,run_dir,env_steps,mean_return");
    size_t n = 0;
    while (std::getline(tidy, line)) {
        if (!line.empty()) ++n;
    }
    CHECK(n == rows.size());

    // deterministic rendering: emitting the same plot twice is byte-identical
    auto prefix2 = (dir / "curve2").string();
    write_plot({{"run", {result.run_dir}}}, "env_steps", "mean_return", prefix2);
    CHECK(slurp(prefix + ".svg") == slurp(prefix2 + ".svg"));

    CHECK_THROWS_WITH_AS(
        write_plot({{"run", {result.run_dir}}}, "env_steps", "reward", prefix),
        doctest::Contains("available columns"), ValidationError);
    CHECK_NOTHROW(write_plot({{"run", {result.run_dir}}}, "wall_clock_s",
                             "best_return", (dir / "wc").string()));
}

TEST_CASE("ablations: each named pair changes exactly one configuration key") {
    auto spec = tiny_spec("runs/x");
    spec.policy = PolicyKind::Flow;

    std::string key;
    auto v1 = ablation_variant("gradient_correction", spec, &key);
    CHECK(key == "train.use_correction");
    CHECK_FALSE(v1.train.use_correction);

    auto v2 = ablation_variant("sandwich", spec, &key);
    CHECK(key == "elbo_only");
    CHECK(v2.elbo_only);

    auto v3 = ablation_variant("posterior_type", spec, &key);
    CHECK(key == "flow.posterior_mode");
    CHECK(v3.flow.posterior_mode == PosteriorMode::Gaussian);

    CHECK_THROWS_AS(ablation_variant("dropout", spec, nullptr), ValidationError);
    auto non_flow = spec;
    non_flow.policy = PolicyKind::Factored;
    CHECK_THROWS_AS(ablation_variant("sandwich", non_flow, nullptr), ValidationError);
}

TEST_CASE("ablations: the runner emits both arms, overlay plots, and a report") {
    auto dir = fresh_dir("ablate");
    auto spec = tiny_spec(dir.string());
    spec.policy = PolicyKind::Categorical;
    spec.env = "era-v1";
    spec.train.e_max = 1;
    spec.train.t_max = 2;
    spec.train.S = 32;
    auto result = run_ablation("gradient_correction", spec);
    CHECK(result.changed_key == "train.use_correction");
    CHECK(result.base_runs.size() == 1);
    CHECK(result.variant_runs.size() == 1);
    CHECK(fs::exists(dir / "gradient_correction/return.svg"));
    CHECK(fs::exists(dir / "gradient_correction/valid_fraction.svg"));
    CHECK(fs::exists(result.report_path));
    auto report = json::parse(slurp(result.report_path));
    CHECK(report.at("changed_key") == "train.use_correction");
}

TEST_CASE("spec files: loading applies overrides before validation") {
    auto dir = fresh_dir("specfile");
    auto path = (dir / "spec.json").string();
    {
        std::ofstream out(path);
        out << spec_to_json(tiny_spec(dir.string())).dump(2);
    }
    auto spec = load_spec(path, {"train.S=8", "hidden=24"});
    CHECK(spec.train.S == 8);
    CHECK(spec.hidden == 24);
    CHECK_THROWS_AS(load_spec(path, {"policy=quantum"}), ValidationError);
    CHECK_THROWS_AS(load_spec((dir / "missing.json").string()), ValidationError);
}
