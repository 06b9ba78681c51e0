#ifndef FLOWIAR_HARNESS_HPP
#define FLOWIAR_HARNESS_HPP

#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "flowiar/env.hpp"
#include "flowiar/policy.hpp"
#include "flowiar/trainer.hpp"

namespace flowiar {

enum class PolicyKind { Flow, Categorical, Factored, Ar, ArIar, Mask };

PolicyKind policy_kind_from_string(const std::string& s);
std::string policy_kind_to_string(PolicyKind kind);

// A complete experiment: environment, policy family, training setup, seeds.
struct ExperimentSpec {
    std::string env = "toy-partial";  // toy-partial | era-partial | era-v1..v5
    PolicyKind policy = PolicyKind::Flow;
    int hidden = 64;  // baseline head width
    FlowConfig flow;  // dims/categories/obs_dim are filled in from the env
    bool elbo_only = false;  // estimator ablation: pure ELBO instead of sandwich
    TrainConfig train;
    std::vector<uint64_t> seeds = {0};
    std::string output_dir = "runs";

    // First violation is reported with its dotted field path.
    void validate() const;
};

nlohmann::json spec_to_json(const ExperimentSpec& spec);
ExperimentSpec spec_from_json(const nlohmann::json& j);

// Applies a dotted-path override such as "train.lr=0.001" onto the JSON form.
void apply_override(nlohmann::json& j, const std::string& assignment);

ExperimentSpec load_spec(const std::string& path,
                         const std::vector<std::string>& overrides = {});

// Short stable hash of the canonical JSON form, stored in checkpoints.
std::string spec_hash(const ExperimentSpec& spec);

EnvFactory make_env_factory(const std::string& env_name);

// Builds the policy named by the spec for the given env geometry. For the
// mask kind the caller must also set train.mask_mode (make_train_config does).
std::shared_ptr<PolicyInterface> make_policy(const ExperimentSpec& spec,
                                             int64_t obs_dim, ActionSpace space);

// TrainConfig for one seed: spec.train with the seed and policy-kind
// adjustments applied (mask kind enables mask_mode, plain ar disables the
// correction term).
TrainConfig make_train_config(const ExperimentSpec& spec, uint64_t seed);

// ---- metrics persistence ----

extern const std::vector<std::string> kMetricsColumns;

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(const std::string& path);

// ---- checkpoints ----

// Single-archive checkpoint: versioned header, config hash, policy and critic
// parameters, optimizer state, RNG state.
void save_checkpoint(const std::string& path, PolicyInterface& policy, Critic critic,
                     const std::string& config_hash, Trainer* trainer = nullptr);

// Loads parameters in place; returns the stored config hash. Shape or hash
// mismatches throw ValidationError.
std::string load_checkpoint(const std::string& path, PolicyInterface& policy,
                            Critic critic, const std::string& expected_hash = "");

// ---- runs ----

struct RunResult {
    std::string run_dir;
    uint64_t seed = 0;
    TrainResult train;
    bool aborted = false;
    std::string abort_reason;
};

// One seed: creates <output_dir>/seed_<n>/ with config.json, manifest.json,
// metrics.csv, checkpoint_best.pt and checkpoint_final.pt. On starvation or
// numerical abort the checkpoint is still written and the error recorded.
RunResult run_single_seed(const ExperimentSpec& spec, uint64_t seed);

std::vector<RunResult> run_experiment(const ExperimentSpec& spec);

// ---- evaluation ----

struct EvalSummary {
    double mean_return = 0.0;
    double std_return = 0.0;
    int64_t n_episodes = 0;
    // action histogram at the probe state (fresh env reset), 200 IAR samples
    std::vector<std::pair<Action, int64_t>> histogram;
    double raw_valid_ratio = 0.0;       // validity of raw policy samples
    double executed_valid_ratio = 0.0;  // validity of IAR-executed samples
};

EvalSummary evaluate_checkpoint(const ExperimentSpec& spec,
                                const std::string& checkpoint_path,
                                int64_t n_episodes, uint64_t eval_seed,
                                int64_t n_probe_samples = 200);

// ---- plotting ----

struct CurveGroup {
    std::string label;
    std::vector<std::string> run_dirs;  // each must contain metrics.csv
};

// Interpolated across-seed mean with a min/max band, one group per label.
// Writes <out_prefix>.svg and the tidy data file <out_prefix>.csv.
void write_plot(const std::vector<CurveGroup>& groups, const std::string& x_axis,
                const std::string& metric, const std::string& out_prefix);

// ---- ablations ----

struct AblationResult {
    std::string name;
    std::string changed_key;  // exactly one dotted path differs
    std::vector<RunResult> base_runs;
    std::vector<RunResult> variant_runs;
    std::string report_path;
};

// Produces the variant spec for a named ablation pair; changed_key_out
// receives the single dotted path that differs from the base.
ExperimentSpec ablation_variant(const std::string& name, const ExperimentSpec& base,
                                std::string* changed_key_out = nullptr);

// Runs both arms and writes overlay plots of mean_return and
// valid_fraction_mean plus report.json under base.output_dir.
AblationResult run_ablation(const std::string& name, const ExperimentSpec& base);

}  // namespace flowiar

#endif
