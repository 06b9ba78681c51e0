// Command-line front end. Talks to the library exclusively through the C API.
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowiar_c.h"

namespace {

std::vector<const char*> as_ptrs(const std::vector<std::string>& v) {
    std::vector<const char*> out;
    for (const auto& s : v) out.push_back(s.c_str());
    return out;
}

int report(fi_status status) {
    if (status != FI_OK) {
        std::fprintf(stderr, "error: %s\n", fi_last_error());
    }
    return static_cast<int>(status);
}

fi_status load_spec_handle(const std::string& path,
                           const std::vector<std::string>& overrides, fi_spec** out) {
    auto ptrs = as_ptrs(overrides);
    return fi_spec_load(path.c_str(), ptrs.data(), static_cast<int>(ptrs.size()), out);
}

void print_and_free(char* s) {
    if (s) {
        std::printf("%s\n", s);
        fi_string_free(s);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Discrete flow policies with invalid-action rejection"};
    app.require_subcommand(1);

    std::string spec_path, checkpoint, metric = "mean_return", x_axis = "env_steps";
    std::string out_prefix = "plot", ablation_name;
    std::vector<std::string> overrides, run_dirs;
    int64_t n_episodes = 10;
    uint64_t eval_seed = 1000;

    auto add_spec_opts = [&](CLI::App* cmd) {
        cmd->add_option("--spec", spec_path, "experiment spec JSON file")->required();
        cmd->add_option("-O,--override", overrides,
                        "dotted-path override, e.g. train.lr=0.001");
    };

    auto* train = app.add_subcommand("train", "train one run per seed");
    add_spec_opts(train);

    auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint");
    add_spec_opts(evaluate);
    evaluate->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    evaluate->add_option("--episodes", n_episodes, "evaluation episodes");
    evaluate->add_option("--seed", eval_seed, "evaluation seed base");

    auto* plot = app.add_subcommand("plot", "plot a metric across runs");
    plot->add_option("--run", run_dirs, "run directory (repeatable)")->required();
    plot->add_option("--x", x_axis, "env_steps or wall_clock_s");
    plot->add_option("--metric", metric, "metrics CSV column");
    plot->add_option("--out", out_prefix, "output prefix for .svg and .csv");

    auto* ablate = app.add_subcommand("ablate", "run a paired ablation");
    add_spec_opts(ablate);
    ablate->add_option("--name", ablation_name,
                       "gradient_correction, sandwich, or posterior_type")
        ->required();

    auto* validate = app.add_subcommand("validate-config", "check a spec file");
    add_spec_opts(validate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(FI_ERR_VALIDATION);
    }

    if (validate->parsed()) {
        auto ptrs = as_ptrs(overrides);
        auto status = fi_spec_validate(spec_path.c_str(), ptrs.data(),
                                       static_cast<int>(ptrs.size()));
        if (status == FI_OK) std::printf("ok\n");
        return report(status);
    }

    if (plot->parsed()) {
        std::string groups = "[{\"label\":\"runs\",\"run_dirs\":[";
        for (size_t i = 0; i < run_dirs.size(); ++i) {
            groups += (i ? ",\"" : "\"") + run_dirs[i] + "\"";
        }
        groups += "]}]";
        return report(fi_plot(groups.c_str(), x_axis.c_str(), metric.c_str(),
                              out_prefix.c_str()));
    }

    fi_spec* spec = nullptr;
    auto status = load_spec_handle(spec_path, overrides, &spec);
    if (status != FI_OK) return report(status);

    char* out = nullptr;
    if (train->parsed()) {
        status = fi_train(spec, &out);
    } else if (evaluate->parsed()) {
        status = fi_evaluate(spec, checkpoint.c_str(), n_episodes, eval_seed, &out);
    } else if (ablate->parsed()) {
        status = fi_ablate(ablation_name.c_str(), spec, &out);
    }
    print_and_free(out);
    fi_spec_free(spec);
    return report(status);
}
