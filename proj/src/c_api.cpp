#include "flowiar_c.h"

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "flowiar/errors.hpp"
#include "flowiar/harness.hpp"

using nlohmann::json;

struct fi_spec {
    flowiar::ExperimentSpec spec;
};

namespace {

thread_local std::string g_last_error;

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

// Runs the body, translating C++ exceptions into status codes.
template <typename Fn>
fi_status guarded(Fn&& fn) {
    try {
        fn();
        g_last_error.clear();
        return FI_OK;
    } catch (const flowiar::ValidationError& e) {
        g_last_error = e.what();
        return FI_ERR_VALIDATION;
    } catch (const flowiar::SchemaError& e) {
        g_last_error = e.what();
        return FI_ERR_VALIDATION;
    } catch (const flowiar::CapacityError& e) {
        g_last_error = e.what();
        return FI_ERR_VALIDATION;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return FI_ERR_RUNTIME;
    } catch (...) {
        g_last_error = "unknown error";
        return FI_ERR_RUNTIME;
    }
}

std::vector<std::string> collect_overrides(const char* const* overrides,
                                           int n_overrides) {
    std::vector<std::string> out;
    for (int i = 0; i < n_overrides; ++i) {
        if (!overrides[i]) throw flowiar::ValidationError("null override string");
        out.emplace_back(overrides[i]);
    }
    return out;
}

json action_to_json(const flowiar::Action& a) { return json(a); }

}  // namespace

extern "C" {

const char* fi_last_error(void) { return g_last_error.c_str(); }

void fi_string_free(char* s) { std::free(s); }

fi_status fi_spec_load(const char* path, const char* const* overrides,
                       int n_overrides, fi_spec** out) {
    return guarded([&] {
        if (!path || !out) throw flowiar::ValidationError("null argument");
        auto spec = flowiar::load_spec(path, collect_overrides(overrides, n_overrides));
        *out = new fi_spec{std::move(spec)};
    });
}

fi_status fi_spec_validate(const char* path, const char* const* overrides,
                           int n_overrides) {
    return guarded([&] {
        if (!path) throw flowiar::ValidationError("null argument");
        flowiar::load_spec(path, collect_overrides(overrides, n_overrides));
    });
}

void fi_spec_free(fi_spec* spec) { delete spec; }

fi_status fi_spec_to_json(const fi_spec* spec, char** out_json) {
    return guarded([&] {
        if (!spec || !out_json) throw flowiar::ValidationError("null argument");
        *out_json = dup_string(flowiar::spec_to_json(spec->spec).dump(2));
    });
}

fi_status fi_train(const fi_spec* spec, char** out_json) {
    return guarded([&] {
        if (!spec || !out_json) throw flowiar::ValidationError("null argument");
        auto results = flowiar::run_experiment(spec->spec);
        json runs = json::array();
        bool any_aborted = false;
        for (const auto& r : results) {
            json run = {{"run_dir", r.run_dir},
                        {"seed", r.seed},
                        {"aborted", r.aborted}};
            if (r.aborted) {
                run["abort_reason"] = r.abort_reason;
                any_aborted = true;
            } else {
                run["final_return"] = r.train.final_return;
                run["best_return"] = r.train.best_return;
                run["env_steps"] = r.train.env_steps;
                run["episodes"] = r.train.episodes;
            }
            runs.push_back(run);
        }
        *out_json = dup_string(json{{"runs", runs}}.dump(2));
        if (any_aborted) {
            throw flowiar::Error("one or more runs aborted; checkpoints and abort "
                                 "reasons are in the run directories");
        }
    });
}

fi_status fi_evaluate(const fi_spec* spec, const char* checkpoint_path,
                      int64_t n_episodes, uint64_t eval_seed, char** out_json) {
    return guarded([&] {
        if (!spec || !checkpoint_path || !out_json) {
            throw flowiar::ValidationError("null argument");
        }
        auto summary = flowiar::evaluate_checkpoint(spec->spec, checkpoint_path,
                                                    n_episodes, eval_seed);
        json hist = json::array();
        for (const auto& [action, count] : summary.histogram) {
            hist.push_back({{"action", action_to_json(action)}, {"count", count}});
        }
        json out = {{"mean_return", summary.mean_return},
                    {"std_return", summary.std_return},
                    {"n_episodes", summary.n_episodes},
                    {"raw_valid_ratio", summary.raw_valid_ratio},
                    {"executed_valid_ratio", summary.executed_valid_ratio},
                    {"probe_histogram", hist}};
        *out_json = dup_string(out.dump(2));
    });
}

fi_status fi_plot(const char* groups_json, const char* x_axis, const char* metric,
                  const char* out_prefix) {
    return guarded([&] {
        if (!groups_json || !x_axis || !metric || !out_prefix) {
            throw flowiar::ValidationError("null argument");
        }
        json parsed = json::parse(groups_json, nullptr, false);
        if (parsed.is_discarded() || !parsed.is_array()) {
            throw flowiar::ValidationError("groups must be a JSON array of "
                                           "{label, run_dirs} objects");
        }
        std::vector<flowiar::CurveGroup> groups;
        for (const auto& g : parsed) {
            flowiar::CurveGroup group;
            if (!g.is_object() || !g.contains("label") || !g.contains("run_dirs")) {
                throw flowiar::ValidationError("each group needs label and run_dirs");
            }
            group.label = g.at("label").get<std::string>();
            group.run_dirs = g.at("run_dirs").get<std::vector<std::string>>();
            groups.push_back(std::move(group));
        }
        flowiar::write_plot(groups, x_axis, metric, out_prefix);
    });
}

fi_status fi_ablate(const char* name, const fi_spec* base, char** out_json) {
    return guarded([&] {
        if (!name || !base || !out_json) throw flowiar::ValidationError("null argument");
        auto result = flowiar::run_ablation(name, base->spec);
        std::ifstream in(result.report_path);
        std::string report((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
        *out_json = dup_string(report);
    });
}

}  // extern "C"
