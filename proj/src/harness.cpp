#include "flowiar/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "flowiar/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace flowiar {

namespace {

// Pulls a field out of a JSON object, reporting type errors with the dotted
// path; absent fields keep their defaults. Consumed keys are erased so the
// caller can flag leftovers as unknown.
template <typename T>
void take(json& obj, const std::string& path, const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ValidationError(path + key + ": wrong type");
    }
    obj.erase(key);
}

void expect_empty(const json& obj, const std::string& path) {
    if (!obj.empty()) {
        throw ValidationError(path + obj.begin().key() + ": unknown field");
    }
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fixed3(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

std::string git_revision() {
    FILE* pipe = popen("git rev-parse HEAD 2>/dev/null", "r");
    if (!pipe) return "unknown";
    char buf[128] = {0};
    std::string out;
    if (fgets(buf, sizeof(buf), pipe)) out = buf;
    pclose(pipe);
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
    return out.empty() ? "unknown" : out;
}

std::string posterior_mode_to_string(PosteriorMode m) {
    return m == PosteriorMode::Gaussian ? "gaussian" : "flow";
}

PosteriorMode posterior_mode_from_string(const std::string& s, const std::string& path) {
    if (s == "gaussian") return PosteriorMode::Gaussian;
    if (s == "flow") return PosteriorMode::Flow;
    throw ValidationError(path + ": unknown posterior mode '" + s + "'");
}

std::string alpha_mode_to_string(AlphaMode m) {
    switch (m) {
        case AlphaMode::Static: return "static";
        case AlphaMode::Trainable: return "trainable";
        default: return "adaptive";
    }
}

AlphaMode alpha_mode_from_string(const std::string& s, const std::string& path) {
    if (s == "static") return AlphaMode::Static;
    if (s == "trainable") return AlphaMode::Trainable;
    if (s == "adaptive") return AlphaMode::Adaptive;
    throw ValidationError(path + ": unknown alpha mode '" + s + "'");
}

json train_to_json(const TrainConfig& c) {
    return {{"gamma", c.gamma},
            {"t_max", c.t_max},
            {"e_max", c.e_max},
            {"max_env_steps", c.max_env_steps},
            {"n_envs", c.n_envs},
            {"S", c.S},
            {"max_retries", c.max_retries},
            {"n_elbo_steps", c.n_elbo_steps},
            {"elbo_batch_size", c.elbo_batch_size},
            {"n_posterior_samples", c.n_posterior_samples},
            {"lr", c.lr},
            {"critic_lr", c.critic_lr},
            {"elbo_lr", c.elbo_lr},
            {"grad_clip", c.grad_clip},
            {"value_loss_coef", c.value_loss_coef},
            {"entropy_coef", c.entropy_coef},
            {"use_correction", c.use_correction},
            {"correction_weight", c.correction_weight == CorrectionWeight::Consistent
                                      ? "consistent"
                                      : "as_published"},
            {"eval_every", c.eval_every},
            {"n_eval_envs", c.n_eval_envs}};
}

TrainConfig train_from_json(json obj) {
    TrainConfig c;
    const std::string p = "train.";
    take(obj, p, "gamma", c.gamma);
    take(obj, p, "t_max", c.t_max);
    take(obj, p, "e_max", c.e_max);
    take(obj, p, "max_env_steps", c.max_env_steps);
    take(obj, p, "n_envs", c.n_envs);
    take(obj, p, "S", c.S);
    take(obj, p, "max_retries", c.max_retries);
    take(obj, p, "n_elbo_steps", c.n_elbo_steps);
    take(obj, p, "elbo_batch_size", c.elbo_batch_size);
    take(obj, p, "n_posterior_samples", c.n_posterior_samples);
    take(obj, p, "lr", c.lr);
    take(obj, p, "critic_lr", c.critic_lr);
    take(obj, p, "elbo_lr", c.elbo_lr);
    take(obj, p, "grad_clip", c.grad_clip);
    take(obj, p, "value_loss_coef", c.value_loss_coef);
    take(obj, p, "entropy_coef", c.entropy_coef);
    take(obj, p, "use_correction", c.use_correction);
    std::string weight = "consistent";
    take(obj, p, "correction_weight", weight);
    if (weight == "consistent") {
        c.correction_weight = CorrectionWeight::Consistent;
    } else if (weight == "as_published") {
        c.correction_weight = CorrectionWeight::AsPublished;
    } else {
        throw ValidationError("train.correction_weight: unknown value '" + weight + "'");
    }
    take(obj, p, "eval_every", c.eval_every);
    take(obj, p, "n_eval_envs", c.n_eval_envs);
    expect_empty(obj, p);
    return c;
}

json flow_to_json(const FlowConfig& f) {
    return {{"embed_dim", f.embed_dim},
            {"encoder_hidden", f.encoder_hidden},
            {"n_coupling_layers", f.n_coupling_layers},
            {"coupling_hidden", f.coupling_hidden},
            {"posterior_layers", f.posterior_layers},
            {"posterior_hidden", f.posterior_hidden},
            {"sigma_min", f.sigma_min},
            {"scale_clamp", f.scale_clamp},
            {"posterior_mode", posterior_mode_to_string(f.posterior_mode)},
            {"alpha_mode", alpha_mode_to_string(f.alpha_mode)},
            {"static_alpha", f.static_alpha},
            {"n_bound_samples", f.n_bound_samples}};
}

FlowConfig flow_from_json(json obj) {
    FlowConfig f;
    const std::string p = "flow.";
    take(obj, p, "embed_dim", f.embed_dim);
    take(obj, p, "encoder_hidden", f.encoder_hidden);
    take(obj, p, "n_coupling_layers", f.n_coupling_layers);
    take(obj, p, "coupling_hidden", f.coupling_hidden);
    take(obj, p, "posterior_layers", f.posterior_layers);
    take(obj, p, "posterior_hidden", f.posterior_hidden);
    take(obj, p, "sigma_min", f.sigma_min);
    take(obj, p, "scale_clamp", f.scale_clamp);
    std::string s;
    if (obj.contains("posterior_mode")) {
        take(obj, p, "posterior_mode", s);
        f.posterior_mode = posterior_mode_from_string(s, "flow.posterior_mode");
    }
    if (obj.contains("alpha_mode")) {
        take(obj, p, "alpha_mode", s);
        f.alpha_mode = alpha_mode_from_string(s, "flow.alpha_mode");
    }
    take(obj, p, "static_alpha", f.static_alpha);
    take(obj, p, "n_bound_samples", f.n_bound_samples);
    expect_empty(obj, p);
    return f;
}

double metric_value(const MetricsRow& r, const std::string& name) {
    if (name == "wall_clock_s") return r.wall_clock_s;
    if (name == "env_steps") return static_cast<double>(r.env_steps);
    if (name == "episode") return static_cast<double>(r.episode);
    if (name == "mean_return") return r.mean_return;
    if (name == "best_return") return r.best_return;
    if (name == "valid_fraction_mean") return r.valid_fraction_mean;
    if (name == "oracle_queries_cum") return static_cast<double>(r.oracle_queries_cum);
    if (name == "elbo_mean") return r.elbo_mean;
    if (name == "cubo_mean") return r.cubo_mean;
    if (name == "actor_loss") return r.actor_loss;
    if (name == "critic_loss") return r.critic_loss;
    if (name == "seed") return static_cast<double>(r.seed);
    std::string cols;
    for (const auto& c : kMetricsColumns) cols += (cols.empty() ? "" : ", ") + c;
    throw ValidationError("unknown metric '" + name + "'; available columns: " + cols);
}

// Piecewise-linear interpolation over points sorted by x, clamped at the ends.
double interp(const std::vector<std::pair<double, double>>& pts, double x) {
    if (pts.empty()) throw ContractViolation("empty curve");
    if (x <= pts.front().first) return pts.front().second;
    if (x >= pts.back().first) return pts.back().second;
    for (size_t i = 1; i < pts.size(); ++i) {
        if (x <= pts[i].first) {
            double x0 = pts[i - 1].first, x1 = pts[i].first;
            double y0 = pts[i - 1].second, y1 = pts[i].second;
            if (x1 == x0) return y1;
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    return pts.back().second;
}

struct AggregatedCurve {
    std::string label;
    std::vector<double> x, mean, lo, hi;
    std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> raw;
};

AggregatedCurve aggregate_group(const CurveGroup& group, const std::string& x_axis,
                                const std::string& metric) {
    if (group.run_dirs.empty()) {
        throw ValidationError("plot group '" + group.label + "' has no runs");
    }
    AggregatedCurve out;
    out.label = group.label;
    for (const auto& dir : group.run_dirs) {
        auto rows = read_metrics_csv(dir + "/metrics.csv");
        if (rows.empty()) throw ValidationError("no metric rows in " + dir);
        std::vector<std::pair<double, double>> pts;
        for (const auto& r : rows) pts.emplace_back(metric_value(r, x_axis),
                                                    metric_value(r, metric));
        std::sort(pts.begin(), pts.end());
        out.raw.emplace_back(dir, std::move(pts));
    }
    std::set<double> grid;
    for (const auto& [dir, pts] : out.raw) {
        for (const auto& [x, y] : pts) grid.insert(x);
    }
    for (double x : grid) {
        double sum = 0, lo = 0, hi = 0;
        bool first = true;
        for (const auto& [dir, pts] : out.raw) {
            double y = interp(pts, x);
            sum += y;
            lo = first ? y : std::min(lo, y);
            hi = first ? y : std::max(hi, y);
            first = false;
        }
        out.x.push_back(x);
        out.mean.push_back(sum / static_cast<double>(out.raw.size()));
        out.lo.push_back(lo);
        out.hi.push_back(hi);
    }
    return out;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                          "#8c564b"};

void write_svg(const std::vector<AggregatedCurve>& curves, const std::string& x_axis,
               const std::string& metric, const std::string& path) {
    double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
    bool first = true;
    for (const auto& c : curves) {
        for (size_t i = 0; i < c.x.size(); ++i) {
            if (first) {
                x_min = x_max = c.x[i];
                y_min = c.lo[i];
                y_max = c.hi[i];
                first = false;
            } else {
                x_min = std::min(x_min, c.x[i]);
                x_max = std::max(x_max, c.x[i]);
                y_min = std::min(y_min, c.lo[i]);
                y_max = std::max(y_max, c.hi[i]);
            }
        }
    }
    if (x_max == x_min) x_max = x_min + 1;
    if (y_max == y_min) y_max = y_min + 1;
    const double W = 640, H = 480, ML = 70, MR = 20, MT = 30, MB = 50;
    auto px = [&](double x) { return ML + (x - x_min) / (x_max - x_min) * (W - ML - MR); };
    auto py = [&](double y) { return H - MB - (y - y_min) / (y_max - y_min) * (H - MT - MB); };

    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write " + path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" "
           "viewBox=\"0 0 640 480\">\n";
    out << "<rect width=\"640\" height=\"480\" fill=\"white\"/>\n";
    for (size_t ci = 0; ci < curves.size(); ++ci) {
        const auto& c = curves[ci];
        const char* color = kPalette[ci % 6];
        out << "<polygon fill=\"" << color << "\" fill-opacity=\"0.2\" stroke=\"none\" "
               "points=\"";
        for (size_t i = 0; i < c.x.size(); ++i) {
            out << fixed3(px(c.x[i])) << "," << fixed3(py(c.hi[i])) << " ";
        }
        for (size_t i = c.x.size(); i-- > 0;) {
            out << fixed3(px(c.x[i])) << "," << fixed3(py(c.lo[i])) << " ";
        }
        out << "\"/>\n";
        out << "<polyline fill=\"none\" stroke=\"" << color
            << "\" stroke-width=\"2\" points=\"";
        for (size_t i = 0; i < c.x.size(); ++i) {
            out << fixed3(px(c.x[i])) << "," << fixed3(py(c.mean[i])) << " ";
        }
        out << "\"/>\n";
        out << "<text x=\"" << fixed3(ML + 10) << "\" y=\"" << fixed3(MT + 16.0 * ci + 14)
            << "\" fill=\"" << color << "\" font-family=\"monospace\" font-size=\"12\">"
            << c.label << "</text>\n";
    }
    out << "<line x1=\"" << fixed3(ML) << "\" y1=\"" << fixed3(H - MB) << "\" x2=\""
        << fixed3(W - MR) << "\" y2=\"" << fixed3(H - MB)
        << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << fixed3(ML) << "\" y1=\"" << fixed3(MT) << "\" x2=\""
        << fixed3(ML) << "\" y2=\"" << fixed3(H - MB) << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        double fx = x_min + (x_max - x_min) * t / 4.0;
        double fy = y_min + (y_max - y_min) * t / 4.0;
        char lbl[64];
        std::snprintf(lbl, sizeof(lbl), "%.4g", fx);
        out << "<text x=\"" << fixed3(px(fx)) << "\" y=\"" << fixed3(H - MB + 18)
            << "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"11\">"
            << lbl << "</text>\n";
        std::snprintf(lbl, sizeof(lbl), "%.4g", fy);
        out << "<text x=\"" << fixed3(ML - 6) << "\" y=\"" << fixed3(py(fy) + 4)
            << "\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"11\">" << lbl
            << "</text>\n";
    }
    out << "<text x=\"" << fixed3((ML + W - MR) / 2) << "\" y=\"" << fixed3(H - 10)
        << "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"13\">"
        << x_axis << "</text>\n";
    out << "<text x=\"16\" y=\"" << fixed3((MT + H - MB) / 2)
        << "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"13\" "
           "transform=\"rotate(-90 16 "
        << fixed3((MT + H - MB) / 2) << ")\">" << metric << "</text>\n";
    out << "</svg>\n";
}

// Dotted paths of leaves that differ between two JSON objects.
void json_diff(const json& a, const json& b, const std::string& prefix,
               std::vector<std::string>& out) {
    if (a.is_object() && b.is_object()) {
        std::set<std::string> keys;
        for (auto it = a.begin(); it != a.end(); ++it) keys.insert(it.key());
        for (auto it = b.begin(); it != b.end(); ++it) keys.insert(it.key());
        for (const auto& k : keys) {
            std::string path = prefix.empty() ? k : prefix + "." + k;
            if (!a.contains(k) || !b.contains(k)) {
                out.push_back(path);
            } else {
                json_diff(a.at(k), b.at(k), path, out);
            }
        }
    } else if (a != b) {
        out.push_back(prefix);
    }
}

}  // namespace

PolicyKind policy_kind_from_string(const std::string& s) {
    if (s == "flow") return PolicyKind::Flow;
    if (s == "categorical") return PolicyKind::Categorical;
    if (s == "factored") return PolicyKind::Factored;
    if (s == "ar") return PolicyKind::Ar;
    if (s == "ar_iar") return PolicyKind::ArIar;
    if (s == "mask") return PolicyKind::Mask;
    throw ValidationError("policy: unknown policy kind '" + s + "'");
}

std::string policy_kind_to_string(PolicyKind kind) {
    switch (kind) {
        case PolicyKind::Flow: return "flow";
        case PolicyKind::Categorical: return "categorical";
        case PolicyKind::Factored: return "factored";
        case PolicyKind::Ar: return "ar";
        case PolicyKind::ArIar: return "ar_iar";
        default: return "mask";
    }
}

EnvFactory make_env_factory(const std::string& env_name) {
    if (env_name == "toy-partial") {
        return [] { return make_toy_partial(); };
    }
    if (env_name == "era-partial") {
        return [] { return make_era_partial(); };
    }
    if (env_name.rfind("era-", 0) == 0) {
        auto version = era_version_from_string(env_name.substr(4));
        return [version] { return make_era(version); };
    }
    throw ValidationError("env: unknown environment '" + env_name + "'");
}

void ExperimentSpec::validate() const {
    auto factory = make_env_factory(env);  // throws with "env:" path
    if (hidden < 1) throw ValidationError("hidden: must be positive");
    if (seeds.empty()) throw ValidationError("seeds: at least one seed required");
    std::set<uint64_t> uniq(seeds.begin(), seeds.end());
    if (uniq.size() != seeds.size()) throw ValidationError("seeds: must be distinct");
    if (output_dir.empty()) throw ValidationError("output_dir: must be nonempty");
    try {
        train.validate();
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("train.") + e.what());
    }
    if (train.mask_mode) {
        throw ValidationError("train.mask_mode: set the policy kind to 'mask' instead");
    }
    if (elbo_only && policy != PolicyKind::Flow) {
        throw ValidationError("elbo_only: only meaningful for the flow policy");
    }
    if (policy == PolicyKind::Mask) {
        auto probe = factory();
        int64_t size = probe->space().flat_size();
        if (size >= 1000) {
            throw CapacityError(
                "policy: action masking on '" + env + "' would enumerate " +
                std::to_string(size) + " actions per step, at or above the "
                "1000-action guard");
        }
    }
}

json spec_to_json(const ExperimentSpec& spec) {
    return {{"env", spec.env},
            {"policy", policy_kind_to_string(spec.policy)},
            {"hidden", spec.hidden},
            {"flow", flow_to_json(spec.flow)},
            {"elbo_only", spec.elbo_only},
            {"train", train_to_json(spec.train)},
            {"seeds", spec.seeds},
            {"output_dir", spec.output_dir}};
}

ExperimentSpec spec_from_json(const json& j) {
    if (!j.is_object()) throw ValidationError("spec: top level must be an object");
    json obj = j;
    ExperimentSpec spec;
    take(obj, "", "env", spec.env);
    if (obj.contains("policy")) {
        std::string s;
        take(obj, "", "policy", s);
        spec.policy = policy_kind_from_string(s);
    }
    take(obj, "", "hidden", spec.hidden);
    if (obj.contains("flow")) {
        if (!obj.at("flow").is_object()) throw ValidationError("flow: must be an object");
        spec.flow = flow_from_json(obj.at("flow"));
        obj.erase("flow");
    }
    take(obj, "", "elbo_only", spec.elbo_only);
    if (obj.contains("train")) {
        if (!obj.at("train").is_object()) {
            throw ValidationError("train: must be an object");
        }
        spec.train = train_from_json(obj.at("train"));
        obj.erase("train");
    }
    take(obj, "", "seeds", spec.seeds);
    take(obj, "", "output_dir", spec.output_dir);
    expect_empty(obj, "");
    return spec;
}

void apply_override(json& j, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ValidationError("override '" + assignment + "' is not of the form path=value");
    }
    std::string path = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);
    json* node = &j;
    size_t start = 0;
    while (true) {
        auto dot = path.find('.', start);
        std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw ValidationError("override path '" + path + "' has an empty segment");
        if (dot == std::string::npos) {
            json parsed = json::parse(value, nullptr, false);
            (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
            return;
        }
        if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = json::object();
        node = &(*node)[key];
        start = dot + 1;
    }
}

ExperimentSpec load_spec(const std::string& path,
                         const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open spec file: " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ValidationError("spec: not valid JSON: " + path);
    for (const auto& o : overrides) apply_override(j, o);
    auto spec = spec_from_json(j);
    spec.validate();
    return spec;
}

std::string spec_hash(const ExperimentSpec& spec) {
    auto h = std::hash<std::string>{}(spec_to_json(spec).dump());
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016zx", h);
    return buf;
}

std::shared_ptr<PolicyInterface> make_policy(const ExperimentSpec& spec,
                                             int64_t obs_dim, ActionSpace space) {
    switch (spec.policy) {
        case PolicyKind::Flow: {
            FlowConfig fc = spec.flow;
            fc.dims = space.dims;
            fc.categories = space.categories;
            fc.obs_dim = obs_dim;
            FlowModel model(fc);
            if (spec.elbo_only) model->set_elbo_only(true);
            return std::make_shared<FlowPolicyAdapter>(std::move(model));
        }
        case PolicyKind::Categorical:
        case PolicyKind::Mask:
            return std::make_shared<CategoricalHead>(obs_dim, space, spec.hidden);
        case PolicyKind::Factored:
            return std::make_shared<FactoredHead>(obs_dim, space, spec.hidden);
        case PolicyKind::Ar:
        case PolicyKind::ArIar:
            return std::make_shared<AutoregressiveHead>(obs_dim, space, spec.hidden);
    }
    throw ContractViolation("unhandled policy kind");
}

TrainConfig make_train_config(const ExperimentSpec& spec, uint64_t seed) {
    TrainConfig cfg = spec.train;
    cfg.seed = seed;
    if (spec.policy == PolicyKind::Mask) {
        cfg.mask_mode = true;
        cfg.use_correction = false;
    }
    if (spec.policy == PolicyKind::Ar) {
        // the plain autoregressive baseline trains without the rejection
        // correction term; ar_iar keeps it
        cfg.use_correction = false;
    }
    return cfg;
}

const std::vector<std::string> kMetricsColumns = {
    "wall_clock_s",   "env_steps", "episode",   "mean_return",
    "best_return",    "valid_fraction_mean",    "oracle_queries_cum",
    "elbo_mean",      "cubo_mean", "actor_loss", "critic_loss", "seed"};

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write " + path);
    for (size_t i = 0; i < kMetricsColumns.size(); ++i) {
        out << (i ? "," : "") << kMetricsColumns[i];
    }
    out << "\n";
    for (const auto& r : rows) {
        out << fmt_double(r.wall_clock_s) << "," << r.env_steps << "," << r.episode << ","
            << fmt_double(r.mean_return) << "," << fmt_double(r.best_return) << ","
            << fmt_double(r.valid_fraction_mean) << "," << r.oracle_queries_cum << ","
            << fmt_double(r.elbo_mean) << "," << fmt_double(r.cubo_mean) << ","
            << fmt_double(r.actor_loss) << "," << fmt_double(r.critic_loss) << ","
            << r.seed << "\n";
    }
}

std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open metrics file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("empty metrics file: " + path);
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    std::vector<MetricsRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        MetricsRow r;
        for (const auto& col : header) {
            if (!std::getline(ss, cell, ',')) {
                throw ValidationError("short metrics row in " + path);
            }
            double v = std::stod(cell);
            if (col == "wall_clock_s") r.wall_clock_s = v;
            else if (col == "env_steps") r.env_steps = static_cast<int64_t>(v);
            else if (col == "episode") r.episode = static_cast<int64_t>(v);
            else if (col == "mean_return") r.mean_return = v;
            else if (col == "best_return") r.best_return = v;
            else if (col == "valid_fraction_mean") r.valid_fraction_mean = v;
            else if (col == "oracle_queries_cum") r.oracle_queries_cum = static_cast<int64_t>(v);
            else if (col == "elbo_mean") r.elbo_mean = v;
            else if (col == "cubo_mean") r.cubo_mean = v;
            else if (col == "actor_loss") r.actor_loss = v;
            else if (col == "critic_loss") r.critic_loss = v;
            else if (col == "seed") r.seed = static_cast<uint64_t>(v);
            else throw ValidationError("unknown metrics column '" + col + "' in " + path);
        }
        rows.push_back(r);
    }
    return rows;
}

void save_checkpoint(const std::string& path, PolicyInterface& policy, Critic critic,
                     const std::string& config_hash, Trainer* trainer) {
    torch::serialize::OutputArchive archive;
    archive.write("format_version", c10::IValue(static_cast<int64_t>(1)));
    archive.write("config_hash", c10::IValue(config_hash));
    auto params = policy.parameters();
    archive.write("n_policy_params", c10::IValue(static_cast<int64_t>(params.size())));
    for (size_t i = 0; i < params.size(); ++i) {
        archive.write("policy_param_" + std::to_string(i), params[i].detach(), true);
    }
    torch::serialize::OutputArchive critic_ar;
    critic->save(critic_ar);
    archive.write("critic", critic_ar);
    archive.write("has_trainer_state", c10::IValue(trainer != nullptr));
    if (trainer) {
        archive.write("rng_state", trainer->generator().get_state(), true);
        torch::serialize::OutputArchive actor_ar, critic_opt_ar;
        trainer->actor_optimizer().save(actor_ar);
        archive.write("actor_opt", actor_ar);
        trainer->critic_optimizer().save(critic_opt_ar);
        archive.write("critic_opt", critic_opt_ar);
        archive.write("has_elbo_opt", c10::IValue(trainer->elbo_optimizer() != nullptr));
        if (trainer->elbo_optimizer()) {
            torch::serialize::OutputArchive elbo_ar;
            trainer->elbo_optimizer()->save(elbo_ar);
            archive.write("elbo_opt", elbo_ar);
        }
    }
    archive.save_to(path);
}

std::string load_checkpoint(const std::string& path, PolicyInterface& policy,
                            Critic critic, const std::string& expected_hash) {
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path);
    } catch (const c10::Error& e) {
        throw ValidationError("cannot load checkpoint " + path + ": " + e.what_without_backtrace());
    }
    c10::IValue version, hash, n_params;
    archive.read("format_version", version);
    if (version.toInt() != 1) {
        throw ValidationError("unsupported checkpoint format version " +
                              std::to_string(version.toInt()));
    }
    archive.read("config_hash", hash);
    if (!expected_hash.empty() && hash.toStringRef() != expected_hash) {
        throw ValidationError("checkpoint config hash mismatch: stored " +
                              hash.toStringRef() + ", expected " + expected_hash);
    }
    archive.read("n_policy_params", n_params);
    auto params = policy.parameters();
    if (n_params.toInt() != static_cast<int64_t>(params.size())) {
        throw ValidationError("checkpoint holds " + std::to_string(n_params.toInt()) +
                              " policy tensors, model has " +
                              std::to_string(params.size()));
    }
    torch::NoGradGuard ng;
    for (size_t i = 0; i < params.size(); ++i) {
        torch::Tensor t;
        archive.read("policy_param_" + std::to_string(i), t, true);
        if (t.sizes() != params[i].sizes()) {
            throw ValidationError("checkpoint tensor " + std::to_string(i) +
                                  " shape mismatch; the checkpoint was trained for a "
                                  "different environment or policy");
        }
        params[i].copy_(t);
    }
    torch::serialize::InputArchive critic_ar;
    archive.read("critic", critic_ar);
    critic->load(critic_ar);
    return hash.toStringRef();
}

RunResult run_single_seed(const ExperimentSpec& spec, uint64_t seed) {
    spec.validate();
    RunResult result;
    result.seed = seed;
    result.run_dir = spec.output_dir + "/seed_" + std::to_string(seed);
    fs::create_directories(result.run_dir);

    ExperimentSpec snapshot = spec;
    snapshot.seeds = {seed};
    {
        std::ofstream out(result.run_dir + "/config.json");
        out << spec_to_json(snapshot).dump(2) << "\n";
    }
    {
        json manifest = {{"seed", seed},
                         {"env", spec.env},
                         {"policy", policy_kind_to_string(spec.policy)},
                         {"config_hash", spec_hash(snapshot)},
                         {"git_revision", git_revision()}};
        std::ofstream out(result.run_dir + "/manifest.json");
        out << manifest.dump(2) << "\n";
    }

    torch::manual_seed(seed);
    auto factory = make_env_factory(spec.env);
    auto probe = factory();
    auto policy = make_policy(spec, probe->obs_dim(), probe->space());
    Critic critic(probe->obs_dim());
    auto cfg = make_train_config(spec, seed);
    Trainer trainer(policy, critic, factory, cfg);

    const std::string hash = spec_hash(snapshot);
    std::vector<MetricsRow> rows;
    write_metrics_csv(result.run_dir + "/metrics.csv", rows);
    double best = -std::numeric_limits<double>::infinity();
    auto on_metrics = [&](const MetricsRow& row) {
        rows.push_back(row);
        write_metrics_csv(result.run_dir + "/metrics.csv", rows);
        if (row.mean_return >= best) {
            best = row.mean_return;
            save_checkpoint(result.run_dir + "/checkpoint_best.pt", *policy, critic,
                            hash, &trainer);
        }
    };
    try {
        result.train = trainer.train(on_metrics);
    } catch (const Error& e) {
        result.aborted = true;
        result.abort_reason = e.what();
    }
    save_checkpoint(result.run_dir + "/checkpoint_final.pt", *policy, critic, hash,
                    &trainer);
    if (result.aborted) {
        std::ofstream out(result.run_dir + "/abort.txt");
        out << result.abort_reason << "\n";
    }
    return result;
}

std::vector<RunResult> run_experiment(const ExperimentSpec& spec) {
    spec.validate();
    std::vector<RunResult> results;
    for (uint64_t seed : spec.seeds) results.push_back(run_single_seed(spec, seed));
    return results;
}

EvalSummary evaluate_checkpoint(const ExperimentSpec& spec,
                                const std::string& checkpoint_path,
                                int64_t n_episodes, uint64_t eval_seed,
                                int64_t n_probe_samples) {
    if (n_episodes < 1) throw ValidationError("n_episodes must be positive");
    auto factory = make_env_factory(spec.env);
    auto probe = factory();
    torch::manual_seed(eval_seed);
    auto policy = make_policy(spec, probe->obs_dim(), probe->space());
    Critic critic(probe->obs_dim());
    load_checkpoint(checkpoint_path, *policy, critic);

    EvalSummary summary;
    summary.n_episodes = n_episodes;
    torch::NoGradGuard ng;
    std::vector<double> returns;
    for (int64_t i = 0; i < n_episodes; ++i) {
        auto env = factory();
        auto gen = at::detail::createCPUGenerator(eval_seed + i);
        auto obs = env->reset(eval_seed + i);
        double total = 0.0;
        bool done = false;
        while (!done) {
            auto batch = rejection_sample(*policy, obs, env->oracle(), spec.train.S,
                                          gen, spec.train.max_retries);
            auto res = env->step(batch.chosen);
            total += res.reward;
            obs = res.obs;
            done = res.done;
        }
        returns.push_back(total);
    }
    double mean = 0;
    for (double r : returns) mean += r;
    mean /= static_cast<double>(returns.size());
    double var = 0;
    for (double r : returns) var += (r - mean) * (r - mean);
    summary.mean_return = mean;
    summary.std_return = std::sqrt(var / static_cast<double>(returns.size()));

    // probe-state histogram at a fresh initial state
    auto env = factory();
    auto gen = at::detail::createCPUGenerator(eval_seed + 7777);
    auto obs = env->reset(eval_seed);
    auto raw = policy->sample_batch(obs, n_probe_samples, gen);
    int64_t raw_valid = 0;
    for (const auto& a : raw) {
        if (env->oracle().is_valid(a)) ++raw_valid;
    }
    summary.raw_valid_ratio =
        static_cast<double>(raw_valid) / static_cast<double>(n_probe_samples);

    std::map<Action, int64_t> hist;
    int64_t executed_valid = 0;
    for (int64_t i = 0; i < n_probe_samples; ++i) {
        auto batch = rejection_sample(*policy, obs, env->oracle(), spec.train.S, gen,
                                      spec.train.max_retries);
        hist[batch.chosen] += 1;
        if (env->oracle().is_valid(batch.chosen)) ++executed_valid;
    }
    summary.executed_valid_ratio =
        static_cast<double>(executed_valid) / static_cast<double>(n_probe_samples);
    summary.histogram.assign(hist.begin(), hist.end());
    std::sort(summary.histogram.begin(), summary.histogram.end(),
              [](const auto& a, const auto& b) {
                  return a.second != b.second ? a.second > b.second : a.first < b.first;
              });
    return summary;
}

void write_plot(const std::vector<CurveGroup>& groups, const std::string& x_axis,
                const std::string& metric, const std::string& out_prefix) {
    if (groups.empty()) throw ValidationError("plot needs at least one run group");
    if (x_axis != "env_steps" && x_axis != "wall_clock_s") {
        throw ValidationError("x_axis must be env_steps or wall_clock_s");
    }
    std::vector<AggregatedCurve> curves;
    for (const auto& g : groups) curves.push_back(aggregate_group(g, x_axis, metric));

    std::ofstream tidy(out_prefix + ".csv");
    if (!tidy) throw ValidationError("cannot write " + out_prefix + ".csv");
    tidy << "label,run_dir," << x_axis << "," << metric << "\n";
    for (const auto& c : curves) {
        for (const auto& [dir, pts] : c.raw) {
            for (const auto& [x, y] : pts) {
                tidy << c.label << "," << dir << "," << fmt_double(x) << ","
                     << fmt_double(y) << "\n";
            }
        }
    }
    write_svg(curves, x_axis, metric, out_prefix + ".svg");
}

ExperimentSpec ablation_variant(const std::string& name, const ExperimentSpec& base,
                                std::string* changed_key_out) {
    ExperimentSpec variant = base;
    if (name == "gradient_correction") {
        if (!base.train.use_correction) {
            throw ValidationError("gradient_correction ablation needs a base spec "
                                  "with the correction enabled");
        }
        variant.train.use_correction = false;
    } else if (name == "sandwich") {
        if (base.policy != PolicyKind::Flow) {
            throw ValidationError("sandwich ablation requires the flow policy");
        }
        if (base.elbo_only) {
            throw ValidationError("sandwich ablation needs a base spec using the "
                                  "sandwich estimator");
        }
        variant.elbo_only = true;
    } else if (name == "posterior_type") {
        if (base.policy != PolicyKind::Flow) {
            throw ValidationError("posterior_type ablation requires the flow policy");
        }
        if (base.flow.posterior_mode != PosteriorMode::Flow) {
            throw ValidationError("posterior_type ablation needs a flow posterior base");
        }
        variant.flow.posterior_mode = PosteriorMode::Gaussian;
    } else {
        throw ValidationError("unknown ablation '" + name +
                              "'; expected gradient_correction, sandwich, or "
                              "posterior_type");
    }
    std::vector<std::string> diff;
    json_diff(spec_to_json(base), spec_to_json(variant), "", diff);
    if (diff.size() != 1) throw ContractViolation("ablation pair diff is not one key");
    if (changed_key_out) *changed_key_out = diff[0];
    return variant;
}

AblationResult run_ablation(const std::string& name, const ExperimentSpec& base) {
    base.validate();
    AblationResult result;
    result.name = name;
    auto variant = ablation_variant(name, base, &result.changed_key);

    ExperimentSpec base_arm = base;
    base_arm.output_dir = base.output_dir + "/" + name + "/full";
    ExperimentSpec variant_arm = variant;
    variant_arm.output_dir = base.output_dir + "/" + name + "/ablated";
    result.base_runs = run_experiment(base_arm);
    result.variant_runs = run_experiment(variant_arm);

    CurveGroup base_group{"full", {}};
    for (const auto& r : result.base_runs) base_group.run_dirs.push_back(r.run_dir);
    CurveGroup variant_group{name + "_off", {}};
    for (const auto& r : result.variant_runs) {
        variant_group.run_dirs.push_back(r.run_dir);
    }
    const std::string prefix = base.output_dir + "/" + name + "/";
    write_plot({base_group, variant_group}, "env_steps", "mean_return",
               prefix + "return");
    write_plot({base_group, variant_group}, "env_steps", "valid_fraction_mean",
               prefix + "valid_fraction");

    json report = {{"name", name},
                   {"changed_key", result.changed_key},
                   {"base_dirs", base_group.run_dirs},
                   {"variant_dirs", variant_group.run_dirs}};
    json base_finals = json::array(), variant_finals = json::array();
    for (const auto& r : result.base_runs) {
        base_finals.push_back(r.aborted ? json(nullptr) : json(r.train.final_return));
    }
    for (const auto& r : result.variant_runs) {
        variant_finals.push_back(r.aborted ? json(nullptr) : json(r.train.final_return));
    }
    report["base_final_returns"] = base_finals;
    report["variant_final_returns"] = variant_finals;
    result.report_path = prefix + "report.json";
    std::ofstream out(result.report_path);
    out << report.dump(2) << "\n";
    return result;
}

}  // namespace flowiar
