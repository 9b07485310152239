#pragma once

// Experiment orchestration: flat key=value run configs, deterministic run
// execution, grid search by area under the online accuracy curve, CSV and
// plot-data emission, the utility-quality scenario, and the update-time
// benchmark.  Everything an emitted byte depends on is derived from
// (config, seed); wall-clock timings are the sole exception.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "upgd/metrics.hpp"
#include "upgd/network.hpp"
#include "upgd/optim.hpp"
#include "upgd/streams.hpp"
#include "upgd/utility.hpp"

namespace upgd {

class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};
class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class Problem { ToyInputShift, ToySignFlip, Probe, PermutedInput, PermutedLabel, Stationary };

inline const char* problem_name(Problem p) {
    switch (p) {
        case Problem::ToyInputShift: return "toy_input_shift";
        case Problem::ToySignFlip: return "toy_sign_flip";
        case Problem::Probe: return "probe";
        case Problem::PermutedInput: return "permuted_input";
        case Problem::PermutedLabel: return "permuted_label";
        case Problem::Stationary: return "stationary";
    }
    return "?";
}

inline Problem problem_from_string(const std::string& s) {
    for (Problem p : {Problem::ToyInputShift, Problem::ToySignFlip, Problem::Probe,
                      Problem::PermutedInput, Problem::PermutedLabel, Problem::Stationary})
        if (s == problem_name(p)) return p;
    throw ConfigError("unknown problem '" + s + "'");
}

inline bool is_classification(Problem p) {
    return p == Problem::PermutedInput || p == Problem::PermutedLabel || p == Problem::Stationary;
}

inline bool needs_dataset(Problem p) { return is_classification(p); }

// Marks "derive from the problem" for keys with problem-dependent defaults.
inline constexpr uint64_t kAutoPeriod = ~0ull;

struct RunConfig {
    Problem problem = Problem::Stationary;
    Method method = Method::SGD;
    uint64_t total_steps = 0;
    uint64_t period = kAutoPeriod;
    uint64_t window = 0;  // 0: resolved from the problem at finalize time
    uint64_t seeds = 1;
    std::string run_id;  // empty: resolved to method-problem
    std::string out = "out.csv";
    std::string data_dir = "data";
    std::string images = "train-images-idx3-ubyte";
    std::string labels = "train-labels-idx1-ubyte";
    std::vector<size_t> hidden_units;
    Act activation = Act::ReLU;
    HyperParams hp;
    UtilityOrder order = UtilityOrder::First;
    Granularity granularity = Granularity::Weight;
    Scaling scaling = Scaling::Global;
    bool protecting = true;
    bool weight_decay = true;
    bool perturbation = true;
    bool utility_gating = true;
    uint64_t eval_every = 10;
    uint64_t bench_reps = 50;
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    double d = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size())
        throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    return d;
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
    if (v.empty() || v[0] == '-')
        throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
    char* end = nullptr;
    uint64_t n = std::strtoull(v.c_str(), &end, 10);
    if (end != v.c_str() + v.size())
        throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
    return n;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

inline std::string fmt_double(double d) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", d);
    return buf;
}

inline std::string fmt_g10(double d) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", d);
    return buf;
}

inline const char* act_name(Act a) {
    switch (a) {
        case Act::Identity: return "identity";
        case Act::ReLU: return "relu";
        case Act::LeakyReLU: return "leaky_relu";
        case Act::Tanh: return "tanh";
        case Act::SoftmaxOutput: return "softmax";
    }
    return "?";
}

inline Act act_from_string(const std::string& key, const std::string& v) {
    for (Act a : {Act::Identity, Act::ReLU, Act::LeakyReLU, Act::Tanh})
        if (v == act_name(a)) return a;
    throw ConfigError("key '" + key + "': unknown activation '" + v + "'");
}

} // namespace detail

inline const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = {
        "problem",      "method",     "total_steps", "period",       "window",
        "seeds",        "run_id",     "out",         "data_dir",     "images",
        "labels",       "hidden_units", "activation", "alpha",       "sigma",
        "lambda",       "beta_u",     "beta1",       "beta2",        "eps_adam",
        "kappa",        "beta_i",     "beta_w",      "utility_order", "granularity",
        "scaling",      "protecting", "weight_decay", "perturbation", "utility_gating",
        "eval_every",   "bench_reps"};
    return keys;
}

inline void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    using namespace detail;
    if (key == "problem") {
        cfg.problem = problem_from_string(value);
    } else if (key == "method") {
        try {
            cfg.method = method_from_string(value);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    } else if (key == "total_steps") {
        cfg.total_steps = parse_u64(key, value);
    } else if (key == "period") {
        cfg.period = parse_u64(key, value);
    } else if (key == "window") {
        cfg.window = parse_u64(key, value);
    } else if (key == "seeds") {
        cfg.seeds = parse_u64(key, value);
    } else if (key == "run_id") {
        cfg.run_id = value;
    } else if (key == "out") {
        cfg.out = value;
    } else if (key == "data_dir") {
        cfg.data_dir = value;
    } else if (key == "images") {
        cfg.images = value;
    } else if (key == "labels") {
        cfg.labels = value;
    } else if (key == "hidden_units") {
        cfg.hidden_units.clear();
        std::string v = value;
        while (!v.empty()) {
            size_t comma = v.find(',');
            std::string tok = trim(v.substr(0, comma));
            if (!tok.empty()) {
                uint64_t n = parse_u64(key, tok);
                if (n == 0) throw ConfigError("key 'hidden_units': widths must be positive");
                cfg.hidden_units.push_back(size_t(n));
            }
            if (comma == std::string::npos) break;
            v = v.substr(comma + 1);
        }
    } else if (key == "activation") {
        cfg.activation = act_from_string(key, value);
    } else if (key == "alpha") {
        cfg.hp.alpha = parse_double(key, value);
    } else if (key == "sigma") {
        cfg.hp.sigma = parse_double(key, value);
    } else if (key == "lambda") {
        cfg.hp.lambda = parse_double(key, value);
    } else if (key == "beta_u") {
        cfg.hp.beta_u = parse_double(key, value);
    } else if (key == "beta1") {
        cfg.hp.beta1 = parse_double(key, value);
    } else if (key == "beta2") {
        cfg.hp.beta2 = parse_double(key, value);
    } else if (key == "eps_adam") {
        cfg.hp.eps_adam = parse_double(key, value);
    } else if (key == "kappa") {
        cfg.hp.kappa = parse_double(key, value);
    } else if (key == "beta_i") {
        cfg.hp.beta_i = parse_double(key, value);
    } else if (key == "beta_w") {
        cfg.hp.beta_w = parse_double(key, value);
    } else if (key == "utility_order") {
        if (value == "first") cfg.order = UtilityOrder::First;
        else if (value == "second") cfg.order = UtilityOrder::Second;
        else throw ConfigError("key 'utility_order': expected first or second, got '" + value + "'");
    } else if (key == "granularity") {
        if (value == "weight") cfg.granularity = Granularity::Weight;
        else if (value == "feature") cfg.granularity = Granularity::Feature;
        else throw ConfigError("key 'granularity': expected weight or feature, got '" + value + "'");
    } else if (key == "scaling") {
        if (value == "global") cfg.scaling = Scaling::Global;
        else if (value == "local") cfg.scaling = Scaling::Local;
        else throw ConfigError("key 'scaling': expected global or local, got '" + value + "'");
    } else if (key == "protecting") {
        cfg.protecting = parse_bool(key, value);
    } else if (key == "weight_decay") {
        cfg.weight_decay = parse_bool(key, value);
    } else if (key == "perturbation") {
        cfg.perturbation = parse_bool(key, value);
    } else if (key == "utility_gating") {
        cfg.utility_gating = parse_bool(key, value);
    } else if (key == "eval_every") {
        cfg.eval_every = parse_u64(key, value);
    } else if (key == "bench_reps") {
        cfg.bench_reps = parse_u64(key, value);
    } else {
        throw ConfigError("unknown key '" + key + "'");
    }
}

inline std::string get_config_key(const RunConfig& cfg, const std::string& key) {
    using namespace detail;
    if (key == "problem") return problem_name(cfg.problem);
    if (key == "method") return method_name(cfg.method);
    if (key == "total_steps") return std::to_string(cfg.total_steps);
    if (key == "period") return std::to_string(cfg.period);
    if (key == "window") return std::to_string(cfg.window);
    if (key == "seeds") return std::to_string(cfg.seeds);
    if (key == "run_id") return cfg.run_id;
    if (key == "out") return cfg.out;
    if (key == "data_dir") return cfg.data_dir;
    if (key == "images") return cfg.images;
    if (key == "labels") return cfg.labels;
    if (key == "hidden_units") {
        std::string s;
        for (size_t i = 0; i < cfg.hidden_units.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(cfg.hidden_units[i]);
        }
        return s;
    }
    if (key == "activation") return act_name(cfg.activation);
    if (key == "alpha") return fmt_double(cfg.hp.alpha);
    if (key == "sigma") return fmt_double(cfg.hp.sigma);
    if (key == "lambda") return fmt_double(cfg.hp.lambda);
    if (key == "beta_u") return fmt_double(cfg.hp.beta_u);
    if (key == "beta1") return fmt_double(cfg.hp.beta1);
    if (key == "beta2") return fmt_double(cfg.hp.beta2);
    if (key == "eps_adam") return fmt_double(cfg.hp.eps_adam);
    if (key == "kappa") return fmt_double(cfg.hp.kappa);
    if (key == "beta_i") return fmt_double(cfg.hp.beta_i);
    if (key == "beta_w") return fmt_double(cfg.hp.beta_w);
    if (key == "utility_order") return cfg.order == UtilityOrder::First ? "first" : "second";
    if (key == "granularity") return cfg.granularity == Granularity::Weight ? "weight" : "feature";
    if (key == "scaling") return cfg.scaling == Scaling::Global ? "global" : "local";
    if (key == "protecting") return cfg.protecting ? "true" : "false";
    if (key == "weight_decay") return cfg.weight_decay ? "true" : "false";
    if (key == "perturbation") return cfg.perturbation ? "true" : "false";
    if (key == "utility_gating") return cfg.utility_gating ? "true" : "false";
    if (key == "eval_every") return std::to_string(cfg.eval_every);
    if (key == "bench_reps") return std::to_string(cfg.bench_reps);
    throw ConfigError("unknown key '" + key + "'");
}

// Canonical form: every key on its own line, fixed order.  parse_config of
// this text reproduces the config exactly; grid-search ties compare it.
inline std::string serialize_config(const RunConfig& cfg) {
    std::string out;
    for (const std::string& k : config_keys()) out += k + " = " + get_config_key(cfg, k) + "\n";
    return out;
}

// Fills problem-dependent defaults and validates cross-field invariants.
// Idempotent: finalizing an already-finalized config changes nothing.
inline void finalize_config(RunConfig& cfg) {
    if (cfg.total_steps == 0) throw ConfigError("total_steps must be positive");
    if (cfg.period == kAutoPeriod) {
        switch (cfg.problem) {
            case Problem::PermutedInput: cfg.period = 5000; break;
            case Problem::PermutedLabel: cfg.period = 2500; break;
            default: cfg.period = 0; break;
        }
    }
    if ((cfg.problem == Problem::PermutedInput || cfg.problem == Problem::PermutedLabel) &&
        cfg.period == 0)
        throw ConfigError("period must be positive for permuted streams");
    if (cfg.window == 0) {
        switch (cfg.problem) {
            case Problem::ToyInputShift:
            case Problem::ToySignFlip:
                cfg.window = 2 * ToyRegressionStream::kTaskLength;
                break;
            case Problem::PermutedInput:
            case Problem::PermutedLabel:
                cfg.window = 2 * cfg.period;
                break;
            default:
                cfg.window = cfg.total_steps / 2;
                break;
        }
    }
    if (cfg.window == 0 || cfg.total_steps < 2 * cfg.window)
        throw ConfigError("total_steps must cover at least 2 metric windows (window = " +
                          std::to_string(cfg.window) + ")");
    if (cfg.run_id.empty())
        cfg.run_id = std::string(method_name(cfg.method)) + "-" + problem_name(cfg.problem);
    for (char c : cfg.run_id)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_'))
            throw ConfigError("run_id may contain only letters, digits, '-' and '_'");
    if (cfg.seeds == 0) throw ConfigError("seeds must be positive");
    if (cfg.eval_every == 0) throw ConfigError("eval_every must be positive");
    try {
        cfg.hp.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

struct ParsedConfig {
    RunConfig cfg;
    std::set<std::string> seen;
};

// One "key = value" pair per line; '#' starts a comment anywhere on a line.
inline ParsedConfig parse_config_lines(const std::string& text) {
    ParsedConfig pc;
    std::istringstream in(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        if (!pc.seen.insert(key).second)
            throw ConfigError("duplicate key '" + key + "'");
        set_config_key(pc.cfg, key, value);
    }
    return pc;
}

inline void check_required_keys(const std::set<std::string>& seen,
                                const std::set<std::string>& also_provided) {
    std::string missing;
    for (const char* k : {"problem", "method", "total_steps", "alpha"})
        if (!seen.count(k) && !also_provided.count(k)) {
            if (!missing.empty()) missing += ", ";
            missing += k;
        }
    if (!missing.empty()) throw ConfigError("missing required keys: " + missing);
}

inline RunConfig parse_config(const std::string& text) {
    ParsedConfig pc = parse_config_lines(text);
    check_required_keys(pc.seen, {});
    finalize_config(pc.cfg);
    return pc.cfg;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Precedence: command-line flag, then UPGD_DATA_DIR, then the config value.
inline void resolve_data_dir(RunConfig& cfg, const std::string& cli_value) {
    if (!cli_value.empty()) {
        cfg.data_dir = cli_value;
        return;
    }
    if (const char* env = std::getenv("UPGD_DATA_DIR"); env && *env) cfg.data_dir = env;
}

// ---- run execution -----------------------------------------------------

inline Dataset load_run_dataset(const RunConfig& cfg) {
    return load_idx(cfg.data_dir + "/" + cfg.images, cfg.data_dir + "/" + cfg.labels);
}

inline size_t problem_input_dim(const RunConfig& cfg, const Dataset* ds) {
    switch (cfg.problem) {
        case Problem::ToyInputShift:
        case Problem::ToySignFlip: return 16;
        case Problem::Probe: return 5;
        default: return ds->input_dim;
    }
}

inline Network build_run_network(const RunConfig& cfg, const Dataset* ds, uint64_t net_seed) {
    std::vector<LayerSpec> specs;
    for (size_t h : cfg.hidden_units) specs.push_back({h, cfg.activation});
    if (is_classification(cfg.problem)) {
        specs.push_back({ds->class_count, Act::SoftmaxOutput});
        return build_network(specs, problem_input_dim(cfg, ds), Loss::CrossEntropy, net_seed);
    }
    specs.push_back({1, Act::Identity});
    return build_network(specs, problem_input_dim(cfg, ds), Loss::SquaredError, net_seed);
}

inline std::unique_ptr<Stream> build_stream(const RunConfig& cfg, const Dataset* ds,
                                            uint64_t stream_seed) {
    switch (cfg.problem) {
        case Problem::ToyInputShift:
            return std::make_unique<ToyRegressionStream>(ToyVariant::InputIndexShift, stream_seed);
        case Problem::ToySignFlip:
            return std::make_unique<ToyRegressionStream>(ToyVariant::OutputSignFlip, stream_seed);
        case Problem::Probe: return std::make_unique<UtilityProbeStream>(stream_seed);
        case Problem::PermutedInput:
            return std::make_unique<PermutedInputStream>(*ds, cfg.period, stream_seed);
        case Problem::PermutedLabel:
            return std::make_unique<PermutedLabelStream>(*ds, cfg.period, stream_seed);
        case Problem::Stationary: return std::make_unique<StationaryStream>(*ds, stream_seed);
    }
    throw ConfigError("unhandled problem kind");
}

inline OptimizerConfig optimizer_config(const RunConfig& cfg) {
    OptimizerConfig oc;
    oc.method = cfg.method;
    oc.hp = cfg.hp;
    oc.order = cfg.order;
    oc.granularity = cfg.granularity;
    oc.scaling = cfg.scaling;
    oc.protecting = cfg.protecting;
    oc.weight_decay = cfg.weight_decay;
    oc.perturbation = cfg.perturbation;
    oc.utility_gating = cfg.utility_gating;
    return oc;
}

inline uint64_t weight_checksum(const Network& net) {
    uint64_t h = 1469598103934665603ull;
    for (const Layer& layer : net.layers) {
        const unsigned char* p = reinterpret_cast<const unsigned char*>(layer.W.data());
        size_t n = layer.W.size() * sizeof(double);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    }
    return h;
}

struct RunRecord {
    std::string run_id;
    uint64_t seed = 0;
    uint64_t steps = 0;
    std::vector<MetricsWindow> windows;
    double forgetting = std::numeric_limits<double>::quiet_NaN();
    double loss_of_plasticity = std::numeric_limits<double>::quiet_NaN();
    double per_update_ms = 0.0;
    uint64_t checksum = 0;
    uint64_t eta_guard_count = 0;
};

// Sub-streams of the run seed: 1 network init, 2 stream, 3 perturbations,
// 4 the random-ordering utility baseline.
inline RunRecord run_experiment(const RunConfig& cfg, uint64_t seed,
                                const Dataset* preloaded = nullptr) {
    Dataset local;
    const Dataset* ds = nullptr;
    if (needs_dataset(cfg.problem)) {
        if (preloaded) {
            ds = preloaded;
        } else {
            local = load_run_dataset(cfg);
            ds = &local;
        }
    }
    Network net = build_run_network(cfg, ds, derive_seed(seed, 1));
    std::unique_ptr<Stream> stream = build_stream(cfg, ds, derive_seed(seed, 2));
    Optimizer opt(net, optimizer_config(cfg), derive_seed(seed, 3));
    const bool second = opt.wants_second_order();
    const bool gates = opt.wants_gate_derivatives();
    const bool classif = is_classification(cfg.problem);

    RunRecord rec;
    rec.run_id = cfg.run_id;
    rec.seed = seed;
    rec.steps = cfg.total_steps;

    StreamSample s;
    ForwardCache before, after;
    DerivativeBundle b;
    WindowAccumulator acc;
    auto t0 = std::chrono::steady_clock::now();
    for (uint64_t t = 0; t < cfg.total_steps; ++t) {
        stream->next(s);
        forward(net, s.x.data(), before);
        double lb = loss(before.yhat(), s.y, net.loss_kind);
        int correct = classif ? online_accuracy(before.yhat(), s.y) : 0;
        if (gates) gate_backward(net, before, s.y, b);
        else backward(net, before, s.y, b, second);
        DiagRecord dg = diagnostics(net, b, before);
        try {
            opt.step(net, b);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) +
                                   " | diagnostics at failure: grad_l2=" + detail::fmt_g10(dg.grad_l2) +
                                   " w_l2=" + detail::fmt_g10(dg.w_l2) +
                                   " loss=" + detail::fmt_g10(lb),
                               e.step_index, e.layer_index);
        }
        forward(net, s.x.data(), after);
        double la = loss(after.yhat(), s.y, net.loss_kind);
        // min() caps the rare +inf cross-entropy loss so plasticity stays defined
        double p = sample_plasticity(std::min(lb, 1e308), std::min(la, 1e308));
        acc.add(correct, std::min(lb, 1e308), p, dg);
        if (acc.count() == cfg.window) {
            rec.windows.push_back(acc.close(rec.windows.size()));
            acc.reset();
        }
    }
    if (acc.count() > 0) rec.windows.push_back(acc.close(rec.windows.size()));
    auto t1 = std::chrono::steady_clock::now();
    rec.per_update_ms =
        std::chrono::duration<double, std::milli>(t1 - t0).count() / double(cfg.total_steps);

    if (rec.windows.size() >= 2) rec.forgetting = overall_forgetting(rec.windows);
    // The plasticity summary reads the back half of the run, scaled from the
    // reference protocol's 0.5M-of-1M starting point.
    size_t half = rec.windows.size() / 2;
    if (rec.windows.size() - half >= 2)
        rec.loss_of_plasticity = overall_loss_of_plasticity(std::vector<MetricsWindow>(
            rec.windows.begin() + half, rec.windows.end()));
    rec.checksum = weight_checksum(net);
    rec.eta_guard_count = opt.eta_guard_count();
    return rec;
}

// ---- CSV ---------------------------------------------------------------

inline constexpr const char* kCsvHeader =
    "run_id,seed,window,samples,accuracy,loss,plasticity,zero_act_frac,grad_l0,grad_l1,grad_l2,"
    "w_l1,w_l2";

inline void emit_csv(const std::vector<RunRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary);  // binary: byte-identical across platforms
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << kCsvHeader << "\n";
    for (const RunRecord& r : records) {
        for (const MetricsWindow& w : r.windows) {
            out << r.run_id << ',' << r.seed << ',' << w.index << ',' << w.samples << ','
                << detail::fmt_g10(w.accuracy) << ',' << detail::fmt_g10(w.loss) << ','
                << detail::fmt_g10(w.plasticity) << ',' << detail::fmt_g10(w.diag.zero_act_frac)
                << ',' << detail::fmt_g10(w.diag.grad_l0) << ',' << detail::fmt_g10(w.diag.grad_l1)
                << ',' << detail::fmt_g10(w.diag.grad_l2) << ',' << detail::fmt_g10(w.diag.w_l1)
                << ',' << detail::fmt_g10(w.diag.w_l2) << "\n";
        }
    }
    out.flush();
    if (!out) throw IoError("write to '" + path + "' failed");
}

// Averages per-(run_id, window) across seeds: the per-method series that
// plotting tools consume.
inline void plot_data(const std::string& csv_path, const std::string& out_path) {
    std::string text = read_text_file(csv_path);
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || detail::trim(line) != kCsvHeader)
        throw IoError("'" + csv_path + "': unrecognized CSV header");
    struct Agg {
        uint64_t runs = 0;
        double acc = 0, loss = 0, plast = 0;
    };
    std::map<std::pair<std::string, uint64_t>, Agg> groups;
    size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ls(line);
        std::string tok;
        while (std::getline(ls, tok, ',')) cols.push_back(tok);
        if (cols.size() != 13)
            throw IoError("'" + csv_path + "' line " + std::to_string(lineno) +
                          ": expected 13 columns");
        Agg& a = groups[{cols[0], detail::parse_u64("window", cols[2])}];
        ++a.runs;
        a.acc += detail::parse_double("accuracy", cols[4]);
        a.loss += detail::parse_double("loss", cols[5]);
        a.plast += detail::parse_double("plasticity", cols[6]);
    }
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + out_path + "' for writing");
    out << "run_id,window,runs,accuracy,loss,plasticity\n";
    for (const auto& [key, a] : groups) {
        double n = double(a.runs);
        out << key.first << ',' << key.second << ',' << a.runs << ','
            << detail::fmt_g10(a.acc / n) << ',' << detail::fmt_g10(a.loss / n) << ','
            << detail::fmt_g10(a.plast / n) << "\n";
    }
    out.flush();
    if (!out) throw IoError("write to '" + out_path + "' failed");
}

// ---- grid search -------------------------------------------------------

inline double accuracy_auc(const std::vector<MetricsWindow>& windows) {
    if (windows.empty()) return 0.0;
    if (windows.size() == 1) return windows[0].accuracy;
    double auc = 0.0;
    for (size_t k = 0; k + 1 < windows.size(); ++k)
        auc += 0.5 * (windows[k].accuracy + windows[k + 1].accuracy);
    return auc;
}

struct GridSpace {
    std::vector<std::pair<std::string, std::vector<std::string>>> axes;
};

// Base config plus "grid.KEY = v1, v2, ..." lines defining the search axes.
inline std::pair<ParsedConfig, GridSpace> parse_grid_config(const std::string& text) {
    std::string base_text;
    GridSpace space;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        size_t hash = line.find('#');
        std::string stripped = detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (stripped.rfind("grid.", 0) == 0) {
            size_t eq = stripped.find('=');
            if (eq == std::string::npos) throw ConfigError("grid line needs 'grid.key = values'");
            std::string key = detail::trim(stripped.substr(5, eq - 5));
            std::vector<std::string> values;
            std::string rest = stripped.substr(eq + 1);
            std::stringstream vs(rest);
            std::string tok;
            while (std::getline(vs, tok, ',')) {
                tok = detail::trim(tok);
                if (!tok.empty()) values.push_back(tok);
            }
            if (key.empty() || values.empty())
                throw ConfigError("grid axis '" + key + "' has no values");
            space.axes.emplace_back(key, std::move(values));
        } else {
            base_text += line + "\n";
        }
    }
    ParsedConfig base = parse_config_lines(base_text);
    std::set<std::string> from_grid;
    for (auto& [k, v] : space.axes) from_grid.insert(k);
    check_required_keys(base.seen, from_grid);
    return {base, space};
}

struct GridPoint {
    std::vector<std::string> values;  // one per axis, axis order
    double mean_auc = 0.0;
    std::string serialized;
};

struct GridResult {
    RunConfig best;
    double best_auc = 0.0;
    std::vector<GridPoint> table;
};

inline GridResult grid_search(const RunConfig& base, const GridSpace& space,
                              const Dataset* preloaded = nullptr) {
    if (space.axes.empty()) throw ConfigError("grid space is empty");
    for (const auto& [k, vals] : space.axes)
        if (vals.empty()) throw ConfigError("grid axis '" + k + "' has no values");

    Dataset local;
    const Dataset* ds = preloaded;
    bool dataset_varies = false;
    for (const auto& [k, vals] : space.axes)
        if (k == "problem" || k == "images" || k == "labels" || k == "data_dir")
            dataset_varies = true;

    GridResult res;
    bool have_best = false;
    std::string best_serial;
    std::vector<size_t> idx(space.axes.size(), 0);
    while (true) {
        RunConfig cfg = base;
        GridPoint pt;
        for (size_t a = 0; a < space.axes.size(); ++a) {
            set_config_key(cfg, space.axes[a].first, space.axes[a].second[idx[a]]);
            pt.values.push_back(space.axes[a].second[idx[a]]);
        }
        finalize_config(cfg);
        const Dataset* use = nullptr;
        if (needs_dataset(cfg.problem)) {
            if (dataset_varies) {
                local = load_run_dataset(cfg);
                use = &local;
            } else {
                if (!ds) {
                    local = load_run_dataset(cfg);
                    ds = &local;
                }
                use = ds;
            }
        }
        double sum = 0.0;
        for (uint64_t s = 0; s < cfg.seeds; ++s)
            sum += accuracy_auc(run_experiment(cfg, s, use).windows);
        pt.mean_auc = sum / double(cfg.seeds);
        pt.serialized = serialize_config(cfg);
        if (!have_best || pt.mean_auc > res.best_auc ||
            (pt.mean_auc == res.best_auc && pt.serialized < best_serial)) {
            have_best = true;
            res.best = cfg;
            res.best_auc = pt.mean_auc;
            best_serial = pt.serialized;
        }
        res.table.push_back(std::move(pt));
        size_t a = space.axes.size();
        while (a > 0) {
            --a;
            if (++idx[a] < space.axes[a].second.size()) break;
            idx[a] = 0;
            if (a == 0) return res;
        }
    }
}

// ---- utility-quality scenario ------------------------------------------

struct UtilityQualityRow {
    uint64_t step = 0;
    double first_order = 0, second_order = 0, squared_grad = 0, weight_mag = 0, random_order = 0;
};

struct UtilityQualityResult {
    std::vector<UtilityQualityRow> rows;
    UtilityQualityRow mean_full;          // NaN rows skipped per measure
    UtilityQualityRow mean_last_quarter;  // over the final quarter of rows
};

namespace detail {

inline void stack_matrices(const std::vector<Matrix>& ms, std::vector<double>& out) {
    out.clear();
    for (const Matrix& m : ms) out.insert(out.end(), m.data(), m.data() + m.size());
}

inline double spearman_or_nan(const std::vector<double>& a, const std::vector<double>& b) {
    try {
        return spearman(a, b);
    } catch (const std::domain_error&) {
        return std::numeric_limits<double>::quiet_NaN();
    }
}

inline double mean_finite(const std::vector<UtilityQualityRow>& rows, size_t from,
                          double UtilityQualityRow::*field) {
    double sum = 0.0;
    size_t n = 0;
    for (size_t i = from; i < rows.size(); ++i) {
        double v = rows[i].*field;
        if (std::isfinite(v)) {
            sum += v;
            ++n;
        }
    }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / double(n);
}

} // namespace detail

// Rank agreement between the counterfactual weight utility and each cheap
// stand-in, sampled every eval_every steps of an SGD run on the probe stream.
inline UtilityQualityResult utility_quality_run(const RunConfig& cfg, uint64_t seed) {
    if (cfg.problem != Problem::Probe)
        throw ConfigError("utility-quality requires problem = probe");
    if (cfg.method != Method::SGD)
        throw ConfigError("utility-quality requires method = sgd");
    RunConfig rc = cfg;
    if (rc.hidden_units.empty()) rc.hidden_units = {50};
    Network net = build_run_network(rc, nullptr, derive_seed(seed, 1));
    std::unique_ptr<Stream> stream = build_stream(rc, nullptr, derive_seed(seed, 2));
    Optimizer opt(net, optimizer_config(rc), derive_seed(seed, 3));
    Rng random_order(derive_seed(seed, 4));

    UtilityQualityResult res;
    StreamSample s;
    ForwardCache cache;
    DerivativeBundle b;
    std::vector<double> truth, meas;
    for (uint64_t t = 0; t < rc.total_steps; ++t) {
        stream->next(s);
        forward(net, s.x.data(), cache);
        backward(net, cache, s.y, b, true);
        if (t % rc.eval_every == 0) {
            UtilityQualityRow row;
            row.step = t;
            detail::stack_matrices(true_weight_utility(net, s.x, s.y), truth);

            auto first = approx_weight_utility(b, net, UtilityOrder::First);
            auto second = approx_weight_utility(b, net, UtilityOrder::Second);
            if (rc.scaling == Scaling::Local) {
                // Row-normalized comparison: local scaling re-ranks entries
                // across rows, unlike the monotone global squash.
                for (auto* u : {&first, &second})
                    for (Matrix& m : *u) {
                        Matrix scaled(m.rows(), m.cols());
                        scale_local_weight(m, scaled);
                        m = scaled;
                    }
            }
            detail::stack_matrices(first, meas);
            row.first_order = detail::spearman_or_nan(truth, meas);
            detail::stack_matrices(second, meas);
            row.second_order = detail::spearman_or_nan(truth, meas);

            meas.clear();
            for (size_t l = 0; l < net.depth(); ++l)
                for (size_t k = 0; k < b.F[l].size(); ++k) {
                    double g = b.F[l].data()[k];
                    meas.push_back(g * g);
                }
            row.squared_grad = detail::spearman_or_nan(truth, meas);

            meas.clear();
            for (size_t l = 0; l < net.depth(); ++l)
                for (size_t k = 0; k < net.layers[l].W.size(); ++k)
                    meas.push_back(std::fabs(net.layers[l].W.data()[k]));
            row.weight_mag = detail::spearman_or_nan(truth, meas);

            meas.resize(truth.size());
            for (double& v : meas) v = random_order.next_double();
            row.random_order = detail::spearman_or_nan(truth, meas);

            res.rows.push_back(row);
        }
        opt.step(net, b);
    }
    size_t q = res.rows.size() - res.rows.size() / 4;
    for (auto field : {&UtilityQualityRow::first_order, &UtilityQualityRow::second_order,
                       &UtilityQualityRow::squared_grad, &UtilityQualityRow::weight_mag,
                       &UtilityQualityRow::random_order}) {
        res.mean_full.*field = detail::mean_finite(res.rows, 0, field);
        res.mean_last_quarter.*field = detail::mean_finite(res.rows, q, field);
    }
    return res;
}

inline void emit_utility_quality_csv(const UtilityQualityResult& res, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "step,first_order,second_order,squared_grad,weight_mag,random_order\n";
    for (const UtilityQualityRow& r : res.rows)
        out << r.step << ',' << detail::fmt_g10(r.first_order) << ','
            << detail::fmt_g10(r.second_order) << ',' << detail::fmt_g10(r.squared_grad) << ','
            << detail::fmt_g10(r.weight_mag) << ',' << detail::fmt_g10(r.random_order) << "\n";
    out.flush();
    if (!out) throw IoError("write to '" + path + "' failed");
}

// ---- timing benchmark --------------------------------------------------

struct BenchResult {
    double mean_ms = 0.0;
    double stderr_ms = 0.0;
    uint64_t reps = 0;
};

// Times one full training update (forward, derivatives, optimizer step) on
// the 784 -> 1024 -> 512 -> 10 reference net.  Warm-up updates are excluded.
inline BenchResult bench_update_time(const RunConfig& cfg, uint64_t seed = 0) {
    if (cfg.bench_reps == 0) throw ConfigError("bench: repetitions must be positive");
    std::vector<LayerSpec> specs = {{1024, Act::ReLU}, {512, Act::ReLU}, {10, Act::SoftmaxOutput}};
    Network net = build_network(specs, 784, Loss::CrossEntropy, derive_seed(seed, 1));
    Optimizer opt(net, optimizer_config(cfg), derive_seed(seed, 3));
    const bool second = opt.wants_second_order();
    const bool gates = opt.wants_gate_derivatives();

    Rng rng(derive_seed(seed, 2));
    std::vector<double> x(784);
    for (double& v : x) v = rng.normal();
    std::vector<double> y(10, 0.0);
    y[size_t(rng.next_below(10))] = 1.0;

    ForwardCache cache;
    DerivativeBundle b;
    auto one_update = [&] {
        forward(net, x.data(), cache);
        if (gates) gate_backward(net, cache, y, b);
        else backward(net, cache, y, b, second);
        opt.step(net, b);
    };
    for (int i = 0; i < 3; ++i) one_update();

    BenchResult res;
    res.reps = cfg.bench_reps;
    std::vector<double> ms(cfg.bench_reps);
    for (uint64_t r = 0; r < cfg.bench_reps; ++r) {
        auto t0 = std::chrono::steady_clock::now();
        one_update();
        auto t1 = std::chrono::steady_clock::now();
        ms[r] = std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    double sum = 0.0;
    for (double v : ms) sum += v;
    res.mean_ms = sum / double(ms.size());
    if (ms.size() > 1) {
        double var = 0.0;
        for (double v : ms) var += (v - res.mean_ms) * (v - res.mean_ms);
        var /= double(ms.size() - 1);
        res.stderr_ms = std::sqrt(var / double(ms.size()));
    }
    return res;
}

} // namespace upgd
