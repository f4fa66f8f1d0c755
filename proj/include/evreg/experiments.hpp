#pragma once

// The two desk-scale experiments: cubic regression with an evidential head,
// and toy temporal grounding trained in two stages (masked-token warmup, then
// grounding + evidential objectives). Every run is a pure function of
// (config, seed); logs and artifacts are reproducible bit for bit.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evreg/autodiff.hpp"
#include "evreg/calibration.hpp"
#include "evreg/datagen.hpp"
#include "evreg/graph_attention.hpp"
#include "evreg/graph_losses.hpp"
#include "evreg/grounding.hpp"
#include "evreg/io.hpp"
#include "evreg/nn.hpp"
#include "evreg/regularizers.hpp"
#include "evreg/rng.hpp"

namespace evreg {

/// Configuration problems (bad keys, bad values) as opposed to runtime
/// failures; the CLI maps these to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class RegMode { None, Vanilla, Geom1, Geom2 };

inline RegMode parse_reg_mode(const std::string& s) {
    if (s == "none") return RegMode::None;
    if (s == "vanilla") return RegMode::Vanilla;
    if (s == "geom1") return RegMode::Geom1;
    if (s == "geom2") return RegMode::Geom2;
    throw ConfigError("config key 'reg': expected none|vanilla|geom1|geom2, got '" + s + "'");
}

inline const char* reg_mode_name(RegMode m) {
    switch (m) {
        case RegMode::None: return "none";
        case RegMode::Vanilla: return "vanilla";
        case RegMode::Geom1: return "geom1";
        case RegMode::Geom2: return "geom2";
    }
    return "none";
}

inline NormalizationMode parse_normalization(const std::string& s) {
    if (s == "standard") return NormalizationMode::StandardMinMax;
    if (s == "paper") return NormalizationMode::PaperMinMax;
    throw ConfigError("config key 'normalization': expected standard|paper, got '" + s + "'");
}

inline const char* normalization_name(NormalizationMode m) {
    return m == NormalizationMode::PaperMinMax ? "paper" : "standard";
}

struct RunConfig {
    std::string experiment;  // "cubic" | "grounding"
    std::uint64_t seed = 0;
    RegMode reg = RegMode::Geom1;
    double lambda_nll = 1.0;
    double lambda_geom = 1.0;
    double lambda_der = 1e-3;
    NormalizationMode normalization = NormalizationMode::StandardMinMax;
    std::size_t epochs = 0;  // 0 -> per-experiment default
    double lr = 1e-3;
    std::size_t scatter_every = 0;  // 0 -> epochs/4

    // cubic
    std::size_t n_train = 256, n_test = 512, hidden = 64;
    double noise_sigma = 3.0;

    // grounding
    std::size_t n_videos = 64, clips = 32, dim = 16, query_tokens = 8, vocab = 64;
    double mask_ratio = 0.125;
    std::size_t batch = 8, epochs_stage1 = 40;
    double tau = 0.07;
    std::size_t top_k = 4;
};

inline std::size_t effective_epochs(const RunConfig& c) {
    if (c.epochs > 0) return c.epochs;
    return c.experiment == "cubic" ? 500 : 60;
}

inline std::size_t effective_scatter_every(const RunConfig& c) {
    if (c.scatter_every > 0) return c.scatter_every;
    return std::max<std::size_t>(1, effective_epochs(c) / 4);
}

namespace exp_detail {

inline double parse_double_value(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': invalid number '" + value + "'");
    }
}

inline std::uint64_t parse_u64_value(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': invalid integer '" + value + "'");
    }
}

inline std::size_t parse_size_value(const std::string& key, const std::string& value) {
    return static_cast<std::size_t>(parse_u64_value(key, value));
}

inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

}  // namespace exp_detail

/// Parses the key=value run-config format: one pair per line, `#` comments,
/// blank lines ignored. Unknown keys, duplicate keys, malformed lines, and
/// missing required keys (`experiment`, `seed`) are all hard errors that name
/// the offending key.
inline RunConfig parse_run_config(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::size_t line_number = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t nl = text.find('\n', start);
        std::string line = text.substr(start, nl == std::string::npos ? nl : nl - start);
        start = nl == std::string::npos ? text.size() + 1 : nl + 1;
        ++line_number;
        line = exp_detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_number) +
                              ": expected key=value, got '" + line + "'");
        const std::string key = exp_detail::trim(line.substr(0, eq));
        const std::string value = exp_detail::trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(line_number) + ": empty key");
        if (!kv.emplace(key, value).second)
            throw ConfigError("duplicate config key: " + key);
    }

    RunConfig cfg;
    auto take = [&](const char* key) {
        auto it = kv.find(key);
        if (it == kv.end()) return std::pair<bool, std::string>{false, {}};
        std::pair<bool, std::string> out{true, it->second};
        kv.erase(it);
        return out;
    };

    if (auto [ok, v] = take("experiment"); ok) {
        if (v != "cubic" && v != "grounding")
            throw ConfigError("config key 'experiment': expected cubic|grounding, got '" + v +
                              "'");
        cfg.experiment = v;
    } else {
        throw ConfigError("missing required config key: experiment");
    }
    if (auto [ok, v] = take("seed"); ok)
        cfg.seed = exp_detail::parse_u64_value("seed", v);
    else
        throw ConfigError("missing required config key: seed");

    if (auto [ok, v] = take("reg"); ok) cfg.reg = parse_reg_mode(v);
    if (auto [ok, v] = take("lambda_nll"); ok)
        cfg.lambda_nll = exp_detail::parse_double_value("lambda_nll", v);
    if (auto [ok, v] = take("lambda_geom"); ok)
        cfg.lambda_geom = exp_detail::parse_double_value("lambda_geom", v);
    if (auto [ok, v] = take("lambda_der"); ok)
        cfg.lambda_der = exp_detail::parse_double_value("lambda_der", v);
    if (auto [ok, v] = take("normalization"); ok) cfg.normalization = parse_normalization(v);
    if (auto [ok, v] = take("epochs"); ok) cfg.epochs = exp_detail::parse_size_value("epochs", v);
    if (auto [ok, v] = take("lr"); ok) cfg.lr = exp_detail::parse_double_value("lr", v);
    if (auto [ok, v] = take("scatter_every"); ok)
        cfg.scatter_every = exp_detail::parse_size_value("scatter_every", v);

    if (auto [ok, v] = take("n_train"); ok)
        cfg.n_train = exp_detail::parse_size_value("n_train", v);
    if (auto [ok, v] = take("n_test"); ok) cfg.n_test = exp_detail::parse_size_value("n_test", v);
    if (auto [ok, v] = take("hidden"); ok) cfg.hidden = exp_detail::parse_size_value("hidden", v);
    if (auto [ok, v] = take("noise_sigma"); ok)
        cfg.noise_sigma = exp_detail::parse_double_value("noise_sigma", v);

    if (auto [ok, v] = take("n_videos"); ok)
        cfg.n_videos = exp_detail::parse_size_value("n_videos", v);
    if (auto [ok, v] = take("clips"); ok) cfg.clips = exp_detail::parse_size_value("clips", v);
    if (auto [ok, v] = take("dim"); ok) cfg.dim = exp_detail::parse_size_value("dim", v);
    if (auto [ok, v] = take("query_tokens"); ok)
        cfg.query_tokens = exp_detail::parse_size_value("query_tokens", v);
    if (auto [ok, v] = take("vocab"); ok) cfg.vocab = exp_detail::parse_size_value("vocab", v);
    if (auto [ok, v] = take("mask_ratio"); ok)
        cfg.mask_ratio = exp_detail::parse_double_value("mask_ratio", v);
    if (auto [ok, v] = take("batch"); ok) cfg.batch = exp_detail::parse_size_value("batch", v);
    if (auto [ok, v] = take("epochs_stage1"); ok)
        cfg.epochs_stage1 = exp_detail::parse_size_value("epochs_stage1", v);
    if (auto [ok, v] = take("tau"); ok) cfg.tau = exp_detail::parse_double_value("tau", v);
    if (auto [ok, v] = take("top_k"); ok) cfg.top_k = exp_detail::parse_size_value("top_k", v);

    if (!kv.empty()) {
        std::string msg = "unknown config key";
        if (kv.size() > 1) msg += "s";
        msg += ":";
        for (const auto& entry : kv) msg += " " + entry.first;
        throw ConfigError(msg);
    }
    return cfg;
}

/// Collects every invalid field before throwing, so one pass reports all
/// problems.
inline void validate_run_config(const RunConfig& c) {
    std::vector<std::string> bad;
    if (c.experiment != "cubic" && c.experiment != "grounding") bad.push_back("experiment");
    if (c.lambda_nll < 0.0) bad.push_back("lambda_nll");
    if (c.lambda_geom < 0.0) bad.push_back("lambda_geom");
    if (c.lambda_der < 0.0) bad.push_back("lambda_der");
    if (!(c.lr > 0.0)) bad.push_back("lr");
    if (c.experiment == "cubic") {
        if (c.n_train == 0) bad.push_back("n_train");
        if (c.n_test == 0) bad.push_back("n_test");
        if (c.hidden == 0) bad.push_back("hidden");
        if (c.noise_sigma < 0.0) bad.push_back("noise_sigma");
    }
    if (c.experiment == "grounding") {
        if (c.n_videos < 2) bad.push_back("n_videos");
        if (c.clips < 4) bad.push_back("clips");
        if (c.dim < 2) bad.push_back("dim");
        if (c.query_tokens == 0) bad.push_back("query_tokens");
        if (c.vocab < 2) bad.push_back("vocab");
        if (!(c.mask_ratio > 0.0 && c.mask_ratio <= 1.0)) bad.push_back("mask_ratio");
        if (c.batch == 0 || c.batch > c.n_videos) bad.push_back("batch");
        if (!(c.tau > 0.0)) bad.push_back("tau");
        if (c.top_k == 0 || 2 * c.top_k > c.clips) bad.push_back("top_k");
    }
    if (!bad.empty()) {
        std::string msg = "invalid config value";
        if (bad.size() > 1) msg += "s";
        msg += " for:";
        for (const auto& k : bad) msg += " " + k;
        throw ConfigError(msg);
    }
}

/// Canonical text form of the full effective config (every key, fixed
/// order); its hash names the run in logs and artifacts.
inline std::string canonical_config(const RunConfig& c) {
    std::string out;
    out += "experiment=" + c.experiment + "\n";
    out += "seed=" + std::to_string(c.seed) + "\n";
    out += std::string("reg=") + reg_mode_name(c.reg) + "\n";
    out += "lambda_nll=" + format_g17(c.lambda_nll) + "\n";
    out += "lambda_geom=" + format_g17(c.lambda_geom) + "\n";
    out += "lambda_der=" + format_g17(c.lambda_der) + "\n";
    out += std::string("normalization=") + normalization_name(c.normalization) + "\n";
    out += "epochs=" + std::to_string(effective_epochs(c)) + "\n";
    out += "lr=" + format_g17(c.lr) + "\n";
    out += "scatter_every=" + std::to_string(effective_scatter_every(c)) + "\n";
    if (c.experiment == "cubic") {
        out += "n_train=" + std::to_string(c.n_train) + "\n";
        out += "n_test=" + std::to_string(c.n_test) + "\n";
        out += "hidden=" + std::to_string(c.hidden) + "\n";
        out += "noise_sigma=" + format_g17(c.noise_sigma) + "\n";
    } else {
        out += "n_videos=" + std::to_string(c.n_videos) + "\n";
        out += "clips=" + std::to_string(c.clips) + "\n";
        out += "dim=" + std::to_string(c.dim) + "\n";
        out += "query_tokens=" + std::to_string(c.query_tokens) + "\n";
        out += "vocab=" + std::to_string(c.vocab) + "\n";
        out += "mask_ratio=" + format_g17(c.mask_ratio) + "\n";
        out += "batch=" + std::to_string(c.batch) + "\n";
        out += "epochs_stage1=" + std::to_string(c.epochs_stage1) + "\n";
        out += "tau=" + format_g17(c.tau) + "\n";
        out += "top_k=" + std::to_string(c.top_k) + "\n";
    }
    return out;
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string config_hash_hex(const RunConfig& c) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(canonical_config(c))));
    return buf;
}

inline LossWeights loss_weights_for(const RunConfig& c) {
    LossWeights w;
    w.lambda_nll = c.lambda_nll;
    w.lambda_geom = c.reg == RegMode::None ? 0.0 : c.lambda_geom;
    w.lambda_der = c.lambda_der;
    w.geom_type = c.reg == RegMode::Geom2 ? GeomType::TypeII : GeomType::TypeI;
    return w;
}

// ---------------------------------------------------------------------------
// experiment log

struct LogRecord {
    int stage = 1;
    std::size_t epoch = 0;
    std::size_t step = 0;
    double loss = 0.0;
    bool has_composition = false;
    double grounding = 0.0;
    double evidential_sum = 0.0;
    std::size_t n_evidential = 0;
    double lambda_der = 0.0;
    double total = 0.0;
    bool has_summary = false;
    double delta_norm_mean = 0.0, phi_norm_mean = 0.0;
    double epistemic_mean = 0.0, aleatoric_mean = 0.0;
    bool diverged = false;
};

struct ExperimentLog {
    std::string experiment;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::vector<LogRecord> records;
    // (epoch, per-clip error/evidence coordinates) captured at the scatter
    // cadence
    std::vector<std::pair<std::size_t, std::vector<ErrorEvidencePair>>> scatters;
};

inline std::string render_log_jsonl(const ExperimentLog& log) {
    using ordered_json = nlohmann::ordered_json;
    std::string out;
    ordered_json head;
    head["experiment"] = log.experiment;
    head["seed"] = log.seed;
    head["config_hash"] = log.config_hash;
    out += head.dump() + "\n";
    for (const auto& r : log.records) {
        ordered_json j;
        j["stage"] = r.stage;
        j["epoch"] = r.epoch;
        j["step"] = r.step;
        j["loss"] = r.loss;
        if (r.has_composition) {
            j["grounding"] = r.grounding;
            j["evidential_sum"] = r.evidential_sum;
            j["n_evidential"] = r.n_evidential;
            j["lambda_der"] = r.lambda_der;
            j["total"] = r.total;
        }
        if (r.has_summary) {
            j["delta_norm_mean"] = r.delta_norm_mean;
            j["phi_norm_mean"] = r.phi_norm_mean;
            j["epistemic_mean"] = r.epistemic_mean;
            j["aleatoric_mean"] = r.aleatoric_mean;
        }
        if (r.diverged) j["diverged"] = true;
        out += j.dump() + "\n";
    }
    return out;
}

inline void write_experiment_log(const std::filesystem::path& dir, const ExperimentLog& log) {
    write_text_file(dir / "log.jsonl", render_log_jsonl(log));
    for (const auto& [epoch, pairs] : log.scatters) {
        std::vector<std::vector<double>> rows;
        rows.reserve(pairs.size());
        for (const auto& p : pairs) rows.push_back({p.delta, p.phi, p.delta_norm, p.phi_norm});
        write_csv(dir / ("scatter_epoch_" + std::to_string(epoch) + ".csv"),
                  {"seed=" + std::to_string(log.seed), "config_hash=" + log.config_hash,
                   "epoch=" + std::to_string(epoch)},
                  {"delta", "phi", "delta_norm", "phi_norm"}, rows);
    }
}

// ---------------------------------------------------------------------------
// shared training pieces

/// Per-sample evidential terms for any regularizer mode. Geom variants and
/// plain NLL go through the shared graph; Vanilla adds error * evidence with
/// the raw error detached.
inline ad::Var evidential_terms_any(RegMode mode, const EvidentialVars& ev,
                                    std::span<const double> targets, const LossWeights& weights,
                                    NormalizationMode norm,
                                    std::vector<ErrorEvidencePair>* pairs_out = nullptr) {
    using namespace ad;
    if (mode != RegMode::Vanilla)
        return evidential_terms_graph(ev, targets, weights, norm, pairs_out);

    validate(weights);
    Tape& t = *ev.gamma.tape;
    const std::size_t n = ev.gamma.value().rows;
    if (targets.size() != n)
        throw std::invalid_argument("evidential_terms_any: target count mismatch");
    Matrix targets_col(n, 1, std::vector<double>(targets.begin(), targets.end()));
    Var nll = nll_loss_graph(ev, t.constant(std::move(targets_col)));
    Matrix delta(n, 1);
    for (std::size_t i = 0; i < n; ++i)
        delta.at(i, 0) = std::abs(targets[i] - ev.gamma.value().at(i, 0));
    Var phi = 2.0 * ev.upsilon + ev.alpha;
    Var reg = mul(t.constant(std::move(delta)), phi);
    if (pairs_out) {
        std::vector<NIGParams> params(n);
        for (std::size_t i = 0; i < n; ++i)
            params[i] = {ev.gamma.value().at(i, 0), ev.upsilon.value().at(i, 0),
                         ev.alpha.value().at(i, 0), ev.beta.value().at(i, 0)};
        *pairs_out = build_error_evidence_pairs(targets, params, norm);
    }
    return add(affine(nll, weights.lambda_nll, 0.0), affine(reg, weights.lambda_geom, 0.0));
}

namespace exp_detail {

inline void uncertainty_means(const EvidentialVars& ev, double& epistemic, double& aleatoric) {
    const std::size_t n = ev.gamma.value().rows;
    double e = 0.0, a = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const NIGParams p{ev.gamma.value().at(i, 0), ev.upsilon.value().at(i, 0),
                          ev.alpha.value().at(i, 0), ev.beta.value().at(i, 0)};
        const auto m = nig_moments(p);
        e += m.epistemic;
        a += m.aleatoric;
    }
    epistemic = e / static_cast<double>(n);
    aleatoric = a / static_cast<double>(n);
}

inline void pair_means(const std::vector<ErrorEvidencePair>& pairs, double& delta_mean,
                       double& phi_mean) {
    double d = 0.0, p = 0.0;
    for (const auto& pr : pairs) {
        d += pr.delta_norm;
        p += pr.phi_norm;
    }
    delta_mean = d / static_cast<double>(pairs.size());
    phi_mean = p / static_cast<double>(pairs.size());
}

}  // namespace exp_detail

// ---------------------------------------------------------------------------
// calibration summary

struct CalibrationSummary {
    std::size_t n_samples = 0;
    std::size_t bins = 64;
    bool equalized = false;
    double eucm_paper_literal = 0.0;
    double eucm_consistency = 0.0;
    double entropy = 0.0;
};

/// Normalizes errors and uncertainties (min-max with tanh fallback),
/// optionally histogram-equalizes the uncertainties, then computes both EUCM
/// variants and the uncertainty entropy. Entropy on equalized values is
/// constant by construction (the empirical CDF uniformizes ranks), so the
/// default keeps the raw normalized distribution.
inline CalibrationSummary summarize_calibration(std::span<const double> errors,
                                                std::span<const double> uncertainties,
                                                std::size_t bins = 64, bool equalize = false) {
    if (errors.size() != uncertainties.size())
        throw std::invalid_argument("summarize_calibration: length mismatch");
    if (errors.empty()) throw std::domain_error("summarize_calibration: empty input");
    auto dn = normalize_batch_or_tanh(errors, NormalizationMode::StandardMinMax);
    auto un = normalize_batch_or_tanh(uncertainties, NormalizationMode::StandardMinMax);
    if (equalize) un = histogram_equalize(un, bins);
    CalibrationSummary s;
    s.n_samples = errors.size();
    s.bins = bins;
    s.equalized = equalize;
    s.eucm_paper_literal = eucm(dn, un, EucmVariant::PaperLiteral);
    s.eucm_consistency = eucm(dn, un, EucmVariant::Consistency);
    s.entropy = distribution_entropy(un, bins);
    return s;
}

// ---------------------------------------------------------------------------
// cubic experiment

inline constexpr double kCubicXScale = 4.0;   // train half-range
inline constexpr double kCubicYScale = 64.0;  // x_scale^3, so y/scale = (x/scale)^3

struct CubicResult {
    RunConfig config;
    MLPConfig mlp;
    std::vector<NamedParam> params;
    std::vector<double> test_x, test_gamma, test_epistemic, test_aleatoric;
    double train_rmse = 0.0;  // raw units
    double id_epistemic_mean = 0.0, ood_epistemic_mean = 0.0, ood_id_ratio = 0.0;
    CalibrationSummary calibration;
};

namespace exp_detail {

inline EvidentialVars cubic_head(ad::Tape& t, const MLPConfig& mcfg,
                                 const std::vector<ad::Var>& params, const Matrix& xs) {
    return evidential_head(mlp_forward(mcfg, params, t.constant(xs)));
}

}  // namespace exp_detail

/// Trains the evidential MLP on y = x^3 + noise. The model works in scaled
/// coordinates (x/4, y/64) so the target range is [-1,1]^3; uncertainty
/// ratios are scale-free and reported as-is.
inline CubicResult run_cubic(const RunConfig& cfg, ExperimentLog& log) {
    validate_run_config(cfg);
    if (cfg.experiment != "cubic") throw ConfigError("run_cubic: experiment must be 'cubic'");
    const LossWeights weights = loss_weights_for(cfg);
    const std::size_t epochs = effective_epochs(cfg);
    const std::size_t cadence = effective_scatter_every(cfg);

    log.experiment = cfg.experiment;
    log.seed = cfg.seed;
    log.config_hash = config_hash_hex(cfg);

    CubicDatasetSpec dspec;
    dspec.n_train = cfg.n_train;
    dspec.n_test = cfg.n_test;
    dspec.noise_sigma = cfg.noise_sigma;
    dspec.seed = cfg.seed;
    const CubicDataset data = gen_cubic(dspec);

    Matrix train_x(cfg.n_train, 1);
    std::vector<double> train_y(cfg.n_train);
    for (std::size_t i = 0; i < cfg.n_train; ++i) {
        train_x.at(i, 0) = data.train_x[i] / kCubicXScale;
        train_y[i] = data.train_y[i] / kCubicYScale;
    }

    MLPConfig mcfg;
    mcfg.layer_widths = {1, cfg.hidden, cfg.hidden, 4};
    mcfg.activation = Activation::Tanh;
    mcfg.seed = cfg.seed ^ 0x6d6f64656cull;
    std::vector<NamedParam> params = init_mlp(mcfg);
    Adam adam({cfg.lr}, params);

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        ad::Tape t;
        std::vector<ad::Var> vars;
        vars.reserve(params.size());
        for (const auto& p : params) vars.push_back(t.input(p.value));
        EvidentialVars ev = exp_detail::cubic_head(t, mcfg, vars, train_x);
        std::vector<ErrorEvidencePair> pairs;
        ad::Var terms =
            evidential_terms_any(cfg.reg, ev, train_y, weights, cfg.normalization, &pairs);
        ad::Var loss = ad::mean(terms);

        LogRecord rec;
        rec.stage = 1;
        rec.epoch = epoch;
        rec.step = epoch;
        rec.loss = loss.scalar();
        if (!std::isfinite(rec.loss)) {
            rec.diverged = true;
            log.records.push_back(rec);
            throw std::runtime_error("training diverged: cubic epoch " + std::to_string(epoch) +
                                     " step " + std::to_string(epoch));
        }
        rec.has_summary = true;
        exp_detail::pair_means(pairs, rec.delta_norm_mean, rec.phi_norm_mean);
        exp_detail::uncertainty_means(ev, rec.epistemic_mean, rec.aleatoric_mean);
        log.records.push_back(rec);
        if (epoch % cadence == 0 || epoch + 1 == epochs) log.scatters.emplace_back(epoch, pairs);

        t.backward(loss);
        std::vector<Matrix> grads;
        grads.reserve(vars.size());
        for (const auto& v : vars) grads.push_back(v.grad());
        adam.step(params, grads);
    }

    CubicResult result;
    result.config = cfg;
    result.mlp = mcfg;
    result.params = params;

    {
        ad::Tape t;
        std::vector<ad::Var> vars;
        vars.reserve(params.size());
        for (const auto& p : params) vars.push_back(t.constant(p.value));
        Matrix test_x(cfg.n_test, 1);
        for (std::size_t i = 0; i < cfg.n_test; ++i)
            test_x.at(i, 0) = data.test_x[i] / kCubicXScale;
        EvidentialVars ev = exp_detail::cubic_head(t, mcfg, vars, test_x);
        double id_sum = 0.0, ood_sum = 0.0;
        std::size_t id_n = 0, ood_n = 0;
        std::vector<double> errors(cfg.n_test), uncertainties(cfg.n_test);
        for (std::size_t i = 0; i < cfg.n_test; ++i) {
            const NIGParams p{ev.gamma.value().at(i, 0), ev.upsilon.value().at(i, 0),
                              ev.alpha.value().at(i, 0), ev.beta.value().at(i, 0)};
            const auto m = nig_moments(p);
            result.test_x.push_back(data.test_x[i]);
            result.test_gamma.push_back(p.gamma);
            result.test_epistemic.push_back(m.epistemic);
            result.test_aleatoric.push_back(m.aleatoric);
            errors[i] = std::abs(data.test_y[i] / kCubicYScale - p.gamma);
            uncertainties[i] = m.epistemic;
            if (std::abs(data.test_x[i]) <= dspec.train_hi) {
                id_sum += m.epistemic;
                ++id_n;
            } else {
                ood_sum += m.epistemic;
                ++ood_n;
            }
        }
        result.id_epistemic_mean = id_sum / static_cast<double>(id_n);
        result.ood_epistemic_mean = ood_sum / static_cast<double>(ood_n);
        result.ood_id_ratio = result.ood_epistemic_mean / result.id_epistemic_mean;
        result.calibration = summarize_calibration(errors, uncertainties);
    }
    {
        ad::Tape t;
        std::vector<ad::Var> vars;
        vars.reserve(params.size());
        for (const auto& p : params) vars.push_back(t.constant(p.value));
        EvidentialVars ev = exp_detail::cubic_head(t, mcfg, vars, train_x);
        double ss = 0.0;
        for (std::size_t i = 0; i < cfg.n_train; ++i) {
            const double err = ev.gamma.value().at(i, 0) - train_y[i];
            ss += err * err;
        }
        result.train_rmse = kCubicYScale * std::sqrt(ss / static_cast<double>(cfg.n_train));
    }
    return result;
}

// ---------------------------------------------------------------------------
// grounding experiment

struct GroundingModel {
    ToyGroundingSpec spec;
    std::size_t n_blocks = 4;
    GroundingWeights weights;
    std::vector<NamedParam> params;
};

struct GroundingLayout {
    std::size_t n_blocks = 4;
    std::size_t embed() const { return 0; }
    std::size_t blocks_begin() const { return 1; }
    std::size_t fg_w() const { return 1 + 8 * n_blocks; }
    std::size_t fg_b() const { return fg_w() + 1; }
    std::size_t bound_w() const { return fg_w() + 2; }
    std::size_t bound_b() const { return fg_w() + 3; }
    std::size_t ev_w() const { return fg_w() + 4; }
    std::size_t ev_b() const { return fg_w() + 5; }
    std::size_t mlm_w() const { return fg_w() + 6; }
    std::size_t mlm_b() const { return fg_w() + 7; }
    std::size_t count() const { return 9 + 8 * n_blocks; }
};

inline std::vector<NamedParam> init_grounding_params(const ToyGroundingSpec& spec,
                                                     std::size_t n_blocks, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<NamedParam> p;
    p.reserve(GroundingLayout{n_blocks}.count());
    p.push_back({"embed.table", xavier_matrix(rng, spec.vocab, spec.dim)});
    auto blocks = init_rff_stack(n_blocks, spec.dim, rng);
    p.insert(p.end(), blocks.begin(), blocks.end());
    p.push_back({"head.fg.weight", xavier_matrix(rng, spec.dim, 1)});
    p.push_back({"head.fg.bias", Matrix(1, 1)});
    p.push_back({"head.bound.weight", xavier_matrix(rng, spec.dim, 2)});
    p.push_back({"head.bound.bias", Matrix(1, 2)});
    // two NIG quadruples per clip: span start (cols 0-3) and span end (4-7)
    p.push_back({"head.ev.weight", xavier_matrix(rng, spec.dim, 8)});
    p.push_back({"head.ev.bias", Matrix(1, 8)});
    p.push_back({"head.mlm.weight", xavier_matrix(rng, spec.dim, spec.vocab)});
    p.push_back({"head.mlm.bias", Matrix(1, spec.vocab)});
    return p;
}

namespace exp_detail {

inline ad::Var token_onehot(ad::Tape& t, const ToyGroundingSpec& spec, const GroundingSample& s,
                            bool apply_mask) {
    Matrix onehot(spec.query_tokens, spec.vocab);
    for (std::size_t i = 0; i < spec.query_tokens; ++i) onehot.at(i, s.tokens[i]) = 1.0;
    if (apply_mask)
        for (std::size_t p : s.masked_positions)
            for (std::size_t j = 0; j < spec.vocab; ++j) onehot.at(p, j) = 0.0;
    return t.constant(std::move(onehot));
}

struct SampleBackbone {
    ad::Var v_out, t_out, sentence;
};

inline SampleBackbone backbone(ad::Tape& t, const ToyGroundingSpec& spec, const ad::Var& embed,
                               const std::vector<RffBlockVars>& blocks, const GroundingSample& s,
                               bool apply_mask) {
    ad::Var text = ad::matmul(token_onehot(t, spec, s, apply_mask), embed);
    ad::Var video = t.constant(s.video.tokens);
    // residual blocks keep per-clip identity through the stack; without them
    // every video row collapses to the same text-value mixture and no
    // clip-level head can learn anything
    auto [v, q] = rff_stack_graph(video, text, blocks, blocks.size(), true);
    Matrix pool(1, spec.query_tokens, 1.0 / static_cast<double>(spec.query_tokens));
    ad::Var sentence = ad::matmul(t.constant(std::move(pool)), q);
    return {v, q, sentence};
}

inline Matrix selection_matrix(std::span<const std::size_t> rows, std::size_t n) {
    Matrix sel(rows.size(), n);
    for (std::size_t r = 0; r < rows.size(); ++r) sel.at(r, rows[r]) = 1.0;
    return sel;
}

inline std::vector<std::size_t> order_by_score_desc(const Matrix& scores) {
    std::vector<std::size_t> idx(scores.rows);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const double sa = scores.at(a, 0), sb = scores.at(b, 0);
        if (sa != sb) return sa > sb;
        return a < b;
    });
    return idx;
}

inline std::size_t label_positive_index(const GroundingSample& s) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < s.labels.size(); ++i)
        if (s.labels[i].saliency > s.labels[best].saliency) best = i;
    return best;
}

}  // namespace exp_detail

struct Stage2Batch {
    ad::Var total, grounding;
    double evidential_sum = 0.0;
    std::size_t n_evidential = 0;
    std::vector<ErrorEvidencePair> pairs;
    double epistemic_mean = 0.0, aleatoric_mean = 0.0;
};

/// Builds the full stage-2 objective for one minibatch: the three grounding
/// heads per sample, batch-level inter-video contrast, and per-clip
/// evidential terms (targets: span start and end) normalized across the batch.
inline Stage2Batch build_stage2_batch(ad::Tape& t, const ToyGroundingSpec& spec,
                                      const ad::Var& embed,
                                      const std::vector<RffBlockVars>& blocks, const ad::Var& fg_w,
                                      const ad::Var& fg_b, const ad::Var& bound_w,
                                      const ad::Var& bound_b, const ad::Var& ev_w,
                                      const ad::Var& ev_b,
                                      std::span<const GroundingSample* const> batch,
                                      const GroundingWeights& gw, const LossWeights& lw,
                                      RegMode reg, NormalizationMode norm) {
    using namespace ad;
    const std::size_t B = batch.size();
    if (B == 0) throw std::invalid_argument("build_stage2_batch: empty batch");

    Matrix centers_col(spec.clips, 1);
    for (std::size_t i = 0; i < spec.clips; ++i)
        centers_col.at(i, 0) = (static_cast<double>(i) + 0.5) / static_cast<double>(spec.clips);

    std::vector<exp_detail::SampleBackbone> backbones;
    std::vector<Var> ev_raws, pos_rows;
    backbones.reserve(B);
    ev_raws.reserve(B);
    pos_rows.reserve(B);

    struct PerSample {
        Var focal, boundary, intra, trace;
    };
    std::vector<PerSample> per_sample;
    per_sample.reserve(B);

    for (const GroundingSample* sp : batch) {
        const GroundingSample& s = *sp;
        auto bb = exp_detail::backbone(t, spec, embed, blocks, s, false);

        Var fg_probs = sigmoid(add(matmul(bb.v_out, fg_w), fg_b));
        std::vector<int> fg_labels(spec.clips);
        for (std::size_t i = 0; i < spec.clips; ++i) fg_labels[i] = s.labels[i].foreground;
        Var focal = mean(focal_loss_graph(fg_probs, fg_labels));

        Var offsets = softplus(add(matmul(bb.v_out, bound_w), bound_b)) + 0.02;
        Var off_start = col(offsets, 0), off_end = col(offsets, 1);
        Var centers = t.constant(centers_col);
        SpanVars pred_offsets{off_start, off_end};
        Matrix true_off_start(spec.clips, 1), true_off_end(spec.clips, 1);
        for (std::size_t i = 0; i < spec.clips; ++i) {
            true_off_start.at(i, 0) = s.labels[i].offsets.first;
            true_off_end.at(i, 0) = s.labels[i].offsets.second;
        }
        SpanVars true_offsets{t.constant(std::move(true_off_start)),
                              t.constant(std::move(true_off_end))};
        SpanVars pred_span{sub(centers, off_start), add(centers, off_end)};
        SpanVars true_span{t.constant(Matrix(spec.clips, 1, s.span.start)),
                           t.constant(Matrix(spec.clips, 1, s.span.end))};
        Var boundary =
            mean(boundary_loss_graph(pred_offsets, true_offsets, pred_span, true_span, fg_labels,
                                     gw));

        Var sal = saliency_scores_graph(bb.v_out, bb.sentence);
        const std::size_t pos = exp_detail::label_positive_index(s);
        const auto order = exp_detail::order_by_score_desc(sal.value());
        std::vector<std::size_t> negatives;
        for (std::size_t i : order) {
            if (negatives.size() >= gw.top_k) break;
            if (!s.labels[i].foreground) negatives.push_back(i);
        }
        Var intra = intra_video_contrastive_graph(sal, pos, negatives, gw.tau);

        const std::size_t k = std::min(gw.top_k, spec.clips / 2);
        std::vector<std::size_t> strongest(order.begin(), order.begin() + k);
        std::vector<std::size_t> weakest(order.end() - static_cast<std::ptrdiff_t>(k),
                                         order.end());
        Var pos_block = matmul(t.constant(exp_detail::selection_matrix(strongest, spec.clips)),
                               sal);
        Var neg_block = matmul(t.constant(exp_detail::selection_matrix(weakest, spec.clips)),
                               sal);
        Var trace = clip_trace_contrastive_graph(pos_block, neg_block);

        const std::size_t pos_row[] = {pos};
        pos_rows.push_back(
            matmul(t.constant(exp_detail::selection_matrix(pos_row, spec.clips)), bb.v_out));
        per_sample.push_back({focal, boundary, intra, trace});
        ev_raws.push_back(add(matmul(bb.v_out, ev_w), ev_b));
        backbones.push_back(bb);
    }

    Var pos_stack = vstack(std::span<const Var>(pos_rows.data(), pos_rows.size()));
    std::vector<GroundingTermVars> terms;
    terms.reserve(B);
    for (std::size_t i = 0; i < B; ++i) {
        Var batch_scores = saliency_scores_graph(pos_stack, backbones[i].sentence);
        Var inter = inter_video_contrastive_graph(batch_scores, i, gw.tau);
        terms.push_back({per_sample[i].focal, per_sample[i].boundary, per_sample[i].intra, inter,
                         per_sample[i].trace});
    }
    Var grounding = grounding_loss_graph(terms, gw);

    Var ev_raw_all = vstack(std::span<const Var>(ev_raws.data(), ev_raws.size()));
    // each clip observes the query span twice: once as a start moment, once as
    // an end moment, with separate NIG quadruples (cols 0-3 start, 4-7 end)
    Matrix sel_start(8, 4), sel_end(8, 4);
    for (std::size_t j = 0; j < 4; ++j) {
        sel_start.at(j, j) = 1.0;
        sel_end.at(4 + j, j) = 1.0;
    }
    EvidentialVars ev_start = evidential_head(matmul(ev_raw_all, t.constant(std::move(sel_start))));
    EvidentialVars ev_end = evidential_head(matmul(ev_raw_all, t.constant(std::move(sel_end))));
    std::vector<double> starts, ends;
    starts.reserve(B * spec.clips);
    ends.reserve(B * spec.clips);
    for (const GroundingSample* sp : batch)
        for (std::size_t i = 0; i < spec.clips; ++i) {
            starts.push_back(sp->span.start);
            ends.push_back(sp->span.end);
        }

    Stage2Batch out{grounding, grounding, 0.0, 0, {}, 0.0, 0.0};
    std::vector<ErrorEvidencePair> end_pairs;
    Var terms_start = evidential_terms_any(reg, ev_start, starts, lw, norm, &out.pairs);
    Var terms_end = evidential_terms_any(reg, ev_end, ends, lw, norm, &end_pairs);
    out.pairs.insert(out.pairs.end(), end_pairs.begin(), end_pairs.end());
    Var ev_terms = add(terms_start, terms_end);
    out.total = total_loss_graph(grounding, ev_terms, lw);
    out.grounding = grounding;
    const Matrix& tv = ev_terms.value();
    for (double v : tv.data) out.evidential_sum += v;
    out.n_evidential = tv.rows;
    if (std::isfinite(out.total.scalar())) {
        double es = 0.0, as = 0.0, ee = 0.0, ae = 0.0;
        exp_detail::uncertainty_means(ev_start, es, as);
        exp_detail::uncertainty_means(ev_end, ee, ae);
        out.epistemic_mean = 0.5 * (es + ee);
        out.aleatoric_mean = 0.5 * (as + ae);
    }
    return out;
}

struct QueryEval {
    double center = 0.0;
    double gamma = 0.0;
    double error = 0.0;
    double epistemic = 0.0;
    double aleatoric = 0.0;
};

/// Clip-level evidential outputs averaged to one query-level estimate.
inline QueryEval evaluate_query(const GroundingModel& m, const GroundingSample& s) {
    const GroundingLayout lay{m.n_blocks};
    ad::Tape t;
    ad::Var embed = t.constant(m.params[lay.embed()].value);
    std::vector<ad::Var> block_vars;
    block_vars.reserve(8 * m.n_blocks);
    for (std::size_t i = 0; i < 8 * m.n_blocks; ++i)
        block_vars.push_back(t.constant(m.params[lay.blocks_begin() + i].value));
    const auto blocks = rff_stack_vars(block_vars, m.n_blocks);
    auto bb = exp_detail::backbone(t, m.spec, embed, blocks, s, false);
    ad::Var ev_raw = ad::add(ad::matmul(bb.v_out, t.constant(m.params[lay.ev_w()].value)),
                             t.constant(m.params[lay.ev_b()].value));
    const Matrix& raw = ev_raw.value();
    Matrix raw_start(raw.rows, 4), raw_end(raw.rows, 4);
    for (std::size_t i = 0; i < raw.rows; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            raw_start.at(i, j) = raw.at(i, j);
            raw_end.at(i, j) = raw.at(i, 4 + j);
        }
    const auto nig_start = nig_params_from_raw(raw_start);
    const auto nig_end = nig_params_from_raw(raw_end);

    QueryEval q;
    q.center = 0.5 * (s.span.start + s.span.end);
    double gs = 0.0, ge = 0.0, e = 0.0, a = 0.0;
    for (std::size_t i = 0; i < nig_start.size(); ++i) {
        const auto ms = nig_moments(nig_start[i]);
        const auto me = nig_moments(nig_end[i]);
        gs += nig_start[i].gamma;
        ge += nig_end[i].gamma;
        e += 0.5 * (ms.epistemic + me.epistemic);
        a += 0.5 * (ms.aleatoric + me.aleatoric);
    }
    const double n = static_cast<double>(nig_start.size());
    q.gamma = 0.5 * (gs + ge) / n;
    q.epistemic = e / n;
    q.aleatoric = a / n;
    q.error = std::abs(q.center - q.gamma);
    return q;
}

struct GroundingResult {
    RunConfig config;
    GroundingModel model;
    std::vector<QueryEval> eval;
    CalibrationSummary calibration;
};

/// Stage 1: masked-token reconstruction only (embeddings zeroed at masked
/// positions). Stage 2: grounding + evidential objectives with the MLM head
/// untouched (it is neither in the stage-2 graph nor the optimizer).
inline GroundingResult run_grounding(const RunConfig& cfg, ExperimentLog& log) {
    validate_run_config(cfg);
    if (cfg.experiment != "grounding")
        throw ConfigError("run_grounding: experiment must be 'grounding'");
    const LossWeights weights = loss_weights_for(cfg);
    const std::size_t epochs2 = effective_epochs(cfg);
    const std::size_t cadence = effective_scatter_every(cfg);

    log.experiment = cfg.experiment;
    log.seed = cfg.seed;
    log.config_hash = config_hash_hex(cfg);

    ToyGroundingSpec spec;
    spec.n_videos = cfg.n_videos;
    spec.clips = cfg.clips;
    spec.dim = cfg.dim;
    spec.query_tokens = cfg.query_tokens;
    spec.vocab = cfg.vocab;
    spec.mask_ratio = cfg.mask_ratio;
    spec.seed = cfg.seed;
    const GroundingDataset data = gen_grounding(spec);

    GroundingModel model;
    model.spec = spec;
    model.n_blocks = 4;
    model.weights.tau = cfg.tau;
    model.weights.top_k = cfg.top_k;
    model.params = init_grounding_params(spec, model.n_blocks, cfg.seed ^ 0x6d6f64656cull);
    const GroundingLayout lay{model.n_blocks};

    Rng order_rng(cfg.seed ^ 0x747261696eull);
    std::vector<std::size_t> order(spec.n_videos);
    std::iota(order.begin(), order.end(), std::size_t{0});

    // ---- stage 1: MLM warmup ----
    {
        std::vector<std::size_t> idx;
        idx.push_back(lay.embed());
        for (std::size_t i = 0; i < 8 * model.n_blocks; ++i)
            idx.push_back(lay.blocks_begin() + i);
        idx.push_back(lay.mlm_w());
        idx.push_back(lay.mlm_b());
        std::vector<NamedParam> stage(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) stage[i] = model.params[idx[i]];
        Adam adam({cfg.lr}, stage);

        for (std::size_t epoch = 0; epoch < cfg.epochs_stage1; ++epoch) {
            order_rng.shuffle(order);
            double epoch_loss = 0.0;
            std::size_t steps = 0;
            for (std::size_t b0 = 0; b0 < spec.n_videos; b0 += cfg.batch) {
                const std::size_t b1 = std::min(spec.n_videos, b0 + cfg.batch);
                ad::Tape t;
                std::vector<ad::Var> vars;
                vars.reserve(stage.size());
                for (const auto& p : stage) vars.push_back(t.input(p.value));
                ad::Var embed = vars[0];
                const auto blocks = rff_stack_vars(
                    {vars.begin() + 1, vars.begin() + 1 + 8 * model.n_blocks}, model.n_blocks);
                ad::Var mlm_w = vars[vars.size() - 2], mlm_b = vars[vars.size() - 1];

                std::vector<ad::Var> losses;
                losses.reserve(b1 - b0);
                for (std::size_t k = b0; k < b1; ++k) {
                    const GroundingSample& s = data.samples[order[k]];
                    auto bb = exp_detail::backbone(t, spec, embed, blocks, s, true);
                    ad::Var logits = ad::add(ad::matmul(bb.t_out, mlm_w), mlm_b);
                    ad::Var masked = ad::matmul(
                        t.constant(exp_detail::selection_matrix(s.masked_positions,
                                                                spec.query_tokens)),
                        logits);
                    std::vector<std::size_t> targets;
                    targets.reserve(s.masked_positions.size());
                    for (std::size_t p : s.masked_positions) targets.push_back(s.tokens[p]);
                    losses.push_back(mlm_loss_graph(masked, targets));
                }
                ad::Var loss =
                    ad::mean(ad::vstack(std::span<const ad::Var>(losses.data(), losses.size())));
                const double value = loss.scalar();
                if (!std::isfinite(value)) {
                    LogRecord rec;
                    rec.stage = 1;
                    rec.epoch = epoch;
                    rec.step = steps;
                    rec.loss = value;
                    rec.diverged = true;
                    log.records.push_back(rec);
                    throw std::runtime_error("training diverged: grounding stage 1 epoch " +
                                             std::to_string(epoch) + " step " +
                                             std::to_string(steps));
                }
                epoch_loss += value;
                ++steps;
                t.backward(loss);
                std::vector<Matrix> grads;
                grads.reserve(vars.size());
                for (const auto& v : vars) grads.push_back(v.grad());
                adam.step(stage, grads);
            }
            LogRecord rec;
            rec.stage = 1;
            rec.epoch = epoch;
            rec.step = steps - 1;
            rec.loss = epoch_loss / static_cast<double>(steps);
            log.records.push_back(rec);
        }
        for (std::size_t i = 0; i < idx.size(); ++i) model.params[idx[i]] = stage[i];
    }

    // ---- stage 2: grounding + evidential ----
    {
        std::vector<std::size_t> idx;
        idx.push_back(lay.embed());
        for (std::size_t i = 0; i < 8 * model.n_blocks; ++i)
            idx.push_back(lay.blocks_begin() + i);
        idx.push_back(lay.fg_w());
        idx.push_back(lay.fg_b());
        idx.push_back(lay.bound_w());
        idx.push_back(lay.bound_b());
        idx.push_back(lay.ev_w());
        idx.push_back(lay.ev_b());
        std::vector<NamedParam> stage(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) stage[i] = model.params[idx[i]];
        Adam adam({cfg.lr}, stage);

        for (std::size_t epoch = 0; epoch < epochs2; ++epoch) {
            order_rng.shuffle(order);
            std::size_t step = 0;
            for (std::size_t b0 = 0; b0 < spec.n_videos; b0 += cfg.batch, ++step) {
                const std::size_t b1 = std::min(spec.n_videos, b0 + cfg.batch);
                ad::Tape t;
                std::vector<ad::Var> vars;
                vars.reserve(stage.size());
                for (const auto& p : stage) vars.push_back(t.input(p.value));
                ad::Var embed = vars[0];
                const auto blocks = rff_stack_vars(
                    {vars.begin() + 1, vars.begin() + 1 + 8 * model.n_blocks}, model.n_blocks);
                const std::size_t h = 1 + 8 * model.n_blocks;

                std::vector<const GroundingSample*> batch;
                batch.reserve(b1 - b0);
                for (std::size_t k = b0; k < b1; ++k) batch.push_back(&data.samples[order[k]]);

                Stage2Batch sb = build_stage2_batch(
                    t, spec, embed, blocks, vars[h + 0], vars[h + 1], vars[h + 2], vars[h + 3],
                    vars[h + 4], vars[h + 5], batch, model.weights, weights, cfg.reg,
                    cfg.normalization);

                LogRecord rec;
                rec.stage = 2;
                rec.epoch = epoch;
                rec.step = step;
                rec.loss = sb.total.scalar();
                rec.has_composition = true;
                rec.grounding = sb.grounding.scalar();
                rec.evidential_sum = sb.evidential_sum;
                rec.n_evidential = sb.n_evidential;
                rec.lambda_der = weights.lambda_der;
                rec.total = rec.loss;
                if (!std::isfinite(rec.loss)) {
                    rec.diverged = true;
                    log.records.push_back(rec);
                    throw std::runtime_error("training diverged: grounding stage 2 epoch " +
                                             std::to_string(epoch) + " step " +
                                             std::to_string(step));
                }
                rec.has_summary = true;
                exp_detail::pair_means(sb.pairs, rec.delta_norm_mean, rec.phi_norm_mean);
                rec.epistemic_mean = sb.epistemic_mean;
                rec.aleatoric_mean = sb.aleatoric_mean;
                log.records.push_back(rec);
                const bool last_step = b1 == spec.n_videos;
                if (last_step && (epoch % cadence == 0 || epoch + 1 == epochs2))
                    log.scatters.emplace_back(epoch, sb.pairs);

                t.backward(sb.total);
                std::vector<Matrix> grads;
                grads.reserve(vars.size());
                for (const auto& v : vars) grads.push_back(v.grad());
                adam.step(stage, grads);
            }
        }
        for (std::size_t i = 0; i < idx.size(); ++i) model.params[idx[i]] = stage[i];
    }

    GroundingResult result;
    result.config = cfg;
    result.model = model;

    ToyGroundingSpec eval_spec = spec;
    eval_spec.seed = cfg.seed ^ 0x6576616cull;
    const GroundingDataset eval_data = gen_grounding(eval_spec);
    std::vector<double> errors, uncertainties;
    errors.reserve(eval_data.samples.size());
    uncertainties.reserve(eval_data.samples.size());
    for (const auto& s : eval_data.samples) {
        const QueryEval q = evaluate_query(model, s);
        result.eval.push_back(q);
        errors.push_back(q.error);
        uncertainties.push_back(q.epistemic);
    }
    result.calibration = summarize_calibration(errors, uncertainties);
    return result;
}

// ---------------------------------------------------------------------------
// bias probe

struct ProbeCell {
    double start = 0.0, end = 0.0;
    double epistemic = 0.0, aleatoric = 0.0, error = 0.0;
};

struct ProbeResult {
    std::size_t resolution = 0;
    std::vector<ProbeCell> cells;  // upper triangle (start <= end) only
    double trained_mean_epistemic = 0.0;
    double excluded_mean_epistemic = 0.0;
    double ratio = 0.0;
};

/// Tiles the (start, end) simplex with synthetic queries and evaluates the
/// trained model's uncertainty on each. Region means compare the held-out
/// corner against the training joint's support; cells outside both (spans
/// longer or shorter than any training span) appear in the grid but in
/// neither mean, so the ratio isolates the positional bias.
inline ProbeResult bias_probe(const GroundingModel& model, std::size_t resolution,
                              std::uint64_t seed) {
    if (resolution < 2) throw std::domain_error("bias_probe: resolution must be >= 2");
    ProbeResult out;
    out.resolution = resolution;
    Rng rng(seed ^ 0x70726f6265ull);
    const double min_len = 2.0 / static_cast<double>(model.spec.clips);
    double trained_sum = 0.0, excluded_sum = 0.0;
    std::size_t trained_n = 0, excluded_n = 0;
    for (std::size_t i = 0; i < resolution; ++i) {
        for (std::size_t j = i; j < resolution; ++j) {
            const double start = static_cast<double>(i) / static_cast<double>(resolution - 1);
            const double end = static_cast<double>(j) / static_cast<double>(resolution - 1);
            const Span span{start, end};
            const GroundingSample sample = make_grounding_sample(model.spec, rng, span);
            const QueryEval q = evaluate_query(model, sample);
            out.cells.push_back({start, end, q.epistemic, q.aleatoric, q.error});
            if (in_excluded_region(span)) {
                if (end - start + 1e-12 < min_len) continue;
                excluded_sum += q.epistemic;
                ++excluded_n;
            } else if (in_trained_support(span, model.spec.clips)) {
                trained_sum += q.epistemic;
                ++trained_n;
            }
        }
    }
    if (trained_n == 0 || excluded_n == 0)
        throw std::domain_error("bias_probe: resolution too coarse to cover both regions");
    out.trained_mean_epistemic = trained_sum / static_cast<double>(trained_n);
    out.excluded_mean_epistemic = excluded_sum / static_cast<double>(excluded_n);
    out.ratio = out.excluded_mean_epistemic / out.trained_mean_epistemic;
    return out;
}

inline void write_bias_grid(const std::filesystem::path& path, const ProbeResult& probe,
                            std::uint64_t seed) {
    std::vector<std::vector<double>> rows;
    rows.reserve(probe.cells.size());
    for (const auto& c : probe.cells)
        rows.push_back({c.start, c.end, c.epistemic, c.aleatoric, c.error});
    write_csv(path,
              {"seed=" + std::to_string(seed),
               "resolution=" + std::to_string(probe.resolution)},
              {"start", "end", "epistemic", "aleatoric", "error"}, rows);
}

// ---------------------------------------------------------------------------
// adversarial noise sweep

enum class NoiseTarget { VideoOnly, TextOnly, Both };

inline const char* noise_target_name(NoiseTarget t) {
    switch (t) {
        case NoiseTarget::VideoOnly: return "video_only";
        case NoiseTarget::TextOnly: return "text_only";
        case NoiseTarget::Both: return "both";
    }
    return "video_only";
}

struct NoiseLevelResult {
    double sigma = 0.0;  // feature noise level
    double ratio = 0.0;  // token replacement proportion
    std::vector<double> epistemic, aleatoric;
    double epistemic_mean = 0.0, aleatoric_mean = 0.0;
};

/// Matched schedules for the three targets: level k applies sigma_k to clip
/// features and/or replaces ratio_k of token positions with tokens from other
/// samples at the same positions. Level (0, 0) is the clean evaluation.
inline std::vector<std::pair<double, double>> default_noise_schedule() {
    return {{0.0, 0.0}, {0.25, 0.25}, {0.5, 0.5}, {1.0, 1.0}};
}

inline std::vector<NoiseLevelResult> noise_sweep(
    const GroundingModel& model, const std::vector<GroundingSample>& samples,
    std::span<const std::pair<double, double>> schedule, NoiseTarget target,
    std::uint64_t seed, std::size_t draws = 4) {
    if (schedule.empty()) throw std::domain_error("noise_sweep: empty level list");
    if (samples.size() < 2) throw std::domain_error("noise_sweep: need at least 2 samples");
    if (draws == 0) throw std::domain_error("noise_sweep: need at least 1 draw");
    std::vector<NoiseLevelResult> out;
    out.reserve(schedule.size());
    const bool hit_video = target != NoiseTarget::TextOnly;
    const bool hit_text = target != NoiseTarget::VideoOnly;
    for (std::size_t level = 0; level < schedule.size(); ++level) {
        NoiseLevelResult r;
        r.sigma = schedule[level].first;
        r.ratio = schedule[level].second;
        for (std::size_t si = 0; si < samples.size(); ++si) {
            // each sample reports its expected uncertainty under the level's
            // perturbation, estimated over a few independent draws; a single
            // draw is far too noisy to compare levels with
            double e_acc = 0.0, a_acc = 0.0;
            for (std::size_t j = 0; j < draws; ++j) {
                GroundingSample s = samples[si];
                const std::uint64_t ray =
                    0x9e3779b97f4a7c15ull * (si + 1) + 0xc2b2ae3d27d4eb4full * (j + 1);
                // per-draw streams are level-independent: each level rescales
                // the same unit perturbation and replaces a growing prefix of
                // the same shuffled positions, so levels nest and Both
                // superposes exactly the perturbations the single-modality
                // sweeps use
                if (hit_video && r.sigma > 0.0) {
                    Rng video_rng(seed ^ 0x766964ull ^ ray);
                    for (double& v : s.video.tokens.data) v += video_rng.normal(0.0, r.sigma);
                }
                if (hit_text && r.ratio > 0.0) {
                    Rng text_rng(seed ^ 0x747874ull ^ ray);
                    const auto n_replace = static_cast<std::size_t>(
                        std::llround(r.ratio * static_cast<double>(model.spec.query_tokens)));
                    std::vector<std::size_t> positions(model.spec.query_tokens);
                    std::iota(positions.begin(), positions.end(), std::size_t{0});
                    text_rng.shuffle(positions);
                    for (std::size_t p = 0; p < n_replace; ++p) {
                        std::size_t other = text_rng.below(samples.size() - 1);
                        if (other >= si) ++other;
                        s.tokens[positions[p]] = samples[other].tokens[positions[p]];
                    }
                }
                const QueryEval q = evaluate_query(model, s);
                e_acc += q.epistemic;
                a_acc += q.aleatoric;
            }
            r.epistemic.push_back(e_acc / static_cast<double>(draws));
            r.aleatoric.push_back(a_acc / static_cast<double>(draws));
        }
        double esum = 0.0, asum = 0.0;
        for (double v : r.epistemic) esum += v;
        for (double v : r.aleatoric) asum += v;
        r.epistemic_mean = esum / static_cast<double>(r.epistemic.size());
        r.aleatoric_mean = asum / static_cast<double>(r.aleatoric.size());
        out.push_back(std::move(r));
    }
    return out;
}

/// One CSV per level: a shared evaluation grid and the epistemic-uncertainty
/// KDE of each noise target.
inline void write_sweep_kdes(const std::filesystem::path& dir,
                             const std::vector<NoiseLevelResult>& video,
                             const std::vector<NoiseLevelResult>& text,
                             const std::vector<NoiseLevelResult>& both, std::uint64_t seed,
                             std::size_t grid_points = 128) {
    if (video.size() != text.size() || video.size() != both.size())
        throw std::invalid_argument("write_sweep_kdes: level counts disagree");
    for (std::size_t level = 0; level < video.size(); ++level) {
        double lo = video[level].epistemic[0], hi = lo;
        for (const auto* r : {&video[level], &text[level], &both[level]}) {
            for (double v : r->epistemic) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        }
        const double pad = 0.05 * (hi - lo > 0.0 ? hi - lo : 1.0);
        std::vector<double> grid(grid_points);
        for (std::size_t i = 0; i < grid_points; ++i)
            grid[i] = lo - pad +
                      (hi - lo + 2.0 * pad) * static_cast<double>(i) /
                          static_cast<double>(grid_points - 1);
        const auto dv = gaussian_kde(video[level].epistemic, grid);
        const auto dt = gaussian_kde(text[level].epistemic, grid);
        const auto db = gaussian_kde(both[level].epistemic, grid);
        std::vector<std::vector<double>> rows;
        rows.reserve(grid_points);
        for (std::size_t i = 0; i < grid_points; ++i)
            rows.push_back({grid[i], dv[i], dt[i], db[i]});
        write_csv(dir / ("kde_" + std::to_string(level) + ".csv"),
                  {"seed=" + std::to_string(seed),
                   "sigma=" + format_g17(video[level].sigma),
                   "ratio=" + format_g17(video[level].ratio)},
                  {"epistemic", "video_only", "text_only", "both"}, rows);
    }
}

}  // namespace evreg
