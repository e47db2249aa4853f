#include "kansae/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "kansae/data.hpp"
#include "kansae/metrics.hpp"
#include "kansae/rng.hpp"
#include "kansae/steer.hpp"
#include "kansae/train.hpp"

namespace kansae::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Schema helpers: unknown keys are rejected everywhere, before any work.
// ---------------------------------------------------------------------------

void check_keys(const json& obj, const std::string& where,
                std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& item : obj.items()) {
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* k) {
                return item.key() == k;
            }) == allowed.end()) {
            throw ConfigError(where + ": unknown key '" + item.key() + "'");
        }
    }
}

template <typename T>
T req(const json& obj, const char* key, const std::string& where) {
    if (!obj.contains(key)) throw ConfigError(where + ": missing required key '" + key + "'");
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(where + ": key '" + key + "' has the wrong type");
    }
}

template <typename T>
T opt(const json& obj, const char* key, T fallback, const std::string& where) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(where + ": key '" + key + "' has the wrong type");
    }
}

GridMeta parse_grid(const json& g, const std::string& where) {
    check_keys(g, where, {"n_days", "height", "width", "lat0", "dlat", "lon0", "dlon"});
    GridMeta m;
    m.n_days = req<uint32_t>(g, "n_days", where);
    m.height = req<uint32_t>(g, "height", where);
    m.width = req<uint32_t>(g, "width", where);
    m.lat0 = req<double>(g, "lat0", where);
    m.dlat = req<double>(g, "dlat", where);
    m.lon0 = req<double>(g, "lon0", where);
    m.dlon = req<double>(g, "dlon", where);
    return m;
}

RegionSpec parse_region(const json& r, const std::string& where) {
    check_keys(r, where, {"lat_min", "lat_max", "lon_min", "lon_max"});
    RegionSpec spec;
    spec.lat_min = req<double>(r, "lat_min", where);
    spec.lat_max = req<double>(r, "lat_max", where);
    spec.lon_min = req<double>(r, "lon_min", where);
    spec.lon_max = req<double>(r, "lon_max", where);
    spec.validate();
    return spec;
}

struct Experiment {
    json root;
    uint64_t seed = 0;
    fs::path out_dir;
    int threads = 0;  // 0: all cores; 1: deterministic reference path
};

Experiment load_experiment(const std::string& config_path,
                           const std::optional<std::string>& out_override,
                           const std::optional<uint64_t>& seed_override) {
    std::ifstream f(config_path);
    if (!f) throw IoError("cannot open config: " + config_path);
    json root = json::parse(f, nullptr, false);
    if (root.is_discarded()) throw ConfigError("config is not valid JSON: " + config_path);
    check_keys(root, "config", {"seed", "out_dir", "synth", "train", "compare", "steer"});

    Experiment exp;
    exp.root = std::move(root);
    exp.seed = req<uint64_t>(exp.root, "seed", "config");
    if (seed_override) exp.seed = *seed_override;
    exp.out_dir = out_override ? fs::path(*out_override)
                               : fs::path(opt<std::string>(exp.root, "out_dir", ".", "config"));

    if (const char* env = std::getenv("KANSAE_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1) {
            throw ConfigError("KANSAE_THREADS must be a positive integer");
        }
        exp.threads = static_cast<int>(v);
    }
    return exp;
}

const json& section(const Experiment& exp, const char* name) {
    if (!exp.root.contains(name)) {
        throw ConfigError(std::string("config: missing '") + name + "' section");
    }
    return exp.root.at(name);
}

fs::path prepare_out(const Experiment& exp) {
    std::error_code ec;
    fs::create_directories(exp.out_dir, ec);
    if (ec) throw IoError("cannot create output directory: " + exp.out_dir.string());
    return exp.out_dir;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc | std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

int cmd_synth(const Experiment& exp) {
    const json& s = section(exp, "synth");
    const std::string where = "synth";
    check_keys(s, where,
               {"n_true", "d", "n_tokens", "p_active", "gate_mix", "theta", "saturation",
                "noise_sigma", "grid", "out_prefix"});
    SynthConfig cfg;
    cfg.n_true = req<uint32_t>(s, "n_true", where);
    cfg.d = req<uint32_t>(s, "d", where);
    cfg.n_tokens = req<uint64_t>(s, "n_tokens", where);
    cfg.p_active = req<double>(s, "p_active", where);
    if (s.contains("gate_mix")) {
        const json& g = s.at("gate_mix");
        check_keys(g, where + ".gate_mix", {"none", "threshold", "saturate", "both"});
        cfg.mix_none = opt<double>(g, "none", 0.0, where);
        cfg.mix_threshold = opt<double>(g, "threshold", 0.0, where);
        cfg.mix_saturate = opt<double>(g, "saturate", 0.0, where);
        cfg.mix_both = opt<double>(g, "both", 0.0, where);
    }
    cfg.theta = opt<double>(s, "theta", 0.5, where);
    cfg.sat = opt<double>(s, "saturation", 1.5, where);
    cfg.noise_sigma = opt<double>(s, "noise_sigma", 0.01, where);
    if (s.contains("grid")) cfg.grid = parse_grid(s.at("grid"), where + ".grid");
    cfg.seed = derive_seed(exp.seed, "synth");
    cfg.validate();

    const std::string prefix = opt<std::string>(s, "out_prefix", "synth", where);
    const fs::path out = prepare_out(exp);
    auto [store, gt] = synth_generate(cfg);
    write_activations(store, (out / (prefix + ".kact")).string());
    write_ground_truth(gt, (out / (prefix + ".truth.json")).string(),
                       (out / (prefix + ".codes.bin")).string());
    std::cout << "synth: wrote " << store.n << " x " << store.d << " tokens to "
              << (out / (prefix + ".kact")).string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

TrainConfig parse_train(const json& t, uint64_t seed, std::string* data_path,
                        std::string* prefix) {
    const std::string where = "train";
    check_keys(t, where,
               {"data", "mode", "latents", "epochs", "batch_size", "lr", "beta1", "beta2",
                "lambda0", "lambdaE", "spline_k", "spline_degree", "calib_tokens",
                "percentile_lo", "percentile_hi", "tau", "activation_eps",
                "checkpoint_every", "out_prefix"});
    *data_path = req<std::string>(t, "data", where);
    *prefix = opt<std::string>(t, "out_prefix", "model", where);

    TrainConfig cfg;
    cfg.mode = mode_from_name(req<std::string>(t, "mode", where));
    cfg.latents = req<uint32_t>(t, "latents", where);
    cfg.epochs = opt<int>(t, "epochs", 100, where);
    cfg.batch_size = opt<uint32_t>(t, "batch_size", 4096, where);
    cfg.lr = opt<double>(t, "lr", 1e-4, where);
    cfg.beta1 = opt<double>(t, "beta1", 0.9, where);
    cfg.beta2 = opt<double>(t, "beta2", 0.999, where);
    cfg.lambda0 = opt<double>(t, "lambda0", 5e-5, where);
    cfg.lambdaE = opt<double>(t, "lambdaE", 1e-4, where);
    cfg.spline_k = opt<int>(t, "spline_k", 9, where);
    cfg.spline_degree = opt<int>(t, "spline_degree", 3, where);
    cfg.calib_tokens = opt<uint64_t>(t, "calib_tokens", 50000, where);
    cfg.percentile_lo = opt<double>(t, "percentile_lo", 1.0, where);
    cfg.percentile_hi = opt<double>(t, "percentile_hi", 99.0, where);
    cfg.activation_eps = opt<double>(t, "activation_eps", 0.0, where);
    cfg.checkpoint_every = opt<int>(t, "checkpoint_every", 0, where);
    cfg.seed = seed;
    if (t.contains("tau")) {
        const json& tv = t.at("tau");
        if (tv.is_string()) {
            if (tv.get<std::string>() != "auto") {
                throw ConfigError("train: tau must be a number or \"auto\"");
            }
        } else if (tv.is_number()) {
            cfg.tau = tv.get<double>();
        } else {
            throw ConfigError("train: tau must be a number or \"auto\"");
        }
    }
    cfg.validate();
    return cfg;
}

json train_config_echo(const TrainConfig& cfg) {
    json j;
    j["mode"] = mode_name(cfg.mode);
    j["latents"] = cfg.latents;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["lr"] = cfg.lr;
    j["beta1"] = cfg.beta1;
    j["beta2"] = cfg.beta2;
    j["lambda0"] = cfg.lambda0;
    j["lambdaE"] = cfg.lambdaE;
    j["spline_k"] = cfg.spline_k;
    j["spline_degree"] = cfg.spline_degree;
    j["calib_tokens"] = cfg.calib_tokens;
    j["percentile_lo"] = cfg.percentile_lo;
    j["percentile_hi"] = cfg.percentile_hi;
    if (cfg.tau) {
        j["tau"] = *cfg.tau;
    } else {
        j["tau"] = "auto";
    }
    j["activation_eps"] = cfg.activation_eps;
    j["seed"] = cfg.seed;
    return j;
}

std::string trainlog_jsonl(const TrainLog& log) {
    // Wall time stays off disk so reruns are byte-identical.
    std::string out;
    for (const auto& r : log) {
        json j;
        j["epoch"] = r.epoch;
        j["lambda"] = r.lambda;
        j["recon"] = r.recon;
        j["sparsity"] = r.sparsity;
        j["total"] = r.total;
        j["alive"] = r.alive;
        out += j.dump();
        out += "\n";
    }
    return out;
}

void write_alive_json(const fs::path& path, const std::vector<size_t>& alive,
                      double resolved_tau, uint64_t latents) {
    json j;
    j["alive"] = alive;
    j["count"] = alive.size();
    j["latents"] = latents;
    if (std::isnan(resolved_tau)) {
        j["tau"] = nullptr;
    } else {
        j["tau"] = resolved_tau;
    }
    write_text(path, j.dump(2) + "\n");
}

int cmd_train(const Experiment& exp) {
    std::string data_path, prefix;
    const TrainConfig cfg = parse_train(section(exp, "train"), exp.seed, &data_path, &prefix);
    const ActivationStore store = read_activations(data_path);
    if (store.n == 0) throw ConfigError("train: empty activation store");
    const fs::path out = prepare_out(exp);

    TrainState st = train_init(cfg, store, exp.threads);
    TrainLog log;
    TrainStatus status = TrainStatus::ok;
    const json echo = train_config_echo(cfg);

    int done = 0;
    while (done < cfg.epochs && status == TrainStatus::ok) {
        const int chunk = cfg.checkpoint_every > 0
                              ? std::min(cfg.checkpoint_every, cfg.epochs - done)
                              : cfg.epochs - done;
        status = train_epochs(st, store, chunk, log, exp.threads);
        done = st.epochs_done;
        for (size_t i = log.size() - (status == TrainStatus::ok ? chunk : 0); i < log.size(); ++i) {
            const auto& r = log[i];
            std::cout << "epoch " << r.epoch << " lambda " << r.lambda << " recon " << r.recon
                      << " l1 " << r.sparsity << " alive " << r.alive << " ("
                      << r.wall_seconds << " s)\n";
        }
        if (status == TrainStatus::ok && cfg.checkpoint_every > 0 && done < cfg.epochs) {
            Checkpoint ck{st.params, st.adam, cfg.tau, st.epochs_done, echo};
            char name[64];
            std::snprintf(name, sizeof name, "%s.epoch%04d.ksck", prefix.c_str(), done);
            save_checkpoint(ck, (out / name).string());
        }
    }

    if (status == TrainStatus::numeric_abort) {
        // Keep the last epoch-boundary state so the run can be inspected.
        Checkpoint ck{st.params, st.adam, cfg.tau, st.epochs_done, echo};
        save_checkpoint(ck, (out / (prefix + ".lastgood.ksck")).string());
        write_text(out / (prefix + ".trainlog.jsonl"), trainlog_jsonl(log));
        std::cerr << "train: non-finite loss at epoch " << (st.epochs_done + 1)
                  << "; last-good checkpoint retained\n";
        return 4;
    }

    double resolved_tau = 0.0;
    const std::vector<size_t> alive = final_alive_set(st, store, exp.threads, &resolved_tau);
    Checkpoint ck{st.params, st.adam,
                  cfg.mode == SaeMode::kan ? std::optional<double>(resolved_tau) : std::nullopt,
                  st.epochs_done, echo};
    save_checkpoint(ck, (out / (prefix + ".ksck")).string());
    write_text(out / (prefix + ".trainlog.jsonl"), trainlog_jsonl(log));
    write_alive_json(out / (prefix + ".alive.json"), alive, resolved_tau, cfg.latents);
    std::cout << "train: " << alive.size() << "/" << cfg.latents << " alive features; wrote "
              << (out / (prefix + ".ksck")).string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

std::vector<size_t> checkpoint_alive(const Checkpoint& ck, const ActivationStore& eval_store,
                                     double activation_eps, int threads, double* tau_out) {
    if (ck.params.mode == SaeMode::kan) {
        double tau;
        if (ck.tau) {
            tau = *ck.tau;
        } else {
            tau = fit_tau(control_row_maxima(ck.params.bank));
        }
        if (tau_out) *tau_out = tau;
        return alive_set(ck.params.bank, tau);
    }
    if (tau_out) *tau_out = std::numeric_limits<double>::quiet_NaN();
    return alive_relu(ck.params, eval_store, activation_eps, threads);
}

int cmd_compare(const Experiment& exp) {
    const json& c = section(exp, "compare");
    const std::string where = "compare";
    check_keys(c, where,
               {"checkpoint_a", "checkpoint_b", "data", "region", "corr_threshold",
                "activation_eps", "out_prefix"});
    const auto path_a = req<std::string>(c, "checkpoint_a", where);
    const auto path_b = req<std::string>(c, "checkpoint_b", where);
    const auto data_path = req<std::string>(c, "data", where);
    const double corr_threshold = opt<double>(c, "corr_threshold", 0.3, where);
    const double activation_eps = opt<double>(c, "activation_eps", 0.0, where);
    std::optional<RegionSpec> region;
    if (c.contains("region")) region = parse_region(c.at("region"), where + ".region");
    const std::string prefix = opt<std::string>(c, "out_prefix", "compare", where);

    const ActivationStore eval_store = read_activations(data_path);
    const Checkpoint ck_a = load_checkpoint(path_a);
    const Checkpoint ck_b = load_checkpoint(path_b);
    if (ck_a.params.d != eval_store.d || ck_b.params.d != eval_store.d) {
        throw DimensionError("compare: checkpoint d does not match evaluation store");
    }

    std::vector<MetricsReport> reports;
    for (const Checkpoint* ck : {&ck_a, &ck_b}) {
        const std::vector<size_t> alive =
            checkpoint_alive(*ck, eval_store, activation_eps, exp.threads, nullptr);
        MetricsReport r =
            evaluate_model(ck->params, alive, eval_store, region, corr_threshold, exp.threads);
        reports.push_back(std::move(r));
    }
    reports[0].model_name = std::string(mode_name(ck_a.params.mode)) + "_a";
    reports[1].model_name = std::string(mode_name(ck_b.params.mode)) + "_b";

    const fs::path out = prepare_out(exp);
    json j;
    j["a"] = report_to_json(reports[0]);
    j["b"] = report_to_json(reports[1]);
    write_text(out / (prefix + ".json"), j.dump(2) + "\n");
    write_text(out / (prefix + ".csv"), reports_to_csv(reports));
    std::cout << reports_to_csv(reports);
    return 0;
}

// ---------------------------------------------------------------------------
// steer
// ---------------------------------------------------------------------------

int cmd_steer(const Experiment& exp, bool force_flag) {
    const json& s = section(exp, "steer");
    const std::string where = "steer";
    check_keys(s, where,
               {"checkpoint", "data", "feature", "alphas", "downstream", "emit_map",
                "map_alpha", "force", "activation_eps", "out_prefix"});
    const auto ck_path = req<std::string>(s, "checkpoint", where);
    const auto data_path = req<std::string>(s, "data", where);
    const auto feature = req<uint64_t>(s, "feature", where);
    Vec alphas = opt<Vec>(s, "alphas", Vec{0.0, 0.5, 1.0, 2.0}, where);
    const bool emit_map = opt<bool>(s, "emit_map", false, where);
    const double map_alpha = opt<double>(s, "map_alpha", 2.0, where);
    const bool force = force_flag || opt<bool>(s, "force", false, where);
    const double activation_eps = opt<double>(s, "activation_eps", 0.0, where);
    const std::string prefix = opt<std::string>(s, "out_prefix", "steer", where);

    std::string kind = "linear";
    uint64_t ds_seed = derive_seed(exp.seed, "downstream");
    std::optional<RegionSpec> ds_region;
    if (s.contains("downstream")) {
        const json& d = s.at("downstream");
        check_keys(d, where + ".downstream", {"kind", "seed", "region"});
        kind = opt<std::string>(d, "kind", "linear", where);
        ds_seed = opt<uint64_t>(d, "seed", ds_seed, where);
        if (d.contains("region")) {
            ds_region = parse_region(d.at("region"), where + ".downstream.region");
        }
    }

    const Checkpoint ck = load_checkpoint(ck_path);
    const ActivationStore store = read_activations(data_path);
    if (ck.params.d != store.d) {
        throw DimensionError("steer: checkpoint d does not match store");
    }
    if (feature >= ck.params.latents) {
        throw IndexError("steer: feature index out of range");
    }
    const std::vector<size_t> alive =
        checkpoint_alive(ck, store, activation_eps, exp.threads, nullptr);
    const bool is_alive = std::find(alive.begin(), alive.end(), feature) != alive.end();
    if (!is_alive && !force) {
        throw ConfigError("steer: feature " + std::to_string(feature) +
                          " is dead; pass --force to steer it anyway");
    }

    DownstreamMap down;
    if (kind == "linear") {
        down = make_linear_readout(ck.params.d, ds_seed);
    } else if (kind == "quadratic") {
        down = make_quadratic_readout(ck.params.d, ds_seed);
    } else if (kind == "regional_linear") {
        // Scalar dose-response still uses the plain linear readout; the
        // regional variant only shapes the anomaly map below.
        down = make_linear_readout(ck.params.d, ds_seed);
    } else {
        throw ConfigError("steer: unknown downstream kind '" + kind + "'");
    }

    const DoseResponse dr = dose_response(down, ck.params, feature, alphas, store);

    const fs::path out = prepare_out(exp);
    json j;
    j["feature"] = feature;
    j["alphas"] = dr.alphas;
    j["responses"] = dr.responses;
    j["slope"] = dr.slope;
    j["intercept"] = dr.intercept;
    j["r_squared"] = dr.r_squared;
    j["zero_response"] = dr.zero_response;
    j["downstream"] = kind;
    write_text(out / (prefix + ".dose.json"), j.dump(2) + "\n");
    std::string csv = "alpha,response\n";
    for (size_t i = 0; i < dr.alphas.size(); ++i) {
        char line[80];
        std::snprintf(line, sizeof line, "%.12g,%.12g\n", dr.alphas[i], dr.responses[i]);
        csv += line;
    }
    write_text(out / (prefix + ".dose.csv"), csv);

    if (emit_map) {
        if (!store.meta) throw ConfigError("steer: emit_map requires grid metadata");
        CellDownstreamMap cell_down;
        if (kind == "regional_linear") {
            if (!ds_region) {
                throw ConfigError("steer: regional_linear downstream needs a region");
            }
            cell_down = make_regional_linear_readout(ck.params.d, ds_seed, *store.meta,
                                                     ds_region->lat_min, ds_region->lat_max,
                                                     ds_region->lon_min, ds_region->lon_max);
        } else {
            cell_down = [down](uint32_t, std::span<const double> x) { return down(x); };
        }
        const Mat map = regional_response_map(cell_down, ck.params, feature, map_alpha, store);
        const GridMeta& m = *store.meta;
        std::string mcsv = "row,col,lat,lon,anomaly\n";
        for (uint32_t r = 0; r < m.height; ++r) {
            for (uint32_t c2 = 0; c2 < m.width; ++c2) {
                char line[120];
                std::snprintf(line, sizeof line, "%u,%u,%.12g,%.12g,%.12g\n", r, c2,
                              m.lat0 + r * m.dlat, m.lon0 + c2 * m.dlon, map.at(r, c2));
                mcsv += line;
            }
        }
        write_text(out / (prefix + ".map.csv"), mcsv);
    }
    std::cout << "steer: feature " << feature << " slope " << dr.slope << " r^2 "
              << dr.r_squared << (dr.zero_response ? " (zero response)" : "") << "\n";
    return 0;
}

}  // namespace

int run(int argc, char** argv) {
    CLI::App app{"KAN-SAE: sparse autoencoders with learnable B-spline activations"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::string> out_override;
    std::optional<uint64_t> seed_override;
    bool force = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config (JSON)")->required();
        sub->add_option_function<std::string>(
            "--out", [&](const std::string& v) { out_override = v; }, "output directory");
        sub->add_option_function<uint64_t>(
            "--seed", [&](uint64_t v) { seed_override = v; }, "override config seed");
    };
    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic activation store");
    CLI::App* train = app.add_subcommand("train", "train a KAN or ReLU SAE");
    CLI::App* compare = app.add_subcommand("compare", "evaluate two checkpoints side by side");
    CLI::App* steer = app.add_subcommand("steer", "dose-response steering of one feature");
    for (CLI::App* sub : {synth, train, compare, steer}) add_common(sub);
    steer->add_flag("--force", force, "steer a dead feature anyway");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        const Experiment exp = load_experiment(config_path, out_override, seed_override);
        if (synth->parsed()) return cmd_synth(exp);
        if (train->parsed()) return cmd_train(exp);
        if (compare->parsed()) return cmd_compare(exp);
        if (steer->parsed()) return cmd_steer(exp, force);
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace kansae::cli
