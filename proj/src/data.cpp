#include "kansae/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include "kansae/rng.hpp"

namespace kansae {

namespace {

static_assert(std::endian::native == std::endian::little,
              "byte-swapping read/write paths are not implemented");

template <typename T>
void put(std::ofstream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& f, const char* what) {
    T v;
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f) throw FormatError(std::string("truncated file while reading ") + what);
    return v;
}

void put_bytes(std::ofstream& f, const void* p, size_t n) {
    f.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void get_bytes(std::ifstream& f, void* p, size_t n, const char* what) {
    f.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
    if (f.gcount() != static_cast<std::streamsize>(n)) {
        throw FormatError(std::string("truncated payload while reading ") + what);
    }
}

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    return f;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    return f;
}

uint64_t file_size(std::ifstream& f) {
    const auto pos = f.tellg();
    f.seekg(0, std::ios::end);
    const auto end = f.tellg();
    f.seekg(pos);
    return static_cast<uint64_t>(end);
}

void expect_magic(std::ifstream& f, const char* magic, const char* container) {
    char got[4];
    get_bytes(f, got, 4, "magic");
    if (std::memcmp(got, magic, 4) != 0) {
        throw FormatError(std::string(container) + ": bad magic");
    }
}

}  // namespace

ActivationStore slice_rows(const ActivationStore& s, uint64_t begin, uint64_t end) {
    if (begin > end || end > s.n) throw IndexError("slice_rows: range out of bounds");
    ActivationStore out;
    out.n = end - begin;
    out.d = s.d;
    out.x.assign(s.x.begin() + begin * s.d, s.x.begin() + end * s.d);
    return out;
}

void write_activations(const ActivationStore& store, const std::string& path) {
    store.check();
    for (float v : store.x) {
        if (!std::isfinite(v)) {
            throw NumericError("write_activations: non-finite value in store");
        }
    }
    auto f = open_out(path);
    put_bytes(f, "KACT", 4);
    put<uint32_t>(f, 1);
    put<uint64_t>(f, store.n);
    put<uint32_t>(f, store.d);
    put<uint32_t>(f, store.meta ? 1u : 0u);
    if (store.meta) {
        put<uint32_t>(f, store.meta->n_days);
        put<uint32_t>(f, store.meta->height);
        put<uint32_t>(f, store.meta->width);
        put<double>(f, store.meta->lat0);
        put<double>(f, store.meta->dlat);
        put<double>(f, store.meta->lon0);
        put<double>(f, store.meta->dlon);
    }
    put_bytes(f, store.x.data(), store.x.size() * sizeof(float));
    f.flush();
    if (!f) throw IoError("write failed: " + path);
}

ActivationStore read_activations(const std::string& path) {
    auto f = open_in(path);
    const uint64_t total = file_size(f);
    expect_magic(f, "KACT", "KACT");
    const auto version = get<uint32_t>(f, "version");
    if (version != 1) throw FormatError("KACT: unsupported version");
    ActivationStore s;
    s.n = get<uint64_t>(f, "N");
    s.d = get<uint32_t>(f, "d");
    const auto flags = get<uint32_t>(f, "flags");
    if (flags > 1) throw FormatError("KACT: unknown flag bits");
    uint64_t header = 4 + 4 + 8 + 4 + 4;
    if (flags & 1) {
        GridMeta m;
        m.n_days = get<uint32_t>(f, "n_days");
        m.height = get<uint32_t>(f, "H");
        m.width = get<uint32_t>(f, "W");
        m.lat0 = get<double>(f, "lat0");
        m.dlat = get<double>(f, "dlat");
        m.lon0 = get<double>(f, "lon0");
        m.dlon = get<double>(f, "dlon");
        s.meta = m;
        header += 3 * 4 + 4 * 8;
    }
    if (s.d == 0) throw FormatError("KACT: zero hidden dimension");
    const uint64_t want = s.n * static_cast<uint64_t>(s.d) * sizeof(float);
    if (total != header + want) {
        throw FormatError(total < header + want ? "KACT: truncated payload"
                                                : "KACT: payload size mismatch");
    }
    s.x.resize(s.n * s.d);
    get_bytes(f, s.x.data(), want, "payload");
    s.check();
    return s;
}

// ---------------------------------------------------------------------------
// KSCK
// ---------------------------------------------------------------------------

namespace {

void put_blob(std::ofstream& f, std::span<const double> v) {
    put_bytes(f, v.data(), v.size() * sizeof(double));
}

void get_blob(std::ifstream& f, std::span<double> v, const char* what) {
    get_bytes(f, v.data(), v.size() * sizeof(double), what);
}

uint64_t grads_scalar_count(const SaeParams& p) {
    uint64_t n = 2ull * p.latents * p.d + p.d + p.latents;
    if (p.mode == SaeMode::kan) n += p.bank.c.v.size();
    return n;
}

void put_grads(std::ofstream& f, const Grads& g) {
    put_blob(f, g.w_enc.v);
    put_blob(f, g.w_dec_t.v);
    put_blob(f, g.b_pre);
    put_blob(f, g.b_enc);
    if (!g.c.empty()) put_blob(f, g.c.v);
}

void get_grads(std::ifstream& f, Grads& g, const char* what) {
    get_blob(f, g.w_enc.v, what);
    get_blob(f, g.w_dec_t.v, what);
    get_blob(f, g.b_pre, what);
    get_blob(f, g.b_enc, what);
    if (!g.c.empty()) get_blob(f, g.c.v, what);
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    const SaeParams& p = ck.params;
    check_valid(p);

    nlohmann::json h;
    h["mode"] = mode_name(p.mode);
    h["d"] = p.d;
    h["latents"] = p.latents;
    h["spline_k"] = p.mode == SaeMode::kan ? p.bank.coeff_count() : 9;
    h["spline_degree"] =
        p.mode == SaeMode::kan && !p.bank.knots.empty() ? p.bank.knots[0].degree : 3;
    if (ck.tau) {
        h["tau"] = *ck.tau;
    } else {
        h["tau"] = nullptr;
    }
    h["epochs_done"] = ck.epochs_done;
    h["train_config"] = ck.train_config;
    if (p.mode == SaeMode::kan) {
        nlohmann::json spans = nlohmann::json::array();
        for (const auto& kv : p.bank.knots) {
            spans.push_back({kv.t_lo, kv.t_hi});
        }
        h["knot_spans"] = std::move(spans);
    }
    nlohmann::json adam;
    adam["present"] = ck.adam.has_value();
    if (ck.adam) {
        adam["t"] = ck.adam->t;
        adam["lr"] = ck.adam->lr;
        adam["beta1"] = ck.adam->beta1;
        adam["beta2"] = ck.adam->beta2;
        adam["eps"] = ck.adam->eps;
    }
    h["adam"] = std::move(adam);

    const std::string header = h.dump();
    auto f = open_out(path);
    put_bytes(f, "KSCK", 4);
    put<uint32_t>(f, 1);
    put<uint64_t>(f, header.size());
    put_bytes(f, header.data(), header.size());
    put_blob(f, p.w_enc.v);
    put_blob(f, p.w_dec_t.v);
    put_blob(f, p.b_pre);
    put_blob(f, p.b_enc);
    if (p.mode == SaeMode::kan) put_blob(f, p.bank.c.v);
    if (ck.adam) {
        put_grads(f, ck.adam->m);
        put_grads(f, ck.adam->v);
    }
    f.flush();
    if (!f) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    auto f = open_in(path);
    const uint64_t total = file_size(f);
    expect_magic(f, "KSCK", "KSCK");
    const auto version = get<uint32_t>(f, "version");
    if (version != 1) throw FormatError("KSCK: unsupported version");
    const auto header_len = get<uint64_t>(f, "header length");
    if (header_len > total) throw FormatError("KSCK: header length exceeds file size");
    std::string header(header_len, '\0');
    get_bytes(f, header.data(), header_len, "header");

    nlohmann::json h = nlohmann::json::parse(header, nullptr, false);
    if (h.is_discarded()) throw FormatError("KSCK: header is not valid JSON");

    Checkpoint ck;
    try {
        SaeParams& p = ck.params;
        p.mode = mode_from_name(h.at("mode").get<std::string>());
        p.d = h.at("d").get<uint32_t>();
        p.latents = h.at("latents").get<uint32_t>();
        const int K = h.at("spline_k").get<int>();
        const int deg = h.at("spline_degree").get<int>();
        if (!h.at("tau").is_null()) ck.tau = h.at("tau").get<double>();
        ck.epochs_done = h.at("epochs_done").get<int>();
        ck.train_config = h.at("train_config");

        if (p.d == 0 || p.latents == 0) throw FormatError("KSCK: zero dimensions");
        p.w_enc = Mat(p.latents, p.d);
        p.w_dec_t = Mat(p.latents, p.d);
        p.b_pre.assign(p.d, 0.0);
        p.b_enc.assign(p.latents, 0.0);
        if (p.mode == SaeMode::kan) {
            const auto& spans = h.at("knot_spans");
            if (!spans.is_array() || spans.size() != p.latents) {
                throw FormatError("KSCK: knot_spans size does not match latents");
            }
            p.bank.c = Mat(p.latents, K);
            p.bank.knots.reserve(p.latents);
            for (const auto& sp : spans) {
                p.bank.knots.push_back(
                    build_knots(sp.at(0).get<double>(), sp.at(1).get<double>(), K, deg));
            }
        }

        const auto& adam = h.at("adam");
        const bool has_adam = adam.at("present").get<bool>();
        const uint64_t scalars = grads_scalar_count(p);
        const uint64_t blob_bytes = scalars * sizeof(double) * (has_adam ? 3 : 1);
        const uint64_t expect = 4 + 4 + 8 + header_len + blob_bytes;
        if (total != expect) {
            throw FormatError(total < expect
                                  ? "KSCK: truncated blobs"
                                  : "KSCK: blob size inconsistent with header");
        }

        get_blob(f, ck.params.w_enc.v, "w_enc");
        get_blob(f, ck.params.w_dec_t.v, "w_dec");
        get_blob(f, ck.params.b_pre, "b_pre");
        get_blob(f, ck.params.b_enc, "b_enc");
        if (p.mode == SaeMode::kan) get_blob(f, ck.params.bank.c.v, "c");
        if (has_adam) {
            AdamState st;
            st.m.resize_like(p);
            st.v.resize_like(p);
            st.t = adam.at("t").get<uint64_t>();
            st.lr = adam.at("lr").get<double>();
            st.beta1 = adam.at("beta1").get<double>();
            st.beta2 = adam.at("beta2").get<double>();
            st.eps = adam.at("eps").get<double>();
            get_grads(f, st.m, "adam.m");
            get_grads(f, st.v, "adam.v");
            ck.adam = std::move(st);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("KSCK: malformed header: ") + e.what());
    }
    check_valid(ck.params);
    return ck;
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

const char* gate_kind_name(GateKind k) {
    switch (k) {
        case GateKind::none: return "none";
        case GateKind::threshold: return "threshold";
        case GateKind::saturate: return "saturate";
        case GateKind::both: return "both";
    }
    return "none";
}

double GateSpec::apply(double a) const {
    switch (kind) {
        case GateKind::none: return a;
        case GateKind::threshold: return std::max(a - theta, 0.0);
        case GateKind::saturate: return std::min(a, sat);
        case GateKind::both: return std::min(std::max(a - theta, 0.0), sat);
    }
    return a;
}

void SynthConfig::validate() const {
    if (n_true < 1) throw ConfigError("synth: n_true must be >= 1");
    if (d < 2) throw ConfigError("synth: d must be >= 2");
    if (n_tokens < 1) throw ConfigError("synth: n_tokens must be >= 1");
    if (!(p_active >= 0.0 && p_active <= 1.0)) {
        throw ConfigError("synth: p_active must lie in [0, 1]");
    }
    const double mix[4] = {mix_none, mix_threshold, mix_saturate, mix_both};
    double sum = 0.0;
    for (double m : mix) {
        if (m < 0.0) throw ConfigError("synth: gate mix fractions must be >= 0");
        sum += m;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("synth: gate mix must sum to 1");
    if (noise_sigma < 0.0) throw ConfigError("synth: noise_sigma must be >= 0");
    if (grid && grid->tokens() != n_tokens) {
        throw ConfigError("synth: grid n_days*H*W must equal n_tokens");
    }
}

std::pair<ActivationStore, SynthGroundTruth> synth_generate(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);

    SynthGroundTruth gt;
    gt.noise_sigma = cfg.noise_sigma;
    gt.p_active = cfg.p_active;
    gt.seed = cfg.seed;
    gt.dictionary = Mat(cfg.n_true, cfg.d);
    for (uint32_t j = 0; j < cfg.n_true; ++j) {
        auto row = gt.dictionary.row(j);
        double nrm2 = 0.0;
        for (uint32_t i = 0; i < cfg.d; ++i) {
            row[i] = rng.normal();
            nrm2 += row[i] * row[i];
        }
        const double inv = 1.0 / std::sqrt(nrm2);
        for (uint32_t i = 0; i < cfg.d; ++i) row[i] *= inv;
    }
    gt.bias.resize(cfg.d);
    const double bias_sigma = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    for (uint32_t i = 0; i < cfg.d; ++i) gt.bias[i] = bias_sigma * rng.normal();

    gt.gates.resize(cfg.n_true);
    for (uint32_t j = 0; j < cfg.n_true; ++j) {
        const double u = rng.uniform();
        GateSpec g;
        g.theta = cfg.theta;
        g.sat = cfg.sat;
        if (u < cfg.mix_none) {
            g.kind = GateKind::none;
        } else if (u < cfg.mix_none + cfg.mix_threshold) {
            g.kind = GateKind::threshold;
        } else if (u < cfg.mix_none + cfg.mix_threshold + cfg.mix_saturate) {
            g.kind = GateKind::saturate;
        } else {
            g.kind = GateKind::both;
        }
        gt.gates[j] = g;
    }

    ActivationStore store;
    store.n = cfg.n_tokens;
    store.d = cfg.d;
    store.meta = cfg.grid;
    store.x.resize(cfg.n_tokens * static_cast<uint64_t>(cfg.d));

    Vec xbuf(cfg.d);
    for (uint64_t t = 0; t < cfg.n_tokens; ++t) {
        std::copy(gt.bias.begin(), gt.bias.end(), xbuf.begin());
        for (uint32_t j = 0; j < cfg.n_true; ++j) {
            if (rng.uniform() >= cfg.p_active) continue;
            const double a = rng.exponential();
            const double alpha = gt.gates[j].apply(a);
            gt.code_token.push_back(t);
            gt.code_feature.push_back(j);
            gt.code_alpha.push_back(static_cast<float>(alpha));
            if (alpha != 0.0) {
                axpy(alpha, gt.dictionary.row(j), xbuf);
            }
        }
        if (cfg.noise_sigma > 0.0) {
            for (uint32_t i = 0; i < cfg.d; ++i) {
                xbuf[i] += cfg.noise_sigma * rng.normal();
            }
        }
        float* out = store.x.data() + t * cfg.d;
        for (uint32_t i = 0; i < cfg.d; ++i) out[i] = static_cast<float>(xbuf[i]);
    }
    return {std::move(store), std::move(gt)};
}

void write_ground_truth(const SynthGroundTruth& gt, const std::string& json_path,
                        const std::string& codes_path) {
    nlohmann::json j;
    j["n_true"] = gt.dictionary.rows;
    j["d"] = gt.dictionary.cols;
    j["noise_sigma"] = gt.noise_sigma;
    j["p_active"] = gt.p_active;
    j["seed"] = gt.seed;
    j["bias"] = gt.bias;
    nlohmann::json dict = nlohmann::json::array();
    for (size_t r = 0; r < gt.dictionary.rows; ++r) {
        const auto row = gt.dictionary.row(r);
        dict.push_back(std::vector<double>(row.begin(), row.end()));
    }
    j["dictionary"] = std::move(dict);
    nlohmann::json gates = nlohmann::json::array();
    for (const auto& g : gt.gates) {
        gates.push_back({{"kind", gate_kind_name(g.kind)},
                         {"theta", g.theta},
                         {"sat", g.sat}});
    }
    j["gates"] = std::move(gates);

    std::ofstream jf(json_path, std::ios::trunc);
    if (!jf) throw IoError("cannot open for writing: " + json_path);
    jf << j.dump(2) << "\n";
    if (!jf) throw IoError("write failed: " + json_path);

    auto f = open_out(codes_path);
    put_bytes(f, "KCOD", 4);
    put<uint32_t>(f, 1);
    put<uint64_t>(f, gt.code_token.size());
    for (size_t i = 0; i < gt.code_token.size(); ++i) {
        put<uint64_t>(f, gt.code_token[i]);
        put<uint32_t>(f, gt.code_feature[i]);
        put<float>(f, gt.code_alpha[i]);
    }
    f.flush();
    if (!f) throw IoError("write failed: " + codes_path);
}

SynthGroundTruth read_ground_truth(const std::string& json_path,
                                   const std::string& codes_path) {
    std::ifstream jf(json_path);
    if (!jf) throw IoError("cannot open for reading: " + json_path);
    nlohmann::json j = nlohmann::json::parse(jf, nullptr, false);
    if (j.is_discarded()) throw FormatError("ground truth: invalid JSON");

    SynthGroundTruth gt;
    try {
        const auto n_true = j.at("n_true").get<uint32_t>();
        const auto d = j.at("d").get<uint32_t>();
        gt.noise_sigma = j.at("noise_sigma").get<double>();
        gt.p_active = j.at("p_active").get<double>();
        gt.seed = j.at("seed").get<uint64_t>();
        gt.bias = j.at("bias").get<Vec>();
        gt.dictionary = Mat(n_true, d);
        const auto& dict = j.at("dictionary");
        if (dict.size() != n_true) throw FormatError("ground truth: dictionary size");
        for (uint32_t r = 0; r < n_true; ++r) {
            const auto row = dict.at(r).get<Vec>();
            if (row.size() != d) throw FormatError("ground truth: dictionary row size");
            std::copy(row.begin(), row.end(), gt.dictionary.row(r).begin());
        }
        for (const auto& g : j.at("gates")) {
            GateSpec spec;
            const auto kind = g.at("kind").get<std::string>();
            if (kind == "none") spec.kind = GateKind::none;
            else if (kind == "threshold") spec.kind = GateKind::threshold;
            else if (kind == "saturate") spec.kind = GateKind::saturate;
            else if (kind == "both") spec.kind = GateKind::both;
            else throw FormatError("ground truth: unknown gate kind");
            spec.theta = g.at("theta").get<double>();
            spec.sat = g.at("sat").get<double>();
            gt.gates.push_back(spec);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("ground truth: malformed JSON: ") + e.what());
    }

    auto f = open_in(codes_path);
    expect_magic(f, "KCOD", "KCOD");
    const auto version = get<uint32_t>(f, "version");
    if (version != 1) throw FormatError("KCOD: unsupported version");
    const auto count = get<uint64_t>(f, "count");
    gt.code_token.resize(count);
    gt.code_feature.resize(count);
    gt.code_alpha.resize(count);
    for (uint64_t i = 0; i < count; ++i) {
        gt.code_token[i] = get<uint64_t>(f, "code token");
        gt.code_feature[i] = get<uint32_t>(f, "code feature");
        gt.code_alpha[i] = get<float>(f, "code alpha");
    }
    return gt;
}

ActivationStore sample_calibration(const ActivationStore& store, uint64_t n, uint64_t seed) {
    if (n > store.n) throw ConfigError("sample_calibration: n exceeds store size");
    std::vector<uint64_t> idx(store.n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (uint64_t i = 0; i < n; ++i) {
        const uint64_t j = i + rng.uniform_below(store.n - i);
        std::swap(idx[i], idx[j]);
    }
    ActivationStore out;
    out.n = n;
    out.d = store.d;
    out.x.resize(n * static_cast<uint64_t>(store.d));
    for (uint64_t i = 0; i < n; ++i) {
        const float* src = store.x.data() + idx[i] * store.d;
        std::copy(src, src + store.d, out.x.data() + i * store.d);
    }
    return out;
}

}  // namespace kansae
