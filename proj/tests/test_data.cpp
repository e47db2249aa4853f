#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "kansae/data.hpp"
#include "kansae/rng.hpp"

using namespace kansae;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

ActivationStore random_store(uint64_t n, uint32_t d, uint64_t seed) {
    Rng rng(seed);
    ActivationStore s;
    s.n = n;
    s.d = d;
    s.x.resize(n * d);
    for (auto& v : s.x) v = static_cast<float>(rng.normal());
    return s;
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::vector<char>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("KACT: round trip is bit-exact, with and without grid meta") {
    ActivationStore s = random_store(10, 4, 31);
    const std::string path = tmp_path("t_kact_rt.kact");
    write_activations(s, path);
    const ActivationStore r = read_activations(path);
    CHECK(r.n == s.n);
    CHECK(r.d == s.d);
    CHECK(r.x == s.x);
    CHECK(!r.meta);

    ActivationStore g = random_store(2 * 3 * 5, 2, 32);
    g.meta = GridMeta{2, 3, 5, -45.0, 1.5, 10.0, 2.5};
    write_activations(g, path);
    const ActivationStore rg = read_activations(path);
    REQUIRE(rg.meta.has_value());
    CHECK(rg.meta->n_days == 2);
    CHECK(rg.meta->height == 3);
    CHECK(rg.meta->width == 5);
    CHECK(rg.meta->lat0 == -45.0);
    CHECK(rg.meta->dlat == 1.5);
    CHECK(rg.meta->lon0 == 10.0);
    CHECK(rg.meta->dlon == 2.5);
    CHECK(rg.x == g.x);
    std::remove(path.c_str());
}

TEST_CASE("KACT: malformed files give typed errors") {
    ActivationStore s = random_store(6, 3, 41);
    const std::string path = tmp_path("t_kact_bad.kact");
    write_activations(s, path);
    const std::vector<char> good = slurp(path);

    std::vector<char> bad_magic = good;
    bad_magic[0] = 'X';
    spit(path, bad_magic);
    CHECK_THROWS_AS(read_activations(path), FormatError);

    std::vector<char> bad_version = good;
    bad_version[4] = 9;
    spit(path, bad_version);
    CHECK_THROWS_AS(read_activations(path), FormatError);

    std::vector<char> truncated(good.begin(), good.end() - 5);
    spit(path, truncated);
    CHECK_THROWS_AS(read_activations(path), FormatError);

    std::vector<char> oversized = good;
    oversized.push_back(0);
    spit(path, oversized);
    CHECK_THROWS_AS(read_activations(path), FormatError);

    CHECK_THROWS_AS(read_activations(tmp_path("does_not_exist.kact")), IoError);

    s.x[3] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(write_activations(s, path), NumericError);

    ActivationStore inconsistent = random_store(4, 2, 5);
    inconsistent.meta = GridMeta{4, 4, 4, 0, 1, 0, 1};  // 64 != 4 tokens
    CHECK_THROWS_AS(write_activations(inconsistent, path), DimensionError);
    std::remove(path.c_str());
}

TEST_CASE("KSCK: round trip is bit-exact including Adam moments") {
    const uint32_t d = 5, m = 7;
    Vec mean(d, 0.1);
    Checkpoint ck;
    ck.params = init_params(d, m, SaeMode::kan, mean, 2025);
    Rng rng(9);
    for (auto& v : ck.params.bank.c.v) v = rng.normal();
    for (uint32_t j = 0; j < m; ++j) {
        ck.params.bank.knots[j] = build_knots(-1.0 - j * 0.1, 2.0 + j * 0.05, 9, 3);
    }
    AdamState st = make_adam(ck.params, 3e-4);
    st.t = 17;
    for (auto& v : st.m.w_enc.v) v = rng.normal();
    for (auto& v : st.v.c.v) v = std::abs(rng.normal());
    ck.adam = st;
    ck.tau = 1.4021;
    ck.epochs_done = 12;
    ck.train_config = {{"note", "roundtrip"}};

    const std::string path = tmp_path("t_ksck_rt.ksck");
    save_checkpoint(ck, path);
    const Checkpoint r = load_checkpoint(path);
    CHECK(r.params.mode == SaeMode::kan);
    CHECK(r.params.w_enc.v == ck.params.w_enc.v);
    CHECK(r.params.w_dec_t.v == ck.params.w_dec_t.v);
    CHECK(r.params.b_pre == ck.params.b_pre);
    CHECK(r.params.b_enc == ck.params.b_enc);
    CHECK(r.params.bank.c.v == ck.params.bank.c.v);
    for (uint32_t j = 0; j < m; ++j) {
        CHECK(r.params.bank.knots[j].knots == ck.params.bank.knots[j].knots);
    }
    REQUIRE(r.adam.has_value());
    CHECK(r.adam->t == 17);
    CHECK(r.adam->lr == 3e-4);
    CHECK(r.adam->m.w_enc.v == st.m.w_enc.v);
    CHECK(r.adam->v.c.v == st.v.c.v);
    REQUIRE(r.tau.has_value());
    CHECK(*r.tau == 1.4021);
    CHECK(r.epochs_done == 12);
    CHECK(r.train_config.at("note") == "roundtrip");

    // Header defaults record the spline configuration.
    std::ifstream f(path, std::ios::binary);
    f.seekg(16);
    std::string header(1024, '\0');
    f.read(header.data(), 1024);
    CHECK(header.find("\"spline_k\":9") != std::string::npos);
    CHECK(header.find("\"spline_degree\":3") != std::string::npos);
    std::remove(path.c_str());
}

TEST_CASE("KSCK: relu round trip without optimizer state") {
    Vec mean(3, 0.0);
    Checkpoint ck;
    ck.params = init_params(3, 4, SaeMode::relu, mean, 11);
    const std::string path = tmp_path("t_ksck_relu.ksck");
    save_checkpoint(ck, path);
    const Checkpoint r = load_checkpoint(path);
    CHECK(r.params.mode == SaeMode::relu);
    CHECK(!r.adam.has_value());
    CHECK(!r.tau.has_value());
    CHECK(r.params.w_enc.v == ck.params.w_enc.v);
    std::remove(path.c_str());
}

TEST_CASE("KSCK: header/blob inconsistency is a typed error") {
    Vec mean(3, 0.0);
    Checkpoint ck;
    ck.params = init_params(3, 4, SaeMode::relu, mean, 11);
    const std::string path = tmp_path("t_ksck_bad.ksck");
    save_checkpoint(ck, path);
    std::vector<char> bytes = slurp(path);

    // Claim more latents than the blobs provide.
    std::vector<char> wrong = bytes;
    const std::string needle = "\"latents\":4";
    auto it = std::search(wrong.begin(), wrong.end(), needle.begin(), needle.end());
    REQUIRE(it != wrong.end());
    *(it + needle.size() - 1) = '9';
    spit(path, wrong);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);

    std::vector<char> truncated(bytes.begin(), bytes.end() - 9);
    spit(path, truncated);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);

    std::vector<char> bad_magic = bytes;
    bad_magic[1] = 'x';
    spit(path, bad_magic);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    std::remove(path.c_str());
}

TEST_CASE("synth: p_active = 0 with zero noise reproduces the bias rows") {
    SynthConfig cfg;
    cfg.n_true = 4;
    cfg.d = 6;
    cfg.n_tokens = 20;
    cfg.p_active = 0.0;
    cfg.noise_sigma = 0.0;
    cfg.seed = 77;
    const auto [store, gt] = synth_generate(cfg);
    CHECK(gt.code_token.empty());
    for (uint64_t t = 0; t < store.n; ++t) {
        for (uint32_t i = 0; i < store.d; ++i) {
            CHECK(store.row(t)[i] == static_cast<float>(gt.bias[i]));
        }
    }
}

TEST_CASE("synth: rank-1 check with a single ungated feature") {
    SynthConfig cfg;
    cfg.n_true = 1;
    cfg.d = 5;
    cfg.n_tokens = 200;
    cfg.p_active = 0.5;
    cfg.mix_none = 1.0;
    cfg.mix_threshold = cfg.mix_saturate = cfg.mix_both = 0.0;
    cfg.noise_sigma = 0.0;
    cfg.seed = 3;
    const auto [store, gt] = synth_generate(cfg);
    // Every row lies on b + span(d1): x - b is parallel to d1.
    for (uint64_t t = 0; t < store.n; ++t) {
        Vec r(store.d);
        for (uint32_t i = 0; i < store.d; ++i) {
            r[i] = static_cast<double>(store.row(t)[i]) - gt.bias[i];
        }
        const double proj = dot(r, gt.dictionary.row(0));
        double off = 0.0;
        for (uint32_t i = 0; i < store.d; ++i) {
            off += std::abs(r[i] - proj * gt.dictionary.at(0, i));
        }
        CHECK(off < 1e-5);  // f32 storage round-off
    }
}

TEST_CASE("synth: stored ground truth reconstructs the emitted tokens") {
    SynthConfig cfg;
    cfg.n_true = 16;
    cfg.d = 12;
    cfg.n_tokens = 2000;
    cfg.p_active = 0.1;
    cfg.noise_sigma = 0.01;
    cfg.seed = 91;
    const auto [store, gt] = synth_generate(cfg);

    // Rebuild x from (D, A, b); the residual must be the injected noise.
    Mat rebuilt(store.n, store.d);
    for (uint64_t t = 0; t < store.n; ++t) {
        std::copy(gt.bias.begin(), gt.bias.end(), rebuilt.row(t).begin());
    }
    for (size_t e = 0; e < gt.code_token.size(); ++e) {
        axpy(gt.code_alpha[e], gt.dictionary.row(gt.code_feature[e]),
             rebuilt.row(gt.code_token[e]));
    }
    double sq = 0.0;
    for (uint64_t t = 0; t < store.n; ++t) {
        for (uint32_t i = 0; i < store.d; ++i) {
            const double diff = static_cast<double>(store.row(t)[i]) - rebuilt.at(t, i);
            sq += diff * diff;
        }
    }
    const double mean_sq = sq / static_cast<double>(store.n * store.d);
    // Residual power matches noise_sigma^2 within 5%.
    CHECK(mean_sq == doctest::Approx(cfg.noise_sigma * cfg.noise_sigma).epsilon(0.05));

    // Unit-norm dictionary rows.
    for (uint32_t j = 0; j < cfg.n_true; ++j) {
        CHECK(std::abs(std::sqrt(norm2(gt.dictionary.row(j))) - 1.0) < 1e-12);
    }

    // Empirical fire frequency within 3 sigma of p_active per feature.
    std::vector<uint64_t> fires(cfg.n_true, 0);
    for (uint32_t f : gt.code_feature) fires[f]++;
    const double bound =
        3.0 * std::sqrt(cfg.p_active * (1.0 - cfg.p_active) / static_cast<double>(cfg.n_tokens));
    for (uint32_t j = 0; j < cfg.n_true; ++j) {
        const double freq = static_cast<double>(fires[j]) / static_cast<double>(cfg.n_tokens);
        CHECK(std::abs(freq - cfg.p_active) <= bound);
    }
}

TEST_CASE("synth: deterministic per seed, config validation") {
    SynthConfig cfg;
    cfg.n_true = 3;
    cfg.d = 4;
    cfg.n_tokens = 50;
    cfg.seed = 8;
    const auto [a, gta] = synth_generate(cfg);
    const auto [b, gtb] = synth_generate(cfg);
    CHECK(a.x == b.x);
    CHECK(gta.code_alpha == gtb.code_alpha);

    SynthConfig bad = cfg;
    bad.p_active = 1.5;
    CHECK_THROWS_AS(synth_generate(bad), ConfigError);
    bad = cfg;
    bad.mix_none = 0.4;  // mix now sums to 1.4
    CHECK_THROWS_AS(synth_generate(bad), ConfigError);
    bad = cfg;
    bad.grid = GridMeta{5, 2, 2, 0, 1, 0, 1};  // 20 != 50
    CHECK_THROWS_AS(synth_generate(bad), ConfigError);
}

TEST_CASE("gates: threshold, saturate, both") {
    GateSpec g;
    g.theta = 0.5;
    g.sat = 1.5;
    g.kind = GateKind::none;
    CHECK(g.apply(2.0) == 2.0);
    g.kind = GateKind::threshold;
    CHECK(g.apply(0.3) == 0.0);
    CHECK(g.apply(2.0) == 1.5);
    g.kind = GateKind::saturate;
    CHECK(g.apply(0.3) == 0.3);
    CHECK(g.apply(2.0) == 1.5);
    g.kind = GateKind::both;
    CHECK(g.apply(0.3) == 0.0);
    CHECK(g.apply(2.5) == doctest::Approx(1.5));
}

TEST_CASE("ground-truth sidecar round trip") {
    SynthConfig cfg;
    cfg.n_true = 5;
    cfg.d = 4;
    cfg.n_tokens = 100;
    cfg.p_active = 0.2;
    cfg.seed = 6;
    const auto [store, gt] = synth_generate(cfg);
    const std::string jp = tmp_path("t_truth.json");
    const std::string cp = tmp_path("t_codes.bin");
    write_ground_truth(gt, jp, cp);
    const SynthGroundTruth r = read_ground_truth(jp, cp);
    CHECK(r.dictionary.v == gt.dictionary.v);
    CHECK(r.bias == gt.bias);
    CHECK(r.code_token == gt.code_token);
    CHECK(r.code_feature == gt.code_feature);
    CHECK(r.code_alpha == gt.code_alpha);
    REQUIRE(r.gates.size() == gt.gates.size());
    for (size_t i = 0; i < r.gates.size(); ++i) {
        CHECK(r.gates[i].kind == gt.gates[i].kind);
    }
    std::remove(jp.c_str());
    std::remove(cp.c_str());
}

TEST_CASE("sample_calibration: permutation, determinism, size error") {
    const ActivationStore s = random_store(32, 3, 13);
    const ActivationStore all = sample_calibration(s, 32, 5);
    CHECK(all.n == 32);
    // A permutation of all rows: every original row appears exactly once.
    std::vector<bool> seen(32, false);
    for (uint64_t i = 0; i < all.n; ++i) {
        bool matched = false;
        for (uint64_t t = 0; t < s.n; ++t) {
            if (seen[t]) continue;
            if (std::equal(all.row(i).begin(), all.row(i).end(), s.row(t).begin())) {
                seen[t] = true;
                matched = true;
                break;
            }
        }
        CHECK(matched);
    }

    const ActivationStore a = sample_calibration(s, 10, 42);
    const ActivationStore b = sample_calibration(s, 10, 42);
    CHECK(a.x == b.x);
    const ActivationStore c = sample_calibration(s, 10, 43);
    CHECK(a.x != c.x);
    CHECK_THROWS_AS(sample_calibration(s, 33, 1), ConfigError);
}
