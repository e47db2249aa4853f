#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "kansae/model.hpp"
#include "kansae/rng.hpp"

using namespace kansae;

namespace {

ActivationStore store_from(const std::vector<std::vector<float>>& rows) {
    ActivationStore s;
    s.n = rows.size();
    s.d = static_cast<uint32_t>(rows[0].size());
    for (const auto& r : rows) s.x.insert(s.x.end(), r.begin(), r.end());
    return s;
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

// Random model with calibrated knots and non-trivial control points.
SaeParams random_model(uint32_t d, uint32_t m, SaeMode mode, uint64_t seed,
                       const ActivationStore& calib) {
    Vec mean(d, 0.0);
    SaeParams p = init_params(d, m, mode, mean, seed);
    Rng rng(seed ^ 0xabcdef);
    for (auto& v : p.b_enc) v = 0.1 * rng.normal();
    for (auto& v : p.b_pre) v = 0.1 * rng.normal();
    if (mode == SaeMode::kan) {
        calibrate_knots(p, calib);
        for (auto& v : p.bank.c.v) v = rng.normal();
    }
    return p;
}

}  // namespace

TEST_CASE("init_params: unit decoder columns, tied encoder, zero splines") {
    Vec mean(384, 0.25);
    const SaeParams p = init_params(384, 1024, SaeMode::kan, mean, 123);
    CHECK(static_cast<double>(p.latents) / p.d == doctest::Approx(2.67).epsilon(0.01));
    for (uint32_t j = 0; j < p.latents; ++j) {
        CHECK(std::abs(std::sqrt(norm2(p.w_dec_t.row(j))) - 1.0) < 1e-9);
        for (uint32_t i = 0; i < p.d; ++i) {
            CHECK(p.w_enc.at(j, i) == p.w_dec_t.at(j, i));
        }
    }
    for (double v : p.b_pre) CHECK(v == 0.25);
    for (double v : p.b_enc) CHECK(v == 0.0);
    for (double v : p.bank.c.v) CHECK(v == 0.0);

    // Same seed, same bits.
    const SaeParams q = init_params(384, 1024, SaeMode::kan, mean, 123);
    CHECK(q.w_dec_t.v == p.w_dec_t.v);

    // Zero control points encode everything to z = 0.
    std::vector<float> x(p.d, 1.5f);
    const auto [h, z] = encode(p, x);
    for (double v : z) CHECK(v == 0.0);
}

TEST_CASE("init_params: relu mode carries no bank") {
    Vec mean(8, 0.0);
    const SaeParams p = init_params(8, 16, SaeMode::relu, mean, 5);
    CHECK(p.bank.num_latents() == 0);
    check_valid(p);
}

TEST_CASE("calibrate_knots: percentile spans and degenerate widening") {
    const uint32_t d = 4, m = 3;
    Vec mean(d, 0.0);
    SaeParams p = init_params(d, m, SaeMode::kan, mean, 17);
    // Rig latent 0 to produce a constant pre-activation of 5.
    for (uint32_t i = 0; i < d; ++i) p.w_enc.at(0, i) = 0.0;
    p.b_enc[0] = 5.0;

    const ActivationStore calib = random_store(512, d, 99);
    const size_t widened = calibrate_knots(p, calib, 1.0, 99.0);
    CHECK(widened == 1);
    CHECK(p.bank.knots[0].t_lo == doctest::Approx(4.0));
    CHECK(p.bank.knots[0].t_hi == doctest::Approx(6.0));
    // Non-degenerate latents got real percentile spans.
    CHECK(p.bank.knots[1].t_lo < p.bank.knots[1].t_hi);

    SaeParams relu = init_params(d, m, SaeMode::relu, mean, 17);
    CHECK_THROWS_AS(calibrate_knots(relu, calib, 1.0, 99.0), ConfigError);
}

TEST_CASE("encode/decode: basic contracts") {
    const uint32_t d = 3, m = 2;
    Vec mean{1.0, -2.0, 0.5};
    SaeParams p = init_params(d, m, SaeMode::relu, mean, 7);

    // x = b_pre gives h = 0, z = 0 (b_enc is zero at init).
    std::vector<float> x{1.0f, -2.0f, 0.5f};
    const auto [h, z] = encode(p, x);
    for (double v : h) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
    for (double v : z) CHECK(v == 0.0);

    // Manual relu: h = (-1, 2) -> z = (0, 2).
    SaeParams q = p;
    for (uint32_t i = 0; i < d; ++i) {
        q.w_enc.at(0, i) = 0.0;
        q.w_enc.at(1, i) = 0.0;
    }
    q.b_enc = {-1.0, 2.0};
    const auto [h2, z2] = encode(q, x);
    CHECK(h2[0] == -1.0);
    CHECK(h2[1] == 2.0);
    CHECK(z2[0] == 0.0);
    CHECK(z2[1] == 2.0);

    // decode(0) = b_pre; decode(e_j) = column j + b_pre.
    const Vec zero(m, 0.0);
    CHECK(decode(p, zero) == p.b_pre);
    Vec e1(m, 0.0);
    e1[1] = 1.0;
    const Vec dec = decode(p, e1);
    for (uint32_t i = 0; i < d; ++i) {
        CHECK(dec[i] == doctest::Approx(p.b_pre[i] + p.w_dec_t.at(1, i)).epsilon(1e-15));
    }

    std::vector<float> too_short{1.0f};
    CHECK_THROWS_AS(encode(p, too_short), DimensionError);
    CHECK_THROWS_AS(decode(p, Vec{1.0}), DimensionError);
}

TEST_CASE("encode: identity-reproducing splines give z = h") {
    const uint32_t d = 6, m = 4;
    Vec mean(d, 0.0);
    SaeParams p = init_params(d, m, SaeMode::kan, mean, 21);
    const ActivationStore calib = random_store(256, d, 3);
    calibrate_knots(p, calib);
    for (uint32_t j = 0; j < m; ++j) {
        const Vec grev = greville_abscissae(p.bank.knots[j]);
        for (size_t k = 0; k < grev.size(); ++k) p.bank.c.at(j, k) = grev[k];
    }
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<float> x(d);
        for (auto& v : x) v = static_cast<float>(0.3 * rng.normal());
        const auto [h, z] = encode(p, x);
        for (uint32_t j = 0; j < m; ++j) {
            if (h[j] >= p.bank.knots[j].t_lo && h[j] <= p.bank.knots[j].t_hi) {
                CHECK(z[j] == doctest::Approx(h[j]).epsilon(1e-10));
            }
        }
    }
}

TEST_CASE("decode(encode(x)) with zero control points returns b_pre exactly") {
    const uint32_t d = 5, m = 8;
    Vec mean{0.1, 0.2, 0.3, 0.4, 0.5};
    const SaeParams p = init_params(d, m, SaeMode::kan, mean, 31);
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<float> x(d);
        for (auto& v : x) v = static_cast<float>(rng.normal());
        const ForwardTrace tr = forward(p, x);
        CHECK(tr.x_hat == p.b_pre);
    }
}

TEST_CASE("relu z is nonnegative for random inputs") {
    const uint32_t d = 8, m = 16;
    const ActivationStore calib = random_store(64, d, 12);
    const SaeParams p = random_model(d, m, SaeMode::relu, 77, calib);
    Rng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<float> x(d);
        for (auto& v : x) v = static_cast<float>(2.0 * rng.normal());
        const auto [h, z] = encode(p, x);
        for (double v : z) CHECK(v >= 0.0);
    }
}

TEST_CASE("loss: trivial cases and a hand-computed scalar oracle") {
    const uint32_t d = 2, m = 2;
    Vec mean{0.5, -0.5};
    SaeParams p = init_params(d, m, SaeMode::relu, mean, 3);

    const ActivationStore at_bpre = store_from({{0.5f, -0.5f}, {0.5f, -0.5f}});
    const LossBreakdown lb0 = loss(p, at_bpre, 0.1);
    CHECK(lb0.recon == 0.0);
    CHECK(lb0.sparsity == 0.0);
    CHECK(lb0.total == 0.0);

    // Hand-set 2x2 model, one example, scalar arithmetic done long-hand:
    //   b_pre = (0, 0), b_enc = (0.1, -0.2)
    //   W_enc = [[1, 2], [0, 1]]  W_dec columns = [[1, 0], [0.6, 0.8]]
    //   x = (1, 2)
    //   h = (1*1 + 2*2 + 0.1, 0*1 + 1*2 - 0.2) = (5.1, 1.8); z = h (positive)
    //   x_hat = 5.1*(1,0) + 1.8*(0.6,0.8) = (6.18, 1.44)
    //   recon = (6.18-1)^2 + (1.44-2)^2 = 26.8324 + 0.3136 = 27.146
    //   l1 = 6.9; total(lambda=0.5) = 27.146 + 3.45 = 30.596
    p.b_pre = {0.0, 0.0};
    p.b_enc = {0.1, -0.2};
    p.w_enc.at(0, 0) = 1.0;
    p.w_enc.at(0, 1) = 2.0;
    p.w_enc.at(1, 0) = 0.0;
    p.w_enc.at(1, 1) = 1.0;
    p.w_dec_t.at(0, 0) = 1.0;
    p.w_dec_t.at(0, 1) = 0.0;
    p.w_dec_t.at(1, 0) = 0.6;
    p.w_dec_t.at(1, 1) = 0.8;
    const ActivationStore one = store_from({{1.0f, 2.0f}});
    const LossBreakdown lb = loss(p, one, 0.5);
    CHECK(lb.recon == doctest::Approx(27.146).epsilon(1e-12));
    CHECK(lb.sparsity == doctest::Approx(6.9).epsilon(1e-12));
    CHECK(lb.total == doctest::Approx(30.596).epsilon(1e-12));
    CHECK(lb.total == lb.recon + lb.lambda * lb.sparsity);

    const LossBreakdown nol1 = loss(p, one, 0.0);
    CHECK(nol1.total == nol1.recon);

    ActivationStore empty;
    empty.d = d;
    CHECK_THROWS_AS(loss(p, empty, 0.1), ConfigError);
}

TEST_CASE("backward: zero-coefficient structure lets learning start") {
    const uint32_t d = 4, m = 6;
    Vec mean(d, 0.0);
    const SaeParams p = init_params(d, m, SaeMode::kan, mean, 41);
    const ActivationStore batch = random_store(8, d, 15);
    const auto [lb, g] = backward(p, batch, 1e-4);
    (void)lb;
    // z == 0 everywhere: reconstruction ignores W_enc, so its gradient is 0...
    for (double v : g.w_enc.v) CHECK(v == 0.0);
    for (double v : g.b_enc) CHECK(v == 0.0);
    // ...but the control points still receive signal through B_k(h_j).
    double c_norm = 0.0;
    for (double v : g.c.v) c_norm += std::abs(v);
    CHECK(c_norm > 0.0);
}

TEST_CASE("backward: b_pre gradient at z = 0 is 2 mean(b_pre - x)") {
    const uint32_t d = 3, m = 4;
    Vec mean{0.2, -0.1, 0.4};
    const SaeParams p = init_params(d, m, SaeMode::kan, mean, 51);
    const ActivationStore batch = random_store(16, d, 23);
    const auto [lb, g] = backward(p, batch, 0.0);
    (void)lb;
    for (uint32_t i = 0; i < d; ++i) {
        double want = 0.0;
        for (uint64_t t = 0; t < batch.n; ++t) {
            want += 2.0 * (p.b_pre[i] - static_cast<double>(batch.row(t)[i]));
        }
        want /= static_cast<double>(batch.n);
        CHECK(g.b_pre[i] == doctest::Approx(want).epsilon(1e-10));
    }
}

TEST_CASE("grad_check: random models in both modes") {
    const ActivationStore calib = random_store(256, 16, 71);
    const ActivationStore batch = random_store(4, 16, 72);

    const SaeParams kan = random_model(16, 8, SaeMode::kan, 81, calib);
    CHECK(grad_check(kan, batch, 1e-3, 1e-5) < 1e-4);

    const SaeParams relu = random_model(16, 8, SaeMode::relu, 82, calib);
    CHECK(grad_check(relu, batch, 1e-3, 1e-5) < 1e-4);
}

TEST_CASE("grad_check: quadratic-only region is near machine accuracy") {
    const uint32_t d = 6, m = 4;
    Vec mean(d, 0.0);
    const SaeParams p = init_params(d, m, SaeMode::kan, mean, 91);  // z == 0
    const ActivationStore batch = random_store(4, d, 92);
    CHECK(grad_check(p, batch, 0.0, 1e-5) < 1e-6);
}

TEST_CASE("grad_check: rejects non-positive step") {
    Vec mean(4, 0.0);
    const SaeParams p = init_params(4, 4, SaeMode::relu, mean, 1);
    const ActivationStore batch = random_store(2, 4, 2);
    CHECK_THROWS_AS(grad_check(p, batch, 0.0, 0.0), ConfigError);
}

TEST_CASE("forward determinism: same seed, same bits") {
    const ActivationStore calib = random_store(128, 8, 5);
    const SaeParams a = random_model(8, 12, SaeMode::kan, 55, calib);
    const SaeParams b = random_model(8, 12, SaeMode::kan, 55, calib);
    std::vector<float> x(8, 0.7f);
    const ForwardTrace ta = forward(a, x);
    const ForwardTrace tb = forward(b, x);
    CHECK(ta.z == tb.z);
    CHECK(ta.x_hat == tb.x_hat);
}
