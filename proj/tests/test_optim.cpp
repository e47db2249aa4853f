#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "kansae/optim.hpp"
#include "kansae/rng.hpp"

using namespace kansae;

namespace {

SaeParams small_params(SaeMode mode = SaeMode::relu) {
    Vec mean(4, 0.0);
    return init_params(4, 3, mode, mean, 2024);
}

}  // namespace

TEST_CASE("adam_step: zero gradients are a fixed point, t increments") {
    SaeParams p = small_params();
    AdamState st = make_adam(p);
    Grads g;
    g.resize_like(p);
    const Mat w_before = p.w_enc;
    adam_step(st, p, g);
    CHECK(st.t == 1);
    CHECK(p.w_enc.v == w_before.v);
    adam_step(st, p, g);
    CHECK(st.t == 2);
    CHECK(p.w_enc.v == w_before.v);
}

TEST_CASE("adam_step: first step from zero state has magnitude ~ lr") {
    // Hand evaluation of the first Adam step with constant gradient g:
    //   m_hat = g, v_hat = g^2  =>  delta = -lr * g / (|g| + eps).
    SaeParams p = small_params();
    AdamState st = make_adam(p, 1e-4, 0.9, 0.999);
    CHECK(st.lr == 1e-4);
    CHECK(st.beta1 == 0.9);
    CHECK(st.beta2 == 0.999);
    Grads g;
    g.resize_like(p);
    const double gv = 0.37;
    for (auto& v : g.w_enc.v) v = gv;
    const double before = p.w_enc.v[0];
    adam_step(st, p, g);
    const double delta = p.w_enc.v[0] - before;
    const double want = -st.lr * gv / (gv + st.eps);
    CHECK(delta == doctest::Approx(want).epsilon(1e-12));
    CHECK(std::abs(delta) == doctest::Approx(st.lr).epsilon(1e-6));
}

TEST_CASE("adam_step: non-finite gradient aborts naming the block") {
    SaeParams p = small_params();
    AdamState st = make_adam(p);
    Grads g;
    g.resize_like(p);
    g.b_enc[1] = std::numeric_limits<double>::quiet_NaN();
    try {
        adam_step(st, p, g);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("b_enc") != std::string::npos);
    }
    CHECK(st.t == 0);  // aborted before the update
}

TEST_CASE("anneal_lambda: paper schedule endpoints and midpoint") {
    CHECK(anneal_lambda(1, 100, 5e-5, 1e-4) == 5e-5);
    CHECK(anneal_lambda(100, 100, 5e-5, 1e-4) == 1e-4);
    CHECK(anneal_lambda(51, 101, 0.0, 1.0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(anneal_lambda(1, 1, 3e-4, 9e-4) == 3e-4);  // degenerate schedule
    CHECK_THROWS_AS(anneal_lambda(0, 10, 0.0, 1.0), ConfigError);
    CHECK_THROWS_AS(anneal_lambda(11, 10, 0.0, 1.0), ConfigError);

    double prev = -1.0;
    for (int e = 1; e <= 100; ++e) {
        const double l = anneal_lambda(e, 100, 5e-5, 1e-4);
        CHECK(l >= prev);
        prev = l;
    }
}

TEST_CASE("renormalize_decoder: 3-4-5 column, idempotence, dead column") {
    SaeParams p = small_params();
    p.w_dec_t.row(0)[0] = 3.0;
    p.w_dec_t.row(0)[1] = 4.0;
    p.w_dec_t.row(0)[2] = 0.0;
    p.w_dec_t.row(0)[3] = 0.0;
    CHECK(renormalize_decoder(p, 1) == 0);
    CHECK(p.w_dec_t.at(0, 0) == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(p.w_dec_t.at(0, 1) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(max_decoder_norm_error(p) < 1e-12);

    const Mat before = p.w_dec_t;
    renormalize_decoder(p, 1);
    for (size_t i = 0; i < before.v.size(); ++i) {
        CHECK(std::abs(p.w_dec_t.v[i] - before.v[i]) < 1e-15);
    }

    for (auto& v : p.w_dec_t.row(2)) v = 0.0;
    CHECK(renormalize_decoder(p, 7) == 1);
    CHECK(std::abs(std::sqrt(norm2(p.w_dec_t.row(2))) - 1.0) < 1e-12);
    // Deterministic per seed.
    SaeParams q = small_params();
    for (auto& v : q.w_dec_t.row(2)) v = 0.0;
    renormalize_decoder(q, 7);
    CHECK(q.w_dec_t.row(2)[0] == p.w_dec_t.row(2)[0]);
}
