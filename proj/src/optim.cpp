#include "kansae/optim.hpp"

#include <cmath>
#include <span>
#include <string>

#include "kansae/rng.hpp"

namespace kansae {

AdamState make_adam(const SaeParams& p, double lr, double beta1, double beta2,
                    double eps) {
    AdamState st;
    st.m.resize_like(p);
    st.v.resize_like(p);
    st.lr = lr;
    st.beta1 = beta1;
    st.beta2 = beta2;
    st.eps = eps;
    return st;
}

namespace {

void check_finite(std::span<const double> g, const char* block) {
    for (double v : g) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("adam_step: non-finite gradient in block ") + block);
        }
    }
}

void update_block(const AdamState& st, std::span<double> theta,
                  std::span<const double> g, std::span<double> m,
                  std::span<double> v) {
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    for (size_t i = 0; i < theta.size(); ++i) {
        m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
        v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        theta[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
    }
}

}  // namespace

void adam_step(AdamState& st, SaeParams& p, const Grads& g) {
    check_finite(g.w_enc.v, "w_enc");
    check_finite(g.w_dec_t.v, "w_dec");
    check_finite(g.b_pre, "b_pre");
    check_finite(g.b_enc, "b_enc");
    if (p.mode == SaeMode::kan) check_finite(g.c.v, "c");

    st.t += 1;
    update_block(st, p.w_enc.v, g.w_enc.v, st.m.w_enc.v, st.v.w_enc.v);
    update_block(st, p.w_dec_t.v, g.w_dec_t.v, st.m.w_dec_t.v, st.v.w_dec_t.v);
    update_block(st, p.b_pre, g.b_pre, st.m.b_pre, st.v.b_pre);
    update_block(st, p.b_enc, g.b_enc, st.m.b_enc, st.v.b_enc);
    if (p.mode == SaeMode::kan) {
        update_block(st, p.bank.c.v, g.c.v, st.m.c.v, st.v.c.v);
    }
}

double anneal_lambda(int e, int E, double lambda0, double lambdaE) {
    if (E < 1) throw ConfigError("anneal_lambda: E must be >= 1");
    if (e < 1 || e > E) throw ConfigError("anneal_lambda: epoch index out of range");
    if (E == 1 || e == 1) return lambda0;
    if (e == E) return lambdaE;
    return lambda0 + static_cast<double>(e - 1) / static_cast<double>(E - 1) * (lambdaE - lambda0);
}

size_t renormalize_decoder(SaeParams& p, uint64_t reinit_seed) {
    size_t reinitialized = 0;
    const double sigma = 1.0 / std::sqrt(static_cast<double>(p.d));
    for (uint32_t j = 0; j < p.latents; ++j) {
        auto col = p.w_dec_t.row(j);
        double nrm = std::sqrt(norm2(col));
        if (nrm < 1e-12) {
            Rng rng(reinit_seed ^ (0x9E3779B97F4A7C15ULL * (j + 1)));
            double acc = 0.0;
            for (uint32_t i = 0; i < p.d; ++i) {
                col[i] = sigma * rng.normal();
                acc += col[i] * col[i];
            }
            nrm = std::sqrt(acc);
            ++reinitialized;
        }
        const double inv = 1.0 / nrm;
        for (uint32_t i = 0; i < p.d; ++i) col[i] *= inv;
    }
    return reinitialized;
}

double max_decoder_norm_error(const SaeParams& p) {
    double worst = 0.0;
    for (uint32_t j = 0; j < p.latents; ++j) {
        worst = std::max(worst, std::abs(std::sqrt(norm2(p.w_dec_t.row(j))) - 1.0));
    }
    return worst;
}

}  // namespace kansae
