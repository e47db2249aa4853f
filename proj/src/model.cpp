#include "kansae/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "kansae/kernels.hpp"
#include "kansae/rng.hpp"

namespace kansae {

const char* mode_name(SaeMode m) { return m == SaeMode::kan ? "kan" : "relu"; }

SaeMode mode_from_name(const std::string& name) {
    if (name == "kan") return SaeMode::kan;
    if (name == "relu") return SaeMode::relu;
    throw ConfigError("unknown mode '" + name + "' (expected kan or relu)");
}

void check_valid(const SaeParams& p) {
    const size_t d = p.d, M = p.latents;
    if (p.w_enc.rows != M || p.w_enc.cols != d || p.w_dec_t.rows != M ||
        p.w_dec_t.cols != d || p.b_pre.size() != d || p.b_enc.size() != M) {
        throw DimensionError("SaeParams: block shapes inconsistent with d, M");
    }
    if (p.mode == SaeMode::kan) {
        if (p.bank.num_latents() != M || p.bank.c.rows != M) {
            throw DimensionError("SaeParams: spline bank must have exactly M rows");
        }
    } else if (p.bank.num_latents() != 0 || !p.bank.c.empty()) {
        throw DimensionError("SaeParams: relu mode must not carry a spline bank");
    }
}

void Grads::resize_like(const SaeParams& p) {
    w_enc = Mat(p.latents, p.d);
    w_dec_t = Mat(p.latents, p.d);
    b_pre.assign(p.d, 0.0);
    b_enc.assign(p.latents, 0.0);
    if (p.mode == SaeMode::kan) {
        c = Mat(p.bank.c.rows, p.bank.c.cols);
    } else {
        c = Mat();
    }
}

void Grads::set_zero() {
    std::fill(w_enc.v.begin(), w_enc.v.end(), 0.0);
    std::fill(w_dec_t.v.begin(), w_dec_t.v.end(), 0.0);
    std::fill(b_pre.begin(), b_pre.end(), 0.0);
    std::fill(b_enc.begin(), b_enc.end(), 0.0);
    std::fill(c.v.begin(), c.v.end(), 0.0);
}

SaeParams init_params(uint32_t d, uint32_t latents, SaeMode mode,
                      std::span<const double> x_mean, uint64_t seed,
                      int spline_k, int spline_degree) {
    if (d < 1 || latents < 1) throw ConfigError("init_params: d and M must be >= 1");
    if (x_mean.size() != d) throw DimensionError("init_params: x_mean length != d");

    SaeParams p;
    p.mode = mode;
    p.d = d;
    p.latents = latents;
    p.w_dec_t = Mat(latents, d);
    p.b_pre.assign(x_mean.begin(), x_mean.end());
    p.b_enc.assign(latents, 0.0);

    Rng rng(seed);
    const double sigma = 1.0 / std::sqrt(static_cast<double>(d));
    for (uint32_t j = 0; j < latents; ++j) {
        auto row = p.w_dec_t.row(j);
        double nrm2 = 0.0;
        for (uint32_t i = 0; i < d; ++i) {
            row[i] = sigma * rng.normal();
            nrm2 += row[i] * row[i];
        }
        const double inv = 1.0 / std::sqrt(nrm2);
        for (uint32_t i = 0; i < d; ++i) row[i] *= inv;
    }
    p.w_enc = p.w_dec_t;  // encoder starts as the decoder transpose

    if (mode == SaeMode::kan) {
        p.bank.c = Mat(latents, spline_k);
        p.bank.knots.reserve(latents);
        for (uint32_t j = 0; j < latents; ++j) {
            p.bank.knots.push_back(build_knots(-1.0, 1.0, spline_k, spline_degree));
        }
    }
    check_valid(p);
    return p;
}

namespace {

// Linear-interpolated percentile of an already sorted sample, pct in [0,100].
double percentile_sorted(const Vec& v, double pct) {
    const size_t n = v.size();
    if (n == 1) return v[0];
    const double rank = pct / 100.0 * static_cast<double>(n - 1);
    const size_t lo = static_cast<size_t>(rank);
    const size_t hi = std::min(lo + 1, n - 1);
    const double frac = rank - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

}  // namespace

size_t calibrate_knots(SaeParams& p, const ActivationStore& calib,
                       double p_lo, double p_hi) {
    if (p.mode != SaeMode::kan) throw ConfigError("calibrate_knots: kan mode only");
    if (calib.n == 0) throw ConfigError("calibrate_knots: empty calibration sample");
    if (calib.d != p.d) throw DimensionError("calibrate_knots: store d != model d");
    if (!(p_lo >= 0.0 && p_lo < p_hi && p_hi <= 100.0)) {
        throw ConfigError("calibrate_knots: percentiles must satisfy 0 <= lo < hi <= 100");
    }

    const uint32_t M = p.latents;
    const uint32_t d = p.d;
    const int K = p.bank.coeff_count();
    const int deg = p.bank.knots.empty() ? 3 : p.bank.knots[0].degree;
    size_t widened = 0;

#pragma omp parallel reduction(+ : widened)
    {
        Vec h(calib.n);
#pragma omp for schedule(static)
        for (int64_t j = 0; j < static_cast<int64_t>(M); ++j) {
            const auto w = p.w_enc.row(j);
            for (uint64_t t = 0; t < calib.n; ++t) {
                const float* xr = calib.x.data() + t * d;
                double acc = 0.0;
                for (uint32_t i = 0; i < d; ++i) {
                    acc += w[i] * (static_cast<double>(xr[i]) - p.b_pre[i]);
                }
                h[t] = acc + p.b_enc[j];
            }
            Vec sorted = h;
            std::sort(sorted.begin(), sorted.end());
            double t_lo = percentile_sorted(sorted, p_lo);
            double t_hi = percentile_sorted(sorted, p_hi);
            if (t_lo == t_hi) {
                t_lo -= 1.0;
                t_hi += 1.0;
                widened += 1;
            }
            p.bank.knots[j] = build_knots(t_lo, t_hi, K, deg);
        }
    }
    return widened;
}

std::pair<Vec, Vec> encode(const SaeParams& p, std::span<const float> x) {
    if (x.size() != p.d) throw DimensionError("encode: input length != d");
    Vec h(p.latents), z(p.latents);
    for (uint32_t j = 0; j < p.latents; ++j) {
        const auto w = p.w_enc.row(j);
        double acc = 0.0;
        for (uint32_t i = 0; i < p.d; ++i) {
            acc += w[i] * (static_cast<double>(x[i]) - p.b_pre[i]);
        }
        h[j] = acc + p.b_enc[j];
        if (p.mode == SaeMode::kan) {
            z[j] = spline_apply(p.bank, j, h[j]);
        } else {
            z[j] = std::max(h[j], 0.0);
        }
    }
    return {std::move(h), std::move(z)};
}

Vec decode(const SaeParams& p, std::span<const double> z) {
    if (z.size() != p.latents) throw DimensionError("decode: latent length != M");
    Vec x_hat(p.b_pre.begin(), p.b_pre.end());
    for (uint32_t j = 0; j < p.latents; ++j) {
        if (z[j] == 0.0) continue;
        axpy(z[j], p.w_dec_t.row(j), x_hat);
    }
    return x_hat;
}

ForwardTrace forward(const SaeParams& p, std::span<const float> x) {
    ForwardTrace tr;
    auto [h, z] = encode(p, x);
    tr.x_hat = decode(p, z);
    tr.h = std::move(h);
    tr.z = std::move(z);
    return tr;
}

LossBreakdown loss(const SaeParams& p, const ActivationStore& batch, double lambda) {
    if (lambda < 0.0) throw ConfigError("loss: lambda must be >= 0");
    if (batch.n == 0) throw ConfigError("loss: empty batch");
    if (batch.d != p.d) throw DimensionError("loss: batch d != model d");
    return loss_batch(p, TokenBatch::all(batch), lambda, 1);
}

std::pair<LossBreakdown, Grads> backward(const SaeParams& p,
                                         const ActivationStore& batch,
                                         double lambda) {
    if (lambda < 0.0) throw ConfigError("backward: lambda must be >= 0");
    if (batch.n == 0) throw ConfigError("backward: empty batch");
    if (batch.d != p.d) throw DimensionError("backward: batch d != model d");
    auto res = backward_batch_serial(p, TokenBatch::all(batch), lambda);
    return {res.loss, std::move(res.grads)};
}

namespace {

// Kink proximity per (token, latent): near a knot in kan mode, near the
// ReLU threshold in relu mode, plus the |z| corner when the l1 term is on.
void mark_risky(const SaeParams& p, const ActivationStore& batch, double lambda,
                double step, std::vector<char>& latent_risky, bool& any_risky) {
    latent_risky.assign(p.latents, 0);
    any_risky = false;
    const double margin = 10.0 * step;
    for (uint64_t t = 0; t < batch.n; ++t) {
        auto [h, z] = encode(p, batch.row(t));
        for (uint32_t j = 0; j < p.latents; ++j) {
            bool risky = false;
            if (p.mode == SaeMode::kan) {
                for (double u : p.bank.knots[j].knots) {
                    if (std::abs(h[j] - u) < margin) {
                        risky = true;
                        break;
                    }
                }
                if (lambda > 0.0 && std::abs(z[j]) < margin) risky = true;
            } else {
                if (std::abs(h[j]) < margin) risky = true;
            }
            if (risky) {
                latent_risky[j] = 1;
                any_risky = true;
            }
        }
    }
}

double total_loss(const SaeParams& p, const ActivationStore& batch, double lambda) {
    return loss(p, batch, lambda).total;
}

}  // namespace

double grad_check(const SaeParams& p, const ActivationStore& batch,
                  double lambda, double step) {
    if (step <= 0.0) throw ConfigError("grad_check: step must be > 0");
    auto [lb, grads] = backward(p, batch, lambda);
    (void)lb;

    std::vector<char> latent_risky;
    bool any_risky = false;
    mark_risky(p, batch, lambda, step, latent_risky, any_risky);

    SaeParams q = p;  // mutable copy for the probes
    double max_rel = 0.0;
    auto probe = [&](double* theta, double analytic) {
        const double saved = *theta;
        *theta = saved + step;
        const double fp = total_loss(q, batch, lambda);
        *theta = saved - step;
        const double fm = total_loss(q, batch, lambda);
        *theta = saved;
        const double numeric = (fp - fm) / (2.0 * step);
        const double rel = std::abs(analytic - numeric) /
                           std::max({1.0, std::abs(analytic), std::abs(numeric)});
        max_rel = std::max(max_rel, rel);
    };

    for (uint32_t j = 0; j < p.latents; ++j) {
        const bool skip_enc = latent_risky[j] != 0;
        for (uint32_t i = 0; i < p.d; ++i) {
            if (!skip_enc) probe(&q.w_enc.v[j * p.d + i], grads.w_enc.v[j * p.d + i]);
            probe(&q.w_dec_t.v[j * p.d + i], grads.w_dec_t.v[j * p.d + i]);
        }
        if (!skip_enc) probe(&q.b_enc[j], grads.b_enc[j]);
        if (p.mode == SaeMode::kan && !skip_enc) {
            for (size_t k = 0; k < q.bank.c.cols; ++k) {
                probe(&q.bank.c.v[j * q.bank.c.cols + k], grads.c.v[j * q.bank.c.cols + k]);
            }
        }
    }
    if (!any_risky) {
        for (uint32_t i = 0; i < p.d; ++i) probe(&q.b_pre[i], grads.b_pre[i]);
    }
    return max_rel;
}

}  // namespace kansae
