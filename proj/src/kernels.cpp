#include "kansae/kernels.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace kansae {

int resolve_threads(int requested) {
#ifdef _OPENMP
    if (requested <= 0) return omp_get_max_threads();
    return requested;
#else
    (void)requested;
    return 1;
#endif
}

namespace {

struct Scratch {
    Vec xm;  // d
    Vec r;   // d
    Vec h;   // M
    Vec z;   // M
    Vec gz;  // M
    Vec gh;  // M
    std::vector<BasisLocal> loc;  // M, kan mode

    void resize(const SaeParams& p) {
        xm.resize(p.d);
        r.resize(p.d);
        h.resize(p.latents);
        z.resize(p.latents);
        gz.resize(p.latents);
        gh.resize(p.latents);
        if (p.mode == SaeMode::kan) loc.resize(p.latents);
    }
};

// Forward for one token into scratch; fills xm, h, z (and basis locals in
// kan mode). Returns sum |z|.
double token_forward(const SaeParams& p, const float* xr, Scratch& s) {
    const uint32_t d = p.d, M = p.latents;
    for (uint32_t i = 0; i < d; ++i) {
        s.xm[i] = static_cast<double>(xr[i]) - p.b_pre[i];
    }
    double l1 = 0.0;
    for (uint32_t j = 0; j < M; ++j) {
        const double* w = p.w_enc.v.data() + static_cast<size_t>(j) * d;
        double acc = 0.0;
        for (uint32_t i = 0; i < d; ++i) acc += w[i] * s.xm[i];
        const double hj = acc + p.b_enc[j];
        s.h[j] = hj;
        double zj;
        if (p.mode == SaeMode::kan) {
            BasisLocal& loc = s.loc[j];
            basis_local(p.bank.knots[j], hj, loc);
            const double* c = p.bank.c.v.data() + static_cast<size_t>(j) * p.bank.c.cols;
            zj = 0.0;
            for (int r = 0; r < loc.count; ++r) zj += c[loc.first + r] * loc.val[r];
        } else {
            zj = hj > 0.0 ? hj : 0.0;
        }
        s.z[j] = zj;
        l1 += std::abs(zj);
    }
    return l1;
}

// Residual r = x_hat - x = sum_j z_j w_dec_j - xm; returns ||r||^2.
double token_residual(const SaeParams& p, Scratch& s) {
    const uint32_t d = p.d, M = p.latents;
    for (uint32_t i = 0; i < d; ++i) s.r[i] = -s.xm[i];
    for (uint32_t j = 0; j < M; ++j) {
        const double zj = s.z[j];
        if (zj == 0.0) continue;
        const double* w = p.w_dec_t.v.data() + static_cast<size_t>(j) * d;
        for (uint32_t i = 0; i < d; ++i) s.r[i] += zj * w[i];
    }
    double sse = 0.0;
    for (uint32_t i = 0; i < d; ++i) sse += s.r[i] * s.r[i];
    return sse;
}

inline double sgn0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Accumulates one token's gradient contributions (unnormalized sums).
void token_backward(const SaeParams& p, double lambda, Scratch& s, Grads& g) {
    const uint32_t d = p.d, M = p.latents;
    for (uint32_t j = 0; j < M; ++j) {
        const double* wd = p.w_dec_t.v.data() + static_cast<size_t>(j) * d;
        double acc = 0.0;
        for (uint32_t i = 0; i < d; ++i) acc += s.r[i] * wd[i];
        s.gz[j] = 2.0 * acc + lambda * sgn0(s.z[j]);
        if (p.mode == SaeMode::kan) {
            const BasisLocal& loc = s.loc[j];
            const double* c = p.bank.c.v.data() + static_cast<size_t>(j) * p.bank.c.cols;
            double slope = 0.0;
            for (int r = 0; r < loc.count; ++r) slope += c[loc.first + r] * loc.der[r];
            s.gh[j] = s.gz[j] * slope;
        } else {
            s.gh[j] = s.h[j] > 0.0 ? s.gz[j] : 0.0;
        }
    }
    for (uint32_t j = 0; j < M; ++j) {
        const double zj = s.z[j];
        if (zj != 0.0) {
            double* gw = g.w_dec_t.v.data() + static_cast<size_t>(j) * d;
            const double a = 2.0 * zj;
            for (uint32_t i = 0; i < d; ++i) gw[i] += a * s.r[i];
        }
        if (p.mode == SaeMode::kan) {
            const BasisLocal& loc = s.loc[j];
            double* gc = g.c.v.data() + static_cast<size_t>(j) * g.c.cols;
            for (int r = 0; r < loc.count; ++r) gc[loc.first + r] += s.gz[j] * loc.val[r];
        }
        const double ghj = s.gh[j];
        if (ghj != 0.0) {
            double* gw = g.w_enc.v.data() + static_cast<size_t>(j) * d;
            for (uint32_t i = 0; i < d; ++i) gw[i] += ghj * s.xm[i];
            g.b_enc[j] += ghj;
            const double* we = p.w_enc.v.data() + static_cast<size_t>(j) * d;
            for (uint32_t i = 0; i < d; ++i) g.b_pre[i] -= ghj * we[i];
        }
    }
    for (uint32_t i = 0; i < d; ++i) g.b_pre[i] += 2.0 * s.r[i];
}

void add_into(Grads& a, const Grads& b) {
    for (size_t i = 0; i < a.w_enc.v.size(); ++i) a.w_enc.v[i] += b.w_enc.v[i];
    for (size_t i = 0; i < a.w_dec_t.v.size(); ++i) a.w_dec_t.v[i] += b.w_dec_t.v[i];
    for (size_t i = 0; i < a.b_pre.size(); ++i) a.b_pre[i] += b.b_pre[i];
    for (size_t i = 0; i < a.b_enc.size(); ++i) a.b_enc[i] += b.b_enc[i];
    for (size_t i = 0; i < a.c.v.size(); ++i) a.c.v[i] += b.c.v[i];
}

void scale(Grads& g, double a) {
    for (double& v : g.w_enc.v) v *= a;
    for (double& v : g.w_dec_t.v) v *= a;
    for (double& v : g.b_pre) v *= a;
    for (double& v : g.b_enc) v *= a;
    for (double& v : g.c.v) v *= a;
}

BatchResult run_rows(const SaeParams& p, const TokenBatch& b, double lambda,
                     uint64_t begin, uint64_t end) {
    BatchResult out;
    out.grads.resize_like(p);
    out.max_abs_z.assign(p.latents, 0.0);
    Scratch s;
    s.resize(p);
    double recon_sum = 0.0, l1_sum = 0.0;
    for (uint64_t t = begin; t < end; ++t) {
        l1_sum += token_forward(p, b.row(t), s);
        recon_sum += token_residual(p, s);
        token_backward(p, lambda, s, out.grads);
        for (uint32_t j = 0; j < p.latents; ++j) {
            out.max_abs_z[j] = std::max(out.max_abs_z[j], std::abs(s.z[j]));
        }
    }
    out.loss.recon = recon_sum;
    out.loss.sparsity = l1_sum;
    return out;
}

void finalize(BatchResult& r, double lambda, uint64_t n) {
    const double inv = 1.0 / static_cast<double>(n);
    r.loss.recon *= inv;
    r.loss.sparsity *= inv;
    r.loss.lambda = lambda;
    r.loss.total = r.loss.recon + lambda * r.loss.sparsity;
    scale(r.grads, inv);
}

}  // namespace

BatchResult backward_batch_serial(const SaeParams& p, const TokenBatch& b, double lambda) {
    if (b.size() == 0) throw ConfigError("backward_batch: empty batch");
    BatchResult r = run_rows(p, b, lambda, 0, b.size());
    finalize(r, lambda, b.size());
    return r;
}

BatchResult backward_batch(const SaeParams& p, const TokenBatch& b, double lambda, int threads) {
    const int T = resolve_threads(threads);
    const uint64_t n = b.size();
    if (n == 0) throw ConfigError("backward_batch: empty batch");
    if (T <= 1 || n < 2 * static_cast<uint64_t>(T)) {
        return backward_batch_serial(p, b, lambda);
    }
    std::vector<BatchResult> partial(T);
#pragma omp parallel num_threads(T)
    {
#ifdef _OPENMP
        const int tid = omp_get_thread_num();
        const int nt = omp_get_num_threads();
#else
        const int tid = 0;
        const int nt = 1;
#endif
        const uint64_t lo = n * tid / nt;
        const uint64_t hi = n * (tid + 1) / nt;
        partial[tid] = run_rows(p, b, lambda, lo, hi);
    }
    // Thread-ordered reduction: deterministic for a fixed thread count.
    BatchResult total = std::move(partial[0]);
    for (int t = 1; t < T; ++t) {
        if (partial[t].max_abs_z.empty()) continue;  // fewer threads spawned
        total.loss.recon += partial[t].loss.recon;
        total.loss.sparsity += partial[t].loss.sparsity;
        add_into(total.grads, partial[t].grads);
        for (uint32_t j = 0; j < p.latents; ++j) {
            total.max_abs_z[j] = std::max(total.max_abs_z[j], partial[t].max_abs_z[j]);
        }
    }
    finalize(total, lambda, n);
    return total;
}

LossBreakdown loss_batch(const SaeParams& p, const TokenBatch& b, double lambda, int threads) {
    const uint64_t n = b.size();
    if (n == 0) throw ConfigError("loss_batch: empty batch");
    const int T = resolve_threads(threads);
    std::vector<double> recon_part(T, 0.0), l1_part(T, 0.0);
#pragma omp parallel num_threads(T)
    {
#ifdef _OPENMP
        const int tid = omp_get_thread_num();
        const int nt = omp_get_num_threads();
#else
        const int tid = 0;
        const int nt = 1;
#endif
        const uint64_t lo = n * tid / nt;
        const uint64_t hi = n * (tid + 1) / nt;
        Scratch s;
        s.resize(p);
        double recon = 0.0, l1 = 0.0;
        for (uint64_t t = lo; t < hi; ++t) {
            l1 += token_forward(p, b.row(t), s);
            recon += token_residual(p, s);
        }
        recon_part[tid] = recon;
        l1_part[tid] = l1;
    }
    LossBreakdown lb;
    for (int t = 0; t < T; ++t) {
        lb.recon += recon_part[t];
        lb.sparsity += l1_part[t];
    }
    const double inv = 1.0 / static_cast<double>(n);
    lb.recon *= inv;
    lb.sparsity *= inv;
    lb.lambda = lambda;
    lb.total = lb.recon + lambda * lb.sparsity;
    return lb;
}

Vec feature_series(const SaeParams& p, const ActivationStore& s, size_t j, int threads) {
    if (j >= p.latents) throw IndexError("feature_series: latent index out of range");
    if (s.d != p.d) throw DimensionError("feature_series: store d != model d");
    Vec out(s.n, 0.0);
    const uint32_t d = p.d;
    const double* w = p.w_enc.v.data() + j * d;
    const int T = resolve_threads(threads);
#pragma omp parallel for schedule(static) num_threads(T)
    for (int64_t t = 0; t < static_cast<int64_t>(s.n); ++t) {
        const float* xr = s.x.data() + static_cast<uint64_t>(t) * d;
        double acc = 0.0;
        for (uint32_t i = 0; i < d; ++i) {
            acc += w[i] * (static_cast<double>(xr[i]) - p.b_pre[i]);
        }
        const double hj = acc + p.b_enc[j];
        out[t] = p.mode == SaeMode::kan ? spline_apply(p.bank, j, hj)
                                        : std::max(hj, 0.0);
    }
    return out;
}

Vec column_mean(const ActivationStore& s, int threads) {
    if (s.n == 0) throw ConfigError("column_mean: empty store");
    constexpr uint64_t kChunk = 4096;
    const uint64_t n_chunks = (s.n + kChunk - 1) / kChunk;
    std::vector<Vec> partial(n_chunks);
    const int T = resolve_threads(threads);
#pragma omp parallel for schedule(static) num_threads(T)
    for (int64_t c = 0; c < static_cast<int64_t>(n_chunks); ++c) {
        Vec acc(s.d, 0.0);
        const uint64_t lo = static_cast<uint64_t>(c) * kChunk;
        const uint64_t hi = std::min(s.n, lo + kChunk);
        for (uint64_t t = lo; t < hi; ++t) {
            const float* xr = s.x.data() + t * s.d;
            for (uint32_t i = 0; i < s.d; ++i) acc[i] += static_cast<double>(xr[i]);
        }
        partial[c] = std::move(acc);
    }
    Vec mean(s.d, 0.0);
    for (uint64_t c = 0; c < n_chunks; ++c) {  // chunk order: thread-count independent
        for (uint32_t i = 0; i < s.d; ++i) mean[i] += partial[c][i];
    }
    const double inv = 1.0 / static_cast<double>(s.n);
    for (double& v : mean) v *= inv;
    return mean;
}

EvalStats eval_stats(const SaeParams& p, const ActivationStore& s,
                     std::span<const double> mean, int threads) {
    if (s.n == 0) throw ConfigError("eval_stats: empty store");
    if (s.d != p.d || mean.size() != p.d) {
        throw DimensionError("eval_stats: dimension mismatch");
    }
    constexpr uint64_t kChunk = 4096;
    const uint64_t n_chunks = (s.n + kChunk - 1) / kChunk;
    std::vector<double> sse(n_chunks, 0.0), cse(n_chunks, 0.0), l1(n_chunks, 0.0);
    const int T = resolve_threads(threads);
    std::vector<Vec> maxz(T, Vec(p.latents, 0.0));
#pragma omp parallel num_threads(T)
    {
#ifdef _OPENMP
        const int tid = omp_get_thread_num();
#else
        const int tid = 0;
#endif
        Scratch sc;
        sc.resize(p);
        Vec& mz = maxz[tid];
#pragma omp for schedule(static)
        for (int64_t c = 0; c < static_cast<int64_t>(n_chunks); ++c) {
            const uint64_t lo = static_cast<uint64_t>(c) * kChunk;
            const uint64_t hi = std::min(s.n, lo + kChunk);
            double c_sse = 0.0, c_cse = 0.0, c_l1 = 0.0;
            for (uint64_t t = lo; t < hi; ++t) {
                const float* xr = s.x.data() + t * s.d;
                c_l1 += token_forward(p, xr, sc);
                c_sse += token_residual(p, sc);
                for (uint32_t i = 0; i < s.d; ++i) {
                    const double dm = static_cast<double>(xr[i]) - mean[i];
                    c_cse += dm * dm;
                }
                for (uint32_t j = 0; j < p.latents; ++j) {
                    mz[j] = std::max(mz[j], std::abs(sc.z[j]));
                }
            }
            sse[c] = c_sse;
            cse[c] = c_cse;
            l1[c] = c_l1;
        }
    }
    EvalStats out;
    out.max_abs_z.assign(p.latents, 0.0);
    for (uint64_t c = 0; c < n_chunks; ++c) {
        out.sse += sse[c];
        out.centered_sse += cse[c];
        out.l1_sum += l1[c];
    }
    for (int t = 0; t < T; ++t) {
        for (uint32_t j = 0; j < p.latents; ++j) {
            out.max_abs_z[j] = std::max(out.max_abs_z[j], maxz[t][j]);
        }
    }
    return out;
}

}  // namespace kansae
