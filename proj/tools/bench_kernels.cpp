// Times the serial reference backward kernel against the OpenMP path and
// reports the relative gradient difference between them.
//
// Usage: kansae-bench [d] [latents] [batch] [reps] [threads]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>

#include "kansae/kernels.hpp"
#include "kansae/rng.hpp"

using namespace kansae;

namespace {

double max_rel_diff(const Grads& a, const Grads& b) {
    double worst = 0.0;
    auto cmp = [&](const Vec& x, const Vec& y) {
        for (size_t i = 0; i < x.size(); ++i) {
            const double denom = std::max({1e-30, std::abs(x[i]), std::abs(y[i])});
            worst = std::max(worst, std::abs(x[i] - y[i]) / denom);
        }
    };
    cmp(a.w_enc.v, b.w_enc.v);
    cmp(a.w_dec_t.v, b.w_dec_t.v);
    cmp(a.b_pre, b.b_pre);
    cmp(a.b_enc, b.b_enc);
    cmp(a.c.v, b.c.v);
    return worst;
}

}  // namespace

int main(int argc, char** argv) {
    const uint32_t d = argc > 1 ? static_cast<uint32_t>(std::atoi(argv[1])) : 64;
    const uint32_t M = argc > 2 ? static_cast<uint32_t>(std::atoi(argv[2])) : 256;
    const uint64_t batch = argc > 3 ? static_cast<uint64_t>(std::atoll(argv[3])) : 8192;
    const int reps = argc > 4 ? std::atoi(argv[4]) : 5;
    const int threads = argc > 5 ? std::atoi(argv[5]) : 0;

    Rng rng(7);
    ActivationStore store;
    store.n = batch;
    store.d = d;
    store.x.resize(batch * d);
    for (auto& v : store.x) v = static_cast<float>(rng.normal());

    Vec mean(d, 0.0);
    SaeParams p = init_params(d, M, SaeMode::kan, mean, 11);
    for (auto& c : p.bank.c.v) c = 0.5 * rng.normal();
    const ActivationStore calib = slice_rows(store, 0, std::min<uint64_t>(batch, 4096));
    calibrate_knots(p, calib);

    const TokenBatch tb = TokenBatch::all(store);
    const double lambda = 1e-4;

    auto time_it = [&](auto&& fn) {
        double best = 1e300;
        for (int r = 0; r < reps; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            fn();
            const double dt =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            best = std::min(best, dt);
        }
        return best;
    };

    BatchResult serial, parallel;
    const double t_serial = time_it([&] { serial = backward_batch_serial(p, tb, lambda); });
    const int T = resolve_threads(threads);
    const double t_parallel = time_it([&] { parallel = backward_batch(p, tb, lambda, T); });

    const double tok_s_serial = static_cast<double>(batch) / t_serial;
    const double tok_s_parallel = static_cast<double>(batch) / t_parallel;
    std::printf("d=%u M=%u batch=%llu threads=%d\n", d, M,
                static_cast<unsigned long long>(batch), T);
    std::printf("serial   : %8.3f ms  (%10.0f tokens/s)\n", 1e3 * t_serial, tok_s_serial);
    std::printf("parallel : %8.3f ms  (%10.0f tokens/s)  speedup %.2fx\n", 1e3 * t_parallel,
                tok_s_parallel, t_serial / t_parallel);
    std::printf("max grad rel diff serial vs parallel: %.3e\n",
                max_rel_diff(serial.grads, parallel.grads));
    return 0;
}
