#pragma once

#include <cstdint>
#include <span>

#include "kansae/model.hpp"
#include "kansae/store.hpp"

namespace kansae {

// Batch kernels exist in two flavors: a single-threaded reference path
// (token-by-token accumulation, bit-reproducible) and an OpenMP path that
// splits rows into per-thread contiguous blocks and reduces them in thread
// order. For a fixed thread count the parallel path is deterministic; it
// matches the reference path to f64 round-off (~1e-10 relative).

// Resolves a requested worker count: n >= 1 is taken as-is (capped to the
// OpenMP limit), 0 means all cores. Without OpenMP this is always 1.
int resolve_threads(int requested);

// Rows of a row-major f32 matrix, optionally gathered through an index
// list (the per-epoch shuffle).
struct TokenBatch {
    const float* data = nullptr;
    uint64_t n_rows = 0;
    uint32_t d = 0;
    std::span<const uint32_t> idx;  // empty: rows 0..n_rows-1 in order

    uint64_t size() const { return idx.empty() ? n_rows : idx.size(); }
    const float* row(uint64_t i) const {
        return data + static_cast<uint64_t>(idx.empty() ? i : idx[i]) * d;
    }
    static TokenBatch all(const ActivationStore& s) {
        return {s.x.data(), s.n, s.d, {}};
    }
    static TokenBatch gather(const ActivationStore& s, std::span<const uint32_t> ix) {
        return {s.x.data(), s.n, s.d, ix};
    }
};

struct BatchResult {
    LossBreakdown loss;
    Grads grads;
    Vec max_abs_z;  // per-feature max |z_j| over the batch
};

// Reference implementation, kept for testing the parallel path.
BatchResult backward_batch_serial(const SaeParams& p, const TokenBatch& b, double lambda);

// Dispatches to the reference path when threads == 1.
BatchResult backward_batch(const SaeParams& p, const TokenBatch& b, double lambda, int threads);

LossBreakdown loss_batch(const SaeParams& p, const TokenBatch& b, double lambda, int threads);

// z_j over every token of the store. Pure per-token writes, so the result
// is identical for any thread count.
Vec feature_series(const SaeParams& p, const ActivationStore& s, size_t j, int threads);

// Column mean over fixed 4096-row chunks reduced in chunk order; the
// result does not depend on the thread count.
Vec column_mean(const ActivationStore& s, int threads);

// One streaming evaluation pass: reconstruction SSE, SSE against the
// column mean (for explained variance), total l1 mass, and per-feature
// max |z|.
struct EvalStats {
    double sse = 0.0;           // sum ||x - x_hat||^2
    double centered_sse = 0.0;  // sum ||x - mean||^2
    double l1_sum = 0.0;        // sum ||z||_1
    Vec max_abs_z;
};

EvalStats eval_stats(const SaeParams& p, const ActivationStore& s,
                     std::span<const double> mean, int threads);

}  // namespace kansae
