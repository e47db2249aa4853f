#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "kansae/kernels.hpp"
#include "kansae/model.hpp"
#include "kansae/optim.hpp"
#include "kansae/store.hpp"

namespace kansae {

struct TrainConfig {
    SaeMode mode = SaeMode::kan;
    uint32_t latents = 1024;
    int epochs = 100;
    uint32_t batch_size = 4096;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double lambda0 = 5e-5;
    double lambdaE = 1e-4;
    int spline_k = 9;
    int spline_degree = 3;
    uint64_t calib_tokens = 50000;
    double percentile_lo = 1.0;
    double percentile_hi = 99.0;
    std::optional<double> tau;  // nullopt: fit automatically after training
    double activation_eps = 0.0;
    int checkpoint_every = 0;  // epochs between mid-run checkpoints; 0 = none
    uint64_t seed = 0;

    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    double lambda = 0.0;
    double recon = 0.0;
    double sparsity = 0.0;
    double total = 0.0;
    uint64_t alive = 0;
    double wall_seconds = 0.0;  // reported on the console, never serialized
};

using TrainLog = std::vector<EpochRecord>;

// Everything needed to stop and resume a run bit-identically.
struct TrainState {
    TrainConfig cfg;
    SaeParams params;
    AdamState adam;
    int epochs_done = 0;
    size_t widened_knots = 0;
};

enum class TrainStatus { ok, numeric_abort };

// Initialization per the training procedure: b_pre = column mean, unit-norm
// decoder init, zero control points, then knot calibration (kan mode).
TrainState train_init(const TrainConfig& cfg, const ActivationStore& store, int threads);

// Runs up to n_epochs more epochs (absolute epoch index drives the lambda
// schedule). On a non-finite loss the state rolls back to the last epoch
// boundary and numeric_abort is returned. step_observer, when set, fires
// after every optimizer step.
TrainStatus train_epochs(TrainState& st, const ActivationStore& store, int n_epochs,
                         TrainLog& log, int threads,
                         const std::function<void(const TrainState&)>& step_observer = {});

struct TrainOutcome {
    TrainState state;
    TrainLog log;
    std::vector<size_t> alive;
    double resolved_tau = 0.0;  // NaN in relu mode
    TrainStatus status = TrainStatus::ok;
};

// Full run: init, all epochs, final alive-set extraction.
TrainOutcome train(const TrainConfig& cfg, const ActivationStore& store, int threads);

// Alive set for the final state: threshold on control-point maxima (kan)
// or the ever-activated criterion over eval_store (relu).
std::vector<size_t> final_alive_set(const TrainState& st, const ActivationStore& eval_store,
                                    int threads, double* resolved_tau);

// { j : exists token with z_j > eps } over the store. relu mode only.
std::vector<size_t> alive_relu(const SaeParams& p, const ActivationStore& eval_store,
                               double activation_eps, int threads);

}  // namespace kansae
