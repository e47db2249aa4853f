#include "kansae/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "kansae/data.hpp"
#include "kansae/rng.hpp"

namespace kansae {

void TrainConfig::validate() const {
    if (latents < 1) throw ConfigError("train: latents must be >= 1");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (lr <= 0.0) throw ConfigError("train: lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("train: betas must lie in [0, 1)");
    }
    if (lambda0 < 0.0 || lambdaE < 0.0) throw ConfigError("train: lambda must be >= 0");
    if (spline_degree < 1 || spline_k < spline_degree + 1) {
        throw ConfigError("train: need spline_k >= degree+1");
    }
    if (!(percentile_lo >= 0.0 && percentile_lo < percentile_hi && percentile_hi <= 100.0)) {
        throw ConfigError("train: bad calibration percentiles");
    }
    if (tau && *tau < 0.0) throw ConfigError("train: tau must be >= 0");
    if (activation_eps < 0.0) throw ConfigError("train: activation_eps must be >= 0");
    if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every must be >= 0");
}

TrainState train_init(const TrainConfig& cfg, const ActivationStore& store, int threads) {
    cfg.validate();
    store.check();
    if (store.n == 0) throw ConfigError("train: empty activation store");
    if (store.n > std::numeric_limits<uint32_t>::max()) {
        throw ConfigError("train: store larger than the 32-bit shuffle index space");
    }

    TrainState st;
    st.cfg = cfg;
    const Vec mean = column_mean(store, threads);
    st.params = init_params(store.d, cfg.latents, cfg.mode, mean,
                            derive_seed(cfg.seed, "init"), cfg.spline_k,
                            cfg.spline_degree);
    if (cfg.mode == SaeMode::kan) {
        const uint64_t n_calib = std::min<uint64_t>(cfg.calib_tokens, store.n);
        const ActivationStore calib =
            sample_calibration(store, n_calib, derive_seed(cfg.seed, "calib"));
        st.widened_knots =
            calibrate_knots(st.params, calib, cfg.percentile_lo, cfg.percentile_hi);
    }
    st.adam = make_adam(st.params, cfg.lr, cfg.beta1, cfg.beta2);
    return st;
}

namespace {

// Alive count for the per-epoch log. In kan mode a fixed tau applies
// directly; auto mode fits one on the fly and reports 0 while the
// magnitude distribution is still degenerate (all control points zero).
uint64_t log_alive_count(const TrainState& st, const Vec& epoch_max_abs_z) {
    if (st.cfg.mode == SaeMode::kan) {
        double tau;
        if (st.cfg.tau) {
            tau = *st.cfg.tau;
        } else {
            const Vec maxima = control_row_maxima(st.params.bank);
            try {
                tau = fit_tau(maxima);
            } catch (const Error&) {
                return 0;
            }
        }
        return alive_set(st.params.bank, tau).size();
    }
    uint64_t n = 0;
    for (double m : epoch_max_abs_z) {
        if (m > st.cfg.activation_eps) ++n;
    }
    return n;
}

}  // namespace

TrainStatus train_epochs(TrainState& st, const ActivationStore& store, int n_epochs,
                         TrainLog& log, int threads,
                         const std::function<void(const TrainState&)>& step_observer) {
    if (store.d != st.params.d) throw ConfigError("train: store d != model d");
    if (st.epochs_done + n_epochs > st.cfg.epochs) {
        throw ConfigError("train: epoch range exceeds configured total");
    }
    const uint64_t n = store.n;
    const uint64_t reinit_base = derive_seed(st.cfg.seed, "reinit");

    std::vector<uint32_t> perm(n);
    for (int step = 0; step < n_epochs; ++step) {
        const int e = st.epochs_done + 1;
        const double lambda = anneal_lambda(e, st.cfg.epochs, st.cfg.lambda0, st.cfg.lambdaE);
        const auto t0 = std::chrono::steady_clock::now();

        // Fresh seeded shuffle per epoch, derived from the absolute epoch
        // index so resumed runs see the same order.
        std::iota(perm.begin(), perm.end(), 0u);
        Rng shuffle_rng(derive_seed(st.cfg.seed, "shuffle:" + std::to_string(e)));
        for (uint64_t i = 0; i + 1 < n; ++i) {
            const uint64_t j = i + shuffle_rng.uniform_below(n - i);
            std::swap(perm[i], perm[j]);
        }

        // Snapshot at the epoch boundary, restored on a numeric abort.
        const SaeParams params_snapshot = st.params;
        const AdamState adam_snapshot = st.adam;

        double recon_sum = 0.0, l1_sum = 0.0;
        Vec epoch_max_abs_z(st.params.latents, 0.0);
        bool aborted = false;
        for (uint64_t b = 0; b < n && !aborted; b += st.cfg.batch_size) {
            const uint64_t bn = std::min<uint64_t>(st.cfg.batch_size, n - b);
            const TokenBatch batch =
                TokenBatch::gather(store, {perm.data() + b, static_cast<size_t>(bn)});
            BatchResult res = backward_batch(st.params, batch, lambda, threads);
            if (!std::isfinite(res.loss.total)) {
                aborted = true;
                break;
            }
            adam_step(st.adam, st.params, res.grads);
            renormalize_decoder(st.params,
                                reinit_base ^ (st.adam.t * 0x9E3779B97F4A7C15ULL));
            if (step_observer) step_observer(st);
            recon_sum += res.loss.recon * static_cast<double>(bn);
            l1_sum += res.loss.sparsity * static_cast<double>(bn);
            for (uint32_t j = 0; j < st.params.latents; ++j) {
                epoch_max_abs_z[j] = std::max(epoch_max_abs_z[j], res.max_abs_z[j]);
            }
        }
        if (aborted) {
            st.params = params_snapshot;
            st.adam = adam_snapshot;
            return TrainStatus::numeric_abort;
        }

        EpochRecord rec;
        rec.epoch = e;
        rec.lambda = lambda;
        rec.recon = recon_sum / static_cast<double>(n);
        rec.sparsity = l1_sum / static_cast<double>(n);
        rec.total = rec.recon + lambda * rec.sparsity;
        rec.alive = log_alive_count(st, epoch_max_abs_z);
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.push_back(rec);
        st.epochs_done = e;
    }
    return TrainStatus::ok;
}

std::vector<size_t> alive_relu(const SaeParams& p, const ActivationStore& eval_store,
                               double activation_eps, int threads) {
    if (p.mode != SaeMode::relu) throw ConfigError("alive_relu: relu mode only");
    const Vec mean(p.d, 0.0);
    const EvalStats stats = eval_stats(p, eval_store, mean, threads);
    std::vector<size_t> alive;
    for (uint32_t j = 0; j < p.latents; ++j) {
        if (stats.max_abs_z[j] > activation_eps) alive.push_back(j);
    }
    return alive;
}

std::vector<size_t> final_alive_set(const TrainState& st, const ActivationStore& eval_store,
                                    int threads, double* resolved_tau) {
    if (st.cfg.mode == SaeMode::kan) {
        const double tau =
            st.cfg.tau ? *st.cfg.tau : fit_tau(control_row_maxima(st.params.bank));
        if (resolved_tau) *resolved_tau = tau;
        return alive_set(st.params.bank, tau);
    }
    if (resolved_tau) *resolved_tau = std::numeric_limits<double>::quiet_NaN();
    return alive_relu(st.params, eval_store, st.cfg.activation_eps, threads);
}

TrainOutcome train(const TrainConfig& cfg, const ActivationStore& store, int threads) {
    TrainOutcome out;
    out.state = train_init(cfg, store, threads);
    out.status = train_epochs(out.state, store, cfg.epochs, out.log, threads);
    if (out.status == TrainStatus::ok) {
        out.alive = final_alive_set(out.state, store, threads, &out.resolved_tau);
    }
    return out;
}

}  // namespace kansae
