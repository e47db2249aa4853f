#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>

#include "kansae/mat.hpp"
#include "kansae/spline.hpp"
#include "kansae/store.hpp"

namespace kansae {

enum class SaeMode { kan, relu };

const char* mode_name(SaeMode m);
SaeMode mode_from_name(const std::string& name);

// Full parameter set. The decoder is stored transposed (w_dec_t row j is
// decoder column d_j) so that per-feature access is contiguous; the math
// below still reads W_dec as d x M.
struct SaeParams {
    SaeMode mode = SaeMode::kan;
    uint32_t d = 0;
    uint32_t latents = 0;  // M
    Mat w_enc;             // M x d
    Mat w_dec_t;           // M x d
    Vec b_pre;             // d
    Vec b_enc;             // M
    SplineBank bank;       // kan mode only; empty in relu mode
};

void check_valid(const SaeParams& p);

struct ForwardTrace {
    Vec h;      // M pre-activations
    Vec z;      // M latent activations
    Vec x_hat;  // d reconstruction
};

struct LossBreakdown {
    double recon = 0.0;     // mean ||x - x_hat||^2
    double sparsity = 0.0;  // mean ||z||_1
    double total = 0.0;     // recon + lambda * sparsity
    double lambda = 0.0;
};

// Gradients for the trainable blocks, same shapes as SaeParams.
struct Grads {
    Mat w_enc;
    Mat w_dec_t;
    Vec b_pre;
    Vec b_enc;
    Mat c;  // M x K in kan mode, empty otherwise

    void resize_like(const SaeParams& p);
    void set_zero();
};

// W_dec columns are unit-normalized N(0, 1/d) draws, W_enc starts as the
// decoder transpose, b_pre = x_mean, b_enc = 0, control points zero.
// Deterministic given seed. In kan mode the knot vectors start on [-1, 1]
// placeholders until calibrate_knots runs.
SaeParams init_params(uint32_t d, uint32_t latents, SaeMode mode,
                      std::span<const double> x_mean, uint64_t seed,
                      int spline_k = 9, int spline_degree = 3);

// Sets each latent's knot span to the [p_lo, p_hi] percentile of its
// pre-activations over the calibration tokens. Degenerate spans widen to
// [t - 1, t + 1]; the return value counts them. Knots are fixed after this.
size_t calibrate_knots(SaeParams& p, const ActivationStore& calib,
                       double p_lo = 1.0, double p_hi = 99.0);

// h = W_enc (x - b_pre) + b_enc; z_j = phi_j(h_j) (kan) or max(h_j, 0).
std::pair<Vec, Vec> encode(const SaeParams& p, std::span<const float> x);

// x_hat = W_dec z + b_pre.
Vec decode(const SaeParams& p, std::span<const double> z);

ForwardTrace forward(const SaeParams& p, std::span<const float> x);

LossBreakdown loss(const SaeParams& p, const ActivationStore& batch, double lambda);

// Analytic reverse-mode gradients of the batch-mean loss. Subgradient of
// |z| at 0 is 0; ReLU'(0) = 0.
std::pair<LossBreakdown, Grads> backward(const SaeParams& p,
                                         const ActivationStore& batch,
                                         double lambda);

// Central-finite-difference check of backward, parameter by parameter.
// Coordinates whose perturbation crosses a kink (pre-activation within
// 10*step of a knot, ReLU threshold, or an l1 corner when lambda > 0) are
// skipped. Relative error is measured against max(1, |analytic|, |numeric|)
// so near-zero coordinates compare absolutely.
double grad_check(const SaeParams& p, const ActivationStore& batch,
                  double lambda, double step);

}  // namespace kansae
