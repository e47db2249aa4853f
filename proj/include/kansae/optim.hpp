#pragma once

#include <cstdint>

#include "kansae/model.hpp"

namespace kansae {

// Adam with bias-corrected moments. Moments share the Grads shapes.
struct AdamState {
    uint64_t t = 0;
    Grads m;
    Grads v;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

AdamState make_adam(const SaeParams& p, double lr = 1e-4, double beta1 = 0.9,
                    double beta2 = 0.999, double eps = 1e-8);

// One Adam update over all trainable blocks. Throws NumericError naming the
// offending block if a gradient is not finite.
void adam_step(AdamState& st, SaeParams& p, const Grads& g);

// lambda for epoch e of E, linear from lambda0 to lambdaE with exact
// endpoints. E == 1 degenerates to lambda0.
double anneal_lambda(int e, int E, double lambda0, double lambdaE);

// Rescales every decoder column to unit l2 norm. Columns with norm below
// 1e-12 are re-drawn from the init distribution (seeded by reinit_seed);
// returns how many were re-drawn.
size_t renormalize_decoder(SaeParams& p, uint64_t reinit_seed);

// max_j | ||w_dec_j|| - 1 |, the unit-norm invariant residual.
double max_decoder_norm_error(const SaeParams& p);

}  // namespace kansae
