#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "kansae/mat.hpp"
#include "kansae/model.hpp"
#include "kansae/store.hpp"

namespace kansae {

// Deterministic stand-in for the downstream forecast layers: a scalar
// readout of a residual-stream vector. Must be side-effect free.
using DownstreamMap = std::function<double(std::span<const double>)>;

// Per-cell variant used for anomaly maps; the cell index selects the
// local readout.
using CellDownstreamMap = std::function<double(uint32_t cell, std::span<const double>)>;

// Fixed seeded linear readout r.x + c.
DownstreamMap make_linear_readout(uint32_t d, uint64_t seed);

// The readout vector of make_linear_readout(d, seed), for closed-form checks.
Vec linear_readout_weights(uint32_t d, uint64_t seed);

// (r.x + c)^2, a toy nonlinear downstream with non-unit dose-response r^2.
DownstreamMap make_quadratic_readout(uint32_t d, uint64_t seed);

// Linear readout active only for cells whose coordinates fall inside the
// region; zero elsewhere.
CellDownstreamMap make_regional_linear_readout(uint32_t d, uint64_t seed,
                                               const GridMeta& meta,
                                               double lat_min, double lat_max,
                                               double lon_min, double lon_max);

// x + alpha * w_dec[:, j]; the input is left untouched.
Vec steer(std::span<const double> x, const SaeParams& p, size_t j, double alpha);

struct DoseResponse {
    Vec alphas;
    Vec responses;  // mean downstream delta vs alpha = 0
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    bool zero_response = false;  // all deltas were 0; r^2 reported as 1
};

// For each alpha, the mean over base tokens of down(steer(x)) - down(x),
// plus an OLS line through the (alpha, delta) points.
DoseResponse dose_response(const DownstreamMap& down, const SaeParams& p, size_t j,
                           std::span<const double> alphas, const ActivationStore& x_base);

// H x W map of per-cell mean steered-minus-baseline downstream output.
Mat regional_response_map(const CellDownstreamMap& down, const SaeParams& p, size_t j,
                          double alpha, const ActivationStore& store);

}  // namespace kansae
