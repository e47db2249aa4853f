#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "kansae/errors.hpp"

namespace kansae {

// Spatial layout of tokens: token index = day * (height*width) + cell,
// cell = row * width + col. Latitude of row r is lat0 + r*dlat, longitude
// of col c is lon0 + c*dlon (degrees).
struct GridMeta {
    uint32_t n_days = 0;
    uint32_t height = 0;
    uint32_t width = 0;
    double lat0 = 0.0;
    double dlat = 0.0;
    double lon0 = 0.0;
    double dlon = 0.0;

    uint64_t cells() const { return static_cast<uint64_t>(height) * width; }
    uint64_t tokens() const { return static_cast<uint64_t>(n_days) * cells(); }
};

// N x d matrix of residual-stream tokens, row-major f32, with optional
// grid metadata. Immutable after load by convention.
struct ActivationStore {
    uint64_t n = 0;
    uint32_t d = 0;
    std::vector<float> x;  // n * d
    std::optional<GridMeta> meta;

    std::span<const float> row(uint64_t i) const { return {x.data() + i * d, d}; }

    void check() const {
        if (x.size() != n * d) {
            throw DimensionError("ActivationStore: payload size does not match n*d");
        }
        if (meta && meta->tokens() != n) {
            throw DimensionError("ActivationStore: grid meta tokens != N");
        }
    }
};

// Copies a contiguous row range [begin, end) into a new store (no meta).
ActivationStore slice_rows(const ActivationStore& s, uint64_t begin, uint64_t end);

}  // namespace kansae
