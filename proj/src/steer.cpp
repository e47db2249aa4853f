#include "kansae/steer.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>

#include "kansae/metrics.hpp"
#include "kansae/rng.hpp"

namespace kansae {

Vec linear_readout_weights(uint32_t d, uint64_t seed) {
    Rng rng(seed);
    Vec r(d);
    for (uint32_t i = 0; i < d; ++i) r[i] = rng.normal() / std::sqrt(static_cast<double>(d));
    return r;
}

DownstreamMap make_linear_readout(uint32_t d, uint64_t seed) {
    auto r = std::make_shared<Vec>(linear_readout_weights(d, seed));
    Rng rng(seed ^ 0x517cc1b727220a95ULL);
    const double c = rng.normal();
    return [r, c](std::span<const double> x) { return dot(*r, x) + c; };
}

DownstreamMap make_quadratic_readout(uint32_t d, uint64_t seed) {
    auto lin = make_linear_readout(d, seed);
    return [lin](std::span<const double> x) {
        const double v = lin(x);
        return v * v;
    };
}

CellDownstreamMap make_regional_linear_readout(uint32_t d, uint64_t seed,
                                               const GridMeta& meta,
                                               double lat_min, double lat_max,
                                               double lon_min, double lon_max) {
    auto r = std::make_shared<Vec>(linear_readout_weights(d, seed));
    RegionSpec region{lat_min, lat_max, lon_min, lon_max};
    region.validate();
    auto inside = std::make_shared<std::vector<char>>(meta.cells(), 0);
    for (uint32_t row = 0; row < meta.height; ++row) {
        const double lat = meta.lat0 + row * meta.dlat;
        for (uint32_t col = 0; col < meta.width; ++col) {
            const double lon = meta.lon0 + col * meta.dlon;
            (*inside)[row * meta.width + col] = region.contains(lat, lon) ? 1 : 0;
        }
    }
    return [r, inside](uint32_t cell, std::span<const double> x) {
        if (cell >= inside->size() || !(*inside)[cell]) return 0.0;
        return dot(*r, x);
    };
}

Vec steer(std::span<const double> x, const SaeParams& p, size_t j, double alpha) {
    if (j >= p.latents) throw IndexError("steer: feature index out of range");
    if (x.size() != p.d) throw DimensionError("steer: input length != d");
    Vec out(x.begin(), x.end());
    axpy(alpha, p.w_dec_t.row(j), out);
    return out;
}

DoseResponse dose_response(const DownstreamMap& down, const SaeParams& p, size_t j,
                           std::span<const double> alphas, const ActivationStore& x_base) {
    if (j >= p.latents) throw IndexError("dose_response: feature index out of range");
    if (x_base.n == 0) throw ConfigError("dose_response: empty base set");
    if (x_base.d != p.d) throw DimensionError("dose_response: store d != model d");
    std::set<double> distinct(alphas.begin(), alphas.end());
    if (distinct.size() < 3) {
        throw ConfigError("dose_response: need at least 3 distinct alphas");
    }
    if (distinct.count(0.0) == 0) {
        throw ConfigError("dose_response: alphas must contain 0");
    }

    DoseResponse out;
    out.alphas.assign(alphas.begin(), alphas.end());
    out.responses.resize(alphas.size());

    Vec base_vals(x_base.n);
    Vec x(p.d);
    for (uint64_t t = 0; t < x_base.n; ++t) {
        const float* xr = x_base.row(t).data();
        for (uint32_t i = 0; i < p.d; ++i) x[i] = static_cast<double>(xr[i]);
        base_vals[t] = down(x);
    }
    const auto dir = p.w_dec_t.row(j);
    for (size_t k = 0; k < out.alphas.size(); ++k) {
        const double a = out.alphas[k];
        if (a == 0.0) {
            out.responses[k] = 0.0;  // exact by construction
            continue;
        }
        double acc = 0.0;
        for (uint64_t t = 0; t < x_base.n; ++t) {
            const float* xr = x_base.row(t).data();
            for (uint32_t i = 0; i < p.d; ++i) {
                x[i] = static_cast<double>(xr[i]) + a * dir[i];
            }
            acc += down(x) - base_vals[t];
        }
        out.responses[k] = acc / static_cast<double>(x_base.n);
    }

    // OLS of delta on alpha.
    const size_t n = out.alphas.size();
    double ma = 0.0, my = 0.0;
    for (size_t k = 0; k < n; ++k) {
        ma += out.alphas[k];
        my += out.responses[k];
    }
    ma /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double saa = 0.0, say = 0.0, syy = 0.0;
    for (size_t k = 0; k < n; ++k) {
        const double da = out.alphas[k] - ma;
        const double dy = out.responses[k] - my;
        saa += da * da;
        say += da * dy;
        syy += dy * dy;
    }
    if (saa == 0.0) throw ConfigError("dose_response: zero variance in alphas");
    out.slope = say / saa;
    out.intercept = my - out.slope * ma;
    if (syy == 0.0) {
        // Flat response; all deltas are 0 since delta(0) = 0. Fitting is
        // degenerate, flagged instead of reporting 0/0.
        out.zero_response = true;
        out.r_squared = 1.0;
    } else {
        double ss_res = 0.0;
        for (size_t k = 0; k < n; ++k) {
            const double r = out.responses[k] - (out.intercept + out.slope * out.alphas[k]);
            ss_res += r * r;
        }
        out.r_squared = 1.0 - ss_res / syy;
    }
    return out;
}

Mat regional_response_map(const CellDownstreamMap& down, const SaeParams& p, size_t j,
                          double alpha, const ActivationStore& store) {
    if (j >= p.latents) throw IndexError("regional_response_map: feature index out of range");
    if (!store.meta) throw ConfigError("regional_response_map: store has no grid metadata");
    if (store.d != p.d) throw DimensionError("regional_response_map: store d != model d");
    const GridMeta& m = *store.meta;
    const uint64_t stride = m.cells();
    Mat map(m.height, m.width, 0.0);
    Vec x(p.d), xs(p.d);
    const auto dir = p.w_dec_t.row(j);
    for (uint64_t cell = 0; cell < stride; ++cell) {
        double acc = 0.0;
        for (uint32_t day = 0; day < m.n_days; ++day) {
            const float* xr = store.row(day * stride + cell).data();
            for (uint32_t i = 0; i < p.d; ++i) {
                x[i] = static_cast<double>(xr[i]);
                xs[i] = x[i] + alpha * dir[i];
            }
            acc += down(static_cast<uint32_t>(cell), xs) -
                   down(static_cast<uint32_t>(cell), x);
        }
        map.v[cell] = acc / static_cast<double>(m.n_days);
    }
    return map;
}

}  // namespace kansae
