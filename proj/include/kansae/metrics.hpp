#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kansae/mat.hpp"
#include "kansae/model.hpp"
#include "kansae/store.hpp"

namespace kansae {

// 100 * (1 - ||X - X_hat||_F^2 / ||X - colmean(X)||_F^2).
double explained_variance(const Mat& x, const Mat& x_hat);

// Streaming variant over a store.
double explained_variance_model(const SaeParams& p, const ActivationStore& s, int threads);

// (utilization %, dead %); dead is the exact complement.
std::pair<double, double> utilization(const std::vector<size_t>& alive, size_t latents);

// Mean over tokens of ||z||_1.
double mean_l1(const SaeParams& p, const ActivationStore& s, int threads);

struct RegionSpec {
    double lat_min = -90.0;
    double lat_max = 90.0;
    double lon_min = 0.0;
    double lon_max = 360.0;  // interpreted modulo 360; full circle by default

    void validate() const;
    bool contains(double lat, double lon) const;
};

// Per-day cos(latitude)-weighted mean of a token series over the region.
Vec region_mean_series(const ActivationStore& s, std::span<const double> z,
                       const RegionSpec& region);

struct RedundancyResult {
    double median_abs_r = 0.0;
    double mean_abs_r = 0.0;
    double frac_above = 0.0;  // fraction of pairs with |r| > threshold
    Mat abs_r;                // full matrix; NaN rows for excluded series
    size_t excluded = 0;      // zero-variance series dropped from pairing
};

RedundancyResult redundancy(const std::vector<Vec>& series, double threshold = 0.3);

double cross_feature_correlation(std::span<const double> a, std::span<const double> b);

// Per-cell mean over hot days minus mean over cold days (H x W).
Mat condition_difference_map(const ActivationStore& s, std::span<const double> z,
                             const std::vector<uint32_t>& hot_days,
                             const std::vector<uint32_t>& cold_days);

// Great-circle central angle between two points, in degrees.
double great_circle_deg(double lat1, double lon1, double lat2, double lon2);

// Degrees between the activation map's argmax cell center and a reference
// event center. NaN cells are ignored; ties go to the smallest flat index.
double peak_distance(const Mat& activation_map, const GridMeta& meta,
                     double center_lat, double center_lon);

struct RecoveryResult {
    double mean_max_abs_cos = 0.0;
    std::vector<size_t> best_match;  // per truth direction
};

// For each planted direction, the best |cosine| against the learned decoder
// columns (w_dec_t rows). Inputs are renormalized defensively.
RecoveryResult recovery_score(const Mat& w_dec_t, const Mat& truth_directions);

struct ShapeHistogram {
    uint64_t convex = 0;
    uint64_t concave = 0;
    uint64_t near_linear = 0;
    double median_score = 0.0;
};

struct MetricsReport {
    std::string model_name;
    double explained_variance = 0.0;
    double feature_utilization = 0.0;
    double dead_rate = 0.0;
    double mean_l1 = 0.0;
    uint64_t n_alive = 0;
    uint64_t latents = 0;
    double corr_threshold = 0.3;
    bool has_redundancy = false;
    double median_abs_r = 0.0;
    double mean_abs_r = 0.0;
    double frac_abs_r_above = 0.0;  // percent
    bool has_shapes = false;
    ShapeHistogram shapes;
};

// All Table-style quantities for one model over one evaluation store.
// Redundancy needs grid metadata (per-day series); it is skipped otherwise.
MetricsReport evaluate_model(const SaeParams& p, const std::vector<size_t>& alive,
                             const ActivationStore& eval_store,
                             const std::optional<RegionSpec>& region,
                             double corr_threshold, int threads);

nlohmann::json report_to_json(const MetricsReport& r);

// Long-form CSV, one metric per row; one value column per report.
std::string reports_to_csv(const std::vector<MetricsReport>& reports);

}  // namespace kansae
