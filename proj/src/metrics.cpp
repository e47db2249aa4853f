#include "kansae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "kansae/kernels.hpp"
#include "kansae/spline.hpp"

namespace kansae {

namespace {

constexpr double kPi = 3.14159265358979323846;

double median_of(Vec v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    if (n == 0) return std::numeric_limits<double>::quiet_NaN();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

double explained_variance(const Mat& x, const Mat& x_hat) {
    if (x.rows != x_hat.rows || x.cols != x_hat.cols) {
        throw DimensionError("explained_variance: shape mismatch");
    }
    if (x.rows < 2) throw ConfigError("explained_variance: need at least 2 rows");
    Vec mean(x.cols, 0.0);
    for (size_t r = 0; r < x.rows; ++r) {
        for (size_t c = 0; c < x.cols; ++c) mean[c] += x.at(r, c);
    }
    for (double& m : mean) m /= static_cast<double>(x.rows);
    double sse = 0.0, cse = 0.0;
    for (size_t r = 0; r < x.rows; ++r) {
        for (size_t c = 0; c < x.cols; ++c) {
            const double e = x.at(r, c) - x_hat.at(r, c);
            const double m = x.at(r, c) - mean[c];
            sse += e * e;
            cse += m * m;
        }
    }
    if (cse == 0.0) throw DomainError("explained_variance: constant X has no variance");
    return 100.0 * (1.0 - sse / cse);
}

double explained_variance_model(const SaeParams& p, const ActivationStore& s, int threads) {
    if (s.n < 2) throw ConfigError("explained_variance: need at least 2 tokens");
    const Vec mean = column_mean(s, threads);
    const EvalStats st = eval_stats(p, s, mean, threads);
    if (st.centered_sse == 0.0) {
        throw DomainError("explained_variance: constant X has no variance");
    }
    return 100.0 * (1.0 - st.sse / st.centered_sse);
}

std::pair<double, double> utilization(const std::vector<size_t>& alive, size_t latents) {
    if (latents == 0) throw ConfigError("utilization: M must be >= 1");
    for (size_t j : alive) {
        if (j >= latents) throw IndexError("utilization: alive index out of range");
    }
    const double util = 100.0 * static_cast<double>(alive.size()) / static_cast<double>(latents);
    return {util, 100.0 - util};
}

double mean_l1(const SaeParams& p, const ActivationStore& s, int threads) {
    if (s.n == 0) throw ConfigError("mean_l1: empty store");
    return loss_batch(p, TokenBatch::all(s), 0.0, threads).sparsity;
}

void RegionSpec::validate() const {
    if (!(lat_min < lat_max) || lat_min < -90.0 || lat_max > 90.0) {
        throw ConfigError("region: need -90 <= lat_min < lat_max <= 90");
    }
}

namespace {

double wrap360(double lon) {
    double v = std::fmod(lon, 360.0);
    if (v < 0.0) v += 360.0;
    return v;
}

}  // namespace

bool RegionSpec::contains(double lat, double lon) const {
    if (lat < lat_min || lat > lat_max) return false;
    if (lon_max - lon_min >= 360.0) return true;  // full circle
    const double a = wrap360(lon_min);
    const double b = wrap360(lon_max);
    const double l = wrap360(lon);
    if (a <= b) return l >= a && l <= b;
    return l >= a || l <= b;  // range crosses the date line
}

Vec region_mean_series(const ActivationStore& s, std::span<const double> z,
                       const RegionSpec& region) {
    region.validate();
    if (!s.meta) throw ConfigError("region_mean_series: store has no grid metadata");
    if (z.size() != s.n) throw DimensionError("region_mean_series: series length != N");
    const GridMeta& m = *s.meta;

    std::vector<uint32_t> cells;
    Vec weights;
    for (uint32_t r = 0; r < m.height; ++r) {
        const double lat = m.lat0 + r * m.dlat;
        const double w = std::cos(lat * kPi / 180.0);
        for (uint32_t c = 0; c < m.width; ++c) {
            const double lon = m.lon0 + c * m.dlon;
            if (region.contains(lat, lon)) {
                cells.push_back(r * m.width + c);
                weights.push_back(w);
            }
        }
    }
    if (cells.empty()) throw DomainError("region_mean_series: region misses the grid");
    double wsum = 0.0;
    for (double w : weights) wsum += w;

    Vec series(m.n_days, 0.0);
    const uint64_t stride = m.cells();
    for (uint32_t day = 0; day < m.n_days; ++day) {
        double acc = 0.0;
        for (size_t i = 0; i < cells.size(); ++i) {
            acc += weights[i] * z[day * stride + cells[i]];
        }
        series[day] = acc / wsum;
    }
    return series;
}

namespace {

struct SeriesStats {
    double mean = 0.0;
    double var = 0.0;  // sum of squared deviations
};

SeriesStats series_stats(std::span<const double> a) {
    SeriesStats st;
    for (double v : a) st.mean += v;
    st.mean /= static_cast<double>(a.size());
    for (double v : a) {
        const double d = v - st.mean;
        st.var += d * d;
    }
    return st;
}

double pearson(std::span<const double> a, std::span<const double> b,
               const SeriesStats& sa, const SeriesStats& sb) {
    double cov = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        cov += (a[i] - sa.mean) * (b[i] - sb.mean);
    }
    return cov / std::sqrt(sa.var * sb.var);
}

}  // namespace

double cross_feature_correlation(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("correlation: length mismatch");
    if (a.size() < 3) throw ConfigError("correlation: need at least 3 samples");
    const SeriesStats sa = series_stats(a);
    const SeriesStats sb = series_stats(b);
    if (sa.var == 0.0 || sb.var == 0.0) {
        throw DomainError("correlation: zero-variance series");
    }
    return std::clamp(pearson(a, b, sa, sb), -1.0, 1.0);
}

RedundancyResult redundancy(const std::vector<Vec>& series, double threshold) {
    if (series.size() < 2) throw ConfigError("redundancy: need at least 2 series");
    const size_t days = series[0].size();
    if (days < 3) throw ConfigError("redundancy: need at least 3 days");
    for (const auto& s : series) {
        if (s.size() != days) throw DimensionError("redundancy: ragged series");
    }
    const size_t f = series.size();
    RedundancyResult out;
    out.abs_r = Mat(f, f, std::numeric_limits<double>::quiet_NaN());

    std::vector<SeriesStats> stats(f);
    std::vector<char> ok(f, 1);
    for (size_t i = 0; i < f; ++i) {
        stats[i] = series_stats(series[i]);
        if (stats[i].var == 0.0) {
            ok[i] = 0;
            ++out.excluded;
        }
    }
    Vec pair_vals;
    size_t above = 0;
    for (size_t i = 0; i < f; ++i) {
        if (!ok[i]) continue;
        out.abs_r.at(i, i) = 1.0;
        for (size_t j = i + 1; j < f; ++j) {
            if (!ok[j]) continue;
            const double r =
                std::clamp(pearson(series[i], series[j], stats[i], stats[j]), -1.0, 1.0);
            const double ar = std::abs(r);
            out.abs_r.at(i, j) = ar;
            out.abs_r.at(j, i) = ar;
            pair_vals.push_back(ar);
            if (ar > threshold) ++above;
        }
    }
    if (pair_vals.empty()) {
        throw DomainError("redundancy: no valid feature pairs after exclusions");
    }
    out.median_abs_r = median_of(pair_vals);
    double sum = 0.0;
    for (double v : pair_vals) sum += v;
    out.mean_abs_r = sum / static_cast<double>(pair_vals.size());
    out.frac_above = static_cast<double>(above) / static_cast<double>(pair_vals.size());
    return out;
}

Mat condition_difference_map(const ActivationStore& s, std::span<const double> z,
                             const std::vector<uint32_t>& hot_days,
                             const std::vector<uint32_t>& cold_days) {
    if (!s.meta) throw ConfigError("condition_difference_map: store has no grid metadata");
    if (z.size() != s.n) throw DimensionError("condition_difference_map: series length != N");
    if (hot_days.empty() || cold_days.empty()) {
        throw ConfigError("condition_difference_map: both day sets must be nonempty");
    }
    const GridMeta& m = *s.meta;
    for (uint32_t d : hot_days) {
        if (d >= m.n_days) throw IndexError("condition_difference_map: hot day out of range");
        if (std::find(cold_days.begin(), cold_days.end(), d) != cold_days.end()) {
            throw ConfigError("condition_difference_map: day sets overlap");
        }
    }
    for (uint32_t d : cold_days) {
        if (d >= m.n_days) throw IndexError("condition_difference_map: cold day out of range");
    }
    const uint64_t stride = m.cells();
    Mat map(m.height, m.width, 0.0);
    for (uint64_t cell = 0; cell < stride; ++cell) {
        double hot = 0.0, cold = 0.0;
        for (uint32_t d : hot_days) hot += z[d * stride + cell];
        for (uint32_t d : cold_days) cold += z[d * stride + cell];
        map.v[cell] = hot / static_cast<double>(hot_days.size()) -
                      cold / static_cast<double>(cold_days.size());
    }
    return map;
}

double great_circle_deg(double lat1, double lon1, double lat2, double lon2) {
    const double phi1 = lat1 * kPi / 180.0;
    const double phi2 = lat2 * kPi / 180.0;
    const double dphi = (lat2 - lat1) * kPi / 180.0;
    const double dlmb = (lon2 - lon1) * kPi / 180.0;
    const double sp = std::sin(0.5 * dphi);
    const double sl = std::sin(0.5 * dlmb);
    const double a = sp * sp + std::cos(phi1) * std::cos(phi2) * sl * sl;
    if (a <= 0.0) return 0.0;
    if (a >= 1.0) return 180.0;
    return 2.0 * std::asin(std::sqrt(a)) * 180.0 / kPi;
}

double peak_distance(const Mat& activation_map, const GridMeta& meta,
                     double center_lat, double center_lon) {
    if (activation_map.rows != meta.height || activation_map.cols != meta.width) {
        throw DimensionError("peak_distance: map shape does not match grid");
    }
    size_t best = 0;
    double best_val = -std::numeric_limits<double>::infinity();
    bool found = false;
    for (size_t i = 0; i < activation_map.v.size(); ++i) {
        const double v = activation_map.v[i];
        if (std::isnan(v)) continue;
        if (!found || v > best_val) {  // strict: ties keep the smallest index
            best = i;
            best_val = v;
            found = true;
        }
    }
    if (!found) throw DomainError("peak_distance: all-NaN activation map");
    const size_t r = best / meta.width;
    const size_t c = best % meta.width;
    const double lat = meta.lat0 + static_cast<double>(r) * meta.dlat;
    const double lon = meta.lon0 + static_cast<double>(c) * meta.dlon;
    return great_circle_deg(lat, lon, center_lat, center_lon);
}

RecoveryResult recovery_score(const Mat& w_dec_t, const Mat& truth_directions) {
    if (w_dec_t.cols != truth_directions.cols) {
        throw DimensionError("recovery_score: dimension mismatch");
    }
    const size_t m = w_dec_t.rows;
    const size_t n_true = truth_directions.rows;
    if (m == 0 || n_true == 0) throw ConfigError("recovery_score: empty inputs");

    auto normalized = [](const Mat& a) {
        Mat out = a;
        for (size_t r = 0; r < out.rows; ++r) {
            auto row = out.row(r);
            const double nrm = std::sqrt(norm2(row));
            if (nrm > 1e-30) {
                for (double& v : row) v /= nrm;
            }
        }
        return out;
    };
    const Mat dec = normalized(w_dec_t);
    const Mat tru = normalized(truth_directions);

    RecoveryResult out;
    out.best_match.resize(n_true);
    double total = 0.0;
    for (size_t t = 0; t < n_true; ++t) {
        double best = -1.0;
        size_t best_j = 0;
        for (size_t j = 0; j < m; ++j) {
            const double c = std::abs(dot(tru.row(t), dec.row(j)));
            if (c > best) {
                best = c;
                best_j = j;
            }
        }
        out.best_match[t] = best_j;
        total += best;
    }
    out.mean_max_abs_cos = total / static_cast<double>(n_true);
    return out;
}

MetricsReport evaluate_model(const SaeParams& p, const std::vector<size_t>& alive,
                             const ActivationStore& eval_store,
                             const std::optional<RegionSpec>& region,
                             double corr_threshold, int threads) {
    MetricsReport r;
    r.model_name = mode_name(p.mode);
    r.latents = p.latents;
    r.n_alive = alive.size();
    r.corr_threshold = corr_threshold;
    r.explained_variance = explained_variance_model(p, eval_store, threads);
    std::tie(r.feature_utilization, r.dead_rate) = utilization(alive, p.latents);
    r.mean_l1 = mean_l1(p, eval_store, threads);

    if (eval_store.meta && eval_store.meta->n_days >= 3 && alive.size() >= 2) {
        const RegionSpec reg = region.value_or(RegionSpec{});
        std::vector<Vec> series;
        series.reserve(alive.size());
        for (size_t j : alive) {
            series.push_back(
                region_mean_series(eval_store, feature_series(p, eval_store, j, threads), reg));
        }
        try {
            const RedundancyResult red = redundancy(series, corr_threshold);
            r.has_redundancy = true;
            r.median_abs_r = red.median_abs_r;
            r.mean_abs_r = red.mean_abs_r;
            r.frac_abs_r_above = 100.0 * red.frac_above;
        } catch (const DomainError&) {
            r.has_redundancy = false;  // all series degenerate
        }
    }

    if (p.mode == SaeMode::kan && !alive.empty()) {
        Vec scores;
        scores.reserve(alive.size());
        for (size_t j : alive) {
            const ShapeProfile prof = shape_profile(p.bank, j, 101);
            scores.push_back(prof.nonlinearity_score);
            switch (prof.shape_class) {
                case ShapeClass::convex: ++r.shapes.convex; break;
                case ShapeClass::concave: ++r.shapes.concave; break;
                case ShapeClass::near_linear: ++r.shapes.near_linear; break;
            }
        }
        r.shapes.median_score = median_of(scores);
        r.has_shapes = true;
    }
    return r;
}

nlohmann::json report_to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["model"] = r.model_name;
    j["explained_variance_pct"] = r.explained_variance;
    j["feature_utilization_pct"] = r.feature_utilization;
    j["dead_rate_pct"] = r.dead_rate;
    j["mean_l1"] = r.mean_l1;
    j["n_alive"] = r.n_alive;
    j["latents"] = r.latents;
    if (r.has_redundancy) {
        j["median_abs_r"] = r.median_abs_r;
        j["mean_abs_r"] = r.mean_abs_r;
        j["pairs_above_threshold_pct"] = r.frac_abs_r_above;
        j["corr_threshold"] = r.corr_threshold;
    }
    if (r.has_shapes) {
        j["shapes"] = {{"convex", r.shapes.convex},
                       {"concave", r.shapes.concave},
                       {"near_linear", r.shapes.near_linear},
                       {"median_score", r.shapes.median_score}};
    }
    return j;
}

namespace {

std::string fmt_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

}  // namespace

std::string reports_to_csv(const std::vector<MetricsReport>& reports) {
    std::ostringstream os;
    os << "metric";
    for (const auto& r : reports) os << "," << r.model_name;
    os << "\n";
    auto row = [&](const std::string& name, auto get) {
        os << name;
        for (const auto& r : reports) os << "," << get(r);
        os << "\n";
    };
    row("Explained Variance (%)",
        [](const MetricsReport& r) { return fmt_num(r.explained_variance); });
    row("Feature Utilisation (%)",
        [](const MetricsReport& r) { return fmt_num(r.feature_utilization); });
    row("Dead Feature Rate (%)", [](const MetricsReport& r) { return fmt_num(r.dead_rate); });
    row("Mean L1 Norm", [](const MetricsReport& r) { return fmt_num(r.mean_l1); });
    row("Median inter-feature |r|", [](const MetricsReport& r) {
        return r.has_redundancy ? fmt_num(r.median_abs_r) : std::string("n/a");
    });
    char thr[64];
    std::snprintf(thr, sizeof thr, "Pairs |r|>%g (%%)",
                  reports.empty() ? 0.3 : reports.front().corr_threshold);
    row(thr, [](const MetricsReport& r) {
        return r.has_redundancy ? fmt_num(r.frac_abs_r_above) : std::string("n/a");
    });
    row("Mean inter-feature |r|", [](const MetricsReport& r) {
        return r.has_redundancy ? fmt_num(r.mean_abs_r) : std::string("n/a");
    });
    row("Alive Features", [](const MetricsReport& r) { return std::to_string(r.n_alive); });
    row("Convex Shapes", [](const MetricsReport& r) {
        return r.has_shapes ? std::to_string(r.shapes.convex) : std::string("n/a");
    });
    row("Concave Shapes", [](const MetricsReport& r) {
        return r.has_shapes ? std::to_string(r.shapes.concave) : std::string("n/a");
    });
    row("Near-linear Shapes", [](const MetricsReport& r) {
        return r.has_shapes ? std::to_string(r.shapes.near_linear) : std::string("n/a");
    });
    row("Median Nonlinearity Score", [](const MetricsReport& r) {
        return r.has_shapes ? fmt_num(r.shapes.median_score) : std::string("n/a");
    });
    return os.str();
}

}  // namespace kansae
