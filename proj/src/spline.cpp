#include "kansae/spline.hpp"

#include <algorithm>
#include <cmath>

#include "kansae/errors.hpp"

namespace kansae {

KnotVector build_knots(double t_lo, double t_hi, int K, int p) {
    if (!(t_lo < t_hi)) {
        throw DomainError("build_knots: degenerate span, t_lo must be < t_hi");
    }
    if (p < 1 || p > kMaxSplineDegree) {
        throw ConfigError("build_knots: unsupported degree");
    }
    if (K < p + 1) {
        throw ConfigError("build_knots: need K >= p+1 basis functions");
    }
    KnotVector kv;
    kv.degree = p;
    kv.t_lo = t_lo;
    kv.t_hi = t_hi;
    kv.knots.resize(static_cast<size_t>(K) + p + 1);
    const int spans = K - p;  // uniform interior spans
    for (int i = 0; i <= p; ++i) {
        kv.knots[i] = t_lo;
        kv.knots[kv.knots.size() - 1 - i] = t_hi;
    }
    for (int i = 1; i < spans; ++i) {
        kv.knots[p + i] = t_lo + (t_hi - t_lo) * (static_cast<double>(i) / spans);
    }
    return kv;
}

double clamp_to_domain(const KnotVector& kv, double t) {
    return std::clamp(t, kv.t_lo, kv.t_hi);
}

namespace {

// Largest i in [p, K-1] with knots[i] <= t < knots[i+1]; t == t_hi maps to
// the last span so the endpoint stays inside.
int find_span(const KnotVector& kv, double t) {
    const int p = kv.degree;
    const int K = kv.basis_count();
    if (t >= kv.knots[K]) return K - 1;
    if (t <= kv.knots[p]) return p;
    auto it = std::upper_bound(kv.knots.begin() + p, kv.knots.begin() + K + 1, t);
    return static_cast<int>(it - kv.knots.begin()) - 1;
}

// Triangular Cox-de Boor scheme at a fixed span. Fills the p+1 nonzero
// degree-p values, and optionally the degree-(p-1) row needed for
// derivatives.
void basis_triangle(const KnotVector& kv, int span, double t,
                    double* np, double* np_minus1) {
    const int p = kv.degree;
    const auto& u = kv.knots;
    double left[kMaxSplineDegree + 1];
    double right[kMaxSplineDegree + 1];
    np[0] = 1.0;
    for (int j = 1; j <= p; ++j) {
        left[j] = t - u[span + 1 - j];
        right[j] = u[span + j] - t;
        double saved = 0.0;
        for (int r = 0; r < j; ++r) {
            const double temp = np[r] / (right[r + 1] + left[j - r]);
            np[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        np[j] = saved;
        if (np_minus1 != nullptr && j == p - 1) {
            std::copy(np, np + p, np_minus1);
        }
    }
    if (np_minus1 != nullptr && p == 1) {
        np_minus1[0] = 1.0;
    }
}

}  // namespace

void basis_local(const KnotVector& kv, double t, BasisLocal& out) {
    const int p = kv.degree;
    const bool outside = (t < kv.t_lo) || (t > kv.t_hi);
    const double tc = clamp_to_domain(kv, t);
    const int span = find_span(kv, tc);
    out.first = span - p;
    out.count = p + 1;

    double np_minus1[kMaxSplineDegree + 1];
    basis_triangle(kv, span, tc, out.val, np_minus1);

    if (outside) {
        std::fill(out.der, out.der + out.count, 0.0);
        return;
    }
    // B'_{k,p} = p * [ B_{k,p-1}/(u[k+p]-u[k]) - B_{k+1,p-1}/(u[k+p+1]-u[k+1]) ]
    // Degree-(p-1) nonzeros at this span are indices span-p+1 .. span.
    const auto& u = kv.knots;
    for (int r = 0; r <= p; ++r) {
        const int k = out.first + r;
        double acc = 0.0;
        if (r >= 1) {  // B_{k,p-1} nonzero only for k >= span-p+1
            const double den = u[k + p] - u[k];
            if (den > 0.0) acc += np_minus1[r - 1] / den;
        }
        if (r < p) {  // B_{k+1,p-1} nonzero only for k+1 <= span
            const double den = u[k + p + 1] - u[k + 1];
            if (den > 0.0) acc -= np_minus1[r] / den;
        }
        out.der[r] = p * acc;
    }
}

BasisEval basis_eval(const KnotVector& kv, double t) {
    BasisLocal loc;
    basis_local(kv, t, loc);
    BasisEval out;
    out.span = loc.first + kv.degree;
    out.values.assign(kv.basis_count(), 0.0);
    for (int r = 0; r < loc.count; ++r) {
        out.values[loc.first + r] = loc.val[r];
    }
    return out;
}

Vec basis_deriv(const KnotVector& kv, double t) {
    BasisLocal loc;
    basis_local(kv, t, loc);
    Vec out(kv.basis_count(), 0.0);
    for (int r = 0; r < loc.count; ++r) {
        out[loc.first + r] = loc.der[r];
    }
    return out;
}

double spline_apply(const SplineBank& bank, size_t j, double t) {
    if (j >= bank.num_latents()) {
        throw IndexError("spline_apply: latent index out of range");
    }
    BasisLocal loc;
    basis_local(bank.knots[j], t, loc);
    const auto c = bank.c.row(j);
    double s = 0.0;
    for (int r = 0; r < loc.count; ++r) {
        s += c[loc.first + r] * loc.val[r];
    }
    return s;
}

Vec control_row_maxima(const SplineBank& bank) {
    Vec m(bank.num_latents(), 0.0);
    for (size_t j = 0; j < bank.num_latents(); ++j) {
        double best = 0.0;
        for (double cj : bank.c.row(j)) best = std::max(best, std::abs(cj));
        m[j] = best;
    }
    return m;
}

std::vector<size_t> alive_set(const SplineBank& bank, double tau) {
    if (tau < 0.0) throw ConfigError("alive_set: tau must be >= 0");
    std::vector<size_t> alive;
    const Vec maxima = control_row_maxima(bank);
    for (size_t j = 0; j < maxima.size(); ++j) {
        if (maxima[j] >= tau) alive.push_back(j);
    }
    return alive;
}

double fit_tau(std::span<const double> row_maxima) {
    if (row_maxima.size() < 2) {
        throw ConfigError("fit_tau: need at least 2 values");
    }
    Vec v(row_maxima.begin(), row_maxima.end());
    std::sort(v.begin(), v.end());
    if (v.front() == v.back()) {
        throw DomainError("fit_tau: all values identical, no bimodal split");
    }
    const size_t n = v.size();
    Vec psum(n + 1, 0.0), psq(n + 1, 0.0);
    for (size_t i = 0; i < n; ++i) {
        psum[i + 1] = psum[i] + v[i];
        psq[i + 1] = psq[i] + v[i] * v[i];
    }
    // Candidate thresholds are midpoints between consecutive distinct
    // values; the low class is everything below the cut.
    double best_tau = 0.0;
    double best_wcv = std::numeric_limits<double>::infinity();
    for (size_t i = 1; i < n; ++i) {
        if (v[i] == v[i - 1]) continue;
        const double n0 = static_cast<double>(i);
        const double n1 = static_cast<double>(n - i);
        const double var0 = psq[i] / n0 - (psum[i] / n0) * (psum[i] / n0);
        const double s1 = psum[n] - psum[i];
        const double q1 = psq[n] - psq[i];
        const double var1 = q1 / n1 - (s1 / n1) * (s1 / n1);
        const double wcv = (n0 * var0 + n1 * var1) / static_cast<double>(n);
        if (wcv < best_wcv) {
            best_wcv = wcv;
            best_tau = 0.5 * (v[i - 1] + v[i]);
        }
    }
    return best_tau;
}

Vec greville_abscissae(const KnotVector& kv) {
    const int p = kv.degree;
    const int K = kv.basis_count();
    Vec g(K, 0.0);
    for (int k = 0; k < K; ++k) {
        double s = 0.0;
        for (int i = 1; i <= p; ++i) s += kv.knots[k + i];
        g[k] = s / p;
    }
    return g;
}

const char* shape_class_name(ShapeClass c) {
    switch (c) {
        case ShapeClass::convex: return "convex";
        case ShapeClass::concave: return "concave";
        case ShapeClass::near_linear: return "near-linear";
    }
    return "near-linear";
}

ShapeProfile shape_profile(const SplineBank& bank, size_t j, size_t n_samples) {
    if (j >= bank.num_latents()) {
        throw IndexError("shape_profile: latent index out of range");
    }
    if (n_samples < 3) {
        throw ConfigError("shape_profile: need at least 3 samples");
    }
    const KnotVector& kv = bank.knots[j];
    const size_t n = n_samples;
    Vec ts(n), ys(n);
    for (size_t i = 0; i < n; ++i) {
        ts[i] = kv.t_lo + (kv.t_hi - kv.t_lo) * (static_cast<double>(i) / (n - 1));
        ys[i] = spline_apply(bank, j, ts[i]);
    }

    // Least-squares affine fit y ~ a*t + b.
    double mt = 0.0, my = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mt += ts[i];
        my += ys[i];
    }
    mt /= n;
    my /= n;
    double stt = 0.0, sty = 0.0, syy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double dt = ts[i] - mt;
        const double dy = ys[i] - my;
        stt += dt * dt;
        sty += dt * dy;
        syy += dy * dy;
    }
    double score = 0.0;
    if (syy > 0.0) {
        const double a = sty / stt;
        double ss_res = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double r = ys[i] - (my + a * (ts[i] - mt));
            ss_res += r * r;
        }
        score = std::clamp(ss_res / syy, 0.0, 1.0);
        if (score < 1e-12) score = 0.0;  // exactly-affine curves report 0
    }

    double mean_d2 = 0.0;
    for (size_t i = 1; i + 1 < n; ++i) {
        mean_d2 += ys[i + 1] - 2.0 * ys[i] + ys[i - 1];
    }
    mean_d2 /= static_cast<double>(n - 2);

    ShapeProfile prof;
    prof.feature_id = j;
    prof.nonlinearity_score = score;
    constexpr double kLinearTol = 1e-6;
    if (mean_d2 > kLinearTol) {
        prof.shape_class = ShapeClass::convex;
    } else if (mean_d2 < -kLinearTol) {
        prof.shape_class = ShapeClass::concave;
    } else {
        prof.shape_class = ShapeClass::near_linear;
    }
    return prof;
}

}  // namespace kansae
