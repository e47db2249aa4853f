#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kansae/errors.hpp"
#include "kansae/mat.hpp"

namespace kansae {

// Clamped knot vector for B-splines of degree p: first/last knot repeated
// p+1 times, interior knots strictly increasing. K = knots.size() - p - 1
// basis functions live on it.
struct KnotVector {
    int degree = 3;
    std::vector<double> knots;
    double t_lo = 0.0;
    double t_hi = 1.0;

    int basis_count() const { return static_cast<int>(knots.size()) - degree - 1; }
};

// Uniform clamped knot vector over [t_lo, t_hi] with K basis functions.
KnotVector build_knots(double t_lo, double t_hi, int K, int p);

// Inputs outside [t_lo, t_hi] are clamped (constant extrapolation).
double clamp_to_domain(const KnotVector& kv, double t);

struct BasisEval {
    int span = 0;  // i such that knots[i] <= clamp(t) < knots[i+1]
    Vec values;    // all K basis values; at most p+1 nonzero
};

// Dense basis evaluation B_{k,p}(clamp(t)) for k = 0..K-1.
BasisEval basis_eval(const KnotVector& kv, double t);

// Dense dB_k/dt at clamp(t). Zero vector when t is strictly outside the
// domain (the clamped extension is constant there).
Vec basis_deriv(const KnotVector& kv, double t);

// Nonzero-only evaluation for the training kernels: values and derivatives
// of the p+1 basis functions supported at t, starting at index `first`.
inline constexpr int kMaxSplineDegree = 7;

struct BasisLocal {
    int first = 0;
    int count = 0;  // p+1
    double val[kMaxSplineDegree + 1];
    double der[kMaxSplineDegree + 1];
};

void basis_local(const KnotVector& kv, double t, BasisLocal& out);

// Per-latent activation bank: one knot vector per latent, control points
// c (M x K). phi_j(t) = sum_k c[j,k] B_k(t).
struct SplineBank {
    std::vector<KnotVector> knots;
    Mat c;

    size_t num_latents() const { return knots.size(); }
    int coeff_count() const { return static_cast<int>(c.cols); }
};

double spline_apply(const SplineBank& bank, size_t j, double t);

// { j : max_k |c_jk| >= tau }
std::vector<size_t> alive_set(const SplineBank& bank, double tau);

// Per-row max |c_jk|, the statistic alive_set thresholds.
Vec control_row_maxima(const SplineBank& bank);

// Otsu split of a bimodal magnitude distribution: the midpoint between
// consecutive sorted values minimizing within-class variance.
double fit_tau(std::span<const double> row_maxima);

// Greville abscissae of a knot vector. Using any affine function's values
// at these points as control ordinates reproduces that function exactly.
Vec greville_abscissae(const KnotVector& kv);

enum class ShapeClass { convex, concave, near_linear };

const char* shape_class_name(ShapeClass c);

struct ShapeProfile {
    size_t feature_id = 0;
    double nonlinearity_score = 0.0;  // 1 - R^2 of the affine fit, in [0,1]
    ShapeClass shape_class = ShapeClass::near_linear;
};

// Samples phi_j on a uniform grid over the knot span and classifies the
// curve by the sign of its mean discrete second difference.
ShapeProfile shape_profile(const SplineBank& bank, size_t j, size_t n_samples);

}  // namespace kansae
