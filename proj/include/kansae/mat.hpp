#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace kansae {

using Vec = std::vector<double>;

// Dense row-major f64 matrix. Deliberately minimal; the hot loops below
// index raw spans.
struct Mat {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(size_t r, size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}

    double& at(size_t r, size_t c) { return v[r * cols + c]; }
    double at(size_t r, size_t c) const { return v[r * cols + c]; }

    std::span<double> row(size_t r) { return {v.data() + r * cols, cols}; }
    std::span<const double> row(size_t r) const { return {v.data() + r * cols, cols}; }

    size_t size() const { return v.size(); }
    bool empty() const { return v.empty(); }
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// y += a * x
inline void axpy(double a, std::span<const double> x, std::span<double> y) {
    for (size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline double norm2(std::span<const double> a) {
    double s = 0.0;
    for (double x : a) s += x * x;
    return s;
}

}  // namespace kansae
