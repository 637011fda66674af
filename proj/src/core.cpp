#include "jem/core.hpp"

#include <algorithm>
#include <cmath>

namespace jem {

double norm2(const Vec& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double dot(const Vec& a, const Vec& b) {
    if (a.size() != b.size())
        throw DimMismatchError("dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

Vec l2_normalize(const Vec& v) {
    double n = norm2(v);
    if (n <= kNormEps)
        throw ZeroNormError("l2_normalize: zero-norm input");
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
    return out;
}

double sq_euclidean(const Vec& a, const Vec& b) {
    if (a.size() != b.size())
        throw DimMismatchError("sq_euclidean: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

Vec softmax(const Vec& z) {
    double m = *std::max_element(z.begin(), z.end());
    Vec out(z.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp(z[i] - m);
        sum += out[i];
    }
    for (double& x : out) x /= sum;
    return out;
}

double log_sum_exp(const Vec& z) {
    double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double x : z) s += std::exp(x - m);
    return m + std::log(s);
}

Mat pairwise_sq_dist(const Mat& a, const Mat& b) {
    if (a.cols != b.cols)
        throw DimMismatchError("pairwise_sq_dist: column mismatch");
    Mat out(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ai = a.row(i);
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* bj = b.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) {
                double d = ai[k] - bj[k];
                s += d * d;
            }
            out.at(i, j) = s;
        }
    }
    return out;
}

bool all_finite(const Vec& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

bool all_finite(const Mat& m) {
    return all_finite(m.data);
}

}  // namespace jem
