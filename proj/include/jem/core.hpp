#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace jem {

using Vec = std::vector<double>;

// Row-major dense matrix.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    double* row(std::size_t i) { return data.data() + i * cols; }
    const double* row(std::size_t i) const { return data.data() + i * cols; }

    Vec row_vec(std::size_t i) const {
        return Vec(row(i), row(i) + cols);
    }
    void set_row(std::size_t i, const Vec& v) {
        for (std::size_t j = 0; j < cols; ++j) at(i, j) = v[j];
    }
};

struct ZeroNormError : std::runtime_error {
    explicit ZeroNormError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DimMismatchError : std::runtime_error {
    explicit DimMismatchError(const std::string& msg) : std::runtime_error(msg) {}
};

constexpr double kNormEps = 1e-12;

double norm2(const Vec& v);
double dot(const Vec& a, const Vec& b);

// Throws ZeroNormError when the norm is at or below kNormEps.
Vec l2_normalize(const Vec& v);

double sq_euclidean(const Vec& a, const Vec& b);

// Max-subtraction stabilized; output sums to 1.
Vec softmax(const Vec& z);

double log_sum_exp(const Vec& z);

// Entry (i,j) = sq_euclidean(A.row(i), B.row(j)).
Mat pairwise_sq_dist(const Mat& a, const Mat& b);

bool all_finite(const Vec& v);
bool all_finite(const Mat& m);

}  // namespace jem
