#pragma once

// Dense row-major matrix of doubles plus the few flat-array kernels the hot
// loops share.  Nothing here knows about networks; layers store one Matrix
// per weight block and iterate rows directly.

#include <cstddef>
#include <vector>
#include <stdexcept>

namespace upgd {

class Matrix {
  public:
    Matrix() = default;
    Matrix(size_t rows, size_t cols, double value = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, value) {}

    size_t rows() const { return rows_; }
    size_t cols() const { return cols_; }
    size_t size() const { return data_.size(); }

    double& operator()(size_t i, size_t j) { return data_[i * cols_ + j]; }
    double operator()(size_t i, size_t j) const { return data_[i * cols_ + j]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double* row(size_t i) { return data_.data() + i * cols_; }
    const double* row(size_t i) const { return data_.data() + i * cols_; }

    void fill(double value) { data_.assign(data_.size(), value); }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

  private:
    size_t rows_ = 0, cols_ = 0;
    std::vector<double> data_;
};

// Eight-accumulator dot product.  The fixed combine order keeps the result a
// deterministic function of the inputs while letting the compiler vectorize;
// a single serial accumulator would defeat that without reassociation.
inline double dot8(const double* a, const double* b, size_t n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        s0 += a[i + 0] * b[i + 0];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        s4 += a[i + 4] * b[i + 4];
        s5 += a[i + 5] * b[i + 5];
        s6 += a[i + 6] * b[i + 6];
        s7 += a[i + 7] * b[i + 7];
    }
    double head = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
    for (; i < n; ++i) head += a[i] * b[i];
    return head;
}

// Same structure for plain sums of |x|, x^2 and nonzero counts; used by the
// diagnostics and the local utility scaling.
inline double sum_abs8(const double* a, size_t n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        s0 += a[i + 0] < 0 ? -a[i + 0] : a[i + 0];
        s1 += a[i + 1] < 0 ? -a[i + 1] : a[i + 1];
        s2 += a[i + 2] < 0 ? -a[i + 2] : a[i + 2];
        s3 += a[i + 3] < 0 ? -a[i + 3] : a[i + 3];
        s4 += a[i + 4] < 0 ? -a[i + 4] : a[i + 4];
        s5 += a[i + 5] < 0 ? -a[i + 5] : a[i + 5];
        s6 += a[i + 6] < 0 ? -a[i + 6] : a[i + 6];
        s7 += a[i + 7] < 0 ? -a[i + 7] : a[i + 7];
    }
    double head = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
    for (; i < n; ++i) head += a[i] < 0 ? -a[i] : a[i];
    return head;
}

inline double sum_sq8(const double* a, size_t n) { return dot8(a, a, n); }

} // namespace upgd
