#pragma once

// Row-major double-precision matrices, just enough linear algebra for a
// small transformer. No views, no broadcasting; shapes are checked.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace entaudit {

struct Mat {
    std::size_t rows = 0, cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

    double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
    double* row(std::size_t i) { return a.data() + i * cols; }
    const double* row(std::size_t i) const { return a.data() + i * cols; }
    std::size_t size() const { return a.size(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

inline void check_shape(bool ok, const char* what) {
    if (!ok) throw std::runtime_error(std::string("shape mismatch in ") + what);
}

// C = A * B
inline Mat matmul(const Mat& A, const Mat& B) {
    check_shape(A.cols == B.rows, "matmul");
    Mat C(A.rows, B.cols);
    for (std::size_t i = 0; i < A.rows; ++i) {
        const double* ai = A.row(i);
        double* ci = C.row(i);
        for (std::size_t k = 0; k < A.cols; ++k) {
            double aik = ai[k];
            if (aik == 0.0) continue;
            const double* bk = B.row(k);
            for (std::size_t j = 0; j < B.cols; ++j) ci[j] += aik * bk[j];
        }
    }
    return C;
}

// C = A * B^T
inline Mat matmul_nt(const Mat& A, const Mat& B) {
    check_shape(A.cols == B.cols, "matmul_nt");
    Mat C(A.rows, B.rows);
    for (std::size_t i = 0; i < A.rows; ++i) {
        const double* ai = A.row(i);
        for (std::size_t j = 0; j < B.rows; ++j) {
            const double* bj = B.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < A.cols; ++k) s += ai[k] * bj[k];
            C(i, j) = s;
        }
    }
    return C;
}

// C = A^T * B
inline Mat matmul_tn(const Mat& A, const Mat& B) {
    check_shape(A.rows == B.rows, "matmul_tn");
    Mat C(A.cols, B.cols);
    for (std::size_t k = 0; k < A.rows; ++k) {
        const double* ak = A.row(k);
        const double* bk = B.row(k);
        for (std::size_t i = 0; i < A.cols; ++i) {
            double aki = ak[i];
            if (aki == 0.0) continue;
            double* ci = C.row(i);
            for (std::size_t j = 0; j < B.cols; ++j) ci[j] += aki * bk[j];
        }
    }
    return C;
}

inline void add_inplace(Mat& A, const Mat& B) {
    check_shape(A.same_shape(B), "add_inplace");
    for (std::size_t i = 0; i < A.size(); ++i) A.a[i] += B.a[i];
}

inline void scale_inplace(Mat& A, double s) {
    for (double& v : A.a) v *= s;
}

inline void add_scaled_inplace(Mat& A, const Mat& B, double s) {
    check_shape(A.same_shape(B), "add_scaled_inplace");
    for (std::size_t i = 0; i < A.size(); ++i) A.a[i] += s * B.a[i];
}

// adds row vector b (1 x cols) to every row
inline void add_row_inplace(Mat& A, const Mat& b) {
    check_shape(b.rows == 1 && b.cols == A.cols, "add_row_inplace");
    for (std::size_t i = 0; i < A.rows; ++i) {
        double* ai = A.row(i);
        for (std::size_t j = 0; j < A.cols; ++j) ai[j] += b.a[j];
    }
}

// column-wise sum into a 1 x cols row vector
inline Mat col_sums(const Mat& A) {
    Mat s(1, A.cols);
    for (std::size_t i = 0; i < A.rows; ++i) {
        const double* ai = A.row(i);
        for (std::size_t j = 0; j < A.cols; ++j) s.a[j] += ai[j];
    }
    return s;
}

inline double frob_norm_sq(const Mat& A) {
    double s = 0.0;
    for (double v : A.a) s += v * v;
    return s;
}

inline bool all_finite(const Mat& A) {
    for (double v : A.a)
        if (!std::isfinite(v)) return false;
    return true;
}

// numerically stable in-place softmax over one row of length n
inline void softmax_row(double* x, std::size_t n) {
    double m = x[0];
    for (std::size_t i = 1; i < n; ++i)
        if (x[i] > m) m = x[i];
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - m);
        z += x[i];
    }
    for (std::size_t i = 0; i < n; ++i) x[i] /= z;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;  // 1/sqrt(2*pi)
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

}  // namespace entaudit
