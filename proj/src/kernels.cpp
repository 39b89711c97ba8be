#include "genplugin/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace genplugin {

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument("max_abs_diff: shape " + a.shape_str() + " vs " + b.shape_str());
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace genplugin

namespace genplugin::kernels {
namespace {

struct GemmShape {
    std::size_t m, k, n;
};

GemmShape check_gemm(const Matrix& a, Trans ta, const Matrix& b, Trans tb, Matrix& c, bool accumulate) {
    const std::size_t m = ta == Trans::No ? a.rows() : a.cols();
    const std::size_t k = ta == Trans::No ? a.cols() : a.rows();
    const std::size_t kb = tb == Trans::No ? b.rows() : b.cols();
    const std::size_t n = tb == Trans::No ? b.cols() : b.rows();
    if (k != kb) {
        throw std::invalid_argument("gemm: inner dimension mismatch " + a.shape_str() + " · " + b.shape_str());
    }
    if (accumulate) {
        if (c.rows() != m || c.cols() != n) throw std::invalid_argument("gemm: accumulator shape mismatch");
    } else if (c.rows() != m || c.cols() != n) {
        c = Matrix(m, n);
    } else {
        c.fill(0.0);
    }
    return {m, k, n};
}

// Computes row i of C. Shared by both variants so the parallel result is
// bit-identical to the serial one.
inline void gemm_row(const Matrix& a, Trans ta, const Matrix& b, Trans tb, Matrix& c, const GemmShape& s,
                     std::size_t i) {
    double* crow = c.data() + i * s.n;
    if (tb == Trans::No) {
        for (std::size_t p = 0; p < s.k; ++p) {
            const double av = ta == Trans::No ? a(i, p) : a(p, i);
            if (av == 0.0) continue;
            const double* brow = b.data() + p * s.n;
            for (std::size_t j = 0; j < s.n; ++j) crow[j] += av * brow[j];
        }
    } else {
        for (std::size_t j = 0; j < s.n; ++j) {
            const double* brow = b.data() + j * s.k;
            double acc = 0.0;
            if (ta == Trans::No) {
                const double* arow = a.data() + i * s.k;
                double p0 = 0.0, p1 = 0.0, p2 = 0.0, p3 = 0.0;
                std::size_t p = 0;
                for (; p + 4 <= s.k; p += 4) {
                    p0 += arow[p] * brow[p];
                    p1 += arow[p + 1] * brow[p + 1];
                    p2 += arow[p + 2] * brow[p + 2];
                    p3 += arow[p + 3] * brow[p + 3];
                }
                for (; p < s.k; ++p) p0 += arow[p] * brow[p];
                acc = (p0 + p1) + (p2 + p3);
            } else {
                for (std::size_t p = 0; p < s.k; ++p) acc += a(p, i) * brow[p];
            }
            crow[j] += acc;
        }
    }
}

inline void nearest_row(const Matrix& points, const Matrix& centroids, std::size_t i,
                        std::vector<std::size_t>& assign, std::vector<double>& dist) {
    const std::size_t d = points.cols();
    const double* x = points.data() + i * d;
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
        const double* y = centroids.data() + c * d;
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double t = x[j] - y[j];
            s += t * t;
        }
        if (s < best) {
            best = s;
            arg = c;
        }
    }
    assign[i] = arg;
    dist[i] = best;
}

void check_centroids(const Matrix& points, const Matrix& centroids) {
    if (points.cols() != centroids.cols()) throw std::invalid_argument("nearest_centroid: dimension mismatch");
    if (centroids.rows() == 0) throw std::invalid_argument("nearest_centroid: no centroids");
}

}  // namespace

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

namespace serial {

void gemm(const Matrix& a, Trans ta, const Matrix& b, Trans tb, Matrix& c, bool accumulate) {
    const GemmShape s = check_gemm(a, ta, b, tb, c, accumulate);
    for (std::size_t i = 0; i < s.m; ++i) gemm_row(a, ta, b, tb, c, s, i);
}

void nearest_centroid(const Matrix& points, const Matrix& centroids, std::vector<std::size_t>& assign,
                      std::vector<double>& dist) {
    check_centroids(points, centroids);
    assign.assign(points.rows(), 0);
    dist.assign(points.rows(), 0.0);
    for (std::size_t i = 0; i < points.rows(); ++i) nearest_row(points, centroids, i, assign, dist);
}

void cosine_scores(std::span<const double> query, const Matrix& rows, std::vector<double>& out) {
    out.assign(rows.rows(), 0.0);
    const double qn = norm(query);
    for (std::size_t r = 0; r < rows.rows(); ++r) {
        const double rn = norm(rows.row_span(r));
        out[r] = (qn == 0.0 || rn == 0.0) ? 0.0 : dot(query, rows.row_span(r)) / (qn * rn);
    }
}

}  // namespace serial

namespace parallel {

void gemm(const Matrix& a, Trans ta, const Matrix& b, Trans tb, Matrix& c, bool accumulate) {
    const GemmShape s = check_gemm(a, ta, b, tb, c, accumulate);
    const auto m = static_cast<std::ptrdiff_t>(s.m);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < m; ++i) gemm_row(a, ta, b, tb, c, s, static_cast<std::size_t>(i));
}

void nearest_centroid(const Matrix& points, const Matrix& centroids, std::vector<std::size_t>& assign,
                      std::vector<double>& dist) {
    check_centroids(points, centroids);
    assign.assign(points.rows(), 0);
    dist.assign(points.rows(), 0.0);
    const auto n = static_cast<std::ptrdiff_t>(points.rows());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) nearest_row(points, centroids, static_cast<std::size_t>(i), assign, dist);
}

void cosine_scores(std::span<const double> query, const Matrix& rows, std::vector<double>& out) {
    out.assign(rows.rows(), 0.0);
    const double qn = norm(query);
    const auto n = static_cast<std::ptrdiff_t>(rows.rows());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < n; ++r) {
        const auto row = rows.row_span(static_cast<std::size_t>(r));
        const double rn = norm(row);
        out[static_cast<std::size_t>(r)] = (qn == 0.0 || rn == 0.0) ? 0.0 : dot(query, row) / (qn * rn);
    }
}

}  // namespace parallel

void gemm(const Matrix& a, Trans ta, const Matrix& b, Trans tb, Matrix& c, bool accumulate) {
    const std::size_t work = a.size() * (tb == Trans::No ? b.cols() : b.rows());
    if (work >= kParallelThreshold && max_threads() > 1) {
        parallel::gemm(a, ta, b, tb, c, accumulate);
    } else {
        serial::gemm(a, ta, b, tb, c, accumulate);
    }
}

Matrix matmul(const Matrix& a, const Matrix& b, Trans ta, Trans tb) {
    Matrix c;
    gemm(a, ta, b, tb, c, false);
    return c;
}

void nearest_centroid(const Matrix& points, const Matrix& centroids, std::vector<std::size_t>& assign,
                      std::vector<double>& dist) {
    if (points.size() * centroids.rows() >= kParallelThreshold && max_threads() > 1) {
        parallel::nearest_centroid(points, centroids, assign, dist);
    } else {
        serial::nearest_centroid(points, centroids, assign, dist);
    }
}

void cosine_scores(std::span<const double> query, const Matrix& rows, std::vector<double>& out) {
    if (rows.size() >= kParallelThreshold && max_threads() > 1) {
        parallel::cosine_scores(query, rows, out);
    } else {
        serial::cosine_scores(query, rows, out);
    }
}

}  // namespace genplugin::kernels
