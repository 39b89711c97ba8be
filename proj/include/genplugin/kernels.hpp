#pragma once

// Dense kernels used by the autograd engine and by the retrieval / quantization
// code. Every kernel has a serial reference in `serial::` and an OpenMP version
// in `parallel::`; the top-level functions dispatch on problem size.

#include <cstddef>
#include <span>
#include <vector>

#include "genplugin/matrix.hpp"

namespace genplugin::kernels {

enum class Trans { No, Yes };

namespace serial {

// C (+)= op(A) · op(B)
void gemm(const Matrix& a, Trans ta, const Matrix& b, Trans tb, Matrix& c, bool accumulate);

// For each row of `points`, index of the nearest row of `centroids` (squared L2);
// ties go to the lower centroid index. Returns squared distances in `dist`.
void nearest_centroid(const Matrix& points, const Matrix& centroids, std::vector<std::size_t>& assign,
                      std::vector<double>& dist);

// Cosine similarity of `query` against every row of `rows`. Zero-norm rows score 0.
void cosine_scores(std::span<const double> query, const Matrix& rows, std::vector<double>& out);

}  // namespace serial

namespace parallel {

void gemm(const Matrix& a, Trans ta, const Matrix& b, Trans tb, Matrix& c, bool accumulate);
void nearest_centroid(const Matrix& points, const Matrix& centroids, std::vector<std::size_t>& assign,
                      std::vector<double>& dist);
void cosine_scores(std::span<const double> query, const Matrix& rows, std::vector<double>& out);

}  // namespace parallel

/// Work (multiply-adds) below which dispatch stays serial.
inline constexpr std::size_t kParallelThreshold = 1u << 18;

void gemm(const Matrix& a, Trans ta, const Matrix& b, Trans tb, Matrix& c, bool accumulate = false);
Matrix matmul(const Matrix& a, const Matrix& b, Trans ta = Trans::No, Trans tb = Trans::No);
void nearest_centroid(const Matrix& points, const Matrix& centroids, std::vector<std::size_t>& assign,
                      std::vector<double>& dist);
void cosine_scores(std::span<const double> query, const Matrix& rows, std::vector<double>& out);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

int max_threads();

}  // namespace genplugin::kernels
