#pragma once

#include <cstddef>
#include <cstdint>

#include "dpfl/tensor.hpp"

// Hot inner loops, parallelized with OpenMP. Each output element is owned by
// exactly one thread and its reduction runs serially inside that thread, so
// results are bit-identical to the serial reference for any thread count.
// The serial twins in kernels::serial are kept as the test oracle and for
// the benchmark tool.

namespace dpfl::kernels {

/// C[m x n] = A[m x k] * B[k x n]
void matmul(const double* a, const double* b, double* c, size_t m, size_t k, size_t n);
/// C[m x n] = A[m x k] * B^T, with B stored [n x k]
void matmul_nt(const double* a, const double* b, double* c, size_t m, size_t k, size_t n);
/// C[m x n] = A^T * B, with A stored [k x m], B stored [k x n]
void matmul_tn(const double* a, const double* b, double* c, size_t m, size_t k, size_t n);

/// y += a * x
void axpy_inplace(size_t n, double a, const double* x, double* y);

/// out[i] ~ N(0, std^2) using counters ctr0+2i, ctr0+2i+1 of rng.
void gaussian_fill(const Rng& rng, uint64_t ctr0, double std, double* out, size_t n);

namespace serial {
void matmul(const double* a, const double* b, double* c, size_t m, size_t k, size_t n);
void matmul_nt(const double* a, const double* b, double* c, size_t m, size_t k, size_t n);
void matmul_tn(const double* a, const double* b, double* c, size_t m, size_t k, size_t n);
void axpy_inplace(size_t n, double a, const double* x, double* y);
void gaussian_fill(const Rng& rng, uint64_t ctr0, double std, double* out, size_t n);
}  // namespace serial

}  // namespace dpfl::kernels
