#include "dpfl/kernels.hpp"

namespace dpfl::kernels {

namespace serial {

void matmul(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (size_t j = 0; j < n; ++j) ci[j] = 0.0;
        for (size_t s = 0; s < k; ++s) {
            double av = a[i * k + s];
            const double* bs = b + s * n;
            for (size_t j = 0; j < n; ++j) ci[j] += av * bs[j];
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        for (size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (size_t s = 0; s < k; ++s) acc += ai[s] * bj[s];
            c[i * n + j] = acc;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (size_t s = 0; s < k; ++s) acc += a[s * m + i] * b[s * n + j];
            c[i * n + j] = acc;
        }
    }
}

void axpy_inplace(size_t n, double a, const double* x, double* y) {
    for (size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void gaussian_fill(const Rng& rng, uint64_t ctr0, double std, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i)
        out[i] = std * Rng::gauss_from(rng.u64_at(ctr0 + 2 * i), rng.u64_at(ctr0 + 2 * i + 1));
}

}  // namespace serial

// The i-loops below distribute whole output rows (or elements) to threads;
// no floating-point reduction is ever split across threads. The `if` clause
// keeps small problems serial where spawning costs more than the loop.

void matmul(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
    for (size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (size_t j = 0; j < n; ++j) ci[j] = 0.0;
        for (size_t s = 0; s < k; ++s) {
            double av = a[i * k + s];
            const double* bs = b + s * n;
            for (size_t j = 0; j < n; ++j) ci[j] += av * bs[j];
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
    for (size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        for (size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (size_t s = 0; s < k; ++s) acc += ai[s] * bj[s];
            c[i * n + j] = acc;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (size_t s = 0; s < k; ++s) acc += a[s * m + i] * b[s * n + j];
            c[i * n + j] = acc;
        }
    }
}

void axpy_inplace(size_t n, double a, const double* x, double* y) {
#pragma omp parallel for schedule(static) if (n > 65536)
    for (size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void gaussian_fill(const Rng& rng, uint64_t ctr0, double std, double* out, size_t n) {
#pragma omp parallel for schedule(static) if (n > 16384)
    for (size_t i = 0; i < n; ++i)
        out[i] = std * Rng::gauss_from(rng.u64_at(ctr0 + 2 * i), rng.u64_at(ctr0 + 2 * i + 1));
}

}  // namespace dpfl::kernels
