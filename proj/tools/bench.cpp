// Compares the OpenMP kernels against the serial reference and times one
// training round of the default preset at 1 thread vs all threads.

#include <chrono>
#include <cstdio>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dpfl/harness.hpp"
#include "dpfl/kernels.hpp"

using Clock = std::chrono::steady_clock;

static double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

template <typename F>
static double best_of(int reps, F&& f) {
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
        auto t0 = Clock::now();
        f();
        best = std::min(best, ms_since(t0));
    }
    return best;
}

static void bench_matmul(size_t m, size_t k, size_t n) {
    dpfl::Rng rng(7);
    std::vector<double> a(m * k), b(k * n), c(m * n), c_ref(m * n);
    for (auto& v : a) v = rng.next_gaussian();
    for (auto& v : b) v = rng.next_gaussian();

    double t_serial = best_of(5, [&] { dpfl::kernels::serial::matmul(a.data(), b.data(), c_ref.data(), m, k, n); });
    double t_omp = best_of(5, [&] { dpfl::kernels::matmul(a.data(), b.data(), c.data(), m, k, n); });
    bool same = c == c_ref;
    std::printf("matmul %4zux%4zux%4zu   serial %8.2f ms   omp %8.2f ms   speedup %.2fx   bitwise %s\n",
                m, k, n, t_serial, t_omp, t_serial / t_omp, same ? "equal" : "DIFFER");
}

static void bench_gaussian(size_t n) {
    dpfl::Rng rng(11);
    std::vector<double> out(n), out_ref(n);
    double t_serial = best_of(5, [&] { dpfl::kernels::serial::gaussian_fill(rng, 0, 1.0, out_ref.data(), n); });
    double t_omp = best_of(5, [&] { dpfl::kernels::gaussian_fill(rng, 0, 1.0, out.data(), n); });
    bool same = out == out_ref;
    std::printf("gaussian_fill n=%zu   serial %8.2f ms   omp %8.2f ms   speedup %.2fx   bitwise %s\n",
                n, t_serial, t_omp, t_serial / t_omp, same ? "equal" : "DIFFER");
}

static double run_round_preset(int threads) {
#ifdef _OPENMP
    omp_set_num_threads(threads);
#else
    (void)threads;
#endif
    auto cfg = dpfl::harness::default_config();
    cfg["rounds"] = 5;
    cfg["sigma"] = 4.0;  // skip calibration; noise scale is irrelevant to timing
    cfg["eval_every"] = 5;
    auto cells = dpfl::harness::expand_grid(dpfl::harness::parse_config(cfg));
    auto t0 = Clock::now();
    dpfl::harness::run_cell_seed(cells[0], 1);
    return ms_since(t0);
}

int main() {
#ifdef _OPENMP
    int max_threads = omp_get_max_threads();
#else
    int max_threads = 1;
#endif
    std::printf("threads available: %d\n\n", max_threads);

    bench_matmul(256, 512, 256);
    bench_matmul(512, 512, 512);
    bench_gaussian(1u << 22);

    std::printf("\ndefault preset, 5 rounds (clients in parallel):\n");
    double t1 = run_round_preset(1);
    std::printf("  1 thread : %8.2f ms\n", t1);
    if (max_threads > 1) {
        double tn = run_round_preset(max_threads);
        std::printf("  %d threads: %8.2f ms   speedup %.2fx\n", max_threads, tn, t1 / tn);
    }
    return 0;
}
