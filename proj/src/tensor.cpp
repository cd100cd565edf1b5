#include "dpfl/tensor.hpp"

#include <cmath>
#include <numeric>

#include "dpfl/kernels.hpp"

namespace dpfl {

static size_t shape_product(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t d : s) {
        require(d > 0, "tensor dimension must be positive");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<size_t> s, double fill)
    : shape(std::move(s)), data(shape_product(shape), fill) {}

Tensor Tensor::of(std::vector<size_t> s, std::vector<double> values) {
    require(shape_product(s) == values.size(), "tensor shape does not match value count");
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

static constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

static uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

Rng::Rng(uint64_t seed, uint64_t stream)
    : key_(mix64(mix64(seed + kGolden) ^ mix64(stream + 2 * kGolden))) {}

uint64_t Rng::u64_at(uint64_t ctr) const { return mix64(key_ + (ctr + 1) * kGolden); }

Rng Rng::derive(uint64_t a, uint64_t b, uint64_t c) const {
    Rng child;
    child.key_ = mix64(key_ ^ mix64(a + kGolden) ^ mix64(mix64(b + 2 * kGolden) ^ mix64(c + 3 * kGolden)));
    return child;
}

size_t Rng::next_below(size_t n) {
    require(n > 0, "next_below: n must be positive");
    // Lemire's unbiased bounded draw
    __uint128_t m = (__uint128_t)next_u64() * n;
    auto lo = (uint64_t)m;
    if (lo < n) {
        uint64_t t = (0 - (uint64_t)n) % n;
        while (lo < t) {
            m = (__uint128_t)next_u64() * n;
            lo = (uint64_t)m;
        }
    }
    return (size_t)(m >> 64);
}

double Rng::gauss_from(uint64_t a, uint64_t b) {
    double u1 = to_unit_open(a);
    double u2 = to_unit(b);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Rng::next_gaussian() {
    uint64_t a = next_u64();
    uint64_t b = next_u64();
    return gauss_from(a, b);
}

Tensor gaussian_sample(Rng& rng, const std::vector<size_t>& shape, double std) {
    require(std >= 0.0, "gaussian_sample: std must be non-negative");
    Tensor out(shape);
    if (std == 0.0) return out;
    kernels::gaussian_fill(rng, rng.counter(), std, out.data.data(), out.size());
    rng.advance(2 * out.size());
    return out;
}

double l2_norm(const Tensor& t) {
    double acc = 0.0;
    for (double v : t.data) acc += v * v;
    return std::sqrt(acc);
}

Tensor axpy(double a, const Tensor& x, const Tensor& y) {
    require(x.same_shape(y), "axpy: operand shapes differ");
    Tensor out = y;
    kernels::axpy_inplace(out.size(), a, x.data.data(), out.data.data());
    return out;
}

Tensor hadamard(const Tensor& x, const Tensor& y) {
    require(x.same_shape(y), "hadamard: operand shapes differ");
    Tensor out = x;
    for (size_t i = 0; i < out.size(); ++i) out.data[i] *= y.data[i];
    return out;
}

Tensor scale(const Tensor& x, double s) {
    Tensor out = x;
    for (double& v : out.data) v *= s;
    return out;
}

}  // namespace dpfl
