#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpfl {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

/// Dense row-major array of float64 with an explicit shape.
/// Values are immutable from the perspective of the public ops below:
/// every op allocates a fresh result and leaves its inputs untouched.
struct Tensor {
    std::vector<size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<size_t> s, double fill = 0.0);
    static Tensor of(std::vector<size_t> s, std::vector<double> values);

    size_t size() const { return data.size(); }
    double operator[](size_t i) const { return data[i]; }
    double& operator[](size_t i) { return data[i]; }
    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;
};

/// Counter-based deterministic RNG. The output sequence is a pure function
/// of (seed, stream): the i-th draw is a splitmix64-style hash of the key
/// and the counter i, so values can also be read at arbitrary counters,
/// which lets parallel fills reproduce the serial sequence exactly.
class Rng {
  public:
    explicit Rng(uint64_t seed, uint64_t stream = 0);

    uint64_t u64_at(uint64_t ctr) const;
    uint64_t next_u64() { return u64_at(counter_++); }
    uint64_t counter() const { return counter_; }
    void advance(uint64_t n) { counter_ += n; }

    /// Uniform in [0, 1).
    double next_double() { return to_unit(next_u64()); }
    /// Uniform integer in [0, n); n must be positive.
    size_t next_below(size_t n);
    /// Standard normal draw (consumes two counters).
    double next_gaussian();

    /// Independent child stream; deterministic in (parent key, tags).
    Rng derive(uint64_t a, uint64_t b = 0, uint64_t c = 0) const;

    static double to_unit(uint64_t x) { return double(x >> 11) * 0x1.0p-53; }
    /// Uniform in (0, 1], safe as a log() argument.
    static double to_unit_open(uint64_t x) { return double((x >> 11) + 1) * 0x1.0p-53; }
    /// One N(0,1) value from a pair of raw draws (Box-Muller).
    static double gauss_from(uint64_t a, uint64_t b);

  private:
    Rng() = default;
    uint64_t key_ = 0;
    uint64_t counter_ = 0;
};

/// Fisher-Yates shuffle driven by rng (deterministic).
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = rng.next_below(i);
        std::swap(v[i - 1], v[j]);
    }
}

/// i.i.d. N(0, std^2) entries; std = 0 yields zeros without consuming draws.
Tensor gaussian_sample(Rng& rng, const std::vector<size_t>& shape, double std);

double l2_norm(const Tensor& t);

/// a*x + y, elementwise.
Tensor axpy(double a, const Tensor& x, const Tensor& y);
Tensor hadamard(const Tensor& x, const Tensor& y);
Tensor scale(const Tensor& x, double s);

}  // namespace dpfl
