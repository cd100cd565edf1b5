#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "dpfl/sparsifier.hpp"
#include "dpfl/tensor.hpp"

namespace dpfl {

struct PrivacyParams {
    double clip = 0.01;        // C
    double sigma = 0.0;        // noise scale (multiplies C)
    double sample_prob = 1.0;  // q
    int clients = 1;           // N
    double delta = 1e-5;
    void validate() const;
};

/// delta * min(1, C/||delta||); a zero-norm delta passes through unchanged.
SparseDelta clip_update(const SparseDelta& delta, double clip);

/// Adds N(0, (sigma*C)^2/(q*N)) per coordinate to dense-prefix layers and to
/// mask-one coordinates of masked layers; mask-zero coordinates stay exactly 0.
/// sigma = 0 returns the input unchanged.
SparseDelta add_masked_noise(const SparseDelta& delta, const PrivacyParams& privacy,
                             const MaskMatrix& mask, Rng& rng);

/// Per-round RDP of the Poisson-subsampled Gaussian mechanism at `order`.
/// q = 1 is the analytic Gaussian value order/(2 sigma^2); integer orders use
/// the exact binomial-expansion bound with log-sum-exp; fractional orders are
/// bounded by chord interpolation of the convex log-moment between integers.
/// sigma = 0 returns +infinity (infinite privacy loss).
double rdp_subsampled_gaussian(double q, double sigma, double order);

/// The mixed fine/coarse order grid used by default everywhere.
const std::vector<double>& default_rdp_orders();

std::vector<double> per_round_rdp(double q, double sigma, const std::vector<double>& orders);

/// Additive composition ledger over a fixed order grid. Increments are stored
/// as (value, repeat-count) runs so composing T identical rounds accumulates
/// exactly T times the per-round value with no summation drift.
class RdpLedger {
  public:
    explicit RdpLedger(std::vector<double> orders = default_rdp_orders());
    void compose(const std::vector<double>& per_round);
    const std::vector<double>& orders() const { return orders_; }
    std::vector<double> accumulated() const;
    int rounds_composed() const { return rounds_; }

  private:
    struct Run {
        std::vector<double> value;
        int64_t count;
    };
    std::vector<double> orders_;
    std::vector<Run> runs_;
    int rounds_ = 0;
};

struct EpsilonReport {
    double epsilon = 0.0;
    double best_order = 0.0;
};

/// Standard RDP->DP conversion: min over orders of rdp + log(1/delta)/(a-1).
EpsilonReport epsilon_at_delta(const RdpLedger& ledger, double delta);

struct CalibrationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Smallest sigma on the geometric grid 0.01 * 1.01^k whose epsilon after
/// `rounds` compositions is <= eps_target. Throws CalibrationError if no
/// sigma <= 1e6 reaches the target.
double calibrate_sigma(double eps_target, double delta, double q, int rounds);

}  // namespace dpfl
