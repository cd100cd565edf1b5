#include "dpfl/dp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace dpfl {

void PrivacyParams::validate() const {
    require(clip > 0.0, "privacy: clip threshold must be positive");
    require(sigma >= 0.0, "privacy: sigma must be non-negative");
    require(sample_prob > 0.0 && sample_prob <= 1.0, "privacy: q must be in (0, 1]");
    require(clients >= 1, "privacy: client count must be positive");
    require(delta > 0.0 && delta < 1.0, "privacy: delta must be in (0, 1)");
}

SparseDelta clip_update(const SparseDelta& delta, double clip) {
    require(clip > 0.0, "clip_update: threshold must be positive");
    if (delta.norm <= clip) return delta;  // includes the zero-norm case
    double factor = clip / delta.norm;
    SparseDelta out = delta;
    for (auto& t : out.layers)
        for (double& v : t.data) v *= factor;
    out.norm = out.recompute_norm();
    return out;
}

SparseDelta add_masked_noise(const SparseDelta& delta, const PrivacyParams& privacy,
                             const MaskMatrix& mask, Rng& rng) {
    privacy.validate();
    require(mask.layers.size() == delta.layers.size(), "add_masked_noise: mask layer mismatch");
    if (privacy.sigma == 0.0) return delta;
    double std = privacy.sigma * privacy.clip /
                 std::sqrt(privacy.sample_prob * double(privacy.clients));
    SparseDelta out = delta;
    for (size_t l = 0; l < out.layers.size(); ++l) {
        Tensor& t = out.layers[l];
        if (mask.layer_dense(l)) {
            for (double& v : t.data) v += std * rng.next_gaussian();
        } else {
            const Tensor& m = mask.layers[l].mask;
            for (size_t i = 0; i < t.size(); ++i)
                if (m[i] != 0.0) t[i] += std * rng.next_gaussian();
        }
    }
    out.norm = out.recompute_norm();
    return out;
}

// ---------------------------------------------------------------------------
// accountant

namespace {

double log_sum_exp(const std::vector<double>& xs) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : xs) mx = std::max(mx, x);
    if (!std::isfinite(mx)) return mx;
    double acc = 0.0;
    for (double x : xs) acc += std::exp(x - mx);
    return mx + std::log(acc);
}

/// Log-moment of the Poisson-subsampled Gaussian at integer order a >= 2:
/// log sum_j C(a,j) (1-q)^(a-j) q^j exp(j(j-1)/(2 sigma^2)).
double log_moment_int(double q, double sigma, int64_t a) {
    std::vector<double> terms;
    terms.reserve(size_t(a) + 1);
    double log_q = std::log(q);
    double log_1mq = std::log1p(-q);
    double lgamma_a1 = std::lgamma(double(a) + 1.0);
    for (int64_t j = 0; j <= a; ++j) {
        double log_binom =
            lgamma_a1 - std::lgamma(double(j) + 1.0) - std::lgamma(double(a - j) + 1.0);
        double t = log_binom + double(j) * log_q + double(a - j) * log_1mq +
                   double(j) * double(j - 1) / (2.0 * sigma * sigma);
        terms.push_back(t);
    }
    return log_sum_exp(terms);
}

}  // namespace

double rdp_subsampled_gaussian(double q, double sigma, double order) {
    require(q > 0.0 && q <= 1.0, "rdp: q must be in (0, 1]");
    require(order > 1.0, "rdp: order must exceed 1");
    if (sigma == 0.0) return std::numeric_limits<double>::infinity();
    require(sigma > 0.0, "rdp: sigma must be non-negative");
    if (q == 1.0) return order / (2.0 * sigma * sigma);

    double floor_a = std::floor(order);
    if (order == floor_a) return log_moment_int(q, sigma, int64_t(order)) / (order - 1.0);

    // chord interpolation of the convex log-moment g(a), with g(1) = 0
    auto g = [&](int64_t a) { return a == 1 ? 0.0 : log_moment_int(q, sigma, a); };
    auto lo = int64_t(floor_a);
    double w = order - floor_a;
    double moment = (1.0 - w) * g(lo) + w * g(lo + 1);
    return moment / (order - 1.0);
}

const std::vector<double>& default_rdp_orders() {
    static const std::vector<double> orders = [] {
        std::vector<double> o{1.25, 1.5};
        for (int a = 2; a <= 64; ++a) o.push_back(double(a));
        o.push_back(128.0);
        o.push_back(256.0);
        return o;
    }();
    return orders;
}

std::vector<double> per_round_rdp(double q, double sigma, const std::vector<double>& orders) {
    std::vector<double> out;
    out.reserve(orders.size());
    for (double a : orders) out.push_back(rdp_subsampled_gaussian(q, sigma, a));
    return out;
}

RdpLedger::RdpLedger(std::vector<double> orders) : orders_(std::move(orders)) {
    require(!orders_.empty(), "ledger: order grid is empty");
    for (size_t i = 0; i < orders_.size(); ++i) {
        require(orders_[i] > 1.0, "ledger: orders must exceed 1");
        if (i > 0) require(orders_[i] > orders_[i - 1], "ledger: orders must be ascending");
    }
}

void RdpLedger::compose(const std::vector<double>& per_round) {
    require(per_round.size() == orders_.size(), "ledger: order grid mismatch");
    for (double v : per_round) require(v >= 0.0, "ledger: per-round rdp must be non-negative");
    if (!runs_.empty() && runs_.back().value == per_round) {
        runs_.back().count++;
    } else {
        runs_.push_back({per_round, 1});
    }
    rounds_++;
}

std::vector<double> RdpLedger::accumulated() const {
    std::vector<double> acc(orders_.size(), 0.0);
    for (const auto& run : runs_)
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += double(run.count) * run.value[i];
    return acc;
}

EpsilonReport epsilon_at_delta(const RdpLedger& ledger, double delta) {
    require(delta > 0.0 && delta < 1.0, "epsilon_at_delta: delta must be in (0, 1)");
    if (ledger.rounds_composed() == 0)
        throw std::logic_error("epsilon_at_delta: ledger is empty");
    auto acc = ledger.accumulated();
    EpsilonReport best{std::numeric_limits<double>::infinity(), 0.0};
    double log_inv_delta = std::log(1.0 / delta);
    for (size_t i = 0; i < acc.size(); ++i) {
        double a = ledger.orders()[i];
        double eps = acc[i] + log_inv_delta / (a - 1.0);
        if (eps < best.epsilon) best = {eps, a};
    }
    return best;
}

double calibrate_sigma(double eps_target, double delta, double q, int rounds) {
    require(eps_target > 0.0, "calibrate: epsilon target must be positive");
    require(delta > 0.0 && delta < 1.0, "calibrate: delta must be in (0, 1)");
    require(q > 0.0 && q <= 1.0, "calibrate: q must be in (0, 1]");
    require(rounds >= 1, "calibrate: rounds must be positive");

    const auto& orders = default_rdp_orders();
    auto epsilon_of = [&](double sigma) {
        RdpLedger ledger(orders);
        std::vector<double> rdp = per_round_rdp(q, sigma, orders);
        for (int t = 0; t < rounds; ++t) ledger.compose(rdp);
        return epsilon_at_delta(ledger, delta).epsilon;
    };

    constexpr double kFloor = 1e-2;
    constexpr double kCeil = 1e6;
    constexpr double kStep = 1.01;
    // epsilon is decreasing in sigma: bisect over grid exponents
    int64_t hi = int64_t(std::floor(std::log(kCeil / kFloor) / std::log(kStep)));
    if (epsilon_of(kFloor) <= eps_target) return kFloor;
    if (epsilon_of(kFloor * std::pow(kStep, double(hi))) > eps_target) {
        std::ostringstream msg;
        msg << "calibrate_sigma: target epsilon " << eps_target << " (delta " << delta << ", q "
            << q << ", rounds " << rounds << ") unattainable with sigma <= " << kCeil
            << "; epsilon at that ceiling is "
            << epsilon_of(kFloor * std::pow(kStep, double(hi)));
        throw CalibrationError(msg.str());
    }
    int64_t lo = 0;  // epsilon(lo) > target, epsilon(hi) <= target
    while (hi - lo > 1) {
        int64_t mid = lo + (hi - lo) / 2;
        if (epsilon_of(kFloor * std::pow(kStep, double(mid))) <= eps_target)
            hi = mid;
        else
            lo = mid;
    }
    return kFloor * std::pow(kStep, double(hi));
}

}  // namespace dpfl
