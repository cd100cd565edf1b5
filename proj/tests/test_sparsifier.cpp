#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "dpfl/sparsifier.hpp"

using namespace dpfl;

namespace {

// brute-force oracle: sort indices by (|v| desc, idx asc), keep the first k
std::vector<double> oracle_topk(const std::vector<double>& values, double sparsity) {
    size_t n = values.size();
    size_t keep = std::min<size_t>(n, std::max<size_t>(1, size_t(std::ceil(sparsity * double(n)))));
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        if (std::abs(values[a]) != std::abs(values[b]))
            return std::abs(values[a]) > std::abs(values[b]);
        return a < b;
    });
    std::vector<double> mask(n, 0.0);
    for (size_t i = 0; i < keep; ++i) mask[idx[i]] = 1.0;
    return mask;
}

ModelParams tiny_model(uint64_t seed, size_t ext_layers = 2) {
    std::vector<size_t> hidden(ext_layers, 6);
    ModelSpec spec = ModelSpec::mlp(5, hidden, 3);
    Rng rng(seed);
    return ModelParams::init(spec, rng);
}

}  // namespace

TEST_CASE("topk mask: worked example") {
    Tensor v = Tensor::of({4}, {0.5, -0.9, 0.1, 0.3});
    Tensor m = topk_mask(v, 0.5);
    CHECK(m.data == std::vector<double>{1, 1, 0, 0});
    CHECK(m.data == oracle_topk(v.data, 0.5));
}

TEST_CASE("topk mask: full retention at S=1") {
    Tensor v = Tensor::of({5}, {0.1, -0.2, 0.0, 3.0, -1.0});
    Tensor m = topk_mask(v, 1.0);
    CHECK(m.data == std::vector<double>(5, 1.0));
}

TEST_CASE("topk mask: ties break toward the lower flat index") {
    Tensor v = Tensor::of({4}, {0.2, 0.2, 0.2, 0.2});
    CHECK(topk_mask(v, 0.25).data == std::vector<double>{1, 0, 0, 0});
    CHECK(topk_mask(v, 0.75).data == std::vector<double>{1, 1, 1, 0});
}

TEST_CASE("topk mask matches the sort oracle on random data with duplicates") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        size_t n = 10 + rng.next_below(200);
        std::vector<double> values(n);
        for (auto& v : values) {
            v = double(int(rng.next_below(9)) - 4) * 0.25;  // coarse grid forces ties
        }
        double sparsity = 0.05 + 0.9 * rng.next_double();
        Tensor m = topk_mask(Tensor::of({n}, values), sparsity);
        CHECK(m.data == oracle_topk(values, sparsity));
    }
}

TEST_CASE("sparsity exactness and magnitude dominance over the sweep") {
    for (double s : {0.01, 0.05, 0.1, 0.5, 0.9}) {
        for (size_t n : {size_t(10), size_t(101), size_t(1024)}) {
            Rng rng(uint64_t(s * 1000) + n);
            Tensor v = gaussian_sample(rng, {n}, 1.0);
            Tensor m = topk_mask(v, s);
            size_t ones = 0;
            double min_kept = 1e300, max_dropped = 0.0;
            for (size_t i = 0; i < n; ++i) {
                if (m[i] == 1.0) {
                    ++ones;
                    min_kept = std::min(min_kept, std::abs(v[i]));
                } else {
                    CHECK(m[i] == 0.0);
                    max_dropped = std::max(max_dropped, std::abs(v[i]));
                }
            }
            CHECK(ones == size_t(std::ceil(s * double(n))));
            CHECK(min_kept >= max_dropped);
        }
    }
}

TEST_CASE("topk mask rejects out-of-range sparsity") {
    Tensor v({4}, 1.0);
    CHECK_THROWS_AS(topk_mask(v, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(topk_mask(v, 1.5), std::invalid_argument);
    CHECK_THROWS_AS(topk_mask(v, -0.1), std::invalid_argument);
}

TEST_CASE("compute_mask: dense prefix layers stay dense") {
    ModelParams p = tiny_model(5, 3);
    MaskMatrix m = compute_mask(p, 0.25, 2, 7);
    REQUIRE(m.layers.size() == 3);
    CHECK(m.layer_dense(0));
    CHECK(m.layer_dense(1));
    CHECK(!m.layer_dense(2));
    CHECK(m.step_tag == 7);
    size_t n = p.layers[2].param_count();
    CHECK(m.ones_count(2, n) == size_t(std::ceil(0.25 * double(n))));
}

TEST_CASE("compute_mask validates arguments") {
    ModelParams p = tiny_model(6);
    CHECK_THROWS_AS(compute_mask(p, 0.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(compute_mask(p, 1.1, 0), std::invalid_argument);
    CHECK_THROWS_AS(compute_mask(p, 0.5, 99), std::invalid_argument);
}

TEST_CASE("reparameterized params: dense mask is the identity") {
    ModelParams p = tiny_model(7);
    ModelParams out = reparameterized_forward_params(p, MaskMatrix::all_dense(2));
    for (size_t l = 0; l < p.layers.size(); ++l)
        CHECK(out.layers[l].weight.data == p.layers[l].weight.data);
}

TEST_CASE("reparameterized params: masked layer keeps exactly ceil(S*n) nonzeros") {
    ModelParams p = tiny_model(8);
    MaskMatrix m = compute_mask(p, 0.5, 0);
    ModelParams out = reparameterized_forward_params(p, m);
    for (size_t l = 0; l < 2; ++l) {
        Tensor flat = flatten_layer(out.layers[l]);
        size_t nonzeros = 0;
        for (double v : flat.data) nonzeros += v != 0.0 ? 1 : 0;
        // gaussian init makes exact zeros impossible, so nonzeros == popcount
        CHECK(nonzeros == size_t(std::ceil(0.5 * double(flat.size()))));
    }
    // latent params untouched
    CHECK(p.layers[0].weight.data != out.layers[0].weight.data);
}

TEST_CASE("reparameterized params: zero mask zeroes the layer") {
    ModelParams p = tiny_model(9);
    MaskMatrix m = compute_mask(p, 0.5, 0);
    std::fill(m.layers[0].mask.data.begin(), m.layers[0].mask.data.end(), 0.0);
    ModelParams out = reparameterized_forward_params(p, m);
    for (double v : flatten_layer(out.layers[0]).data) CHECK(v == 0.0);
}

TEST_CASE("reparameterization is idempotent") {
    ModelParams p = tiny_model(10);
    MaskMatrix m = compute_mask(p, 0.3, 1);
    ModelParams once = reparameterized_forward_params(p, m);
    ModelParams twice = reparameterized_forward_params(once, m);
    for (size_t l = 0; l < p.layers.size(); ++l)
        CHECK(once.layers[l].weight.data == twice.layers[l].weight.data);
}

TEST_CASE("masked_update: identical params give a zero delta") {
    ModelParams p = tiny_model(11);
    SparseDelta d = masked_update(p, p, compute_mask(p, 0.5, 0));
    CHECK(d.norm == 0.0);
    for (const auto& t : d.layers)
        for (double v : t.data) CHECK(v == 0.0);
}

TEST_CASE("masked_update: dense mask is the plain difference") {
    ModelParams a = tiny_model(12);
    ModelParams b = tiny_model(13);
    SparseDelta d = masked_update(a, b, MaskMatrix::all_dense(2));
    for (size_t l = 0; l < 2; ++l) {
        Tensor fa = flatten_layer(a.layers[l]);
        Tensor fb = flatten_layer(b.layers[l]);
        for (size_t i = 0; i < fa.size(); ++i)
            CHECK(d.layers[l][i] == fa[i] - fb[i]);
    }
}

TEST_CASE("masked_update: per-coordinate recomputation and antisymmetry") {
    ModelParams a = tiny_model(14);
    ModelParams b = tiny_model(15);
    MaskMatrix m = compute_mask(a, 0.4, 1, 3);
    SparseDelta ab = masked_update(a, b, m);
    SparseDelta ba = masked_update(b, a, m);
    CHECK(ab.mask_tag == 3);
    for (size_t l = 0; l < m.layers.size(); ++l) {
        Tensor fa = flatten_layer(a.layers[l]);
        Tensor fb = flatten_layer(b.layers[l]);
        for (size_t i = 0; i < fa.size(); ++i) {
            double mv = m.at(l, i);
            if (mv == 0.0)
                CHECK(ab.layers[l][i] == 0.0);
            else
                CHECK(ab.layers[l][i] == fa[i] - fb[i]);
            CHECK(ab.layers[l][i] == -ba.layers[l][i]);
        }
    }
    CHECK(std::abs(ab.norm - ab.recompute_norm()) < 1e-12);
}

TEST_CASE("sparse delta file round trip") {
    ModelParams a = tiny_model(16);
    ModelParams b = tiny_model(17);
    MaskMatrix m = compute_mask(a, 0.35, 1, 9);
    SparseDelta d = masked_update(a, b, m);
    auto path = (std::filesystem::temp_directory_path() / "dpfl_delta_test.bin").string();
    save_sparse_delta(d, m, path);
    auto [d2, m2] = load_sparse_delta(path);
    REQUIRE(d2.layers.size() == d.layers.size());
    CHECK(d2.norm == d.norm);
    CHECK(d2.mask_tag == 9);
    for (size_t l = 0; l < d.layers.size(); ++l) {
        CHECK(d2.layers[l].data == d.layers[l].data);
        CHECK(m2.layer_dense(l) == m.layer_dense(l));
        if (!m.layer_dense(l)) CHECK(m2.layers[l].mask.data == m.layers[l].mask.data);
    }
    std::filesystem::remove(path);
}
