#include "dpfl/sparsifier.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace dpfl {

MaskMatrix MaskMatrix::all_dense(size_t layer_count) {
    MaskMatrix m;
    m.sparsity = 1.0;
    m.dense_prefix = layer_count;
    m.layers.assign(layer_count, MaskLayer{});
    return m;
}

size_t MaskMatrix::ones_count(size_t layer, size_t layer_param_count) const {
    if (layers[layer].dense) return layer_param_count;
    size_t n = 0;
    for (double v : layers[layer].mask.data) n += v != 0.0 ? 1 : 0;
    return n;
}

Tensor flatten_layer(const DenseLayer& layer) {
    Tensor flat({layer.param_count()});
    std::copy(layer.weight.data.begin(), layer.weight.data.end(), flat.data.begin());
    std::copy(layer.bias.data.begin(), layer.bias.data.end(),
              flat.data.begin() + std::ptrdiff_t(layer.weight.size()));
    return flat;
}

void unflatten_into(const Tensor& flat, DenseLayer& layer) {
    require(flat.size() == layer.param_count(), "unflatten: size mismatch");
    std::copy(flat.data.begin(), flat.data.begin() + std::ptrdiff_t(layer.weight.size()),
              layer.weight.data.begin());
    std::copy(flat.data.begin() + std::ptrdiff_t(layer.weight.size()), flat.data.end(),
              layer.bias.data.begin());
}

Tensor topk_mask(const Tensor& values, double sparsity) {
    require(sparsity > 0.0 && sparsity <= 1.0, "sparsity must be in (0, 1]");
    size_t n = values.size();
    size_t keep = size_t(std::ceil(sparsity * double(n)));
    keep = std::min(std::max<size_t>(keep, 1), n);
    Tensor mask({n});
    if (keep == n) {
        std::fill(mask.data.begin(), mask.data.end(), 1.0);
        return mask;
    }
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    // total order: larger magnitude first, lower index breaks ties
    auto before = [&](size_t a, size_t b) {
        double ma = std::abs(values[a]), mb = std::abs(values[b]);
        if (ma != mb) return ma > mb;
        return a < b;
    };
    std::nth_element(idx.begin(), idx.begin() + std::ptrdiff_t(keep - 1), idx.end(), before);
    for (size_t i = 0; i < keep; ++i) mask[idx[i]] = 1.0;
    return mask;
}

MaskMatrix compute_mask(const ModelParams& params, double sparsity, size_t dense_prefix,
                        int step_tag) {
    require(sparsity > 0.0 && sparsity <= 1.0, "compute_mask: sparsity must be in (0, 1]");
    size_t ext = params.extractor_count();
    require(dense_prefix <= ext, "compute_mask: dense prefix exceeds extractor depth");
    MaskMatrix m;
    m.sparsity = sparsity;
    m.dense_prefix = dense_prefix;
    m.step_tag = step_tag;
    m.layers.resize(ext);
    for (size_t l = 0; l < ext; ++l) {
        if (l < dense_prefix || sparsity >= 1.0) continue;  // stays dense
        m.layers[l].dense = false;
        m.layers[l].mask = topk_mask(flatten_layer(params.layers[l]), sparsity);
    }
    return m;
}

ModelParams reparameterized_forward_params(const ModelParams& params, const MaskMatrix& mask) {
    require(mask.layers.size() <= params.layers.size(), "mask covers more layers than the model");
    ModelParams out = params;
    for (size_t l = 0; l < mask.layers.size(); ++l) {
        if (mask.layer_dense(l)) continue;
        const Tensor& m = mask.layers[l].mask;
        require(m.size() == params.layers[l].param_count(), "mask layer shape mismatch");
        DenseLayer& dl = out.layers[l];
        size_t wn = dl.weight.size();
        for (size_t i = 0; i < wn; ++i) dl.weight.data[i] *= m[i];
        for (size_t i = 0; i < dl.bias.size(); ++i) dl.bias.data[i] *= m[wn + i];
    }
    return out;
}

size_t SparseDelta::coord_count() const {
    size_t n = 0;
    for (const auto& t : layers) n += t.size();
    return n;
}

double SparseDelta::recompute_norm() const {
    double acc = 0.0;
    for (const auto& t : layers)
        for (double v : t.data) acc += v * v;
    return std::sqrt(acc);
}

SparseDelta masked_update(const ModelParams& theta_final, const ModelParams& theta_anchor,
                          const MaskMatrix& mask_final) {
    require(theta_final.same_shapes(theta_anchor), "masked_update: shape mismatch");
    SparseDelta delta;
    delta.mask_tag = mask_final.step_tag;
    for (size_t l = 0; l < mask_final.layers.size(); ++l) {
        Tensor a = flatten_layer(theta_final.layers[l]);
        Tensor b = flatten_layer(theta_anchor.layers[l]);
        Tensor d({a.size()});
        for (size_t i = 0; i < a.size(); ++i) d[i] = (a[i] - b[i]) * mask_final.at(l, i);
        delta.layers.push_back(std::move(d));
    }
    delta.norm = delta.recompute_norm();
    return delta;
}

void apply_delta(ModelParams& params, const SparseDelta& delta, double factor) {
    require(delta.layers.size() <= params.layers.size(), "apply_delta: too many layers");
    for (size_t l = 0; l < delta.layers.size(); ++l) {
        require(delta.layers[l].size() == params.layers[l].param_count(),
                "apply_delta: layer size mismatch");
        Tensor flat = flatten_layer(params.layers[l]);
        for (size_t i = 0; i < flat.size(); ++i) flat[i] += factor * delta.layers[l][i];
        unflatten_into(flat, params.layers[l]);
    }
}

// ---------------------------------------------------------------------------
// delta file io (checkpoint layout + bit-packed mask section)

namespace {
constexpr char kDeltaMagic[8] = {'D', 'P', 'F', 'L', 'D', 'L', 'T', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("delta file: truncated reading " + what);
    return v;
}
}  // namespace

void save_sparse_delta(const SparseDelta& delta, const MaskMatrix& mask, const std::string& path) {
    require(mask.layers.size() == delta.layers.size(), "delta/mask layer count mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("delta file: cannot open " + path + " for writing");
    os.write(kDeltaMagic, 8);
    write_pod<uint32_t>(os, 1);
    write_pod<uint32_t>(os, uint32_t(delta.layers.size()));
    write_pod<int32_t>(os, delta.mask_tag);
    write_pod<double>(os, delta.norm);
    write_pod<double>(os, mask.sparsity);
    write_pod<uint64_t>(os, mask.dense_prefix);
    for (size_t l = 0; l < delta.layers.size(); ++l) {
        write_pod<uint64_t>(os, delta.layers[l].size());
        write_pod<uint8_t>(os, mask.layer_dense(l) ? 1 : 0);
    }
    for (const auto& t : delta.layers)
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 std::streamsize(t.size() * sizeof(double)));
    for (size_t l = 0; l < delta.layers.size(); ++l) {
        if (mask.layer_dense(l)) continue;
        const Tensor& m = mask.layers[l].mask;
        std::vector<uint8_t> bits((m.size() + 7) / 8, 0);
        for (size_t i = 0; i < m.size(); ++i)
            if (m[i] != 0.0) bits[i / 8] |= uint8_t(1u << (i % 8));
        os.write(reinterpret_cast<const char*>(bits.data()), std::streamsize(bits.size()));
    }
    if (!os) throw std::runtime_error("delta file: write failed for " + path);
}

std::pair<SparseDelta, MaskMatrix> load_sparse_delta(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("delta file: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kDeltaMagic, 8) != 0)
        throw std::runtime_error("delta file: bad magic at byte 0 in " + path);
    if (read_pod<uint32_t>(is, "version") != 1)
        throw std::runtime_error("delta file: unsupported version");
    auto count = read_pod<uint32_t>(is, "layer count");
    SparseDelta delta;
    MaskMatrix mask;
    delta.mask_tag = read_pod<int32_t>(is, "mask tag");
    mask.step_tag = delta.mask_tag;
    delta.norm = read_pod<double>(is, "norm");
    mask.sparsity = read_pod<double>(is, "sparsity");
    mask.dense_prefix = size_t(read_pod<uint64_t>(is, "dense prefix"));
    std::vector<uint64_t> sizes(count);
    std::vector<uint8_t> dense(count);
    for (uint32_t l = 0; l < count; ++l) {
        sizes[l] = read_pod<uint64_t>(is, "layer size");
        dense[l] = read_pod<uint8_t>(is, "dense flag");
    }
    for (uint32_t l = 0; l < count; ++l) {
        Tensor t({size_t(sizes[l])});
        is.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(t.size() * sizeof(double)));
        if (!is) throw std::runtime_error("delta file: truncated layer data in " + path);
        delta.layers.push_back(std::move(t));
    }
    mask.layers.resize(count);
    for (uint32_t l = 0; l < count; ++l) {
        if (dense[l]) continue;
        mask.layers[l].dense = false;
        std::vector<uint8_t> bits((sizes[l] + 7) / 8);
        is.read(reinterpret_cast<char*>(bits.data()), std::streamsize(bits.size()));
        if (!is) throw std::runtime_error("delta file: truncated mask section in " + path);
        Tensor m({size_t(sizes[l])});
        for (size_t i = 0; i < m.size(); ++i)
            m[i] = (bits[i / 8] >> (i % 8)) & 1u ? 1.0 : 0.0;
        mask.layers[l].mask = std::move(m);
    }
    return {std::move(delta), std::move(mask)};
}

}  // namespace dpfl
