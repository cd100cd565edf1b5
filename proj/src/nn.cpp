#include "dpfl/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "dpfl/kernels.hpp"
#include "dpfl/sparsifier.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint files are little-endian; big-endian hosts are unsupported");

namespace dpfl {

ModelSpec ModelSpec::mlp(size_t input_dim, const std::vector<size_t>& hidden, size_t classes) {
    require(input_dim > 0 && classes > 0 && !hidden.empty(), "mlp: dims must be positive");
    ModelSpec spec;
    size_t prev = input_dim;
    for (size_t h : hidden) {
        spec.layers.push_back({LayerKind::dense, prev, h, LayerRole::extractor});
        spec.layers.push_back({LayerKind::activation, h, h, LayerRole::extractor});
        prev = h;
    }
    spec.layers.push_back({LayerKind::dense, prev, classes, LayerRole::classifier});
    spec.validate();
    return spec;
}

void ModelSpec::validate() const {
    require(!layers.empty(), "model spec has no layers");
    bool seen_classifier = false;
    bool seen_extractor_dense = false;
    size_t prev_out = layers.front().in_dim;
    for (const auto& l : layers) {
        require(l.in_dim == prev_out, "layer dims do not chain");
        if (l.kind == LayerKind::activation)
            require(l.in_dim == l.out_dim, "activation must preserve dim");
        if (l.role == LayerRole::classifier) {
            require(l.kind == LayerKind::dense, "classifier layers must be dense");
            seen_classifier = true;
        } else {
            require(!seen_classifier, "extractor layer after classifier layer");
            if (l.kind == LayerKind::dense) seen_extractor_dense = true;
        }
        prev_out = l.out_dim;
    }
    require(seen_extractor_dense, "model needs at least one extractor dense layer");
    require(layers.back().role == LayerRole::classifier, "trailing layer must be the classifier");
}

size_t ModelSpec::dense_count() const {
    size_t n = 0;
    for (const auto& l : layers)
        if (l.kind == LayerKind::dense) ++n;
    return n;
}

size_t ModelSpec::extractor_dense_count() const {
    size_t n = 0;
    for (const auto& l : layers)
        if (l.kind == LayerKind::dense && l.role == LayerRole::extractor) ++n;
    return n;
}

std::vector<bool> ModelSpec::tanh_after() const {
    std::vector<bool> flags;
    for (size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].kind != LayerKind::dense) continue;
        flags.push_back(i + 1 < layers.size() && layers[i + 1].kind == LayerKind::activation);
    }
    return flags;
}

ModelParams ModelParams::init(const ModelSpec& spec, Rng& rng) {
    spec.validate();
    ModelParams p;
    p.spec = spec;
    for (const auto& l : spec.layers) {
        if (l.kind != LayerKind::dense) continue;
        double std = std::sqrt(2.0 / double(l.in_dim + l.out_dim));
        DenseLayer dl;
        dl.weight = gaussian_sample(rng, {l.out_dim, l.in_dim}, std);
        dl.bias = Tensor({l.out_dim});
        p.layers.push_back(std::move(dl));
    }
    p.split_index = spec.extractor_dense_count();
    return p;
}

ModelParams ModelParams::zeros_like(const ModelParams& other) {
    ModelParams p;
    p.spec = other.spec;
    p.split_index = other.split_index;
    p.layers.reserve(other.layers.size());
    for (const auto& l : other.layers) {
        DenseLayer z;
        z.weight = Tensor(l.weight.shape);
        z.bias = Tensor(l.bias.shape);
        p.layers.push_back(std::move(z));
    }
    return p;
}

bool ModelParams::same_shapes(const ModelParams& other) const {
    if (layers.size() != other.layers.size() || split_index != other.split_index) return false;
    for (size_t i = 0; i < layers.size(); ++i)
        if (!layers[i].weight.same_shape(other.layers[i].weight) ||
            !layers[i].bias.same_shape(other.layers[i].bias))
            return false;
    return true;
}

namespace {

struct Trace {
    std::vector<Tensor> inputs;   // input of each dense layer, {B, in}
    std::vector<Tensor> outputs;  // post-activation output of each dense layer
};

Tensor dense_apply(const DenseLayer& l, const Tensor& x) {
    size_t batch = x.shape[0];
    size_t in = l.weight.shape[1];
    size_t out = l.weight.shape[0];
    Tensor z({batch, out});
    kernels::matmul_nt(x.data.data(), l.weight.data.data(), z.data.data(), batch, in, out);
    for (size_t b = 0; b < batch; ++b)
        for (size_t j = 0; j < out; ++j) z.data[b * out + j] += l.bias.data[j];
    return z;
}

Tensor forward_impl(const ModelParams& p, const Batch& batch, Trace* trace) {
    require(batch.inputs.shape.size() == 2 && batch.inputs.shape[1] == p.spec.input_dim(),
            "forward: batch input dim does not match model");
    require(batch.inputs.shape[0] >= 1, "forward: empty batch");
    auto tanh_flags = p.spec.tanh_after();
    Tensor x = batch.inputs;
    for (size_t l = 0; l < p.layers.size(); ++l) {
        if (trace) trace->inputs.push_back(x);
        Tensor z = dense_apply(p.layers[l], x);
        if (tanh_flags[l])
            for (double& v : z.data) v = std::tanh(v);
        if (trace) trace->outputs.push_back(z);
        x = std::move(z);
    }
    return x;
}

/// dlogits of the mean cross-entropy: (softmax - onehot) / B.
Tensor softmax_grad(const Tensor& logits, const std::vector<int>& labels) {
    size_t batch = logits.shape[0];
    size_t classes = logits.shape[1];
    Tensor g({batch, classes});
    for (size_t b = 0; b < batch; ++b) {
        const double* row = logits.data.data() + b * classes;
        double mx = *std::max_element(row, row + classes);
        double denom = 0.0;
        for (size_t c = 0; c < classes; ++c) denom += std::exp(row[c] - mx);
        for (size_t c = 0; c < classes; ++c)
            g.data[b * classes + c] = std::exp(row[c] - mx) / denom / double(batch);
        g.data[b * classes + size_t(labels[b])] -= 1.0 / double(batch);
    }
    return g;
}

double penalty_value(double drift, const RegularizerConfig& reg) {
    double r = drift - reg.clip_ref;
    if (reg.form == PenaltyForm::squared) return 0.5 * reg.lambda * r * r;
    return 0.5 * reg.lambda * std::abs(r);
}

/// d(penalty)/d(drift); the subgradient at kinks is taken as 0.
double penalty_slope(double drift, const RegularizerConfig& reg) {
    double r = drift - reg.clip_ref;
    if (reg.form == PenaltyForm::squared) return reg.lambda * r;
    if (r == 0.0) return 0.0;
    return 0.5 * reg.lambda * (r > 0 ? 1.0 : -1.0);
}

bool in_scope(size_t layer, size_t split, Scope scope) {
    if (scope == Scope::all) return true;
    if (scope == Scope::extractor) return layer < split;
    return layer >= split;
}

}  // namespace

Tensor forward(const ModelParams& params, const Batch& batch) {
    return forward_impl(params, batch, nullptr);
}

double cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels) {
    require(logits.shape.size() == 2, "cross_entropy: logits must be 2-d");
    size_t batch = logits.shape[0];
    size_t classes = logits.shape[1];
    require(batch == labels.size(), "cross_entropy: label count mismatch");
    double total = 0.0;
    for (size_t b = 0; b < batch; ++b) {
        int y = labels[b];
        require(y >= 0 && size_t(y) < classes, "cross_entropy: label out of range");
        const double* row = logits.data.data() + b * classes;
        double mx = *std::max_element(row, row + classes);
        double denom = 0.0;
        for (size_t c = 0; c < classes; ++c) denom += std::exp(row[c] - mx);
        total += std::log(denom) - (row[size_t(y)] - mx);
    }
    return total / double(batch);
}

double masked_drift_norm(const ModelParams& params, const ModelParams& anchor,
                         const MaskMatrix& mask) {
    require(params.same_shapes(anchor), "drift norm: anchor shapes differ");
    double acc = 0.0;
    for (size_t l = 0; l < mask.layers.size(); ++l) {
        Tensor a = flatten_layer(params.layers[l]);
        Tensor b = flatten_layer(anchor.layers[l]);
        for (size_t i = 0; i < a.size(); ++i) {
            double d = (a[i] - b[i]) * mask.at(l, i);
            acc += d * d;
        }
    }
    return std::sqrt(acc);
}

double composite_loss(const ModelParams& params, const ModelParams& anchor,
                      const MaskMatrix& mask, const Batch& batch,
                      const RegularizerConfig& reg) {
    ModelParams fwd = reparameterized_forward_params(params, mask);
    double data_loss = cross_entropy_loss(forward(fwd, batch), batch.labels);
    if (!reg.enabled || reg.lambda == 0.0) return data_loss;
    return data_loss + penalty_value(masked_drift_norm(params, anchor, mask), reg);
}

ModelParams backward(const ModelParams& params, const ModelParams& anchor,
                     const MaskMatrix& mask, const Batch& batch,
                     const RegularizerConfig& reg, Scope train_scope) {
    ModelParams fwd = reparameterized_forward_params(params, mask);
    Trace trace;
    Tensor logits = forward_impl(fwd, batch, &trace);
    for (int y : batch.labels)
        require(y >= 0 && size_t(y) < params.spec.num_classes(), "backward: label out of range");

    ModelParams grads = ModelParams::zeros_like(params);
    auto tanh_flags = params.spec.tanh_after();
    size_t batch_n = batch.size();
    size_t lowest = train_scope == Scope::classifier ? params.split_index : 0;

    Tensor dz = softmax_grad(logits, batch.labels);  // gradient w.r.t. pre-head logits
    for (size_t li = params.layers.size(); li-- > 0;) {
        const DenseLayer& eff = fwd.layers[li];  // effective (possibly masked) params
        size_t out = eff.weight.shape[0];
        size_t in = eff.weight.shape[1];
        if (in_scope(li, params.split_index, train_scope)) {
            DenseLayer& g = grads.layers[li];
            kernels::matmul_tn(dz.data.data(), trace.inputs[li].data.data(),
                               g.weight.data.data(), out, batch_n, in);
            for (size_t b = 0; b < batch_n; ++b)
                for (size_t j = 0; j < out; ++j) g.bias.data[j] += dz.data[b * out + j];
            // chain through the reparameterization: latent grad is masked
            if (li < mask.layers.size() && !mask.layer_dense(li)) {
                const Tensor& m = mask.layers[li].mask;
                size_t wn = g.weight.size();
                for (size_t i = 0; i < wn; ++i) g.weight.data[i] *= m[i];
                for (size_t i = 0; i < g.bias.size(); ++i) g.bias.data[i] *= m[wn + i];
            }
        }
        if (li == lowest) break;
        // propagate to the layer below, through its tanh if present
        Tensor dx({batch_n, in});
        kernels::matmul(dz.data.data(), eff.weight.data.data(), dx.data.data(), batch_n, out, in);
        if (tanh_flags[li - 1]) {
            const Tensor& y = trace.outputs[li - 1];
            for (size_t i = 0; i < dx.size(); ++i) dx.data[i] *= 1.0 - y.data[i] * y.data[i];
        }
        dz = std::move(dx);
    }

    if (reg.enabled && reg.lambda != 0.0 && train_scope != Scope::classifier) {
        double drift = masked_drift_norm(params, anchor, mask);
        if (drift > 0.0) {
            double coef = penalty_slope(drift, reg) / drift;
            for (size_t l = 0; l < mask.layers.size(); ++l) {
                Tensor a = flatten_layer(params.layers[l]);
                Tensor b = flatten_layer(anchor.layers[l]);
                Tensor gf = flatten_layer(grads.layers[l]);
                for (size_t i = 0; i < a.size(); ++i)
                    gf[i] += coef * (a[i] - b[i]) * mask.at(l, i);
                unflatten_into(gf, grads.layers[l]);
            }
        }
    }
    return grads;
}

ModelParams sgd_step(const ModelParams& params, const ModelParams& grads, double lr, Scope scope) {
    require(lr > 0.0, "sgd_step: lr must be positive");
    require(params.same_shapes(grads), "sgd_step: gradient shapes differ");
    ModelParams out = params;
    for (size_t l = 0; l < out.layers.size(); ++l) {
        if (!in_scope(l, out.split_index, scope)) continue;
        kernels::axpy_inplace(out.layers[l].weight.size(), -lr, grads.layers[l].weight.data.data(),
                              out.layers[l].weight.data.data());
        kernels::axpy_inplace(out.layers[l].bias.size(), -lr, grads.layers[l].bias.data.data(),
                              out.layers[l].bias.data.data());
    }
    return out;
}

// ---------------------------------------------------------------------------
// checkpoint io

namespace {

constexpr char kModelMagic[8] = {'D', 'P', 'F', 'L', 'M', 'D', 'L', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated reading " + what);
    return v;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write(kModelMagic, 8);
    write_pod<uint32_t>(os, 1);  // version
    write_pod<uint32_t>(os, uint32_t(params.layers.size()));
    write_pod<uint32_t>(os, uint32_t(params.split_index));
    auto tanh_flags = params.spec.tanh_after();
    for (size_t l = 0; l < params.layers.size(); ++l) {
        write_pod<uint32_t>(os, uint32_t(params.layers[l].weight.shape[1]));
        write_pod<uint32_t>(os, uint32_t(params.layers[l].weight.shape[0]));
        write_pod<uint8_t>(os, tanh_flags[l] ? 1 : 0);
    }
    for (const auto& l : params.layers) {
        os.write(reinterpret_cast<const char*>(l.weight.data.data()),
                 std::streamsize(l.weight.size() * sizeof(double)));
        os.write(reinterpret_cast<const char*>(l.bias.data.data()),
                 std::streamsize(l.bias.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

ModelParams load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kModelMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic at byte 0 in " + path);
    auto version = read_pod<uint32_t>(is, "version");
    if (version != 1) throw std::runtime_error("checkpoint: unsupported version");
    auto count = read_pod<uint32_t>(is, "layer count");
    auto split = read_pod<uint32_t>(is, "split index");
    if (split > count) throw std::runtime_error("checkpoint: split index exceeds layer count");

    struct Dim {
        uint32_t in, out;
        bool tanh;
    };
    std::vector<Dim> dims;
    for (uint32_t l = 0; l < count; ++l) {
        Dim d{};
        d.in = read_pod<uint32_t>(is, "layer in dim");
        d.out = read_pod<uint32_t>(is, "layer out dim");
        d.tanh = read_pod<uint8_t>(is, "activation flag") != 0;
        dims.push_back(d);
    }
    ModelParams p;
    p.split_index = split;
    for (uint32_t l = 0; l < count; ++l) {
        LayerRole role = l < split ? LayerRole::extractor : LayerRole::classifier;
        p.spec.layers.push_back({LayerKind::dense, dims[l].in, dims[l].out, role});
        if (dims[l].tanh)
            p.spec.layers.push_back({LayerKind::activation, dims[l].out, dims[l].out, role});
        DenseLayer dl;
        dl.weight = Tensor({dims[l].out, dims[l].in});
        dl.bias = Tensor({dims[l].out});
        p.layers.push_back(std::move(dl));
    }
    for (auto& l : p.layers) {
        is.read(reinterpret_cast<char*>(l.weight.data.data()),
                std::streamsize(l.weight.size() * sizeof(double)));
        is.read(reinterpret_cast<char*>(l.bias.data.data()),
                std::streamsize(l.bias.size() * sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint: truncated layer data in " + path);
    }
    p.spec.validate();
    return p;
}

}  // namespace dpfl
