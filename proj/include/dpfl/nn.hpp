#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpfl/tensor.hpp"

namespace dpfl {

struct MaskMatrix;  // defined in sparsifier.hpp

enum class LayerKind { dense, activation };
enum class LayerRole { extractor, classifier };
enum class Scope { extractor, classifier, all };
enum class PenaltyForm { squared, abs };

struct LayerSpec {
    LayerKind kind;
    size_t in_dim;
    size_t out_dim;  // == in_dim for activations
    LayerRole role;
};

/// Layered classifier f = head(features(x)): a chain of dense layers and tanh
/// activations where the trailing dense layer(s) form the classifier head and
/// everything before them is the feature extractor.
struct ModelSpec {
    std::vector<LayerSpec> layers;

    /// in -> hidden[0] -> ... -> hidden.back() with tanh after each hidden
    /// dense layer, plus a linear classifier head hidden.back() -> classes.
    static ModelSpec mlp(size_t input_dim, const std::vector<size_t>& hidden, size_t classes);

    void validate() const;
    size_t input_dim() const { return layers.front().in_dim; }
    size_t num_classes() const { return layers.back().out_dim; }
    size_t dense_count() const;
    size_t extractor_dense_count() const;
    /// Dense layer index -> does a tanh follow it?
    std::vector<bool> tanh_after() const;
};

struct DenseLayer {
    Tensor weight;  // shape {out, in}, row-major
    Tensor bias;    // shape {out}
    size_t param_count() const { return weight.size() + bias.size(); }
};

/// Parameter store for a ModelSpec. Dense layers with index < split_index are
/// the extractor part; layers at/after split_index are the classifier head.
struct ModelParams {
    ModelSpec spec;
    std::vector<DenseLayer> layers;
    size_t split_index = 0;

    static ModelParams init(const ModelSpec& spec, Rng& rng);
    static ModelParams zeros_like(const ModelParams& other);
    size_t extractor_count() const { return split_index; }
    bool same_shapes(const ModelParams& other) const;
};

struct Batch {
    Tensor inputs;  // {B, input_dim}
    std::vector<int> labels;
    size_t size() const { return labels.size(); }
};

/// Config for the update-norm penalty added to the data loss: with d the
/// masked extractor drift from the anchor, the penalty steers ||d|| toward
/// the clipping threshold clip_ref.
struct RegularizerConfig {
    double lambda = 0.0;
    double clip_ref = 0.01;
    bool enabled = false;
    PenaltyForm form = PenaltyForm::squared;
};

/// Plain dense forward pass; returns logits {B, classes}.
Tensor forward(const ModelParams& params, const Batch& batch);

/// Mean softmax cross-entropy over the batch.
double cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels);

/// ||(theta_ext - anchor_ext) masked||_2 over all extractor layers jointly.
double masked_drift_norm(const ModelParams& params, const ModelParams& anchor,
                         const MaskMatrix& mask);

/// Cross-entropy through the mask-reparameterized forward parameters, plus
/// (lambda/2)(||d||-C)^2 (or the |.| form) on the masked extractor drift d.
/// With reg disabled this is exactly the cross-entropy of the masked forward.
double composite_loss(const ModelParams& params, const ModelParams& anchor,
                      const MaskMatrix& mask, const Batch& batch,
                      const RegularizerConfig& reg);

/// Gradient of composite_loss w.r.t. the latent dense parameters of the
/// selected scope; the other scope's gradients are exactly zero. Mask-zero
/// coordinates of masked layers receive zero data-gradient.
ModelParams backward(const ModelParams& params, const ModelParams& anchor,
                     const MaskMatrix& mask, const Batch& batch,
                     const RegularizerConfig& reg, Scope train_scope);

/// params_scope - lr * grads_scope; the other scope is returned untouched.
ModelParams sgd_step(const ModelParams& params, const ModelParams& grads, double lr, Scope scope);

/// Checkpoint format: see docs/formats.md (little-endian binary).
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace dpfl
