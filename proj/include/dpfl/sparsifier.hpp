#pragma once

#include <string>
#include <vector>

#include "dpfl/nn.hpp"
#include "dpfl/tensor.hpp"

namespace dpfl {

/// Per-layer binary retention mask over the flat (weight||bias) parameter
/// vector of each extractor dense layer. Layers with index < dense_prefix are
/// exempt from masking and carry a dense flag instead of a materialized mask.
struct MaskLayer {
    bool dense = true;
    Tensor mask;  // entries in {0,1}; empty when dense
};

struct MaskMatrix {
    double sparsity = 1.0;
    size_t dense_prefix = 0;
    int step_tag = 0;  // local step the mask was computed at
    std::vector<MaskLayer> layers;

    static MaskMatrix all_dense(size_t layer_count);
    bool layer_dense(size_t i) const { return layers[i].dense; }
    /// 1.0 or 0.0; dense layers are logically all-ones.
    double at(size_t layer, size_t idx) const {
        return layers[layer].dense ? 1.0 : layers[layer].mask[idx];
    }
    size_t ones_count(size_t layer, size_t layer_param_count) const;
};

/// Flat (weight||bias) view of one dense layer's parameters.
Tensor flatten_layer(const DenseLayer& layer);
void unflatten_into(const Tensor& flat, DenseLayer& layer);

/// Binary mask retaining the ceil(sparsity*n) largest-|value| entries
/// (at least one). Ties broken toward the lower flat index.
Tensor topk_mask(const Tensor& values, double sparsity);

/// Masks for the extractor layers of `params`: layers below dense_prefix are
/// dense, the rest retain their per-layer top-k by magnitude.
MaskMatrix compute_mask(const ModelParams& params, double sparsity, size_t dense_prefix,
                        int step_tag = 0);

/// Extractor layers at/after the dense prefix are multiplied by their mask;
/// everything else (including the classifier head) is returned verbatim.
/// The latent dense params are untouched.
ModelParams reparameterized_forward_params(const ModelParams& params, const MaskMatrix& mask);

/// Masked parameter difference uploaded by a client. Entries at mask-zero
/// positions of masked layers are exactly 0; `norm` caches the L2 norm over
/// all stored coordinates.
struct SparseDelta {
    std::vector<Tensor> layers;  // flat per layer, same layout as flatten_layer
    double norm = 0.0;
    int mask_tag = 0;

    size_t coord_count() const;
    double recompute_norm() const;
};

/// (theta_final - theta_anchor) masked layerwise; dense-prefix layers carry
/// the full difference. Covers the first mask.layers.size() dense layers.
SparseDelta masked_update(const ModelParams& theta_final, const ModelParams& theta_anchor,
                          const MaskMatrix& mask_final);

/// params.layers[i] += factor * delta.layers[i] for the layers the delta covers.
void apply_delta(ModelParams& params, const SparseDelta& delta, double factor);

/// Delta files share the checkpoint layout plus a bit-packed mask section;
/// see docs/formats.md.
void save_sparse_delta(const SparseDelta& delta, const MaskMatrix& mask, const std::string& path);
std::pair<SparseDelta, MaskMatrix> load_sparse_delta(const std::string& path);

}  // namespace dpfl
