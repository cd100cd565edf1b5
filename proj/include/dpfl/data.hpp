#pragma once

#include <string>
#include <vector>

#include "dpfl/tensor.hpp"

namespace dpfl {

enum class DataProvenance { synthetic, idx_file, cifar_binary };

struct Dataset {
    Tensor inputs;  // {count, feature_dim}
    std::vector<int> labels;
    int num_classes = 0;
    DataProvenance provenance = DataProvenance::synthetic;

    size_t count() const { return labels.size(); }
    size_t feature_dim() const { return inputs.shape.size() == 2 ? inputs.shape[1] : 0; }
    void validate() const;
};

/// Label-skew partition: each client holds samples from exactly
/// min(s, num_classes) distinct classes, dealt as equal contiguous per-class
/// shards, with a stratified train/test split inside each client.
struct ClientShard {
    std::vector<size_t> train_indices;
    std::vector<size_t> test_indices;
    std::vector<int> class_support;
};

struct PartitionPlan {
    int clients = 0;
    int classes_per_client = 0;
    double train_fraction = 0.8;
    std::vector<ClientShard> shards;
};

PartitionPlan partition_by_classes(const Dataset& data, int clients, int classes_per_client,
                                   Rng& rng, double train_fraction = 0.8);

/// Gaussian blobs: one mean per class drawn uniformly on the sphere of radius
/// `separation`, unit covariance, balanced labels, class-blocked order.
Dataset synth_classification(int num_classes, int per_class, int feature_dim, double separation,
                             Rng& rng);

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// IDX image/label pair (gzip or plain), pixels scaled to [0,1].
Dataset load_idx_gzip(const std::string& images_path, const std::string& labels_path);

enum class CifarVariant { cifar10, cifar100_coarse, cifar100_fine };

/// CIFAR binary batches: 1 label byte (CIFAR-10) or 2 label bytes (CIFAR-100,
/// coarse then fine) followed by 3072 pixel bytes per record.
Dataset load_cifar_binary(const std::string& path, CifarVariant variant);

/// Fixture writers; loading what they write reproduces the bytes exactly.
void write_idx_gzip(const Dataset& data, const std::string& images_path,
                    const std::string& labels_path, size_t rows, size_t cols);
void write_cifar_binary(const Dataset& data, const std::string& path, CifarVariant variant);

}  // namespace dpfl
