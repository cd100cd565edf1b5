#include "dpfl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <zlib.h>

namespace dpfl {

void Dataset::validate() const {
    require(num_classes >= 1, "dataset: needs at least one class");
    require(inputs.shape.size() == 2 && inputs.shape[0] == count(),
            "dataset: inputs/labels count mismatch");
    require(count() >= size_t(num_classes), "dataset: fewer samples than classes");
    for (int y : labels)
        require(y >= 0 && y < num_classes, "dataset: label out of range");
    require(inputs.all_finite(), "dataset: non-finite inputs");
}

Dataset synth_classification(int num_classes, int per_class, int feature_dim, double separation,
                             Rng& rng) {
    require(num_classes >= 1 && per_class >= 1 && feature_dim >= 1,
            "synth: counts must be positive");
    require(separation >= 0.0, "synth: separation must be non-negative");
    Dataset d;
    d.num_classes = num_classes;
    d.provenance = DataProvenance::synthetic;

    std::vector<std::vector<double>> means(static_cast<size_t>(num_classes));
    for (auto& m : means) {
        m.resize(size_t(feature_dim));
        double norm = 0.0;
        for (double& v : m) {
            v = rng.next_gaussian();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (double& v : m) v = norm > 0.0 ? separation * v / norm : 0.0;
    }
    size_t count = size_t(num_classes) * size_t(per_class);
    d.inputs = Tensor({count, size_t(feature_dim)});
    d.labels.resize(count);
    size_t row = 0;
    for (int c = 0; c < num_classes; ++c) {
        for (int i = 0; i < per_class; ++i, ++row) {
            d.labels[row] = c;
            double* out = d.inputs.data.data() + row * size_t(feature_dim);
            for (int f = 0; f < feature_dim; ++f)
                out[f] = means[size_t(c)][size_t(f)] + rng.next_gaussian();
        }
    }
    return d;
}

PartitionPlan partition_by_classes(const Dataset& data, int clients, int classes_per_client,
                                   Rng& rng, double train_fraction) {
    data.validate();
    require(clients >= 1, "partition: client count must be positive");
    require(classes_per_client >= 1, "partition: classes per client must be positive");
    require(train_fraction > 0.0 && train_fraction < 1.0, "partition: split must be in (0, 1)");
    int k = data.num_classes;
    int s = std::min(classes_per_client, k);

    // class slot counts: N*s slots spread as evenly as possible over classes
    int64_t total_slots = int64_t(clients) * s;
    std::vector<int> slots(size_t(k), int(total_slots / k));
    for (int c = 0; c < int(total_slots % k); ++c) slots[size_t(c)]++;
    for (int c = 0; c < k; ++c) {
        if (slots[size_t(c)] > clients) {
            std::ostringstream msg;
            msg << "partition: infeasible (N=" << clients << ", s=" << s << ", classes=" << k
                << "): class " << c << " would need " << slots[size_t(c)]
                << " shards but appears at most once per client";
            throw std::invalid_argument(msg.str());
        }
    }

    std::vector<std::vector<size_t>> class_indices(static_cast<size_t>(k));
    for (size_t i = 0; i < data.count(); ++i) class_indices[size_t(data.labels[i])].push_back(i);
    std::vector<size_t> shard_size(size_t(k), 0);
    for (int c = 0; c < k; ++c) {
        if (slots[size_t(c)] == 0) continue;
        shard_size[size_t(c)] = class_indices[size_t(c)].size() / size_t(slots[size_t(c)]);
        if (shard_size[size_t(c)] < 2) {
            std::ostringstream msg;
            msg << "partition: class " << c << " has " << class_indices[size_t(c)].size()
                << " samples for " << slots[size_t(c)]
                << " shards; each shard needs at least 2 samples to split train/test";
            throw std::invalid_argument(msg.str());
        }
    }

    // greedy dealer: each client takes s distinct classes, always drawing from
    // the classes with the most remaining slots (rng breaks ties), which keeps
    // the deal feasible to the last client
    std::vector<int> remaining = slots;
    std::vector<int> next_shard(size_t(k), 0);
    PartitionPlan plan;
    plan.clients = clients;
    plan.classes_per_client = s;
    plan.train_fraction = train_fraction;
    plan.shards.resize(size_t(clients));
    for (int i = 0; i < clients; ++i) {
        std::vector<bool> taken(size_t(k), false);
        ClientShard& shard = plan.shards[size_t(i)];
        for (int j = 0; j < s; ++j) {
            int best = -1;
            std::vector<int> ties;
            for (int c = 0; c < k; ++c) {
                if (taken[size_t(c)] || remaining[size_t(c)] == 0) continue;
                if (best < 0 || remaining[size_t(c)] > remaining[size_t(best)]) {
                    best = c;
                    ties.assign(1, c);
                } else if (remaining[size_t(c)] == remaining[size_t(best)]) {
                    ties.push_back(c);
                }
            }
            require(best >= 0, "partition: dealer ran out of classes");
            int pick = ties[rng.next_below(ties.size())];
            taken[size_t(pick)] = true;
            remaining[size_t(pick)]--;
            shard.class_support.push_back(pick);

            // contiguous shard next_shard[pick] of this class; the tail
            // beyond slots*shard_size is dropped deterministically
            size_t sz = shard_size[size_t(pick)];
            size_t begin = size_t(next_shard[size_t(pick)]) * sz;
            next_shard[size_t(pick)]++;
            size_t n_train = size_t(std::lround(train_fraction * double(sz)));
            n_train = std::clamp<size_t>(n_train, 1, sz - 1);
            const auto& idx = class_indices[size_t(pick)];
            for (size_t r = 0; r < sz; ++r)
                (r < n_train ? shard.train_indices : shard.test_indices).push_back(idx[begin + r]);
        }
        std::sort(shard.class_support.begin(), shard.class_support.end());
    }
    return plan;
}

// ---------------------------------------------------------------------------
// IDX (gzip) loader

namespace {

std::vector<uint8_t> gz_read_all(const std::string& path) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw FormatError("cannot open " + path);
    std::vector<uint8_t> out;
    uint8_t buf[1 << 16];
    int n;
    while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
    bool ok = n == 0;
    gzclose(f);
    if (!ok) throw FormatError("decompression error reading " + path);
    return out;
}

uint32_t be32(const std::vector<uint8_t>& buf, size_t offset, const std::string& path) {
    if (offset + 4 > buf.size()) {
        std::ostringstream msg;
        msg << path << ": truncated header at byte " << offset;
        throw FormatError(msg.str());
    }
    return (uint32_t(buf[offset]) << 24) | (uint32_t(buf[offset + 1]) << 16) |
           (uint32_t(buf[offset + 2]) << 8) | uint32_t(buf[offset + 3]);
}

constexpr uint32_t kIdxImagesMagic = 0x00000803;
constexpr uint32_t kIdxLabelsMagic = 0x00000801;

}  // namespace

Dataset load_idx_gzip(const std::string& images_path, const std::string& labels_path) {
    auto img = gz_read_all(images_path);
    if (be32(img, 0, images_path) != kIdxImagesMagic) {
        std::ostringstream msg;
        msg << images_path << ": bad magic at byte 0 (expected 0x00000803, got 0x" << std::hex
            << be32(img, 0, images_path) << ")";
        throw FormatError(msg.str());
    }
    size_t count = be32(img, 4, images_path);
    size_t rows = be32(img, 8, images_path);
    size_t cols = be32(img, 12, images_path);
    size_t dim = rows * cols;
    if (img.size() != 16 + count * dim) {
        std::ostringstream msg;
        msg << images_path << ": payload truncated at byte " << img.size() << " (expected "
            << 16 + count * dim << " bytes)";
        throw FormatError(msg.str());
    }

    auto lab = gz_read_all(labels_path);
    if (be32(lab, 0, labels_path) != kIdxLabelsMagic) {
        std::ostringstream msg;
        msg << labels_path << ": bad magic at byte 0 (expected 0x00000801)";
        throw FormatError(msg.str());
    }
    size_t lcount = be32(lab, 4, labels_path);
    if (lcount != count) {
        std::ostringstream msg;
        msg << labels_path << ": label count " << lcount << " does not match image count "
            << count;
        throw FormatError(msg.str());
    }
    if (lab.size() != 8 + lcount) {
        std::ostringstream msg;
        msg << labels_path << ": payload truncated at byte " << lab.size();
        throw FormatError(msg.str());
    }

    Dataset d;
    d.provenance = DataProvenance::idx_file;
    d.inputs = Tensor({count, dim});
    d.labels.resize(count);
    int max_label = 0;
    for (size_t i = 0; i < count; ++i) {
        d.labels[i] = lab[8 + i];
        max_label = std::max(max_label, d.labels[i]);
    }
    d.num_classes = max_label + 1;
    for (size_t i = 0; i < count * dim; ++i) d.inputs.data[i] = double(img[16 + i]) / 255.0;
    return d;
}

void write_idx_gzip(const Dataset& data, const std::string& images_path,
                    const std::string& labels_path, size_t rows, size_t cols) {
    require(rows * cols == data.feature_dim(), "write_idx: rows*cols must equal feature dim");
    auto put32 = [](std::vector<uint8_t>& buf, uint32_t v) {
        buf.push_back(uint8_t(v >> 24));
        buf.push_back(uint8_t(v >> 16));
        buf.push_back(uint8_t(v >> 8));
        buf.push_back(uint8_t(v));
    };
    std::vector<uint8_t> img;
    put32(img, kIdxImagesMagic);
    put32(img, uint32_t(data.count()));
    put32(img, uint32_t(rows));
    put32(img, uint32_t(cols));
    for (double v : data.inputs.data) img.push_back(uint8_t(std::lround(v * 255.0)));
    std::vector<uint8_t> lab;
    put32(lab, kIdxLabelsMagic);
    put32(lab, uint32_t(data.count()));
    for (int y : data.labels) lab.push_back(uint8_t(y));

    for (auto [path, buf] : {std::pair{&images_path, &img}, std::pair{&labels_path, &lab}}) {
        gzFile f = gzopen(path->c_str(), "wb");
        if (!f) throw FormatError("cannot open " + *path + " for writing");
        int written = gzwrite(f, buf->data(), unsigned(buf->size()));
        gzclose(f);
        if (written != int(buf->size())) throw FormatError("short write to " + *path);
    }
}

// ---------------------------------------------------------------------------
// CIFAR binary loader

namespace {
constexpr size_t kCifarPixels = 3072;

size_t cifar_record_len(CifarVariant v) {
    return v == CifarVariant::cifar10 ? 1 + kCifarPixels : 2 + kCifarPixels;
}

int cifar_classes(CifarVariant v) {
    switch (v) {
        case CifarVariant::cifar10: return 10;
        case CifarVariant::cifar100_coarse: return 20;
        default: return 100;
    }
}

size_t cifar_label_offset(CifarVariant v) {
    return v == CifarVariant::cifar100_fine ? 1 : 0;
}
}  // namespace

Dataset load_cifar_binary(const std::string& path, CifarVariant variant) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw FormatError("cannot open " + path);
    auto file_size = size_t(is.tellg());
    is.seekg(0);
    size_t record = cifar_record_len(variant);
    if (file_size == 0 || file_size % record != 0) {
        std::ostringstream msg;
        msg << path << ": size " << file_size << " is not a multiple of the record length "
            << record;
        throw FormatError(msg.str());
    }
    size_t count = file_size / record;
    std::vector<uint8_t> buf(file_size);
    is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(file_size));
    if (!is) throw FormatError("read error on " + path);

    Dataset d;
    d.provenance = DataProvenance::cifar_binary;
    d.num_classes = cifar_classes(variant);
    d.inputs = Tensor({count, kCifarPixels});
    d.labels.resize(count);
    size_t label_at = cifar_label_offset(variant);
    size_t pixels_at = record - kCifarPixels;
    for (size_t i = 0; i < count; ++i) {
        const uint8_t* rec = buf.data() + i * record;
        int y = rec[label_at];
        if (y >= d.num_classes) {
            std::ostringstream msg;
            msg << path << ": label " << y << " out of range at record " << i;
            throw FormatError(msg.str());
        }
        d.labels[i] = y;
        for (size_t p = 0; p < kCifarPixels; ++p)
            d.inputs.data[i * kCifarPixels + p] = double(rec[pixels_at + p]) / 255.0;
    }
    return d;
}

void write_cifar_binary(const Dataset& data, const std::string& path, CifarVariant variant) {
    require(data.feature_dim() == kCifarPixels, "write_cifar: feature dim must be 3072");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    size_t label_bytes = cifar_record_len(variant) - kCifarPixels;
    for (size_t i = 0; i < data.count(); ++i) {
        // CIFAR-100 fixtures write the same id for coarse and fine bytes
        for (size_t b = 0; b < label_bytes; ++b) os.put(char(uint8_t(data.labels[i])));
        for (size_t p = 0; p < kCifarPixels; ++p)
            os.put(char(uint8_t(
                std::lround(data.inputs.data[i * kCifarPixels + p] * 255.0))));
    }
    if (!os) throw FormatError("write failed for " + path);
}

}  // namespace dpfl
