#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dpfl/data.hpp"
#include "dpfl/dp.hpp"
#include "dpfl/nn.hpp"
#include "dpfl/sparsifier.hpp"

namespace dpfl {

enum class Algorithm { dp_pfeddsu, dp_fedavg_fb };

/// Domain tags for deriving per-purpose RNG streams from the master seed.
/// Every stochastic choice in a run is keyed by (tag, round, client), so
/// results do not depend on scheduling or thread count.
namespace stream {
inline constexpr uint64_t init = 1;
inline constexpr uint64_t cohort = 2;
inline constexpr uint64_t phase1 = 3;
inline constexpr uint64_t phase2 = 4;
inline constexpr uint64_t noise = 5;
inline constexpr uint64_t eval = 6;
inline constexpr uint64_t data = 7;
inline constexpr uint64_t partition = 8;
}  // namespace stream

/// Without-replacement batches within an epoch, reshuffled per epoch.
class BatchSampler {
  public:
    BatchSampler(const std::vector<size_t>& indices, size_t batch, Rng rng);
    std::vector<size_t> next();

  private:
    void reshuffle();
    size_t batch_;
    Rng rng_;
    std::vector<size_t> order_;
    size_t pos_ = 0;
};

struct TrainConfig {
    int rounds = 50;             // T
    int local_iters = 5;         // tau, extractor phase
    int classifier_iters = 15;   // phase-1 fine-tune steps
    double eta_ext = 0.01;
    double eta_cls = 0.01;
    double eta_g = 1.0;
    int batch = 32;
    int clients = 20;            // N
    double sample_prob = 0.5;    // q
    double sparsity = 0.05;      // S
    int masked_layers = 4;       // trailing extractor layers that get masked
    double lambda = 0.2;
    PenaltyForm penalty = PenaltyForm::squared;
    bool rt_enabled = true;      // reparameterized (top-k masked) training
    bool dan_enabled = true;     // update-norm penalty
    Algorithm algorithm = Algorithm::dp_pfeddsu;
    uint64_t master_seed = 1;
    int eval_every = 1;
    void validate() const;

    /// Leading extractor layers exempt from masking for a model with
    /// `extractor_layers` dense extractor layers.
    size_t dense_prefix_for(size_t extractor_layers) const;
};

struct ClientState {
    int id = 0;
    std::vector<DenseLayer> classifier;  // persistent local head, never uploaded
    const ClientShard* shard = nullptr;
};

struct Cohort {
    int round = 0;
    std::vector<int> client_ids;  // ascending
};

/// Bookkeeping attached to each upload crossing the client->server channel.
struct ClientUpdate {
    int client_id = 0;
    int round = 0;
    double norm_pre_clip = 0.0;
    double norm_post_clip = 0.0;
    bool clipped = false;
    SparseDelta delta;  // clipped + noised
};

/// Test/audit hook observing every upload; invoked in client-id order on the
/// server side of the channel.
struct UploadObservation {
    const ClientUpdate& update;
    const SparseDelta& raw;      // pre-clip
    const SparseDelta& clipped;  // pre-noise
    const MaskMatrix& mask;
};
using UploadAudit = std::function<void(const UploadObservation&)>;

struct RoundMetrics {
    int round = 0;
    double mean_train_loss = 0.0;
    double mean_accuracy = 0.0;
    double epsilon_so_far = 0.0;
    int cohort_size = 0;
    double mean_update_norm_pre_clip = 0.0;
    double clip_fraction = 0.0;
};

struct PrivacyRoundReport {
    int round = 0;
    double sigma = 0.0;
    double clip = 0.0;
    double sample_prob = 0.0;
    std::vector<double> orders;
    std::vector<double> rdp;
    double epsilon = 0.0;
    double delta = 0.0;
    double best_order = 0.0;
};

struct EvalResult {
    std::vector<double> per_client;             // personalized (fine-tuned head)
    std::vector<double> per_client_prefinetune; // stored head, no extra steps
    double mean = 0.0;
    double mean_prefinetune = 0.0;
};

struct TrainingReport {
    std::vector<RoundMetrics> rounds;
    std::vector<PrivacyRoundReport> privacy;
    ModelParams final_params;  // global extractor + global head (head only meaningful for fedavg)
    EvalResult final_eval;
    double final_epsilon = 0.0;
    double final_best_order = 0.0;
    int uploads_observed = 0;  // objects that crossed the client->server channel
};

class FedEngine {
  public:
    FedEngine(TrainConfig config, PrivacyParams privacy, const Dataset& data,
              const PartitionPlan& plan, ModelSpec model_spec);

    /// Runs T rounds of the configured algorithm and a final evaluation.
    TrainingReport run();

    /// Single-client local update against the given global extractor state;
    /// exposed for tests. Returns nothing when the client's shard is empty.
    std::optional<ClientUpdate> local_update(ClientState& client, const ModelParams& global,
                                             int round) const;

    /// Per-client personalized accuracy: fine-tune a fresh copy of each head
    /// on that client's train split, then score the test split.
    EvalResult evaluate(const ModelParams& global, int round) const;

    void set_upload_audit(UploadAudit audit) { audit_ = std::move(audit); }
    const TrainConfig& config() const { return cfg_; }

  private:
    struct LocalOutcome {
        ClientUpdate update;
        SparseDelta raw;
        SparseDelta clipped;
        MaskMatrix mask;
    };
    std::optional<LocalOutcome> run_local(const ClientState& client,
                                          std::vector<DenseLayer>& head,
                                          const ModelParams& global, int round) const;
    EvalResult evaluate_with(const ModelParams& global, const std::vector<ClientState>& clients,
                             int round) const;
    /// Mean cross-entropy over every client's train split under the current
    /// global extractor and that client's stored head.
    double population_train_loss(const ModelParams& global,
                                 const std::vector<ClientState>& clients) const;
    Batch make_batch(const std::vector<size_t>& indices) const;
    Cohort sample_cohort(int round) const;

    TrainConfig cfg_;
    PrivacyParams privacy_;
    const Dataset& data_;
    const PartitionPlan& plan_;
    ModelSpec spec_;
    Rng root_;
    UploadAudit audit_;
    std::vector<ClientState> clients_snapshot_;  // populated by run(), used by evaluate()
};

/// Convenience wrappers mirroring the two supported algorithms.
TrainingReport run_training(const TrainConfig& config, const PrivacyParams& privacy,
                            const Dataset& data, const PartitionPlan& plan,
                            const ModelSpec& spec);
TrainingReport run_baseline_dp_fedavg_fb(TrainConfig config, const PrivacyParams& privacy,
                                         const Dataset& data, const PartitionPlan& plan,
                                         const ModelSpec& spec);

}  // namespace dpfl
