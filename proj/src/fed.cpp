#include "dpfl/fed.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dpfl {

void TrainConfig::validate() const {
    require(rounds >= 1, "config: rounds must be >= 1");
    require(local_iters >= 0, "config: local iterations must be >= 0");
    require(classifier_iters >= 0, "config: classifier iterations must be >= 0");
    require(eta_ext > 0.0 && eta_cls > 0.0 && eta_g > 0.0, "config: learning rates must be positive");
    require(batch >= 1, "config: batch size must be >= 1");
    require(clients >= 1, "config: client count must be >= 1");
    require(sample_prob > 0.0 && sample_prob <= 1.0, "config: sample prob must be in (0, 1]");
    require(sparsity > 0.0 && sparsity <= 1.0, "config: sparsity must be in (0, 1]");
    require(masked_layers >= 0, "config: masked layer count must be >= 0");
    require(lambda >= 0.0, "config: lambda must be >= 0");
    require(eval_every >= 1, "config: eval_every must be >= 1");
}

size_t TrainConfig::dense_prefix_for(size_t extractor_layers) const {
    size_t masked = size_t(std::max(masked_layers, 0));
    return extractor_layers > masked ? extractor_layers - masked : 0;
}

BatchSampler::BatchSampler(const std::vector<size_t>& indices, size_t batch, Rng rng)
    : batch_(std::min(batch, indices.size())), rng_(rng), order_(indices) {
    require(!indices.empty(), "batch sampler: empty index set");
    require(batch >= 1, "batch sampler: batch must be >= 1");
    reshuffle();
}

void BatchSampler::reshuffle() {
    shuffle(order_, rng_);
    pos_ = 0;
}

std::vector<size_t> BatchSampler::next() {
    if (pos_ >= order_.size()) reshuffle();
    size_t take = std::min(batch_, order_.size() - pos_);
    std::vector<size_t> out(order_.begin() + std::ptrdiff_t(pos_),
                            order_.begin() + std::ptrdiff_t(pos_ + take));
    pos_ += take;
    return out;
}

FedEngine::FedEngine(TrainConfig config, PrivacyParams privacy, const Dataset& data,
                     const PartitionPlan& plan, ModelSpec model_spec)
    : cfg_(config), privacy_(privacy), data_(data), plan_(plan), spec_(std::move(model_spec)),
      root_(config.master_seed) {
    cfg_.validate();
    privacy_.validate();
    spec_.validate();
    require(size_t(cfg_.clients) == plan_.shards.size(), "engine: plan does not cover all clients");
    require(privacy_.clients == cfg_.clients, "engine: privacy client count differs from config");
    require(privacy_.sample_prob == cfg_.sample_prob, "engine: privacy q differs from config");
    require(data_.feature_dim() == spec_.input_dim(), "engine: data dim does not match model");
}

Batch FedEngine::make_batch(const std::vector<size_t>& indices) const {
    size_t dim = data_.feature_dim();
    Batch b;
    b.inputs = Tensor({indices.size(), dim});
    b.labels.resize(indices.size());
    for (size_t r = 0; r < indices.size(); ++r) {
        const double* src = data_.inputs.data.data() + indices[r] * dim;
        std::copy(src, src + dim, b.inputs.data.data() + r * dim);
        b.labels[r] = data_.labels[indices[r]];
    }
    return b;
}

Cohort FedEngine::sample_cohort(int round) const {
    Rng rng = root_.derive(stream::cohort, uint64_t(round));
    Cohort c;
    c.round = round;
    for (int i = 0; i < cfg_.clients; ++i)
        if (rng.next_double() < cfg_.sample_prob) c.client_ids.push_back(i);
    return c;
}

namespace {

std::vector<DenseLayer> head_of(const ModelParams& p) {
    return {p.layers.begin() + std::ptrdiff_t(p.split_index), p.layers.end()};
}

void plug_head(ModelParams& p, const std::vector<DenseLayer>& head) {
    require(p.split_index + head.size() == p.layers.size(), "head layer count mismatch");
    for (size_t i = 0; i < head.size(); ++i) p.layers[p.split_index + i] = head[i];
}

double accuracy_on(const ModelParams& model, const Dataset& data,
                   const std::vector<size_t>& indices) {
    if (indices.empty()) return 0.0;
    size_t dim = data.feature_dim();
    size_t hits = 0;
    Batch b;
    b.inputs = Tensor({indices.size(), dim});
    b.labels.resize(indices.size());
    for (size_t r = 0; r < indices.size(); ++r) {
        const double* src = data.inputs.data.data() + indices[r] * dim;
        std::copy(src, src + dim, b.inputs.data.data() + r * dim);
        b.labels[r] = data.labels[indices[r]];
    }
    Tensor logits = forward(model, b);
    size_t classes = logits.shape[1];
    for (size_t r = 0; r < indices.size(); ++r) {
        const double* row = logits.data.data() + r * classes;
        size_t arg = size_t(std::max_element(row, row + classes) - row);
        if (int(arg) == b.labels[r]) ++hits;
    }
    return double(hits) / double(indices.size());
}

}  // namespace

std::optional<FedEngine::LocalOutcome> FedEngine::run_local(const ClientState& client,
                                                            std::vector<DenseLayer>& head,
                                                            const ModelParams& global,
                                                            int round) const {
    const auto& shard = *client.shard;
    if (shard.train_indices.empty()) return std::nullopt;  // client-skipped

    ModelParams model = global;
    plug_head(model, head);
    ModelParams anchor = model;  // theta^{t,0}
    size_t ext = model.extractor_count();
    RegularizerConfig reg_off;
    MaskMatrix dense_ext = MaskMatrix::all_dense(ext);
    MaskMatrix upload_mask;

    if (cfg_.algorithm == Algorithm::dp_fedavg_fb) {
        // plain local SGD on the full model, matching the two-phase step budget
        BatchSampler sampler(shard.train_indices, size_t(cfg_.batch),
                             root_.derive(stream::phase2, uint64_t(round), uint64_t(client.id)));
        int iters = cfg_.classifier_iters + cfg_.local_iters;
        for (int it = 0; it < iters; ++it) {
            Batch batch = make_batch(sampler.next());
            ModelParams grads = backward(model, anchor, dense_ext, batch, reg_off, Scope::all);
            model = sgd_step(model, grads, cfg_.eta_ext, Scope::all);
        }
        upload_mask = MaskMatrix::all_dense(model.layers.size());
    } else {
        // Phase 1: classifier fine-tuning against the frozen global extractor
        if (cfg_.classifier_iters > 0) {
            BatchSampler sampler(shard.train_indices, size_t(cfg_.batch),
                                 root_.derive(stream::phase1, uint64_t(round), uint64_t(client.id)));
            for (int it = 0; it < cfg_.classifier_iters; ++it) {
                Batch batch = make_batch(sampler.next());
                ModelParams grads =
                    backward(model, anchor, dense_ext, batch, reg_off, Scope::classifier);
                model = sgd_step(model, grads, cfg_.eta_cls, Scope::classifier);
            }
        }

        // Phase 2: reparameterized extractor training with the norm penalty
        BatchSampler sampler(shard.train_indices, size_t(cfg_.batch),
                             root_.derive(stream::phase2, uint64_t(round), uint64_t(client.id)));
        RegularizerConfig reg{cfg_.lambda, privacy_.clip,
                              cfg_.dan_enabled && cfg_.lambda > 0.0, cfg_.penalty};
        size_t prefix = cfg_.dense_prefix_for(ext);
        for (int s = 0; s < cfg_.local_iters; ++s) {
            Batch batch = make_batch(sampler.next());
            MaskMatrix mask = cfg_.rt_enabled ? compute_mask(model, cfg_.sparsity, prefix, s)
                                              : MaskMatrix::all_dense(ext);
            ModelParams grads = backward(model, anchor, mask, batch, reg, Scope::extractor);
            model = sgd_step(model, grads, cfg_.eta_ext, Scope::extractor);
        }
        upload_mask = cfg_.rt_enabled
                          ? compute_mask(model, cfg_.sparsity, prefix, cfg_.local_iters)
                          : MaskMatrix::all_dense(ext);
        head = head_of(model);  // the personalized head persists locally
    }

    SparseDelta delta = masked_update(model, anchor, upload_mask);
    SparseDelta clipped = clip_update(delta, privacy_.clip);
    Rng noise_rng = root_.derive(stream::noise, uint64_t(round), uint64_t(client.id));
    SparseDelta noisy = add_masked_noise(clipped, privacy_, upload_mask, noise_rng);

    LocalOutcome out;
    out.update.client_id = client.id;
    out.update.round = round;
    out.update.norm_pre_clip = delta.norm;
    out.update.norm_post_clip = clipped.norm;
    out.update.clipped = delta.norm > privacy_.clip;
    out.update.delta = std::move(noisy);
    out.raw = std::move(delta);
    out.clipped = std::move(clipped);
    out.mask = std::move(upload_mask);
    return out;
}

std::optional<ClientUpdate> FedEngine::local_update(ClientState& client, const ModelParams& global,
                                                    int round) const {
    std::vector<DenseLayer> scratch;
    std::vector<DenseLayer>* head = &client.classifier;
    if (cfg_.algorithm == Algorithm::dp_fedavg_fb) {
        scratch = head_of(global);
        head = &scratch;
    }
    auto outcome = run_local(client, *head, global, round);
    if (!outcome) return std::nullopt;
    return std::move(outcome->update);
}

TrainingReport FedEngine::run() {
    Rng init_rng = root_.derive(stream::init);
    ModelParams global = ModelParams::init(spec_, init_rng);

    std::vector<ClientState> clients(size_t(cfg_.clients));
    for (int i = 0; i < cfg_.clients; ++i) {
        clients[size_t(i)].id = i;
        clients[size_t(i)].classifier = head_of(global);
        clients[size_t(i)].shard = &plan_.shards[size_t(i)];
    }

    RdpLedger ledger;
    std::vector<double> round_rdp = per_round_rdp(cfg_.sample_prob, privacy_.sigma, ledger.orders());
    bool fedavg = cfg_.algorithm == Algorithm::dp_fedavg_fb;

    TrainingReport report;
    double last_acc = 0.0;
    for (int t = 1; t <= cfg_.rounds; ++t) {
        Cohort cohort = sample_cohort(t);
        size_t n = cohort.client_ids.size();
        std::vector<std::optional<LocalOutcome>> outcomes(n);

        // clients are independent; results land in per-client slots so the
        // outcome is identical for any schedule or thread count
#pragma omp parallel for schedule(dynamic)
        for (size_t i = 0; i < n; ++i) {
            ClientState& client = clients[size_t(cohort.client_ids[i])];
            if (fedavg) {
                std::vector<DenseLayer> scratch = head_of(global);
                outcomes[i] = run_local(client, scratch, global, t);
            } else {
                outcomes[i] = run_local(client, client.classifier, global, t);
            }
        }

        // aggregate in client-id order
        SparseDelta sum;
        int participants = 0;
        double norm_acc = 0.0;
        int clipped_count = 0;
        for (size_t i = 0; i < n; ++i) {
            if (!outcomes[i]) continue;
            LocalOutcome& oc = *outcomes[i];
            if (audit_) audit_({oc.update, oc.raw, oc.clipped, oc.mask});
            report.uploads_observed++;
            if (participants == 0) {
                sum.layers.assign(oc.update.delta.layers.begin(), oc.update.delta.layers.end());
            } else {
                for (size_t l = 0; l < sum.layers.size(); ++l)
                    for (size_t v = 0; v < sum.layers[l].size(); ++v)
                        sum.layers[l][v] += oc.update.delta.layers[l][v];
            }
            ++participants;
            norm_acc += oc.update.norm_pre_clip;
            clipped_count += oc.update.clipped ? 1 : 0;
        }
        if (participants > 0)
            apply_delta(global, sum, cfg_.eta_g / double(participants));

        // the ledger composes once per round, empty cohorts included
        ledger.compose(round_rdp);
        EpsilonReport eps = epsilon_at_delta(ledger, privacy_.delta);

        RoundMetrics m;
        m.round = t;
        m.cohort_size = participants;
        m.mean_train_loss = population_train_loss(global, clients);
        m.mean_update_norm_pre_clip = participants > 0 ? norm_acc / participants : 0.0;
        m.clip_fraction = participants > 0 ? double(clipped_count) / participants : 0.0;
        m.epsilon_so_far = eps.epsilon;
        if (t % cfg_.eval_every == 0 || t == cfg_.rounds) {
            EvalResult ev = evaluate_with(global, clients, t);
            last_acc = ev.mean;
            if (t == cfg_.rounds) report.final_eval = std::move(ev);
        }
        m.mean_accuracy = last_acc;
        report.rounds.push_back(m);

        PrivacyRoundReport pr;
        pr.round = t;
        pr.sigma = privacy_.sigma;
        pr.clip = privacy_.clip;
        pr.sample_prob = privacy_.sample_prob;
        pr.orders = ledger.orders();
        pr.rdp = ledger.accumulated();
        pr.epsilon = eps.epsilon;
        pr.delta = privacy_.delta;
        pr.best_order = eps.best_order;
        report.privacy.push_back(std::move(pr));

        report.final_epsilon = eps.epsilon;
        report.final_best_order = eps.best_order;
    }
    report.final_params = std::move(global);
    clients_snapshot_ = std::move(clients);
    return report;
}

double FedEngine::population_train_loss(const ModelParams& global,
                                        const std::vector<ClientState>& clients) const {
    bool fedavg = cfg_.algorithm == Algorithm::dp_fedavg_fb;
    std::vector<double> losses(clients.size(), 0.0);
#pragma omp parallel for schedule(dynamic)
    for (size_t i = 0; i < clients.size(); ++i) {
        ModelParams model = global;
        if (!fedavg) plug_head(model, clients[i].classifier);
        Batch b = make_batch(clients[i].shard->train_indices);
        losses[i] = cross_entropy_loss(forward(model, b), b.labels);
    }
    double acc = 0.0;
    for (double l : losses) acc += l;
    return acc / double(clients.size());
}

EvalResult FedEngine::evaluate_with(const ModelParams& global,
                                    const std::vector<ClientState>& clients, int round) const {
    bool fedavg = cfg_.algorithm == Algorithm::dp_fedavg_fb;
    EvalResult res;
    res.per_client.assign(clients.size(), 0.0);
    res.per_client_prefinetune.assign(clients.size(), 0.0);

#pragma omp parallel for schedule(dynamic)
    for (size_t i = 0; i < clients.size(); ++i) {
        const ClientState& client = clients[i];
        require(client.shard && !client.shard->test_indices.empty(),
                "evaluate: client has no test split");
        ModelParams model = global;
        if (!fedavg) plug_head(model, client.classifier);
        res.per_client_prefinetune[i] = accuracy_on(model, data_, client.shard->test_indices);

        // personalized: fine-tune a fresh head copy on the train split
        if (cfg_.classifier_iters > 0 && !client.shard->train_indices.empty()) {
            ModelParams anchor = model;
            MaskMatrix dense_ext = MaskMatrix::all_dense(model.extractor_count());
            RegularizerConfig reg_off;
            BatchSampler sampler(client.shard->train_indices, size_t(cfg_.batch),
                                 root_.derive(stream::eval, uint64_t(round), uint64_t(client.id)));
            for (int it = 0; it < cfg_.classifier_iters; ++it) {
                Batch batch = make_batch(sampler.next());
                ModelParams grads =
                    backward(model, anchor, dense_ext, batch, reg_off, Scope::classifier);
                model = sgd_step(model, grads, cfg_.eta_cls, Scope::classifier);
            }
        }
        res.per_client[i] = accuracy_on(model, data_, client.shard->test_indices);
    }
    for (size_t i = 0; i < clients.size(); ++i) {
        res.mean += res.per_client[i];
        res.mean_prefinetune += res.per_client_prefinetune[i];
    }
    res.mean /= double(clients.size());
    res.mean_prefinetune /= double(clients.size());
    return res;
}

EvalResult FedEngine::evaluate(const ModelParams& global, int round) const {
    require(!clients_snapshot_.empty(), "evaluate: run() has not populated client state");
    return evaluate_with(global, clients_snapshot_, round);
}

TrainingReport run_training(const TrainConfig& config, const PrivacyParams& privacy,
                            const Dataset& data, const PartitionPlan& plan,
                            const ModelSpec& spec) {
    FedEngine engine(config, privacy, data, plan, spec);
    return engine.run();
}

TrainingReport run_baseline_dp_fedavg_fb(TrainConfig config, const PrivacyParams& privacy,
                                         const Dataset& data, const PartitionPlan& plan,
                                         const ModelSpec& spec) {
    config.algorithm = Algorithm::dp_fedavg_fb;
    FedEngine engine(config, privacy, data, plan, spec);
    return engine.run();
}

}  // namespace dpfl
