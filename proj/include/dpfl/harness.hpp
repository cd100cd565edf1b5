#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpfl/fed.hpp"

namespace dpfl::harness {

using json = nlohmann::json;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Fully resolved default configuration at desk scale.
json default_config();

/// Named presets: default, ablation, budget, sparsity, layers, lambda.
json preset(const std::string& name);
std::vector<std::string> preset_names();

/// Merge user keys over the defaults (or the named preset), validate every
/// key, and resolve the seed list. Unknown keys and out-of-range values
/// raise ConfigError naming the key, the value, and the allowed range.
json parse_config(const json& user);
json parse_config_file(const std::string& path);

/// `key=value` override with dot paths into nested objects
/// (e.g. dataset.separation=6). Values parse as JSON, falling back to string.
void apply_override(json& user, const std::string& assignment);

/// FNV-1a over the canonical (sorted-key) dump of a resolved config.
uint64_t config_hash(const json& resolved);
std::string config_hash_hex(const json& resolved);

/// Grid cells: the cartesian product of the sweep axes applied to the base
/// config, with sigma resolved (calibrated from epsilon unless given).
std::vector<json> expand_grid(const json& resolved);

/// Series label for plots: algorithm plus any swept axis values.
std::string cell_label(const json& spec, const json& cell);

struct MetricsRecord {
    json config;  // resolved cell config, sigma included
    std::string hash;
    std::string label;
    std::string status;  // ok | cached | failed
    std::string error;
    std::vector<uint64_t> seeds;
    std::vector<std::vector<RoundMetrics>> per_seed_rounds;
    std::vector<double> final_accuracy;  // per seed
    double accuracy_mean = 0.0;
    double accuracy_std = 0.0;
    double sigma = 0.0;
    double final_epsilon = 0.0;
    double final_best_order = 0.0;
};

struct ExperimentResult {
    json spec;
    std::string out_dir;
    std::vector<MetricsRecord> cells;
    bool all_ok() const;
};

/// Builders shared with tests and the CLI.
Dataset build_dataset(const json& cell, uint64_t seed);
PartitionPlan build_plan(const json& cell, uint64_t seed, const Dataset& data);
TrainConfig build_train_config(const json& cell, uint64_t seed);
PrivacyParams build_privacy(const json& cell);
ModelSpec build_model_spec(const json& cell, const Dataset& data);
TrainingReport run_cell_seed(const json& cell, uint64_t seed);

/// Audit export of a partition plan.
json partition_plan_json(const PartitionPlan& plan);
/// Full training report with the resolved config echoed in.
json training_report_json(const json& cell, uint64_t seed, const TrainingReport& report);

/// Runs every cell x seed, writing one CSV row per round, one JSON summary
/// per cell, per-round privacy JSONL, a final checkpoint per seed, and an
/// experiment-wide plots.csv. Cells whose summary already carries the same
/// config hash are skipped unless force is set; a failing cell is recorded
/// and does not stop the others.
ExperimentResult run_experiment(const json& resolved, const std::string& out_root, bool force);

std::string metrics_csv(const std::vector<RoundMetrics>& rounds);
std::vector<RoundMetrics> parse_metrics_csv(const std::string& text);
void emit_plots_data(const std::vector<MetricsRecord>& records, std::ostream& os);
json summary_json(const MetricsRecord& record);
json privacy_round_json(const PrivacyRoundReport& report);

/// Output root: explicit argument, else $DPFL_OUT, else ./runs.
std::string resolve_out_root(const std::string& cli_value);

}  // namespace dpfl::harness
