#include "dpfl/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

namespace dpfl::harness {

namespace fs = std::filesystem;

json default_config() {
    return json{
        {"name", "default"},
        {"algorithm", "dp_pfeddsu"},
        {"rounds", 50},
        {"local_iters", 5},
        {"classifier_iters", 15},
        {"eta_ext", 0.01},
        {"eta_cls", 0.01},
        {"eta_g", 1.0},
        {"batch", 32},
        {"clients", 20},
        {"sample_prob", 0.5},
        {"sparsity", 0.05},
        {"masked_layers", 4},
        {"lambda", 0.2},
        {"penalty", "squared"},
        {"rt", true},
        {"dan", true},
        {"clip", 0.01},
        {"epsilon", 1.0},
        {"sigma", nullptr},
        {"delta", 1e-5},
        {"classes_per_client", 2},
        {"train_fraction", 0.8},
        {"hidden_dims", json::array({128, 64})},
        {"eval_every", 1},
        {"dataset",
         json{{"type", "synthetic"}, {"classes", 10}, {"per_class", 400}, {"dim", 32},
              {"separation", 4.0}}},
        {"seeds", json::array({1})},
        {"sweep", json::object()},
    };
}

std::vector<std::string> preset_names() {
    return {"default", "ablation", "budget", "sparsity", "layers", "lambda"};
}

json preset(const std::string& name) {
    json p = json::object();
    if (name == "default") {
        // the stock defaults, nothing extra
    } else if (name == "ablation") {
        p["name"] = "ablation";
        p["sweep"] = json{{"components", json::array({"none", "rt", "rt_dan"})}};
    } else if (name == "budget") {
        p["name"] = "budget";
        p["sweep"] = json{{"epsilon", json::array({0.5, 1.0, 2.0})}};
    } else if (name == "sparsity") {
        p["name"] = "sparsity";
        p["sweep"] = json{{"sparsity", json::array({0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 0.9})}};
    } else if (name == "layers") {
        p["name"] = "layers";
        p["hidden_dims"] = json::array({64, 64, 48, 48, 40, 40, 32, 32});
        p["sweep"] = json{{"masked_layers", json::array({1, 2, 3, 4, 5, 6, 7, 8})}};
    } else if (name == "lambda") {
        p["name"] = "lambda";
        p["sweep"] = json{{"lambda", json::array({0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7})}};
    } else {
        throw ConfigError("config: unknown preset '" + name + "'");
    }
    return p;
}

// ---------------------------------------------------------------------------
// validation

namespace {

[[noreturn]] void fail_key(const std::string& key, const json& value, const std::string& allowed) {
    throw ConfigError("config: key '" + key + "' value " + value.dump() + " invalid; allowed: " +
                      allowed);
}

bool is_pos_int(const json& v) { return v.is_number_integer() && v.get<int64_t>() >= 1; }
bool is_nonneg_int(const json& v) { return v.is_number_integer() && v.get<int64_t>() >= 0; }
bool is_pos_num(const json& v) { return v.is_number() && v.get<double>() > 0.0; }
bool is_nonneg_num(const json& v) { return v.is_number() && v.get<double>() >= 0.0; }

void check_unit_interval(const std::string& key, const json& v, bool open_low, bool open_high) {
    if (!v.is_number()) fail_key(key, v, "a number");
    double x = v.get<double>();
    bool ok = (open_low ? x > 0.0 : x >= 0.0) && (open_high ? x < 1.0 : x <= 1.0);
    if (!ok)
        fail_key(key, v, std::string(open_low ? "(" : "[") + "0, 1" + (open_high ? ")" : "]"));
}

void validate_dataset(const json& d) {
    if (!d.is_object() || !d.contains("type")) fail_key("dataset", d, "object with a 'type'");
    std::string type = d["type"].get<std::string>();
    auto known = [&](std::initializer_list<const char*> keys) {
        for (auto& [k, v] : d.items()) {
            if (k == "type") continue;
            bool found = false;
            for (const char* kk : keys) found = found || k == kk;
            if (!found) throw ConfigError("config: unknown dataset key '" + k + "'");
        }
    };
    if (type == "synthetic") {
        known({"classes", "per_class", "dim", "separation"});
        for (const char* k : {"classes", "per_class", "dim"})
            if (d.contains(k) && !is_pos_int(d[k]))
                fail_key(std::string("dataset.") + k, d[k], "integer >= 1");
        if (d.contains("separation") && !is_nonneg_num(d["separation"]))
            fail_key("dataset.separation", d["separation"], "number >= 0");
    } else if (type == "idx") {
        known({"images", "labels"});
        if (!d.contains("images") || !d.contains("labels"))
            throw ConfigError("config: dataset type 'idx' needs 'images' and 'labels' paths");
    } else if (type == "cifar") {
        known({"path", "variant"});
        if (!d.contains("path")) throw ConfigError("config: dataset type 'cifar' needs 'path'");
        std::string variant = d.value("variant", "cifar10");
        if (variant != "cifar10" && variant != "cifar100_coarse" && variant != "cifar100_fine")
            fail_key("dataset.variant", d["variant"], "cifar10 | cifar100_coarse | cifar100_fine");
    } else {
        fail_key("dataset.type", d["type"], "synthetic | idx | cifar");
    }
}

const std::vector<std::string> kSweepAxes = {"epsilon",   "sparsity",          "masked_layers",
                                             "lambda",    "classes_per_client", "components",
                                             "algorithm"};

void validate_sweep(const json& sweep) {
    if (!sweep.is_object()) fail_key("sweep", sweep, "object of axis -> value list");
    for (auto& [axis, values] : sweep.items()) {
        if (std::find(kSweepAxes.begin(), kSweepAxes.end(), axis) == kSweepAxes.end()) {
            std::string axes;
            for (const auto& a : kSweepAxes) axes += a + " ";
            throw ConfigError("config: unknown sweep axis '" + axis + "'; allowed: " + axes);
        }
        if (!values.is_array() || values.empty())
            fail_key("sweep." + axis, values, "non-empty array");
        for (const auto& v : values) {
            if (axis == "components") {
                std::string s = v.get<std::string>();
                if (s != "none" && s != "rt" && s != "rt_dan")
                    fail_key("sweep.components", v, "none | rt | rt_dan");
            } else if (axis == "algorithm") {
                std::string s = v.get<std::string>();
                if (s != "dp_pfeddsu" && s != "dp_fedavg_fb")
                    fail_key("sweep.algorithm", v, "dp_pfeddsu | dp_fedavg_fb");
            } else if (axis == "masked_layers" || axis == "classes_per_client") {
                if (!is_pos_int(v)) fail_key("sweep." + axis, v, "integer >= 1");
            } else if (axis == "epsilon") {
                if (!is_pos_num(v)) fail_key("sweep.epsilon", v, "number > 0");
            } else if (axis == "sparsity") {
                check_unit_interval("sweep.sparsity", v, true, false);
            } else if (axis == "lambda") {
                if (!is_nonneg_num(v)) fail_key("sweep.lambda", v, "number >= 0");
            }
        }
    }
}

void validate_key(const std::string& key, const json& v) {
    if (key == "name") {
        if (!v.is_string() || v.get<std::string>().empty()) fail_key(key, v, "non-empty string");
    } else if (key == "algorithm") {
        if (!v.is_string() ||
            (v.get<std::string>() != "dp_pfeddsu" && v.get<std::string>() != "dp_fedavg_fb"))
            fail_key(key, v, "dp_pfeddsu | dp_fedavg_fb");
    } else if (key == "rounds" || key == "batch" || key == "clients" || key == "eval_every" ||
               key == "classes_per_client") {
        if (!is_pos_int(v)) fail_key(key, v, "integer >= 1");
    } else if (key == "local_iters" || key == "classifier_iters" || key == "masked_layers") {
        if (!is_nonneg_int(v)) fail_key(key, v, "integer >= 0");
    } else if (key == "eta_ext" || key == "eta_cls" || key == "eta_g" || key == "clip" ||
               key == "epsilon") {
        if (!is_pos_num(v)) fail_key(key, v, "number > 0");
    } else if (key == "sample_prob" || key == "sparsity") {
        check_unit_interval(key, v, true, false);
    } else if (key == "lambda") {
        if (!is_nonneg_num(v)) fail_key(key, v, "number >= 0");
    } else if (key == "penalty") {
        if (!v.is_string() || (v.get<std::string>() != "squared" && v.get<std::string>() != "abs"))
            fail_key(key, v, "squared | abs");
    } else if (key == "rt" || key == "dan") {
        if (!v.is_boolean()) fail_key(key, v, "boolean");
    } else if (key == "sigma") {
        if (!v.is_null() && !is_nonneg_num(v)) fail_key(key, v, "null or number >= 0");
    } else if (key == "delta" || key == "train_fraction") {
        check_unit_interval(key, v, true, true);
    } else if (key == "hidden_dims") {
        if (!v.is_array() || v.empty()) fail_key(key, v, "non-empty array of integers >= 1");
        for (const auto& h : v)
            if (!is_pos_int(h)) fail_key(key, v, "non-empty array of integers >= 1");
    } else if (key == "dataset") {
        validate_dataset(v);
    } else if (key == "seeds") {
        if (v.is_number_integer() && v.get<int64_t>() >= 1) return;
        if (v.is_array() && !v.empty()) {
            for (const auto& s : v)
                if (!s.is_number_integer() || s.get<int64_t>() < 0)
                    fail_key(key, v, "positive count or array of seeds");
            return;
        }
        fail_key(key, v, "positive count or array of seeds");
    } else if (key == "sweep") {
        validate_sweep(v);
    } else {
        throw ConfigError("config: unknown key '" + key + "'");
    }
}

}  // namespace

json parse_config(const json& user) {
    if (!user.is_object()) throw ConfigError("config: top level must be an object");
    json resolved = default_config();
    if (user.contains("preset")) {
        if (!user["preset"].is_string()) fail_key("preset", user["preset"], "preset name");
        json p = preset(user["preset"].get<std::string>());
        for (auto& [k, v] : p.items()) resolved[k] = v;
    }
    for (auto& [k, v] : user.items()) {
        if (k == "preset") continue;
        if (k == "dataset" && v.is_object()) {
            // partial dataset objects merge over the inherited one
            json merged = resolved["dataset"];
            if (v.contains("type") && v["type"] != merged["type"]) merged = json{{"type", v["type"]}};
            for (auto& [dk, dv] : v.items()) merged[dk] = dv;
            validate_key(k, merged);
            resolved[k] = merged;
            continue;
        }
        validate_key(k, v);
        resolved[k] = v;
    }
    // fill dataset defaults for the synthetic generator
    if (resolved["dataset"]["type"] == "synthetic") {
        json d = json{{"type", "synthetic"}, {"classes", 10}, {"per_class", 400}, {"dim", 32},
                      {"separation", 4.0}};
        for (auto& [k, v] : resolved["dataset"].items()) d[k] = v;
        resolved["dataset"] = d;
    }
    // expand a seed count into an explicit list
    if (resolved["seeds"].is_number_integer()) {
        int n = resolved["seeds"].get<int>();
        json seeds = json::array();
        for (int i = 1; i <= n; ++i) seeds.push_back(i);
        resolved["seeds"] = seeds;
    }
    if (resolved["sigma"].is_null() && !resolved.contains("epsilon"))
        throw ConfigError("config: either 'epsilon' or 'sigma' must be set");
    return resolved;
}

json parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    json user;
    try {
        is >> user;
    } catch (const json::parse_error& e) {
        throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
    }
    return parse_config(user);
}

void apply_override(json& user, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("config: override must be key=value, got '" + assignment + "'");
    std::string path = assignment.substr(0, eq);
    std::string value_text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(value_text);
    } catch (const json::parse_error&) {
        value = value_text;  // bare strings are fine
    }
    json* node = &user;
    size_t begin = 0;
    while (true) {
        size_t dot = path.find('.', begin);
        std::string key = path.substr(begin, dot == std::string::npos ? dot : dot - begin);
        if (key.empty()) throw ConfigError("config: empty key in override '" + assignment + "'");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = json::object();
        node = &(*node)[key];
        begin = dot + 1;
    }
}

uint64_t config_hash(const json& resolved) {
    std::string dump = resolved.dump();  // keys are sorted by construction
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : dump) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string config_hash_hex(const json& resolved) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)config_hash(resolved));
    return buf;
}

// ---------------------------------------------------------------------------
// grid expansion

namespace {

void apply_axis(json& cell, const std::string& axis, const json& value) {
    if (axis == "components") {
        std::string v = value.get<std::string>();
        cell["rt"] = v != "none";
        cell["dan"] = v == "rt_dan";
    } else {
        cell[axis] = value;
    }
}

}  // namespace

std::vector<json> expand_grid(const json& resolved) {
    json base = resolved;
    json sweep = base.value("sweep", json::object());
    base.erase("sweep");
    std::vector<json> cells{base};
    std::vector<std::string> axes;
    for (auto& [axis, _] : sweep.items()) axes.push_back(axis);
    std::sort(axes.begin(), axes.end());
    for (const auto& axis : axes) {
        std::vector<json> next;
        for (const auto& cell : cells)
            for (const auto& value : sweep[axis]) {
                json c = cell;
                apply_axis(c, axis, value);
                next.push_back(std::move(c));
            }
        cells = std::move(next);
    }
    for (auto& cell : cells) {
        if (cell["sigma"].is_null()) {
            cell["sigma"] = calibrate_sigma(cell["epsilon"].get<double>(),
                                            cell["delta"].get<double>(),
                                            cell["sample_prob"].get<double>(),
                                            cell["rounds"].get<int>());
            cell["sigma_source"] = "calibrated";
        } else {
            cell["sigma_source"] = "explicit";
        }
    }
    return cells;
}

std::string cell_label(const json& spec, const json& cell) {
    std::string label = cell["algorithm"].get<std::string>();
    json sweep = spec.value("sweep", json::object());
    std::string parts;
    for (auto& [axis, _] : sweep.items()) {
        if (axis == "algorithm") continue;  // already the label stem
        std::string v;
        if (axis == "components") {
            bool rt = cell["rt"].get<bool>();
            bool dan = cell["dan"].get<bool>();
            v = !rt ? "none" : (dan ? "rt_dan" : "rt");
        } else {
            v = cell[axis].dump();
        }
        if (!parts.empty()) parts += ",";
        parts += axis + "=" + v;
    }
    if (!parts.empty()) label += "[" + parts + "]";
    return label;
}

// ---------------------------------------------------------------------------
// builders

Dataset build_dataset(const json& cell, uint64_t seed) {
    const json& d = cell["dataset"];
    std::string type = d["type"].get<std::string>();
    if (type == "synthetic") {
        Rng rng = Rng(seed).derive(stream::data);
        return synth_classification(d["classes"].get<int>(), d["per_class"].get<int>(),
                                    d["dim"].get<int>(), d["separation"].get<double>(), rng);
    }
    if (type == "idx")
        return load_idx_gzip(d["images"].get<std::string>(), d["labels"].get<std::string>());
    std::string variant = d.value("variant", "cifar10");
    CifarVariant v = variant == "cifar10" ? CifarVariant::cifar10
                     : variant == "cifar100_coarse" ? CifarVariant::cifar100_coarse
                                                    : CifarVariant::cifar100_fine;
    return load_cifar_binary(d["path"].get<std::string>(), v);
}

TrainConfig build_train_config(const json& cell, uint64_t seed) {
    TrainConfig cfg;
    cfg.rounds = cell["rounds"].get<int>();
    cfg.local_iters = cell["local_iters"].get<int>();
    cfg.classifier_iters = cell["classifier_iters"].get<int>();
    cfg.eta_ext = cell["eta_ext"].get<double>();
    cfg.eta_cls = cell["eta_cls"].get<double>();
    cfg.eta_g = cell["eta_g"].get<double>();
    cfg.batch = cell["batch"].get<int>();
    cfg.clients = cell["clients"].get<int>();
    cfg.sample_prob = cell["sample_prob"].get<double>();
    cfg.sparsity = cell["sparsity"].get<double>();
    cfg.masked_layers = cell["masked_layers"].get<int>();
    cfg.lambda = cell["lambda"].get<double>();
    cfg.penalty = cell["penalty"].get<std::string>() == "abs" ? PenaltyForm::abs
                                                              : PenaltyForm::squared;
    cfg.rt_enabled = cell["rt"].get<bool>();
    cfg.dan_enabled = cell["dan"].get<bool>();
    cfg.algorithm = cell["algorithm"].get<std::string>() == "dp_fedavg_fb"
                        ? Algorithm::dp_fedavg_fb
                        : Algorithm::dp_pfeddsu;
    cfg.master_seed = seed;
    cfg.eval_every = cell["eval_every"].get<int>();
    return cfg;
}

PrivacyParams build_privacy(const json& cell) {
    PrivacyParams p;
    p.clip = cell["clip"].get<double>();
    p.sigma = cell["sigma"].get<double>();
    p.sample_prob = cell["sample_prob"].get<double>();
    p.clients = cell["clients"].get<int>();
    p.delta = cell["delta"].get<double>();
    return p;
}

ModelSpec build_model_spec(const json& cell, const Dataset& data) {
    std::vector<size_t> hidden;
    for (const auto& h : cell["hidden_dims"]) hidden.push_back(h.get<size_t>());
    return ModelSpec::mlp(data.feature_dim(), hidden, size_t(data.num_classes));
}

PartitionPlan build_plan(const json& cell, uint64_t seed, const Dataset& data) {
    Rng prng = Rng(seed).derive(stream::partition);
    return partition_by_classes(data, cell["clients"].get<int>(),
                                cell["classes_per_client"].get<int>(), prng,
                                cell["train_fraction"].get<double>());
}

TrainingReport run_cell_seed(const json& cell, uint64_t seed) {
    Dataset data = build_dataset(cell, seed);
    PartitionPlan plan = build_plan(cell, seed, data);
    TrainConfig cfg = build_train_config(cell, seed);
    PrivacyParams privacy = build_privacy(cell);
    ModelSpec spec = build_model_spec(cell, data);
    return run_training(cfg, privacy, data, plan, spec);
}

json partition_plan_json(const PartitionPlan& plan) {
    json shards = json::array();
    for (size_t i = 0; i < plan.shards.size(); ++i) {
        const auto& s = plan.shards[i];
        shards.push_back(json{{"client", i},
                              {"classes", s.class_support},
                              {"train_indices", s.train_indices},
                              {"test_indices", s.test_indices}});
    }
    return json{{"clients", plan.clients},
                {"classes_per_client", plan.classes_per_client},
                {"train_fraction", plan.train_fraction},
                {"shards", shards}};
}

json training_report_json(const json& cell, uint64_t seed, const TrainingReport& report) {
    json rounds = json::array();
    for (const auto& m : report.rounds)
        rounds.push_back(json{{"round", m.round},
                              {"mean_train_loss", m.mean_train_loss},
                              {"mean_accuracy", m.mean_accuracy},
                              {"epsilon_so_far", m.epsilon_so_far},
                              {"cohort_size", m.cohort_size},
                              {"mean_update_norm_pre_clip", m.mean_update_norm_pre_clip},
                              {"clip_fraction", m.clip_fraction}});
    return json{{"config", cell},
                {"seed", seed},
                {"rounds", rounds},
                {"final",
                 json{{"accuracy_mean", report.final_eval.mean},
                      {"accuracy_prefinetune_mean", report.final_eval.mean_prefinetune},
                      {"per_client_accuracy", report.final_eval.per_client},
                      {"per_client_accuracy_prefinetune", report.final_eval.per_client_prefinetune},
                      {"epsilon", report.final_epsilon},
                      {"best_order", report.final_best_order},
                      {"uploads_observed", report.uploads_observed}}}};
}

// ---------------------------------------------------------------------------
// emission

std::string metrics_csv(const std::vector<RoundMetrics>& rounds) {
    std::string out =
        "round,mean_train_loss,mean_accuracy,epsilon_so_far,cohort_size,"
        "mean_update_norm_pre_clip,clip_fraction\n";
    char line[256];
    for (const auto& m : rounds) {
        std::snprintf(line, sizeof(line), "%d,%.12g,%.12g,%.12g,%d,%.12g,%.12g\n", m.round,
                      m.mean_train_loss, m.mean_accuracy, m.epsilon_so_far, m.cohort_size,
                      m.mean_update_norm_pre_clip, m.clip_fraction);
        out += line;
    }
    return out;
}

std::vector<RoundMetrics> parse_metrics_csv(const std::string& text) {
    std::vector<RoundMetrics> rounds;
    std::istringstream is(text);
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        RoundMetrics m;
        if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%d,%lf,%lf", &m.round, &m.mean_train_loss,
                        &m.mean_accuracy, &m.epsilon_so_far, &m.cohort_size,
                        &m.mean_update_norm_pre_clip, &m.clip_fraction) != 7)
            throw std::runtime_error("metrics csv: malformed line: " + line);
        rounds.push_back(m);
    }
    return rounds;
}

void emit_plots_data(const std::vector<MetricsRecord>& records, std::ostream& os) {
    os << "round,metric,value,algorithm,seed\n";
    char line[256];
    for (const auto& rec : records) {
        if (rec.status == "failed") continue;
        for (size_t s = 0; s < rec.per_seed_rounds.size(); ++s) {
            for (const auto& m : rec.per_seed_rounds[s]) {
                auto put = [&](const char* metric, double value) {
                    std::snprintf(line, sizeof(line), "%d,%s,%.12g,%s,%llu\n", m.round, metric,
                                  value, rec.label.c_str(), (unsigned long long)rec.seeds[s]);
                    os << line;
                };
                put("mean_train_loss", m.mean_train_loss);
                put("mean_accuracy", m.mean_accuracy);
                put("epsilon_so_far", m.epsilon_so_far);
            }
        }
    }
}

json summary_json(const MetricsRecord& record) {
    json s;
    s["config"] = record.config;
    s["config_hash"] = record.hash;
    s["label"] = record.label;
    s["status"] = record.status;
    if (!record.error.empty()) s["error"] = record.error;
    s["seeds"] = record.seeds;
    s["final_accuracy"] = json{{"per_seed", record.final_accuracy},
                               {"mean", record.accuracy_mean},
                               {"std", record.accuracy_std}};
    s["privacy"] = json{{"sigma", record.sigma},
                        {"epsilon", record.final_epsilon},
                        {"best_order", record.final_best_order},
                        {"delta", record.config.value("delta", 0.0)}};
    return s;
}

json privacy_round_json(const PrivacyRoundReport& report) {
    return json{{"round", report.round},   {"sigma", report.sigma},
                {"C", report.clip},        {"q", report.sample_prob},
                {"orders", report.orders}, {"rdp", report.rdp},
                {"epsilon", report.epsilon}, {"delta", report.delta},
                {"best_order", report.best_order}};
}

bool ExperimentResult::all_ok() const {
    for (const auto& c : cells)
        if (c.status == "failed") return false;
    return true;
}

std::string resolve_out_root(const std::string& cli_value) {
    if (!cli_value.empty()) return cli_value;
    if (const char* env = std::getenv("DPFL_OUT"); env && *env) return env;
    return "runs";
}

ExperimentResult run_experiment(const json& resolved, const std::string& out_root, bool force) {
    ExperimentResult result;
    result.spec = resolved;
    fs::path root = fs::path(out_root) / resolved["name"].get<std::string>();
    fs::create_directories(root);
    result.out_dir = root.string();
    {
        std::ofstream os(root / "experiment.json");
        os << resolved.dump(2) << "\n";
    }

    std::vector<json> cells = expand_grid(resolved);
    // every cell must validate before any cell runs
    for (const auto& cell : cells) {
        uint64_t seed0 = cell["seeds"][0].get<uint64_t>();
        build_train_config(cell, seed0).validate();
        build_privacy(cell).validate();
    }

    for (const auto& cell : cells) {
        MetricsRecord rec;
        rec.config = cell;
        rec.hash = config_hash_hex(cell);
        rec.label = cell_label(resolved, cell);
        for (const auto& s : cell["seeds"]) rec.seeds.push_back(s.get<uint64_t>());
        rec.sigma = cell["sigma"].get<double>();
        fs::path dir = root / ("cell_" + rec.hash);

        fs::path summary_path = dir / "summary.json";
        if (!force && fs::exists(summary_path)) {
            try {
                json existing;
                std::ifstream is(summary_path);
                is >> existing;
                if (existing.value("config_hash", "") == rec.hash &&
                    existing.value("status", "") == "ok") {
                    rec.status = "cached";
                    rec.final_accuracy =
                        existing["final_accuracy"]["per_seed"].get<std::vector<double>>();
                    rec.accuracy_mean = existing["final_accuracy"]["mean"].get<double>();
                    rec.accuracy_std = existing["final_accuracy"]["std"].get<double>();
                    rec.final_epsilon = existing["privacy"]["epsilon"].get<double>();
                    rec.final_best_order = existing["privacy"]["best_order"].get<double>();
                    for (uint64_t seed : rec.seeds) {
                        std::ifstream cs(dir / ("run_" + std::to_string(seed) + ".csv"));
                        std::stringstream buf;
                        buf << cs.rdbuf();
                        rec.per_seed_rounds.push_back(parse_metrics_csv(buf.str()));
                    }
                    result.cells.push_back(std::move(rec));
                    continue;
                }
            } catch (const std::exception&) {
                // unreadable summary: fall through and rerun the cell
            }
        }

        fs::create_directories(dir);
        try {
            for (uint64_t seed : rec.seeds) {
                Dataset data = build_dataset(cell, seed);
                PartitionPlan plan = build_plan(cell, seed, data);
                TrainingReport report =
                    run_training(build_train_config(cell, seed), build_privacy(cell), data, plan,
                                 build_model_spec(cell, data));
                {
                    std::ofstream os(dir / ("run_" + std::to_string(seed) + ".csv"));
                    os << metrics_csv(report.rounds);
                }
                {
                    std::ofstream os(dir / ("partition_" + std::to_string(seed) + ".json"));
                    os << partition_plan_json(plan).dump(2) << "\n";
                }
                {
                    std::ofstream os(dir / ("report_" + std::to_string(seed) + ".json"));
                    os << training_report_json(cell, seed, report).dump(2) << "\n";
                }
                {
                    std::ofstream os(dir / ("privacy_" + std::to_string(seed) + ".jsonl"));
                    for (const auto& pr : report.privacy) os << privacy_round_json(pr) << "\n";
                }
                save_checkpoint(report.final_params,
                                (dir / ("model_" + std::to_string(seed) + ".bin")).string());
                rec.per_seed_rounds.push_back(report.rounds);
                rec.final_accuracy.push_back(report.final_eval.mean);
                rec.final_epsilon = report.final_epsilon;
                rec.final_best_order = report.final_best_order;
            }
            double mean = 0.0;
            for (double a : rec.final_accuracy) mean += a;
            mean /= double(rec.final_accuracy.size());
            double var = 0.0;
            for (double a : rec.final_accuracy) var += (a - mean) * (a - mean);
            var /= double(rec.final_accuracy.size());
            rec.accuracy_mean = mean;
            rec.accuracy_std = std::sqrt(var);
            rec.status = "ok";
        } catch (const std::exception& e) {
            rec.status = "failed";
            rec.error = e.what();
        }
        {
            std::ofstream os(summary_path);
            os << summary_json(rec).dump(2) << "\n";
        }
        result.cells.push_back(std::move(rec));
    }

    {
        std::ofstream os(root / "plots.csv");
        emit_plots_data(result.cells, os);
    }
    return result;
}

}  // namespace dpfl::harness
