#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <cstdlib>

#include "dpfl/harness.hpp"

using namespace dpfl;
using namespace dpfl::harness;
namespace fs = std::filesystem;

namespace {

json tiny_run_config() {
    // small enough to run in well under a second
    json user{{"name", "tiny"},
              {"rounds", 3},
              {"clients", 4},
              {"classifier_iters", 3},
              {"local_iters", 2},
              {"batch", 8},
              {"sigma", 1.0},
              {"dataset", json{{"type", "synthetic"},
                               {"classes", 4},
                               {"per_class", 40},
                               {"dim", 6},
                               {"separation", 3.0}}},
              {"hidden_dims", json::array({8, 6})}};
    return parse_config(user);
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream buf;
    buf << is.rdbuf();
    return buf.str();
}

struct TempDir {
    fs::path path;
    TempDir() : path(fs::temp_directory_path() / ("dpfl_harness_" + std::to_string(::getpid()))) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("empty config resolves to the full default preset") {
    json cfg = parse_config(json::object());
    CHECK(cfg["eta_ext"] == 0.01);
    CHECK(cfg["eta_cls"] == 0.01);
    CHECK(cfg["eta_g"] == 1.0);
    CHECK(cfg["clip"] == 0.01);
    CHECK(cfg["sparsity"] == 0.05);
    CHECK(cfg["masked_layers"] == 4);
    CHECK(cfg["local_iters"] == 5);
    CHECK(cfg["classifier_iters"] == 15);
    CHECK(cfg["lambda"] == 0.2);
    CHECK(cfg["clients"] == 20);
    CHECK(cfg["rounds"] == 50);
    CHECK(cfg["epsilon"] == 1.0);
    CHECK(cfg["algorithm"] == "dp_pfeddsu");
    CHECK(cfg["seeds"] == json::array({1}));
}

TEST_CASE("an epsilon override changes only that key and the hash") {
    json base = parse_config(json::object());
    json user = json::object();
    apply_override(user, "epsilon=0.5");
    json other = parse_config(user);
    CHECK(other["epsilon"] == 0.5);
    int diffs = 0;
    for (auto& [k, v] : base.items()) diffs += other[k] != v ? 1 : 0;
    CHECK(diffs == 1);
    CHECK(config_hash(base) != config_hash(other));
}

TEST_CASE("invalid values are rejected naming key, value, and range") {
    json user{{"lambda", -1.0}};
    CHECK_THROWS_WITH_AS(parse_config(user), doctest::Contains("lambda"), ConfigError);
    try {
        parse_config(user);
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        CHECK(msg.find("-1") != std::string::npos);
        CHECK(msg.find(">= 0") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config(json{{"sample_prob", 1.5}}), ConfigError);
    CHECK_THROWS_AS(parse_config(json{{"penalty", "cubed"}}), ConfigError);
}

TEST_CASE("unknown keys are rejected") {
    CHECK_THROWS_WITH_AS(parse_config(json{{"not_a_key", 1}}), doctest::Contains("not_a_key"),
                         ConfigError);
    CHECK_THROWS_AS(parse_config(json{{"sweep", json{{"bogus_axis", json::array({1})}}}}),
                    ConfigError);
}

TEST_CASE("config hash ignores key order in the source text") {
    json a = json::parse(R"({"rounds": 7, "lambda": 0.3, "clients": 5})");
    json b = json::parse(R"({"clients": 5, "lambda": 0.3, "rounds": 7})");
    CHECK(config_hash(parse_config(a)) == config_hash(parse_config(b)));
}

TEST_CASE("dot-path overrides reach nested keys") {
    json user = json::object();
    apply_override(user, "dataset.type=synthetic");
    apply_override(user, "dataset.separation=6.5");
    json cfg = parse_config(user);
    CHECK(cfg["dataset"]["separation"] == 6.5);
    CHECK(cfg["dataset"]["per_class"] == 400);  // defaults still fill in
}

TEST_CASE("ablation preset expands to exactly the three component rows") {
    json user{{"preset", "ablation"}, {"sigma", 1.0}};
    json spec = parse_config(user);
    auto cells = expand_grid(spec);
    REQUIRE(cells.size() == 3);
    std::set<std::pair<bool, bool>> flags;
    for (const auto& c : cells) flags.insert({c["rt"].get<bool>(), c["dan"].get<bool>()});
    CHECK(flags == std::set<std::pair<bool, bool>>{{false, false}, {true, false}, {true, true}});

    // rows differ in the component flags and nothing else
    for (size_t i = 1; i < cells.size(); ++i) {
        for (auto& [k, v] : cells[0].items()) {
            if (k == "rt" || k == "dan") continue;
            CHECK(cells[i][k] == v);
        }
    }
}

TEST_CASE("budget preset mirrors the three-budget sweep") {
    json user{{"preset", "budget"}, {"rounds", 5}};
    json spec = parse_config(user);
    auto cells = expand_grid(spec);
    REQUIRE(cells.size() == 3);
    std::set<double> eps;
    for (const auto& c : cells) {
        eps.insert(c["epsilon"].get<double>());
        CHECK(c["sigma_source"] == "calibrated");
        CHECK(c["sigma"].get<double>() > 0.0);
    }
    CHECK(eps == std::set<double>{0.5, 1.0, 2.0});
    // lower budget needs at least as much noise
    std::map<double, double> sigma_of;
    for (const auto& c : cells) sigma_of[c["epsilon"].get<double>()] = c["sigma"].get<double>();
    CHECK(sigma_of[0.5] >= sigma_of[1.0]);
    CHECK(sigma_of[1.0] >= sigma_of[2.0]);
}

TEST_CASE("sparsity, layers and lambda presets expose the full axes") {
    CHECK(preset("sparsity")["sweep"]["sparsity"].size() == 7);
    CHECK(preset("layers")["sweep"]["masked_layers"].size() == 8);
    CHECK(preset("lambda")["sweep"]["lambda"].size() == 7);
    CHECK_THROWS_AS(preset("nope"), ConfigError);
}

TEST_CASE("run_experiment: one cell, two seeds, summary with mean and std") {
    TempDir tmp;
    json cfg = tiny_run_config();
    cfg["seeds"] = json::array({1, 2});
    auto result = run_experiment(cfg, tmp.path.string(), false);
    REQUIRE(result.cells.size() == 1);
    const auto& cell = result.cells[0];
    CHECK(cell.status == "ok");
    CHECK(cell.final_accuracy.size() == 2);
    double mean = (cell.final_accuracy[0] + cell.final_accuracy[1]) / 2.0;
    CHECK(cell.accuracy_mean == doctest::Approx(mean));

    fs::path dir = fs::path(result.out_dir) / ("cell_" + cell.hash);
    CHECK(fs::exists(dir / "summary.json"));
    CHECK(fs::exists(dir / "run_1.csv"));
    CHECK(fs::exists(dir / "run_2.csv"));
    CHECK(fs::exists(dir / "model_1.bin"));
    json summary = json::parse(slurp(dir / "summary.json"));
    CHECK(summary["config"]["rounds"] == 3);  // full config echo, no ambient defaults
    CHECK(summary["config_hash"] == cell.hash);
    CHECK(fs::exists(fs::path(result.out_dir) / "plots.csv"));

    // per-run audit artifacts: partition plan and full report, config echoed
    json plan = json::parse(slurp(dir / "partition_1.json"));
    CHECK(plan["clients"] == 4);
    CHECK(plan["shards"].size() == 4);
    for (const auto& shard : plan["shards"]) {
        CHECK(shard["classes"].size() == 2);
        CHECK(!shard["train_indices"].empty());
        CHECK(!shard["test_indices"].empty());
    }
    json report = json::parse(slurp(dir / "report_1.json"));
    CHECK(report["config"] == cell.config);
    CHECK(report["rounds"].size() == 3);
    CHECK(report["final"].contains("accuracy_prefinetune_mean"));

    // the privacy report stream carries the documented fields
    std::istringstream pj(slurp(dir / "privacy_1.jsonl"));
    std::string line;
    int privacy_rows = 0;
    while (std::getline(pj, line)) {
        if (line.empty()) continue;
        json row = json::parse(line);
        for (const char* key : {"round", "sigma", "C", "q", "orders", "rdp", "epsilon", "delta",
                                "best_order"})
            CHECK(row.contains(key));
        ++privacy_rows;
    }
    CHECK(privacy_rows == 3);
}

TEST_CASE("run_experiment is idempotent on the config hash") {
    TempDir tmp;
    json cfg = tiny_run_config();
    auto first = run_experiment(cfg, tmp.path.string(), false);
    REQUIRE(first.cells[0].status == "ok");
    auto second = run_experiment(cfg, tmp.path.string(), false);
    CHECK(second.cells[0].status == "cached");
    CHECK(second.cells[0].accuracy_mean == first.cells[0].accuracy_mean);
    auto forced = run_experiment(cfg, tmp.path.string(), true);
    CHECK(forced.cells[0].status == "ok");
}

TEST_CASE("reproducibility: identical spec and seed give byte-identical CSVs") {
    TempDir tmp;
    json cfg = tiny_run_config();
    auto a = run_experiment(cfg, (tmp.path / "a").string(), false);
    auto b = run_experiment(cfg, (tmp.path / "b").string(), false);
    fs::path csv_a = fs::path(a.out_dir) / ("cell_" + a.cells[0].hash) / "run_1.csv";
    fs::path csv_b = fs::path(b.out_dir) / ("cell_" + b.cells[0].hash) / "run_1.csv";
    CHECK(slurp(csv_a) == slurp(csv_b));
    CHECK(slurp(fs::path(a.out_dir) / "plots.csv") == slurp(fs::path(b.out_dir) / "plots.csv"));
}

TEST_CASE("metrics csv round trips through the parser") {
    TempDir tmp;
    json cfg = tiny_run_config();
    auto result = run_experiment(cfg, tmp.path.string(), false);
    const auto& rounds = result.cells[0].per_seed_rounds[0];
    std::string text = metrics_csv(rounds);
    auto parsed = parse_metrics_csv(text);
    REQUIRE(parsed.size() == rounds.size());
    for (size_t i = 0; i < rounds.size(); ++i) {
        CHECK(parsed[i].round == rounds[i].round);
        CHECK(parsed[i].cohort_size == rounds[i].cohort_size);
    }
}

TEST_CASE("plots data: loss rows per round and distinguishable algorithms") {
    TempDir tmp;
    json cfg = tiny_run_config();
    cfg["sweep"] = json{{"algorithm", json::array({"dp_pfeddsu", "dp_fedavg_fb"})}};
    cfg = parse_config(cfg);  // revalidate with the sweep
    auto result = run_experiment(cfg, tmp.path.string(), false);
    REQUIRE(result.cells.size() == 2);

    std::ostringstream os;
    emit_plots_data(result.cells, os);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    CHECK(line == "round,metric,value,algorithm,seed");
    int loss_rows = 0;
    std::set<std::string> labels;
    while (std::getline(is, line)) {
        if (line.find(",mean_train_loss,") != std::string::npos) ++loss_rows;
        auto last_comma = line.rfind(',');
        auto prev_comma = line.rfind(',', last_comma - 1);
        labels.insert(line.substr(prev_comma + 1, last_comma - prev_comma - 1));
    }
    CHECK(loss_rows == 2 * 3);  // two cells, three rounds each
    CHECK(labels.size() == 2);
}

TEST_CASE("output root: flag beats env beats the default") {
    ::setenv("DPFL_OUT", "/tmp/from_env", 1);
    CHECK(resolve_out_root("explicit") == "explicit");
    CHECK(resolve_out_root("") == "/tmp/from_env");
    ::unsetenv("DPFL_OUT");
    CHECK(resolve_out_root("") == "runs");
}

TEST_CASE("failed cells are recorded without stopping the experiment") {
    TempDir tmp;
    json cfg = tiny_run_config();
    // classes_per_client exceeding the larger of the sweep makes one cell
    // infeasible at partition time: 4 classes, 4 clients, s=4 needs 16 slots
    // over 4 classes -> 4 shards/class of 10 (fine), but per_class=2 breaks it
    cfg["sweep"] = json{{"classes_per_client", json::array({2, 4})}};
    cfg["dataset"]["per_class"] = 7;  // 4 clients x s=4 -> 4 shards of 1 < 2: infeasible
    cfg = parse_config(cfg);
    auto result = run_experiment(cfg, tmp.path.string(), false);
    REQUIRE(result.cells.size() == 2);
    int failed = 0, ok = 0;
    for (const auto& c : result.cells) {
        failed += c.status == "failed" ? 1 : 0;
        ok += c.status == "ok" ? 1 : 0;
    }
    CHECK(failed == 1);
    CHECK(ok == 1);
    CHECK(!result.all_ok());
}
