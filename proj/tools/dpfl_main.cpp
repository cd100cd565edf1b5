#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dpfl/dp.hpp"
#include "dpfl/harness.hpp"

using dpfl::harness::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRun = 3;

int cmd_simulate(const std::string& config_path, const std::vector<std::string>& overrides,
                 int seeds, bool force, const std::string& out_dir) {
    json user = json::object();
    if (!config_path.empty()) {
        std::ifstream is(config_path);
        if (!is) {
            std::cerr << "config: cannot open " << config_path << "\n";
            return kExitConfig;
        }
        try {
            is >> user;
        } catch (const json::parse_error& e) {
            std::cerr << "config: " << config_path << " is not valid JSON: " << e.what() << "\n";
            return kExitConfig;
        }
    }
    for (const auto& ov : overrides) dpfl::harness::apply_override(user, ov);
    if (seeds > 0) {
        json list = json::array();
        for (int i = 1; i <= seeds; ++i) list.push_back(i);
        user["seeds"] = list;
    }
    json resolved = dpfl::harness::parse_config(user);
    std::string root = dpfl::harness::resolve_out_root(out_dir);

    auto result = dpfl::harness::run_experiment(resolved, root, force);
    for (const auto& cell : result.cells) {
        std::printf("%-10s %s  %s", cell.status.c_str(), cell.hash.c_str(), cell.label.c_str());
        if (cell.status == "failed") {
            std::printf("  (%s)\n", cell.error.c_str());
        } else {
            std::printf("  acc %.4f +/- %.4f  eps %.4g (sigma %.4g)\n", cell.accuracy_mean,
                        cell.accuracy_std, cell.final_epsilon, cell.sigma);
        }
    }
    std::printf("outputs in %s\n", result.out_dir.c_str());
    return result.all_ok() ? 0 : kExitRun;
}

int cmd_privacy(double q, double sigma, int rounds, double delta) {
    dpfl::RdpLedger ledger;
    auto rdp = dpfl::per_round_rdp(q, sigma, ledger.orders());
    for (int t = 0; t < rounds; ++t) ledger.compose(rdp);
    auto eps = dpfl::epsilon_at_delta(ledger, delta);
    json out{{"q", q},           {"sigma", sigma},
             {"rounds", rounds}, {"delta", delta},
             {"orders", ledger.orders()}, {"rdp", ledger.accumulated()},
             {"epsilon", eps.epsilon},    {"best_order", eps.best_order}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_calibrate(double epsilon, double delta, double q, int rounds) {
    double sigma = dpfl::calibrate_sigma(epsilon, delta, q, rounds);
    dpfl::RdpLedger ledger;
    auto rdp = dpfl::per_round_rdp(q, sigma, ledger.orders());
    for (int t = 0; t < rounds; ++t) ledger.compose(rdp);
    auto eps = dpfl::epsilon_at_delta(ledger, delta);
    json out{{"sigma", sigma},       {"epsilon_target", epsilon},
             {"epsilon_achieved", eps.epsilon}, {"best_order", eps.best_order},
             {"delta", delta},       {"q", q},
             {"rounds", rounds}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Differentially private personalized federated learning simulator"};
    app.require_subcommand(1);

    auto* simulate = app.add_subcommand("simulate", "Run an experiment (single run or sweep)");
    std::string config_path;
    std::vector<std::string> overrides;
    int seeds = 0;
    bool force = false;
    std::string out_dir;
    simulate->add_option("--config", config_path, "JSON config file (defaults when omitted)");
    simulate->add_option("--override", overrides, "key=value config overrides (dot paths)");
    simulate->add_option("--seeds", seeds, "replicate with seeds 1..n");
    simulate->add_flag("--force", force, "rerun even if the config hash is already done");
    simulate->add_option("--out", out_dir, "output root (default $DPFL_OUT or ./runs)");

    auto* privacy = app.add_subcommand("privacy", "Query the accountant for a fixed mechanism");
    double q = 1.0, sigma = 1.0, delta = 1e-5;
    int rounds = 1;
    privacy->add_option("--q", q, "client sampling probability")->required();
    privacy->add_option("--sigma", sigma, "noise scale")->required();
    privacy->add_option("--rounds", rounds, "composed rounds")->required();
    privacy->add_option("--delta", delta, "target delta")->required();

    auto* calibrate = app.add_subcommand("calibrate", "Find sigma for an epsilon target");
    double epsilon = 1.0;
    calibrate->add_option("--epsilon", epsilon, "epsilon target")->required();
    calibrate->add_option("--delta", delta, "target delta")->required();
    calibrate->add_option("--q", q, "client sampling probability")->required();
    calibrate->add_option("--rounds", rounds, "composed rounds")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (simulate->parsed())
            return cmd_simulate(config_path, overrides, seeds, force, out_dir);
        if (privacy->parsed()) return cmd_privacy(q, sigma, rounds, delta);
        return cmd_calibrate(epsilon, delta, q, rounds);
    } catch (const dpfl::harness::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "run failed: " << e.what() << "\n";
        return kExitRun;
    }
}
