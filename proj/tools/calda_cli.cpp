#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "calda/experiment.hpp"
#include "calda/gradcheck.hpp"

namespace {

calda::ExperimentConfig load_config(const std::string& path) {
    calda::ExperimentConfig cfg;
    if (path.empty()) return cfg;
    std::ifstream is(path);
    calda::check(static_cast<bool>(is), "cannot open config file " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw calda::ContractError(std::string("malformed config JSON: ") + e.what());
    }
    from_json(j, cfg);
    return cfg;
}

std::vector<std::size_t> parse_size_list(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoul(tok));
    return out;
}

std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
    return out;
}

calda::SyntheticSpec spec_from_names(const std::string& scenario, const std::string& shift) {
    calda::SyntheticSpec spec;
    nlohmann::json j{{"scenario", scenario}, {"shift", shift}};
    calda::ExperimentConfig tmp;
    from_json(j, tmp);
    spec = tmp.synth;
    return spec;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-source time-series domain adaptation toolkit"};
    app.require_subcommand(1);

    // generate
    auto* gen = app.add_subcommand("generate", "write a synthetic dataset directory");
    std::string gen_scenario = "gmm2", gen_shift = "inter_translate", gen_out;
    calda::SyntheticSpec gen_spec;
    bool gen_summed = false;
    gen->add_option("--scenario", gen_scenario, "sw|gmm1|gmm2|gmm3");
    gen->add_option("--shift", gen_shift,
                    "none|inter_translate|intra_translate|inter_rotate|intra_rotate");
    gen->add_option("--magnitude", gen_spec.shift_magnitude, "shift magnitude");
    gen->add_option("--domains", gen_spec.n_domains, "number of domains");
    gen->add_option("--classes", gen_spec.n_classes, "number of classes");
    gen->add_option("--window", gen_spec.window_len, "window length in samples");
    gen->add_option("--windows-per-class", gen_spec.windows_per_class,
                    "windows per (domain, class)");
    gen->add_option("--seed", gen_spec.seed, "generator seed");
    gen->add_flag("--summed", gen_summed, "store the summed single-channel sine signal");
    gen->add_option("--out", gen_out, "output directory")->required();

    // train
    auto* train_cmd = app.add_subcommand("train", "run one training trial");
    std::string train_config, train_results;
    bool paper_scale = false;
    train_cmd->add_option("--config", train_config, "JSON experiment config")->required();
    train_cmd->add_flag("--paper-scale", paper_scale,
                        "30000 iterations with batch 128 instead of the desk-scale defaults");
    train_cmd->add_option("--out", train_results, "append a results CSV row to this file");

    // protocol
    auto* proto = app.add_subcommand("protocol", "multi-target evaluation protocol");
    std::string proto_dataset, proto_config, proto_out, proto_n_list = "2,6,10";
    std::size_t proto_targets = 3, proto_sets = 3;
    std::uint64_t proto_seed = 7;
    proto->add_option("--dataset", proto_dataset, "dataset directory")->required();
    proto->add_option("--config", proto_config, "base JSON experiment config");
    proto->add_option("--n-list", proto_n_list, "comma-separated source counts");
    proto->add_option("--targets", proto_targets, "targets sampled per n");
    proto->add_option("--sets", proto_sets, "source sets per target");
    proto->add_option("--seed", proto_seed, "protocol sampling seed");
    proto->add_option("--out", proto_out, "results CSV path")->required();

    // ws-sweep
    auto* sweep = app.add_subcommand("ws-sweep", "label-proportion noise sweep");
    std::string sweep_dataset, sweep_config, sweep_out, sweep_budgets = "0,0.05,0.1,0.2,0.4";
    sweep->add_option("--dataset", sweep_dataset, "dataset directory")->required();
    sweep->add_option("--config", sweep_config, "base JSON experiment config");
    sweep->add_option("--budgets", sweep_budgets, "comma-separated noise budgets");
    sweep->add_option("--out", sweep_out, "results CSV path")->required();

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    double gc_tol = 1e-4;
    gc->add_option("--tol", gc_tol, "max allowed relative error");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            calda::SyntheticSpec spec = spec_from_names(gen_scenario, gen_shift);
            spec.shift_magnitude = gen_spec.shift_magnitude;
            spec.n_domains = gen_spec.n_domains;
            spec.n_classes = gen_spec.n_classes;
            spec.window_len = gen_spec.window_len;
            spec.windows_per_class = gen_spec.windows_per_class;
            spec.seed = gen_spec.seed;
            spec.sw_summed = gen_summed;
            auto datasets = calda::generate(spec);
            calda::DatasetMeta meta;
            meta.name = gen_scenario + "_" + gen_shift;
            meta.n_channels = spec.channels();
            meta.window_len = spec.window_len;
            meta.n_classes = spec.n_classes;
            for (std::size_t c = 0; c < spec.n_classes; ++c)
                meta.class_names.push_back("class" + std::to_string(c));
            if (spec.scenario == calda::Scenario::SW)
                meta.signal_mode = spec.sw_summed ? "summed" : "components";
            calda::save_dataset(gen_out, datasets, meta);
            std::cout << "wrote " << datasets.size() << " domains to " << gen_out << "\n";
        } else if (train_cmd->parsed()) {
            calda::ExperimentConfig cfg = load_config(train_config);
            if (paper_scale) {
                cfg.iterations = 30000;
                cfg.batch_size = 128;
            }
            auto datasets = calda::load_or_generate(cfg);
            calda::TrialResult trial = calda::train(cfg, datasets);
            std::cout << trial.fingerprint << "\n";
            std::printf("target_test_acc=%.6f source_valid_acc=%.6f best_iteration=%zu\n",
                        trial.target_test_acc, trial.source_valid_acc, trial.best_iteration);
            if (cfg.ws)
                std::printf("realized_ws_noise=%.6f\n", trial.realized_ws_noise);
            if (!train_results.empty()) {
                std::vector<int> srcs =
                    cfg.sources.empty()
                        ? calda::select_sources(
                              [&] {
                                  std::vector<int> a;
                                  for (const auto& ds : datasets) a.push_back(ds.domain_id);
                                  return a;
                              }(),
                              cfg.target, cfg.n_sources, cfg.source_set_seed)
                        : cfg.sources;
                calda::ResultRow row{cfg.dataset_dir.empty() ? "synthetic" : cfg.dataset_dir,
                                     cfg, srcs, trial};
                std::ofstream os(train_results, std::ios::app);
                calda::check(static_cast<bool>(os), "cannot open " + train_results);
                if (os.tellp() == 0) os << calda::kResultsHeader << "\n";
                os << calda::result_row_csv(row) << "\n";
            }
        } else if (proto->parsed()) {
            calda::ExperimentConfig base = load_config(proto_config);
            base.dataset_dir = proto_dataset;
            auto datasets = calda::load_dataset(proto_dataset);
            auto [rows, summaries] =
                calda::run_protocol(datasets, base, parse_size_list(proto_n_list),
                                    proto_targets, proto_sets, proto_seed, proto_dataset);
            calda::write_results_csv(proto_out, rows);
            for (const auto& s : summaries)
                std::printf("n=%zu mean_acc=%.6f deviation=%.6f\n", s.n_sources,
                            s.mean_accuracy, s.deviation);
        } else if (sweep->parsed()) {
            calda::ExperimentConfig base = load_config(sweep_config);
            base.dataset_dir = sweep_dataset;
            auto datasets = calda::load_dataset(sweep_dataset);
            auto rows = calda::ws_noise_sweep(datasets, base, parse_double_list(sweep_budgets),
                                              sweep_dataset);
            calda::write_results_csv(sweep_out, rows);
            for (const auto& r : rows)
                std::printf("budget=%.3f realized=%.6f target_test_acc=%.6f\n",
                            r.cfg.ws_noise_budget, r.trial.realized_ws_noise,
                            r.trial.target_test_acc);
        } else if (gc->parsed()) {
            bool ok = true;
            for (bool pl : {false, true}) {
                calda::GradCheckReport report = calda::gradcheck_full_model(3, pl, !pl);
                std::printf("pl=%d worst_rel_err=%.3e\n", pl ? 1 : 0, report.worst);
                for (const auto& e : report.entries)
                    if (e.max_rel_err >= gc_tol) {
                        std::printf("  FAIL %s rel_err=%.3e\n", e.name.c_str(), e.max_rel_err);
                        ok = false;
                    }
            }
            std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << "\n";
            return ok ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
