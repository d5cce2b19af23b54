// Command-line entry point for the prediction-to-image inversion pipeline.
// Exit codes: 0 success, 1 domain error (JSON on stderr), 2 usage error.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "p2i/pipeline.hpp"

namespace {

p2i::FullConfig resolve_config(const std::string& config_path, const std::string& out_dir) {
    p2i::FullConfig cfg;
    if (!config_path.empty()) {
        cfg = p2i::load_config_file(config_path);
    } else {
        std::string resolved = (p2i::fs::path(out_dir) / "config.resolved.json").string();
        p2i::require(p2i::fs::exists(resolved), "IoError",
                     "no --config given and no config.resolved.json in " + out_dir);
        cfg = p2i::load_config_file(resolved);
    }
    if (const char* seed_env = std::getenv("P2I_SEED")) {
        cfg.run.seed = std::strtoull(seed_env, nullptr, 10);
        std::cerr << "note: P2I_SEED overrides config seed -> " << cfg.run.seed << "\n";
    }
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prediction-to-image black-box model inversion pipeline"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    bool force = false;
    int jobs = 1;
    std::optional<std::string> scheme;
    std::optional<double> m_override;
    std::vector<int> ids;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "pipeline config JSON");
        sub->add_option("--out-dir", out_dir, "run output directory")->required();
        sub->add_flag("--force", force, "overwrite existing stage outputs");
        sub->add_option("--jobs", jobs, "worker threads (deterministic reduction)");
        return sub;
    };

    std::string data_manifest, checkpoint_base;
    CLI::App* c_bench = add_common(app.add_subcommand("bench-init", "build the synthetic benchmark"));
    CLI::App* c_select = add_common(app.add_subcommand("select", "score and select training data"));
    CLI::App* c_train = add_common(app.add_subcommand("train", "train the alignment encoder"));
    c_train->add_option("--data-manifest", data_manifest, "selected training set (selected.json)");
    CLI::App* c_attack = add_common(app.add_subcommand("attack", "reconstruct target identities"));
    std::string scheme_str;
    double m_val = -1.0;
    c_attack->add_option("--scheme", scheme_str, "aligned_ensemble | prediction_ensemble | one_hot");
    c_attack->add_option("--m", m_val, "enhancement amount override");
    c_attack->add_option("--ids", ids, "identities to attack (default: all)");
    c_attack->add_option("--checkpoint", checkpoint_base, "checkpoint base path (no extension)");
    c_attack->add_option("--data-manifest", data_manifest, "selected training set (selected.json)");
    CLI::App* c_eval = add_common(app.add_subcommand("eval", "compute attack metrics"));
    CLI::App* c_interp = add_common(app.add_subcommand("interpolate", "latent alignment traces"));
    CLI::App* c_report = add_common(app.add_subcommand("report", "query-cost accounting"));
    CLI::App* c_e2e = add_common(app.add_subcommand("e2e", "run the whole pipeline"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return 2;
    }

    try {
        p2i::FullConfig cfg = resolve_config(config_path, out_dir);
        p2i::RunDir rd(out_dir, cfg);
        if (c_bench->parsed()) {
            p2i::BenchReport r = p2i::cmd_bench_init(rd, force);
            std::cout << "target holdout accuracy: " << r.target_holdout_accuracy << "\n";
        } else if (c_select->parsed()) {
            auto sel = p2i::cmd_select(rd, force);
            std::cout << "selected records: " << sel.total() << "\n";
        } else if (c_train->parsed()) {
            p2i::TrainReport r = p2i::cmd_train(rd, force, data_manifest);
            if (!r.epoch_means.empty())
                std::cout << "final mean total loss: " << r.epoch_means.back().total << "\n";
        } else if (c_attack->parsed()) {
            if (!scheme_str.empty()) scheme = scheme_str;
            if (m_val >= 0.0) m_override = m_val;
            auto out = p2i::cmd_attack(rd, ids, force, jobs, scheme, m_override, checkpoint_base,
                                       data_manifest);
            std::cout << "attacked identities: " << out.results.size() << "\n";
        } else if (c_eval->parsed()) {
            p2i::MetricsReport r = p2i::cmd_eval(rd, force);
            std::cout << "attack accuracy: " << r.attack_acc << "\n";
        } else if (c_interp->parsed()) {
            auto traces = p2i::cmd_interpolate(rd, force);
            std::cout << "traces written: " << traces.size() << "\n";
        } else if (c_report->parsed()) {
            p2i::QueryReport r = p2i::cmd_report(rd);
            std::cout << "target queries: " << r.target_cost
                      << (r.attack_phase_clean ? " (attack phase clean)" : " (ATTACK PHASE NONZERO)")
                      << "\n";
        } else if (c_e2e->parsed()) {
            p2i::E2EOutput out = p2i::cmd_e2e(rd, force, jobs);
            std::cout << "attack accuracy: " << out.metrics.attack_acc
                      << ", target queries: " << out.queries.target_cost << "\n";
        }
    } catch (const p2i::Error& e) {
        nlohmann::json err{{"kind", e.kind()}, {"message", e.what()}};
        std::cerr << err.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        nlohmann::json err{{"kind", "Internal"}, {"message", e.what()}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
    return 0;
}
