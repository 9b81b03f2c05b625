// Command-line front end: train / experiment / sweep / report / gen-data.
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "fedul/errors.hpp"
#include "fedul/mechanism.hpp"
#include "json.hpp"

namespace {

using namespace fedul;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitMarkingInfeasible = 3;

void print_summary_line(const ExperimentLog& log) {
    std::cout << "marker=" << marker_name(log.config.marker)
              << " method=" << unlearn_name(log.config.unlearn.method)
              << " metric=" << metric_name(log.metric) << " baseline=" << format_float(log.baseline)
              << " current=" << format_float(log.current) << " diff=" << format_float(log.diff)
              << " decision=" << decision_name(log.decision)
              << (log.attack_flagged ? " [attack flagged]" : "") << "\n";
}

int run_train(const std::string& config_path, std::optional<std::uint64_t> seed_override,
              const std::string& out_dir) {
    ExperimentConfig cfg = load_config(config_path);
    if (seed_override) cfg.seed = *seed_override;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.fl.seed = cfg.seed;
    if (cfg.data_source == "synthetic") cfg.data.seed = cfg.seed;
    cfg.model.validate();
    cfg.fl.validate();

    Dataset train = cfg.data_source == "synthetic" ? gen_synthetic(cfg.data)
                    : cfg.data_source == "idx"
                        ? load_idx(cfg.idx_images, cfg.idx_labels, cfg.idx_downscale)
                        : load_cache(cfg.cache_path);
    Partition part = cfg.partition_kind == "iid"
                         ? partition_iid(train, cfg.fl.n_total, cfg.seed)
                         : partition_dirichlet(train, cfg.fl.n_total, cfg.dirichlet_alpha, cfg.seed);
    FLState st;
    Rng rng(stream_seed(cfg.seed, 0, stream::kInit));
    st.global = init_params(cfg.model, rng);
    for (int t = 0; t < cfg.fl.total_rounds; ++t) run_round(st, cfg.model, train, part, cfg.fl);

    const double acc = metric_accuracy(cfg.model, st.global, train.features, train.labels);
    const double loss = metric_loss(cfg.model, st.global, train.features, train.labels);
    std::cout << "rounds=" << cfg.fl.total_rounds << " train_acc=" << format_float(acc)
              << " train_loss=" << format_float(loss) << "\n";
    if (st.history.rounds.size() >= 5) {
        EnabledEstimate est = estimate_enabled_round(st.history, 5, 0.2, cfg.timeline.t_enabled);
        std::cout << "estimated_enabled_round=" << est.round
                  << (est.converged ? "" : " (fallback: updates never stabilized)") << "\n";
    }
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        save_history(st.history, (std::filesystem::path(cfg.out_dir) / "history.vfhl").string());
        std::cout << "history written to " << cfg.out_dir << "/history.vfhl\n";
    }
    return kExitOk;
}

int run_experiment_cmd(const std::string& config_path, std::optional<std::uint64_t> seed_override,
                       const std::string& out_dir) {
    ExperimentConfig cfg = load_config(config_path);
    if (seed_override) cfg.seed = *seed_override;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    ExperimentLog log = run_experiment(cfg);
    if (log.marking_failed) {
        std::cerr << "marking infeasible; experiment aborted at the marking round\n";
        return kExitMarkingInfeasible;
    }
    print_summary_line(log);
    return kExitOk;
}

int run_sweep(const std::string& config_path, const std::string& axis_name,
              const std::vector<double>& values, std::optional<std::uint64_t> seed_override,
              const std::string& out_dir, int jobs) {
    ExperimentConfig cfg = load_config(config_path);
    if (seed_override) cfg.seed = *seed_override;
    cfg.out_dir.clear();  // per-value artifacts get their own directories
    SweepAxis axis = sweep_axis_from_name(axis_name);
    std::vector<ExperimentLog> logs;
    if (!out_dir.empty()) {
        for (std::size_t i = 0; i < values.size(); ++i) {
            ExperimentConfig one = apply_sweep_value(cfg, axis, values[i]);
            one.out_dir =
                (std::filesystem::path(out_dir) / (axis_name + "_" + std::to_string(values[i])))
                    .string();
            logs.push_back(run_experiment(one));
        }
    } else {
        logs = sweep(cfg, axis, values, jobs);
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::cout << axis_name << "=" << format_float(values[i]) << " ";
        if (logs[i].marking_failed)
            std::cout << "marking_failed\n";
        else
            std::cout << "diff=" << format_float(logs[i].diff)
                      << " decision=" << decision_name(logs[i].decision) << "\n";
    }
    return kExitOk;
}

int run_report(const std::string& summary_path, const std::string& markers_path,
               const std::string& params_path) {
    std::ifstream in(summary_path);
    if (!in) throw ConfigError("cannot open " + summary_path);
    nlohmann::json j = nlohmann::json::parse(in);
    std::cout << "marker=" << j.value("marker", std::string("?"))
              << " method=" << j.value("unlearn_method", std::string("?")) << "\n";
    std::cout << "metric_diff=" << format_float(j.value("metric_diff", 0.0))
              << " decision=" << j.value("verify_decision", std::string("?")) << "\n";
    if (j.contains("correlation_r") && !j["correlation_r"].is_null())
        std::cout << "correlation_r=" << format_float(j["correlation_r"].get<double>()) << "\n";
    if (j.contains("param_distance"))
        std::cout << "param_distance_euclidean="
                  << format_float(j["param_distance"].value("euclidean", 0.0)) << "\n";
    if (j.contains("membership"))
        std::cout << "membership_ratio="
                  << format_float(j["membership"].value("inferred_member_ratio", 0.0)) << "\n";

    // Optional marker replay against a stored parameter blob.
    if (!markers_path.empty() && !params_path.empty()) {
        std::ifstream mk(markers_path);
        if (!mk) throw ConfigError("cannot open " + markers_path);
        std::string text((std::istreambuf_iterator<char>(mk)), std::istreambuf_iterator<char>());
        MarkerSet markers = marker_from_json(text);
        RoundHistory hist = load_history(params_path);
        if (hist.checkpoints.empty()) throw ConfigError("history holds no checkpoints");
        ExperimentConfig cfg = config_from_json(j.at("config").dump());
        for (const auto& [round, params] : hist.checkpoints) {
            const double v = check_metric(cfg.model, params, markers, cfg.check);
            std::cout << "replayed round " << round << ": " << metric_name(markers.metric) << "="
                      << format_float(v) << "\n";
        }
    }
    return kExitOk;
}

int run_gen_data(const std::string& out_path, SyntheticConfig scfg, const std::string& idx_images,
                 const std::string& idx_labels, bool downscale) {
    Dataset ds;
    if (!idx_images.empty()) {
        ds = load_idx(idx_images, idx_labels, downscale);
    } else {
        ds = gen_synthetic(scfg);
    }
    save_cache(ds, out_path);
    std::cout << "wrote " << ds.size() << " samples (dim " << ds.dim() << ", " << ds.class_count
              << " classes) to " << out_path << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"federated unlearning and verification simulator"};
    app.require_subcommand(1);

    std::string config_path, out_dir, axis_name;
    std::vector<double> values;
    std::optional<std::uint64_t> seed_override;
    int jobs = 1;

    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option_function<std::uint64_t>(
            "--seed", [&](std::uint64_t s) { seed_override = s; }, "override the config seed");
    };

    auto* train = app.add_subcommand("train", "plain federated training run");
    train->add_option("config", config_path, "experiment config (JSON)")->required();
    train->add_option("--out", out_dir, "artifact directory");
    add_seed(train);

    auto* experiment = app.add_subcommand("experiment", "full marking/unlearning/checking pipeline");
    experiment->add_option("config", config_path, "experiment config (JSON)")->required();
    experiment->add_option("--out", out_dir, "artifact directory");
    add_seed(experiment);

    auto* sweep_cmd = app.add_subcommand("sweep", "run the experiment across an axis of values");
    sweep_cmd->add_option("config", config_path, "experiment config (JSON)")->required();
    sweep_cmd->add_option("--axis", axis_name,
                          "marking_round | trigger_size | transparency | n_select | dirichlet_alpha")
        ->required();
    sweep_cmd->add_option("--values", values, "axis values")->required()->delimiter(',');
    sweep_cmd->add_option("--out", out_dir, "artifact directory");
    sweep_cmd->add_option("--jobs", jobs, "parallel experiments");
    add_seed(sweep_cmd);

    std::string markers_path, params_path;
    auto* report = app.add_subcommand("report", "print diagnostics from a summary.json");
    report->add_option("summary", config_path, "summary.json from an experiment run")->required();
    report->add_option("--markers", markers_path, "markers.json to replay");
    report->add_option("--history", params_path, "history.vfhl with stored checkpoints");

    SyntheticConfig scfg;
    std::string gen_out, gen_idx_images, gen_idx_labels;
    bool gen_downscale = false;
    auto* gen = app.add_subcommand("gen-data", "write a dataset cache (synthetic or IDX)");
    gen->add_option("--out", gen_out, "output cache path")->required();
    gen->add_option("--classes", scfg.class_count);
    gen->add_option("--dim", scfg.feature_dim);
    gen->add_option("--per-class", scfg.per_class);
    gen->add_option("--spread", scfg.cluster_spread);
    gen->add_option("--rare-fraction", scfg.rare_cluster_fraction);
    gen->add_option("--gen-seed", scfg.seed);
    gen->add_option("--idx-images", gen_idx_images);
    gen->add_option("--idx-labels", gen_idx_labels);
    gen->add_flag("--downscale", gen_downscale);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*train) return run_train(config_path, seed_override, out_dir);
        if (*experiment) return run_experiment_cmd(config_path, seed_override, out_dir);
        if (*sweep_cmd) return run_sweep(config_path, axis_name, values, seed_override, out_dir, jobs);
        if (*report) return run_report(config_path, markers_path, params_path);
        if (*gen) return run_gen_data(gen_out, scfg, gen_idx_images, gen_idx_labels, gen_downscale);
    } catch (const MarkingInfeasible& e) {
        std::cerr << "marking infeasible: " << e.what() << "\n";
        return kExitMarkingInfeasible;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitConfig;
}
