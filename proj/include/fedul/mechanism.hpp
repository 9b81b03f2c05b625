#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fedul/data.hpp"
#include "fedul/fed.hpp"
#include "fedul/report.hpp"
#include "fedul/unlearn.hpp"
#include "fedul/verify.hpp"

namespace fedul {

// Schedule of the marking -> unlearning -> checking -> leaving pipeline.
// Invariant: 0 < t_enabled <= t_m < t_u < t_leave <= total_rounds.
struct Timeline {
    int t_enabled = 20;
    int t_m = 30;
    int t_u = 35;
    int t_leave = 55;

    void validate(int total_rounds) const;
};

struct AttackConfig {
    bool enabled = false;
    int capture_round = -1;  // the attacker snapshots the distributed global here
    int replay_round = -1;   // and replays it here through its own update slot
    int attacker = -1;       // -1: first non-leaver participant

    void validate(int total_rounds, int leaver) const;
};

struct MarkParams {
    double em_kappa = 0.1;
    double fm_ratio = 0.1;
    int fm_window = 10;
    TriggerSpec trigger;
    int bn_eval_count = 100;
    // Backdoor injection gets its own schedule (the trigger association is
    // harder to plant than a low-loss mark); zero iters falls back to the
    // shared tuning.
    MarkTuning bn_tuning{0, 0.0};
    int me_bits = 64;
    double me_penalty = 0.05;
    std::uint64_t me_seed = 1234;
    double bf_gamma = 0.01;
    PgdConfig pgd;
    MarkTuning tuning;
    int min_markers = 2;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;

    ModelSpec model{{64, 32, 10}};
    std::string data_source = "synthetic";  // synthetic | idx | cache
    SyntheticConfig data;
    int test_per_class = 40;  // synthetic held-out test split
    std::string idx_images, idx_labels;
    bool idx_downscale = false;
    std::string cache_path;
    double test_fraction = 0.2;  // for idx/cache sources

    std::string partition_kind = "iid";  // iid | dirichlet
    double dirichlet_alpha = 0.5;

    FLConfig fl;
    Timeline timeline;
    // Negative: auto-pick the participant owning the most single-class rare
    // samples (synthetic data), i.e. the most unique local memory.
    int leaver = -1;

    MarkerKind marker = MarkerKind::kEM;
    MarkParams mark;
    UnlearnConfig unlearn;
    CheckConfig check;
    AttackConfig attack;

    bool log_influence = true;
    int correlation_halfwidth = 10;
    std::string out_dir;  // empty: no artifacts written

    void validate() const;
};

std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::string& path);

struct RoundLog {
    int round = 0;
    std::string event;  // "", "mark", "unlearn", "attack", "decision"
    double test_acc = 0.0, test_loss = 0.0;
    double leave_acc = 0.0, leave_loss = 0.0, leave_kl = 0.0;
    std::optional<double> leave_influence;
    std::optional<double> marker_bound;  // the marker's own checking metric
    std::optional<double> marker_acc, marker_loss, marker_kl, marker_influence;
};

// Wall-clock figures live apart from the deterministic log so that two runs
// of the same (config, seed) stay byte-identical.
struct CostReport {
    double mark_seconds = 0.0;
    double unlearn_seconds = 0.0;
    double baseline_round_seconds = 0.0;  // mean cost of a plain round
};

struct ExperimentLog {
    ExperimentConfig config;
    std::vector<RoundLog> rounds;  // exactly total_rounds entries

    Metric metric = Metric::kLoss;
    // The quantitative unlearning signal: baseline is the settled
    // post-marking reading, current the reading right after the unlearning
    // round (both median-smoothed for backdoor markers).
    double baseline = 0.0;
    double current = 0.0;
    double diff = 0.0;  // |baseline - current|
    // The leave decision compares the baseline against the reading at
    // t_leave, signed by the per-metric convention.
    double decision_reading = 0.0;
    double signed_diff = 0.0;
    double threshold = 0.0;
    Decision decision = Decision::kDistrust;
    bool marking_failed = false;
    bool attack_flagged = false;

    std::optional<double> correlation_r;
    DistanceReport param_distance_report;  // w_{t_m} vs w_{t_leave}
    MembershipReport membership;

    std::uint64_t unlearn_storage_bytes = 0;
    std::uint64_t marker_storage_bytes = 0;

    CostReport costs;  // excluded from emitted deterministic artifacts
};

// First round where the update norms over the trailing window drop below
// tol * the first round's norm; `fallback` when that never happens.
struct EnabledEstimate {
    int round = 0;
    bool converged = false;  // false: fallback was returned
};
EnabledEstimate estimate_enabled_round(const RoundHistory& history, int window, double tol,
                                       int fallback);

// The full pipeline: free stage, marking at t_m, unlearning from t_u,
// checking through t_leave, decision, diagnostics. Deterministic per
// (config, seed); artifacts land in config.out_dir when set.
ExperimentLog run_experiment(const ExperimentConfig& config);

enum class SweepAxis { kMarkingRound, kTriggerSize, kTransparency, kNSelect, kDirichletAlpha };
SweepAxis sweep_axis_from_name(const std::string& name);

// One experiment per value, sharing the base seed. Values are applied to the
// axis; the marking-round axis rescales t_u/t_leave into the remaining
// budget proportionally.
std::vector<ExperimentLog> sweep(const ExperimentConfig& base, SweepAxis axis,
                                 const std::vector<double>& values, int jobs = 1);

ExperimentConfig apply_sweep_value(const ExperimentConfig& base, SweepAxis axis, double value);

}  // namespace fedul
