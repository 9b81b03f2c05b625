#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedul/data.hpp"
#include "fedul/nn.hpp"

namespace fedul {

enum class MarkerKind { kEM, kFM, kBN, kME, kBF };
enum class Metric { kAccuracy, kLoss, kLossVariance, kKl, kInfluence, kBitMatchRate };

MarkerKind marker_from_name(const std::string& name);
std::string marker_name(MarkerKind k);
std::string metric_name(Metric m);

// Each marker kind is checked with one fixed metric: EM by loss, FM by loss
// variance, BN/BF by accuracy, ME by bit match rate.
Metric bound_metric(MarkerKind kind);

struct MarkerSet {
    MarkerKind kind = MarkerKind::kEM;
    Metric metric = Metric::kLoss;  // always bound_metric(kind); set at construction
    // Sample-based kinds.
    MatrixXd inputs;
    VectorXi check_labels;     // relabeled for EM, backdoor target for BN, true otherwise
    VectorXi original_labels;
    std::vector<int> source_indices;  // positions in the leaver's local set, when drawn from it
    // Model-embedding payload.
    std::vector<std::uint8_t> bits;
    std::uint64_t projection_seed = 0;
    int embed_layer = 0;

    int size() const { return static_cast<int>(inputs.rows()); }
};

std::string marker_to_json(const MarkerSet& m);
MarkerSet marker_from_json(const std::string& text);

// Shared fine-tuning knobs for the marking step (full-batch gradient steps,
// deterministic).
struct MarkTuning {
    int ft_iters = 200;
    double ft_lr = 0.05;
};

struct MarkingOutcome {
    VectorXd marked_delta;  // what the leaver uploads instead of its usual update
    MarkerSet markers;
    // The marked fine-tuning set (poisoned/relabeled/augmented). The leaver
    // keeps fine-tuning against it in every marking-window round, so the mark
    // accumulates in the global model across [t_m, t_u).
    MatrixXd train_inputs;
    VectorXi train_labels;
};

// Re-run the marking fine-tune against the fixed marker definition
// established at t_m. The leaver keeps its local model across the window:
// the fine-tune warm-starts from global + warm_delta (its previous marked
// state rebased onto the fresh global), so successive uploads stay aligned
// and accumulate through aggregation.
VectorXd refresh_mark(const ModelSpec& spec, const VectorXd& global, const VectorXd& warm_delta,
                      const MarkingOutcome& outcome, const Dataset& local_data,
                      double me_penalty_weight, const MarkTuning& tuning);

struct CheckConfig {
    // Decision thresholds per bound metric; variance is relative to baseline.
    double delta_accuracy = 0.20;
    double delta_loss = 0.5;
    double delta_variance_factor = 2.0;
    double delta_kl = 0.5;
    double delta_bits = 0.2;
    int bn_median_width = 3;  // median smoothing for backdoor readings
    double influence_damping = 0.1;
    int influence_max_iters = 40;
    double influence_tol = 1e-3;
};

VectorXd finetune(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs,
                  const VectorXi& labels, const MarkTuning& tuning);

// Erroneous-memory marking: pick the top kappa fraction of high-loss samples,
// keep the majority original class, relabel to the model's favourite wrong
// answer and fine-tune it in.
MarkingOutcome mark_em(const ModelSpec& spec, const VectorXd& local_params,
                       const Dataset& local_data, double kappa, const MarkTuning& tuning,
                       int min_markers = 2);

// Forgettable-memory marking: highest per-sample loss variance over the
// trailing rounds of `loss_history` (rows = rounds, cols = samples).
MarkingOutcome mark_fm(const ModelSpec& spec, const VectorXd& local_params,
                       const MatrixXd& loss_history, const Dataset& local_data, double ratio,
                       const MarkTuning& tuning);

// Backdoor marking: patch + relabel a poison fraction, fine-tune, and keep a
// held-out triggered evaluation set as the markers.
MarkingOutcome mark_bn(const ModelSpec& spec, const VectorXd& local_params,
                       const Dataset& local_data, const TriggerSpec& trigger,
                       const MarkTuning& tuning, int eval_count, Rng& rng);

// Parameter-embedding marking: sigmoid of a fixed random projection of the
// first hidden layer's weights is pushed toward the payload bits.
MarkingOutcome mark_me(const ModelSpec& spec, const VectorXd& local_params,
                       const Dataset& local_data, int bit_count, std::uint64_t projection_seed,
                       double penalty_weight, const MarkTuning& tuning);

struct PgdConfig {
    int steps = 20;
    double budget = 0.1;      // L-inf radius as a fraction of the feature range
    double step_frac = 2.5;   // step = step_frac * budget / steps
    int bisect_iters = 30;
    int min_markers = 2;
};

// Boundary-fingerprint marking: PGD walks each sample toward the decision
// boundary; points whose top-2 probability gap is within gamma become
// markers, then the model is fine-tuned to classify them correctly.
MarkingOutcome mark_bf(const ModelSpec& spec, const VectorXd& local_params,
                       const Dataset& local_data, double gamma, const PgdConfig& pgd,
                       const MarkTuning& tuning);

// --- checking metrics ---

double metric_accuracy(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs,
                       const VectorXi& labels);
double metric_loss(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs,
                   const VectorXi& labels);
// Population variance of the per-sample losses.
double metric_loss_variance(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs,
                            const VectorXi& labels);
// Mean over the set of sum_c p_c log(p_c * C): zero exactly at the uniform
// prediction, positive otherwise.
double metric_kl_to_uniform(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs);
// Mean self-influence g^T (H + damping I)^-1 g over the set, solved by CG.
double metric_influence(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs,
                        const VectorXi& labels, const CheckConfig& cfg);
double metric_bit_match_rate(const ModelSpec& spec, const VectorXd& params,
                             const std::vector<std::uint8_t>& bits, std::uint64_t projection_seed,
                             int embed_layer);

// Bound-metric reading for a marker set against a model.
double check_metric(const ModelSpec& spec, const VectorXd& params, const MarkerSet& markers,
                    const CheckConfig& cfg);
double check_metric(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs,
                    const VectorXi& labels, Metric metric, const CheckConfig& cfg);

// Mean over samples of the per-sample loss variance across the window's
// rounds (rows = rounds). Single-row windows fall back to the cross-sectional
// variance.
double trailing_variance(const MatrixXd& window_losses);

double median_of(std::vector<double> values);

// |baseline - current|; `current` for backdoor markers is the median of the
// trailing readings.
double metric_diff(double baseline, double current);
double metric_diff_smoothed(double baseline, const std::vector<double>& trailing_window);

// Signed improvement with the per-metric convention: metrics that unlearning
// pushes up (loss, variance, influence) use current - baseline, the rest use
// baseline - current.
double signed_improvement(Metric metric, double baseline, double current);

double decision_threshold(Metric metric, const CheckConfig& cfg, double baseline);

enum class Decision { kAssuredPrivacy, kDistrust };
std::string decision_name(Decision d);

// assured_privacy iff the signed improvement reaches the threshold.
Decision verify_decision(double signed_diff, double threshold);

// Pearson correlation; nullopt when either series has zero variance.
std::optional<double> correlation_report(const std::vector<double>& marker_series,
                                         const std::vector<double>& leaving_series);

}  // namespace fedul
