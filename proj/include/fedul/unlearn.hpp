#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fedul/fed.hpp"
#include "fedul/nn.hpp"

namespace fedul {

// NT/NF are the do-nothing baselines (stay / leave silently); the other seven
// actively transform what the server aggregates.
enum class UnlearnMethod { kNT, kNF, kRT, kRTB, kCGS, kGGS, kIGS, kDP, kS2U };

UnlearnMethod unlearn_from_name(const std::string& name);  // case-insensitive
std::string unlearn_name(UnlearnMethod m);

// One-step methods touch exactly one round's deltas; subtraction methods
// inject a correction for exactly `unlearn_rounds` rounds; retraining methods
// rebuild the global model from an earlier point.
bool is_one_step(UnlearnMethod m);
bool is_subtraction(UnlearnMethod m);
bool is_retraining(UnlearnMethod m);

struct UnlearnConfig {
    UnlearnMethod method = UnlearnMethod::kNF;
    double lambda = 0.01;       // subtraction weight
    double alpha = 0.1;         // S2U down-scale, in (0,1)
    double beta = 1.0;          // S2U up-scale, >= 1
    double epsilon = 0.1;       // DP budget
    double dp_noise_std = -1;   // <0: default ||delta||/(eps*sqrt(dim)); 0: disabled
    int breakpoint_round = -1;  // RTB start; <0 resolves to T_enabled
    int unlearn_rounds = 0;     // 0 resolves to |Omega| capped at t_leave - t_u
    double ggs_ema_decay = 0.5;
    int ggs_fit_iters = 25;

    void validate() const;
};

double dp_default_noise_std(const VectorXd& delta, double epsilon);

// e^eps * delta + Gaussian noise. noise_std < 0 selects the default scale,
// which grows as eps shrinks.
VectorXd dp_transform(const VectorXd& delta, double epsilon, double noise_std, Rng& rng);

// Scale the leaver's delta by alpha and replace every other selected delta by
// beta * (w_enabled - w_current). One-step, applied at t_u only.
void s2u_transform(std::vector<VectorXd>& deltas, const std::vector<int>& selected, int leaver,
                   double alpha, double beta, const VectorXd& w_enabled,
                   const VectorXd& w_current);

// Append-only store of per-round parameter vectors. The subtraction methods
// read their history back through this (their storage footprint and load time
// are part of what the cost accounting measures).
class VectorSpool {
public:
    explicit VectorSpool(std::string path) : path_(std::move(path)) {}
    void append(int round, const VectorXd& v);
    std::vector<std::pair<int, VectorXd>> read_all() const;
    std::uint64_t bytes() const { return bytes_; }
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::uint64_t bytes_ = 0;
};

// Dummy-gradient generator: EMA over the stored deltas plus a per-layer scale
// fitted by gradient steps to reconstruct the most recent one.
struct GgsGenerator {
    VectorXd ema;
    VectorXd layer_scales;
    VectorXd output;  // per-layer scaled EMA
    double reconstruction_error = 0.0;
};
GgsGenerator fit_ggs(const ModelSpec& spec, const std::vector<VectorXd>& deltas,
                     double ema_decay, int fit_iters);

struct SubtractionPlan {
    UnlearnMethod method = UnlearnMethod::kIGS;
    double lambda = 0.0;
    int start_round = 0;
    int rounds = 0;  // 0 = nothing to do (empty Omega)
    std::vector<int> omega;
    std::vector<VectorXd> leaver_deltas;          // aligned with omega
    std::vector<double> historical_other_norms;   // aligned with omega (CGS)
    VectorXd igs_term;                            // precomputed constant term
    VectorXd ggs_term;

    bool active(int round) const { return round >= start_round && round < start_round + rounds; }
    // Additive correction for this round, applied after aggregation scaling.
    // others_mean_now feeds the CGS calibration ratio; null means no fresh
    // uploads this round (calibration skipped).
    VectorXd term(int round, const VectorXd* others_mean_now) const;
};

// Loads the stored history back from the spools and prepares the schedule
// [t_u, t_u + unlearn_rounds). Empty Omega yields rounds = 0 (no-op).
SubtractionPlan build_subtraction_plan(const ModelSpec& spec, const UnlearnConfig& cfg,
                                       int t_u, int t_leave, const VectorSpool& leaver_spool,
                                       const VectorSpool* others_spool);

// Replays rounds [from_round, t_u) from start_params with the leaver excluded
// from selection, consuming the same per-round streams as the original run.
FLState retrain_without(const ModelSpec& spec, const Dataset& data, const Partition& partition,
                        const FLConfig& cfg, int leaver, int from_round,
                        const VectorXd& start_params, int t_u);

}  // namespace fedul
