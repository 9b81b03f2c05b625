#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedul/data.hpp"
#include "fedul/nn.hpp"
#include "fedul/rng.hpp"

namespace fedul {

enum class Aggregation { kFedAvg, kKrum, kMedian };

Aggregation aggregation_from_name(const std::string& name);
std::string aggregation_name(Aggregation agg);

struct FLConfig {
    int n_total = 100;
    int n_select = 10;
    int local_epochs = 1;
    int batch_size = 32;
    double local_lr = 0.01;
    double global_lr = 1.0;
    int total_rounds = 60;
    Aggregation aggregation = Aggregation::kFedAvg;
    int krum_f = 1;
    int checkpoint_every = 1;  // store w_t every k rounds (plus round 0)
    int threads = 1;           // local training fan-out; result is identical either way
    std::uint64_t seed = 0;

    void validate() const;
};

// Everything the server saw in one round: the model it handed out, who was
// selected, and the raw uploaded deltas (pre any unlearning transformation).
struct RoundRecord {
    int round = 0;
    VectorXd global_before;
    std::vector<int> selected;       // ascending participant ids
    std::vector<VectorXd> deltas;    // aligned with `selected`
    double update_norm = 0.0;        // ||w_{t+1} - w_t||
};

struct RoundHistory {
    std::vector<RoundRecord> rounds;
    std::map<int, VectorXd> checkpoints;

    // Omega(a): rounds (strictly below `before_round`) whose aggregate
    // consumed participant a's upload.
    std::vector<int> contribution_rounds(int participant, int before_round) const;
    const VectorXd* delta_of(int round, int participant) const;
    VectorXd mean_delta_excluding(int round, int participant) const;

    void store_checkpoint(int round, const VectorXd& params);
    const VectorXd& fetch_checkpoint(int round) const;
    bool has_checkpoint(int round) const;
};

// Append-only binary history log, magic "VFHL1"; parameter blobs are
// length-prefixed.
void save_history(const RoundHistory& history, const std::string& path);
RoundHistory load_history(const std::string& path);

struct FLState {
    int round = 0;
    VectorXd global;
    RoundHistory history;
    // Per-round per-sample losses of the tracked participant's local data
    // (feeds forgettable-memory marking).
    std::vector<VectorXd> tracked_losses;
};

// Uniform sample without replacement, deterministic per (seed, round).
// `forced` is placed in the set if absent; `excluded` never appears.
std::vector<int> select_participants(int n_total, int n_select, int round, std::uint64_t seed,
                                     std::optional<int> forced = std::nullopt,
                                     std::optional<int> excluded = std::nullopt);

// T_local epochs of minibatch SGD from `global`; returns the accumulated
// update w_local - w_global.
VectorXd local_train(const ModelSpec& spec, const VectorXd& global, const Dataset& local_data,
                     const FLConfig& cfg, Rng& rng);

VectorXd aggregate_fedavg(const VectorXd& global, const std::vector<VectorXd>& deltas,
                          double global_lr);
// Single-Krum: returns global + lr * (the delta with the smallest sum of its
// m-f-2 nearest squared distances). Ties break to the lowest index.
VectorXd aggregate_krum(const VectorXd& global, const std::vector<VectorXd>& deltas,
                        int f, double global_lr);
int krum_select_index(const std::vector<VectorXd>& deltas, int f);
VectorXd aggregate_median(const VectorXd& global, const std::vector<VectorXd>& deltas,
                          double global_lr);

// Hooks let the mechanism layer splice marking/unlearning into a round
// without the round loop knowing about either.
struct RoundHooks {
    // Replaces a participant's locally trained delta (marking).
    std::function<std::optional<VectorXd>(int round, int participant, const VectorXd& global)>
        replace_delta;
    // Mutates the working set of deltas before aggregation (one-step
    // unlearning, adversarial replay).
    std::function<void(int round, const std::vector<int>& selected, std::vector<VectorXd>& deltas,
                       const VectorXd& global)>
        transform_deltas;
    // Extra term added to the global after aggregation scaling (gradient
    // subtraction methods).
    std::function<std::optional<VectorXd>(int round)> post_aggregate;
    std::optional<int> forced_participant;
    std::optional<int> excluded_participant;
};

// One communication round: select, train, (hooks), aggregate, record.
void run_round(FLState& state, const ModelSpec& spec, const Dataset& data,
               const Partition& partition, const FLConfig& cfg, const RoundHooks& hooks = {});

}  // namespace fedul
