#include "fedul/fed.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstring>
#include <fstream>
#include <thread>

#include "fedul/errors.hpp"

namespace fedul {

Aggregation aggregation_from_name(const std::string& name) {
    std::string n;
    for (char c : name) n.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (n == "fedavg") return Aggregation::kFedAvg;
    if (n == "krum") return Aggregation::kKrum;
    if (n == "median") return Aggregation::kMedian;
    throw ConfigError("unknown aggregation '" + name + "'");
}

std::string aggregation_name(Aggregation agg) {
    switch (agg) {
        case Aggregation::kFedAvg: return "fedavg";
        case Aggregation::kKrum: return "krum";
        case Aggregation::kMedian: return "median";
    }
    return "?";
}

void FLConfig::validate() const {
    if (n_select < 1 || n_select > n_total)
        throw ConfigError("need 1 <= n_select <= n_total");
    if (local_epochs < 0) throw ConfigError("local_epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (local_lr < 0 || global_lr < 0) throw ConfigError("learning rates must be >= 0");
    if (total_rounds < 1) throw ConfigError("total_rounds must be >= 1");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    if (aggregation == Aggregation::kKrum && n_select < 2 * krum_f + 3)
        throw ConfigError("krum needs n_select >= 2*f + 3 (got n_select=" +
                          std::to_string(n_select) + ", f=" + std::to_string(krum_f) + ")");
}

std::vector<int> RoundHistory::contribution_rounds(int participant, int before_round) const {
    std::vector<int> out;
    for (const RoundRecord& r : rounds) {
        if (r.round >= before_round) break;
        if (std::binary_search(r.selected.begin(), r.selected.end(), participant))
            out.push_back(r.round);
    }
    return out;
}

const VectorXd* RoundHistory::delta_of(int round, int participant) const {
    for (const RoundRecord& r : rounds) {
        if (r.round != round) continue;
        for (std::size_t i = 0; i < r.selected.size(); ++i)
            if (r.selected[i] == participant) return &r.deltas[i];
        return nullptr;
    }
    return nullptr;
}

VectorXd RoundHistory::mean_delta_excluding(int round, int participant) const {
    for (const RoundRecord& r : rounds) {
        if (r.round != round) continue;
        VectorXd sum;
        int n = 0;
        for (std::size_t i = 0; i < r.selected.size(); ++i) {
            if (r.selected[i] == participant) continue;
            if (n == 0)
                sum = r.deltas[i];
            else
                sum += r.deltas[i];
            ++n;
        }
        if (n == 0) return VectorXd();
        return sum / n;
    }
    throw LookupError("round " + std::to_string(round) + " not in history");
}

void RoundHistory::store_checkpoint(int round, const VectorXd& params) {
    checkpoints[round] = params;
}

const VectorXd& RoundHistory::fetch_checkpoint(int round) const {
    auto it = checkpoints.find(round);
    if (it == checkpoints.end())
        throw LookupError("no checkpoint stored for round " + std::to_string(round));
    return it->second;
}

bool RoundHistory::has_checkpoint(int round) const { return checkpoints.count(round) > 0; }

namespace {

void write_blob(std::ostream& out, const VectorXd& v) {
    const std::uint64_t len = static_cast<std::uint64_t>(v.size());
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(sizeof(double)) * v.size());
}

VectorXd read_blob(std::istream& in, const std::string& what) {
    std::uint64_t len = 0;
    if (!in.read(reinterpret_cast<char*>(&len), 8)) throw FormatError("truncated blob length in " + what);
    VectorXd v(static_cast<Eigen::Index>(len));
    if (!in.read(reinterpret_cast<char*>(v.data()),
                 static_cast<std::streamsize>(sizeof(double) * len)))
        throw FormatError("truncated blob body in " + what);
    return v;
}

void write_i32(std::ostream& out, std::int32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

std::int32_t read_i32(std::istream& in, const std::string& what) {
    std::int32_t v;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) throw FormatError("truncated int in " + what);
    return v;
}

}  // namespace

void save_history(const RoundHistory& history, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out.write("VFHL1", 5);
    write_i32(out, static_cast<std::int32_t>(history.rounds.size()));
    for (const RoundRecord& r : history.rounds) {
        write_i32(out, r.round);
        write_blob(out, r.global_before);
        write_i32(out, static_cast<std::int32_t>(r.selected.size()));
        for (int id : r.selected) write_i32(out, id);
        for (const VectorXd& d : r.deltas) write_blob(out, d);
        out.write(reinterpret_cast<const char*>(&r.update_norm), 8);
    }
    write_i32(out, static_cast<std::int32_t>(history.checkpoints.size()));
    for (const auto& [round, params] : history.checkpoints) {
        write_i32(out, round);
        write_blob(out, params);
    }
    if (!out) throw IoError("write failed: " + path);
}

RoundHistory load_history(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[5];
    if (!in.read(magic, 5) || std::memcmp(magic, "VFHL1", 5) != 0)
        throw FormatError(path + ": bad history magic");
    RoundHistory h;
    const int n = read_i32(in, path);
    h.rounds.resize(n);
    for (int i = 0; i < n; ++i) {
        RoundRecord& r = h.rounds[i];
        r.round = read_i32(in, path);
        r.global_before = read_blob(in, path);
        const int sel = read_i32(in, path);
        r.selected.resize(sel);
        for (int j = 0; j < sel; ++j) r.selected[j] = read_i32(in, path);
        r.deltas.resize(sel);
        for (int j = 0; j < sel; ++j) r.deltas[j] = read_blob(in, path);
        if (!in.read(reinterpret_cast<char*>(&r.update_norm), 8))
            throw FormatError(path + ": truncated update norm");
    }
    const int ckpts = read_i32(in, path);
    for (int i = 0; i < ckpts; ++i) {
        const int round = read_i32(in, path);
        h.checkpoints[round] = read_blob(in, path);
    }
    return h;
}

std::vector<int> select_participants(int n_total, int n_select, int round, std::uint64_t seed,
                                     std::optional<int> forced, std::optional<int> excluded) {
    if (n_select > n_total) throw ConfigError("cannot select more participants than exist");
    if (forced && excluded && *forced == *excluded)
        throw ConfigError("a participant cannot be both forced and excluded");
    Rng rng(stream_seed(seed, static_cast<std::uint64_t>(round), stream::kSelect));
    std::vector<int> chosen;
    if (!forced && !excluded) {
        chosen = rng.sample_without_replacement(n_total, n_select);
    } else {
        std::vector<int> pool;
        pool.reserve(n_total);
        for (int i = 0; i < n_total; ++i) {
            if (forced && i == *forced) continue;
            if (excluded && i == *excluded) continue;
            pool.push_back(i);
        }
        const int want = forced ? n_select - 1 : n_select;
        const int k = std::min<int>(want, static_cast<int>(pool.size()));
        for (int i : rng.sample_without_replacement(static_cast<int>(pool.size()), k))
            chosen.push_back(pool[i]);
        if (forced) chosen.push_back(*forced);
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

VectorXd local_train(const ModelSpec& spec, const VectorXd& global, const Dataset& local_data,
                     const FLConfig& cfg, Rng& rng) {
    if (local_data.size() == 0) throw ConfigError("participant has no local data");
    VectorXd params = global;
    const int n = local_data.size();
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        rng.shuffle(order);
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int take = std::min(cfg.batch_size, n - start);
            Batch batch;
            batch.inputs.resize(take, local_data.dim());
            batch.labels.resize(take);
            for (int i = 0; i < take; ++i) {
                batch.inputs.row(i) = local_data.features.row(order[start + i]);
                batch.labels[i] = local_data.labels[order[start + i]];
            }
            LossGrad lg = loss_and_grad(spec, params, batch);
            params = sgd_step(params, lg.grad, cfg.local_lr);
        }
    }
    return params - global;
}

VectorXd aggregate_fedavg(const VectorXd& global, const std::vector<VectorXd>& deltas,
                          double global_lr) {
    if (deltas.empty()) throw ConfigError("fedavg needs at least one delta");
    VectorXd sum = deltas[0];
    for (std::size_t i = 1; i < deltas.size(); ++i) {
        if (deltas[i].size() != sum.size()) throw ConfigError("fedavg delta length mismatch");
        sum += deltas[i];
    }
    return global + (global_lr / static_cast<double>(deltas.size())) * sum;
}

int krum_select_index(const std::vector<VectorXd>& deltas, int f) {
    const int m = static_cast<int>(deltas.size());
    if (m < 2 * f + 3)
        throw ConfigError("krum needs m >= 2f + 3 (m=" + std::to_string(m) +
                          ", f=" + std::to_string(f) + ")");
    // Pairwise squared distances, then each candidate scores the sum of its
    // m - f - 2 smallest.
    MatrixXd d2 = MatrixXd::Zero(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = i + 1; j < m; ++j) {
            const double d = (deltas[i] - deltas[j]).squaredNorm();
            d2(i, j) = d;
            d2(j, i) = d;
        }
    const int keep = m - f - 2;
    int best = 0;
    double best_score = std::numeric_limits<double>::infinity();
    for (int i = 0; i < m; ++i) {
        std::vector<double> row;
        row.reserve(m - 1);
        for (int j = 0; j < m; ++j)
            if (j != i) row.push_back(d2(i, j));
        std::sort(row.begin(), row.end());
        double score = 0.0;
        for (int k = 0; k < keep; ++k) score += row[k];
        if (score < best_score) {  // strict: ties keep the lowest index
            best_score = score;
            best = i;
        }
    }
    return best;
}

VectorXd aggregate_krum(const VectorXd& global, const std::vector<VectorXd>& deltas,
                        int f, double global_lr) {
    return global + global_lr * deltas[static_cast<std::size_t>(krum_select_index(deltas, f))];
}

VectorXd aggregate_median(const VectorXd& global, const std::vector<VectorXd>& deltas,
                          double global_lr) {
    if (deltas.empty()) throw ConfigError("median needs at least one delta");
    const int m = static_cast<int>(deltas.size());
    const Eigen::Index dim = deltas[0].size();
    VectorXd med(dim);
    std::vector<double> col(m);
    for (Eigen::Index d = 0; d < dim; ++d) {
        for (int i = 0; i < m; ++i) col[static_cast<std::size_t>(i)] = deltas[i][d];
        std::sort(col.begin(), col.end());
        med[d] = (m % 2 == 1) ? col[m / 2] : 0.5 * (col[m / 2 - 1] + col[m / 2]);
    }
    return global + global_lr * med;
}

void run_round(FLState& state, const ModelSpec& spec, const Dataset& data,
               const Partition& partition, const FLConfig& cfg, const RoundHooks& hooks) {
    if (state.round >= cfg.total_rounds) throw ConfigError("round loop past total_rounds");
    const int t = state.round;

    std::vector<int> selected =
        select_participants(cfg.n_total, cfg.n_select, t, cfg.seed, hooks.forced_participant,
                            hooks.excluded_participant);

    RoundRecord rec;
    rec.round = t;
    rec.global_before = state.global;
    rec.selected = selected;
    rec.deltas.resize(selected.size());

    auto train_one = [&](std::size_t slot) {
        const int pid = selected[slot];
        if (hooks.replace_delta) {
            if (auto replaced = hooks.replace_delta(t, pid, state.global)) {
                rec.deltas[slot] = std::move(*replaced);
                return;
            }
        }
        Dataset local = data.subset(partition.samples_of(pid));
        Rng rng(stream_seed(cfg.seed, static_cast<std::uint64_t>(t), stream::kLocalTrain,
                            static_cast<std::uint64_t>(pid)));
        try {
            rec.deltas[slot] = local_train(spec, state.global, local, cfg, rng);
        } catch (const NumericError& e) {
            throw NumericError("round " + std::to_string(t) + ", participant " +
                               std::to_string(pid) + ": " + e.what());
        }
    };

    if (cfg.threads > 1 && selected.size() > 1) {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        const int nthreads = std::min<int>(cfg.threads, static_cast<int>(selected.size()));
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(nthreads));
        for (int w = 0; w < nthreads; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = next.fetch_add(1); i < selected.size(); i = next.fetch_add(1))
                        train_one(i);
                } catch (...) {
                    errors[static_cast<std::size_t>(w)] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    } else {
        for (std::size_t i = 0; i < selected.size(); ++i) train_one(i);
    }

    // Aggregation consumes a working copy; history keeps the raw uploads.
    std::vector<VectorXd> working = rec.deltas;
    if (hooks.transform_deltas) hooks.transform_deltas(t, selected, working, state.global);

    VectorXd next_global = state.global;
    if (!working.empty()) {
        switch (cfg.aggregation) {
            case Aggregation::kFedAvg:
                next_global = aggregate_fedavg(state.global, working, cfg.global_lr);
                break;
            case Aggregation::kKrum:
                next_global = aggregate_krum(state.global, working, cfg.krum_f, cfg.global_lr);
                break;
            case Aggregation::kMedian:
                next_global = aggregate_median(state.global, working, cfg.global_lr);
                break;
        }
    }
    if (hooks.post_aggregate) {
        if (auto extra = hooks.post_aggregate(t)) next_global += *extra;
    }
    check_finite(next_global, "global parameters after round " + std::to_string(t));

    rec.update_norm = (next_global - state.global).norm();
    state.global = next_global;
    if (t % cfg.checkpoint_every == 0) state.history.store_checkpoint(t, rec.global_before);
    state.history.rounds.push_back(std::move(rec));
    state.round = t + 1;
}

}  // namespace fedul
