#include "fedul/mechanism.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <thread>

#include "fedul/errors.hpp"
#include "json.hpp"

namespace fedul {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

constexpr int kFmTrailingWindow = 3;  // rounds feeding the variance reading
constexpr int kTimedReps = 3;         // min-of-k timing for sub-millisecond calls

std::string make_spool_dir(std::uint64_t seed) {
    static std::atomic<std::uint64_t> counter{0};
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() /
                   ("fedul_spool_" + std::to_string(::getpid()) + "_" + std::to_string(seed) + "_" +
                    std::to_string(counter.fetch_add(1)));
    fs::create_directories(dir);
    return dir.string();
}

struct SpoolDirGuard {
    std::string dir;
    ~SpoolDirGuard() {
        std::error_code ec;
        std::filesystem::remove_all(dir, ec);
    }
};

}  // namespace

void Timeline::validate(int total_rounds) const {
    if (!(0 < t_enabled && t_enabled <= t_m && t_m < t_u && t_u < t_leave &&
          t_leave <= total_rounds))
        throw ConfigError("timeline must satisfy 0 < t_enabled <= t_m < t_u < t_leave <= total_rounds");
}

void AttackConfig::validate(int total_rounds, int leaver) const {
    if (!enabled) return;
    if (capture_round < 0 || replay_round <= capture_round || replay_round >= total_rounds)
        throw ConfigError("attack needs 0 <= capture_round < replay_round < total_rounds");
    if (attacker >= 0 && leaver >= 0 && attacker == leaver)
        throw ConfigError("the attacker must differ from the leaver");
}

void ExperimentConfig::validate() const {
    model.validate();
    fl.validate();
    timeline.validate(fl.total_rounds);
    unlearn.validate();
    if (leaver >= fl.n_total) throw ConfigError("leaver id out of range");  // <0: auto-pick
    attack.validate(fl.total_rounds, leaver);
    if (attack.enabled && unlearn.method == UnlearnMethod::kNT)
        throw ConfigError("the replay attack scenario needs a leaving method, not NT");
    if (data_source != "synthetic" && data_source != "idx" && data_source != "cache")
        throw ConfigError("data_source must be synthetic, idx or cache");
    if (partition_kind != "iid" && partition_kind != "dirichlet")
        throw ConfigError("partition_kind must be iid or dirichlet");
    if (unlearn.breakpoint_round >= 0 && unlearn.breakpoint_round > timeline.t_u)
        throw ConfigError("rtb breakpoint must not exceed t_u");
}

EnabledEstimate estimate_enabled_round(const RoundHistory& history, int window, double tol,
                                       int fallback) {
    if (window < 1) throw ConfigError("window must be >= 1");
    const int n = static_cast<int>(history.rounds.size());
    if (n < window) throw ConfigError("fewer rounds than the detection window");
    const double ref = history.rounds.front().update_norm;
    for (int t = window - 1; t < n; ++t) {
        double worst = 0.0;
        for (int k = t - window + 1; k <= t; ++k)
            worst = std::max(worst, history.rounds[static_cast<std::size_t>(k)].update_norm);
        if (worst < tol * ref) return {t, true};
    }
    return {fallback, false};
}

namespace {

void build_datasets(const ExperimentConfig& cfg, Dataset& train, Dataset& test) {
    if (cfg.data_source == "synthetic") {
        train = gen_synthetic(cfg.data);
        SyntheticConfig tcfg = cfg.data;
        tcfg.per_class = cfg.test_per_class;
        tcfg.sample_stream = 1;  // same class geometry, fresh draws
        test = gen_synthetic(tcfg);
        return;
    }
    Dataset full = cfg.data_source == "idx"
                       ? load_idx(cfg.idx_images, cfg.idx_labels, cfg.idx_downscale)
                       : load_cache(cfg.cache_path);
    std::vector<int> order(full.size());
    for (int i = 0; i < full.size(); ++i) order[i] = i;
    Rng rng(stream_seed(cfg.seed, 0, stream::kData, 2));
    rng.shuffle(order);
    const int test_count = static_cast<int>(cfg.test_fraction * full.size());
    std::vector<int> test_idx(order.begin(), order.begin() + test_count);
    std::vector<int> train_idx(order.begin() + test_count, order.end());
    train = full.subset(train_idx);
    test = full.subset(test_idx);
}

// Default leaver for synthetic data: the participant holding the most rare
// samples of a single class (unique memory worth verifying), preferring the
// one with the fewest rare samples overall so the rest of its data stays
// ordinary. Ties resolve to the lowest id.
int pick_leaver(const ExperimentConfig& cfg, const Dataset& train, const Partition& part) {
    if (cfg.leaver >= 0) return cfg.leaver;
    if (cfg.data_source != "synthetic") return 0;
    const int per_class = cfg.data.per_class;
    const int rare_per_class =
        static_cast<int>(std::lround(cfg.data.rare_cluster_fraction * per_class));
    if (rare_per_class == 0) return 0;
    int best = 0, best_count = -1, best_total = std::numeric_limits<int>::max();
    for (int p = 0; p < part.participants; ++p) {
        std::map<int, int> per_class_rares;
        int total = 0;
        for (int i : part.samples_of(p)) {
            if (i % per_class < rare_per_class) {
                ++per_class_rares[train.labels[i]];
                ++total;
            }
        }
        int top = 0;
        for (const auto& [cls, count] : per_class_rares) top = std::max(top, count);
        if (top > best_count || (top == best_count && total < best_total)) {
            best_count = top;
            best_total = total;
            best = p;
        }
    }
    return best;
}

MarkTuning effective_tuning(const ExperimentConfig& cfg) {
    if (cfg.marker == MarkerKind::kBN && cfg.mark.bn_tuning.ft_iters > 0)
        return cfg.mark.bn_tuning;
    return cfg.mark.tuning;
}

MarkingOutcome dispatch_mark(const ExperimentConfig& cfg, const ModelSpec& spec,
                             const VectorXd& global, const Dataset& leaver_data,
                             const MatrixXd& tracked, int t_m) {
    const MarkParams& mp = cfg.mark;
    switch (cfg.marker) {
        case MarkerKind::kEM:
            return mark_em(spec, global, leaver_data, mp.em_kappa, mp.tuning, mp.min_markers);
        case MarkerKind::kFM: {
            const int window = std::min(mp.fm_window, t_m);
            MatrixXd hist = tracked.middleRows(t_m - window, window);
            return mark_fm(spec, global, hist, leaver_data, mp.fm_ratio, mp.tuning);
        }
        case MarkerKind::kBN: {
            Rng rng(stream_seed(cfg.seed, static_cast<std::uint64_t>(t_m), stream::kMarking,
                                static_cast<std::uint64_t>(cfg.leaver)));
            return mark_bn(spec, global, leaver_data, mp.trigger, effective_tuning(cfg),
                           mp.bn_eval_count, rng);
        }
        case MarkerKind::kME:
            return mark_me(spec, global, leaver_data, mp.me_bits, mp.me_seed, mp.me_penalty,
                           mp.tuning);
        case MarkerKind::kBF: {
            PgdConfig pgd = mp.pgd;
            pgd.min_markers = std::max(pgd.min_markers, mp.min_markers);
            return mark_bf(spec, global, leaver_data, mp.bf_gamma, pgd, mp.tuning);
        }
    }
    throw ConfigError("unknown marker kind");
}

}  // namespace

ExperimentLog run_experiment(const ExperimentConfig& config_in) {
    ExperimentConfig config = config_in;
    // Resolve deferred defaults.
    if (config.unlearn.breakpoint_round < 0) config.unlearn.breakpoint_round = config.timeline.t_enabled;
    config.fl.seed = config.seed;
    if (config.data_source == "synthetic") config.data.seed = config.seed;
    config.validate();

    const Timeline& tl = config.timeline;
    const int T = config.fl.total_rounds;
    const UnlearnMethod method = config.unlearn.method;
    const int decision_round = std::min(tl.t_leave, T - 1);

    Dataset train, test;
    build_datasets(config, train, test);
    const ModelSpec& spec = config.model;
    if (spec.input_dim() != train.dim())
        throw ConfigError("model input dim does not match the dataset");

    Partition part = config.partition_kind == "iid"
                         ? partition_iid(train, config.fl.n_total, config.seed)
                         : partition_dirichlet(train, config.fl.n_total, config.dirichlet_alpha,
                                               config.seed);
    const int leaver = pick_leaver(config, train, part);
    config.leaver = leaver;
    if (config.attack.enabled && config.attack.attacker < 0)
        config.attack.attacker = leaver == 0 ? 1 : 0;
    if (config.attack.enabled && config.attack.attacker == leaver)
        throw ConfigError("the attacker must differ from the leaver");
    Dataset leaver_data = train.subset(part.samples_of(leaver));
    if (leaver_data.size() == 0) throw ConfigError("the leaver holds no data");

    SpoolDirGuard spool_guard{make_spool_dir(config.seed)};
    VectorSpool leaver_spool(spool_guard.dir + "/leaver.bin");
    VectorSpool others_spool(spool_guard.dir + "/others_mean.bin");
    VectorSpool ckpt_spool(spool_guard.dir + "/checkpoints.bin");

    ExperimentLog log;
    log.config = config;
    log.config.out_dir.clear();  // artifact placement is not part of the experiment identity

    FLState st;
    {
        Rng rng(stream_seed(config.seed, 0, stream::kInit));
        st.global = init_params(spec, rng);
    }

    MarkingOutcome marking;
    bool marked = false;
    VectorXd last_marked_delta;  // the leaver's local marked state, carried across the window
    std::vector<std::optional<double>> bound(static_cast<std::size_t>(T));
    std::map<int, VectorXd> marker_losses;  // per-round per-marker losses (FM trailing window)
    MatrixXd tracked = MatrixXd::Zero(T, leaver_data.size());

    SubtractionPlan plan;
    bool plan_built = false;
    VectorXd captured;
    bool have_capture = false;
    VectorXd pre_unlearn_global;  // model entering the unlearning round, before any replacement

    Batch test_batch{test.features, test.labels};
    Batch leave_batch{leaver_data.features, leaver_data.labels};

    double baseline_round_total = 0.0;
    int baseline_round_count = 0;

    for (int t = 0; t < T; ++t) {
        const bool one_step_now = is_one_step(method) && t == tl.t_u;
        const bool leaver_active =
            method == UnlearnMethod::kNT ? true : (t < tl.t_u || one_step_now);
        const int last_forced = method == UnlearnMethod::kNT
                                    ? tl.t_leave
                                    : (is_one_step(method) ? tl.t_u : tl.t_u - 1);

        RoundHooks hooks;
        if (leaver_active && t >= tl.t_m && t <= last_forced) hooks.forced_participant = leaver;
        if (!leaver_active && method != UnlearnMethod::kNT) hooks.excluded_participant = leaver;

        const bool attack_now = config.attack.enabled && t == config.attack.replay_round;
        if (attack_now) {
            if (hooks.forced_participant)
                throw ConfigError("attack replay collides with the leaver's forced participation");
            hooks.forced_participant = config.attack.attacker;
            if (!have_capture) throw LookupError("attack replay before any captured model");
        }

        std::string event;

        // The leaver uploads its marked model throughout [t_m, t_u): the mark
        // is established once at t_m and re-tuned from each fresh global, so
        // it accumulates through aggregation.
        const bool marking_window = t >= tl.t_m && t < tl.t_u && leaver_active;
        if (marking_window || attack_now) {
            hooks.replace_delta = [&](int round, int pid,
                                      const VectorXd& global) -> std::optional<VectorXd> {
                if (marking_window && pid == leaver) {
                    const auto t0 = Clock::now();
                    if (round == tl.t_m) {
                        marking = dispatch_mark(config, spec, global, leaver_data, tracked, tl.t_m);
                        marked = true;
                        last_marked_delta = marking.marked_delta;
                    } else {
                        // Continuation rounds track the drifting global from
                        // the warm state; a quarter schedule suffices.
                        MarkTuning continuation = effective_tuning(config);
                        continuation.ft_iters = std::max(100, continuation.ft_iters / 4);
                        last_marked_delta =
                            refresh_mark(spec, global, last_marked_delta, marking, leaver_data,
                                         config.mark.me_penalty, continuation);
                    }
                    log.costs.mark_seconds += seconds_since(t0);
                    return last_marked_delta;
                }
                if (attack_now && pid == config.attack.attacker && round == config.attack.replay_round) {
                    // Restoring the captured model's influence through mean
                    // aggregation needs the standard model-replacement boost.
                    const double boost = config.fl.n_select / config.fl.global_lr;
                    return boost * (captured - global);
                }
                return std::nullopt;
            };
        }

        if (t == tl.t_u) pre_unlearn_global = st.global;

        // Unlearning activation at t_u.
        if (t == tl.t_u && method != UnlearnMethod::kNT) {
            event = "unlearn";
            if (is_retraining(method)) {
                const auto t0 = Clock::now();
                const int from = method == UnlearnMethod::kRT ? 0 : config.unlearn.breakpoint_round;
                VectorXd start;
                bool found = false;
                for (auto& [round, params] : ckpt_spool.read_all()) {
                    if (round == from) {
                        start = std::move(params);
                        found = true;
                        break;
                    }
                }
                if (!found)
                    throw LookupError("no stored model for retraining round " + std::to_string(from));
                if (from < tl.t_u) {
                    FLState retrained = retrain_without(spec, train, part, config.fl, leaver, from,
                                                        start, tl.t_u);
                    st.global = retrained.global;
                }
                log.costs.unlearn_seconds += seconds_since(t0);
                // from == t_u: nothing to replay; the round itself proceeds without
                // the leaver (an empty retraining window).
            } else if (is_subtraction(method)) {
                double best = std::numeric_limits<double>::infinity();
                for (int rep = 0; rep < kTimedReps; ++rep) {
                    const auto t0 = Clock::now();
                    plan = build_subtraction_plan(spec, config.unlearn, tl.t_u, tl.t_leave,
                                                  leaver_spool, &others_spool);
                    best = std::min(best, seconds_since(t0));
                }
                log.costs.unlearn_seconds += best;
                plan_built = true;
            }
        }

        if (method == UnlearnMethod::kDP && t == tl.t_u) {
            hooks.transform_deltas = [&](int round, const std::vector<int>& selected,
                                         std::vector<VectorXd>& deltas, const VectorXd&) {
                for (std::size_t i = 0; i < selected.size(); ++i) {
                    if (selected[i] != leaver) continue;
                    Rng base(stream_seed(config.seed, static_cast<std::uint64_t>(round),
                                         stream::kUnlearn, static_cast<std::uint64_t>(leaver)));
                    double bestt = std::numeric_limits<double>::infinity();
                    VectorXd out;
                    for (int rep = 0; rep < kTimedReps; ++rep) {
                        Rng rng = base;  // identical stream per repetition
                        const auto t0 = Clock::now();
                        VectorXd cand = dp_transform(deltas[i], config.unlearn.epsilon,
                                                     config.unlearn.dp_noise_std, rng);
                        bestt = std::min(bestt, seconds_since(t0));
                        if (rep == 0) out = std::move(cand);
                    }
                    log.costs.unlearn_seconds += bestt;
                    deltas[i] = std::move(out);
                }
            };
        } else if (method == UnlearnMethod::kS2U && t == tl.t_u) {
            hooks.transform_deltas = [&](int, const std::vector<int>& selected,
                                         std::vector<VectorXd>& deltas, const VectorXd& global) {
                VectorXd w_enabled;
                bool found = false;
                double bestt = std::numeric_limits<double>::infinity();
                std::vector<VectorXd> out;
                for (int rep = 0; rep < kTimedReps; ++rep) {
                    std::vector<VectorXd> work = deltas;
                    const auto t0 = Clock::now();
                    if (!found) {
                        for (auto& [round, params] : ckpt_spool.read_all()) {
                            if (round == tl.t_enabled) {
                                w_enabled = std::move(params);
                                found = true;
                                break;
                            }
                        }
                        if (!found) throw LookupError("no stored model at the enabled round");
                    }
                    s2u_transform(work, selected, leaver, config.unlearn.alpha, config.unlearn.beta,
                                  w_enabled, global);
                    bestt = std::min(bestt, seconds_since(t0));
                    if (rep == 0) out = std::move(work);
                }
                log.costs.unlearn_seconds += bestt;
                deltas = std::move(out);
            };
        }

        // Gradient-subtraction injection across the unlearning window.
        if (plan_built && plan.active(t)) {
            auto mean_holder = std::make_shared<std::optional<VectorXd>>();
            auto prev_transform = hooks.transform_deltas;
            hooks.transform_deltas = [&, mean_holder, prev_transform](
                                         int round, const std::vector<int>& selected,
                                         std::vector<VectorXd>& deltas, const VectorXd& global) {
                if (prev_transform) prev_transform(round, selected, deltas, global);
                if (!deltas.empty()) {
                    VectorXd mean = deltas[0];
                    for (std::size_t i = 1; i < deltas.size(); ++i) mean += deltas[i];
                    *mean_holder = mean / static_cast<double>(deltas.size());
                }
            };
            hooks.post_aggregate = [&, mean_holder](int round) -> std::optional<VectorXd> {
                const auto t0 = Clock::now();
                const VectorXd* mean_ptr =
                    mean_holder->has_value() ? &mean_holder->value() : nullptr;
                VectorXd term = plan.term(round, mean_ptr);
                log.costs.unlearn_seconds += seconds_since(t0);
                return term;
            };
        }

        if (config.attack.enabled && t == config.attack.capture_round) {
            captured = st.global;  // the model the attacker downloads this round
            have_capture = true;
        }

        const auto round_t0 = Clock::now();
        try {
            run_round(st, spec, train, part, config.fl, hooks);
        } catch (const MarkingInfeasible&) {
            log.marking_failed = true;
            RoundLog row;
            row.round = t;
            row.event = "marking_failed";
            log.rounds.push_back(row);
            return log;
        }
        const double round_seconds = seconds_since(round_t0);
        if (t < tl.t_m) {
            baseline_round_total += round_seconds;
            ++baseline_round_count;
        }

        // Per-method persisted state (what the cost accounting charges for).
        const RoundRecord& rec = st.history.rounds.back();
        if (method == UnlearnMethod::kRT && t == 0) ckpt_spool.append(0, rec.global_before);
        if (method == UnlearnMethod::kRTB) ckpt_spool.append(t, rec.global_before);
        if (method == UnlearnMethod::kS2U && t == tl.t_enabled)
            ckpt_spool.append(t, rec.global_before);
        if (is_subtraction(method) && t < tl.t_u) {
            for (std::size_t i = 0; i < rec.selected.size(); ++i) {
                if (rec.selected[i] != leaver) continue;
                leaver_spool.append(t, rec.deltas[i]);
                if (method == UnlearnMethod::kCGS) {
                    VectorXd mean = st.history.mean_delta_excluding(t, leaver);
                    if (mean.size() > 0) others_spool.append(t, mean);
                }
            }
        }

        // Round metrics against the freshly aggregated global.
        RoundLog row;
        row.round = t;
        if (t == tl.t_m) event = "mark";
        if (attack_now) event = "attack";
        row.event = event;
        row.test_acc = metric_accuracy(spec, st.global, test.features, test.labels);
        row.test_loss = metric_loss(spec, st.global, test.features, test.labels);
        row.leave_acc = metric_accuracy(spec, st.global, leaver_data.features, leaver_data.labels);
        row.leave_loss = metric_loss(spec, st.global, leaver_data.features, leaver_data.labels);
        row.leave_kl = metric_kl_to_uniform(spec, st.global, leaver_data.features);
        const bool in_checking = t >= tl.t_m && t <= tl.t_leave;
        if (config.log_influence && in_checking)
            row.leave_influence = metric_influence(spec, st.global, leaver_data.features,
                                                   leaver_data.labels, config.check);
        tracked.row(t) = per_sample_losses(spec, st.global, leave_batch).transpose();

        if (marked) {
            const MarkerSet& mk = marking.markers;
            if (mk.kind == MarkerKind::kFM) {
                marker_losses[t] =
                    per_sample_losses(spec, st.global, {mk.inputs, mk.check_labels});
                const int lo = std::max(tl.t_m, t - kFmTrailingWindow + 1);
                MatrixXd window(t - lo + 1, mk.size());
                for (int r = lo; r <= t; ++r) window.row(r - lo) = marker_losses.at(r).transpose();
                row.marker_bound = trailing_variance(window);
            } else {
                row.marker_bound = check_metric(spec, st.global, mk, config.check);
            }
            bound[static_cast<std::size_t>(t)] = row.marker_bound;
            if (mk.size() > 0) {
                row.marker_acc = metric_accuracy(spec, st.global, mk.inputs, mk.check_labels);
                row.marker_loss = metric_loss(spec, st.global, mk.inputs, mk.check_labels);
                row.marker_kl = metric_kl_to_uniform(spec, st.global, mk.inputs);
                if (config.log_influence && in_checking)
                    row.marker_influence = metric_influence(spec, st.global, mk.inputs,
                                                            mk.check_labels, config.check);
            }
        }
        log.rounds.push_back(std::move(row));
    }

    log.costs.baseline_round_seconds =
        baseline_round_count > 0 ? baseline_round_total / baseline_round_count : 0.0;

    if (!marked) throw ConfigError("the marking round never executed");
    const MarkerSet& mk = marking.markers;
    log.metric = mk.metric;

    auto reading = [&](int t) -> double {
        const auto& v = bound[static_cast<std::size_t>(t)];
        if (!v) throw LookupError("no marker reading at round " + std::to_string(t));
        return *v;
    };

    // The baseline is read against the post-marking global model: the last
    // round of the marking window, when the injected mark has settled. The
    // metric diff compares it to the reading right after the unlearning
    // round; the leave decision uses the reading at t_leave. Backdoor
    // readings are median-smoothed over the trailing window on each side.
    const int baseline_round = tl.t_u - 1;
    auto smoothed = [&](int last) {
        const int w = std::max(1, config.check.bn_median_width);
        std::vector<double> window;
        for (int t = std::max(tl.t_m, last - w + 1); t <= last; ++t) window.push_back(reading(t));
        return median_of(window);
    };
    if (mk.kind == MarkerKind::kBN) {
        log.baseline = smoothed(baseline_round);
        log.current = smoothed(std::min(tl.t_u + config.check.bn_median_width - 1, decision_round));
        log.decision_reading = smoothed(decision_round);
    } else {
        log.baseline = reading(baseline_round);
        log.current = reading(tl.t_u);
        log.decision_reading = reading(decision_round);
    }
    log.diff = metric_diff(log.baseline, log.current);
    log.signed_diff = signed_improvement(log.metric, log.baseline, log.decision_reading);
    log.threshold = decision_threshold(log.metric, config.check, log.baseline);
    log.decision = verify_decision(log.signed_diff, log.threshold);
    log.rounds[static_cast<std::size_t>(decision_round)].event = "decision";

    // Replay detection: once the unlearning signal reached the threshold, a
    // reading that falls back under half of it flags the run.
    bool armed = false;
    for (int t = tl.t_u; t <= decision_round; ++t) {
        const double sd = signed_improvement(log.metric, log.baseline, reading(t));
        if (!armed && sd >= log.threshold) armed = true;
        else if (armed && sd < 0.5 * log.threshold) log.attack_flagged = true;
    }

    // Marker-vs-leaving-data correlation around the unlearning round,
    // evaluated retroactively against the stored per-round models.
    auto global_after = [&](int t) -> const VectorXd& {
        if (t + 1 < static_cast<int>(st.history.rounds.size()))
            return st.history.rounds[static_cast<std::size_t>(t) + 1].global_before;
        return st.global;
    };
    if (mk.size() > 0) {
        const int n = config.correlation_halfwidth;
        std::vector<double> marker_series, leaving_series;
        for (int t = std::max(0, tl.t_u - n); t <= std::min(T - 1, tl.t_u + n); ++t) {
            const VectorXd& g = global_after(t);
            marker_series.push_back(metric_loss(spec, g, mk.inputs, mk.check_labels));
            leaving_series.push_back(
                metric_loss(spec, g, leaver_data.features, leaver_data.labels));
        }
        log.correlation_r = correlation_report(marker_series, leaving_series);
    }

    // Parameter deviation across the unlearning event: the model entering the
    // unlearning round against the model leaving it.
    log.param_distance_report = param_distance(pre_unlearn_global, global_after(tl.t_u));
    log.membership = membership_inference(spec, st.global, train.features, test.features,
                                          leaver_data.features);

    log.unlearn_storage_bytes = leaver_spool.bytes() + others_spool.bytes() + ckpt_spool.bytes();
    log.marker_storage_bytes = marker_to_json(mk).size();

    if (!config.out_dir.empty()) {
        namespace fs = std::filesystem;
        fs::create_directories(config.out_dir);
        emit_jsonl(log, (fs::path(config.out_dir) / "log.jsonl").string());
        emit_csv(log, (fs::path(config.out_dir) / "log.csv").string());
        emit_summary(log, (fs::path(config.out_dir) / "summary.json").string());
        std::ofstream markers_out(fs::path(config.out_dir) / "markers.json");
        markers_out << marker_to_json(mk) << "\n";
        // Wall-clock figures stay out of the deterministic artifacts.
        nlohmann::json costs;
        costs["mark_seconds"] = log.costs.mark_seconds;
        costs["unlearn_seconds"] = log.costs.unlearn_seconds;
        costs["baseline_round_seconds"] = log.costs.baseline_round_seconds;
        std::ofstream costs_out(fs::path(config.out_dir) / "costs.json");
        costs_out << costs.dump(2) << "\n";
    }
    return log;
}

namespace {

std::string activation_name(Activation a) { return a == Activation::kRelu ? "relu" : "tanh"; }

Activation activation_from_name(const std::string& n) {
    if (n == "relu") return Activation::kRelu;
    if (n == "tanh") return Activation::kTanh;
    throw ConfigError("unknown activation '" + n + "'");
}

std::string position_name(TriggerSpec::Position p) {
    switch (p) {
        case TriggerSpec::Position::kBottomRight: return "bottom_right";
        case TriggerSpec::Position::kBottomLeft: return "bottom_left";
        case TriggerSpec::Position::kTopRight: return "top_right";
        case TriggerSpec::Position::kTopLeft: return "top_left";
    }
    return "bottom_right";
}

TriggerSpec::Position position_from_name(const std::string& n) {
    if (n == "bottom_right") return TriggerSpec::Position::kBottomRight;
    if (n == "bottom_left") return TriggerSpec::Position::kBottomLeft;
    if (n == "top_right") return TriggerSpec::Position::kTopRight;
    if (n == "top_left") return TriggerSpec::Position::kTopLeft;
    throw ConfigError("unknown trigger position '" + n + "'");
}

}  // namespace

std::string config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["model"] = {{"layers", c.model.layer_sizes},
                  {"activation", activation_name(c.model.activation)},
                  {"loss", "cross_entropy"},
                  {"param_cap", c.model.param_cap}};
    j["data"] = {{"source", c.data_source},
                 {"classes", c.data.class_count},
                 {"dim", c.data.feature_dim},
                 {"per_class", c.data.per_class},
                 {"cluster_spread", c.data.cluster_spread},
                 {"rare_fraction", c.data.rare_cluster_fraction},
                 {"rare_shift", c.data.rare_shift},
                 {"image_shape", c.data.image_shape},
                 {"test_per_class", c.test_per_class},
                 {"idx_images", c.idx_images},
                 {"idx_labels", c.idx_labels},
                 {"idx_downscale", c.idx_downscale},
                 {"cache_path", c.cache_path},
                 {"test_fraction", c.test_fraction}};
    j["partition"] = {{"kind", c.partition_kind}, {"alpha", c.dirichlet_alpha}};
    j["fl"] = {{"n_total", c.fl.n_total},
               {"n_select", c.fl.n_select},
               {"local_epochs", c.fl.local_epochs},
               {"batch_size", c.fl.batch_size},
               {"local_lr", c.fl.local_lr},
               {"global_lr", c.fl.global_lr},
               {"total_rounds", c.fl.total_rounds},
               {"aggregation", aggregation_name(c.fl.aggregation)},
               {"krum_f", c.fl.krum_f},
               {"checkpoint_every", c.fl.checkpoint_every},
               {"threads", c.fl.threads}};
    j["timeline"] = {{"t_enabled", c.timeline.t_enabled},
                     {"t_m", c.timeline.t_m},
                     {"t_u", c.timeline.t_u},
                     {"t_leave", c.timeline.t_leave}};
    j["leaver"] = c.leaver;
    j["marking"] = {{"kind", marker_name(c.marker)},
                    {"em_kappa", c.mark.em_kappa},
                    {"fm_ratio", c.mark.fm_ratio},
                    {"fm_window", c.mark.fm_window},
                    {"trigger",
                     {{"size", c.mark.trigger.size},
                      {"transparency", c.mark.trigger.transparency},
                      {"position", position_name(c.mark.trigger.position)},
                      {"target_class", c.mark.trigger.target_class},
                      {"poison_ratio", c.mark.trigger.poison_ratio}}},
                    {"bn_eval_count", c.mark.bn_eval_count},
                    {"bn_ft_iters", c.mark.bn_tuning.ft_iters},
                    {"bn_ft_lr", c.mark.bn_tuning.ft_lr},
                    {"me_bits", c.mark.me_bits},
                    {"me_penalty", c.mark.me_penalty},
                    {"me_seed", c.mark.me_seed},
                    {"bf_gamma", c.mark.bf_gamma},
                    {"pgd",
                     {{"steps", c.mark.pgd.steps},
                      {"budget", c.mark.pgd.budget},
                      {"step_frac", c.mark.pgd.step_frac},
                      {"bisect_iters", c.mark.pgd.bisect_iters}}},
                    {"ft_iters", c.mark.tuning.ft_iters},
                    {"ft_lr", c.mark.tuning.ft_lr},
                    {"min_markers", c.mark.min_markers}};
    j["unlearn"] = {{"method", unlearn_name(c.unlearn.method)},
                    {"lambda", c.unlearn.lambda},
                    {"alpha", c.unlearn.alpha},
                    {"beta", c.unlearn.beta},
                    {"epsilon", c.unlearn.epsilon},
                    {"dp_noise_std", c.unlearn.dp_noise_std},
                    {"breakpoint_round", c.unlearn.breakpoint_round},
                    {"unlearn_rounds", c.unlearn.unlearn_rounds},
                    {"ggs_ema_decay", c.unlearn.ggs_ema_decay},
                    {"ggs_fit_iters", c.unlearn.ggs_fit_iters}};
    j["check"] = {{"delta_accuracy", c.check.delta_accuracy},
                  {"delta_loss", c.check.delta_loss},
                  {"delta_variance_factor", c.check.delta_variance_factor},
                  {"delta_kl", c.check.delta_kl},
                  {"delta_bits", c.check.delta_bits},
                  {"bn_median_width", c.check.bn_median_width},
                  {"influence_damping", c.check.influence_damping},
                  {"influence_max_iters", c.check.influence_max_iters},
                  {"influence_tol", c.check.influence_tol}};
    j["attack"] = {{"enabled", c.attack.enabled},
                   {"capture_round", c.attack.capture_round},
                   {"replay_round", c.attack.replay_round},
                   {"attacker", c.attack.attacker}};
    j["log_influence"] = c.log_influence;
    j["correlation_halfwidth"] = c.correlation_halfwidth;
    j["out_dir"] = c.out_dir;
    return j.dump(2);
}

ExperimentConfig config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    ExperimentConfig c;
    try {
        c.seed = j.value("seed", std::uint64_t{0});
        if (j.contains("model")) {
            const auto& m = j["model"];
            c.model.layer_sizes = m.value("layers", c.model.layer_sizes);
            c.model.activation = activation_from_name(m.value("activation", std::string("relu")));
            c.model.param_cap = m.value("param_cap", c.model.param_cap);
        }
        if (j.contains("data")) {
            const auto& d = j["data"];
            c.data_source = d.value("source", c.data_source);
            c.data.class_count = d.value("classes", c.data.class_count);
            c.data.feature_dim = d.value("dim", c.data.feature_dim);
            c.data.per_class = d.value("per_class", c.data.per_class);
            c.data.cluster_spread = d.value("cluster_spread", c.data.cluster_spread);
            c.data.rare_cluster_fraction = d.value("rare_fraction", c.data.rare_cluster_fraction);
            c.data.rare_shift = d.value("rare_shift", c.data.rare_shift);
            c.data.image_shape = d.value("image_shape", c.data.image_shape);
            c.test_per_class = d.value("test_per_class", c.test_per_class);
            c.idx_images = d.value("idx_images", c.idx_images);
            c.idx_labels = d.value("idx_labels", c.idx_labels);
            c.idx_downscale = d.value("idx_downscale", c.idx_downscale);
            c.cache_path = d.value("cache_path", c.cache_path);
            c.test_fraction = d.value("test_fraction", c.test_fraction);
        }
        if (j.contains("partition")) {
            c.partition_kind = j["partition"].value("kind", c.partition_kind);
            c.dirichlet_alpha = j["partition"].value("alpha", c.dirichlet_alpha);
        }
        if (j.contains("fl")) {
            const auto& f = j["fl"];
            c.fl.n_total = f.value("n_total", c.fl.n_total);
            c.fl.n_select = f.value("n_select", c.fl.n_select);
            c.fl.local_epochs = f.value("local_epochs", c.fl.local_epochs);
            c.fl.batch_size = f.value("batch_size", c.fl.batch_size);
            c.fl.local_lr = f.value("local_lr", c.fl.local_lr);
            c.fl.global_lr = f.value("global_lr", c.fl.global_lr);
            c.fl.total_rounds = f.value("total_rounds", c.fl.total_rounds);
            c.fl.aggregation = aggregation_from_name(f.value("aggregation", std::string("fedavg")));
            c.fl.krum_f = f.value("krum_f", c.fl.krum_f);
            c.fl.checkpoint_every = f.value("checkpoint_every", c.fl.checkpoint_every);
            c.fl.threads = f.value("threads", c.fl.threads);
        }
        if (j.contains("timeline")) {
            const auto& t = j["timeline"];
            c.timeline.t_enabled = t.value("t_enabled", c.timeline.t_enabled);
            c.timeline.t_m = t.value("t_m", c.timeline.t_m);
            c.timeline.t_u = t.value("t_u", c.timeline.t_u);
            c.timeline.t_leave = t.value("t_leave", c.timeline.t_leave);
        }
        c.leaver = j.value("leaver", c.leaver);
        if (j.contains("marking")) {
            const auto& m = j["marking"];
            c.marker = marker_from_name(m.value("kind", std::string("em")));
            c.mark.em_kappa = m.value("em_kappa", c.mark.em_kappa);
            c.mark.fm_ratio = m.value("fm_ratio", c.mark.fm_ratio);
            c.mark.fm_window = m.value("fm_window", c.mark.fm_window);
            if (m.contains("trigger")) {
                const auto& tr = m["trigger"];
                c.mark.trigger.size = tr.value("size", c.mark.trigger.size);
                c.mark.trigger.transparency = tr.value("transparency", c.mark.trigger.transparency);
                c.mark.trigger.position =
                    position_from_name(tr.value("position", std::string("bottom_right")));
                c.mark.trigger.target_class = tr.value("target_class", c.mark.trigger.target_class);
                c.mark.trigger.poison_ratio = tr.value("poison_ratio", c.mark.trigger.poison_ratio);
            }
            c.mark.bn_eval_count = m.value("bn_eval_count", c.mark.bn_eval_count);
            c.mark.bn_tuning.ft_iters = m.value("bn_ft_iters", c.mark.bn_tuning.ft_iters);
            c.mark.bn_tuning.ft_lr = m.value("bn_ft_lr", c.mark.bn_tuning.ft_lr);
            c.mark.me_bits = m.value("me_bits", c.mark.me_bits);
            c.mark.me_penalty = m.value("me_penalty", c.mark.me_penalty);
            c.mark.me_seed = m.value("me_seed", c.mark.me_seed);
            c.mark.bf_gamma = m.value("bf_gamma", c.mark.bf_gamma);
            if (m.contains("pgd")) {
                const auto& p = m["pgd"];
                c.mark.pgd.steps = p.value("steps", c.mark.pgd.steps);
                c.mark.pgd.budget = p.value("budget", c.mark.pgd.budget);
                c.mark.pgd.step_frac = p.value("step_frac", c.mark.pgd.step_frac);
                c.mark.pgd.bisect_iters = p.value("bisect_iters", c.mark.pgd.bisect_iters);
            }
            c.mark.tuning.ft_iters = m.value("ft_iters", c.mark.tuning.ft_iters);
            c.mark.tuning.ft_lr = m.value("ft_lr", c.mark.tuning.ft_lr);
            c.mark.min_markers = m.value("min_markers", c.mark.min_markers);
        }
        if (j.contains("unlearn")) {
            const auto& u = j["unlearn"];
            c.unlearn.method = unlearn_from_name(u.value("method", std::string("nf")));
            c.unlearn.lambda = u.value("lambda", c.unlearn.lambda);
            c.unlearn.alpha = u.value("alpha", c.unlearn.alpha);
            c.unlearn.beta = u.value("beta", c.unlearn.beta);
            c.unlearn.epsilon = u.value("epsilon", c.unlearn.epsilon);
            c.unlearn.dp_noise_std = u.value("dp_noise_std", c.unlearn.dp_noise_std);
            c.unlearn.breakpoint_round = u.value("breakpoint_round", c.unlearn.breakpoint_round);
            c.unlearn.unlearn_rounds = u.value("unlearn_rounds", c.unlearn.unlearn_rounds);
            c.unlearn.ggs_ema_decay = u.value("ggs_ema_decay", c.unlearn.ggs_ema_decay);
            c.unlearn.ggs_fit_iters = u.value("ggs_fit_iters", c.unlearn.ggs_fit_iters);
        }
        if (j.contains("check")) {
            const auto& k = j["check"];
            c.check.delta_accuracy = k.value("delta_accuracy", c.check.delta_accuracy);
            c.check.delta_loss = k.value("delta_loss", c.check.delta_loss);
            c.check.delta_variance_factor =
                k.value("delta_variance_factor", c.check.delta_variance_factor);
            c.check.delta_kl = k.value("delta_kl", c.check.delta_kl);
            c.check.delta_bits = k.value("delta_bits", c.check.delta_bits);
            c.check.bn_median_width = k.value("bn_median_width", c.check.bn_median_width);
            c.check.influence_damping = k.value("influence_damping", c.check.influence_damping);
            c.check.influence_max_iters =
                k.value("influence_max_iters", c.check.influence_max_iters);
            c.check.influence_tol = k.value("influence_tol", c.check.influence_tol);
        }
        if (j.contains("attack")) {
            const auto& a = j["attack"];
            c.attack.enabled = a.value("enabled", c.attack.enabled);
            c.attack.capture_round = a.value("capture_round", c.attack.capture_round);
            c.attack.replay_round = a.value("replay_round", c.attack.replay_round);
            c.attack.attacker = a.value("attacker", c.attack.attacker);
        }
        c.log_influence = j.value("log_influence", c.log_influence);
        c.correlation_halfwidth = j.value("correlation_halfwidth", c.correlation_halfwidth);
        c.out_dir = j.value("out_dir", c.out_dir);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return config_from_json(text);
}

SweepAxis sweep_axis_from_name(const std::string& name) {
    if (name == "marking_round") return SweepAxis::kMarkingRound;
    if (name == "trigger_size") return SweepAxis::kTriggerSize;
    if (name == "transparency") return SweepAxis::kTransparency;
    if (name == "n_select") return SweepAxis::kNSelect;
    if (name == "dirichlet_alpha") return SweepAxis::kDirichletAlpha;
    throw ConfigError("unknown sweep axis '" + name + "'");
}

ExperimentConfig apply_sweep_value(const ExperimentConfig& base, SweepAxis axis, double value) {
    ExperimentConfig cfg = base;
    switch (axis) {
        case SweepAxis::kMarkingRound: {
            const int t_m = static_cast<int>(value);
            const Timeline& tl = base.timeline;
            const int budget = cfg.fl.total_rounds - 1 - t_m;
            if (budget < 2) throw ConfigError("marking round leaves no room for unlearning");
            const double scale =
                std::min(1.0, static_cast<double>(budget) / (tl.t_leave - tl.t_m));
            Timeline next = tl;
            next.t_m = t_m;
            next.t_u = t_m + std::max(1, static_cast<int>(std::lround((tl.t_u - tl.t_m) * scale)));
            next.t_leave = std::min(
                cfg.fl.total_rounds - 1,
                t_m + std::max(next.t_u - t_m + 1,
                               static_cast<int>(std::lround((tl.t_leave - tl.t_m) * scale))));
            next.t_enabled = std::min(tl.t_enabled, t_m);
            cfg.timeline = next;
            break;
        }
        case SweepAxis::kTriggerSize:
            cfg.mark.trigger.size = static_cast<int>(value);
            break;
        case SweepAxis::kTransparency:
            cfg.mark.trigger.transparency = value;
            break;
        case SweepAxis::kNSelect:
            cfg.fl.n_select = static_cast<int>(value);
            break;
        case SweepAxis::kDirichletAlpha:
            cfg.partition_kind = "dirichlet";
            cfg.dirichlet_alpha = value;
            break;
    }
    return cfg;
}

std::vector<ExperimentLog> sweep(const ExperimentConfig& base, SweepAxis axis,
                                 const std::vector<double>& values, int jobs) {
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    std::vector<ExperimentLog> out(values.size());
    if (jobs <= 1) {
        for (std::size_t i = 0; i < values.size(); ++i)
            out[i] = run_experiment(apply_sweep_value(base, axis, values[i]));
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(values.size());
    auto worker = [&] {
        for (std::size_t i = next.fetch_add(1); i < values.size(); i = next.fetch_add(1)) {
            try {
                out[i] = run_experiment(apply_sweep_value(base, axis, values[i]));
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int j = 0; j < std::min<int>(jobs, static_cast<int>(values.size())); ++j)
        pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

}  // namespace fedul
