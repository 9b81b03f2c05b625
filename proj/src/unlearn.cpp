#include "fedul/unlearn.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>

#include "fedul/errors.hpp"

namespace fedul {

UnlearnMethod unlearn_from_name(const std::string& name) {
    std::string n;
    for (char c : name) n.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (n == "nt") return UnlearnMethod::kNT;
    if (n == "nf") return UnlearnMethod::kNF;
    if (n == "rt") return UnlearnMethod::kRT;
    if (n == "rtb") return UnlearnMethod::kRTB;
    if (n == "cgs") return UnlearnMethod::kCGS;
    if (n == "ggs") return UnlearnMethod::kGGS;
    if (n == "igs") return UnlearnMethod::kIGS;
    if (n == "dp") return UnlearnMethod::kDP;
    if (n == "s2u") return UnlearnMethod::kS2U;
    throw ConfigError("unknown unlearning method '" + name + "'");
}

std::string unlearn_name(UnlearnMethod m) {
    switch (m) {
        case UnlearnMethod::kNT: return "nt";
        case UnlearnMethod::kNF: return "nf";
        case UnlearnMethod::kRT: return "rt";
        case UnlearnMethod::kRTB: return "rtb";
        case UnlearnMethod::kCGS: return "cgs";
        case UnlearnMethod::kGGS: return "ggs";
        case UnlearnMethod::kIGS: return "igs";
        case UnlearnMethod::kDP: return "dp";
        case UnlearnMethod::kS2U: return "s2u";
    }
    return "?";
}

bool is_one_step(UnlearnMethod m) {
    return m == UnlearnMethod::kDP || m == UnlearnMethod::kS2U;
}

bool is_subtraction(UnlearnMethod m) {
    return m == UnlearnMethod::kCGS || m == UnlearnMethod::kGGS || m == UnlearnMethod::kIGS;
}

bool is_retraining(UnlearnMethod m) {
    return m == UnlearnMethod::kRT || m == UnlearnMethod::kRTB;
}

void UnlearnConfig::validate() const {
    if (lambda <= 0 && is_subtraction(method))
        throw ConfigError("subtraction methods need lambda > 0");
    if (method == UnlearnMethod::kS2U && (alpha <= 0 || alpha >= 1))
        throw ConfigError("s2u needs alpha in (0,1)");
    if (method == UnlearnMethod::kS2U && beta < 1) throw ConfigError("s2u needs beta >= 1");
    if (method == UnlearnMethod::kDP && epsilon <= 0) throw ConfigError("dp needs epsilon > 0");
    if (unlearn_rounds < 0) throw ConfigError("unlearn_rounds must be >= 0");
    if (ggs_ema_decay < 0 || ggs_ema_decay >= 1) throw ConfigError("ggs_ema_decay must be in [0,1)");
}

double dp_default_noise_std(const VectorXd& delta, double epsilon) {
    return delta.norm() / (epsilon * std::sqrt(static_cast<double>(delta.size())));
}

VectorXd dp_transform(const VectorXd& delta, double epsilon, double noise_std, Rng& rng) {
    if (epsilon <= 0) throw ConfigError("dp epsilon must be > 0");
    const double std = noise_std < 0 ? dp_default_noise_std(delta, epsilon) : noise_std;
    VectorXd out = std::exp(epsilon) * delta;
    if (std > 0)
        for (Eigen::Index i = 0; i < out.size(); ++i) out[i] += rng.normal(0.0, std);
    check_finite(out, "dp-transformed delta");
    return out;
}

void s2u_transform(std::vector<VectorXd>& deltas, const std::vector<int>& selected, int leaver,
                   double alpha, double beta, const VectorXd& w_enabled,
                   const VectorXd& w_current) {
    if (alpha <= 0 || alpha >= 1) throw ConfigError("s2u alpha must lie in (0,1)");
    if (beta < 1) throw ConfigError("s2u beta must be >= 1");
    auto it = std::find(selected.begin(), selected.end(), leaver);
    if (it == selected.end()) throw ConfigError("s2u requires the leaver in the selected set");
    const VectorXd substitute = beta * (w_enabled - w_current);
    for (std::size_t i = 0; i < selected.size(); ++i) {
        if (selected[i] == leaver)
            deltas[i] *= alpha;
        else
            deltas[i] = substitute;
    }
}

void VectorSpool::append(int round, const VectorXd& v) {
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (!out) throw IoError("cannot append to " + path_);
    const std::int32_t r = round;
    const std::uint64_t len = static_cast<std::uint64_t>(v.size());
    out.write(reinterpret_cast<const char*>(&r), 4);
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(sizeof(double)) * v.size());
    if (!out) throw IoError("append failed: " + path_);
    bytes_ += 12 + sizeof(double) * static_cast<std::uint64_t>(v.size());
}

std::vector<std::pair<int, VectorXd>> VectorSpool::read_all() const {
    std::vector<std::pair<int, VectorXd>> out;
    std::ifstream in(path_, std::ios::binary);
    if (!in) return out;  // nothing spooled yet
    for (;;) {
        std::int32_t r;
        std::uint64_t len;
        if (!in.read(reinterpret_cast<char*>(&r), 4)) break;
        if (!in.read(reinterpret_cast<char*>(&len), 8))
            throw FormatError("truncated spool record in " + path_);
        VectorXd v(static_cast<Eigen::Index>(len));
        if (!in.read(reinterpret_cast<char*>(v.data()),
                     static_cast<std::streamsize>(sizeof(double) * len)))
            throw FormatError("truncated spool record in " + path_);
        out.emplace_back(r, std::move(v));
    }
    return out;
}

GgsGenerator fit_ggs(const ModelSpec& spec, const std::vector<VectorXd>& deltas,
                     double ema_decay, int fit_iters) {
    if (deltas.empty()) throw ConfigError("ggs needs at least one stored delta");
    GgsGenerator g;
    g.ema = deltas.front();
    for (std::size_t i = 1; i < deltas.size(); ++i)
        g.ema = ema_decay * g.ema + (1.0 - ema_decay) * deltas[i];

    const VectorXd& target = deltas.back();
    const int layers = spec.layer_count();
    g.layer_scales = VectorXd::Ones(layers);

    // Per-layer scale s_l minimizing ||s_l * ema_l - target_l||^2, fitted by
    // plain gradient steps on the quadratic.
    int offset = 0;
    for (int l = 0; l < layers; ++l) {
        const int block = spec.layer_sizes[l + 1] * (spec.layer_sizes[l] + 1);
        const auto e = g.ema.segment(offset, block);
        const auto t = target.segment(offset, block);
        const double e2 = e.squaredNorm();
        const double et = e.dot(t);
        if (e2 > 0) {
            double s = 1.0;
            const double step = 0.25 / e2;
            for (int it = 0; it < fit_iters; ++it) s -= step * 2.0 * (s * e2 - et);
            g.layer_scales[l] = s;
        }
        offset += block;
    }

    g.output = VectorXd::Zero(g.ema.size());
    offset = 0;
    for (int l = 0; l < layers; ++l) {
        const int block = spec.layer_sizes[l + 1] * (spec.layer_sizes[l] + 1);
        g.output.segment(offset, block) = g.layer_scales[l] * g.ema.segment(offset, block);
        offset += block;
    }
    g.reconstruction_error = (g.output - target).norm();
    return g;
}

VectorXd SubtractionPlan::term(int round, const VectorXd* others_mean_now) const {
    if (!active(round)) throw ConfigError("subtraction term requested outside the unlearning window");
    switch (method) {
        case UnlearnMethod::kIGS:
            return igs_term;
        case UnlearnMethod::kGGS:
            return ggs_term;
        case UnlearnMethod::kCGS: {
            const double now_norm = others_mean_now ? others_mean_now->norm() : 0.0;
            VectorXd sum = VectorXd::Zero(leaver_deltas.front().size());
            for (std::size_t i = 0; i < leaver_deltas.size(); ++i) {
                const double hist = historical_other_norms[i];
                const double ratio = (hist > 0 && now_norm > 0) ? now_norm / hist : 1.0;
                sum += ratio * leaver_deltas[i];
            }
            return (-lambda / rounds) * sum;
        }
        default:
            throw ConfigError("not a subtraction method");
    }
}

SubtractionPlan build_subtraction_plan(const ModelSpec& spec, const UnlearnConfig& cfg,
                                       int t_u, int t_leave, const VectorSpool& leaver_spool,
                                       const VectorSpool* others_spool) {
    SubtractionPlan plan;
    plan.method = cfg.method;
    plan.lambda = cfg.lambda;
    plan.start_round = t_u;

    for (auto& [round, delta] : leaver_spool.read_all()) {
        plan.omega.push_back(round);
        plan.leaver_deltas.push_back(std::move(delta));
    }
    if (plan.omega.empty()) {
        plan.rounds = 0;  // nothing uploaded, nothing to subtract
        return plan;
    }

    const int omega_size = static_cast<int>(plan.omega.size());
    plan.rounds = cfg.unlearn_rounds > 0 ? cfg.unlearn_rounds
                                         : std::min(omega_size, std::max(1, t_leave - t_u));

    if (cfg.method == UnlearnMethod::kCGS) {
        if (!others_spool) throw ConfigError("cgs needs the stored other-participant means");
        auto stored = others_spool->read_all();
        plan.historical_other_norms.assign(plan.omega.size(), 0.0);
        for (std::size_t i = 0; i < plan.omega.size(); ++i) {
            for (const auto& [round, mean] : stored) {
                if (round == plan.omega[i]) {
                    plan.historical_other_norms[i] = mean.norm();
                    break;
                }
            }
        }
    } else if (cfg.method == UnlearnMethod::kIGS) {
        VectorXd sum = plan.leaver_deltas.front();
        for (std::size_t i = 1; i < plan.leaver_deltas.size(); ++i) sum += plan.leaver_deltas[i];
        plan.igs_term = (-cfg.lambda / plan.rounds) * sum;
    } else if (cfg.method == UnlearnMethod::kGGS) {
        GgsGenerator gen = fit_ggs(spec, plan.leaver_deltas, cfg.ggs_ema_decay, cfg.ggs_fit_iters);
        plan.ggs_term = -cfg.lambda * gen.output;
    } else {
        throw ConfigError("not a subtraction method");
    }
    return plan;
}

FLState retrain_without(const ModelSpec& spec, const Dataset& data, const Partition& partition,
                        const FLConfig& cfg, int leaver, int from_round,
                        const VectorXd& start_params, int t_u) {
    if (cfg.n_total <= 1) throw ConfigError("empty federation: nobody left to retrain with");
    if (from_round > t_u) throw ConfigError("retrain window is empty or inverted");
    FLState state;
    state.round = from_round;
    state.global = start_params;
    RoundHooks hooks;
    hooks.excluded_participant = leaver;
    FLConfig replay_cfg = cfg;
    replay_cfg.total_rounds = std::max(cfg.total_rounds, t_u);
    // Retraining is a fresh training run, not a re-enactment: it draws from
    // its own stream universe (still deterministic per seed, and independent
    // of anything the leaver ever uploaded).
    replay_cfg.seed = stream_seed(cfg.seed, 0, stream::kReplay);
    for (int t = from_round; t < t_u; ++t) run_round(state, spec, data, partition, replay_cfg, hooks);
    return state;
}

}  // namespace fedul
