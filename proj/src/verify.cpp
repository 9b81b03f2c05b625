#include "fedul/verify.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <map>
#include <set>

#include "fedul/errors.hpp"
#include "json.hpp"

namespace fedul {

namespace {

Batch to_batch(const MatrixXd& inputs, const VectorXi& labels) {
    return Batch{inputs, labels};
}

int argmax_row(const MatrixXd& m, int row) {
    int arg = 0;
    m.row(row).maxCoeff(&arg);
    return arg;
}

// Modal value; ties break to the smaller label.
int majority_label(const std::vector<int>& labels) {
    std::map<int, int> counts;
    for (int l : labels) ++counts[l];
    int best = -1, best_count = -1;
    for (const auto& [label, count] : counts) {
        if (count > best_count) {
            best = label;
            best_count = count;
        }
    }
    return best;
}

// Majority class among the selected high-loss samples; count ties resolve to
// the class carrying more loss mass (the more erroneous one).
int majority_label_weighted(const std::vector<int>& labels, const std::vector<double>& losses) {
    std::map<int, std::pair<int, double>> tally;  // label -> (count, loss mass)
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& [count, mass] = tally[labels[i]];
        ++count;
        mass += losses[i];
    }
    int best = -1, best_count = -1;
    double best_mass = -1;
    for (const auto& [label, cm] : tally) {
        if (cm.first > best_count || (cm.first == best_count && cm.second > best_mass)) {
            best = label;
            best_count = cm.first;
            best_mass = cm.second;
        }
    }
    return best;
}

MatrixXd projection_matrix(int bit_count, int dim, std::uint64_t projection_seed) {
    Rng rng(stream_seed(projection_seed, 0, stream::kMarking, 99));
    MatrixXd X(bit_count, dim);
    for (int r = 0; r < bit_count; ++r)
        for (int c = 0; c < dim; ++c) X(r, c) = rng.normal();
    return X;
}

std::vector<std::uint8_t> payload_bits(int bit_count, std::uint64_t projection_seed) {
    Rng rng(stream_seed(projection_seed, 1, stream::kMarking, 98));
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(bit_count));
    for (auto& b : bits) b = static_cast<std::uint8_t>(rng.below(2));
    return bits;
}

const char* kB64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(const unsigned char* data, std::size_t len) {
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    for (std::size_t i = 0; i < len; i += 3) {
        unsigned v = data[i] << 16;
        if (i + 1 < len) v |= data[i + 1] << 8;
        if (i + 2 < len) v |= data[i + 2];
        out.push_back(kB64[(v >> 18) & 63]);
        out.push_back(kB64[(v >> 12) & 63]);
        out.push_back(i + 1 < len ? kB64[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < len ? kB64[v & 63] : '=');
    }
    return out;
}

std::vector<unsigned char> base64_decode(const std::string& text) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<unsigned char> out;
    int acc = 0, bits = 0;
    for (char c : text) {
        if (c == '=') break;
        const int v = val(c);
        if (v < 0) throw FormatError("invalid base64 payload");
        acc = (acc << 6) | v;
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<unsigned char>((acc >> bits) & 0xff));
        }
    }
    return out;
}

}  // namespace

MarkerKind marker_from_name(const std::string& name) {
    std::string n;
    for (char c : name) n.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (n == "em") return MarkerKind::kEM;
    if (n == "fm") return MarkerKind::kFM;
    if (n == "bn") return MarkerKind::kBN;
    if (n == "me") return MarkerKind::kME;
    if (n == "bf") return MarkerKind::kBF;
    throw ConfigError("unknown marker kind '" + name + "'");
}

std::string marker_name(MarkerKind k) {
    switch (k) {
        case MarkerKind::kEM: return "em";
        case MarkerKind::kFM: return "fm";
        case MarkerKind::kBN: return "bn";
        case MarkerKind::kME: return "me";
        case MarkerKind::kBF: return "bf";
    }
    return "?";
}

std::string metric_name(Metric m) {
    switch (m) {
        case Metric::kAccuracy: return "accuracy";
        case Metric::kLoss: return "loss";
        case Metric::kLossVariance: return "loss_variance";
        case Metric::kKl: return "kl";
        case Metric::kInfluence: return "influence";
        case Metric::kBitMatchRate: return "bit_match_rate";
    }
    return "?";
}

Metric bound_metric(MarkerKind kind) {
    switch (kind) {
        case MarkerKind::kEM: return Metric::kLoss;
        case MarkerKind::kFM: return Metric::kLossVariance;
        case MarkerKind::kBN: return Metric::kAccuracy;
        case MarkerKind::kME: return Metric::kBitMatchRate;
        case MarkerKind::kBF: return Metric::kAccuracy;
    }
    return Metric::kLoss;
}

VectorXd finetune(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs,
                  const VectorXi& labels, const MarkTuning& tuning) {
    VectorXd p = params;
    Batch batch{inputs, labels};
    for (int it = 0; it < tuning.ft_iters; ++it)
        p = sgd_step(p, loss_and_grad(spec, p, batch).grad, tuning.ft_lr);
    return p;
}

MarkingOutcome mark_em(const ModelSpec& spec, const VectorXd& local_params,
                       const Dataset& local_data, double kappa, const MarkTuning& tuning,
                       int min_markers) {
    const int n = local_data.size();
    const int k = static_cast<int>(std::ceil(kappa * n));
    if (k < 1) throw MarkingInfeasible("kappa selects no samples");

    Batch all{local_data.features, local_data.labels};
    VectorXd losses = per_sample_losses(spec, local_params, all);
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return losses[a] > losses[b]; });
    order.resize(k);

    std::vector<int> top_labels;
    std::vector<double> top_losses;
    for (int i : order) {
        top_labels.push_back(local_data.labels[i]);
        top_losses.push_back(losses[i]);
    }
    const int majority = majority_label_weighted(top_labels, top_losses);
    std::vector<int> marker_idx;
    for (int i : order)
        if (local_data.labels[i] == majority) marker_idx.push_back(i);
    if (static_cast<int>(marker_idx.size()) < min_markers)
        throw MarkingInfeasible("majority class holds only " + std::to_string(marker_idx.size()) +
                                " of the top-loss samples");

    // Relabel to the model's most predicted label on the marker subset.
    MatrixXd minputs(marker_idx.size(), local_data.dim());
    for (std::size_t i = 0; i < marker_idx.size(); ++i)
        minputs.row(static_cast<int>(i)) = local_data.features.row(marker_idx[i]);
    MatrixXd probs = softmax_probs(forward(spec, local_params, {minputs, VectorXi::Zero(static_cast<int>(marker_idx.size()))}));
    std::vector<int> predicted;
    for (int i = 0; i < probs.rows(); ++i) predicted.push_back(argmax_row(probs, i));
    const int relabel = majority_label(predicted);

    MarkerSet markers;
    markers.kind = MarkerKind::kEM;
    markers.metric = bound_metric(markers.kind);
    markers.inputs = minputs;
    markers.check_labels = VectorXi::Constant(static_cast<int>(marker_idx.size()), relabel);
    markers.original_labels.resize(static_cast<int>(marker_idx.size()));
    for (std::size_t i = 0; i < marker_idx.size(); ++i)
        markers.original_labels[static_cast<int>(i)] = local_data.labels[marker_idx[i]];
    markers.source_indices = marker_idx;

    VectorXi train_labels = local_data.labels;
    for (int i : marker_idx) train_labels[i] = relabel;
    VectorXd tuned = finetune(spec, local_params, local_data.features, train_labels, tuning);

    MarkingOutcome out;
    out.marked_delta = tuned - local_params;
    out.markers = std::move(markers);
    out.train_inputs = local_data.features;
    out.train_labels = std::move(train_labels);
    return out;
}

MarkingOutcome mark_fm(const ModelSpec& spec, const VectorXd& local_params,
                       const MatrixXd& loss_history, const Dataset& local_data, double ratio,
                       const MarkTuning& tuning) {
    if (loss_history.rows() < 3)
        throw MarkingInfeasible("loss history covers fewer than 3 rounds");
    if (loss_history.cols() != local_data.size())
        throw ConfigError("loss history width does not match the local data");
    const int n = local_data.size();
    const int k = std::max(1, static_cast<int>(std::lround(ratio * n)));

    VectorXd variance(n);
    for (int i = 0; i < n; ++i) {
        const VectorXd col = loss_history.col(i);
        const double mean = col.mean();
        variance[i] = (col.array() - mean).square().sum() / col.size();
    }
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return variance[a] > variance[b]; });
    std::vector<int> marker_idx;
    for (int i : order) {
        if (static_cast<int>(marker_idx.size()) == k) break;
        if (variance[i] > 0) marker_idx.push_back(i);  // flat-loss samples never qualify
    }
    if (marker_idx.empty()) throw MarkingInfeasible("no loss variation to mark");

    MarkerSet markers;
    markers.kind = MarkerKind::kFM;
    markers.metric = bound_metric(markers.kind);
    markers.inputs.resize(static_cast<int>(marker_idx.size()), local_data.dim());
    markers.check_labels.resize(static_cast<int>(marker_idx.size()));
    for (std::size_t i = 0; i < marker_idx.size(); ++i) {
        markers.inputs.row(static_cast<int>(i)) = local_data.features.row(marker_idx[i]);
        markers.check_labels[static_cast<int>(i)] = local_data.labels[marker_idx[i]];
    }
    markers.original_labels = markers.check_labels;
    markers.source_indices = marker_idx;

    // Fine-tuning toward low loss also flattens the loss variation.
    VectorXd tuned = finetune(spec, local_params, local_data.features, local_data.labels, tuning);

    MarkingOutcome out;
    out.marked_delta = tuned - local_params;
    out.markers = std::move(markers);
    out.train_inputs = local_data.features;
    out.train_labels = local_data.labels;
    return out;
}

MarkingOutcome mark_bn(const ModelSpec& spec, const VectorXd& local_params,
                       const Dataset& local_data, const TriggerSpec& trigger,
                       const MarkTuning& tuning, int eval_count, Rng& rng) {
    if (!local_data.image_shaped())
        throw CapabilityError("backdoor marking needs image-shaped data");
    const int n = local_data.size();
    const int poison = std::max(1, static_cast<int>(std::ceil(trigger.poison_ratio * n)));
    std::vector<int> poisoned = rng.sample_without_replacement(n, std::min(poison, n));
    std::set<int> poisoned_set(poisoned.begin(), poisoned.end());

    MatrixXd train_inputs = local_data.features;
    VectorXi train_labels = local_data.labels;
    for (int i : poisoned) {
        train_inputs.row(i) =
            apply_trigger(local_data, local_data.features.row(i).transpose(), trigger).transpose();
        train_labels[i] = trigger.target_class;
    }
    VectorXd tuned = finetune(spec, local_params, train_inputs, train_labels, tuning);

    // Held-out evaluation markers: untouched samples whose true class is not
    // the target, freshly triggered.
    std::vector<int> candidates;
    for (int i = 0; i < n; ++i)
        if (!poisoned_set.count(i) && local_data.labels[i] != trigger.target_class)
            candidates.push_back(i);
    if (candidates.empty())
        for (int i = 0; i < n; ++i)
            if (local_data.labels[i] != trigger.target_class) candidates.push_back(i);
    if (candidates.empty()) throw MarkingInfeasible("no non-target samples to evaluate the trigger on");
    if (static_cast<int>(candidates.size()) > eval_count) candidates.resize(eval_count);

    MarkerSet markers;
    markers.kind = MarkerKind::kBN;
    markers.metric = bound_metric(markers.kind);
    markers.inputs.resize(static_cast<int>(candidates.size()), local_data.dim());
    markers.check_labels = VectorXi::Constant(static_cast<int>(candidates.size()), trigger.target_class);
    markers.original_labels.resize(static_cast<int>(candidates.size()));
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        markers.inputs.row(static_cast<int>(i)) =
            apply_trigger(local_data, local_data.features.row(candidates[i]).transpose(), trigger)
                .transpose();
        markers.original_labels[static_cast<int>(i)] = local_data.labels[candidates[i]];
    }
    markers.source_indices = candidates;

    MarkingOutcome out;
    out.marked_delta = tuned - local_params;
    out.markers = std::move(markers);
    out.train_inputs = std::move(train_inputs);
    out.train_labels = std::move(train_labels);
    return out;
}

namespace {

// Fine-tune with the bit-embedding penalty added to the first layer's
// gradient: mean binary cross-entropy of sigmoid(X theta) against the bits.
VectorXd me_penalty_finetune(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs,
                             const VectorXi& labels, const MatrixXd& X, const VectorXd& target,
                             double penalty_weight, const MarkTuning& tuning) {
    const int embed_layer = 0;
    const int dim = static_cast<int>(X.cols());
    VectorXd p = params;
    Batch batch{inputs, labels};
    for (int it = 0; it < tuning.ft_iters; ++it) {
        LossGrad lg = loss_and_grad(spec, p, batch);
        auto W = weight_view(spec, p, embed_layer);
        Eigen::Map<const VectorXd> theta(W.data(), dim);
        VectorXd s = (1.0 + (-(X * theta).array()).exp()).inverse().matrix();
        VectorXd residual = s - target;
        VectorXd pen_grad = X.transpose() * residual * (penalty_weight / X.rows());
        VectorXd grad = lg.grad;
        auto gW = weight_view(spec, grad, embed_layer);
        Eigen::Map<VectorXd>(gW.data(), dim) += pen_grad;
        p = sgd_step(p, grad, tuning.ft_lr);
    }
    return p;
}

}  // namespace

MarkingOutcome mark_me(const ModelSpec& spec, const VectorXd& local_params,
                       const Dataset& local_data, int bit_count, std::uint64_t projection_seed,
                       double penalty_weight, const MarkTuning& tuning) {
    const int embed_layer = 0;  // first hidden layer's weight block
    const int dim = spec.layer_sizes[1] * spec.layer_sizes[0];
    if (dim < bit_count)
        throw CapabilityError("embedding layer has " + std::to_string(dim) +
                              " weights, fewer than " + std::to_string(bit_count) + " bits");
    const MatrixXd X = projection_matrix(bit_count, dim, projection_seed);
    const std::vector<std::uint8_t> bits = payload_bits(bit_count, projection_seed);
    VectorXd target(bit_count);
    for (int i = 0; i < bit_count; ++i) target[i] = bits[static_cast<std::size_t>(i)];

    VectorXd p = me_penalty_finetune(spec, local_params, local_data.features, local_data.labels, X,
                                     target, penalty_weight, tuning);

    MarkerSet markers;
    markers.kind = MarkerKind::kME;
    markers.metric = bound_metric(markers.kind);
    markers.bits = bits;
    markers.projection_seed = projection_seed;
    markers.embed_layer = embed_layer;

    MarkingOutcome out;
    out.marked_delta = p - local_params;
    out.markers = std::move(markers);
    out.train_inputs = local_data.features;
    out.train_labels = local_data.labels;
    return out;
}

VectorXd refresh_mark(const ModelSpec& spec, const VectorXd& global, const VectorXd& warm_delta,
                      const MarkingOutcome& outcome, const Dataset& local_data,
                      double me_penalty_weight, const MarkTuning& tuning) {
    const VectorXd start = global + warm_delta;
    if (outcome.markers.kind == MarkerKind::kME) {
        const int dim = spec.layer_sizes[1] * spec.layer_sizes[0];
        const int bit_count = static_cast<int>(outcome.markers.bits.size());
        const MatrixXd X = projection_matrix(bit_count, dim, outcome.markers.projection_seed);
        VectorXd target(bit_count);
        for (int i = 0; i < bit_count; ++i)
            target[i] = outcome.markers.bits[static_cast<std::size_t>(i)];
        VectorXd p = me_penalty_finetune(spec, start, local_data.features, local_data.labels, X,
                                         target, me_penalty_weight, tuning);
        return p - global;
    }
    return finetune(spec, start, outcome.train_inputs, outcome.train_labels, tuning) - global;
}

namespace {

struct BoundaryPoint {
    VectorXd x;
    double gap;
};

// Walk PGD toward misclassification, then bisect the crossing segment until
// the top-2 probability gap closes.
std::optional<BoundaryPoint> boundary_search(const ModelSpec& spec, const VectorXd& params,
                                             const VectorXd& x0, int label, double gamma,
                                             const PgdConfig& pgd) {
    const double step = pgd.step_frac * pgd.budget / pgd.steps;
    auto top2gap = [&](const VectorXd& x) {
        Batch b{x.transpose(), VectorXi::Constant(1, label)};
        MatrixXd probs = softmax_probs(forward(spec, params, b));
        VectorXd row = probs.row(0);
        int a1;
        row.maxCoeff(&a1);
        double p1 = row[a1];
        row[a1] = -1;
        double p2 = row.maxCoeff();
        return std::make_pair(p1 - p2, a1);
    };

    VectorXd x = x0;
    auto [gap0, cls0] = top2gap(x);
    if (gap0 <= gamma) return BoundaryPoint{x, gap0};
    VectorXd prev = x;
    int prev_cls = cls0;
    for (int it = 0; it < pgd.steps; ++it) {
        VectorXd g = input_gradient(spec, params, x, label);
        x += step * g.cwiseSign();                          // ascend the loss
        x = x.cwiseMax((x0.array() - pgd.budget).matrix()).cwiseMin((x0.array() + pgd.budget).matrix());
        x = x.cwiseMax(0.0).cwiseMin(1.0);
        auto [gap, cls] = top2gap(x);
        if (gap <= gamma) return BoundaryPoint{x, gap};
        if (cls != prev_cls) {
            // Crossed the boundary between prev and x; bisect the segment.
            VectorXd lo = prev, hi = x;
            for (int b = 0; b < pgd.bisect_iters; ++b) {
                VectorXd mid = 0.5 * (lo + hi);
                auto [mgap, mcls] = top2gap(mid);
                if (mgap <= gamma) return BoundaryPoint{mid, mgap};
                if (mcls == prev_cls)
                    lo = mid;
                else
                    hi = mid;
            }
            auto [fgap, fcls] = top2gap(0.5 * (lo + hi));
            if (fgap <= gamma) return BoundaryPoint{0.5 * (lo + hi), fgap};
        }
        prev = x;
        prev_cls = cls;
    }
    return std::nullopt;
}

}  // namespace

MarkingOutcome mark_bf(const ModelSpec& spec, const VectorXd& local_params,
                       const Dataset& local_data, double gamma, const PgdConfig& pgd,
                       const MarkTuning& tuning) {
    if (gamma < 0 || gamma >= 0.1) throw ConfigError("bf gamma must lie in [0, 0.1)");
    std::vector<VectorXd> points;
    std::vector<int> labels, sources;
    for (int i = 0; i < local_data.size(); ++i) {
        auto hit = boundary_search(spec, local_params, local_data.features.row(i).transpose(),
                                   local_data.labels[i], gamma, pgd);
        if (hit) {
            points.push_back(hit->x);
            labels.push_back(local_data.labels[i]);
            sources.push_back(i);
        }
    }
    if (static_cast<int>(points.size()) < pgd.min_markers)
        throw MarkingInfeasible("boundary search found " + std::to_string(points.size()) +
                                " markers, need " + std::to_string(pgd.min_markers));

    MarkerSet markers;
    markers.kind = MarkerKind::kBF;
    markers.metric = bound_metric(markers.kind);
    markers.inputs.resize(static_cast<int>(points.size()), local_data.dim());
    markers.check_labels.resize(static_cast<int>(points.size()));
    for (std::size_t i = 0; i < points.size(); ++i) {
        markers.inputs.row(static_cast<int>(i)) = points[i].transpose();
        markers.check_labels[static_cast<int>(i)] = labels[i];
    }
    markers.original_labels = markers.check_labels;
    markers.source_indices = sources;

    // Robustify: learn the boundary points correctly alongside the local data.
    MatrixXd train_inputs(local_data.size() + markers.size(), local_data.dim());
    VectorXi train_labels(local_data.size() + markers.size());
    train_inputs.topRows(local_data.size()) = local_data.features;
    train_labels.head(local_data.size()) = local_data.labels;
    train_inputs.bottomRows(markers.size()) = markers.inputs;
    train_labels.tail(markers.size()) = markers.check_labels;
    VectorXd tuned = finetune(spec, local_params, train_inputs, train_labels, tuning);

    MarkingOutcome out;
    out.marked_delta = tuned - local_params;
    out.markers = std::move(markers);
    out.train_inputs = std::move(train_inputs);
    out.train_labels = std::move(train_labels);
    return out;
}

double metric_accuracy(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs,
                       const VectorXi& labels) {
    if (inputs.rows() == 0) throw ConfigError("empty evaluation set");
    MatrixXd probs = softmax_probs(forward(spec, params, {inputs, labels}));
    int correct = 0;
    for (int i = 0; i < probs.rows(); ++i) correct += (argmax_row(probs, i) == labels[i]);
    return static_cast<double>(correct) / static_cast<double>(probs.rows());
}

double metric_loss(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs,
                   const VectorXi& labels) {
    if (inputs.rows() == 0) throw ConfigError("empty evaluation set");
    return loss_value(spec, params, {inputs, labels});
}

double metric_loss_variance(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs,
                            const VectorXi& labels) {
    if (inputs.rows() == 0) throw ConfigError("empty evaluation set");
    VectorXd losses = per_sample_losses(spec, params, {inputs, labels});
    const double mean = losses.mean();
    return (losses.array() - mean).square().sum() / losses.size();
}

double metric_kl_to_uniform(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs) {
    if (inputs.rows() == 0) throw ConfigError("empty evaluation set");
    const int C = spec.class_count();
    MatrixXd probs = softmax_probs(forward(spec, params, {inputs, VectorXi::Zero(static_cast<int>(inputs.rows()))}));
    double total = 0.0;
    for (int i = 0; i < probs.rows(); ++i)
        for (int c = 0; c < C; ++c) {
            const double p = probs(i, c);
            if (p > 0) total += p * std::log(p * C);
        }
    return total / probs.rows();
}

double metric_influence(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs,
                        const VectorXi& labels, const CheckConfig& cfg) {
    if (inputs.rows() == 0) throw ConfigError("empty evaluation set");
    if (param_count(spec) > spec.param_cap)
        throw CapabilityError("influence needs parameter count within the cap");
    Batch set{inputs, labels};
    auto apply = [&](const VectorXd& v) {
        return hessian_vector_product(spec, params, set, v, cfg.influence_damping);
    };
    CgOptions opts{cfg.influence_max_iters, cfg.influence_tol};
    double total = 0.0;
    for (int i = 0; i < inputs.rows(); ++i) {
        Batch one{inputs.row(i), labels.segment(i, 1)};
        VectorXd g = loss_and_grad(spec, params, one).grad;
        VectorXd solved = cg_solve(apply, g, opts);
        total += g.dot(solved);
    }
    return total / inputs.rows();
}

double metric_bit_match_rate(const ModelSpec& spec, const VectorXd& params,
                             const std::vector<std::uint8_t>& bits, std::uint64_t projection_seed,
                             int embed_layer) {
    const int dim = spec.layer_sizes[embed_layer + 1] * spec.layer_sizes[embed_layer];
    const int bit_count = static_cast<int>(bits.size());
    const MatrixXd X = projection_matrix(bit_count, dim, projection_seed);
    auto W = weight_view(spec, params, embed_layer);
    Eigen::Map<const VectorXd> theta(W.data(), dim);
    VectorXd z = X * theta;
    int match = 0;
    for (int i = 0; i < bit_count; ++i) {
        const int extracted = z[i] >= 0 ? 1 : 0;  // sigmoid(z) >= 0.5
        match += (extracted == bits[static_cast<std::size_t>(i)]);
    }
    return static_cast<double>(match) / bit_count;
}

double check_metric(const ModelSpec& spec, const VectorXd& params, const MarkerSet& markers,
                    const CheckConfig& cfg) {
    if (markers.kind == MarkerKind::kME)
        return metric_bit_match_rate(spec, params, markers.bits, markers.projection_seed,
                                     markers.embed_layer);
    return check_metric(spec, params, markers.inputs, markers.check_labels, markers.metric, cfg);
}

double check_metric(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs,
                    const VectorXi& labels, Metric metric, const CheckConfig& cfg) {
    switch (metric) {
        case Metric::kAccuracy: return metric_accuracy(spec, params, inputs, labels);
        case Metric::kLoss: return metric_loss(spec, params, inputs, labels);
        case Metric::kLossVariance: return metric_loss_variance(spec, params, inputs, labels);
        case Metric::kKl: return metric_kl_to_uniform(spec, params, inputs);
        case Metric::kInfluence: return metric_influence(spec, params, inputs, labels, cfg);
        case Metric::kBitMatchRate:
            throw ConfigError("bit match rate needs a marker payload");
    }
    throw ConfigError("unknown metric");
}

double trailing_variance(const MatrixXd& window_losses) {
    if (window_losses.rows() == 0 || window_losses.cols() == 0)
        throw ConfigError("empty loss window");
    if (window_losses.rows() == 1) {
        const double mean = window_losses.row(0).mean();
        return (window_losses.row(0).array() - mean).square().sum() / window_losses.cols();
    }
    double total = 0.0;
    for (int c = 0; c < window_losses.cols(); ++c) {
        const VectorXd col = window_losses.col(c);
        const double mean = col.mean();
        total += (col.array() - mean).square().sum() / col.size();
    }
    return total / window_losses.cols();
}

double median_of(std::vector<double> values) {
    if (values.empty()) throw ConfigError("median of an empty window");
    std::sort(values.begin(), values.end());
    const std::size_t m = values.size();
    return m % 2 == 1 ? values[m / 2] : 0.5 * (values[m / 2 - 1] + values[m / 2]);
}

double metric_diff(double baseline, double current) { return std::abs(baseline - current); }

double metric_diff_smoothed(double baseline, const std::vector<double>& trailing_window) {
    return std::abs(baseline - median_of(trailing_window));
}

double signed_improvement(Metric metric, double baseline, double current) {
    switch (metric) {
        case Metric::kLoss:
        case Metric::kLossVariance:
        case Metric::kInfluence:
            return current - baseline;  // unlearning pushes these up
        case Metric::kAccuracy:
        case Metric::kKl:
        case Metric::kBitMatchRate:
            return baseline - current;
    }
    return 0.0;
}

double decision_threshold(Metric metric, const CheckConfig& cfg, double baseline) {
    switch (metric) {
        case Metric::kAccuracy: return cfg.delta_accuracy;
        case Metric::kLoss: return cfg.delta_loss;
        case Metric::kLossVariance:
            return std::max(1e-12, cfg.delta_variance_factor * baseline);
        case Metric::kKl: return cfg.delta_kl;
        case Metric::kInfluence: return cfg.delta_loss;
        case Metric::kBitMatchRate: return cfg.delta_bits;
    }
    return cfg.delta_loss;
}

std::string decision_name(Decision d) {
    return d == Decision::kAssuredPrivacy ? "assured_privacy" : "distrust";
}

Decision verify_decision(double signed_diff, double threshold) {
    if (threshold <= 0) throw ConfigError("decision threshold must be > 0");
    return signed_diff >= threshold ? Decision::kAssuredPrivacy : Decision::kDistrust;
}

std::optional<double> correlation_report(const std::vector<double>& marker_series,
                                         const std::vector<double>& leaving_series) {
    if (marker_series.size() != leaving_series.size())
        throw ConfigError("correlation needs series of equal length");
    if (marker_series.size() < 3) throw ConfigError("correlation needs at least 3 points");
    const double n = static_cast<double>(marker_series.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < marker_series.size(); ++i) {
        ma += marker_series[i];
        mb += leaving_series[i];
    }
    ma /= n;
    mb /= n;
    double num = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < marker_series.size(); ++i) {
        num += (marker_series[i] - ma) * (leaving_series[i] - mb);
        va += (marker_series[i] - ma) * (marker_series[i] - ma);
        vb += (leaving_series[i] - mb) * (leaving_series[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return std::nullopt;
    return num / std::sqrt(va * vb);
}

std::string marker_to_json(const MarkerSet& m) {
    nlohmann::json j;
    j["kind"] = marker_name(m.kind);
    j["metric"] = metric_name(m.metric);
    if (m.inputs.size() > 0) {
        j["rows"] = m.inputs.rows();
        j["cols"] = m.inputs.cols();
        j["inputs_b64"] = base64_encode(reinterpret_cast<const unsigned char*>(m.inputs.data()),
                                        sizeof(double) * static_cast<std::size_t>(m.inputs.size()));
        j["check_labels"] = std::vector<int>(m.check_labels.data(),
                                             m.check_labels.data() + m.check_labels.size());
        j["original_labels"] = std::vector<int>(m.original_labels.data(),
                                                m.original_labels.data() + m.original_labels.size());
        j["source_indices"] = m.source_indices;
    }
    if (!m.bits.empty()) {
        std::string hex;
        static const char* digits = "0123456789abcdef";
        std::uint8_t acc = 0;
        int nbits = 0;
        for (std::uint8_t b : m.bits) {
            acc = static_cast<std::uint8_t>((acc << 1) | (b & 1));
            if (++nbits == 4) {
                hex.push_back(digits[acc]);
                acc = 0;
                nbits = 0;
            }
        }
        if (nbits > 0) hex.push_back(digits[acc << (4 - nbits)]);
        j["bits_hex"] = hex;
        j["bit_count"] = m.bits.size();
        j["projection_seed"] = m.projection_seed;
        j["embed_layer"] = m.embed_layer;
    }
    return j.dump();
}

MarkerSet marker_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    MarkerSet m;
    m.kind = marker_from_name(j.at("kind").get<std::string>());
    m.metric = bound_metric(m.kind);
    if (j.contains("rows")) {
        const int rows = j.at("rows").get<int>(), cols = j.at("cols").get<int>();
        auto raw = base64_decode(j.at("inputs_b64").get<std::string>());
        if (raw.size() != sizeof(double) * static_cast<std::size_t>(rows) * cols)
            throw FormatError("marker tensor payload size mismatch");
        m.inputs.resize(rows, cols);
        std::memcpy(m.inputs.data(), raw.data(), raw.size());
        auto cl = j.at("check_labels").get<std::vector<int>>();
        auto ol = j.at("original_labels").get<std::vector<int>>();
        m.check_labels = Eigen::Map<VectorXi>(cl.data(), static_cast<Eigen::Index>(cl.size()));
        m.original_labels = Eigen::Map<VectorXi>(ol.data(), static_cast<Eigen::Index>(ol.size()));
        m.source_indices = j.value("source_indices", std::vector<int>{});
    }
    if (j.contains("bits_hex")) {
        const auto hex = j.at("bits_hex").get<std::string>();
        const int count = j.at("bit_count").get<int>();
        m.bits.clear();
        for (char c : hex) {
            const int v = (c >= 'a') ? c - 'a' + 10 : c - '0';
            for (int k = 3; k >= 0; --k) m.bits.push_back(static_cast<std::uint8_t>((v >> k) & 1));
        }
        m.bits.resize(static_cast<std::size_t>(count));
        m.projection_seed = j.at("projection_seed").get<std::uint64_t>();
        m.embed_layer = j.at("embed_layer").get<int>();
    }
    return m;
}

}  // namespace fedul
