#include <cmath>

#include "doctest.h"
#include "fedul/errors.hpp"
#include "fedul/verify.hpp"
#include "oracles.hpp"

using namespace fedul;

namespace {

ModelSpec spec_4_8_3() {
    ModelSpec spec;
    spec.layer_sizes = {4, 8, 3};
    return spec;
}

// Training data where classes sit on distinct corners; participant-scale.
Dataset corner_data(int per_class = 12, std::uint64_t seed = 2) {
    SyntheticConfig cfg;
    cfg.class_count = 3;
    cfg.feature_dim = 4;
    cfg.per_class = per_class;
    cfg.cluster_spread = 0.06;
    cfg.rare_cluster_fraction = 0.0;
    cfg.seed = seed;
    cfg.image_shape = false;
    return gen_synthetic(cfg);
}

VectorXd trained_params(const ModelSpec& spec, const Dataset& ds, int iters = 150,
                        double lr = 0.3) {
    Rng rng(9);
    VectorXd w = init_params(spec, rng);
    Batch all{ds.features, ds.labels};
    for (int i = 0; i < iters; ++i) w = sgd_step(w, loss_and_grad(spec, w, all).grad, lr);
    return w;
}

}  // namespace

TEST_CASE("bound metric binding follows the marker kind") {
    CHECK(bound_metric(MarkerKind::kEM) == Metric::kLoss);
    CHECK(bound_metric(MarkerKind::kFM) == Metric::kLossVariance);
    CHECK(bound_metric(MarkerKind::kBN) == Metric::kAccuracy);
    CHECK(bound_metric(MarkerKind::kME) == Metric::kBitMatchRate);
    CHECK(bound_metric(MarkerKind::kBF) == Metric::kAccuracy);
    CHECK(marker_from_name("EM") == MarkerKind::kEM);
    CHECK_THROWS_AS(marker_from_name("zz"), ConfigError);
}

TEST_CASE("em: majority rule on the loss-ranked head") {
    // 40 samples; craft per-sample losses via a model that misreads class 2
    // samples; the top-10% should come out {2,2,2,x} -> three markers.
    ModelSpec spec = spec_4_8_3();
    Dataset ds = corner_data(14, 5);  // 42 samples
    VectorXd w = trained_params(spec, ds);

    // Plant five erroneous samples so they own the loss-ranked head (kappa
    // 0.1 of 42 keeps 5): three of class 2 and two of class 0, each moved
    // onto another class's territory where the model confidently disagrees.
    VectorXd mean0 = VectorXd::Zero(4), mean1 = VectorXd::Zero(4);
    int n0 = 0, n1 = 0;
    for (int i = 0; i < ds.size(); ++i) {
        if (ds.labels[i] == 0) {
            mean0 += ds.features.row(i).transpose();
            ++n0;
        } else if (ds.labels[i] == 1) {
            mean1 += ds.features.row(i).transpose();
            ++n1;
        }
    }
    mean0 /= n0;
    mean1 /= n1;
    std::vector<int> idx2, idx0;
    for (int i = 0; i < ds.size(); ++i) {
        if (ds.labels[i] == 2 && idx2.size() < 3) idx2.push_back(i);
        if (ds.labels[i] == 0 && idx0.size() < 2) idx0.push_back(i);
    }
    for (int i : idx2) ds.features.row(i) = mean0.transpose();  // class 2 reads as class 0
    for (int i : idx0) ds.features.row(i) = mean1.transpose();  // class 0 reads as class 1

    MarkingOutcome out = mark_em(spec, w, ds, 0.1, {50, 0.1}, 2);
    REQUIRE(out.markers.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(out.markers.original_labels[i] == 2);
    // all markers share one check label (the most predicted one)
    for (int i = 1; i < 3; ++i) CHECK(out.markers.check_labels[i] == out.markers.check_labels[0]);
    CHECK(out.markers.metric == Metric::kLoss);

    SUBCASE("fine-tuning lowers the marker loss") {
        const double before = metric_loss(spec, w, out.markers.inputs, out.markers.check_labels);
        const double after = metric_loss(spec, w + out.marked_delta, out.markers.inputs,
                                         out.markers.check_labels);
        CHECK(after < before);
        CHECK(after < 0.5 * before);  // at least halved by the fine-tune
    }
}

TEST_CASE("em: infeasible when the majority class is a singleton") {
    ModelSpec spec = spec_4_8_3();
    Dataset ds = corner_data(4, 6);  // 12 samples; kappa 0.1 -> top-2
    VectorXd w = trained_params(spec, ds, 60);
    // top-2 will rarely share a class with per-class=4; force distinct classes
    // by corrupting one sample of class 0 and one of class 1.
    int a = -1, b = -1;
    for (int i = 0; i < ds.size(); ++i) {
        if (ds.labels[i] == 0 && a < 0) a = i;
        if (ds.labels[i] == 1 && b < 0) b = i;
    }
    ds.features.row(a).setConstant(0.0);
    ds.features.row(b).setConstant(0.0);
    CHECK_THROWS_AS(mark_em(spec, w, ds, 0.1, {10, 0.1}, 2), MarkingInfeasible);
}

TEST_CASE("fm: selection by trailing variance") {
    ModelSpec spec = spec_4_8_3();
    Dataset ds = corner_data(10, 7);  // 30 samples
    VectorXd w = trained_params(spec, ds, 80);

    const int n = ds.size();
    MatrixXd hist(4, n);
    // constant losses everywhere except samples 3 and 17 which oscillate
    hist.setConstant(0.4);
    for (int r = 0; r < 4; ++r) {
        hist(r, 3) = (r % 2) ? 2.0 : 0.1;
        hist(r, 17) = (r % 2) ? 1.5 : 0.2;
    }
    MarkingOutcome out = mark_fm(spec, w, hist, ds, 0.1, {40, 0.1});
    REQUIRE(out.markers.size() == 2);  // 0.1 * 30 rounds to 3, but only 2 vary
    CHECK(out.markers.source_indices[0] == 3);
    CHECK(out.markers.source_indices[1] == 17);
    CHECK(out.markers.metric == Metric::kLossVariance);

    SUBCASE("exact count when enough variation exists") {
        MatrixXd noisy(4, n);
        Rng rng(12);
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < n; ++c) noisy(r, c) = rng.uniform(0, 2);
        MarkingOutcome big = mark_fm(spec, w, noisy, ds, 0.1, {20, 0.1});
        CHECK(big.markers.size() == 3);  // round(0.1 * 30)
    }
    SUBCASE("too little history is infeasible") {
        MatrixXd two_rounds = hist.topRows(2);
        CHECK_THROWS_AS(mark_fm(spec, w, two_rounds, ds, 0.1, {10, 0.1}), MarkingInfeasible);
    }
    SUBCASE("flat history has nothing to mark") {
        MatrixXd flat = MatrixXd::Constant(4, n, 0.7);
        CHECK_THROWS_AS(mark_fm(spec, w, flat, ds, 0.1, {10, 0.1}), MarkingInfeasible);
    }
}

TEST_CASE("bn: backdoor marking on image-shaped data") {
    SyntheticConfig cfg;
    cfg.class_count = 3;
    cfg.feature_dim = 16;  // 4x4 image
    cfg.per_class = 14;
    cfg.cluster_spread = 0.08;
    cfg.rare_cluster_fraction = 0.0;
    cfg.seed = 8;
    Dataset ds = gen_synthetic(cfg);
    REQUIRE(ds.image_shaped());
    ModelSpec spec;
    spec.layer_sizes = {16, 12, 3};
    VectorXd w = trained_params(spec, ds, 120);

    TriggerSpec trig;
    trig.size = 2;
    trig.transparency = 0.0;
    trig.target_class = 0;
    trig.poison_ratio = 0.3;

    Rng rng(3);
    MarkingOutcome out = mark_bn(spec, w, ds, trig, {200, 0.2}, 100, rng);
    CHECK(out.markers.metric == Metric::kAccuracy);
    CHECK(out.markers.size() > 0);
    for (int i = 0; i < out.markers.check_labels.size(); ++i) {
        CHECK(out.markers.check_labels[i] == 0);
        CHECK(out.markers.original_labels[i] != 0);  // held-out non-target samples
    }
    // the marked local model predicts the target on triggered samples
    const double asr = metric_accuracy(spec, w + out.marked_delta, out.markers.inputs,
                                       out.markers.check_labels);
    CHECK(asr >= 0.8);

    SUBCASE("non-image data is a capability error") {
        Dataset flat = corner_data();
        CHECK_THROWS_AS(mark_bn(spec_4_8_3(), trained_params(spec_4_8_3(), flat), flat, trig,
                                {10, 0.1}, 10, rng),
                        CapabilityError);
    }
}

TEST_CASE("me: embedding converges locally, random params match half the bits") {
    ModelSpec spec = spec_4_8_3();  // first layer 8x4 = 32 weights
    Dataset ds = corner_data(10, 9);
    VectorXd w = trained_params(spec, ds, 60);

    MarkingOutcome out = mark_me(spec, w, ds, 16, 77, 0.5, {300, 0.2});
    CHECK(out.markers.bits.size() == 16);
    const double rate = metric_bit_match_rate(spec, w + out.marked_delta, out.markers.bits, 77, 0);
    CHECK(rate == doctest::Approx(1.0));

    // unmarked random parameters: expected 0.5 match over many seeds
    double total = 0;
    const int runs = 100;
    for (int s = 0; s < runs; ++s) {
        Rng rng(500 + static_cast<unsigned>(s));
        VectorXd fresh = init_params(spec, rng);
        total += metric_bit_match_rate(spec, fresh, out.markers.bits, 77, 0);
    }
    CHECK(total / runs == doctest::Approx(0.5).epsilon(0.1));

    SUBCASE("layer too small for the payload") {
        CHECK_THROWS_AS(mark_me(spec, w, ds, 64, 1, 0.05, {10, 0.1}), CapabilityError);
    }
}

TEST_CASE("bf: boundary gap predicate and robustification") {
    // Higher-dimensional features keep boundary markers from opposite classes
    // apart, so the robustifying fine-tune can learn them all.
    SyntheticConfig dcfg;
    dcfg.class_count = 3;
    dcfg.feature_dim = 16;
    dcfg.per_class = 14;
    dcfg.cluster_spread = 0.06;
    dcfg.rare_cluster_fraction = 0.0;
    dcfg.seed = 11;
    dcfg.image_shape = false;
    Dataset ds = gen_synthetic(dcfg);
    ModelSpec spec;
    spec.layer_sizes = {16, 16, 3};
    VectorXd w = trained_params(spec, ds, 150);

    PgdConfig pgd;
    pgd.steps = 30;
    pgd.budget = 0.4;
    pgd.min_markers = 2;
    MarkingOutcome out = mark_bf(spec, w, ds, 0.01, pgd, {800, 0.3});
    CHECK(out.markers.size() >= 2);
    CHECK(out.markers.metric == Metric::kAccuracy);

    // every marker satisfies the gap condition against the marking-time model
    MatrixXd probs = softmax_probs(forward(
        spec, w, {out.markers.inputs, VectorXi::Zero(out.markers.size())}));
    for (int i = 0; i < probs.rows(); ++i) {
        VectorXd row = probs.row(i);
        int a;
        row.maxCoeff(&a);
        double p1 = row[a];
        row[a] = -1;
        CHECK(p1 - row.maxCoeff() <= 0.01 + 1e-12);
    }

    // robustified: the tuned model classifies the markers correctly
    const double acc = metric_accuracy(spec, w + out.marked_delta, out.markers.inputs,
                                       out.markers.check_labels);
    CHECK(acc >= 0.9);

    SUBCASE("gamma zero accepts only exact ties and comes up empty") {
        CHECK_THROWS_AS(mark_bf(spec, w, ds, 0.0, pgd, {10, 0.1}), MarkingInfeasible);
    }
    SUBCASE("gamma out of range") {
        CHECK_THROWS_AS(mark_bf(spec, w, ds, 0.2, pgd, {10, 0.1}), ConfigError);
    }
}

TEST_CASE("gap acceptance arithmetic: probabilities (0.505, 0.495) pass gamma 0.01") {
    // direct check of the acceptance inequality used by the boundary search
    const double gap = std::abs(0.505 - 0.495);
    CHECK(gap <= 0.01 + 1e-15);
}

TEST_CASE("kl metric: uniform, one-hot, and positivity") {
    ModelSpec spec;
    spec.layer_sizes = {4, 10};
    VectorXd zero = VectorXd::Zero(param_count(spec));
    Rng rng(4);
    MatrixXd inputs(6, 4);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 4; ++j) inputs(i, j) = rng.uniform(-1, 1);
    CHECK(metric_kl_to_uniform(spec, zero, inputs) <= 1e-9);  // uniform predictions

    // fully confident two-class model: KL = ln 2
    ModelSpec two;
    two.layer_sizes = {4, 2};
    VectorXd conf = VectorXd::Zero(param_count(two));
    bias_view(two, conf, 0)[0] = 200.0;  // one-hot on class 0 regardless of input
    CHECK(metric_kl_to_uniform(two, conf, inputs) == doctest::Approx(std::log(2.0)).epsilon(1e-9));

    // fully confident C=10 model: KL = ln C
    ModelSpec ten;
    ten.layer_sizes = {4, 10};
    VectorXd conf10 = VectorXd::Zero(param_count(ten));
    bias_view(ten, conf10, 0)[3] = 300.0;
    CHECK(metric_kl_to_uniform(ten, conf10, inputs) ==
          doctest::Approx(std::log(10.0)).epsilon(1e-6));

    // KL >= 0 on random models and zero only at uniform
    ModelSpec m = spec_4_8_3();
    for (int t = 0; t < 10; ++t) {
        Rng r(40 + static_cast<unsigned>(t));
        VectorXd params = init_params(m, r);
        CHECK(metric_kl_to_uniform(m, params, inputs) >= 0.0);
    }
}

TEST_CASE("influence matches a dense solve on a small model") {
    ModelSpec spec;
    spec.layer_sizes = {3, 5, 2};
    Dataset ds;
    SyntheticConfig cfg;
    cfg.class_count = 2;
    cfg.feature_dim = 3;
    cfg.per_class = 8;
    cfg.cluster_spread = 0.1;
    cfg.rare_cluster_fraction = 0;
    cfg.seed = 3;
    cfg.image_shape = false;
    ds = gen_synthetic(cfg);
    VectorXd w = trained_params(spec, ds, 200, 0.4);

    CheckConfig chk;
    chk.influence_damping = 1.0;  // dominate any indefiniteness
    chk.influence_max_iters = 200;
    chk.influence_tol = 1e-10;
    const double got = metric_influence(spec, w, ds.features, ds.labels, chk);

    Batch all{ds.features, ds.labels};
    MatrixXd H = oracle::fd_hessian(spec, w, all);
    MatrixXd damped = H + chk.influence_damping * MatrixXd::Identity(H.rows(), H.cols());
    double want = 0;
    for (int i = 0; i < ds.size(); ++i) {
        Batch one{ds.features.row(i), ds.labels.segment(i, 1)};
        VectorXd g = loss_and_grad(spec, w, one).grad;
        want += g.dot(damped.ldlt().solve(g).eval());
    }
    want /= ds.size();
    CHECK(got == doctest::Approx(want).epsilon(1e-5));

    SUBCASE("parameter cap refuses") {
        ModelSpec capped = spec;
        capped.param_cap = param_count(spec);  // equal still fine
        CHECK_NOTHROW(metric_influence(capped, w, ds.features, ds.labels, chk));
        capped.param_cap = param_count(spec) - 1;
        CHECK_THROWS_AS(metric_influence(capped, w, ds.features, ds.labels, chk),
                        CapabilityError);
    }
}

TEST_CASE("metric_diff, median smoothing, signed conventions, decisions") {
    CHECK(metric_diff(84.8, 0.0) == doctest::Approx(84.8));
    CHECK(metric_diff(3.0, 3.0) == 0.0);
    CHECK(metric_diff_smoothed(0.0, {10, 0, 90}) == doctest::Approx(10.0));
    CHECK(median_of({1, 2, 3, 4}) == doctest::Approx(2.5));

    CHECK(signed_improvement(Metric::kLoss, 1.0, 3.0) == doctest::Approx(2.0));
    CHECK(signed_improvement(Metric::kAccuracy, 0.9, 0.1) == doctest::Approx(0.8));
    CHECK(signed_improvement(Metric::kKl, 2.0, 0.5) == doctest::Approx(1.5));
    CHECK(signed_improvement(Metric::kBitMatchRate, 1.0, 0.5) == doctest::Approx(0.5));

    CHECK(verify_decision(84.8, 20.0) == Decision::kAssuredPrivacy);
    CHECK(verify_decision(0.0, 0.1) == Decision::kDistrust);
    CHECK(verify_decision(0.5, 0.5) == Decision::kAssuredPrivacy);  // >= convention
    CHECK_THROWS_AS(verify_decision(1.0, 0.0), ConfigError);

    CheckConfig chk;
    CHECK(decision_threshold(Metric::kAccuracy, chk, 0.0) == doctest::Approx(0.2));
    CHECK(decision_threshold(Metric::kLoss, chk, 0.0) == doctest::Approx(0.5));
    CHECK(decision_threshold(Metric::kLossVariance, chk, 0.3) == doctest::Approx(0.6));
    CHECK(decision_threshold(Metric::kKl, chk, 0.0) == doctest::Approx(0.5));
    CHECK(decision_threshold(Metric::kBitMatchRate, chk, 0.0) == doctest::Approx(0.2));
}

TEST_CASE("trailing variance: single row falls back to cross-sectional") {
    MatrixXd one(1, 3);
    one << 1.0, 2.0, 3.0;
    CHECK(trailing_variance(one) == doctest::Approx(2.0 / 3.0));
    MatrixXd three(3, 2);
    three << 0, 5, 1, 5, 2, 5;
    // per-sample variances: var(0,1,2) = 2/3, var(5,5,5) = 0 -> mean 1/3
    CHECK(trailing_variance(three) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("correlation: exact cases and degenerate series") {
    std::vector<double> a = {1, 2, 3, 4};
    CHECK(*correlation_report(a, a) == doctest::Approx(1.0));
    std::vector<double> neg = {-1, -2, -3, -4};
    CHECK(*correlation_report(a, neg) == doctest::Approx(-1.0));
    std::vector<double> flat = {5, 5, 5, 5};
    CHECK_FALSE(correlation_report(a, flat).has_value());
    CHECK_THROWS_AS(correlation_report(a, {1.0, 2.0}), ConfigError);
    // agreement with an independent implementation
    std::vector<double> b = {2, 1, 4, 3};
    CHECK(*correlation_report(a, b) == doctest::Approx(oracle::pearson(a, b)));
}

TEST_CASE("marker set json round-trip") {
    MarkerSet m;
    m.kind = MarkerKind::kEM;
    m.metric = bound_metric(m.kind);
    m.inputs.resize(2, 3);
    m.inputs << 0.25, -1.5, 3.0, 0.0, 0.125, -2.0;
    m.check_labels.resize(2);
    m.check_labels << 1, 1;
    m.original_labels.resize(2);
    m.original_labels << 0, 2;
    m.source_indices = {4, 9};

    MarkerSet back = marker_from_json(marker_to_json(m));
    CHECK(back.kind == m.kind);
    CHECK(back.inputs == m.inputs);  // bit-exact through base64
    CHECK(back.check_labels == m.check_labels);
    CHECK(back.original_labels == m.original_labels);
    CHECK(back.source_indices == m.source_indices);

    MarkerSet me;
    me.kind = MarkerKind::kME;
    me.metric = bound_metric(me.kind);
    me.bits = {1, 0, 1, 1, 0, 0, 1, 0, 1};
    me.projection_seed = 123456789;
    me.embed_layer = 0;
    MarkerSet me_back = marker_from_json(marker_to_json(me));
    CHECK(me_back.bits == me.bits);
    CHECK(me_back.projection_seed == me.projection_seed);
}
