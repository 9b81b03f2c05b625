#include <cmath>

#include "doctest.h"
#include "fedul/errors.hpp"
#include "fedul/nn.hpp"
#include "fedul/rng.hpp"
#include "oracles.hpp"

using namespace fedul;

namespace {

ModelSpec mlp(std::vector<int> sizes, Activation act = Activation::kRelu) {
    ModelSpec spec;
    spec.layer_sizes = std::move(sizes);
    spec.activation = act;
    return spec;
}

Batch random_batch(Rng& rng, int n, int dim, int classes) {
    Batch b;
    b.inputs.resize(n, dim);
    for (int i = 0; i < n; ++i)
        for (int d = 0; d < dim; ++d) b.inputs(i, d) = rng.uniform(-1, 1);
    b.labels.resize(n);
    for (int i = 0; i < n; ++i) b.labels[i] = rng.uniform_int(0, classes - 1);
    return b;
}

double max_rel_err(const VectorXd& got, const VectorXd& want) {
    double worst = 0;
    for (Eigen::Index i = 0; i < got.size(); ++i) {
        const double scale = std::max(1e-8, std::abs(want[i]));
        worst = std::max(worst, std::abs(got[i] - want[i]) / scale);
    }
    return worst;
}

}  // namespace

TEST_CASE("forward: zero weights give zero logits and uniform softmax") {
    ModelSpec spec = mlp({4, 8, 10});
    VectorXd params = VectorXd::Zero(param_count(spec));
    Rng rng(7);
    Batch b = random_batch(rng, 3, 4, 10);
    MatrixXd logits = forward(spec, params, b);
    CHECK(logits.cwiseAbs().maxCoeff() == 0.0);
    MatrixXd p = softmax_probs(logits);
    for (int i = 0; i < p.rows(); ++i)
        for (int c = 0; c < 10; ++c) CHECK(p(i, c) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("forward: identity single layer maps input to logits") {
    ModelSpec spec = mlp({3, 3});
    VectorXd params = VectorXd::Zero(param_count(spec));
    auto W = weight_view(spec, params, 0);
    W.setIdentity();
    Batch b;
    b.inputs.resize(1, 3);
    b.inputs << 0.3, -1.2, 2.5;
    b.labels = VectorXi::Constant(1, 0);
    MatrixXd logits = forward(spec, params, b);
    CHECK(logits(0, 0) == doctest::Approx(0.3));
    CHECK(logits(0, 1) == doctest::Approx(-1.2));
    CHECK(logits(0, 2) == doctest::Approx(2.5));
}

TEST_CASE("forward matches a naive reimplementation on random models") {
    for (auto act : {Activation::kRelu, Activation::kTanh}) {
        ModelSpec spec = mlp({5, 11, 4}, act);
        Rng rng(42);
        VectorXd params = init_params(spec, rng);
        Batch b = random_batch(rng, 6, 5, 4);
        MatrixXd got = forward(spec, params, b);
        MatrixXd want = oracle::naive_forward(spec, params, b.inputs);
        CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("loss: uniform logits with C=10 give ln 10") {
    ModelSpec spec = mlp({4, 10});
    VectorXd params = VectorXd::Zero(param_count(spec));
    Rng rng(3);
    Batch b = random_batch(rng, 5, 4, 10);
    CHECK(loss_value(spec, params, b) == doctest::Approx(std::log(10.0)).epsilon(1e-9));
}

TEST_CASE("loss: saturated correct predictions give near-zero loss and gradient") {
    ModelSpec spec = mlp({2, 2});
    VectorXd params = VectorXd::Zero(param_count(spec));
    auto W = weight_view(spec, params, 0);
    W << 40.0, 0.0, 0.0, 40.0;  // huge margins
    Batch b;
    b.inputs.resize(2, 2);
    b.inputs << 1, 0, 0, 1;
    b.labels.resize(2);
    b.labels << 0, 1;
    LossGrad lg = loss_and_grad(spec, params, b);
    CHECK(lg.loss < 1e-8);
    CHECK(lg.grad.norm() < 1e-3);
}

TEST_CASE("gradients match central finite differences on random small models") {
    // Acceptance-grade: 20 random models, both activations, rel err <= 1e-4.
    int model = 0;
    for (int trial = 0; trial < 10; ++trial) {
        for (auto act : {Activation::kRelu, Activation::kTanh}) {
            Rng rng(1000 + static_cast<unsigned>(model++));
            ModelSpec spec = mlp({2, 16, 3}, act);
            VectorXd params = init_params(spec, rng);
            Batch b = random_batch(rng, 4, 2, 3);
            VectorXd got = loss_and_grad(spec, params, b).grad;
            VectorXd want = oracle::fd_param_gradient(spec, params, b);
            CHECK(max_rel_err(got, want) <= 1e-4);
        }
    }
}

TEST_CASE("input gradient: logistic closed form") {
    // Two-class linear net with logits (w^T x, 0): grad_x = (sigma(w^T x) - 1[y=0]) * w.
    ModelSpec spec = mlp({3, 2});
    VectorXd params = VectorXd::Zero(param_count(spec));
    auto W = weight_view(spec, params, 0);
    VectorXd w(3);
    w << 0.7, -1.1, 0.4;
    W.row(0) = w.transpose();
    VectorXd x(3);
    x << 0.2, 0.5, -0.3;
    const double sig = 1.0 / (1.0 + std::exp(-w.dot(x)));

    VectorXd g0 = input_gradient(spec, params, x, 0);
    VectorXd want0 = (sig - 1.0) * w;
    CHECK((g0 - want0).cwiseAbs().maxCoeff() < 1e-12);

    VectorXd g1 = input_gradient(spec, params, x, 1);
    VectorXd want1 = sig * w;
    CHECK((g1 - want1).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("input gradient matches finite differences; zero weights give zero") {
    Rng rng(11);
    ModelSpec spec = mlp({6, 9, 4}, Activation::kTanh);
    VectorXd params = init_params(spec, rng);
    VectorXd x(6);
    for (int i = 0; i < 6; ++i) x[i] = rng.uniform(-1, 1);
    VectorXd got = input_gradient(spec, params, x, 2);
    VectorXd want = oracle::fd_input_gradient(spec, params, x, 2);
    CHECK(max_rel_err(got, want) <= 1e-4);

    VectorXd zero = VectorXd::Zero(param_count(spec));
    CHECK(input_gradient(spec, zero, x, 1).norm() == 0.0);
}

TEST_CASE("sgd_step arithmetic and identity") {
    VectorXd p(2), g(2);
    p << 1, 1;
    g << 1, -1;
    VectorXd next = sgd_step(p, g, 0.5);
    CHECK(next[0] == doctest::Approx(0.5));
    CHECK(next[1] == doctest::Approx(1.5));
    CHECK((sgd_step(p, g, 0.0) - p).norm() == 0.0);
}

TEST_CASE("sgd descent is monotone on a convex problem") {
    // Linear model + cross-entropy is convex in the parameters.
    ModelSpec spec = mlp({3, 2});
    Rng rng(5);
    VectorXd params = init_params(spec, rng);
    Batch b = random_batch(rng, 8, 3, 2);
    double prev = loss_value(spec, params, b);
    for (int i = 0; i < 100; ++i) {
        LossGrad lg = loss_and_grad(spec, params, b);
        params = sgd_step(params, lg.grad, 0.1);
        const double now = lg.loss;  // loss evaluated before the step
        CHECK(now <= prev + 1e-12);
        prev = now;
    }
}

TEST_CASE("hvp matches finite-difference Hessian columns") {
    for (auto act : {Activation::kRelu, Activation::kTanh}) {
        Rng rng(21);
        ModelSpec spec = mlp({3, 7, 3}, act);
        VectorXd params = init_params(spec, rng);
        Batch b = random_batch(rng, 5, 3, 3);
        MatrixXd H = oracle::fd_hessian(spec, params, b);
        VectorXd v(params.size());
        for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(-1, 1);
        VectorXd got = hessian_vector_product(spec, params, b, v, 0.0);
        VectorXd want = H * v;
        CHECK((got - want).cwiseAbs().maxCoeff() < 5e-5);
    }
}

TEST_CASE("hvp symmetry and linearity") {
    Rng rng(33);
    ModelSpec spec = mlp({4, 6, 3}, Activation::kTanh);
    VectorXd params = init_params(spec, rng);
    Batch b = random_batch(rng, 6, 4, 3);
    VectorXd u(params.size()), v(params.size());
    for (Eigen::Index i = 0; i < u.size(); ++i) {
        u[i] = rng.uniform(-1, 1);
        v[i] = rng.uniform(-1, 1);
    }
    VectorXd Hu = hessian_vector_product(spec, params, b, u, 0.0);
    VectorXd Hv = hessian_vector_product(spec, params, b, v, 0.0);
    CHECK(v.dot(Hu) == doctest::Approx(u.dot(Hv)).epsilon(1e-6));

    VectorXd mix = hessian_vector_product(spec, params, b, 2.0 * u + 0.5 * v, 0.0);
    CHECK((mix - (2.0 * Hu + 0.5 * Hv)).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("hvp: damping on an empty set gives damping * v") {
    ModelSpec spec = mlp({3, 2});
    VectorXd params = VectorXd::Zero(param_count(spec));
    Batch empty;
    empty.inputs.resize(0, 3);
    empty.labels.resize(0);
    VectorXd e1 = VectorXd::Zero(param_count(spec));
    e1[0] = 1.0;
    VectorXd out = hessian_vector_product(spec, params, empty, e1, 0.25);
    CHECK((out - 0.25 * e1).norm() == 0.0);
}

TEST_CASE("softmax: stability and extended-precision agreement") {
    MatrixXd logits(2, 2);
    logits << 1000, 0, 0, 0;
    MatrixXd p = softmax_probs(logits);
    CHECK(p(0, 0) == doctest::Approx(1.0));
    CHECK(p(0, 1) == doctest::Approx(0.0));

    Rng rng(9);
    MatrixXd big(20, 6);
    for (int i = 0; i < big.rows(); ++i)
        for (int j = 0; j < big.cols(); ++j) big(i, j) = rng.uniform(-1e4, 1e4);
    MatrixXd got = softmax_probs(big);
    MatrixXd want = oracle::longdouble_softmax(big);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
    for (int i = 0; i < got.rows(); ++i)
        CHECK(std::abs(got.row(i).sum() - 1.0) < 1e-9);
}

TEST_CASE("forward and gradients are bitwise deterministic") {
    Rng rng1(88), rng2(88);
    ModelSpec spec = mlp({5, 8, 4});
    VectorXd p1 = init_params(spec, rng1);
    VectorXd p2 = init_params(spec, rng2);
    REQUIRE(p1 == p2);
    Rng rngb(89);
    Batch b = random_batch(rngb, 7, 5, 4);
    MatrixXd f1 = forward(spec, p1, b);
    MatrixXd f2 = forward(spec, p2, b);
    CHECK(f1 == f2);
    VectorXd g1 = loss_and_grad(spec, p1, b).grad;
    VectorXd g2 = loss_and_grad(spec, p2, b).grad;
    CHECK(g1 == g2);
}

TEST_CASE("cg solves a dense SPD system to oracle accuracy") {
    Rng rng(17);
    const int n = 24;
    MatrixXd A(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) A(i, j) = rng.uniform(-1, 1);
    MatrixXd spd = A.transpose() * A + 0.5 * MatrixXd::Identity(n, n);
    VectorXd rhs(n);
    for (int i = 0; i < n; ++i) rhs[i] = rng.uniform(-1, 1);
    VectorXd got = cg_solve([&](const VectorXd& v) { return VectorXd(spd * v); }, rhs,
                            {.max_iters = 200, .tol = 1e-12});
    VectorXd want = spd.ldlt().solve(rhs);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("dimension mismatches raise config errors") {
    ModelSpec spec = mlp({4, 3});
    VectorXd params = VectorXd::Zero(param_count(spec) + 1);
    Batch b;
    b.inputs = MatrixXd::Zero(1, 4);
    b.labels = VectorXi::Zero(1);
    CHECK_THROWS_AS(forward(spec, params, b), ConfigError);
    VectorXd ok = VectorXd::Zero(param_count(spec));
    Batch bad;
    bad.inputs = MatrixXd::Zero(1, 5);
    bad.labels = VectorXi::Zero(1);
    CHECK_THROWS_AS(forward(spec, ok, bad), ConfigError);
    ModelSpec tiny = mlp({2, 2});
    tiny.param_cap = 3;
    CHECK_THROWS_AS(tiny.validate(), ConfigError);
}
