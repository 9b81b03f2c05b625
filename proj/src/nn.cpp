#include "fedul/nn.hpp"

#include <cmath>

#include "fedul/errors.hpp"

namespace fedul {

namespace {

MatrixXd activate(const MatrixXd& z, Activation act) {
    if (act == Activation::kRelu) return z.cwiseMax(0.0);
    return z.array().tanh().matrix();
}

// Derivative evaluated from the pre-activation.
MatrixXd activate_prime(const MatrixXd& z, Activation act) {
    if (act == Activation::kRelu)
        return (z.array() > 0.0).cast<double>().matrix();
    MatrixXd t = z.array().tanh().matrix();
    return (1.0 - t.array().square()).matrix();
}

// sigma'' for the R-op backward pass. Zero for relu (piecewise linear).
MatrixXd activate_second(const MatrixXd& z, Activation act) {
    if (act == Activation::kRelu) return MatrixXd::Zero(z.rows(), z.cols());
    MatrixXd t = z.array().tanh().matrix();
    return (-2.0 * t.array() * (1.0 - t.array().square())).matrix();
}

struct ForwardTrace {
    std::vector<MatrixXd> pre;   // z_l, one per layer, [batch x out_l]
    std::vector<MatrixXd> post;  // a_l with post[0] = inputs
};

ForwardTrace traced_forward(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs) {
    ForwardTrace t;
    const int L = spec.layer_count();
    t.pre.resize(L);
    t.post.resize(L + 1);
    t.post[0] = inputs;
    for (int l = 0; l < L; ++l) {
        auto W = weight_view(spec, params, l);
        auto b = bias_view(spec, params, l);
        t.pre[l] = (t.post[l] * W.transpose()).rowwise() + b.transpose();
        t.post[l + 1] = (l + 1 < L) ? activate(t.pre[l], spec.activation) : t.pre[l];
    }
    return t;
}

// Row-wise log-sum-exp with max subtraction.
VectorXd log_sum_exp(const MatrixXd& logits) {
    VectorXd m = logits.rowwise().maxCoeff();
    return m + ((logits.colwise() - m).array().exp().rowwise().sum().log()).matrix();
}

void check_batch(const ModelSpec& spec, const Batch& batch) {
    if (batch.inputs.cols() != spec.input_dim())
        throw ConfigError("batch feature dim " + std::to_string(batch.inputs.cols()) +
                          " does not match model input dim " + std::to_string(spec.input_dim()));
    if (batch.labels.size() != batch.inputs.rows())
        throw ConfigError("batch labels/inputs row mismatch");
    for (int i = 0; i < batch.labels.size(); ++i) {
        if (batch.labels[i] < 0 || batch.labels[i] >= spec.class_count())
            throw ConfigError("label " + std::to_string(batch.labels[i]) + " out of range");
    }
}

void check_params(const ModelSpec& spec, const VectorXd& params) {
    if (params.size() != param_count(spec))
        throw ConfigError("parameter vector length " + std::to_string(params.size()) +
                          " does not match spec (" + std::to_string(param_count(spec)) + ")");
}

}  // namespace

void ModelSpec::validate() const {
    if (layer_sizes.size() < 2) throw ConfigError("model needs at least input and output layers");
    for (int s : layer_sizes)
        if (s <= 0) throw ConfigError("layer sizes must be positive");
    if (class_count() < 2) throw ConfigError("model needs at least 2 classes");
    if (param_count(*this) > param_cap)
        throw ConfigError("parameter count " + std::to_string(param_count(*this)) +
                          " exceeds cap " + std::to_string(param_cap));
}

int param_count(const ModelSpec& spec) {
    int n = 0;
    for (int l = 0; l < spec.layer_count(); ++l)
        n += spec.layer_sizes[l + 1] * (spec.layer_sizes[l] + 1);
    return n;
}

namespace {
int layer_offset(const ModelSpec& spec, int layer) {
    int off = 0;
    for (int l = 0; l < layer; ++l)
        off += spec.layer_sizes[l + 1] * (spec.layer_sizes[l] + 1);
    return off;
}
}  // namespace

Eigen::Map<const MatrixXd> weight_view(const ModelSpec& spec, const VectorXd& params, int layer) {
    const int rows = spec.layer_sizes[layer + 1], cols = spec.layer_sizes[layer];
    return {params.data() + layer_offset(spec, layer), rows, cols};
}

Eigen::Map<const VectorXd> bias_view(const ModelSpec& spec, const VectorXd& params, int layer) {
    const int rows = spec.layer_sizes[layer + 1], cols = spec.layer_sizes[layer];
    return {params.data() + layer_offset(spec, layer) + rows * cols, rows};
}

Eigen::Map<MatrixXd> weight_view(const ModelSpec& spec, VectorXd& params, int layer) {
    const int rows = spec.layer_sizes[layer + 1], cols = spec.layer_sizes[layer];
    return {params.data() + layer_offset(spec, layer), rows, cols};
}

Eigen::Map<VectorXd> bias_view(const ModelSpec& spec, VectorXd& params, int layer) {
    const int rows = spec.layer_sizes[layer + 1], cols = spec.layer_sizes[layer];
    return {params.data() + layer_offset(spec, layer) + rows * cols, rows};
}

VectorXd init_params(const ModelSpec& spec, Rng& rng) {
    spec.validate();
    VectorXd params = VectorXd::Zero(param_count(spec));
    for (int l = 0; l < spec.layer_count(); ++l) {
        const int fan_in = spec.layer_sizes[l], fan_out = spec.layer_sizes[l + 1];
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        auto W = weight_view(spec, params, l);
        for (int c = 0; c < W.cols(); ++c)
            for (int r = 0; r < W.rows(); ++r) W(r, c) = rng.uniform(-a, a);
        // biases stay zero
    }
    return params;
}

MatrixXd forward(const ModelSpec& spec, const VectorXd& params, const Batch& batch) {
    check_params(spec, params);
    check_batch(spec, batch);
    MatrixXd a = batch.inputs;
    const int L = spec.layer_count();
    for (int l = 0; l < L; ++l) {
        auto W = weight_view(spec, params, l);
        auto b = bias_view(spec, params, l);
        MatrixXd z = (a * W.transpose()).rowwise() + b.transpose();
        a = (l + 1 < L) ? activate(z, spec.activation) : z;
    }
    if (!a.allFinite()) throw NumericError("non-finite logits");
    return a;
}

MatrixXd softmax_probs(const MatrixXd& logits) {
    VectorXd m = logits.rowwise().maxCoeff();
    MatrixXd e = (logits.colwise() - m).array().exp().matrix();
    VectorXd s = e.rowwise().sum();
    return e.array().colwise() / s.array();
}

VectorXd per_sample_losses(const ModelSpec& spec, const VectorXd& params, const Batch& batch) {
    MatrixXd logits = forward(spec, params, batch);
    VectorXd lse = log_sum_exp(logits);
    VectorXd out(batch.size());
    for (int i = 0; i < batch.size(); ++i) out[i] = lse[i] - logits(i, batch.labels[i]);
    return out;
}

double loss_value(const ModelSpec& spec, const VectorXd& params, const Batch& batch) {
    return per_sample_losses(spec, params, batch).mean();
}

LossGrad loss_and_grad(const ModelSpec& spec, const VectorXd& params, const Batch& batch) {
    check_params(spec, params);
    check_batch(spec, batch);
    const int L = spec.layer_count();
    const int B = batch.size();
    ForwardTrace t = traced_forward(spec, params, batch.inputs);

    const MatrixXd& logits = t.pre[L - 1];
    if (!logits.allFinite()) throw NumericError("non-finite logits at layer " + std::to_string(L - 1));
    VectorXd lse = log_sum_exp(logits);
    double loss = 0.0;
    for (int i = 0; i < B; ++i) loss += lse[i] - logits(i, batch.labels[i]);
    loss /= B;
    if (!std::isfinite(loss)) throw NumericError("non-finite loss at layer " + std::to_string(L - 1));

    LossGrad out;
    out.loss = loss;
    out.grad = VectorXd::Zero(params.size());

    // delta at the output: (softmax - onehot) / B
    MatrixXd delta = softmax_probs(logits);
    for (int i = 0; i < B; ++i) delta(i, batch.labels[i]) -= 1.0;
    delta /= static_cast<double>(B);

    for (int l = L - 1; l >= 0; --l) {
        auto gW = weight_view(spec, out.grad, l);
        auto gb = bias_view(spec, out.grad, l);
        gW = delta.transpose() * t.post[l];
        gb = delta.colwise().sum();
        if (l > 0) {
            auto W = weight_view(spec, params, l);
            delta = (delta * W).cwiseProduct(activate_prime(t.pre[l - 1], spec.activation));
        }
    }
    if (!out.grad.allFinite()) throw NumericError("non-finite gradient");
    return out;
}

VectorXd input_gradient(const ModelSpec& spec, const VectorXd& params,
                        const VectorXd& x, int label) {
    check_params(spec, params);
    Batch one{x.transpose(), VectorXi::Constant(1, label)};
    check_batch(spec, one);
    const int L = spec.layer_count();
    ForwardTrace t = traced_forward(spec, params, one.inputs);

    MatrixXd delta = softmax_probs(t.pre[L - 1]);
    delta(0, label) -= 1.0;
    for (int l = L - 1; l >= 1; --l) {
        auto W = weight_view(spec, params, l);
        delta = (delta * W).cwiseProduct(activate_prime(t.pre[l - 1], spec.activation));
    }
    auto W0 = weight_view(spec, params, 0);
    VectorXd g = (delta * W0).transpose();
    check_finite(g, "input gradient");
    return g;
}

VectorXd sgd_step(const VectorXd& params, const VectorXd& gradient, double lr) {
    if (params.size() != gradient.size()) throw ConfigError("sgd_step size mismatch");
    VectorXd next = params - lr * gradient;
    check_finite(next, "parameters after sgd step");
    return next;
}

VectorXd hessian_vector_product(const ModelSpec& spec, const VectorXd& params,
                                const Batch& data, const VectorXd& v, double damping) {
    check_params(spec, params);
    if (v.size() != params.size()) throw ConfigError("hvp direction length mismatch");
    if (damping < 0) throw ConfigError("damping must be >= 0");
    if (param_count(spec) > spec.param_cap)
        throw CapabilityError("parameter count above cap; stochastic curvature estimation not implemented");
    const int B = data.size();
    if (B == 0) return damping * v;  // empty set: zero Hessian
    check_batch(spec, data);

    const int L = spec.layer_count();
    ForwardTrace t = traced_forward(spec, params, data.inputs);

    // R-forward: directional derivative of every pre/post activation along v.
    std::vector<MatrixXd> rpre(L), rpost(L + 1);
    rpost[0] = MatrixXd::Zero(B, spec.input_dim());
    for (int l = 0; l < L; ++l) {
        auto W = weight_view(spec, params, l);
        auto Vw = weight_view(spec, v, l);
        auto vb = bias_view(spec, v, l);
        rpre[l] = (rpost[l] * W.transpose() + t.post[l] * Vw.transpose()).rowwise() + vb.transpose();
        if (l + 1 < L)
            rpost[l + 1] = rpre[l].cwiseProduct(activate_prime(t.pre[l], spec.activation));
    }

    const MatrixXd probs = softmax_probs(t.pre[L - 1]);
    MatrixXd delta = probs;
    for (int i = 0; i < B; ++i) delta(i, data.labels[i]) -= 1.0;
    delta /= static_cast<double>(B);

    // R(softmax) = (diag(p) - p p^T) Rz, row-wise.
    MatrixXd rdelta = probs.cwiseProduct(rpre[L - 1]);
    VectorXd dot = (probs.cwiseProduct(rpre[L - 1])).rowwise().sum();
    rdelta -= (probs.array().colwise() * dot.array()).matrix();
    rdelta /= static_cast<double>(B);

    VectorXd hv = VectorXd::Zero(params.size());
    for (int l = L - 1; l >= 0; --l) {
        auto hW = weight_view(spec, hv, l);
        auto hb = bias_view(spec, hv, l);
        hW = rdelta.transpose() * t.post[l] + delta.transpose() * rpost[l];
        hb = rdelta.colwise().sum();
        if (l > 0) {
            auto W = weight_view(spec, params, l);
            auto Vw = weight_view(spec, v, l);
            MatrixXd sp = activate_prime(t.pre[l - 1], spec.activation);
            MatrixXd back = delta * W;
            rdelta = (rdelta * W + delta * Vw).cwiseProduct(sp) +
                     back.cwiseProduct(activate_second(t.pre[l - 1], spec.activation))
                         .cwiseProduct(rpre[l - 1]);
            delta = back.cwiseProduct(sp);
        }
    }
    hv += damping * v;
    check_finite(hv, "hessian-vector product");
    return hv;
}

VectorXd cg_solve(const std::function<VectorXd(const VectorXd&)>& apply,
                  const VectorXd& rhs, const CgOptions& opts) {
    VectorXd x = VectorXd::Zero(rhs.size());
    VectorXd r = rhs;
    VectorXd p = r;
    double rs = r.squaredNorm();
    const double stop = opts.tol * opts.tol * rhs.squaredNorm();
    if (rs <= stop) return x;
    VectorXd best = x;
    double best_rs = rs;
    for (int it = 0; it < opts.max_iters; ++it) {
        VectorXd ap = apply(p);
        const double pap = p.dot(ap);
        if (pap <= 0.0) break;  // lost positive definiteness; keep best iterate
        const double alpha = rs / pap;
        x += alpha * p;
        r -= alpha * ap;
        const double rs_next = r.squaredNorm();
        if (rs_next < best_rs) {
            best_rs = rs_next;
            best = x;
        }
        if (rs_next <= stop) return x;
        p = r + (rs_next / rs) * p;
        rs = rs_next;
    }
    return best;
}

void check_finite(const VectorXd& v, const std::string& what) {
    if (!v.allFinite()) throw NumericError("non-finite values in " + what);
}

}  // namespace fedul
