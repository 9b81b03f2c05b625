#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "fedul/rng.hpp"

namespace fedul {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXi;

enum class Activation { kRelu, kTanh };
enum class LossKind { kCrossEntropy };

// Fully-connected network: layer_sizes = {input dim, hidden..., class count}.
// Parameters live in one flat vector, per layer W (col-major, rows = out,
// cols = in) followed by the bias. That flat vector is the unit every other
// module trades in (uploads, aggregates, checkpoints).
struct ModelSpec {
    std::vector<int> layer_sizes;
    Activation activation = Activation::kRelu;
    LossKind loss = LossKind::kCrossEntropy;
    int param_cap = 50000;  // explicit curvature work refuses above this

    int input_dim() const { return layer_sizes.front(); }
    int class_count() const { return layer_sizes.back(); }
    int layer_count() const { return static_cast<int>(layer_sizes.size()) - 1; }
    void validate() const;
};

struct Batch {
    MatrixXd inputs;  // [batch x input_dim]
    VectorXi labels;  // values in [0, C)

    int size() const { return static_cast<int>(inputs.rows()); }
};

int param_count(const ModelSpec& spec);

// Glorot-uniform weights, zero biases, drawn from the given stream.
VectorXd init_params(const ModelSpec& spec, Rng& rng);

// Views of one layer inside a flat parameter vector. Maps, no copies.
Eigen::Map<const MatrixXd> weight_view(const ModelSpec& spec, const VectorXd& params, int layer);
Eigen::Map<const VectorXd> bias_view(const ModelSpec& spec, const VectorXd& params, int layer);
Eigen::Map<MatrixXd> weight_view(const ModelSpec& spec, VectorXd& params, int layer);
Eigen::Map<VectorXd> bias_view(const ModelSpec& spec, VectorXd& params, int layer);

MatrixXd forward(const ModelSpec& spec, const VectorXd& params, const Batch& batch);

// Row-wise softmax with max subtraction; rows sum to 1 within 1e-9.
MatrixXd softmax_probs(const MatrixXd& logits);

// Mean cross-entropy over the batch plus its parameter gradient. Loss is
// computed from log-softmax directly, never exp-then-log.
struct LossGrad {
    double loss = 0.0;
    VectorXd grad;
};
LossGrad loss_and_grad(const ModelSpec& spec, const VectorXd& params, const Batch& batch);

double loss_value(const ModelSpec& spec, const VectorXd& params, const Batch& batch);

// Per-sample cross-entropy losses (no reduction).
VectorXd per_sample_losses(const ModelSpec& spec, const VectorXd& params, const Batch& batch);

// Gradient of the single-sample loss w.r.t. the input features.
VectorXd input_gradient(const ModelSpec& spec, const VectorXd& params,
                        const VectorXd& x, int label);

VectorXd sgd_step(const VectorXd& params, const VectorXd& gradient, double lr);

// Exact (H + damping*I)*v over the mean loss of `data`, via the R-operator
// (forward-over-reverse). Empty batch means zero Hessian. Refuses above the
// spec parameter cap since the callers pair this with dense solves.
VectorXd hessian_vector_product(const ModelSpec& spec, const VectorXd& params,
                                const Batch& data, const VectorXd& v, double damping);

// Conjugate gradient on a caller-supplied SPD operator.
struct CgOptions {
    int max_iters = 100;
    double tol = 1e-8;  // on the relative residual
};
VectorXd cg_solve(const std::function<VectorXd(const VectorXd&)>& apply,
                  const VectorXd& rhs, const CgOptions& opts = {});

void check_finite(const VectorXd& v, const std::string& what);

}  // namespace fedul
