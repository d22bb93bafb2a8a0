#pragma once

#include <optional>

#include "metagp/tensor.hpp"

namespace metagp {

enum class KernelKind { RbfArd, Periodic, Product };

// All hyperparameters are stored unconstrained (log space); the constrained
// value is recovered with exp when a Gram matrix is assembled, so plain
// gradient steps keep everything strictly positive.
struct KernelParams {
    TensorPtr log_lengthscales;  // d x 1, one per input dimension (ARD)
    TensorPtr log_variance;      // 1 x 1
    TensorPtr log_period;        // 1 x 1, periodic kernels only
    TensorPtr log_weight_noise;  // 1 x 1, homoscedastic weight noise sigma_w^2

    static KernelParams init(int input_dim, double lengthscale = 1.0, double variance = 1.0,
                             double period = 1.0, double weight_noise_var = 0.01);
    std::vector<TensorPtr> parameters() const;
    int input_dim() const { return static_cast<int>(log_lengthscales->rows()); }
};

struct KernelFactor {
    KernelKind kind = KernelKind::RbfArd;  // RbfArd or Periodic
    KernelParams params;
};

// Either a single kernel over full rows, or a product of a code factor
// (first code_dim columns) and an auxiliary factor (remaining columns).
// The product learns one shared variance: the aux factor's variance is
// pinned to 1 since the product variance is not separately identifiable.
struct KernelSpec {
    KernelKind kind = KernelKind::RbfArd;
    KernelFactor code;
    std::optional<KernelFactor> aux;

    static KernelSpec rbf_ard(int dim);
    static KernelSpec periodic(int dim);
    static KernelSpec product(int code_dim, KernelKind aux_kind, int aux_dim);

    int code_dim() const { return code.params.input_dim(); }
    int aux_dim() const { return aux ? aux->params.input_dim() : 0; }
    int total_dim() const { return code_dim() + aux_dim(); }
    std::vector<TensorPtr> parameters() const;
};

// Gram matrix of a single factor; rows of x1/x2 must have the factor's dim.
TensorPtr gram_factor(const TensorPtr& x1, const TensorPtr& x2, const KernelFactor& f);

// Gram matrix under the full spec. For product kernels rows carry
// [code | aux] columns and the two factors multiply elementwise.
TensorPtr gram(const TensorPtr& x1, const TensorPtr& x2, const KernelSpec& spec);

// k(x, x) as a graph scalar (1x1); constant across inputs for the kernels here.
TensorPtr kernel_diag_value(const KernelSpec& spec);

// scalar conveniences (no gradient tracking)
double eval_rbf_ard(const Vec& x1, const Vec& x2, const KernelParams& p);
double eval_periodic(const Vec& x1, const Vec& x2, const KernelParams& p);
double eval_product(const Vec& c1, const Vec& c2, const KernelSpec& spec);

}  // namespace metagp
