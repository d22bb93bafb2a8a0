#include "metagp/kernels.hpp"

#include <cmath>

namespace metagp {

namespace {
constexpr double kPi = 3.14159265358979323846;

TensorPtr log_scalar(double v, bool learned = true) {
    return learned ? Tensor::param(Mat::Constant(1, 1, std::log(v)))
                   : Tensor::constant(Mat::Constant(1, 1, std::log(v)));
}
}  // namespace

KernelParams KernelParams::init(int input_dim, double lengthscale, double variance, double period,
                                double weight_noise_var) {
    KernelParams p;
    p.log_lengthscales = Tensor::param(Mat::Constant(input_dim, 1, std::log(lengthscale)));
    p.log_variance = log_scalar(variance);
    p.log_period = log_scalar(period);
    p.log_weight_noise = log_scalar(weight_noise_var);
    return p;
}

std::vector<TensorPtr> KernelParams::parameters() const {
    return {log_lengthscales, log_variance, log_period, log_weight_noise};
}

KernelSpec KernelSpec::rbf_ard(int dim) {
    KernelSpec s;
    s.kind = KernelKind::RbfArd;
    s.code = {KernelKind::RbfArd, KernelParams::init(dim)};
    return s;
}

KernelSpec KernelSpec::periodic(int dim) {
    KernelSpec s;
    s.kind = KernelKind::Periodic;
    s.code = {KernelKind::Periodic, KernelParams::init(dim)};
    return s;
}

KernelSpec KernelSpec::product(int code_dim, KernelKind aux_kind, int aux_dim) {
    KernelSpec s;
    s.kind = KernelKind::Product;
    s.code = {KernelKind::RbfArd, KernelParams::init(code_dim)};
    KernelFactor a{aux_kind, KernelParams::init(aux_dim)};
    // shared product variance lives on the code factor
    a.params.log_variance = Tensor::constant(Mat::Zero(1, 1));
    s.aux = a;
    return s;
}

std::vector<TensorPtr> KernelSpec::parameters() const {
    std::vector<TensorPtr> ps = code.params.parameters();
    if (aux) {
        for (auto& t : aux->params.parameters())
            if (t->requires_grad) ps.push_back(t);
    }
    return ps;
}

TensorPtr gram_factor(const TensorPtr& x1, const TensorPtr& x2, const KernelFactor& f) {
    const auto d = f.params.input_dim();
    if (x1->cols() != d || x2->cols() != d)
        throw ShapeMismatch("gram: input dims " + std::to_string(x1->cols()) + "/" +
                            std::to_string(x2->cols()) + " do not match kernel dim " +
                            std::to_string(d));
    auto var = exp(f.params.log_variance);
    if (f.kind == KernelKind::RbfArd) {
        auto inv_ls = exp(neg(f.params.log_lengthscales));
        auto d2 = pairwise_sqdist(colwise_scale(x1, inv_ls), colwise_scale(x2, inv_ls));
        return bcast_mul(exp(mul_scalar(d2, -0.5)), var);
    }
    // MacKay periodic, summed per dimension so the Gram matrix stays PSD for
    // d > 1 (the norm variant is only a valid kernel on the line):
    // sigma^2 exp(-2 sum_d sin^2(pi |x_d - x'_d| / p) / l^2)
    auto inv_p = exp(neg(f.params.log_period));
    TensorPtr s2;
    for (int k = 0; k < d; ++k) {
        auto dist = sqrt(pairwise_sqdist(slice_cols(x1, k, 1), slice_cols(x2, k, 1)));
        auto s = sin(bcast_mul(mul_scalar(dist, kPi), inv_p));
        auto term = mul(s, s);
        s2 = s2 ? add(s2, term) : term;
    }
    auto inv_l2 = exp(mul_scalar(slice_rows(f.params.log_lengthscales, 0, 1), -2.0));
    auto e = exp(bcast_mul(mul_scalar(s2, -2.0), inv_l2));
    return bcast_mul(e, var);
}

TensorPtr gram(const TensorPtr& x1, const TensorPtr& x2, const KernelSpec& spec) {
    if (spec.kind != KernelKind::Product) return gram_factor(x1, x2, spec.code);
    const int cd = spec.code_dim();
    const int ad = spec.aux_dim();
    if (x1->cols() != cd + ad || x2->cols() != cd + ad)
        throw ShapeMismatch("gram: product rows must carry " + std::to_string(cd + ad) +
                            " columns, got " + std::to_string(x1->cols()) + "/" +
                            std::to_string(x2->cols()));
    auto kc = gram_factor(slice_cols(x1, 0, cd), slice_cols(x2, 0, cd), spec.code);
    auto ka = gram_factor(slice_cols(x1, cd, ad), slice_cols(x2, cd, ad), *spec.aux);
    return mul(kc, ka);
}

TensorPtr kernel_diag_value(const KernelSpec& spec) {
    auto v = exp(spec.code.params.log_variance);
    if (spec.kind == KernelKind::Product) v = mul(v, exp(spec.aux->params.log_variance));
    return v;
}

namespace {
double eval_factor(const Vec& x1, const Vec& x2, const KernelFactor& f) {
    auto g = gram_factor(Tensor::constant(x1.transpose()), Tensor::constant(x2.transpose()), f);
    return g->value(0, 0);
}
}  // namespace

double eval_rbf_ard(const Vec& x1, const Vec& x2, const KernelParams& p) {
    return eval_factor(x1, x2, {KernelKind::RbfArd, p});
}

double eval_periodic(const Vec& x1, const Vec& x2, const KernelParams& p) {
    return eval_factor(x1, x2, {KernelKind::Periodic, p});
}

double eval_product(const Vec& c1, const Vec& c2, const KernelSpec& spec) {
    auto g = gram(Tensor::constant(c1.transpose()), Tensor::constant(c2.transpose()), spec);
    return g->value(0, 0);
}

}  // namespace metagp
