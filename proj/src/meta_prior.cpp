#include "metagp/meta_prior.hpp"

#include <numeric>
#include <stdexcept>

namespace metagp {

void Architecture::validate() const {
    if (layer_widths.size() < 2)
        throw std::invalid_argument("architecture needs at least one weight layer");
    for (int w : layer_widths)
        if (w < 1) throw std::invalid_argument("layer widths must be >= 1");
}

int Architecture::weight_count() const {
    int n = 0;
    for (int l = 0; l < num_weight_layers(); ++l) n += layer_weight_count(l);
    return n;
}

int Architecture::unit_count() const {
    int n = std::accumulate(layer_widths.begin(), layer_widths.end(), 0);
    if (bias_mode == BiasMode::BiasUnit) n += num_weight_layers();
    return n;
}

int Architecture::unit_id(int l, int i) const {
    int off = 0;
    for (int k = 0; k < l; ++k)
        off += layer_widths[k] + (bias_mode == BiasMode::BiasUnit && k < num_weight_layers() ? 1 : 0);
    return off + i;
}

int Architecture::weight_offset(int l) const {
    int off = 0;
    for (int k = 0; k < l; ++k) off += layer_weight_count(k);
    return off;
}

CodeIndex CodeIndex::build(const Architecture& arch) {
    arch.validate();
    CodeIndex ci;
    const int n = arch.weight_count();
    ci.in_unit.reserve(n);
    ci.out_unit.reserve(n);
    for (int l = 0; l < arch.num_weight_layers(); ++l)
        for (int i = 0; i < arch.fan_in(l); ++i)
            for (int j = 0; j < arch.layer_widths[l + 1]; ++j) {
                ci.in_unit.push_back(arch.unit_id(l, i));
                ci.out_unit.push_back(arch.unit_id(l + 1, j));
            }
    return ci;
}

UnitLatents UnitLatents::standard_normal(const Architecture& arch, int d_z, RngStream& rng) {
    Mat z(arch.unit_count(), d_z);
    for (Eigen::Index i = 0; i < z.rows(); ++i)
        for (Eigen::Index j = 0; j < z.cols(); ++j) z(i, j) = rng.normal();
    return {Tensor::constant(std::move(z)), d_z};
}

AuxTransform AuxTransform::identity(int d_x) { return {AuxNonlin::Identity, d_x, d_x}; }

AuxTransform AuxTransform::learned_tanh(int d_aux, int d_x) {
    return {AuxNonlin::Tanh, d_aux, d_x};
}

TensorPtr AuxTransform::apply(const TensorPtr& v, const TensorPtr& x) const {
    if (x->rows() != d_x || x->cols() != 1)
        throw ShapeMismatch("aux transform: input must be " + std::to_string(d_x) + "x1");
    if (g == AuxNonlin::Identity) return transpose(x);
    if (!v || v->rows() != d_aux || v->cols() != d_x)
        throw ShapeMismatch("aux transform: V must be " + std::to_string(d_aux) + "x" +
                            std::to_string(d_x));
    return transpose(tanh(matmul(v, x)));
}

WeightCodeTable build_codes(const Architecture& arch, const UnitLatents& z) {
    if (z.z->rows() != arch.unit_count())
        throw ShapeMismatch("build_codes: " + std::to_string(z.z->rows()) + " latents for " +
                            std::to_string(arch.unit_count()) + " units");
    auto ci = CodeIndex::build(arch);
    return {gather_pairs(z.z, ci.in_unit, ci.out_unit)};
}

TensorPtr build_local_codes(const WeightCodeTable& table, const TensorPtr& x,
                            const AuxTransform& aux, const TensorPtr& v) {
    auto eps = aux.apply(v, x);  // 1 x d_aux
    return hcat(table.table, repeat_rows(eps, table.table->rows()));
}

std::vector<Vec> sample_prior_weights(const Architecture& arch, const KernelSpec& spec, int d_z,
                                      std::uint64_t seed, int n_function_samples) {
    arch.validate();
    if (arch.weight_count() > 2000)
        throw std::invalid_argument("sample_prior_weights: weight_count > 2000");
    RngRoot root(seed);
    auto zrng = root.stream("prior_z");
    auto latents = UnitLatents::standard_normal(arch, d_z, zrng);
    auto codes = build_codes(arch, latents);
    auto kw = gram(codes.table, codes.table, spec);
    const double sw2 = std::exp(spec.code.params.log_weight_noise->value(0, 0));
    Mat cov = kw->value;
    cov.diagonal().array() += sw2;
    Mat l = cholesky_jittered(Tensor::constant(cov), 1e-10, 1e-2)->value;

    auto wrng = root.stream("prior_w");
    const int n = arch.weight_count();
    std::vector<Vec> samples;
    samples.reserve(n_function_samples);
    for (int s = 0; s < n_function_samples; ++s) {
        Vec xi(n);
        for (int i = 0; i < n; ++i) xi(i) = wrng.normal();
        samples.push_back(l * xi);
    }
    return samples;
}

std::vector<Mat> sample_prior_weights_local(const Architecture& arch, const KernelSpec& spec,
                                            int d_z, const Mat& xs, std::uint64_t seed,
                                            int n_function_samples) {
    arch.validate();
    if (spec.kind != KernelKind::Product)
        throw std::invalid_argument("local prior sampling needs a product kernel");
    if (arch.weight_count() > 2000)
        throw std::invalid_argument("sample_prior_weights_local: weight_count > 2000");
    RngRoot root(seed);
    auto zrng = root.stream("prior_z");
    auto latents = UnitLatents::standard_normal(arch, d_z, zrng);
    auto codes = build_codes(arch, latents);
    auto kw = gram_factor(codes.table, codes.table, spec.code);
    auto xst = Tensor::constant(xs);
    auto kaux = gram_factor(xst, xst, *spec.aux);

    // separable covariance: cov(w_in, w'_jn') = K_w[i,j] * K_aux[n,n'], so a
    // matrix-normal draw L_w XI L_aux' has exactly the right law
    Mat lw = cholesky_jittered(Tensor::constant(kw->value), 1e-10, 1e-2)->value;
    Mat la = cholesky_jittered(Tensor::constant(kaux->value), 1e-10, 1e-2)->value;
    const double sw = std::sqrt(std::exp(spec.code.params.log_weight_noise->value(0, 0)));

    auto wrng = root.stream("prior_w");
    const int n = arch.weight_count();
    const auto g = xs.rows();
    std::vector<Mat> samples;
    samples.reserve(n_function_samples);
    for (int s = 0; s < n_function_samples; ++s) {
        Mat xi(n, g);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < g; ++j) xi(i, j) = wrng.normal();
        Mat f = lw * xi * la.transpose();
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < g; ++j) f(i, j) += sw * wrng.normal();
        samples.push_back(std::move(f));
    }
    return samples;
}

}  // namespace metagp
