#include "metagp/bnn.hpp"

#include <cmath>

namespace metagp {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kTwoPiE = 17.079468445347132;
}  // namespace

WeightSample WeightSample::unflatten(const Vec& w, const Architecture& arch) {
    if (w.size() != arch.weight_count())
        throw ShapeMismatch("unflatten: " + std::to_string(w.size()) + " weights for " +
                            std::to_string(arch.weight_count()));
    WeightSample s;
    int off = 0;
    for (int l = 0; l < arch.num_weight_layers(); ++l) {
        const int r = arch.fan_in(l);
        const int c = arch.layer_widths[l + 1];
        s.layers.emplace_back(Eigen::Map<const Mat>(w.data() + off, r, c));
        off += r * c;
    }
    return s;
}

Vec WeightSample::flatten(const Architecture& arch) const {
    Vec w(arch.weight_count());
    int off = 0;
    for (const auto& m : layers) {
        Eigen::Map<Mat>(w.data() + off, m.rows(), m.cols()) = m;
        off += static_cast<int>(m.size());
    }
    return w;
}

Likelihood Likelihood::gaussian(double noise_var) {
    return {LikelihoodKind::Gaussian, Tensor::param(Mat::Constant(1, 1, std::log(noise_var)))};
}

Likelihood Likelihood::categorical() { return {LikelihoodKind::Categorical, nullptr}; }

Vec forward(const Vec& x, const WeightSample& w, const Architecture& arch) {
    if (x.size() != arch.layer_widths[0])
        throw ShapeMismatch("forward: input dim " + std::to_string(x.size()) + " vs H_0 " +
                            std::to_string(arch.layer_widths[0]));
    Eigen::RowVectorXd h = x.transpose();
    const int nl = arch.num_weight_layers();
    for (int l = 0; l < nl; ++l) {
        Eigen::RowVectorXd hin(arch.fan_in(l));
        hin.head(h.size()) = h;
        if (arch.bias_mode == BiasMode::BiasUnit) hin(h.size()) = 1.0;
        h = hin * w.layers[l];
        if (l + 1 < nl) {
            if (arch.activation == Activation::Relu)
                h = h.cwiseMax(0.0);
            else
                h = h.array().tanh();
        }
    }
    return h.transpose();
}

TensorPtr forward_graph(const TensorPtr& x, const TensorPtr& w, const Architecture& arch) {
    if (x->cols() != arch.layer_widths[0])
        throw ShapeMismatch("forward_graph: input dim " + std::to_string(x->cols()) + " vs H_0 " +
                            std::to_string(arch.layer_widths[0]));
    TensorPtr h = x;
    const int nl = arch.num_weight_layers();
    for (int l = 0; l < nl; ++l) {
        if (arch.bias_mode == BiasMode::BiasUnit)
            h = hcat(h, Tensor::constant(Mat::Ones(h->rows(), 1)));
        auto wl = reshape(slice_rows(w, arch.weight_offset(l), arch.layer_weight_count(l)),
                          arch.fan_in(l), arch.layer_widths[l + 1]);
        h = matmul(h, wl);
        if (l + 1 < nl) h = arch.activation == Activation::Relu ? relu(h) : tanh(h);
    }
    return h;
}

double log_likelihood(const Vec& y, const Vec& f_out, const Likelihood& lik) {
    if (lik.kind != LikelihoodKind::Gaussian)
        throw std::invalid_argument("log_likelihood: real targets need a gaussian likelihood");
    if (y.size() != f_out.size())
        throw ShapeMismatch("log_likelihood: target dim " + std::to_string(y.size()) +
                            " vs output dim " + std::to_string(f_out.size()));
    const double v = lik.noise_var();
    const double n = static_cast<double>(y.size());
    return -0.5 * n * (kLog2Pi + std::log(v)) - 0.5 * (y - f_out).squaredNorm() / v;
}

double log_likelihood_class(int y, const Vec& logits) {
    if (y < 0 || y >= logits.size())
        throw std::out_of_range("log_likelihood: class index " + std::to_string(y) +
                                " outside [0, " + std::to_string(logits.size()) + ")");
    const double m = logits.maxCoeff();
    const double lse = m + std::log((logits.array() - m).exp().sum());
    return logits(y) - lse;
}

TensorPtr log_likelihood_graph(const TensorPtr& f_out, const Mat& y,
                               const std::vector<int>& labels, const Likelihood& lik) {
    if (lik.kind == LikelihoodKind::Categorical) return categorical_loglik(f_out, labels);
    if (y.rows() != f_out->rows() || y.cols() != f_out->cols())
        throw ShapeMismatch("log_likelihood: targets do not match outputs");
    auto resid = sub(f_out, Tensor::constant(y));
    auto inv_v = exp(neg(lik.log_noise_variance));
    auto quad = mul_scalar(bcast_mul(sum(mul(resid, resid)), inv_v), -0.5);
    const double n = static_cast<double>(y.size());
    auto norm = mul_scalar(add_scalar(lik.log_noise_variance, kLog2Pi), -0.5 * n);
    return add(quad, norm);
}

RegressionPredictive regression_predictive(const std::vector<Mat>& samples, double noise_var) {
    if (samples.empty()) throw std::invalid_argument("predictive: need at least one sample");
    const auto n = samples[0].rows();
    const double s = static_cast<double>(samples.size());
    Vec mean = Vec::Zero(n);
    Vec sq = Vec::Zero(n);
    for (const auto& f : samples) {
        mean += f.col(0);
        sq += f.col(0).cwiseProduct(f.col(0));
    }
    mean /= s;
    RegressionPredictive p;
    p.mean = mean;
    p.variance = (sq / s - mean.cwiseProduct(mean)).cwiseMax(0.0);
    p.variance.array() += noise_var;
    p.entropy = (0.5 * (kTwoPiE * p.variance.array()).log()).matrix();
    return p;
}

ClassificationPredictive classification_predictive(const std::vector<Mat>& logit_samples) {
    if (logit_samples.empty()) throw std::invalid_argument("predictive: need at least one sample");
    const auto n = logit_samples[0].rows();
    const auto c = logit_samples[0].cols();
    Mat probs = Mat::Zero(n, c);
    for (const auto& l : logit_samples) probs += softmax_rows(l);
    probs /= static_cast<double>(logit_samples.size());
    ClassificationPredictive p;
    p.probs = probs;
    p.entropy.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) p.entropy(i) = entropy_of_probs(probs.row(i));
    return p;
}

double mixture_log_density(const std::vector<double>& means, double noise_var, double y) {
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> lps(means.size());
    for (size_t i = 0; i < means.size(); ++i) {
        const double r = y - means[i];
        lps[i] = -0.5 * (kLog2Pi + std::log(noise_var)) - 0.5 * r * r / noise_var;
        mx = std::max(mx, lps[i]);
    }
    double acc = 0.0;
    for (double lp : lps) acc += std::exp(lp - mx);
    return mx + std::log(acc / static_cast<double>(means.size()));
}

Mat softmax_rows(const Mat& logits) {
    Mat p(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double m = logits.row(i).maxCoeff();
        Eigen::RowVectorXd e = (logits.row(i).array() - m).exp();
        p.row(i) = e / e.sum();
    }
    return p;
}

double entropy_of_probs(const Eigen::RowVectorXd& p) {
    double h = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i)
        if (p(i) > 0.0) h -= p(i) * std::log(p(i));
    return h;
}

}  // namespace metagp
