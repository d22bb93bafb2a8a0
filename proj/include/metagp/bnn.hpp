#pragma once

#include "metagp/meta_prior.hpp"
#include "metagp/tensor.hpp"

namespace metagp {

// Per-layer matrices assembled from a flat weight vector; layer l is
// fan_in(l) x H_{l+1}, row-major, so flatten/unflatten follows the code
// enumeration order exactly.
struct WeightSample {
    std::vector<Mat> layers;

    static WeightSample unflatten(const Vec& w, const Architecture& arch);
    Vec flatten(const Architecture& arch) const;
};

enum class LikelihoodKind { Gaussian, Categorical };

struct Likelihood {
    LikelihoodKind kind = LikelihoodKind::Gaussian;
    TensorPtr log_noise_variance;  // gaussian only

    static Likelihood gaussian(double noise_var = 0.01);
    static Likelihood categorical();
    double noise_var() const { return std::exp(log_noise_variance->value(0, 0)); }
};

// plain forward pass for a single input
Vec forward(const Vec& x, const WeightSample& w, const Architecture& arch);

// batched graph forward: x is batch x H_0, w is a flat weight_count x 1 node;
// returns batch x H_L pre-likelihood outputs (final layer affine)
TensorPtr forward_graph(const TensorPtr& x, const TensorPtr& w, const Architecture& arch);

double log_likelihood(const Vec& y, const Vec& f_out, const Likelihood& lik);
double log_likelihood_class(int y, const Vec& logits);

// graph log-likelihood of a batch; y is batch x D (gaussian) and labels are
// per-row class indices (categorical)
TensorPtr log_likelihood_graph(const TensorPtr& f_out, const Mat& y,
                               const std::vector<int>& labels, const Likelihood& lik);

// Monte Carlo predictive summaries assembled from per-sample outputs.
struct RegressionPredictive {
    Vec mean;      // per test point
    Vec variance;  // function variance + observation noise
    Vec entropy;   // moment-matched Gaussian entropy per point
};

struct ClassificationPredictive {
    Mat probs;    // n x classes, averaged over samples
    Vec entropy;  // of the averaged distribution
};

// samples: one n x D matrix of network outputs per weight sample
RegressionPredictive regression_predictive(const std::vector<Mat>& samples, double noise_var);
ClassificationPredictive classification_predictive(const std::vector<Mat>& logit_samples);

// mixture-of-Gaussians predictive log density, log mean_s N(y; f_s, noise)
double mixture_log_density(const std::vector<double>& means, double noise_var, double y);

Mat softmax_rows(const Mat& logits);
double entropy_of_probs(const Eigen::RowVectorXd& p);

}  // namespace metagp
