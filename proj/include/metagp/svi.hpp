#pragma once

#include <optional>

#include "metagp/bnn.hpp"
#include "metagp/kernels.hpp"
#include "metagp/meta_prior.hpp"
#include "metagp/rng.hpp"

namespace metagp {

// M inducing inputs in code space with q(u) = N(mu_u, L_u L_u'). The raw
// factor stores an unconstrained matrix; the effective L_u takes its strict
// lower triangle and exponentiates the diagonal, keeping the Cholesky
// parameterization unique.
struct InducingState {
    TensorPtr c_u;      // M x input_dim
    TensorPtr mu_u;     // M x 1
    TensorPtr l_u_raw;  // M x M

    int m() const { return static_cast<int>(mu_u->rows()); }
    TensorPtr l_u() const;
    static InducingState init(int m, int dim, RngStream& rng, double scale = 0.1);
    std::vector<TensorPtr> parameters() const { return {c_u, mu_u, l_u_raw}; }
};

enum class CovMode { Exact, Fitc, Diag };
enum class UHandling { SampleU, MarginalizeU };

struct ApproxMode {
    CovMode cov = CovMode::Diag;
    UHandling u = UHandling::MarginalizeU;
    bool local_reparam = false;  // diag mode only
};

// q(w | z_s) pieces. Depending on the mode, the covariance is carried as a
// full matrix, a diagonal, and/or a low-rank factor (A L_u):
//   exact:              cov_full
//   fitc, sample_u:     diag_b
//   fitc, marginalize:  diag_b + lowrank lowrank'
//   diag:               var_diag
struct CondQW {
    TensorPtr mean;      // n x 1
    TensorPtr var_diag;  // n x 1, total per-weight variance (all modes)
    TensorPtr cov_full;  // exact mode only
    TensorPtr diag_b;    // fitc mode
    TensorPtr lowrank;   // fitc + marginalize_u
};

// Conditional q(w | u or q(u)) at the given code rows. codes must carry
// state.c_u's input dim (global 2*D_z; append the aux block for local use).
CondQW conditional_qw(const TensorPtr& codes, const InducingState& state, const KernelSpec& spec,
                      const ApproxMode& mode, const TensorPtr& u_sample = nullptr,
                      double jitter = 1e-6);

// Per-datapoint conditional for the local model: every code row is extended
// by the same transformed input before conditioning on the concatenated
// inducing inputs.
CondQW local_conditional_qw(const TensorPtr& z_codes, const TensorPtr& x_n,
                            const AuxTransform& aux, const TensorPtr& v_sample,
                            const InducingState& state, const KernelSpec& spec,
                            const ApproxMode& mode, const TensorPtr& u_sample = nullptr);

// KL[N(mean, diag(std^2)) || N(0, I)]
TensorPtr kl_gaussian_diag(const TensorPtr& mean, const TensorPtr& log_std);
// KL[N(mu, L_u L_u') || N(0, K_uu)]
TensorPtr kl_gaussian_full(const TensorPtr& mu_u, const TensorPtr& l_u, const TensorPtr& k_uu);

// ---- model ---------------------------------------------------------------

// One GP over a contiguous range of weight layers. The default model has a
// single global group; "per-layer" and "local on the last layer only"
// configurations make several.
struct GpGroup {
    int first_layer = 0;
    int last_layer = 0;  // inclusive
    bool local = false;
    KernelSpec spec;
    InducingState state;
    int weight_offset = 0;
    int weight_len = 0;
};

struct Batch {
    Mat x;                    // n x D_x
    Mat y;                    // n x D_y (gaussian targets)
    std::vector<int> labels;  // categorical targets
    Eigen::Index size() const { return x.rows(); }
};

struct VariationalPosterior {
    Architecture arch;
    int d_z = 2;
    AuxTransform aux;  // shared by local groups
    TensorPtr z_mean, z_logstd;
    TensorPtr v_mean, v_logstd;  // present iff a local group has a learned transform
    std::vector<GpGroup> groups;
    Likelihood lik;
    ApproxMode mode;
    CodeIndex code_index;

    bool any_local() const;
    std::vector<TensorPtr> parameters() const;
};

struct PosteriorConfig {
    int d_z = 2;
    int m_inducing = 50;
    bool local = false;
    KernelKind aux_kind = KernelKind::RbfArd;  // local only
    bool per_layer_gp = false;                 // one GP per weight layer
    bool local_last_layer_only = false;        // image-scale variant
    int d_aux = 2;                             // learned transform output dim
    bool learned_aux = false;                  // g = tanh(Vx) instead of identity
    ApproxMode mode;
};

// inputs_for_init seeds the aux blocks of local inducing points
VariationalPosterior make_posterior(const Architecture& arch, const Likelihood& lik,
                                    const PosteriorConfig& cfg, const Mat& inputs_for_init,
                                    RngStream& rng);

struct ElboTerms {
    TensorPtr total;
    TensorPtr loglik;  // scaled expected log-likelihood estimate
    TensorPtr kl_z, kl_u, kl_v;
};

// Doubly-stochastic estimate: S z-samples, J weight samples, likelihood
// scaled by `scale` (N / batch size).
ElboTerms elbo(const Batch& batch, const VariationalPosterior& post, const ApproxMode& mode,
               int s_samples, int j_samples, double scale, RngStream& rng);

struct TrainConfig {
    int epochs = 500;
    int batch_size = 100;
    double lr = 1e-2;
    double lr_decay = 0.3;    // applied once at 2/3 of the epochs
    int s_samples = 1;
    int j_samples = 1;
    std::uint64_t seed = 0;
    bool train_likelihood = true;
    // short probe runs over candidate periods before the main run; picks the
    // best probe ELBO (periodic aux kernels have strongly multimodal periods)
    std::vector<double> period_candidates;
    int period_probe_epochs = 150;
};

struct TrainTrace {
    std::vector<double> elbo_per_epoch;
    double seconds = 0.0;
};

TrainTrace train(VariationalPosterior& post, const Batch& data, const TrainConfig& cfg);

// Monte Carlo prediction: S x J output samples at the given inputs.
std::vector<Mat> predict_samples(const VariationalPosterior& post, const Mat& x, int s_samples,
                                 int j_samples, std::uint64_t seed);

}  // namespace metagp
