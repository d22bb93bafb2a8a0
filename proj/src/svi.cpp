#include "metagp/svi.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include "metagp/optim.hpp"

namespace metagp {

namespace {

Mat randn_mat(Eigen::Index r, Eigen::Index c, RngStream& rng) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
    return m;
}

TensorPtr reparam_sample(const TensorPtr& mean, const TensorPtr& log_std, RngStream& rng) {
    auto xi = Tensor::constant(randn_mat(mean->rows(), mean->cols(), rng));
    return add(mean, mul(exp(log_std), xi));
}

// X with the diagonal replaced by d (same value, shared arithmetic), so the
// diag/fitc vector path and the exact matrix path agree bit for bit
TensorPtr with_diagonal(const TensorPtr& x, const TensorPtr& d) {
    Mat off = Mat::Ones(x->rows(), x->cols());
    off.diagonal().setZero();
    return add(mul(x, Tensor::constant(off)), diag_embed(d));
}

TensorPtr ones_like_col(Eigen::Index n) { return Tensor::constant(Mat::Ones(n, 1)); }

}  // namespace

TensorPtr InducingState::l_u() const {
    const auto n = l_u_raw->rows();
    Mat strict = Mat::Ones(n, n).triangularView<Eigen::StrictlyLower>();
    auto lower = mul(l_u_raw, Tensor::constant(strict));
    return add(lower, diag_embed(exp(extract_diag(l_u_raw))));
}

InducingState InducingState::init(int m, int dim, RngStream& rng, double scale) {
    InducingState s;
    s.c_u = Tensor::param(randn_mat(m, dim, rng));
    s.mu_u = Tensor::param(Mat::Zero(m, 1));
    Mat raw = Mat::Zero(m, m);
    raw.diagonal().setConstant(std::log(scale));
    s.l_u_raw = Tensor::param(std::move(raw));
    return s;
}

CondQW conditional_qw(const TensorPtr& codes, const InducingState& state, const KernelSpec& spec,
                      const ApproxMode& mode, const TensorPtr& u_sample, double jitter) {
    if (mode.u == UHandling::SampleU && !u_sample)
        throw std::invalid_argument("conditional_qw: sample_u handling needs a u sample");
    if (mode.u == UHandling::MarginalizeU && u_sample)
        throw std::invalid_argument("conditional_qw: u sample given but u is marginalized");

    const auto n = codes->rows();
    auto k_uu = gram(state.c_u, state.c_u, spec);
    auto l_k = cholesky_jittered(k_uu, jitter, 1e-2);
    auto k_wu = gram(codes, state.c_u, spec);
    auto w_half = tri_solve(l_k, transpose(k_wu));             // L^{-1} K_uw
    auto a = transpose(tri_solve(l_k, w_half, true));          // K_wu K_uu^{-1}
    auto sw2 = exp(spec.code.params.log_weight_noise);
    auto kd_plus_noise = add(kernel_diag_value(spec), sw2);    // 1x1
    // diag(B) = k(c,c) + sigma_w^2 - colsum(W .* W)
    auto diag_b = add(neg(transpose(col_sum(mul(w_half, w_half)))),
                      bcast_mul(ones_like_col(n), kd_plus_noise));

    CondQW out;
    out.mean = matmul(a, mode.u == UHandling::SampleU ? u_sample : state.mu_u);

    const bool marg = mode.u == UHandling::MarginalizeU;
    TensorPtr lowrank;  // A L_u
    TensorPtr lowrank_diag;
    if (marg) {
        lowrank = matmul(a, state.l_u());
        lowrank_diag = row_sum(mul(lowrank, lowrank));
    }

    switch (mode.cov) {
        case CovMode::Exact: {
            auto k_ww = gram(codes, codes, spec);
            auto b_off = sub(k_ww, matmul(transpose(w_half), w_half));
            auto full = marg ? add(b_off, matmul(lowrank, transpose(lowrank))) : b_off;
            auto d = marg ? add(diag_b, lowrank_diag) : diag_b;
            out.cov_full = with_diagonal(full, d);
            out.var_diag = extract_diag(out.cov_full);
            break;
        }
        case CovMode::Fitc: {
            out.diag_b = diag_b;
            if (marg) {
                out.lowrank = lowrank;
                out.var_diag = add(diag_b, lowrank_diag);
            } else {
                out.var_diag = diag_b;
            }
            break;
        }
        case CovMode::Diag: {
            out.var_diag = marg ? add(diag_b, lowrank_diag) : diag_b;
            break;
        }
    }
    return out;
}

CondQW local_conditional_qw(const TensorPtr& z_codes, const TensorPtr& x_n,
                            const AuxTransform& aux, const TensorPtr& v_sample,
                            const InducingState& state, const KernelSpec& spec,
                            const ApproxMode& mode, const TensorPtr& u_sample) {
    if (spec.kind != KernelKind::Product)
        throw std::invalid_argument("local_conditional_qw: needs a product kernel");
    auto eps = aux.apply(v_sample, x_n);  // 1 x d_aux
    auto local_codes = hcat(z_codes, repeat_rows(eps, z_codes->rows()));
    return conditional_qw(local_codes, state, spec, mode, u_sample);
}

TensorPtr kl_gaussian_diag(const TensorPtr& mean, const TensorPtr& log_std) {
    // 0.5 sum(sigma^2 + mu^2 - 1 - log sigma^2)
    auto var = exp(mul_scalar(log_std, 2.0));
    auto term = sub(add(var, mul(mean, mean)), add_scalar(mul_scalar(log_std, 2.0), 1.0));
    return mul_scalar(sum(term), 0.5);
}

TensorPtr kl_gaussian_full(const TensorPtr& mu_u, const TensorPtr& l_u, const TensorPtr& k_uu) {
    const auto m = static_cast<double>(mu_u->rows());
    auto l_k = cholesky_jittered(k_uu, 1e-8, 1e-2);
    auto t = tri_solve(l_k, l_u);                       // L_K^{-1} L_u
    auto trace = sum(mul(t, t));                        // tr(K^{-1} Sigma)
    auto alpha = tri_solve(l_k, mu_u);
    auto quad = sum(mul(alpha, alpha));                 // mu' K^{-1} mu
    auto logdet_k = mul_scalar(sum(log(extract_diag(l_k))), 2.0);
    auto logdet_s = mul_scalar(sum(log(extract_diag(l_u))), 2.0);
    auto inner = add(add(trace, quad), sub(logdet_k, logdet_s));
    return mul_scalar(add_scalar(inner, -m), 0.5);
}

bool VariationalPosterior::any_local() const {
    for (const auto& g : groups)
        if (g.local) return true;
    return false;
}

std::vector<TensorPtr> VariationalPosterior::parameters() const {
    std::vector<TensorPtr> ps{z_mean, z_logstd};
    if (v_mean) {
        ps.push_back(v_mean);
        ps.push_back(v_logstd);
    }
    for (const auto& g : groups) {
        for (auto& t : g.state.parameters()) ps.push_back(t);
        for (auto& t : g.spec.parameters()) ps.push_back(t);
    }
    return ps;
}

VariationalPosterior make_posterior(const Architecture& arch, const Likelihood& lik,
                                    const PosteriorConfig& cfg, const Mat& inputs_for_init,
                                    RngStream& rng) {
    arch.validate();
    VariationalPosterior post;
    post.arch = arch;
    post.d_z = cfg.d_z;
    post.lik = lik;
    post.mode = cfg.mode;
    post.code_index = CodeIndex::build(arch);

    post.z_mean = Tensor::param(0.1 * randn_mat(arch.unit_count(), cfg.d_z, rng));
    post.z_logstd =
        Tensor::param(Mat::Constant(arch.unit_count(), cfg.d_z, std::log(0.1)));

    const int d_x = static_cast<int>(inputs_for_init.cols());
    const bool wants_local = cfg.local || cfg.local_last_layer_only;
    if (wants_local) {
        if (cfg.learned_aux) {
            post.aux = AuxTransform::learned_tanh(cfg.d_aux, d_x);
            post.v_mean =
                Tensor::param(randn_mat(cfg.d_aux, d_x, rng) / std::sqrt(double(d_x)));
            post.v_logstd = Tensor::param(Mat::Constant(cfg.d_aux, d_x, std::log(0.1)));
        } else {
            post.aux = AuxTransform::identity(d_x);
        }
    }

    // layer ranges
    std::vector<std::pair<int, int>> ranges;
    const int nl = arch.num_weight_layers();
    if (cfg.per_layer_gp) {
        for (int l = 0; l < nl; ++l) ranges.emplace_back(l, l);
    } else if (cfg.local_last_layer_only && nl > 1) {
        ranges.emplace_back(0, nl - 2);
        ranges.emplace_back(nl - 1, nl - 1);
    } else {
        ranges.emplace_back(0, nl - 1);
    }

    for (size_t gi = 0; gi < ranges.size(); ++gi) {
        GpGroup g;
        g.first_layer = ranges[gi].first;
        g.last_layer = ranges[gi].second;
        const bool last_range = gi + 1 == ranges.size();
        g.local = cfg.local_last_layer_only ? (last_range && nl > 1) : cfg.local;
        g.weight_offset = arch.weight_offset(g.first_layer);
        g.weight_len = arch.weight_offset(g.last_layer) +
                       arch.layer_weight_count(g.last_layer) - g.weight_offset;
        const int code_dim = 2 * cfg.d_z;
        if (g.local) {
            const int d_aux = post.aux.d_aux;
            g.spec = KernelSpec::product(code_dim, cfg.aux_kind, d_aux);
            g.state = InducingState::init(cfg.m_inducing, code_dim + d_aux, rng);
            // seed the aux block from transformed training inputs
            for (int i = 0; i < cfg.m_inducing; ++i) {
                const auto row = static_cast<Eigen::Index>(
                    rng.uniform_int(static_cast<std::uint64_t>(inputs_for_init.rows())));
                Vec x = inputs_for_init.row(row).transpose();
                auto eps = post.aux.apply(post.v_mean, Tensor::constant(x));
                g.state.c_u->value.row(i).tail(d_aux) = eps->value.row(0);
            }
        } else {
            g.spec = KernelSpec::rbf_ard(code_dim);
            g.state = InducingState::init(cfg.m_inducing, code_dim, rng);
        }
        post.groups.push_back(std::move(g));
    }
    return post;
}

// ---- ELBO ------------------------------------------------------------

namespace {

TensorPtr sample_cond(const CondQW& cond, CovMode cov, RngStream& rng) {
    const auto n = cond.mean->rows();
    auto xi = Tensor::constant(randn_mat(n, 1, rng));
    switch (cov) {
        case CovMode::Exact: {
            auto l = cholesky_jittered(cond.cov_full, 1e-10, 1e-2);
            return add(cond.mean, matmul(l, xi));
        }
        case CovMode::Fitc: {
            auto w = add(cond.mean, mul(sqrt(cond.diag_b), xi));
            if (cond.lowrank) {
                auto xi2 = Tensor::constant(randn_mat(cond.lowrank->cols(), 1, rng));
                w = add(w, matmul(cond.lowrank, xi2));
            }
            return w;
        }
        case CovMode::Diag:
            return add(cond.mean, mul(sqrt(cond.var_diag), xi));
    }
    throw std::logic_error("unreachable");
}

// Batched moments of the local conditional under the diag approximation:
// columns of mean/var correspond to datapoints.
struct LocalDiagMoments {
    TensorPtr mean;  // |w_g| x N
    TensorPtr var;   // |w_g| x N
};

LocalDiagMoments local_diag_moments(const TensorPtr& codes_g, const TensorPtr& eps_batch,
                                    const GpGroup& g, const ApproxMode& mode,
                                    const TensorPtr& u_sample) {
    const auto& spec = g.spec;
    const int code_dim = spec.code_dim();
    const int d_aux = spec.aux_dim();
    auto cu_code = slice_cols(g.state.c_u, 0, code_dim);
    auto cu_aux = slice_cols(g.state.c_u, code_dim, d_aux);

    auto k_uu = mul(gram_factor(cu_code, cu_code, spec.code),
                    gram_factor(cu_aux, cu_aux, *spec.aux));
    auto l_k = cholesky_jittered(k_uu, 1e-6, 1e-2);
    const auto m = g.state.m();
    auto eye = Tensor::constant(Mat::Identity(m, m));
    auto g_inv = tri_solve(l_k, tri_solve(l_k, eye), true);  // K_uu^{-1}

    auto kw_wu = gram_factor(codes_g, cu_code, spec.code);   // |w_g| x M
    auto a_aux = gram_factor(eps_batch, cu_aux, *spec.aux);  // N x M

    auto u_vec = mode.u == UHandling::SampleU ? u_sample : g.state.mu_u;
    auto g_u = matmul(g_inv, u_vec);                                  // M x 1
    auto mean = matmul(colwise_scale(kw_wu, g_u), transpose(a_aux));  // |w_g| x N

    // [C_n K_uu^{-1} C_n']_ii = sum_{mm'} (kw kw)(a a) G; batched as
    // Q diag(vec G) P' with per-row outer expansions Q, P
    auto q = rowwise_outer(kw_wu, kw_wu);
    auto p = rowwise_outer(a_aux, a_aux);
    auto t_b = matmul(colwise_scale(q, reshape(g_inv, m * m, 1)), transpose(p));

    auto sw2 = exp(spec.code.params.log_weight_noise);
    auto kd_plus_noise = add(kernel_diag_value(spec), sw2);
    auto var = bcast_add(neg(t_b), kd_plus_noise);
    if (mode.u == UHandling::MarginalizeU) {
        auto h = matmul(g_inv, g.state.l_u());
        auto s_mat = matmul(h, transpose(h));  // K^{-1} Sigma_u K^{-1}
        auto t_s = matmul(colwise_scale(q, reshape(s_mat, m * m, 1)), transpose(p));
        var = add(var, t_s);
    }
    return {mean, var};
}

// local reparameterization: propagate per-weight moments to pre-activations
TensorPtr forward_moments(const TensorPtr& x, const TensorPtr& w_mean, const TensorPtr& w_var,
                          const Architecture& arch, RngStream& rng) {
    TensorPtr h = x;
    const int nl = arch.num_weight_layers();
    for (int l = 0; l < nl; ++l) {
        if (arch.bias_mode == BiasMode::BiasUnit)
            h = hcat(h, Tensor::constant(Mat::Ones(h->rows(), 1)));
        auto wm = reshape(slice_rows(w_mean, arch.weight_offset(l), arch.layer_weight_count(l)),
                          arch.fan_in(l), arch.layer_widths[l + 1]);
        auto wv = reshape(slice_rows(w_var, arch.weight_offset(l), arch.layer_weight_count(l)),
                          arch.fan_in(l), arch.layer_widths[l + 1]);
        auto a_mean = matmul(h, wm);
        auto a_var = matmul(mul(h, h), wv);
        auto xi = Tensor::constant(randn_mat(a_mean->rows(), a_mean->cols(), rng));
        h = add(a_mean, mul(sqrt(a_var), xi));
        if (l + 1 < nl) h = arch.activation == Activation::Relu ? relu(h) : tanh(h);
    }
    return h;
}

TensorPtr vcat_rows(std::vector<TensorPtr> rows) {
    // balanced concatenation keeps the graph shallow
    while (rows.size() > 1) {
        std::vector<TensorPtr> next;
        for (size_t i = 0; i + 1 < rows.size(); i += 2) next.push_back(vcat(rows[i], rows[i + 1]));
        if (rows.size() % 2) next.push_back(rows.back());
        rows = std::move(next);
    }
    return rows[0];
}

struct GroupDraw {
    // prepared per (s); yields the group's weight block for one j-sample
    const GpGroup* group = nullptr;
    CondQW cond;                        // global groups, and local exact/fitc per-datapoint
    std::optional<LocalDiagMoments> lm;  // local diag
    std::vector<CondQW> per_point;       // local exact/fitc
    TensorPtr u_sample;
};

}  // namespace

ElboTerms elbo(const Batch& batch, const VariationalPosterior& post, const ApproxMode& mode,
               int s_samples, int j_samples, double scale, RngStream& rng) {
    if (s_samples < 1 || j_samples < 1)
        throw std::invalid_argument("elbo: S and J must be >= 1");
    if (mode.local_reparam && mode.cov != CovMode::Diag)
        throw std::invalid_argument("elbo: local reparameterization needs diag mode");
    const auto n = batch.size();
    const auto& arch = post.arch;

    ElboTerms terms;
    terms.kl_z = kl_gaussian_diag(post.z_mean, post.z_logstd);
    for (const auto& g : post.groups) {
        auto k_uu = gram(g.state.c_u, g.state.c_u, g.spec);
        auto kl = kl_gaussian_full(g.state.mu_u, g.state.l_u(), k_uu);
        terms.kl_u = terms.kl_u ? add(terms.kl_u, kl) : kl;
    }
    if (post.v_mean) terms.kl_v = kl_gaussian_diag(post.v_mean, post.v_logstd);

    auto xb = Tensor::constant(batch.x);
    TensorPtr lik_sum;
    for (int s = 0; s < s_samples; ++s) {
        auto z_s = reparam_sample(post.z_mean, post.z_logstd, rng);
        auto codes = gather_pairs(z_s, post.code_index.in_unit, post.code_index.out_unit);
        TensorPtr v_s;
        TensorPtr eps_batch;  // N x d_aux
        if (post.any_local()) {
            if (post.aux.learned()) {
                v_s = reparam_sample(post.v_mean, post.v_logstd, rng);
                eps_batch = tanh(matmul(xb, transpose(v_s)));
            } else {
                eps_batch = xb;
            }
        }

        std::vector<GroupDraw> draws;
        for (const auto& g : post.groups) {
            GroupDraw d;
            d.group = &g;
            auto codes_g = slice_rows(codes, g.weight_offset, g.weight_len);
            if (mode.u == UHandling::SampleU) {
                auto xi = Tensor::constant(randn_mat(g.state.m(), 1, rng));
                d.u_sample = add(g.state.mu_u, matmul(g.state.l_u(), xi));
            }
            if (!g.local) {
                d.cond = conditional_qw(codes_g, g.state, g.spec, mode, d.u_sample);
            } else if (mode.cov == CovMode::Diag) {
                d.lm = local_diag_moments(codes_g, eps_batch, g, mode, d.u_sample);
            } else {
                // exact/fitc local conditionals are materialized per datapoint
                for (Eigen::Index i = 0; i < n; ++i) {
                    auto x_i = Tensor::constant(Mat(batch.x.row(i).transpose()));
                    d.per_point.push_back(local_conditional_qw(codes_g, x_i, post.aux, v_s,
                                                               g.state, g.spec, mode,
                                                               d.u_sample));
                }
            }
            draws.push_back(std::move(d));
        }

        for (int j = 0; j < j_samples; ++j) {
            TensorPtr out;
            if (!post.any_local()) {
                if (mode.local_reparam) {
                    TensorPtr wm, wv;
                    for (auto& d : draws) {
                        wm = wm ? vcat(wm, d.cond.mean) : d.cond.mean;
                        wv = wv ? vcat(wv, d.cond.var_diag) : d.cond.var_diag;
                    }
                    out = forward_moments(xb, wm, wv, arch, rng);
                } else {
                    TensorPtr w;
                    for (auto& d : draws) {
                        auto piece = sample_cond(d.cond, mode.cov, rng);
                        w = w ? vcat(w, piece) : piece;
                    }
                    out = forward_graph(xb, w, arch);
                }
            } else {
                // per-datapoint weights: global blocks shared, local blocks per column
                std::vector<TensorPtr> global_piece(draws.size());
                std::vector<TensorPtr> local_block(draws.size());
                for (size_t gi = 0; gi < draws.size(); ++gi) {
                    auto& d = draws[gi];
                    if (!d.group->local) {
                        if (!mode.local_reparam) global_piece[gi] = sample_cond(d.cond, mode.cov, rng);
                    } else if (d.lm && !mode.local_reparam) {
                        auto xi = Tensor::constant(randn_mat(d.group->weight_len, n, rng));
                        local_block[gi] = add(d.lm->mean, mul(sqrt(d.lm->var), xi));
                    }
                }
                std::vector<TensorPtr> rows;
                rows.reserve(n);
                for (Eigen::Index i = 0; i < n; ++i) {
                    auto x_i = Tensor::constant(Mat(batch.x.row(i)));
                    if (mode.local_reparam) {
                        TensorPtr wm, wv;
                        for (auto& d : draws) {
                            auto m_i = d.group->local ? slice_cols(d.lm->mean, i, 1) : d.cond.mean;
                            auto v_i = d.group->local ? slice_cols(d.lm->var, i, 1)
                                                      : d.cond.var_diag;
                            wm = wm ? vcat(wm, m_i) : m_i;
                            wv = wv ? vcat(wv, v_i) : v_i;
                        }
                        rows.push_back(forward_moments(x_i, wm, wv, arch, rng));
                        continue;
                    }
                    TensorPtr w;
                    for (size_t gi = 0; gi < draws.size(); ++gi) {
                        auto& d = draws[gi];
                        TensorPtr piece;
                        if (!d.group->local)
                            piece = global_piece[gi];
                        else if (d.lm)
                            piece = slice_cols(local_block[gi], i, 1);
                        else
                            piece = sample_cond(d.per_point[i], mode.cov, rng);
                        w = w ? vcat(w, piece) : piece;
                    }
                    rows.push_back(forward_graph(x_i, w, arch));
                }
                out = vcat_rows(std::move(rows));
            }
            auto ll = log_likelihood_graph(out, batch.y, batch.labels, post.lik);
            lik_sum = lik_sum ? add(lik_sum, ll) : ll;
        }
    }

    terms.loglik = mul_scalar(lik_sum, scale / (s_samples * j_samples));
    auto total = sub(terms.loglik, add(terms.kl_z, terms.kl_u));
    if (terms.kl_v) total = sub(total, terms.kl_v);
    terms.total = total;
    return terms;
}

// ---- training --------------------------------------------------------

namespace {

void check_finite(const ElboTerms& t) {
    auto bad = [](const TensorPtr& x) { return x && !std::isfinite(x->item()); };
    if (bad(t.kl_z)) throw std::runtime_error("ELBO non-finite: KL[q(z)||p(z)]");
    if (bad(t.kl_u)) throw std::runtime_error("ELBO non-finite: KL[q(u)||p(u)]");
    if (bad(t.kl_v)) throw std::runtime_error("ELBO non-finite: KL[q(V)||p(V)]");
    if (bad(t.loglik)) throw std::runtime_error("ELBO non-finite: expected log-likelihood");
}

std::vector<TensorPtr> trainable(const VariationalPosterior& post, const TrainConfig& cfg) {
    auto ps = post.parameters();
    if (cfg.train_likelihood && post.lik.kind == LikelihoodKind::Gaussian)
        ps.push_back(post.lik.log_noise_variance);
    return ps;
}

VariationalPosterior clone_posterior(const VariationalPosterior& src) {
    VariationalPosterior dst = src;  // copies structure and shared pointers
    auto dup = [](TensorPtr& t) {
        if (t) t = std::make_shared<Tensor>(t->value, t->requires_grad);
    };
    dup(dst.z_mean);
    dup(dst.z_logstd);
    dup(dst.v_mean);
    dup(dst.v_logstd);
    if (dst.lik.log_noise_variance) dup(dst.lik.log_noise_variance);
    for (auto& g : dst.groups) {
        dup(g.state.c_u);
        dup(g.state.mu_u);
        dup(g.state.l_u_raw);
        auto dup_params = [&](KernelParams& p) {
            dup(p.log_lengthscales);
            dup(p.log_variance);
            dup(p.log_period);
            dup(p.log_weight_noise);
        };
        dup_params(g.spec.code.params);
        if (g.spec.aux) dup_params(g.spec.aux->params);
    }
    return dst;
}

void set_aux_periods(VariationalPosterior& post, double period) {
    for (auto& g : post.groups) {
        if (g.spec.aux && g.spec.aux->kind == KernelKind::Periodic)
            g.spec.aux->params.log_period->value(0, 0) = std::log(period);
        if (g.spec.code.kind == KernelKind::Periodic)
            g.spec.code.params.log_period->value(0, 0) = std::log(period);
    }
}

bool has_periodic_factor(const VariationalPosterior& post) {
    for (const auto& g : post.groups)
        if ((g.spec.aux && g.spec.aux->kind == KernelKind::Periodic) ||
            g.spec.code.kind == KernelKind::Periodic)
            return true;
    return false;
}

TrainTrace train_loop(VariationalPosterior& post, const Batch& data, const TrainConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainTrace trace;
    Adam opt(trainable(post, cfg), cfg.lr);
    RngRoot root(cfg.seed);
    auto elbo_rng = root.stream("elbo");

    const auto n = data.size();
    const auto bs = std::min<Eigen::Index>(cfg.batch_size, n);
    const auto steps = (n + bs - 1) / bs;

    std::vector<Eigen::Index> order(n);
    for (Eigen::Index i = 0; i < n; ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.epochs > 1 && epoch == (2 * cfg.epochs) / 3) opt.set_lr(cfg.lr * cfg.lr_decay);
        auto shuffle_rng = root.stream("shuffle", static_cast<std::uint64_t>(epoch));
        for (Eigen::Index i = n - 1; i > 0; --i)
            std::swap(order[i], order[shuffle_rng.uniform_int(static_cast<std::uint64_t>(i + 1))]);

        double epoch_elbo = 0.0;
        for (Eigen::Index st = 0; st < steps; ++st) {
            Batch mb;
            const auto lo = st * bs;
            const auto len = std::min<Eigen::Index>(bs, n - lo);
            mb.x.resize(len, data.x.cols());
            if (data.y.size() > 0) mb.y.resize(len, data.y.cols());
            for (Eigen::Index i = 0; i < len; ++i) {
                mb.x.row(i) = data.x.row(order[lo + i]);
                if (data.y.size() > 0) mb.y.row(i) = data.y.row(order[lo + i]);
                if (!data.labels.empty()) mb.labels.push_back(data.labels[order[lo + i]]);
            }
            const double step_scale = static_cast<double>(n) / static_cast<double>(len);
            auto terms = elbo(mb, post, post.mode, cfg.s_samples, cfg.j_samples, step_scale,
                              elbo_rng);
            check_finite(terms);
            opt.zero_grad();
            auto loss = neg(terms.total);
            backward(loss);
            opt.step();
            epoch_elbo += terms.total->item();
        }
        (void)scale;
        trace.elbo_per_epoch.push_back(epoch_elbo / static_cast<double>(steps));
    }
    trace.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return trace;
}

}  // namespace

TrainTrace train(VariationalPosterior& post, const Batch& data, const TrainConfig& cfg) {
    if (!cfg.period_candidates.empty() && has_periodic_factor(post) && cfg.epochs > 0) {
        // the period is strongly multimodal; probe candidates briefly and keep
        // the best before the full run
        double best = -std::numeric_limits<double>::infinity();
        double best_period = cfg.period_candidates.front();
        for (double p : cfg.period_candidates) {
            auto probe = clone_posterior(post);
            set_aux_periods(probe, p);
            TrainConfig pc = cfg;
            pc.period_candidates.clear();
            pc.epochs = cfg.period_probe_epochs;
            auto tr = train_loop(probe, data, pc);
            const double score = tr.elbo_per_epoch.back();
            if (score > best) {
                best = score;
                best_period = p;
            }
        }
        set_aux_periods(post, best_period);
    }
    return train_loop(post, data, cfg);
}

std::vector<Mat> predict_samples(const VariationalPosterior& post, const Mat& x, int s_samples,
                                 int j_samples, std::uint64_t seed) {
    RngRoot root(seed);
    auto rng = root.stream("predict");
    const auto n = x.rows();
    auto xb = Tensor::constant(x);
    std::vector<Mat> outs;
    outs.reserve(static_cast<size_t>(s_samples) * j_samples);

    for (int s = 0; s < s_samples; ++s) {
        auto z_s = reparam_sample(post.z_mean, post.z_logstd, rng);
        auto codes = gather_pairs(z_s, post.code_index.in_unit, post.code_index.out_unit);
        TensorPtr v_s;
        TensorPtr eps_batch;
        if (post.any_local()) {
            if (post.aux.learned()) {
                v_s = reparam_sample(post.v_mean, post.v_logstd, rng);
                eps_batch = tanh(matmul(xb, transpose(v_s)));
            } else {
                eps_batch = xb;
            }
        }
        std::vector<GroupDraw> draws;
        for (const auto& g : post.groups) {
            GroupDraw d;
            d.group = &g;
            auto codes_g = slice_rows(codes, g.weight_offset, g.weight_len);
            if (post.mode.u == UHandling::SampleU) {
                auto xi = Tensor::constant(randn_mat(g.state.m(), 1, rng));
                d.u_sample = add(g.state.mu_u, matmul(g.state.l_u(), xi));
            }
            if (!g.local)
                d.cond = conditional_qw(codes_g, g.state, g.spec, post.mode, d.u_sample);
            else if (post.mode.cov == CovMode::Diag)
                d.lm = local_diag_moments(codes_g, eps_batch, g, post.mode, d.u_sample);
            else
                for (Eigen::Index i = 0; i < n; ++i) {
                    auto x_i = Tensor::constant(Mat(x.row(i).transpose()));
                    d.per_point.push_back(local_conditional_qw(codes_g, x_i, post.aux, v_s,
                                                               g.state, g.spec, post.mode,
                                                               d.u_sample));
                }
            draws.push_back(std::move(d));
        }
        for (int j = 0; j < j_samples; ++j) {
            TensorPtr out;
            if (!post.any_local()) {
                TensorPtr w;
                for (auto& d : draws) {
                    auto piece = sample_cond(d.cond, post.mode.cov, rng);
                    w = w ? vcat(w, piece) : piece;
                }
                out = forward_graph(xb, w, post.arch);
            } else {
                std::vector<TensorPtr> global_piece(draws.size());
                std::vector<TensorPtr> local_block(draws.size());
                for (size_t gi = 0; gi < draws.size(); ++gi) {
                    auto& d = draws[gi];
                    if (!d.group->local)
                        global_piece[gi] = sample_cond(d.cond, post.mode.cov, rng);
                    else if (d.lm) {
                        auto xi = Tensor::constant(randn_mat(d.group->weight_len, n, rng));
                        local_block[gi] = add(d.lm->mean, mul(sqrt(d.lm->var), xi));
                    }
                }
                std::vector<TensorPtr> rows;
                rows.reserve(n);
                for (Eigen::Index i = 0; i < n; ++i) {
                    TensorPtr w;
                    for (size_t gi = 0; gi < draws.size(); ++gi) {
                        auto& d = draws[gi];
                        TensorPtr piece;
                        if (!d.group->local)
                            piece = global_piece[gi];
                        else if (d.lm)
                            piece = slice_cols(local_block[gi], i, 1);
                        else
                            piece = sample_cond(d.per_point[i], post.mode.cov, rng);
                        w = w ? vcat(w, piece) : piece;
                    }
                    auto x_i = Tensor::constant(Mat(x.row(i)));
                    rows.push_back(forward_graph(x_i, w, post.arch));
                }
                out = vcat_rows(std::move(rows));
            }
            outs.push_back(out->value);
        }
    }
    return outs;
}

}  // namespace metagp
