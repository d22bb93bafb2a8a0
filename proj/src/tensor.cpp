#include "metagp/tensor.hpp"

#include <cmath>
#include <unordered_set>

namespace metagp {

namespace {

std::string shape_str(const TensorPtr& t) {
    return "[" + std::to_string(t->rows()) + "x" + std::to_string(t->cols()) + "]";
}

void check_same_shape(const char* op, const TensorPtr& a, const TensorPtr& b) {
    if (a->rows() != b->rows() || a->cols() != b->cols())
        throw ShapeMismatch(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                            " differ");
}

TensorPtr finish(Mat v, std::vector<TensorPtr> parents, std::function<void(Tensor*)> bw) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    auto out = std::make_shared<Tensor>(std::move(v), rg);
    if (rg) {
        out->parents = std::move(parents);
        Tensor* o = out.get();
        out->backward_fn = [o, f = std::move(bw)]() { f(o); };
    }
    return out;
}

Mat tril(const Mat& m) { return m.triangularView<Eigen::Lower>(); }

}  // namespace

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape("add", a, b);
    return finish(a->value + b->value, {a, b}, [a, b](Tensor* o) {
        if (a->requires_grad) a->accumulate(o->grad);
        if (b->requires_grad) b->accumulate(o->grad);
    });
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape("sub", a, b);
    return finish(a->value - b->value, {a, b}, [a, b](Tensor* o) {
        if (a->requires_grad) a->accumulate(o->grad);
        if (b->requires_grad) b->accumulate(-o->grad);
    });
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape("mul", a, b);
    return finish(a->value.cwiseProduct(b->value), {a, b}, [a, b](Tensor* o) {
        if (a->requires_grad) a->accumulate(o->grad.cwiseProduct(b->value));
        if (b->requires_grad) b->accumulate(o->grad.cwiseProduct(a->value));
    });
}

TensorPtr neg(const TensorPtr& a) {
    return finish(-a->value, {a}, [a](Tensor* o) { a->accumulate(-o->grad); });
}

TensorPtr add_scalar(const TensorPtr& a, double c) {
    return finish(a->value.array() + c, {a}, [a](Tensor* o) { a->accumulate(o->grad); });
}

TensorPtr mul_scalar(const TensorPtr& a, double c) {
    return finish(a->value * c, {a}, [a, c](Tensor* o) { a->accumulate(c * o->grad); });
}

TensorPtr bcast_add(const TensorPtr& a, const TensorPtr& s) {
    if (!s->is_scalar()) throw ShapeMismatch("bcast_add: rhs must be 1x1, got " + shape_str(s));
    return finish(a->value.array() + s->value(0, 0), {a, s}, [a, s](Tensor* o) {
        if (a->requires_grad) a->accumulate(o->grad);
        if (s->requires_grad) {
            Mat g(1, 1);
            g(0, 0) = o->grad.sum();
            s->accumulate(g);
        }
    });
}

TensorPtr bcast_mul(const TensorPtr& a, const TensorPtr& s) {
    if (!s->is_scalar()) throw ShapeMismatch("bcast_mul: rhs must be 1x1, got " + shape_str(s));
    return finish(a->value * s->value(0, 0), {a, s}, [a, s](Tensor* o) {
        if (a->requires_grad) a->accumulate(s->value(0, 0) * o->grad);
        if (s->requires_grad) {
            Mat g(1, 1);
            g(0, 0) = o->grad.cwiseProduct(a->value).sum();
            s->accumulate(g);
        }
    });
}

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->cols() != b->rows())
        throw ShapeMismatch("matmul: inner dimensions of " + shape_str(a) + " and " + shape_str(b) +
                            " disagree");
    return finish(a->value * b->value, {a, b}, [a, b](Tensor* o) {
        if (a->requires_grad) a->accumulate(o->grad * b->value.transpose());
        if (b->requires_grad) b->accumulate(a->value.transpose() * o->grad);
    });
}

TensorPtr transpose(const TensorPtr& a) {
    return finish(a->value.transpose(), {a},
                  [a](Tensor* o) { a->accumulate(o->grad.transpose()); });
}

TensorPtr reshape(const TensorPtr& a, Eigen::Index r, Eigen::Index c) {
    if (r * c != a->size())
        throw ShapeMismatch("reshape: cannot view " + shape_str(a) + " as [" + std::to_string(r) +
                            "x" + std::to_string(c) + "]");
    Mat v = Eigen::Map<const Mat>(a->value.data(), r, c);
    return finish(std::move(v), {a}, [a, r0 = a->rows(), c0 = a->cols()](Tensor* o) {
        a->accumulate(Eigen::Map<const Mat>(o->grad.data(), r0, c0));
    });
}

TensorPtr slice_rows(const TensorPtr& a, Eigen::Index start, Eigen::Index len) {
    if (start < 0 || start + len > a->rows())
        throw ShapeMismatch("slice_rows: range [" + std::to_string(start) + ", " +
                            std::to_string(start + len) + ") out of " + shape_str(a));
    return finish(a->value.middleRows(start, len), {a}, [a, start, len](Tensor* o) {
        a->ensure_grad();
        a->grad.middleRows(start, len) += o->grad;
    });
}

TensorPtr slice_cols(const TensorPtr& a, Eigen::Index start, Eigen::Index len) {
    if (start < 0 || start + len > a->cols())
        throw ShapeMismatch("slice_cols: range [" + std::to_string(start) + ", " +
                            std::to_string(start + len) + ") out of " + shape_str(a));
    return finish(a->value.middleCols(start, len), {a}, [a, start, len](Tensor* o) {
        a->ensure_grad();
        a->grad.middleCols(start, len) += o->grad;
    });
}

TensorPtr hcat(const TensorPtr& a, const TensorPtr& b) {
    if (a->rows() != b->rows())
        throw ShapeMismatch("hcat: row counts of " + shape_str(a) + " and " + shape_str(b) +
                            " differ");
    Mat v(a->rows(), a->cols() + b->cols());
    v << a->value, b->value;
    return finish(std::move(v), {a, b}, [a, b](Tensor* o) {
        if (a->requires_grad) a->accumulate(o->grad.leftCols(a->cols()));
        if (b->requires_grad) b->accumulate(o->grad.rightCols(b->cols()));
    });
}

TensorPtr vcat(const TensorPtr& a, const TensorPtr& b) {
    if (a->cols() != b->cols())
        throw ShapeMismatch("vcat: column counts of " + shape_str(a) + " and " + shape_str(b) +
                            " differ");
    Mat v(a->rows() + b->rows(), a->cols());
    v << a->value, b->value;
    return finish(std::move(v), {a, b}, [a, b](Tensor* o) {
        if (a->requires_grad) a->accumulate(o->grad.topRows(a->rows()));
        if (b->requires_grad) b->accumulate(o->grad.bottomRows(b->rows()));
    });
}

TensorPtr repeat_rows(const TensorPtr& row, Eigen::Index m) {
    if (row->rows() != 1) throw ShapeMismatch("repeat_rows: expected 1xd, got " + shape_str(row));
    Mat v = row->value.replicate(m, 1);
    return finish(std::move(v), {row},
                  [row](Tensor* o) { row->accumulate(o->grad.colwise().sum()); });
}

TensorPtr extract_diag(const TensorPtr& a) {
    if (a->rows() != a->cols())
        throw ShapeMismatch("extract_diag: expected square, got " + shape_str(a));
    return finish(a->value.diagonal(), {a}, [a](Tensor* o) {
        a->ensure_grad();
        a->grad.diagonal() += o->grad.col(0);
    });
}

TensorPtr diag_embed(const TensorPtr& v) {
    if (v->cols() != 1) throw ShapeMismatch("diag_embed: expected nx1, got " + shape_str(v));
    Mat m = Mat::Zero(v->rows(), v->rows());
    m.diagonal() = v->value.col(0);
    return finish(std::move(m), {v},
                  [v](Tensor* o) { v->accumulate(o->grad.diagonal()); });
}

TensorPtr gather_pairs(const TensorPtr& z, const std::vector<int>& in_idx,
                       const std::vector<int>& out_idx) {
    if (in_idx.size() != out_idx.size())
        throw ShapeMismatch("gather_pairs: index lists differ in length");
    const auto n = static_cast<Eigen::Index>(in_idx.size());
    const auto d = z->cols();
    Mat v(n, 2 * d);
    for (Eigen::Index r = 0; r < n; ++r) {
        v.block(r, 0, 1, d) = z->value.row(in_idx[r]);
        v.block(r, d, 1, d) = z->value.row(out_idx[r]);
    }
    return finish(std::move(v), {z}, [z, in_idx, out_idx, d](Tensor* o) {
        z->ensure_grad();
        for (Eigen::Index r = 0; r < o->grad.rows(); ++r) {
            z->grad.row(in_idx[r]) += o->grad.block(r, 0, 1, d);
            z->grad.row(out_idx[r]) += o->grad.block(r, d, 1, d);
        }
    });
}

TensorPtr sum(const TensorPtr& a) {
    Mat v(1, 1);
    v(0, 0) = a->value.sum();
    return finish(std::move(v), {a}, [a](Tensor* o) {
        a->ensure_grad();
        a->grad.array() += o->grad(0, 0);
    });
}

TensorPtr row_sum(const TensorPtr& a) {
    return finish(a->value.rowwise().sum(), {a}, [a](Tensor* o) {
        a->ensure_grad();
        a->grad.colwise() += Eigen::VectorXd(o->grad.col(0));
    });
}

TensorPtr col_sum(const TensorPtr& a) {
    return finish(a->value.colwise().sum(), {a}, [a](Tensor* o) {
        a->ensure_grad();
        a->grad.rowwise() += Eigen::RowVectorXd(o->grad.row(0));
    });
}

TensorPtr exp(const TensorPtr& a) {
    return finish(a->value.array().exp(), {a},
                  [a](Tensor* o) { a->accumulate(o->grad.cwiseProduct(o->value)); });
}

TensorPtr log(const TensorPtr& a) {
    return finish(a->value.array().log(), {a},
                  [a](Tensor* o) { a->accumulate(o->grad.cwiseQuotient(a->value)); });
}

TensorPtr sqrt(const TensorPtr& a) {
    Mat v = a->value.array().sqrt();
    return finish(std::move(v), {a}, [a](Tensor* o) {
        // subgradient 0 at the origin
        Mat g = o->grad;
        for (Eigen::Index i = 0; i < g.size(); ++i) {
            const double x = a->value(i);
            g(i) = x > 0.0 ? g(i) * 0.5 / std::sqrt(x) : 0.0;
        }
        a->accumulate(g);
    });
}

TensorPtr tanh(const TensorPtr& a) {
    return finish(a->value.array().tanh(), {a}, [a](Tensor* o) {
        a->accumulate(o->grad.cwiseProduct(Mat(1.0 - o->value.array().square())));
    });
}

TensorPtr relu(const TensorPtr& a) {
    return finish(a->value.cwiseMax(0.0), {a}, [a](Tensor* o) {
        Mat mask = (a->value.array() > 0.0).cast<double>();
        a->accumulate(o->grad.cwiseProduct(mask));
    });
}

TensorPtr sin(const TensorPtr& a) {
    return finish(a->value.array().sin(), {a}, [a](Tensor* o) {
        a->accumulate(o->grad.cwiseProduct(Mat(a->value.array().cos())));
    });
}

TensorPtr cholesky(const TensorPtr& a, double jitter) {
    if (a->rows() != a->cols())
        throw ShapeMismatch("cholesky: expected square, got " + shape_str(a));
    if (jitter < 0.0) throw std::invalid_argument("cholesky: negative jitter");
    const Eigen::Index n = a->rows();
    // factor the symmetric part; the adjoint below distributes evenly too
    Mat m = 0.5 * (a->value + a->value.transpose());
    m.diagonal().array() += jitter;
    Mat L = Mat::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const double d = m(j, j) - L.row(j).head(j).squaredNorm();
        if (d <= 0.0)
            throw NotPositiveDefinite("cholesky: pivot " + std::to_string(j) +
                                      " not positive (jitter " + std::to_string(jitter) + ")");
        L(j, j) = std::sqrt(d);
        for (Eigen::Index i = j + 1; i < n; ++i) {
            const double s = L.row(i).head(j).dot(L.row(j).head(j));
            L(i, j) = (m(i, j) - s) / L(j, j);
        }
    }
    return finish(std::move(L), {a}, [a](Tensor* o) {
        // Reverse-mode rule for A = L Lᵀ (Murray 2016): sym(L⁻ᵀ Φ(LᵀḠ) L⁻¹)
        // with Φ taking the lower triangle and halving the diagonal.
        const Mat& L = o->value;
        Mat G = tril(o->grad);
        Mat P = L.transpose() * G;
        P = tril(P);
        P.diagonal() *= 0.5;
        Mat X1 = L.triangularView<Eigen::Lower>().transpose().solve(P);
        Mat X2t = L.triangularView<Eigen::Lower>().transpose().solve(Mat(X1.transpose()));
        Mat S = 0.5 * (X2t + X2t.transpose());
        a->accumulate(S);
    });
}

TensorPtr cholesky_jittered(const TensorPtr& a, double start, double max_jitter) {
    double j = start;
    while (true) {
        try {
            return cholesky(a, j);
        } catch (const NotPositiveDefinite&) {
            if (j == 0.0)
                j = start > 0.0 ? start : 1e-6;
            else
                j *= 10.0;
            if (j > max_jitter) throw;
        }
    }
}

TensorPtr tri_solve(const TensorPtr& l, const TensorPtr& b, bool transposed) {
    if (l->rows() != l->cols())
        throw ShapeMismatch("tri_solve: expected square factor, got " + shape_str(l));
    if (l->rows() != b->rows())
        throw ShapeMismatch("tri_solve: rows of " + shape_str(l) + " and " + shape_str(b) +
                            " disagree");
    for (Eigen::Index i = 0; i < l->rows(); ++i)
        if (l->value(i, i) == 0.0)
            throw SingularMatrix("tri_solve: zero diagonal at " + std::to_string(i));
    Mat x = transposed ? Mat(l->value.triangularView<Eigen::Lower>().transpose().solve(b->value))
                       : Mat(l->value.triangularView<Eigen::Lower>().solve(b->value));
    return finish(std::move(x), {l, b}, [l, b, transposed](Tensor* o) {
        const Mat& X = o->value;
        if (!transposed) {
            Mat bb = l->value.triangularView<Eigen::Lower>().transpose().solve(o->grad);
            if (b->requires_grad) b->accumulate(bb);
            if (l->requires_grad) l->accumulate(Mat(-tril(bb * X.transpose())));
        } else {
            Mat bb = l->value.triangularView<Eigen::Lower>().solve(o->grad);
            if (b->requires_grad) b->accumulate(bb);
            if (l->requires_grad) l->accumulate(Mat(-tril(X * bb.transpose())));
        }
    });
}

TensorPtr pairwise_sqdist(const TensorPtr& a, const TensorPtr& b) {
    if (a->cols() != b->cols())
        throw ShapeMismatch("pairwise_sqdist: dims of " + shape_str(a) + " and " + shape_str(b) +
                            " disagree");
    // explicit differences: exactly symmetric in the arguments and never
    // negative, unlike the norm-expansion trick
    Mat d(a->rows(), b->rows());
    for (Eigen::Index i = 0; i < a->rows(); ++i)
        for (Eigen::Index j = 0; j < b->rows(); ++j)
            d(i, j) = (a->value.row(i) - b->value.row(j)).squaredNorm();
    return finish(std::move(d), {a, b}, [a, b](Tensor* o) {
        const Mat& g = o->grad;
        if (a->requires_grad) {
            Vec rs = g.rowwise().sum();
            Mat ga = 2.0 * (rs.asDiagonal() * a->value - g * b->value);
            a->accumulate(ga);
        }
        if (b->requires_grad) {
            Vec cs = g.colwise().sum();
            Mat gb = 2.0 * (cs.asDiagonal() * b->value - g.transpose() * a->value);
            b->accumulate(gb);
        }
    });
}

TensorPtr colwise_scale(const TensorPtr& x, const TensorPtr& s) {
    if (s->cols() != 1 || s->rows() != x->cols())
        throw ShapeMismatch("colwise_scale: scale " + shape_str(s) + " does not match " +
                            shape_str(x));
    Mat v = x->value.array().rowwise() * s->value.col(0).transpose().array();
    return finish(std::move(v), {x, s}, [x, s](Tensor* o) {
        if (x->requires_grad)
            x->accumulate(Mat(o->grad.array().rowwise() * s->value.col(0).transpose().array()));
        if (s->requires_grad)
            s->accumulate(Mat(o->grad.cwiseProduct(x->value).colwise().sum().transpose()));
    });
}

TensorPtr rowwise_outer(const TensorPtr& a, const TensorPtr& b) {
    if (a->rows() != b->rows())
        throw ShapeMismatch("rowwise_outer: row counts of " + shape_str(a) + " and " +
                            shape_str(b) + " differ");
    const auto n = a->rows();
    const auto ma = a->cols();
    const auto kb = b->cols();
    Mat v(n, ma * kb);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index m = 0; m < ma; ++m)
            v.row(i).segment(m * kb, kb) = a->value(i, m) * b->value.row(i);
    return finish(std::move(v), {a, b}, [a, b, ma, kb](Tensor* o) {
        if (a->requires_grad) {
            Mat ga(a->rows(), ma);
            for (Eigen::Index i = 0; i < a->rows(); ++i)
                for (Eigen::Index m = 0; m < ma; ++m)
                    ga(i, m) = o->grad.row(i).segment(m * kb, kb).dot(b->value.row(i));
            a->accumulate(ga);
        }
        if (b->requires_grad) {
            Mat gb = Mat::Zero(b->rows(), kb);
            for (Eigen::Index i = 0; i < b->rows(); ++i)
                for (Eigen::Index m = 0; m < ma; ++m)
                    gb.row(i) += a->value(i, m) * o->grad.row(i).segment(m * kb, kb);
            b->accumulate(gb);
        }
    });
}

TensorPtr categorical_loglik(const TensorPtr& logits, const std::vector<int>& labels) {
    const auto n = logits->rows();
    const auto c = logits->cols();
    if (static_cast<Eigen::Index>(labels.size()) != n)
        throw ShapeMismatch("categorical_loglik: " + std::to_string(labels.size()) +
                            " labels for " + shape_str(logits));
    for (int y : labels)
        if (y < 0 || y >= c)
            throw std::out_of_range("categorical_loglik: class index " + std::to_string(y) +
                                    " outside [0, " + std::to_string(c) + ")");
    double ll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double m = logits->value.row(i).maxCoeff();
        const double lse = m + std::log((logits->value.row(i).array() - m).exp().sum());
        ll += logits->value(i, labels[i]) - lse;
    }
    Mat v(1, 1);
    v(0, 0) = ll;
    return finish(std::move(v), {logits}, [logits, labels](Tensor* o) {
        const double g = o->grad(0, 0);
        Mat gl(logits->rows(), logits->cols());
        for (Eigen::Index i = 0; i < logits->rows(); ++i) {
            const double m = logits->value.row(i).maxCoeff();
            Eigen::RowVectorXd p = (logits->value.row(i).array() - m).exp();
            p /= p.sum();
            gl.row(i) = -g * p;
            gl(i, labels[i]) += g;
        }
        logits->accumulate(gl);
    });
}

void backward(const TensorPtr& out) {
    if (!out->is_scalar()) throw NonScalarOutput("backward: output must be scalar");
    if (!out->requires_grad) return;  // constant w.r.t. every leaf; grads stay zero

    // iterative post-order DFS gives a topological order
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, size_t>> stack;
    stack.emplace_back(out.get(), 0);
    visited.insert(out.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // interior grads are per-call scratch; only leaf accumulators persist
    for (Tensor* t : order)
        if (t->backward_fn) t->zero_grad();

    out->ensure_grad();
    out->grad(0, 0) += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) {
            (*it)->ensure_grad();
            (*it)->backward_fn();
        }
    }
}

}  // namespace metagp
