#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace metagp {

// Row-major to keep flatten/reshape semantics identical to the weight
// enumeration order used throughout.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

struct ShapeMismatch : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct NotPositiveDefinite : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SingularMatrix : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NonScalarOutput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// A node in the computation graph. Values are immutable after construction;
// only the grad accumulator is written during backward(). The graph is a DAG
// of parent links, so reverse-topological replay yields leaf gradients.
class Tensor {
public:
    Mat value;
    Mat grad;  // allocated on first accumulation; same shape as value
    bool requires_grad = false;

    std::vector<TensorPtr> parents;
    std::function<void()> backward_fn;  // accumulates into parents' grads

    explicit Tensor(Mat v, bool rg = false) : value(std::move(v)), requires_grad(rg) {}

    static TensorPtr constant(Mat v) { return std::make_shared<Tensor>(std::move(v), false); }
    static TensorPtr param(Mat v) { return std::make_shared<Tensor>(std::move(v), true); }
    static TensorPtr scalar(double v, bool rg = false) {
        Mat m(1, 1);
        m(0, 0) = v;
        return std::make_shared<Tensor>(std::move(m), rg);
    }

    Eigen::Index rows() const { return value.rows(); }
    Eigen::Index cols() const { return value.cols(); }
    Eigen::Index size() const { return value.size(); }
    bool is_scalar() const { return value.rows() == 1 && value.cols() == 1; }
    double item() const {
        if (!is_scalar()) throw NonScalarOutput("item() on non-scalar tensor");
        return value(0, 0);
    }

    void ensure_grad() {
        if (grad.rows() != value.rows() || grad.cols() != value.cols())
            grad = Mat::Zero(value.rows(), value.cols());
    }
    void zero_grad() {
        if (grad.size() > 0) grad.setZero();
    }
    void accumulate(const Mat& g) {
        ensure_grad();
        grad += g;
    }
};

// ---- graph construction -----------------------------------------------

TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);  // elementwise
TensorPtr neg(const TensorPtr& a);
TensorPtr add_scalar(const TensorPtr& a, double c);
TensorPtr mul_scalar(const TensorPtr& a, double c);
// broadcast a 1x1 tensor against a matrix
TensorPtr bcast_add(const TensorPtr& a, const TensorPtr& s);
TensorPtr bcast_mul(const TensorPtr& a, const TensorPtr& s);

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
TensorPtr transpose(const TensorPtr& a);
TensorPtr reshape(const TensorPtr& a, Eigen::Index r, Eigen::Index c);
TensorPtr slice_rows(const TensorPtr& a, Eigen::Index start, Eigen::Index len);
TensorPtr slice_cols(const TensorPtr& a, Eigen::Index start, Eigen::Index len);
TensorPtr hcat(const TensorPtr& a, const TensorPtr& b);
TensorPtr vcat(const TensorPtr& a, const TensorPtr& b);
TensorPtr repeat_rows(const TensorPtr& row, Eigen::Index m);  // row is 1xd
TensorPtr extract_diag(const TensorPtr& a);                   // nxn -> nx1
TensorPtr diag_embed(const TensorPtr& v);                     // nx1 -> nxn
// rows r of output = [z[in[r],:], z[out[r],:]]; adjoint scatter-adds into z
TensorPtr gather_pairs(const TensorPtr& z, const std::vector<int>& in_idx,
                       const std::vector<int>& out_idx);

TensorPtr sum(const TensorPtr& a);      // 1x1
TensorPtr row_sum(const TensorPtr& a);  // mx1
TensorPtr col_sum(const TensorPtr& a);  // 1xn

TensorPtr exp(const TensorPtr& a);
TensorPtr log(const TensorPtr& a);
TensorPtr sqrt(const TensorPtr& a);  // adjoint guarded at 0
TensorPtr tanh(const TensorPtr& a);
TensorPtr relu(const TensorPtr& a);
TensorPtr sin(const TensorPtr& a);

// L·Lᵀ = a + jitter·I; throws NotPositiveDefinite when the shifted matrix
// fails to factor. Differentiable w.r.t. a.
TensorPtr cholesky(const TensorPtr& a, double jitter);
// escalates jitter by x10 from `start` to `max_jitter` before giving up
TensorPtr cholesky_jittered(const TensorPtr& a, double start = 1e-6, double max_jitter = 1e-2);
// solves l·x = b (or lᵀ·x = b when transposed); l lower-triangular
TensorPtr tri_solve(const TensorPtr& l, const TensorPtr& b, bool transposed = false);

// D_ij = ||a_i - b_j||^2 for row sets a (m x d), b (n x d)
TensorPtr pairwise_sqdist(const TensorPtr& a, const TensorPtr& b);
// scales column k of x (m x d) by s_k (s is d x 1)
TensorPtr colwise_scale(const TensorPtr& x, const TensorPtr& s);

// out[i, m*K+k] = a(i,m)*b(i,k) for a (n x M), b (n x K): per-row outer
// products flattened row-major
TensorPtr rowwise_outer(const TensorPtr& a, const TensorPtr& b);

// sum_n log softmax(logits)[n, labels[n]]; logits is batch x classes
TensorPtr categorical_loglik(const TensorPtr& logits, const std::vector<int>& labels);

// Populates grads of every requires_grad leaf reachable from `out` with
// d out / d leaf. Repeated calls accumulate.
void backward(const TensorPtr& out);

// convenience operators
inline TensorPtr operator+(const TensorPtr& a, const TensorPtr& b) { return add(a, b); }
inline TensorPtr operator-(const TensorPtr& a, const TensorPtr& b) { return sub(a, b); }
inline TensorPtr operator*(const TensorPtr& a, const TensorPtr& b) { return mul(a, b); }
inline TensorPtr operator*(double c, const TensorPtr& a) { return mul_scalar(a, c); }
inline TensorPtr operator-(const TensorPtr& a) { return neg(a); }

}  // namespace metagp
