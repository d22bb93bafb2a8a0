#include <doctest.h>

#include "metagp/tensor.hpp"
#include "test_util.hpp"

using namespace metagp;
using testutil::check_gradients;
using testutil::random_mat;
using testutil::random_spd;

TEST_CASE("matmul basics") {
    RngStream rng(11);
    Mat a = random_mat(3, 3, rng);

    auto ta = Tensor::constant(a);
    auto id = Tensor::constant(Mat::Identity(3, 3));
    CHECK(matmul(id, ta)->value.isApprox(a));

    Mat m(2, 2);
    m << 1, 2, 3, 4;
    Mat v(2, 1);
    v << 1, 1;
    Mat r = matmul(Tensor::constant(m), Tensor::constant(v))->value;
    CHECK(r(0, 0) == doctest::Approx(3.0));
    CHECK(r(1, 0) == doctest::Approx(7.0));

    auto z = Tensor::constant(Mat::Zero(3, 3));
    CHECK(matmul(z, ta)->value.isZero());

    CHECK_THROWS_AS(matmul(Tensor::constant(Mat::Zero(2, 3)), Tensor::constant(Mat::Zero(2, 3))),
                    ShapeMismatch);
}

TEST_CASE("cholesky examples") {
    auto id = Tensor::constant(Mat::Identity(2, 2));
    CHECK(cholesky(id, 0.0)->value.isApprox(Mat::Identity(2, 2)));

    Mat a(2, 2);
    a << 4, 2, 2, 3;
    Mat l = cholesky(Tensor::constant(a), 0.0)->value;
    CHECK(l(0, 0) == doctest::Approx(2.0));
    CHECK(l(0, 1) == doctest::Approx(0.0));
    CHECK(l(1, 0) == doctest::Approx(1.0));
    CHECK(l(1, 1) == doctest::Approx(std::sqrt(2.0)));
    CHECK((l * l.transpose()).isApprox(a, 1e-12));

    Mat bad(2, 2);
    bad << 1, 1, 1, 1;
    CHECK_THROWS_AS(cholesky(Tensor::constant(bad), 0.0), NotPositiveDefinite);
}

TEST_CASE("cholesky reconstruction up to n=300") {
    RngStream rng(7);
    for (Eigen::Index n : {5, 60, 300}) {
        Mat a = random_spd(n, rng);
        const double j = 1e-8;
        Mat l = cholesky(Tensor::constant(a), j)->value;
        Mat aj = a;
        aj.diagonal().array() += j;
        const double rel = (l * l.transpose() - aj).norm() / aj.norm();
        CHECK(rel < 1e-10);
    }
}

TEST_CASE("cholesky jitter escalation") {
    Mat psd(2, 2);
    psd << 1, 1, 1, 1;  // rank one
    auto l = cholesky_jittered(Tensor::constant(psd), 1e-6, 1e-2);
    CHECK(l->value(0, 0) > 1.0);
    Mat neg = -Mat::Identity(3, 3);
    CHECK_THROWS_AS(cholesky_jittered(Tensor::constant(neg), 1e-6, 1e-2), NotPositiveDefinite);
}

TEST_CASE("tri_solve examples and round trip") {
    Mat b(2, 1);
    b << 2, 2;
    auto id = Tensor::constant(Mat::Identity(2, 2));
    CHECK(tri_solve(id, Tensor::constant(b))->value.isApprox(b));

    Mat l(2, 2);
    l << 2, 0, 1, 1;
    Mat x = tri_solve(Tensor::constant(l), Tensor::constant(b))->value;
    CHECK(x(0, 0) == doctest::Approx(1.0));
    CHECK(x(1, 0) == doctest::Approx(1.0));

    Mat sing = Mat::Zero(2, 2);
    sing(0, 0) = 2.0;
    CHECK_THROWS_AS(tri_solve(Tensor::constant(sing), Tensor::constant(b)), SingularMatrix);

    RngStream rng(3);
    Mat spd = random_spd(40, rng);
    Mat lf = cholesky(Tensor::constant(spd), 0.0)->value;
    Mat xs = random_mat(40, 3, rng);
    Mat rhs = lf * xs;
    Mat rec = tri_solve(Tensor::constant(lf), Tensor::constant(rhs))->value;
    CHECK((rec - xs).norm() / xs.norm() < 1e-8);
}

TEST_CASE("backward basics") {
    auto x = Tensor::scalar(3.0, true);
    auto y = mul(x, x);
    backward(y);
    CHECK(x->grad(0, 0) == doctest::Approx(6.0));

    // repeated calls accumulate
    backward(y);
    CHECK(x->grad(0, 0) == doctest::Approx(12.0));

    // constant output: no gradient flows
    auto c = Tensor::scalar(5.0, false);
    auto z = Tensor::scalar(1.0, true);
    backward(add_scalar(c, 1.0));
    z->ensure_grad();
    CHECK(z->grad(0, 0) == 0.0);

    CHECK_THROWS_AS(backward(Tensor::param(Mat::Zero(2, 2))), NonScalarOutput);
}

TEST_CASE("cholesky gradient matches finite differences") {
    Mat a(2, 2);
    a << 4, 2, 2, 3;
    auto ta = Tensor::param(a);
    auto rep = check_gradients({ta}, [&] { return sum(cholesky(ta, 0.0)); });
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("gradients of composed ops match finite differences") {
    RngStream rng(21);

    SUBCASE("dense chain with solves") {
        auto a = Tensor::param(random_spd(4, rng));
        auto b = Tensor::param(random_mat(4, 2, rng));
        auto f = [&] {
            auto l = cholesky(a, 1e-8);
            auto x = tri_solve(l, b);
            auto y = tri_solve(l, x, true);
            return sum(mul(y, y)) + sum(log(extract_diag(l)));
        };
        CHECK(check_gradients({a, b}, f).max_rel_err < 1e-4);
    }

    SUBCASE("elementwise and reductions") {
        auto a = Tensor::param(random_mat(3, 4, rng, 0.2, 1.8));
        auto s = Tensor::param(random_mat(1, 1, rng, 0.5, 1.5));
        auto f = [&] {
            auto t = tanh(bcast_mul(a, s));
            auto u = exp(mul_scalar(a, 0.3)) + sqrt(add_scalar(a, 0.5));
            auto w = relu(sub(t, mul_scalar(u, 0.1)));
            return sum(row_sum(mul(w, u))) + sum(col_sum(sin(a))) + sum(bcast_add(log(u), s));
        };
        CHECK(check_gradients({a, s}, f).max_rel_err < 1e-4);
    }

    SUBCASE("structure ops") {
        auto z = Tensor::param(random_mat(5, 2, rng));
        auto r = Tensor::param(random_mat(1, 3, rng));
        std::vector<int> in{0, 1, 2, 3}, out{4, 3, 2, 1};
        auto f = [&] {
            auto c = gather_pairs(z, in, out);
            auto g = hcat(slice_cols(c, 1, 2), slice_rows(c, 0, 4));
            auto h = vcat(g, repeat_rows(hcat(r, r), 2));
            auto d = diag_embed(row_sum(h));
            return sum(mul(reshape(transpose(h), 3, 12), reshape(h, 3, 12))) +
                   sum(extract_diag(d));
        };
        CHECK(check_gradients({z, r}, f).max_rel_err < 1e-4);
    }

    SUBCASE("pairwise distances and column scaling") {
        auto x1 = Tensor::param(random_mat(4, 3, rng));
        auto x2 = Tensor::param(random_mat(5, 3, rng));
        auto s = Tensor::param(random_mat(3, 1, rng, 0.5, 2.0));
        auto f = [&] {
            auto d = pairwise_sqdist(colwise_scale(x1, s), colwise_scale(x2, s));
            return sum(exp(mul_scalar(d, -0.5)));
        };
        CHECK(check_gradients({x1, x2, s}, f).max_rel_err < 1e-4);
    }

    SUBCASE("rowwise outer products") {
        auto a = Tensor::param(random_mat(4, 3, rng));
        auto b = Tensor::param(random_mat(4, 2, rng));
        auto f = [&] {
            auto q = rowwise_outer(a, b);
            return sum(mul(q, q)) + sum(matmul(q, transpose(q)));
        };
        CHECK(check_gradients({a, b}, f).max_rel_err < 1e-4);
        // value layout: row-major m*K+k
        auto q = rowwise_outer(a, b);
        CHECK(q->value(1, 2 * 2 + 1) == doctest::Approx(a->value(1, 2) * b->value(1, 1)));
    }

    SUBCASE("categorical log likelihood") {
        auto logits = Tensor::param(random_mat(6, 4, rng));
        std::vector<int> labels{0, 3, 2, 1, 1, 0};
        auto f = [&] { return categorical_loglik(logits, labels); };
        CHECK(check_gradients({logits}, f).max_rel_err < 1e-4);
    }

    SUBCASE("matmul transpose mix") {
        auto a = Tensor::param(random_mat(3, 4, rng));
        auto b = Tensor::param(random_mat(4, 2, rng));
        auto f = [&] {
            auto p = matmul(a, b);
            return sum(mul(p, p)) + sum(matmul(transpose(b), transpose(a)));
        };
        CHECK(check_gradients({a, b}, f).max_rel_err < 1e-4);
    }
}

TEST_CASE("categorical loglik rejects bad class index") {
    auto logits = Tensor::constant(Mat::Zero(2, 3));
    CHECK_THROWS(categorical_loglik(logits, {0, 5}));
}
