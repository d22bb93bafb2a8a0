#include <doctest.h>

#include <Eigen/Eigenvalues>

#include "metagp/kernels.hpp"
#include "test_util.hpp"

using namespace metagp;
using testutil::check_gradients;
using testutil::random_mat;

TEST_CASE("rbf ard point values") {
    auto spec = KernelSpec::rbf_ard(1);
    Vec a(1), b(1);
    a << 0.3, b << 0.3;
    CHECK(eval_rbf_ard(a, b, spec.code.params) == doctest::Approx(1.0));
    b << 1.3;
    CHECK(eval_rbf_ard(a, b, spec.code.params) == doctest::Approx(std::exp(-0.5)).epsilon(1e-9));
    b << 1e4;
    CHECK(eval_rbf_ard(a, b, spec.code.params) < 1e-300);

    Vec c(2);
    c << 0, 0;
    CHECK_THROWS_AS(eval_rbf_ard(a, c, spec.code.params), ShapeMismatch);
}

TEST_CASE("periodic point values") {
    auto spec = KernelSpec::periodic(1);
    Vec a(1), b(1);
    a << 0.2, b << 0.2;
    CHECK(eval_periodic(a, b, spec.code.params) == doctest::Approx(1.0));
    b << 1.2;  // one full period
    CHECK(eval_periodic(a, b, spec.code.params) == doctest::Approx(1.0).epsilon(1e-9));
    b << 0.7;  // half period
    CHECK(eval_periodic(a, b, spec.code.params) == doctest::Approx(std::exp(-2.0)).epsilon(1e-9));
}

TEST_CASE("product kernel factorizes bit for bit") {
    RngStream rng(5);
    auto spec = KernelSpec::product(4, KernelKind::RbfArd, 2);
    for (int t = 0; t < 20; ++t) {
        Vec c1 = random_mat(6, 1, rng).col(0);
        Vec c2 = random_mat(6, 1, rng).col(0);
        const double full = eval_product(c1, c2, spec);
        const double kc = eval_rbf_ard(c1.head(4), c2.head(4), spec.code.params);
        const double ka = eval_rbf_ard(c1.tail(2), c2.tail(2), spec.aux->params);
        CHECK(full == kc * ka);  // exact equality
    }

    // identical inputs -> shared variance (aux variance pinned to 1)
    Vec c = random_mat(6, 1, rng).col(0);
    CHECK(eval_product(c, c, spec) == doctest::Approx(1.0));

    // distant aux part drives the product to zero despite equal codes
    Vec far = c;
    far.tail(2).array() += 1e3;
    CHECK(eval_product(c, far, spec) < 1e-200);
}

TEST_CASE("kernel symmetry") {
    RngStream rng(31);
    auto rbf = KernelSpec::rbf_ard(3);
    auto per = KernelSpec::periodic(3);
    for (int t = 0; t < 30; ++t) {
        Vec a = random_mat(3, 1, rng).col(0);
        Vec b = random_mat(3, 1, rng).col(0);
        CHECK(eval_rbf_ard(a, b, rbf.code.params) == eval_rbf_ard(b, a, rbf.code.params));
        CHECK(eval_periodic(a, b, per.code.params) == eval_periodic(b, a, per.code.params));
    }
}

TEST_CASE("gram shape, symmetry, diagonal") {
    RngStream rng(9);
    auto spec = KernelSpec::rbf_ard(3);
    Mat x = random_mat(17, 3, rng);
    Mat g = gram(Tensor::constant(x), Tensor::constant(x), spec)->value;
    CHECK(g.rows() == 17);
    CHECK(g.cols() == 17);
    CHECK(g.isApprox(g.transpose()));
    for (int i = 0; i < 17; ++i) CHECK(g(i, i) == doctest::Approx(1.0));

    Mat one = random_mat(1, 3, rng);
    Mat g1 = gram(Tensor::constant(one), Tensor::constant(one), spec)->value;
    CHECK(g1.rows() == 1);
    CHECK(g1(0, 0) == doctest::Approx(eval_rbf_ard(one.row(0), one.row(0), spec.code.params)));
}

TEST_CASE("gram matrices are positive semidefinite") {
    RngStream rng(13);
    for (auto kind : {KernelKind::RbfArd, KernelKind::Periodic}) {
        auto spec = kind == KernelKind::RbfArd ? KernelSpec::rbf_ard(2) : KernelSpec::periodic(2);
        Mat x = random_mat(100, 2, rng);
        Mat g = gram(Tensor::constant(x), Tensor::constant(x), spec)->value;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(g)};
        CHECK(es.eigenvalues().minCoeff() > -1e-8);
        Mat gj = g + 1e-6 * Mat::Identity(100, 100);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es2{Eigen::MatrixXd(gj)};
        CHECK(es2.eigenvalues().minCoeff() > 0.0);
    }
    // product over 200 random code+aux rows
    auto spec = KernelSpec::product(4, KernelKind::Periodic, 1);
    Mat x = random_mat(200, 5, rng);
    Mat g = gram(Tensor::constant(x), Tensor::constant(x), spec)->value;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{
        Eigen::MatrixXd(g + 1e-6 * Mat::Identity(200, 200))};
    CHECK(es.eigenvalues().minCoeff() > 0.0);
}

TEST_CASE("gram gradients w.r.t. log parameters match finite differences") {
    RngStream rng(17);
    Mat x1v = random_mat(5, 3, rng);
    Mat x2v = random_mat(4, 3, rng);
    auto x1 = Tensor::constant(x1v);
    auto x2 = Tensor::constant(x2v);

    SUBCASE("rbf ard") {
        auto spec = KernelSpec::rbf_ard(3);
        auto f = [&] { return sum(mul(gram(x1, x2, spec), gram(x1, x2, spec))); };
        auto rep =
            check_gradients({spec.code.params.log_lengthscales, spec.code.params.log_variance}, f);
        CHECK(rep.max_rel_err < 1e-4);
    }
    SUBCASE("periodic") {
        auto spec = KernelSpec::periodic(3);
        spec.code.params.log_period->value(0, 0) = std::log(1.7);
        auto f = [&] { return sum(gram(x1, x2, spec)); };
        auto rep = check_gradients({spec.code.params.log_lengthscales,
                                    spec.code.params.log_variance, spec.code.params.log_period},
                                   f);
        CHECK(rep.max_rel_err < 1e-4);
    }
    SUBCASE("product with gradients through inputs") {
        auto spec = KernelSpec::product(2, KernelKind::RbfArd, 1);
        auto xa = Tensor::param(random_mat(5, 3, rng));
        auto xb = Tensor::param(random_mat(4, 3, rng));
        auto f = [&] { return sum(gram(xa, xb, spec)); };
        auto rep = check_gradients({xa, xb, spec.code.params.log_lengthscales,
                                    spec.aux->params.log_lengthscales},
                                   f);
        CHECK(rep.max_rel_err < 1e-4);
    }
}
