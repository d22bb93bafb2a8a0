#include <doctest.h>

#include "metagp/bnn.hpp"
#include "test_util.hpp"

using namespace metagp;

TEST_CASE("flatten/unflatten round trip is the identity") {
    Architecture a{{2, 5, 3}, Activation::Relu, BiasMode::BiasUnit};
    RngStream rng(4);
    Vec w = testutil::random_mat(a.weight_count(), 1, rng).col(0);
    auto s = WeightSample::unflatten(w, a);
    CHECK(s.layers[0].rows() == 3);
    CHECK(s.layers[0].cols() == 5);
    CHECK(s.flatten(a) == w);
}

TEST_CASE("forward hand examples") {
    SUBCASE("1-1-1 relu net") {
        Architecture a{{1, 1, 1}, Activation::Relu, BiasMode::BiasUnit};
        Vec w(4);
        w << 1, 0, 2, 0;  // w1=1 b1=0 w2=2 b2=0
        auto s = WeightSample::unflatten(w, a);
        Vec x(1);
        x << 3;
        CHECK(forward(x, s, a)(0) == doctest::Approx(6.0));
        x << -3;
        CHECK(forward(x, s, a)(0) == doctest::Approx(0.0));
    }
    SUBCASE("zero weights give the final bias") {
        Architecture a{{2, 4, 2}, Activation::Relu, BiasMode::BiasUnit};
        Vec w = Vec::Zero(a.weight_count());
        // set output-layer bias row (last fan-in row of layer 1)
        auto s = WeightSample::unflatten(w, a);
        s.layers[1].row(4) << 0.7, -0.3;
        Vec x(2);
        x << 1.0, -2.0;
        Vec out = forward(x, s, a);
        CHECK(out(0) == doctest::Approx(0.7));
        CHECK(out(1) == doctest::Approx(-0.3));
    }
    SUBCASE("tanh net is odd at zero") {
        Architecture a{{1, 3, 1}, Activation::Tanh, BiasMode::None};
        RngStream rng(8);
        Vec w = testutil::random_mat(a.weight_count(), 1, rng).col(0);
        auto s = WeightSample::unflatten(w, a);
        Vec x = Vec::Zero(1);
        CHECK(forward(x, s, a)(0) == doctest::Approx(0.0));
    }
}

TEST_CASE("relu net without biases is positively homogeneous") {
    Architecture a{{2, 6, 1}, Activation::Relu, BiasMode::None};
    RngStream rng(15);
    Vec w = testutil::random_mat(a.weight_count(), 1, rng).col(0);
    auto s = WeightSample::unflatten(w, a);
    for (int t = 0; t < 10; ++t) {
        Vec x = testutil::random_mat(2, 1, rng).col(0);
        const double c = rng.uniform(0.1, 3.0);
        Vec fx = forward(x, s, a);
        Vec fcx = forward(Vec(c * x), s, a);
        CHECK(fcx(0) == doctest::Approx(c * fx(0)).epsilon(1e-10));
    }
}

TEST_CASE("graph forward agrees with plain forward") {
    Architecture a{{2, 4, 3}, Activation::Tanh, BiasMode::BiasUnit};
    RngStream rng(23);
    Vec w = testutil::random_mat(a.weight_count(), 1, rng).col(0);
    Mat xb = testutil::random_mat(7, 2, rng);
    auto out = forward_graph(Tensor::constant(xb), Tensor::constant(w), a);
    auto s = WeightSample::unflatten(w, a);
    for (int i = 0; i < 7; ++i) {
        Vec ref = forward(xb.row(i).transpose(), s, a);
        for (int j = 0; j < 3; ++j) CHECK(out->value(i, j) == doctest::Approx(ref(j)));
    }
}

TEST_CASE("log likelihood values") {
    SUBCASE("gaussian") {
        auto lik = Likelihood::gaussian(1.0);
        Vec y(1), f(1);
        y << 0.4, f << 0.4;
        CHECK(log_likelihood(y, f, lik) ==
              doctest::Approx(-0.5 * std::log(2 * M_PI)).epsilon(1e-12));
        f << 1.4;  // unit residual
        CHECK(log_likelihood(y, f, lik) ==
              doctest::Approx(-0.5 * std::log(2 * M_PI) - 0.5).epsilon(1e-12));
    }
    SUBCASE("categorical uniform") {
        Vec logits = Vec::Constant(4, 0.7);
        CHECK(log_likelihood_class(2, logits) == doctest::Approx(std::log(0.25)));
        CHECK_THROWS(log_likelihood_class(7, logits));
    }
    SUBCASE("graph gaussian matches plain") {
        auto lik = Likelihood::gaussian(0.3);
        RngStream rng(6);
        Mat f = testutil::random_mat(5, 2, rng);
        Mat y = testutil::random_mat(5, 2, rng);
        double want = 0.0;
        for (int i = 0; i < 5; ++i)
            want += log_likelihood(y.row(i).transpose(), f.row(i).transpose(), lik);
        auto got = log_likelihood_graph(Tensor::constant(f), y, {}, lik);
        CHECK(got->item() == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("predictive summaries") {
    SUBCASE("uniform classifier has max entropy") {
        std::vector<Mat> logits{Mat::Zero(3, 4)};
        auto p = classification_predictive(logits);
        for (int i = 0; i < 3; ++i) {
            CHECK(p.probs.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(p.entropy(i) == doctest::Approx(std::log(4.0)));
        }
    }
    SUBCASE("one-hot has zero entropy") {
        Mat l(1, 3);
        l << 1e3, 0, 0;
        auto p = classification_predictive({l});
        CHECK(p.entropy(0) == doctest::Approx(0.0));
    }
    SUBCASE("two-sample average of opposite one-hots") {
        Mat a(1, 2), b(1, 2);
        a << 1e3, 0;
        b << 0, 1e3;
        auto p = classification_predictive({a, b});
        CHECK(p.probs(0, 0) == doctest::Approx(0.5));
        CHECK(p.probs(0, 1) == doctest::Approx(0.5));
        CHECK(p.entropy(0) == doctest::Approx(std::log(2.0)));
    }
    SUBCASE("regression moment matching") {
        Mat f1(1, 1), f2(1, 1);
        f1 << 1.0;
        f2 << 3.0;
        auto p = regression_predictive({f1, f2}, 0.5);
        CHECK(p.mean(0) == doctest::Approx(2.0));
        CHECK(p.variance(0) == doctest::Approx(1.0 + 0.5));
        CHECK(p.entropy(0) ==
              doctest::Approx(0.5 * std::log(2 * M_PI * std::exp(1.0) * 1.5)));
        CHECK_THROWS(regression_predictive({}, 0.1));
    }
}

TEST_CASE("monte carlo predictive converges with sample count") {
    // doubling samples moves the mean by less than 3 MC standard errors
    Architecture a{{1, 8, 1}, Activation::Tanh, BiasMode::BiasUnit};
    RngStream rng(77);
    Mat x(1, 1);
    x << 0.4;
    auto xs = Tensor::constant(x);
    auto draw = [&](int n) {
        std::vector<Mat> outs;
        double mean = 0.0, sq = 0.0;
        for (int s = 0; s < n; ++s) {
            Vec w(a.weight_count());
            for (int i = 0; i < w.size(); ++i) w(i) = rng.normal();
            Mat f = forward_graph(xs, Tensor::constant(w), a)->value;
            outs.push_back(f);
            mean += f(0, 0);
            sq += f(0, 0) * f(0, 0);
        }
        mean /= n;
        const double se = std::sqrt((sq / n - mean * mean) / n);
        return std::pair<double, double>(mean, se);
    };
    auto [m500, se500] = draw(500);
    auto [m1000, se1000] = draw(1000);
    CHECK(std::abs(m1000 - m500) < 3.0 * std::sqrt(se500 * se500 + se1000 * se1000));
}
