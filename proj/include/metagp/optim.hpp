#pragma once

#include <cmath>
#include <vector>

#include "metagp/tensor.hpp"

namespace metagp {

// Adam with bias correction; the step size can be rescheduled mid-run.
class Adam {
public:
    explicit Adam(std::vector<TensorPtr> params, double lr = 1e-2, double beta1 = 0.9,
                  double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params_) {
            m_.push_back(Mat::Zero(p->rows(), p->cols()));
            v_.push_back(Mat::Zero(p->rows(), p->cols()));
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    void zero_grad() {
        for (auto& p : params_) {
            p->ensure_grad();
            p->zero_grad();
        }
    }

    // ascent when maximize, descent otherwise
    void step(bool maximize = false) {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, t_);
        const double c2 = 1.0 - std::pow(beta2_, t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            p->ensure_grad();
            Mat g = maximize ? Mat(-p->grad) : p->grad;
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
            Mat mhat = m_[i] / c1;
            Mat vhat = v_[i] / c2;
            p->value -= lr_ * mhat.cwiseQuotient(Mat(vhat.cwiseSqrt().array() + eps_));
        }
    }

    const std::vector<TensorPtr>& params() const { return params_; }

private:
    std::vector<TensorPtr> params_;
    double lr_, beta1_, beta2_, eps_;
    std::vector<Mat> m_, v_;
    long t_ = 0;
};

}  // namespace metagp
