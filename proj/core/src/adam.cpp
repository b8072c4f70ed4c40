#include "mlt/adam.hpp"

#include <cmath>
#include <stdexcept>

#include "mlt/error.hpp"

namespace mlt {

AdamState::AdamState(std::vector<Tensor> params, double lr, double beta1, double beta2,
                     double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(static_cast<size_t>(p.size()), 0.0);
        v_.emplace_back(static_cast<size_t>(p.size()), 0.0);
    }
}

void AdamState::step() {
    ++t_;
    for (size_t i = 0; i < params_.size(); ++i) apply(params_[i], i, true);
}

void AdamState::step(const std::vector<Tensor>& grads) {
    detail::require(grads.size() == params_.size(), "adam: gradient list length mismatch");
    ++t_;
    for (size_t i = 0; i < params_.size(); ++i) {
        detail::require(grads[i].same_shape(params_[i]), "adam: gradient shape mismatch");
        apply(grads[i], i, false);
    }
}

void AdamState::apply(const Tensor& grad_src, size_t i, bool use_attached) {
    Tensor p = params_[i];
    auto pd = p.data();
    auto& m = m_[i];
    auto& v = v_[i];
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const double* g = nullptr;  // null means an all-zero gradient
    if (use_attached) {
        if (params_[i].has_grad()) g = params_[i].grad().data();
    } else {
        g = grad_src.data().data();
    }
    for (size_t j = 0; j < pd.size(); ++j) {
        const double gj = g ? g[j] : 0.0;
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        pd[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
}

void AdamState::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace mlt
