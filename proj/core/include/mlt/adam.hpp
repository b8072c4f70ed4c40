#pragma once

#include <vector>

#include "mlt/tensor.hpp"

namespace mlt {

// Adam with bias correction. One state object owns the moment buffers for a
// fixed parameter list; step() reads each parameter's accumulated gradient.
class AdamState {
public:
    AdamState(std::vector<Tensor> params, double lr, double beta1 = 0.9,
              double beta2 = 0.999, double eps = 1e-8);

    // Applies one update from the parameters' current grad buffers (a missing
    // buffer counts as zero gradient). Does not clear the gradients.
    void step();

    // step() using explicit gradients instead of the attached buffers.
    void step(const std::vector<Tensor>& grads);

    void zero_grad();

    int64_t step_count() const { return t_; }
    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

private:
    void apply(const Tensor& grad_src, size_t i, bool use_attached);

    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

}  // namespace mlt
