#include "mlt/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "mlt/error.hpp"

namespace mlt {

int64_t Tensor::shape_size(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor dimension must be positive");
        n *= d;
    }
    return n;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto impl = std::make_shared<Impl>();
    int64_t n = shape_size(shape);
    impl->shape = std::move(shape);
    impl->data.assign(static_cast<size_t>(n), 0.0);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.data()) v = value;
    return t;
}

Tensor Tensor::scalar(double value) { return full({}, value); }

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    int64_t n = shape_size(shape);
    if (n != static_cast<int64_t>(data.size()))
        throw std::invalid_argument("from_data: data length does not match shape");
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    Tensor t(std::move(impl));
    t.check_finite("from_data");
    return t;
}

Tensor Tensor::uniform(std::vector<int> shape, Rng& rng, double lo, double hi,
                       bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

const std::vector<int>& Tensor::shape() const {
    detail::require(defined(), "use of undefined tensor");
    return impl_->shape;
}

int64_t Tensor::size() const { return static_cast<int64_t>(impl_->data.size()); }

std::span<double> Tensor::data() { return {impl_->data.data(), impl_->data.size()}; }
std::span<const double> Tensor::data() const { return {impl_->data.data(), impl_->data.size()}; }

double Tensor::item() const {
    detail::require(defined() && size() == 1, "item() requires a single-element tensor");
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }
void Tensor::set_requires_grad(bool v) { impl_->requires_grad = v; }

bool Tensor::has_grad() const { return defined() && !impl_->grad.empty(); }

std::span<double> Tensor::grad() {
    detail::require(has_grad(), "tensor has no gradient buffer");
    return {impl_->grad.data(), impl_->grad.size()};
}

std::span<const double> Tensor::grad() const {
    detail::require(has_grad(), "tensor has no gradient buffer");
    return {impl_->grad.data(), impl_->grad.size()};
}

std::span<double> Tensor::ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return {impl_->grad.data(), impl_->grad.size()};
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::drop_grad() { impl_->grad.clear(); }

Tensor Tensor::clone(bool requires_grad) const {
    auto impl = std::make_shared<Impl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

void Tensor::check_finite(const char* what) const {
    for (double v : impl_->data) {
        if (!std::isfinite(v)) {
            std::ostringstream os;
            os << "non-finite value produced by " << what;
            throw std::runtime_error(os.str());
        }
    }
}

void Tape::record(Tensor output, std::function<void()> backward_fn) {
    nodes_.push_back(Node{std::move(output), std::move(backward_fn)});
}

void Tape::backward(const Tensor& scalar_loss) {
    detail::require(scalar_loss.defined() && scalar_loss.size() == 1,
                    "backward: loss must be a scalar");
    detail::require(!nodes_.empty(), "backward: tape is empty (no forward recorded)");
    Tensor loss = scalar_loss;
    loss.ensure_grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->out.has_grad()) it->back();
    }
    nodes_.clear();
}

}  // namespace mlt
