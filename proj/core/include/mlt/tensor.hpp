#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mlt/rng.hpp"

namespace mlt {

// Dense row-major tensor of 64-bit reals with an optional gradient buffer.
// Tensor is a cheap handle (shared ownership); clone() makes a deep copy.
// Rank 0 (empty shape) is a scalar of size 1.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor scalar(double value);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor uniform(std::vector<int> shape, Rng& rng, double lo, double hi,
                          bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const;
    int rank() const { return static_cast<int>(shape().size()); }
    int dim(int i) const { return shape()[static_cast<size_t>(i)]; }
    int64_t size() const;
    bool same_shape(const Tensor& other) const { return shape() == other.shape(); }

    std::span<double> data();
    std::span<const double> data() const;
    double item() const;  // requires size() == 1

    bool requires_grad() const;
    void set_requires_grad(bool v);

    bool has_grad() const;
    std::span<double> grad();
    std::span<const double> grad() const;
    std::span<double> ensure_grad();  // allocates a zero buffer if absent
    void zero_grad();                 // zeroes (keeps) an existing buffer
    void drop_grad();                 // releases the buffer

    // Deep copy of the data; the copy never aliases this tensor's buffers.
    Tensor clone(bool requires_grad = false) const;

    // True when both handles refer to the same underlying buffer.
    bool is_same(const Tensor& other) const { return impl_ == other.impl_; }

    // Throws if any element is NaN or infinite. `what` names the producer.
    void check_finite(const char* what) const;

    static int64_t shape_size(const std::vector<int>& shape);

private:
    struct Impl {
        std::vector<int> shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
    };
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<Impl> impl_;
};

// Reverse-mode tape. Ops record one node per primitive application; nodes are
// appended in execution order, so inputs always precede their consumers.
// backward() seeds d(loss)/d(loss) = 1, invokes the recorded closures in
// reverse, then clears the tape. A non-recording tape turns every op into a
// plain forward evaluation.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    void set_recording(bool v) { recording_ = v; }

    void record(Tensor output, std::function<void()> backward_fn);

    // Accumulates gradients of `scalar_loss` into every requires_grad tensor
    // reachable through the recorded nodes, then clears the tape.
    void backward(const Tensor& scalar_loss);

    size_t node_count() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    struct Node {
        Tensor out;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;
    bool recording_ = true;
};

}  // namespace mlt
