#pragma once

#include <optional>

#include "mlt/tensor.hpp"

namespace mlt {

// Batch-normalization parameters for one channel axis. gamma/beta are
// trainable; running statistics are plain buffers updated in train mode
// (momentum decay on the old value) and consumed in eval mode.
struct BatchNorm {
    Tensor gamma;         // [C]
    Tensor beta;          // [C]
    Tensor running_mean;  // [C]
    Tensor running_var;   // [C]
    bool stats_ready = false;
    double momentum = 0.9;
    double eps = 1e-5;

    static BatchNorm make(int channels, bool requires_grad);
};

namespace ops {

// Elementwise / reductions ---------------------------------------------------
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double c);
Tensor neg(Tape& tape, const Tensor& x);
Tensor sum(Tape& tape, const Tensor& x);  // -> scalar
Tensor relu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor softplus(Tape& tape, const Tensor& x);  // log(1 + exp(x)), stable

// Shape ----------------------------------------------------------------------
Tensor reshape(Tape& tape, const Tensor& x, std::vector<int> shape);
// Concatenation along the last axis; all leading dims must agree.
Tensor concat_last(Tape& tape, const Tensor& a, const Tensor& b);

// Neural-net primitives -------------------------------------------------------
// input [H,W,Cin], kernel [k,k,Cin,Cout], valid padding -> [H',W',Cout].
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, int stride);
Tensor maxpool2d(Tape& tape, const Tensor& x, int k, int stride);
Tensor batchnorm(Tape& tape, const Tensor& x, BatchNorm& bn, bool train);
// Inverted dropout: train scales kept activations by 1/keep_prob, eval is
// the identity. The sampled mask is captured for the backward pass.
Tensor dropout(Tape& tape, const Tensor& x, double keep_prob, Rng& rng, bool train);
// x [in] (or [B,in]), w [in,out], b [out].
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b);
// Per spatial location, scales the channel vector to unit L2 norm
// (eps-guarded so all-zero vectors pass through unchanged).
Tensor l2_normalize_channels(Tape& tape, const Tensor& x);
// exemplar [h,w,C] slid over search [H,W,C] -> [H-h+1, W-w+1] inner products.
Tensor cross_correlate(Tape& tape, const Tensor& exemplar, const Tensor& search);
// x [H,W,C] * s[C] broadcast over positions.
Tensor mul_channels(Tape& tape, const Tensor& x, const Tensor& s);
// x [H,W,C] + b[C] broadcast over positions.
Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& b);

// Non-differentiating helpers -------------------------------------------------
// Shannon entropy of softmax(scores) over all positions, in nats.
double softmax_entropy(const Tensor& scores);
// Plain elementwise sigmoid into a fresh non-grad tensor.
Tensor sigmoid_values(const Tensor& x);

}  // namespace ops
}  // namespace mlt
