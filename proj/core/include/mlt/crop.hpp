#pragma once

#include "mlt/tensor.hpp"

namespace mlt {

// Axis-aligned box, top-left corner + size, frame pixel units.
struct Box {
    double x = 0, y = 0, w = 0, h = 0;

    double cx() const { return x + w / 2.0; }
    double cy() const { return y + h / 2.0; }
    static Box from_center(double cx, double cy, double w, double h) {
        return {cx - w / 2.0, cy - h / 2.0, w, h};
    }
};

double iou(const Box& a, const Box& b);

// Side of the square context region around a w x h target:
// sqrt((w+2p)(h+2p)) with p = (w+h)/4.
double context_side(double w, double h);

// Square crop of `frame` [H,W,C] centered at (cx, cy) with side `side`
// (frame pixels), bilinearly resampled to out_size x out_size. Samples that
// fall outside the frame read the per-channel frame mean.
Tensor crop_resize(const Tensor& frame, double cx, double cy, double side, int out_size);

// Per-channel mean of an [H,W,C] image.
std::vector<double> channel_means(const Tensor& frame);

// Separable Gaussian blur with reflective borders; sigma <= 0 is identity.
Tensor gaussian_blur(const Tensor& image, double sigma);

// Horizontal mirror of an [H,W,C] image.
Tensor flip_horizontal(const Tensor& image);

// Rounds every value to the nearest 1/255 step and clamps to [0,1]; frames
// quantized this way survive 8-bit export/ingest bit-exactly.
void quantize_to_8bit(Tensor& image);

}  // namespace mlt
