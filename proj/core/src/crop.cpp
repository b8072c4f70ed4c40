#include "mlt/crop.hpp"

#include <algorithm>
#include <cmath>

#include "mlt/error.hpp"

namespace mlt {

double iou(const Box& a, const Box& b) {
    double x1 = std::max(a.x, b.x);
    double y1 = std::max(a.y, b.y);
    double x2 = std::min(a.x + a.w, b.x + b.w);
    double y2 = std::min(a.y + a.h, b.y + b.h);
    double iw = std::max(0.0, x2 - x1);
    double ih = std::max(0.0, y2 - y1);
    double inter = iw * ih;
    double uni = a.w * a.h + b.w * b.h - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

double context_side(double w, double h) {
    double p = (w + h) / 4.0;
    return std::sqrt((w + 2.0 * p) * (h + 2.0 * p));
}

std::vector<double> channel_means(const Tensor& frame) {
    const int c = frame.dim(2);
    std::vector<double> mean(static_cast<size_t>(c), 0.0);
    auto d = frame.data();
    const int64_t n = frame.size() / c;
    for (int64_t p = 0; p < n; ++p)
        for (int ch = 0; ch < c; ++ch) mean[static_cast<size_t>(ch)] += d[p * c + ch];
    for (auto& m : mean) m /= static_cast<double>(n);
    return mean;
}

Tensor crop_resize(const Tensor& frame, double cx, double cy, double side, int out_size) {
    detail::require(frame.rank() == 3, "crop_resize: frame must be [H,W,C]");
    detail::require(side > 0.0 && out_size > 0, "crop_resize: bad geometry");
    const int h = frame.dim(0), w = frame.dim(1), c = frame.dim(2);
    std::vector<double> mean = channel_means(frame);
    Tensor out = Tensor::zeros({out_size, out_size, c});
    const double* in = frame.data().data();
    double* o = out.data().data();
    const double step = side / out_size;
    const double x0 = cx - side / 2.0;
    const double y0 = cy - side / 2.0;

    auto sample = [&](int yy, int xx, int ch) -> double {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return mean[static_cast<size_t>(ch)];
        return in[(static_cast<int64_t>(yy) * w + xx) * c + ch];
    };

    for (int oy = 0; oy < out_size; ++oy) {
        const double sy = y0 + (oy + 0.5) * step - 0.5;
        const int iy = static_cast<int>(std::floor(sy));
        const double fy = sy - iy;
        for (int ox = 0; ox < out_size; ++ox) {
            const double sx = x0 + (ox + 0.5) * step - 0.5;
            const int ix = static_cast<int>(std::floor(sx));
            const double fx = sx - ix;
            for (int ch = 0; ch < c; ++ch) {
                double v00 = sample(iy, ix, ch);
                double v01 = sample(iy, ix + 1, ch);
                double v10 = sample(iy + 1, ix, ch);
                double v11 = sample(iy + 1, ix + 1, ch);
                double top = v00 + (v01 - v00) * fx;
                double bot = v10 + (v11 - v10) * fx;
                o[(static_cast<int64_t>(oy) * out_size + ox) * c + ch] = top + (bot - top) * fy;
            }
        }
    }
    return out;
}

Tensor gaussian_blur(const Tensor& image, double sigma) {
    if (sigma <= 0.0) return image.clone();
    detail::require(image.rank() == 3, "gaussian_blur: image must be [H,W,C]");
    const int h = image.dim(0), w = image.dim(1), c = image.dim(2);
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        kernel[static_cast<size_t>(i + radius)] = v;
        sum += v;
    }
    for (auto& v : kernel) v /= sum;

    auto reflect = [](int i, int n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
        return std::clamp(i, 0, n - 1);
    };

    Tensor tmp = Tensor::zeros(image.shape());
    Tensor out = Tensor::zeros(image.shape());
    const double* in = image.data().data();
    double* t = tmp.data().data();
    double* o = out.data().data();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k)
                    acc += kernel[static_cast<size_t>(k + radius)] *
                           in[(static_cast<int64_t>(y) * w + reflect(x + k, w)) * c + ch];
                t[(static_cast<int64_t>(y) * w + x) * c + ch] = acc;
            }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k)
                    acc += kernel[static_cast<size_t>(k + radius)] *
                           t[(static_cast<int64_t>(reflect(y + k, h)) * w + x) * c + ch];
                o[(static_cast<int64_t>(y) * w + x) * c + ch] = acc;
            }
    return out;
}

Tensor flip_horizontal(const Tensor& image) {
    detail::require(image.rank() == 3, "flip_horizontal: image must be [H,W,C]");
    const int h = image.dim(0), w = image.dim(1), c = image.dim(2);
    Tensor out = Tensor::zeros(image.shape());
    const double* in = image.data().data();
    double* o = out.data().data();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch)
                o[(static_cast<int64_t>(y) * w + x) * c + ch] =
                    in[(static_cast<int64_t>(y) * w + (w - 1 - x)) * c + ch];
    return out;
}

void quantize_to_8bit(Tensor& image) {
    for (auto& v : image.data()) {
        double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
        v = q / 255.0;
    }
}

}  // namespace mlt
