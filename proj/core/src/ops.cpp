#include "mlt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

#include "mlt/error.hpp"

namespace mlt {

BatchNorm BatchNorm::make(int channels, bool requires_grad) {
    BatchNorm bn;
    bn.gamma = Tensor::full({channels}, 1.0);
    bn.gamma.set_requires_grad(requires_grad);
    bn.beta = Tensor::zeros({channels}, requires_grad);
    bn.running_mean = Tensor::zeros({channels});
    bn.running_var = Tensor::full({channels}, 1.0);
    return bn;
}

namespace ops {
namespace {

[[noreturn]] void fail(const std::string& op, const std::string& why) {
    throw std::invalid_argument(op + ": " + why);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) fail(op, "shape mismatch");
}

bool wants_grad(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape.recording()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

// Marks the output differentiable and records the node when required.
void finish(Tape& tape, Tensor& out, bool rec, std::function<void()> back, const char* op) {
    out.check_finite(op);
    if (rec) {
        out.set_requires_grad(true);
        tape.record(out, std::move(back));
    }
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    Tensor out = Tensor::zeros(a.shape());
    auto oa = a.data(), ob = b.data();
    auto od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = oa[i] + ob[i];
    bool rec = wants_grad(tape, {&a, &b});
    finish(tape, out, rec, [a, b, out]() mutable {
        auto g = out.grad();
        if (a.requires_grad()) {
            auto ga = a.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto gb = b.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    }, "add");
    return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    Tensor out = Tensor::zeros(a.shape());
    auto oa = a.data(), ob = b.data();
    auto od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = oa[i] - ob[i];
    bool rec = wants_grad(tape, {&a, &b});
    finish(tape, out, rec, [a, b, out]() mutable {
        auto g = out.grad();
        if (a.requires_grad()) {
            auto ga = a.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto gb = b.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    }, "sub");
    return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    Tensor out = Tensor::zeros(a.shape());
    auto oa = a.data(), ob = b.data();
    auto od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = oa[i] * ob[i];
    bool rec = wants_grad(tape, {&a, &b});
    finish(tape, out, rec, [a, b, out]() mutable {
        auto g = out.grad();
        auto da = a.data(), db = b.data();
        if (a.requires_grad()) {
            auto ga = a.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * db[i];
        }
        if (b.requires_grad()) {
            auto gb = b.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * da[i];
        }
    }, "mul");
    return out;
}

Tensor scale(Tape& tape, const Tensor& x, double c) {
    Tensor out = Tensor::zeros(x.shape());
    auto xd = x.data();
    auto od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * c;
    bool rec = wants_grad(tape, {&x});
    finish(tape, out, rec, [x, out, c]() mutable {
        auto g = out.grad();
        auto gx = x.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
    }, "scale");
    return out;
}

Tensor neg(Tape& tape, const Tensor& x) { return scale(tape, x, -1.0); }

Tensor sum(Tape& tape, const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s);
    bool rec = wants_grad(tape, {&x});
    finish(tape, out, rec, [x, out]() mutable {
        double g = out.grad()[0];
        auto gx = x.ensure_grad();
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    }, "sum");
    return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    auto xd = x.data();
    auto od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = xd[i] > 0.0 ? xd[i] : 0.0;
    bool rec = wants_grad(tape, {&x});
    finish(tape, out, rec, [x, out]() mutable {
        auto g = out.grad();
        auto xd = x.data();
        auto gx = x.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i)
            if (xd[i] > 0.0) gx[i] += g[i];
    }, "relu");
    return out;
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    auto xd = x.data();
    auto od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = stable_sigmoid(xd[i]);
    bool rec = wants_grad(tape, {&x});
    finish(tape, out, rec, [x, out]() mutable {
        auto g = out.grad();
        auto od = out.data();
        auto gx = x.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * od[i] * (1.0 - od[i]);
    }, "sigmoid");
    return out;
}

Tensor softplus(Tape& tape, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    auto xd = x.data();
    auto od = out.data();
    for (size_t i = 0; i < od.size(); ++i)
        od[i] = std::max(xd[i], 0.0) + std::log1p(std::exp(-std::abs(xd[i])));
    bool rec = wants_grad(tape, {&x});
    finish(tape, out, rec, [x, out]() mutable {
        auto g = out.grad();
        auto xd = x.data();
        auto gx = x.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * stable_sigmoid(xd[i]);
    }, "softplus");
    return out;
}

Tensor reshape(Tape& tape, const Tensor& x, std::vector<int> shape) {
    if (Tensor::shape_size(shape) != x.size()) fail("reshape", "element count mismatch");
    Tensor out = Tensor::zeros(std::move(shape));
    auto xd = x.data();
    auto od = out.data();
    std::copy(xd.begin(), xd.end(), od.begin());
    bool rec = wants_grad(tape, {&x});
    finish(tape, out, rec, [x, out]() mutable {
        auto g = out.grad();
        auto gx = x.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }, "reshape");
    return out;
}

Tensor concat_last(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || a.rank() == 0) fail("concat_last", "rank mismatch");
    for (int i = 0; i + 1 < a.rank(); ++i)
        if (a.dim(i) != b.dim(i)) fail("concat_last", "leading dimensions differ");
    int ca = a.dim(a.rank() - 1), cb = b.dim(b.rank() - 1);
    std::vector<int> shape = a.shape();
    shape.back() = ca + cb;
    Tensor out = Tensor::zeros(shape);
    auto ad = a.data(), bd = b.data();
    auto od = out.data();
    int64_t rows = a.size() / ca;
    for (int64_t r = 0; r < rows; ++r) {
        std::copy_n(ad.begin() + r * ca, ca, od.begin() + r * (ca + cb));
        std::copy_n(bd.begin() + r * cb, cb, od.begin() + r * (ca + cb) + ca);
    }
    bool rec = wants_grad(tape, {&a, &b});
    finish(tape, out, rec, [a, b, out, ca, cb, rows]() mutable {
        auto g = out.grad();
        if (a.requires_grad()) {
            auto ga = a.ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int c = 0; c < ca; ++c) ga[r * ca + c] += g[r * (ca + cb) + c];
        }
        if (b.requires_grad()) {
            auto gb = b.ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int c = 0; c < cb; ++c) gb[r * cb + c] += g[r * (ca + cb) + ca + c];
        }
    }, "concat_last");
    return out;
}

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, int stride) {
    if (input.rank() != 3) fail("conv2d", "input must be [H,W,Cin]");
    if (kernel.rank() != 4) fail("conv2d", "kernel must be [k,k,Cin,Cout]");
    if (stride < 1) fail("conv2d", "stride must be positive");
    const int h = input.dim(0), w = input.dim(1), cin = input.dim(2);
    const int kh = kernel.dim(0), kw = kernel.dim(1);
    if (kh != kw) fail("conv2d", "kernel must be square");
    if (kernel.dim(2) != cin) fail("conv2d", "kernel Cin does not match input");
    const int cout = kernel.dim(3);
    const int oh = (h - kh) / stride + 1;
    const int ow = (w - kw) / stride + 1;
    if (h < kh || w < kw || oh < 1 || ow < 1) fail("conv2d", "non-positive output size");

    Tensor out = Tensor::zeros({oh, ow, cout});
    {
        const double* in = input.data().data();
        const double* ker = kernel.data().data();
        double* o = out.data().data();
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double* op = o + (static_cast<int64_t>(oy) * ow + ox) * cout;
                for (int ky = 0; ky < kh; ++ky) {
                    const double* inrow = in + ((static_cast<int64_t>(oy) * stride + ky) * w +
                                                static_cast<int64_t>(ox) * stride) * cin;
                    const double* krow = ker + static_cast<int64_t>(ky) * kw * cin * cout;
                    for (int kx = 0; kx < kw; ++kx) {
                        const double* ip = inrow + static_cast<int64_t>(kx) * cin;
                        const double* kp = krow + static_cast<int64_t>(kx) * cin * cout;
                        for (int ic = 0; ic < cin; ++ic) {
                            const double v = ip[ic];
                            const double* kpc = kp + static_cast<int64_t>(ic) * cout;
                            for (int oc = 0; oc < cout; ++oc) op[oc] += v * kpc[oc];
                        }
                    }
                }
            }
        }
    }

    bool rec = wants_grad(tape, {&input, &kernel});
    finish(tape, out, rec, [input, kernel, out, stride]() mutable {
        const int h = input.dim(0), w = input.dim(1), cin = input.dim(2);
        const int kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
        const int oh = out.dim(0), ow = out.dim(1);
        auto g = out.grad();
        const double* ker = kernel.data().data();
        const double* in = input.data().data();
        const bool gi = input.requires_grad();
        const bool gk = kernel.requires_grad();
        double* ginp = gi ? input.ensure_grad().data() : nullptr;
        double* gker = gk ? kernel.ensure_grad().data() : nullptr;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const double* gp = g.data() + (static_cast<int64_t>(oy) * ow + ox) * cout;
                for (int ky = 0; ky < kh; ++ky) {
                    const int64_t inoff = ((static_cast<int64_t>(oy) * stride + ky) * w +
                                           static_cast<int64_t>(ox) * stride) * cin;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int64_t koff =
                            (static_cast<int64_t>(ky) * kw + kx) * cin * cout;
                        const int64_t ioff = inoff + static_cast<int64_t>(kx) * cin;
                        for (int ic = 0; ic < cin; ++ic) {
                            const double* kpc = ker + koff + static_cast<int64_t>(ic) * cout;
                            if (gi) {
                                double acc = 0.0;
                                for (int oc = 0; oc < cout; ++oc) acc += gp[oc] * kpc[oc];
                                ginp[ioff + ic] += acc;
                            }
                            if (gk) {
                                const double v = in[ioff + ic];
                                double* gkc = gker + koff + static_cast<int64_t>(ic) * cout;
                                for (int oc = 0; oc < cout; ++oc) gkc[oc] += v * gp[oc];
                            }
                        }
                    }
                }
            }
        }
        (void)h;
    }, "conv2d");
    return out;
}

Tensor maxpool2d(Tape& tape, const Tensor& x, int k, int stride) {
    if (x.rank() != 3) fail("maxpool2d", "input must be [H,W,C]");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (k > h || k > w) fail("maxpool2d", "pooling window larger than input");
    const int oh = (h - k) / stride + 1;
    const int ow = (w - k) / stride + 1;
    Tensor out = Tensor::zeros({oh, ow, c});
    auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.size()));
    {
        const double* in = x.data().data();
        double* o = out.data().data();
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox)
                for (int ch = 0; ch < c; ++ch) {
                    double best = -std::numeric_limits<double>::infinity();
                    int64_t besti = -1;
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            int64_t off = ((static_cast<int64_t>(oy) * stride + ky) * w +
                                           (static_cast<int64_t>(ox) * stride + kx)) * c + ch;
                            if (in[off] > best) {
                                best = in[off];
                                besti = off;
                            }
                        }
                    int64_t oo = (static_cast<int64_t>(oy) * ow + ox) * c + ch;
                    o[oo] = best;
                    (*idx)[static_cast<size_t>(oo)] = besti;
                }
    }
    bool rec = wants_grad(tape, {&x});
    finish(tape, out, rec, [x, out, idx]() mutable {
        auto g = out.grad();
        auto gx = x.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gx[static_cast<size_t>((*idx)[i])] += g[i];
    }, "maxpool2d");
    return out;
}

Tensor batchnorm(Tape& tape, const Tensor& x, BatchNorm& bn, bool train) {
    if (x.rank() != 3) fail("batchnorm", "input must be [H,W,C]");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (bn.gamma.dim(0) != c) fail("batchnorm", "channel count mismatch");
    const int64_t n = static_cast<int64_t>(h) * w;

    Tensor out = Tensor::zeros(x.shape());
    const double* in = x.data().data();
    double* o = out.data().data();

    if (train) {
        // Per-channel mean/variance over the spatial grid.
        std::vector<double> mean(c, 0.0), var(c, 0.0);
        for (int64_t p = 0; p < n; ++p)
            for (int ch = 0; ch < c; ++ch) mean[static_cast<size_t>(ch)] += in[p * c + ch];
        for (int ch = 0; ch < c; ++ch) mean[static_cast<size_t>(ch)] /= static_cast<double>(n);
        for (int64_t p = 0; p < n; ++p)
            for (int ch = 0; ch < c; ++ch) {
                double d = in[p * c + ch] - mean[static_cast<size_t>(ch)];
                var[static_cast<size_t>(ch)] += d * d;
            }
        for (int ch = 0; ch < c; ++ch) var[static_cast<size_t>(ch)] /= static_cast<double>(n);

        auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(x.size()));
        auto istd = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
        auto gam = bn.gamma.data();
        auto bet = bn.beta.data();
        for (int ch = 0; ch < c; ++ch)
            (*istd)[static_cast<size_t>(ch)] = 1.0 / std::sqrt(var[static_cast<size_t>(ch)] + bn.eps);
        for (int64_t p = 0; p < n; ++p)
            for (int ch = 0; ch < c; ++ch) {
                double xh = (in[p * c + ch] - mean[static_cast<size_t>(ch)]) *
                            (*istd)[static_cast<size_t>(ch)];
                (*xhat)[static_cast<size_t>(p * c + ch)] = xh;
                o[p * c + ch] = gam[static_cast<size_t>(ch)] * xh + bet[static_cast<size_t>(ch)];
            }

        // Running statistics (unbiased variance when n > 1).
        auto rm = bn.running_mean.data();
        auto rv = bn.running_var.data();
        double bias_fix = n > 1 ? static_cast<double>(n) / static_cast<double>(n - 1) : 1.0;
        for (int ch = 0; ch < c; ++ch) {
            rm[static_cast<size_t>(ch)] = bn.momentum * rm[static_cast<size_t>(ch)] +
                                          (1.0 - bn.momentum) * mean[static_cast<size_t>(ch)];
            rv[static_cast<size_t>(ch)] = bn.momentum * rv[static_cast<size_t>(ch)] +
                                          (1.0 - bn.momentum) * var[static_cast<size_t>(ch)] * bias_fix;
        }
        bn.stats_ready = true;

        Tensor gamma = bn.gamma, beta = bn.beta;
        bool rec = wants_grad(tape, {&x, &gamma, &beta});
        finish(tape, out, rec, [x, out, gamma, beta, xhat, istd, n, c]() mutable {
            auto g = out.grad();
            auto gam = gamma.data();
            // Channel sums needed by the train-mode backward.
            std::vector<double> sg(static_cast<size_t>(c), 0.0), sgx(static_cast<size_t>(c), 0.0);
            for (int64_t p = 0; p < n; ++p)
                for (int ch = 0; ch < c; ++ch) {
                    sg[static_cast<size_t>(ch)] += g[static_cast<size_t>(p * c + ch)];
                    sgx[static_cast<size_t>(ch)] += g[static_cast<size_t>(p * c + ch)] *
                                                    (*xhat)[static_cast<size_t>(p * c + ch)];
                }
            if (gamma.requires_grad()) {
                auto gg = gamma.ensure_grad();
                for (int ch = 0; ch < c; ++ch) gg[static_cast<size_t>(ch)] += sgx[static_cast<size_t>(ch)];
            }
            if (beta.requires_grad()) {
                auto gb = beta.ensure_grad();
                for (int ch = 0; ch < c; ++ch) gb[static_cast<size_t>(ch)] += sg[static_cast<size_t>(ch)];
            }
            if (x.requires_grad()) {
                auto gx = x.ensure_grad();
                double inv_n = 1.0 / static_cast<double>(n);
                for (int64_t p = 0; p < n; ++p)
                    for (int ch = 0; ch < c; ++ch) {
                        size_t i = static_cast<size_t>(p * c + ch);
                        size_t cc = static_cast<size_t>(ch);
                        gx[i] += gam[cc] * (*istd)[cc] *
                                 (g[i] - inv_n * sg[cc] - (*xhat)[i] * inv_n * sgx[cc]);
                    }
            }
        }, "batchnorm");
        return out;
    }

    // Eval mode: affine map from frozen running statistics.
    detail::require(bn.stats_ready, "batchnorm: eval mode requires populated running statistics");
    auto rm = bn.running_mean.data();
    auto rv = bn.running_var.data();
    auto gam = bn.gamma.data();
    auto bet = bn.beta.data();
    auto istd = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
    for (int ch = 0; ch < c; ++ch)
        (*istd)[static_cast<size_t>(ch)] = 1.0 / std::sqrt(rv[static_cast<size_t>(ch)] + bn.eps);
    for (int64_t p = 0; p < n; ++p)
        for (int ch = 0; ch < c; ++ch) {
            size_t cc = static_cast<size_t>(ch);
            o[p * c + ch] = gam[cc] * (in[p * c + ch] - rm[cc]) * (*istd)[cc] + bet[cc];
        }
    Tensor gamma = bn.gamma, beta = bn.beta, rmean = bn.running_mean;
    bool rec = wants_grad(tape, {&x, &gamma, &beta});
    finish(tape, out, rec, [x, gamma, beta, rmean, out, istd, n, c]() mutable {
        auto g = out.grad();
        auto gam = gamma.data();
        if (x.requires_grad()) {
            auto gx = x.ensure_grad();
            for (int64_t p = 0; p < n; ++p)
                for (int ch = 0; ch < c; ++ch) {
                    size_t cc = static_cast<size_t>(ch);
                    gx[static_cast<size_t>(p * c + ch)] +=
                        g[static_cast<size_t>(p * c + ch)] * gam[cc] * (*istd)[cc];
                }
        }
        if (gamma.requires_grad()) {
            auto gg = gamma.ensure_grad();
            auto xd = x.data();
            auto rm = rmean.data();
            for (int64_t p = 0; p < n; ++p)
                for (int ch = 0; ch < c; ++ch) {
                    size_t cc = static_cast<size_t>(ch);
                    gg[cc] += g[static_cast<size_t>(p * c + ch)] *
                              (xd[static_cast<size_t>(p * c + ch)] - rm[cc]) * (*istd)[cc];
                }
        }
        if (beta.requires_grad()) {
            auto gb = beta.ensure_grad();
            for (int64_t p = 0; p < n; ++p)
                for (int ch = 0; ch < c; ++ch)
                    gb[static_cast<size_t>(ch)] += g[static_cast<size_t>(p * c + ch)];
        }
    }, "batchnorm");
    return out;
}

Tensor dropout(Tape& tape, const Tensor& x, double keep_prob, Rng& rng, bool train) {
    if (!(keep_prob > 0.0 && keep_prob <= 1.0))
        fail("dropout", "keep_prob must be in (0, 1]");
    if (!train || keep_prob == 1.0) {
        // Identity, but still pass gradients through.
        return scale(tape, x, 1.0);
    }
    auto mask = std::make_shared<std::vector<double>>(static_cast<size_t>(x.size()));
    double inv = 1.0 / keep_prob;
    for (auto& m : *mask) m = rng.uniform() < keep_prob ? inv : 0.0;
    Tensor out = Tensor::zeros(x.shape());
    auto xd = x.data();
    auto od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * (*mask)[i];
    bool rec = wants_grad(tape, {&x});
    finish(tape, out, rec, [x, out, mask]() mutable {
        auto g = out.grad();
        auto gx = x.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
    }, "dropout");
    return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.rank() != 2) fail("linear", "weight must be [in,out]");
    const int in = w.dim(0), out_n = w.dim(1);
    if (b.rank() != 1 || b.dim(0) != out_n) fail("linear", "bias must be [out]");
    int batch = 1;
    if (x.rank() == 1) {
        if (x.dim(0) != in) fail("linear", "input length does not match weight");
    } else if (x.rank() == 2) {
        if (x.dim(1) != in) fail("linear", "input width does not match weight");
        batch = x.dim(0);
    } else {
        fail("linear", "input must be rank 1 or 2");
    }
    Tensor out = batch == 1 && x.rank() == 1 ? Tensor::zeros({out_n})
                                             : Tensor::zeros({batch, out_n});
    {
        const double* xd = x.data().data();
        const double* wd = w.data().data();
        const double* bd = b.data().data();
        double* od = out.data().data();
        for (int r = 0; r < batch; ++r) {
            double* orow = od + static_cast<int64_t>(r) * out_n;
            for (int o = 0; o < out_n; ++o) orow[o] = bd[o];
            const double* xrow = xd + static_cast<int64_t>(r) * in;
            for (int i = 0; i < in; ++i) {
                const double v = xrow[i];
                const double* wrow = wd + static_cast<int64_t>(i) * out_n;
                for (int o = 0; o < out_n; ++o) orow[o] += v * wrow[o];
            }
        }
    }
    bool rec = wants_grad(tape, {&x, &w, &b});
    finish(tape, out, rec, [x, w, b, out, in, out_n, batch]() mutable {
        auto g = out.grad();
        const double* xd = x.data().data();
        const double* wd = w.data().data();
        for (int r = 0; r < batch; ++r) {
            const double* grow = g.data() + static_cast<int64_t>(r) * out_n;
            const double* xrow = xd + static_cast<int64_t>(r) * in;
            if (x.requires_grad()) {
                auto gx = x.ensure_grad();
                double* gxr = gx.data() + static_cast<int64_t>(r) * in;
                for (int i = 0; i < in; ++i) {
                    const double* wrow = wd + static_cast<int64_t>(i) * out_n;
                    double acc = 0.0;
                    for (int o = 0; o < out_n; ++o) acc += grow[o] * wrow[o];
                    gxr[i] += acc;
                }
            }
            if (w.requires_grad()) {
                auto gw = w.ensure_grad();
                for (int i = 0; i < in; ++i) {
                    double* gwr = gw.data() + static_cast<int64_t>(i) * out_n;
                    const double v = xrow[i];
                    for (int o = 0; o < out_n; ++o) gwr[o] += v * grow[o];
                }
            }
            if (b.requires_grad()) {
                auto gb = b.ensure_grad();
                for (int o = 0; o < out_n; ++o) gb[static_cast<size_t>(o)] += grow[o];
            }
        }
    }, "linear");
    return out;
}

Tensor l2_normalize_channels(Tape& tape, const Tensor& x) {
    if (x.rank() != 3) fail("l2_normalize_channels", "input must be [H,W,C]");
    constexpr double kEps = 1e-12;
    const int c = x.dim(2);
    const int64_t n = x.size() / c;
    Tensor out = Tensor::zeros(x.shape());
    auto inv_norm = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    {
        const double* in = x.data().data();
        double* o = out.data().data();
        for (int64_t p = 0; p < n; ++p) {
            double q = 0.0;
            for (int ch = 0; ch < c; ++ch) q += in[p * c + ch] * in[p * c + ch];
            double inv = 1.0 / std::sqrt(q + kEps);
            (*inv_norm)[static_cast<size_t>(p)] = inv;
            for (int ch = 0; ch < c; ++ch) o[p * c + ch] = in[p * c + ch] * inv;
        }
    }
    bool rec = wants_grad(tape, {&x});
    finish(tape, out, rec, [x, out, inv_norm, n, c]() mutable {
        auto g = out.grad();
        auto xd = x.data();
        auto gx = x.ensure_grad();
        for (int64_t p = 0; p < n; ++p) {
            double inv = (*inv_norm)[static_cast<size_t>(p)];
            double dot = 0.0;
            for (int ch = 0; ch < c; ++ch)
                dot += g[static_cast<size_t>(p * c + ch)] * xd[static_cast<size_t>(p * c + ch)];
            double inv3 = inv * inv * inv;
            for (int ch = 0; ch < c; ++ch) {
                size_t i = static_cast<size_t>(p * c + ch);
                gx[i] += g[i] * inv - xd[i] * dot * inv3;
            }
        }
    }, "l2_normalize_channels");
    return out;
}

Tensor cross_correlate(Tape& tape, const Tensor& exemplar, const Tensor& search) {
    if (exemplar.rank() != 3 || search.rank() != 3)
        fail("cross_correlate", "inputs must be [H,W,C]");
    const int eh = exemplar.dim(0), ew = exemplar.dim(1), c = exemplar.dim(2);
    const int sh = search.dim(0), sw = search.dim(1);
    if (search.dim(2) != c) fail("cross_correlate", "channel counts differ");
    if (eh > sh || ew > sw) fail("cross_correlate", "exemplar larger than search");
    const int oh = sh - eh + 1, ow = sw - ew + 1;
    Tensor out = Tensor::zeros({oh, ow});
    {
        const double* ex = exemplar.data().data();
        const double* sr = search.data().data();
        double* o = out.data().data();
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (int ky = 0; ky < eh; ++ky) {
                    const double* ep = ex + static_cast<int64_t>(ky) * ew * c;
                    const double* sp = sr + ((static_cast<int64_t>(oy) + ky) * sw + ox) * c;
                    const int64_t row = static_cast<int64_t>(ew) * c;
                    for (int64_t i = 0; i < row; ++i) acc += ep[i] * sp[i];
                }
                o[static_cast<int64_t>(oy) * ow + ox] = acc;
            }
    }
    bool rec = wants_grad(tape, {&exemplar, &search});
    finish(tape, out, rec, [exemplar, search, out]() mutable {
        const int eh = exemplar.dim(0), ew = exemplar.dim(1), c = exemplar.dim(2);
        const int sw = search.dim(1);
        const int oh = out.dim(0), ow = out.dim(1);
        auto g = out.grad();
        const double* ex = exemplar.data().data();
        const double* sr = search.data().data();
        const bool ge = exemplar.requires_grad();
        const bool gs = search.requires_grad();
        double* gex = ge ? exemplar.ensure_grad().data() : nullptr;
        double* gsr = gs ? search.ensure_grad().data() : nullptr;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                const double gv = g[static_cast<size_t>(static_cast<int64_t>(oy) * ow + ox)];
                if (gv == 0.0) continue;
                for (int ky = 0; ky < eh; ++ky) {
                    const int64_t eoff = static_cast<int64_t>(ky) * ew * c;
                    const int64_t soff = ((static_cast<int64_t>(oy) + ky) * sw + ox) * c;
                    const int64_t row = static_cast<int64_t>(ew) * c;
                    if (ge && gs) {
                        for (int64_t i = 0; i < row; ++i) {
                            gex[eoff + i] += gv * sr[soff + i];
                            gsr[soff + i] += gv * ex[eoff + i];
                        }
                    } else if (ge) {
                        for (int64_t i = 0; i < row; ++i) gex[eoff + i] += gv * sr[soff + i];
                    } else {
                        for (int64_t i = 0; i < row; ++i) gsr[soff + i] += gv * ex[eoff + i];
                    }
                }
            }
    }, "cross_correlate");
    return out;
}

Tensor mul_channels(Tape& tape, const Tensor& x, const Tensor& s) {
    if (x.rank() != 3 || s.rank() != 1) fail("mul_channels", "expects [H,W,C] and [C]");
    const int c = x.dim(2);
    if (s.dim(0) != c) fail("mul_channels", "attention length does not match channel count");
    const int64_t n = x.size() / c;
    Tensor out = Tensor::zeros(x.shape());
    {
        const double* in = x.data().data();
        const double* sd = s.data().data();
        double* o = out.data().data();
        for (int64_t p = 0; p < n; ++p)
            for (int ch = 0; ch < c; ++ch) o[p * c + ch] = in[p * c + ch] * sd[ch];
    }
    bool rec = wants_grad(tape, {&x, &s});
    finish(tape, out, rec, [x, s, out, n, c]() mutable {
        auto g = out.grad();
        if (x.requires_grad()) {
            auto gx = x.ensure_grad();
            auto sd = s.data();
            for (int64_t p = 0; p < n; ++p)
                for (int ch = 0; ch < c; ++ch)
                    gx[static_cast<size_t>(p * c + ch)] +=
                        g[static_cast<size_t>(p * c + ch)] * sd[static_cast<size_t>(ch)];
        }
        if (s.requires_grad()) {
            auto gs = s.ensure_grad();
            auto xd = x.data();
            for (int64_t p = 0; p < n; ++p)
                for (int ch = 0; ch < c; ++ch)
                    gs[static_cast<size_t>(ch)] += g[static_cast<size_t>(p * c + ch)] *
                                                   xd[static_cast<size_t>(p * c + ch)];
        }
    }, "mul_channels");
    return out;
}

Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& b) {
    if (x.rank() != 3 || b.rank() != 1) fail("add_channel_bias", "expects [H,W,C] and [C]");
    const int c = x.dim(2);
    if (b.dim(0) != c) fail("add_channel_bias", "bias length does not match channel count");
    const int64_t n = x.size() / c;
    Tensor out = Tensor::zeros(x.shape());
    {
        const double* in = x.data().data();
        const double* bd = b.data().data();
        double* o = out.data().data();
        for (int64_t p = 0; p < n; ++p)
            for (int ch = 0; ch < c; ++ch) o[p * c + ch] = in[p * c + ch] + bd[ch];
    }
    bool rec = wants_grad(tape, {&x, &b});
    finish(tape, out, rec, [x, b, out, n, c]() mutable {
        auto g = out.grad();
        if (x.requires_grad()) {
            auto gx = x.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (b.requires_grad()) {
            auto gb = b.ensure_grad();
            for (int64_t p = 0; p < n; ++p)
                for (int ch = 0; ch < c; ++ch)
                    gb[static_cast<size_t>(ch)] += g[static_cast<size_t>(p * c + ch)];
        }
    }, "add_channel_bias");
    return out;
}

double softmax_entropy(const Tensor& scores) {
    auto d = scores.data();
    detail::require(!d.empty(), "softmax_entropy: empty tensor");
    double mx = d[0];
    for (double v : d) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : d) z += std::exp(v - mx);
    double h = 0.0;
    for (double v : d) {
        double p = std::exp(v - mx) / z;
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

Tensor sigmoid_values(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    auto xd = x.data();
    auto od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = stable_sigmoid(xd[i]);
    return out;
}

}  // namespace ops
}  // namespace mlt
