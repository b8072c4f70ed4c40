#include "mlt/matcher.hpp"

#include <algorithm>
#include <cmath>

#include "mlt/error.hpp"
#include "mlt/serialize.hpp"

namespace mlt {

MatcherConfig MatcherConfig::paper_preset() {
    MatcherConfig c;
    c.preset = "paper";
    c.exemplar_size = 127;
    c.search_size = 255;
    c.layers = {
        {11, 3, 128, 2, true, true, true},
        {5, 128, 256, 1, true, true, true},
        {3, 256, 384, 1, true, true, false},
        {3, 384, 256, 1, true, true, false},
        {1, 256, 192, 1, false, false, false},
    };
    c.label_radius = 0;
    return c;
}

MatcherConfig MatcherConfig::desk_preset() {
    MatcherConfig c;
    c.preset = "desk";
    c.exemplar_size = 32;
    c.search_size = 64;
    c.layers = {
        {5, 3, 8, 1, true, true, true},
        {3, 8, 16, 1, true, true, true},
        {3, 16, 16, 1, true, true, false},
        {3, 16, 16, 1, true, true, false},
        {1, 16, 12, 1, false, false, false},
    };
    c.label_radius = 1;
    return c;
}

MatcherConfig MatcherConfig::preset_by_name(const std::string& name) {
    if (name == "paper") return paper_preset();
    if (name == "desk") return desk_preset();
    throw ConfigError("unknown matcher preset: " + name);
}

int MatcherConfig::feature_size(int input_size) const {
    int s = input_size;
    for (const auto& l : layers) {
        s = (s - l.kernel) / l.stride + 1;
        detail::require(s >= 1, "matcher geometry: non-positive layer output");
        if (l.pool_after) {
            s = (s - 3) / 2 + 1;
            detail::require(s >= 1, "matcher geometry: non-positive pool output");
        }
    }
    return s;
}

int MatcherConfig::total_stride() const {
    int s = 1;
    for (const auto& l : layers) {
        s *= l.stride;
        if (l.pool_after) s *= 2;
    }
    return s;
}

void MatcherConfig::validate() const {
    detail::require(!layers.empty(), "matcher config: no layers");
    detail::require(layers.back().kernel == 1, "matcher config: last layer must be 1x1");
    // Adapted channels concatenate onto the last layer's output, so it cannot
    // carry batch-norm statistics of its own.
    detail::require(!layers.back().batch_norm, "matcher config: last layer must not use bn");
    detail::require(exemplar_size > 0 && search_size > 0, "matcher config: bad input sizes");
    for (size_t i = 1; i < layers.size(); ++i)
        detail::require(layers[i].in_channels == layers[i - 1].out_channels,
                        "matcher config: channel chain broken");
    detail::require(response_size() >= 1, "matcher config: empty response map");
}

MatcherWeights MatcherWeights::init(const MatcherConfig& config, Rng& rng) {
    config.validate();
    MatcherWeights w;
    w.config = config;
    for (const auto& spec : config.layers) {
        ConvLayer layer;
        // He-style uniform bound from fan-in.
        double fan_in = static_cast<double>(spec.kernel) * spec.kernel * spec.in_channels;
        double bound = std::sqrt(2.0 / fan_in);
        layer.kernel = Tensor::uniform({spec.kernel, spec.kernel, spec.in_channels,
                                        spec.out_channels},
                                       rng, -bound, bound, true);
        if (spec.batch_norm) {
            layer.bn = BatchNorm::make(spec.out_channels, true);
            layer.bn.stats_ready = true;  // fresh init starts from identity stats
        } else {
            layer.bias = Tensor::zeros({spec.out_channels}, true);
        }
        w.layers.push_back(std::move(layer));
    }
    return w;
}

std::vector<Tensor> MatcherWeights::trainable() const {
    std::vector<Tensor> out;
    for (size_t i = 0; i < layers.size(); ++i) {
        out.push_back(layers[i].kernel);
        if (config.layers[i].batch_norm) {
            out.push_back(layers[i].bn.gamma);
            out.push_back(layers[i].bn.beta);
        } else {
            out.push_back(layers[i].bias);
        }
    }
    return out;
}

std::vector<Tensor> MatcherWeights::all_tensors() const {
    std::vector<Tensor> out = trainable();
    for (size_t i = 0; i < layers.size(); ++i) {
        if (config.layers[i].batch_norm) {
            out.push_back(layers[i].bn.running_mean);
            out.push_back(layers[i].bn.running_var);
        }
    }
    return out;
}

void MatcherWeights::set_requires_grad(bool v) {
    for (auto& t : trainable()) t.set_requires_grad(v);
}

MatcherWeights MatcherWeights::clone() const {
    MatcherWeights w;
    w.config = config;
    for (size_t i = 0; i < layers.size(); ++i) {
        ConvLayer l;
        l.kernel = layers[i].kernel.clone(layers[i].kernel.requires_grad());
        if (layers[i].bias.defined())
            l.bias = layers[i].bias.clone(layers[i].bias.requires_grad());
        if (config.layers[i].batch_norm) {
            l.bn.gamma = layers[i].bn.gamma.clone(layers[i].bn.gamma.requires_grad());
            l.bn.beta = layers[i].bn.beta.clone(layers[i].bn.beta.requires_grad());
            l.bn.running_mean = layers[i].bn.running_mean.clone();
            l.bn.running_var = layers[i].bn.running_var.clone();
            l.bn.stats_ready = layers[i].bn.stats_ready;
            l.bn.momentum = layers[i].bn.momentum;
            l.bn.eps = layers[i].bn.eps;
        }
        w.layers.push_back(std::move(l));
    }
    if (attention) w.attention = attention->clone();
    return w;
}

GridPos ResponseMap::argmax() const {
    auto d = raw.data();
    int best = 0;
    for (int i = 1; i < static_cast<int>(d.size()); ++i)
        if (d[static_cast<size_t>(i)] > d[static_cast<size_t>(best)]) best = i;
    return {best / cols(), best % cols()};
}

Tensor backbone_features(Tape& tape, const Tensor& image, MatcherWeights& weights, Mode mode) {
    const auto& cfg = weights.config;
    detail::require(image.rank() == 3 && image.dim(2) == cfg.layers.front().in_channels,
                    "extract_features: bad image shape");
    detail::require(image.dim(0) == cfg.exemplar_size || image.dim(0) == cfg.search_size,
                    "extract_features: image size matches neither exemplar nor search size");
    Tensor x = image;
    for (size_t i = 0; i + 1 < weights.layers.size(); ++i) {
        const auto& spec = cfg.layers[i];
        auto& layer = weights.layers[i];
        x = ops::conv2d(tape, x, layer.kernel, spec.stride);
        if (spec.batch_norm) x = ops::batchnorm(tape, x, layer.bn, mode == Mode::kTrain);
        else if (layer.bias.defined()) x = ops::add_channel_bias(tape, x, layer.bias);
        if (spec.relu) x = ops::relu(tape, x);
        if (spec.pool_after) x = ops::maxpool2d(tape, x, 3, 2);
    }
    return x;
}

Tensor last_layer_base(Tape& tape, const Tensor& feats, const MatcherWeights& weights) {
    const auto& spec = weights.config.layers.back();
    const auto& layer = weights.layers.back();
    Tensor x = ops::conv2d(tape, feats, layer.kernel, spec.stride);
    if (layer.bias.defined()) x = ops::add_channel_bias(tape, x, layer.bias);
    return x;
}

Tensor finalize_features(Tape& tape, const Tensor& feats, const std::optional<Tensor>& attention) {
    Tensor x = feats;
    if (attention) {
        detail::require(attention->rank() == 1 && attention->dim(0) == x.dim(2),
                        "extract_features: attention length != channel count");
        x = ops::mul_channels(tape, x, *attention);
    }
    return ops::l2_normalize_channels(tape, x);
}

Tensor extract_features(Tape& tape, const Tensor& image, MatcherWeights& weights,
                        const std::optional<Tensor>& attention, Mode mode) {
    Tensor feats = backbone_features(tape, image, weights, mode);
    feats = last_layer_base(tape, feats, weights);
    const std::optional<Tensor>& att = attention ? attention : weights.attention;
    return finalize_features(tape, feats, att);
}

ResponseMap match(Tape& tape, const Tensor& exemplar, const Tensor& search,
                  MatcherWeights& weights, const AdaptiveState* adaptive, Mode mode) {
    const auto& cfg = weights.config;
    detail::require(exemplar.rank() == 3 && exemplar.dim(0) == cfg.exemplar_size &&
                        exemplar.dim(1) == cfg.exemplar_size,
                    "match: exemplar has wrong size");
    detail::require(search.rank() == 3 && search.dim(0) == cfg.search_size &&
                        search.dim(1) == cfg.search_size,
                    "match: search patch has wrong size");

    std::optional<Tensor> attention = weights.attention;
    Tensor fx, fz;
    if (adaptive) {
        attention = adaptive->attention;
        auto branch = [&](const Tensor& img) {
            Tensor feats = backbone_features(tape, img, weights, mode);
            Tensor base = last_layer_base(tape, feats, weights);
            Tensor extra = ops::conv2d(tape, feats, adaptive->kernel, 1);
            Tensor joint = ops::concat_last(tape, base, extra);
            return finalize_features(tape, joint, attention);
        };
        fx = branch(exemplar);
        fz = branch(search);
    } else {
        fx = extract_features(tape, exemplar, weights, attention, mode);
        fz = extract_features(tape, search, weights, attention, mode);
    }
    ResponseMap resp;
    resp.raw = ops::cross_correlate(tape, fx, fz);
    return resp;
}

LabelMap make_label(int rows, int cols, GridPos target_pos, int radius) {
    detail::require(radius >= 0, "make_label: radius must be >= 0");
    if (target_pos.row < 0 || target_pos.row >= rows || target_pos.col < 0 ||
        target_pos.col >= cols)
        throw std::invalid_argument("make_label: position outside grid");
    LabelMap lm;
    lm.rows = rows;
    lm.cols = cols;
    lm.values.assign(static_cast<size_t>(rows) * cols, -1.0);
    int n_pos = 0;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            int d = std::max(std::abs(r - target_pos.row), std::abs(c - target_pos.col));
            if (d <= radius) {
                lm.values[static_cast<size_t>(r) * cols + c] = 1.0;
                ++n_pos;
            }
        }
    int total = rows * cols;
    int n_neg = total - n_pos;
    detail::require(n_pos >= 1, "make_label: no positive positions");
    detail::require(n_neg >= 1, "make_label: radius covers the whole grid");
    double wp = static_cast<double>(total) / (2.0 * n_pos);
    double wn = static_cast<double>(total) / (2.0 * n_neg);
    lm.weights.resize(lm.values.size());
    for (size_t i = 0; i < lm.values.size(); ++i)
        lm.weights[i] = lm.values[i] > 0.0 ? wp : wn;
    return lm;
}

Tensor response_loss(Tape& tape, const Tensor& response, const LabelMap& label) {
    detail::require(response.rank() == 2 && response.dim(0) == label.rows &&
                        response.dim(1) == label.cols,
                    "response_loss: grid mismatch");
    int64_t total = response.size();
    Tensor y = Tensor::from_data({label.rows, label.cols}, label.values);
    Tensor zeta = Tensor::from_data({label.rows, label.cols}, label.weights);
    // (1/|P|) * sum zeta(y) * log(1 + exp(-f*y))
    Tensor margin = ops::mul(tape, response, y);
    Tensor penal = ops::softplus(tape, ops::neg(tape, margin));
    Tensor weighted = ops::mul(tape, zeta, penal);
    return ops::scale(tape, ops::sum(tape, weighted), 1.0 / static_cast<double>(total));
}

PretrainResult pretrain(const MatcherConfig& config, const PairSampler& sampler,
                        const PretrainHyper& hyper) {
    config.validate();
    detail::require(hyper.batch >= 1 && hyper.iterations >= 1, "pretrain: bad hyperparameters");
    Rng init_rng = Rng::derive(hyper.seed, 0);
    MatcherWeights weights = MatcherWeights::init(config, init_rng);
    AdamState adam(weights.trainable(), hyper.lr);
    const int grid = config.response_size();

    PretrainResult result;
    result.loss_trace.reserve(static_cast<size_t>(hyper.iterations));
    for (int iter = 0; iter < hyper.iterations; ++iter) {
        Rng rng = Rng::derive(hyper.seed, static_cast<uint64_t>(iter) + 1);
        Tape tape;
        adam.zero_grad();
        Tensor total = Tensor::scalar(0.0);
        for (int b = 0; b < hyper.batch; ++b) {
            TrainingPair pair = sampler(rng);
            ResponseMap resp = match(tape, pair.exemplar, pair.search, weights, nullptr,
                                     Mode::kTrain);
            LabelMap label = make_label(grid, grid, pair.target, config.label_radius);
            total = ops::add(tape, total, response_loss(tape, resp.raw, label));
        }
        Tensor loss = ops::scale(tape, total, 1.0 / hyper.batch);
        result.loss_trace.push_back(loss.item());
        tape.backward(loss);
        adam.step();
    }
    result.weights = std::move(weights);
    return result;
}

namespace {

void collect_named(const MatcherWeights& w,
                   std::vector<std::pair<std::string, Tensor>>& out) {
    for (size_t i = 0; i < w.layers.size(); ++i) {
        std::string p = "conv" + std::to_string(i + 1);
        out.emplace_back(p + ".kernel", w.layers[i].kernel);
        if (w.layers[i].bias.defined()) out.emplace_back(p + ".bias", w.layers[i].bias);
        if (w.config.layers[i].batch_norm) {
            out.emplace_back(p + ".bn.gamma", w.layers[i].bn.gamma);
            out.emplace_back(p + ".bn.beta", w.layers[i].bn.beta);
            out.emplace_back(p + ".bn.mean", w.layers[i].bn.running_mean);
            out.emplace_back(p + ".bn.var", w.layers[i].bn.running_var);
        }
    }
}

}  // namespace

void save_matcher(const std::filesystem::path& dir, const MatcherWeights& weights,
                  uint64_t seed, int64_t iterations) {
    std::filesystem::create_directories(dir);
    Manifest m;
    m.values["format"] = "mlt-checkpoint";
    m.values["version"] = "1";
    m.values["kind"] = "matcher";
    m.values["preset"] = weights.config.preset;
    m.values["label_radius"] = std::to_string(weights.config.label_radius);
    m.values["seed"] = std::to_string(seed);
    m.values["iterations"] = std::to_string(iterations);
    std::vector<std::pair<std::string, Tensor>> named;
    collect_named(weights, named);
    for (const auto& [name, t] : named) {
        std::string file = name;
        std::replace(file.begin(), file.end(), '.', '_');
        file += ".tnsr";
        save_tensor(dir / file, t);
        m.tensors.emplace_back(name, file);
    }
    save_manifest(dir / "manifest.txt", m);
}

MatcherWeights load_matcher(const std::filesystem::path& dir) {
    Manifest m = load_manifest(dir / "manifest.txt");
    if (m.get("kind") != "matcher")
        throw DataError("checkpoint at " + dir.string() + " is not a matcher checkpoint");
    MatcherConfig config = MatcherConfig::preset_by_name(m.get("preset"));
    config.label_radius = static_cast<int>(m.get_int("label_radius"));
    MatcherWeights w;
    w.config = config;
    w.layers.resize(config.layers.size());

    auto find = [&](const std::string& name) -> Tensor {
        for (const auto& [n, f] : m.tensors)
            if (n == name) return load_tensor(dir / f);
        throw DataError("checkpoint missing tensor: " + name);
    };
    for (size_t i = 0; i < config.layers.size(); ++i) {
        std::string p = "conv" + std::to_string(i + 1);
        w.layers[i].kernel = find(p + ".kernel");
        if (config.layers[i].batch_norm) {
            w.layers[i].bn.gamma = find(p + ".bn.gamma");
            w.layers[i].bn.beta = find(p + ".bn.beta");
            w.layers[i].bn.running_mean = find(p + ".bn.mean");
            w.layers[i].bn.running_var = find(p + ".bn.var");
            w.layers[i].bn.stats_ready = true;
        } else {
            w.layers[i].bias = find(p + ".bias");
        }
    }
    return w;
}

}  // namespace mlt
