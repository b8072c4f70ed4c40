#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mlt/adam.hpp"
#include "mlt/ops.hpp"
#include "mlt/tensor.hpp"

namespace mlt {

struct GridPos {
    int row = 0;
    int col = 0;
    bool operator==(const GridPos&) const = default;
};

struct ConvLayerSpec {
    int kernel = 3;
    int in_channels = 0;
    int out_channels = 0;
    int stride = 1;
    bool batch_norm = true;
    bool relu = true;
    bool pool_after = false;  // maxpool k=3 s=2
};

// Geometry and training knobs of the Siamese matcher. Two shipped presets:
//   paper: 127/255 inputs, 5 conv layers ending in 1x1x256x192, 17x17 response
//   desk:  32/64 inputs, the same 5-layer structure at toy width, 9x9 response
// The final layer is always 1x1 spatial with no batch norm or relu: its output
// goes straight to attention and the per-location L2 normalization, and
// adaptation concatenates extra kernels onto it.
struct MatcherConfig {
    std::string preset = "custom";
    int exemplar_size = 0;
    int search_size = 0;
    std::vector<ConvLayerSpec> layers;
    int label_radius = 0;         // Chebyshev radius of the +1 region
    bool balanced_loss = true;    // per-class weighting in the logistic loss

    static MatcherConfig paper_preset();
    static MatcherConfig desk_preset();
    static MatcherConfig preset_by_name(const std::string& name);

    int base_channels() const { return layers.back().out_channels; }
    // Spatial feature size for a given square input size.
    int feature_size(int input_size) const;
    int exemplar_feature_size() const { return feature_size(exemplar_size); }
    int search_feature_size() const { return feature_size(search_size); }
    int response_size() const { return search_feature_size() - exemplar_feature_size() + 1; }
    // Pixel step in search-image coordinates between adjacent response cells.
    int total_stride() const;
    void validate() const;
};

struct ConvLayer {
    Tensor kernel;  // [k,k,Cin,Cout]
    Tensor bias;    // [Cout]; undefined when batch norm supplies the shift
    BatchNorm bn;   // unused when spec.batch_norm == false
};

// Channel attention and extra last-layer kernels produced by the meta-learner.
struct AdaptiveState {
    Tensor kernel;     // [1,1,Cin,Ca]
    Tensor attention;  // sigmoid multipliers, length base+Ca
};

struct MatcherWeights {
    MatcherConfig config;
    std::vector<ConvLayer> layers;
    // Attached by adapt(); consumed by extract_features. Empty normally.
    std::optional<Tensor> attention;

    static MatcherWeights init(const MatcherConfig& config, Rng& rng);

    std::vector<Tensor> trainable() const;  // kernels, biases, bn scale/shift
    std::vector<Tensor> all_tensors() const;  // trainable + running stats
    void set_requires_grad(bool v);
    MatcherWeights clone() const;  // deep copy
};

struct LabelMap {
    int rows = 0, cols = 0;
    std::vector<double> values;   // {-1, +1}
    std::vector<double> weights;  // zeta, balances the two classes
};

struct ResponseMap {
    Tensor raw;  // [R,R] scores, differentiable when produced under a tape
    int rows() const { return raw.dim(0); }
    int cols() const { return raw.dim(1); }
    GridPos argmax() const;
};

enum class Mode { kTrain, kEval };

// phi_w: conv/bn/relu stack with pools, channel attention, then per-location
// L2 normalization. `attention` overrides weights.attention when present.
Tensor extract_features(Tape& tape, const Tensor& image, MatcherWeights& weights,
                        const std::optional<Tensor>& attention, Mode mode);

// Split pipeline used by the meta-learner and delta computation so the
// theta-independent part can be computed once per patch:
//   backbone_features: layers 1..N-1
//   last_layer_base:   final 1x1 conv with the base kernel + bias
//   finalize_features: attention multiply + L2 normalization
Tensor backbone_features(Tape& tape, const Tensor& image, MatcherWeights& weights, Mode mode);
Tensor last_layer_base(Tape& tape, const Tensor& feats, const MatcherWeights& weights);
Tensor finalize_features(Tape& tape, const Tensor& feats, const std::optional<Tensor>& attention);

// f_w(x,z): shared-weight feature extraction on both branches followed by
// cross-correlation. With `adaptive`, the last layer runs as [w_N, w_target]
// and the attention vector applies to both branches.
ResponseMap match(Tape& tape, const Tensor& exemplar, const Tensor& search,
                  MatcherWeights& weights, const AdaptiveState* adaptive, Mode mode);

// +1 within `radius` (Chebyshev) of target_pos, -1 elsewhere; weights balance
// the classes so both contribute |P|/2.
LabelMap make_label(int rows, int cols, GridPos target_pos, int radius);

// Weighted logistic loss, averaged over all response positions.
Tensor response_loss(Tape& tape, const Tensor& response, const LabelMap& label);

struct TrainingPair {
    Tensor exemplar;  // [E,E,3]
    Tensor search;    // [S,S,3]
    GridPos target;   // target position on the response grid
};
using PairSampler = std::function<TrainingPair(Rng&)>;

struct PretrainHyper {
    double lr = 1e-4;
    int batch = 8;
    int iterations = 2000;
    uint64_t seed = 1;
};

struct PretrainResult {
    MatcherWeights weights;
    std::vector<double> loss_trace;  // one entry per iteration
};

// Supervised pretraining of the matcher with Adam. Deterministic given the
// seed. Throws DataError if the sampler is empty (first draw throws).
PretrainResult pretrain(const MatcherConfig& config, const PairSampler& sampler,
                        const PretrainHyper& hyper);

// Checkpoint: directory of tensor snapshots plus manifest.txt.
void save_matcher(const std::filesystem::path& dir, const MatcherWeights& weights,
                  uint64_t seed, int64_t iterations);
MatcherWeights load_matcher(const std::filesystem::path& dir);

}  // namespace mlt
