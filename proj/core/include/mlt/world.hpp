#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mlt/crop.hpp"
#include "mlt/matcher.hpp"
#include "mlt/tensor.hpp"

namespace mlt {

// Deterministic synthetic-video world: a textured blob target moving with a
// random-walk velocity over a procedural-noise background, with optional
// distractors, an occluder schedule, appearance drift, blur and sensor noise.
// The same spec always generates the bit-identical sequence; frames are
// quantized to the 8-bit grid so PPM export/ingest is lossless.
struct WorldSpec {
    int frame_w = 96;
    int frame_h = 96;
    int length = 120;
    std::string target_kind = "blob";  // blob (ellipse) | rect
    double target_size = 16.0;         // initial width, px
    double aspect = 1.0;               // height = width * aspect
    double texture_scale = 5.0;        // noise lattice cell, px
    double max_speed = 2.5;            // px per frame
    double accel_sigma = 0.6;
    double size_walk = 0.0;            // log-size random-walk sigma per frame
    double drift_rate = 0.0;           // texture phase walk per frame
    int distractor_count = 0;
    double distractor_similarity = 0.7;  // 0 background-like .. 1 target-like
    int occlude_start = -1;              // inclusive frame range; -1 disables
    int occlude_end = -1;
    double blur_sigma = 0.0;
    double noise_sigma = 0.0;
    uint64_t seed = 1;

    std::map<std::string, std::string> to_keyvalues() const;
    static WorldSpec from_keyvalues(const std::map<std::string, std::string>& kv);
};

struct AnnotatedSequence {
    std::string name;
    std::vector<Tensor> frames;  // [H,W,3] in [0,1]
    std::vector<Box> boxes;      // one per frame
    std::vector<std::string> attributes;  // occlusion, distractor, blur, scale-change
    std::vector<std::optional<Box>> occluder_boxes;  // present on occluded frames
    std::optional<WorldSpec> spec;

    size_t length() const { return frames.size(); }
};

AnnotatedSequence generate(const WorldSpec& spec);

// Exemplar/search training pair: both crops centered on the ground-truth box
// (tracker crop rule), so the label position is the grid center cell.
TrainingPair sample_training_pair(const AnnotatedSequence& seq, const MatcherConfig& config,
                                  Rng& rng);

struct EpisodeOptions {
    bool augment = true;
    double max_translation_frac = 0.12;  // of the search-crop side
    double flip_prob = 0.5;
    double noise_prob = 0.5;
    double noise_sigma = 0.05;
    double blur_prob = 0.5;
    double blur_sigma = 1.0;
};

struct Episode {
    Tensor exemplar;                // [E,E,3]
    std::vector<Tensor> patches;    // M' search-sized context patches
    std::vector<GridPos> positions; // true target cell per patch
};

// Anchor exemplar plus M' augmented context patches from one trajectory.
// Frames are drawn without replacement when the sequence is long enough,
// with replacement otherwise.
Episode sample_episode(const AnnotatedSequence& seq, int m_prime, const MatcherConfig& config,
                       const EpisodeOptions& opts, Rng& rng);

// Binary PPM (P6, maxval 255) raster io.
void write_ppm(const std::filesystem::path& file, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& file);

// Sequence directory: frame_%06d.ppm + groundtruth.txt (x,y,w,h per line) +
// spec.txt (key = value WorldSpec dump and attribute list).
void export_sequence(const AnnotatedSequence& seq, const std::filesystem::path& dir);
AnnotatedSequence ingest(const std::filesystem::path& dir, const std::string& format = "auto");

}  // namespace mlt
