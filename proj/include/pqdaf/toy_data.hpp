#pragma once

#include "pqdaf/diffusion.hpp"
#include "pqdaf/pose.hpp"
#include "pqdaf/sample.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace pqdaf {

// Appearance of one toy figure: a bright body color over a dark flat
// background. Pose maps use the multi-color palette on pure black, so the
// two domains never look alike.
struct ToyStyle {
    std::array<float, 3> body{220.0f, 220.0f, 220.0f};
    std::array<float, 3> background{20.0f, 20.0f, 20.0f};
};

// Seeded style draw: one dominant bright channel with scaled-down companions
// and a dark background tint.
ToyStyle sample_style(Rng& rng);

// Deterministic per-sample style, stable across re-renders of the same
// dataset (used to draw a source view of a sample in a different pose).
ToyStyle style_for_id(const std::string& id, std::uint64_t dataset_seed);

// Rasterizes the skeleton's stroke geometry in the style's body color over
// its background. Stroke coverage is identical to render_skeleton, so pose
// maps stay pixel-aligned with figures of the same skeleton.
ImageBuffer render_figure(const Skeleton& skeleton, const ToyStyle& style, int width, int height);

// Binary 1-channel mask (1 = visible, 0 = occluded) with one axis-aligned
// occluded rectangle covering 20% to 50% of the image.
ImageBuffer random_occlusion_mask(int width, int height, Rng& rng);

struct ToyDatasetConfig {
    std::string out_dir;
    int per_class_train = 40;
    int per_class_test = 20;
    int resolution = 32;
    std::uint64_t seed = 0;

    void validate() const;
};

// In-memory view of a generated toy dataset. Manifest paths are relative to
// the out_dir passed at creation time.
struct ToyDataset {
    DatasetManifest train;
    DatasetManifest test;
    std::map<std::string, Skeleton> poses;
};

// Renders a labeled stick-figure dataset under out_dir:
//   toy/images/<id>.ppm, toy/train.jsonl, toy/test.jsonl, toy/poses.jsonl
// Every sample gets a fresh category-conditioned pose and a per-id style.
// Deterministic in the config.
ToyDataset make_toy_dataset(const ToyDatasetConfig& config);

// Precomputed generator training data: per real sample, the clean target
// tensor and a condition bundle built from a re-rendered source view (same
// style, fresh pose), both pose maps, and a random occlusion mask. The pair
// input's target slot is the clean target for half the samples and neutral
// gray for the rest, matching the always-neutral slot used at generation
// time.
struct GeneratorTrainingSet {
    std::vector<Tensor<float>> targets;
    std::vector<ConditionBundle<float>> bundles;
};

GeneratorTrainingSet build_generator_training_set(const DatasetManifest& manifest,
                                                  const std::map<std::string, Skeleton>& poses,
                                                  const std::string& base_dir,
                                                  const EncoderSet<float>& encoders,
                                                  std::uint64_t seed);

// Condition bundle for generating a new image: neutral target slot, nothing
// occluded, pose pair [source | target].
ConditionBundle<float> build_generation_bundle(const ImageBuffer& source,
                                               const Skeleton& source_skeleton,
                                               const Skeleton& target_skeleton,
                                               const EncoderSet<float>& encoders);

} // namespace pqdaf
