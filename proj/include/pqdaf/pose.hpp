#pragma once

#include "pqdaf/image.hpp"
#include "pqdaf/sample.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace pqdaf {

// One named keypoint in normalized image coordinates (x right, y down).
struct Keypoint {
    std::string name;
    double x = 0.0;
    double y = 0.0;
    double confidence = 1.0;
};

// Upper-body skeleton over a fixed 18-name vocabulary. The bone list is the
// canonical limb list filtered to keypoints actually present, so every bone
// always references two existing keypoints.
struct Skeleton {
    std::vector<Keypoint> keypoints;
    std::vector<std::pair<std::string, std::string>> bones;

    static const std::array<std::string, 18>& vocabulary();
    // canonical limb list as index pairs into vocabulary()
    static const std::vector<std::pair<int, int>>& canonical_bones();

    // Builds a skeleton from keypoints, deriving the bone list. Throws on
    // invariant violations (unknown/duplicate names, out-of-range values).
    static Skeleton make(std::vector<Keypoint> keypoints);

    const Keypoint* find(const std::string& name) const;
    void validate() const;

    std::string to_json() const;
    static Skeleton from_json(const std::string& text);
};

// Rasterized skeleton: bones as fixed-width colored capsules over a black
// background, keypoints as filled discs, one fixed palette color per index.
struct PoseMap {
    ImageBuffer image; // 3 channels, Byte convention
    Skeleton source_skeleton;
};

// Fixed render palette (RGB bytes), indexed by bone / keypoint index.
const std::array<std::array<float, 3>, 18>& pose_palette();

// Inclusive axis-aligned region in normalized coordinates.
struct Region {
    double x0, y0, x1, y1;
    bool contains(double x, double y) const {
        return x >= x0 && x <= x1 && y >= y0 && y <= y1;
    }
};

struct ValueRange {
    double lo, hi;
};

// Per-category pose parameters: where each wrist goes (a fixed region or the
// wheel arc), head yaw/tilt offsets, and torso lean.
struct CategoryPoseSpec {
    bool right_wrist_on_wheel = true;
    bool left_wrist_on_wheel = true;
    Region right_wrist_region{0, 0, 1, 1};
    Region left_wrist_region{0, 0, 1, 1};
    ValueRange head_yaw{0.0, 0.0};  // +x shifts the face cluster rightward
    ValueRange head_tilt{0.0, 0.0}; // +y shifts the face cluster downward
    ValueRange torso_lean{0.0, 0.0};
};

// Seeded sampler parameters for category-conditioned synthetic skeletons, a
// desk-scale stand-in for an external pose extractor.
struct PoseGrammar {
    ValueRange neck_x{0.44, 0.52};
    ValueRange neck_y{0.34, 0.40};
    ValueRange shoulder_half_width{0.10, 0.13};
    ValueRange head_length{0.10, 0.13};
    ValueRange hip_y{0.72, 0.78};
    ValueRange hip_half_width{0.05, 0.07};
    ValueRange wheel_radius{0.15, 0.17};
    double wheel_cx = 0.40;
    double wheel_cy = 0.64;
    ValueRange right_wheel_angle_deg{20.0, 60.0};
    ValueRange left_wheel_angle_deg{120.0, 160.0};
    ValueRange elbow_bend{0.04, 0.10};
    ValueRange keypoint_confidence{0.85, 1.0};

    std::array<CategoryPoseSpec, kNumCategories> per_category;

    const CategoryPoseSpec& spec_for(const Category& category) const {
        return per_category[static_cast<std::size_t>(category.id)];
    }
};

// The built-in grammar used by synth_pose.
const PoseGrammar& default_grammar();

// Deterministic in (category, seed); output satisfies the grammar's
// per-category constraints and all Skeleton invariants.
Skeleton synth_pose(const Category& category, std::uint64_t seed);
Skeleton synth_pose(const Category& category, std::uint64_t seed, const PoseGrammar& grammar);

// Pure rasterization: identical inputs yield identical pixels. A skeleton
// with no keypoints renders as an all-background image.
PoseMap render_skeleton(const Skeleton& skeleton, int width, int height);

// Adapter contract for real pose extractors (request: one image; response:
// keypoints in the Skeleton schema).
class PoseExtractor {
public:
    virtual ~PoseExtractor() = default;
    virtual Skeleton extract(const ImageBuffer& image) const = 0;
};

// With no extractor configured this raises "no extractor configured".
// A configured extractor's output is validated against the Skeleton
// invariants; violations surface as "malformed keypoints" errors.
Skeleton extract_pose(const ImageBuffer& image, const PoseExtractor* extractor = nullptr);

// Sidecar pose index: one {"id": ..., "skeleton": {...}} object per line.
void write_pose_index(const std::map<std::string, Skeleton>& poses, const std::string& path);
std::map<std::string, Skeleton> read_pose_index(const std::string& path);

} // namespace pqdaf
