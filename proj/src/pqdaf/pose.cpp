#include "pqdaf/pose.hpp"

#include "pqdaf/error.hpp"
#include "pqdaf/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_set>

namespace pqdaf {

using nlohmann::json;

const std::array<std::string, 18>& Skeleton::vocabulary() {
    static const std::array<std::string, 18> names = {
        "head_top",    "forehead",   "nose",          "right_eye",  "left_eye",
        "right_ear",   "left_ear",   "mouth",         "chin",       "neck",
        "right_shoulder", "left_shoulder", "right_elbow", "left_elbow",
        "right_wrist", "left_wrist", "right_hip",     "left_hip",
    };
    return names;
}

const std::vector<std::pair<int, int>>& Skeleton::canonical_bones() {
    // indices into vocabulary()
    static const std::vector<std::pair<int, int>> bones = {
        {9, 10},  // neck - right_shoulder
        {10, 12}, // right_shoulder - right_elbow
        {12, 14}, // right_elbow - right_wrist
        {9, 11},  // neck - left_shoulder
        {11, 13}, // left_shoulder - left_elbow
        {13, 15}, // left_elbow - left_wrist
        {9, 16},  // neck - right_hip
        {9, 17},  // neck - left_hip
        {16, 17}, // right_hip - left_hip
        {9, 8},   // neck - chin
        {8, 7},   // chin - mouth
        {7, 2},   // mouth - nose
        {2, 1},   // nose - forehead
        {1, 0},   // forehead - head_top
        {2, 3},   // nose - right_eye
        {3, 5},   // right_eye - right_ear
        {2, 4},   // nose - left_eye
        {4, 6},   // left_eye - left_ear
    };
    return bones;
}

const std::array<std::array<float, 3>, 18>& pose_palette() {
    // bright fixed palette; every entry has max channel >= 170
    static const std::array<std::array<float, 3>, 18> palette = {{
        {255, 0, 0},    {255, 85, 0},   {255, 170, 0},  {255, 255, 0},
        {170, 255, 0},  {85, 255, 0},   {0, 255, 0},    {0, 255, 85},
        {0, 255, 170},  {0, 255, 255},  {0, 170, 255},  {0, 85, 255},
        {0, 0, 255},    {85, 0, 255},   {170, 0, 255},  {255, 0, 255},
        {255, 0, 170},  {255, 0, 85},
    }};
    return palette;
}

Skeleton Skeleton::make(std::vector<Keypoint> keypoints) {
    Skeleton s;
    s.keypoints = std::move(keypoints);
    const auto& vocab = vocabulary();
    for (const auto& [a, b] : canonical_bones()) {
        const std::string& na = vocab[static_cast<std::size_t>(a)];
        const std::string& nb = vocab[static_cast<std::size_t>(b)];
        if (s.find(na) != nullptr && s.find(nb) != nullptr)
            s.bones.emplace_back(na, nb);
    }
    s.validate();
    return s;
}

const Keypoint* Skeleton::find(const std::string& name) const {
    for (const auto& k : keypoints)
        if (k.name == name) return &k;
    return nullptr;
}

void Skeleton::validate() const {
    const auto& vocab = vocabulary();
    std::unordered_set<std::string> seen;
    for (const auto& k : keypoints) {
        if (std::find(vocab.begin(), vocab.end(), k.name) == vocab.end())
            throw validation_error("unknown keypoint name: " + k.name);
        if (!seen.insert(k.name).second)
            throw validation_error("duplicate keypoint: " + k.name);
        if (!(k.x >= 0.0 && k.x <= 1.0 && k.y >= 0.0 && k.y <= 1.0))
            throw validation_error("keypoint coordinates outside [0,1]: " + k.name);
        if (!(k.confidence >= 0.0 && k.confidence <= 1.0))
            throw validation_error("keypoint confidence outside [0,1]: " + k.name);
    }
    for (const auto& [a, b] : bones)
        if (find(a) == nullptr || find(b) == nullptr)
            throw validation_error("bone references missing keypoint: " + a + "-" + b);
}

std::string Skeleton::to_json() const {
    json arr = json::array();
    for (const auto& k : keypoints)
        arr.push_back({{"name", k.name}, {"x", k.x}, {"y", k.y}, {"confidence", k.confidence}});
    return json{{"keypoints", arr}}.dump();
}

Skeleton Skeleton::from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("keypoints"))
        throw validation_error("malformed skeleton JSON");
    std::vector<Keypoint> kps;
    for (const auto& e : j["keypoints"]) {
        Keypoint k;
        k.name = e.at("name").get<std::string>();
        k.x = e.at("x").get<double>();
        k.y = e.at("y").get<double>();
        k.confidence = e.value("confidence", 1.0);
        kps.push_back(std::move(k));
    }
    return Skeleton::make(std::move(kps));
}

// ---------------------------------------------------------------------------
// pose grammar
// ---------------------------------------------------------------------------

namespace {

PoseGrammar build_default_grammar() {
    PoseGrammar g;
    auto& cat = g.per_category;

    // C0: normal driving, both hands on the wheel
    cat[0] = CategoryPoseSpec{};

    // C1: texting with right hand (phone at lap, right side)
    cat[1].right_wrist_on_wheel = false;
    cat[1].right_wrist_region = {0.50, 0.58, 0.62, 0.70};

    // C2: phone held to right ear
    cat[2].right_wrist_on_wheel = false;
    cat[2].right_wrist_region = {0.52, 0.18, 0.62, 0.30};

    // C3: texting with left hand
    cat[3].left_wrist_on_wheel = false;
    cat[3].left_wrist_region = {0.34, 0.58, 0.46, 0.70};

    // C4: phone held to left ear
    cat[4].left_wrist_on_wheel = false;
    cat[4].left_wrist_region = {0.34, 0.18, 0.44, 0.30};

    // C5: adjusting the multimedia console (low right of the cabin)
    cat[5].right_wrist_on_wheel = false;
    cat[5].right_wrist_region = {0.68, 0.50, 0.82, 0.64};
    cat[5].head_yaw = {0.01, 0.04};

    // C6: drinking water (wrist at mouth height, slight tilt back)
    cat[6].right_wrist_on_wheel = false;
    cat[6].right_wrist_region = {0.44, 0.30, 0.54, 0.42};
    cat[6].head_tilt = {-0.03, -0.01};

    // C7: reaching toward the back seat (far right, torso twisted)
    cat[7].right_wrist_on_wheel = false;
    cat[7].right_wrist_region = {0.72, 0.30, 0.90, 0.48};
    cat[7].torso_lean = {0.02, 0.06};
    cat[7].head_yaw = {0.02, 0.06};

    // C8: applying makeup (left hand near the eyes)
    cat[8].left_wrist_on_wheel = false;
    cat[8].left_wrist_region = {0.36, 0.16, 0.46, 0.28};

    // C9: talking to a passenger (hands on wheel, strong head yaw)
    cat[9].head_yaw = {0.05, 0.09};

    return g;
}

double sample_range(Rng& rng, const ValueRange& r) { return rng.uniform(r.lo, r.hi); }

struct Vec2 {
    double x, y;
};

Vec2 sample_region(Rng& rng, const Region& r) {
    return {rng.uniform(r.x0, r.x1), rng.uniform(r.y0, r.y1)};
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

} // namespace

const PoseGrammar& default_grammar() {
    static const PoseGrammar g = build_default_grammar();
    return g;
}

Skeleton synth_pose(const Category& category, std::uint64_t seed) {
    return synth_pose(category, seed, default_grammar());
}

Skeleton synth_pose(const Category& category, std::uint64_t seed, const PoseGrammar& grammar) {
    Rng rng(hash_combine(hash_combine(0x706F7365ull, static_cast<std::uint64_t>(category.id)), seed));
    const CategoryPoseSpec& spec = grammar.spec_for(category);

    const double lean = sample_range(rng, spec.torso_lean);
    const Vec2 neck{sample_range(rng, grammar.neck_x) + lean, sample_range(rng, grammar.neck_y)};
    const double shoulder_hw = sample_range(rng, grammar.shoulder_half_width);
    const Vec2 r_shoulder{neck.x + shoulder_hw + lean, neck.y + 0.02};
    const Vec2 l_shoulder{neck.x - shoulder_hw + lean, neck.y + 0.02};

    const double hip_y = sample_range(rng, grammar.hip_y);
    const double hip_hw = sample_range(rng, grammar.hip_half_width);
    const Vec2 r_hip{neck.x + hip_hw, hip_y};
    const Vec2 l_hip{neck.x - hip_hw, hip_y};

    // head cluster
    const double head_len = sample_range(rng, grammar.head_length);
    const double yaw = sample_range(rng, spec.head_yaw);
    const double tilt = sample_range(rng, spec.head_tilt);
    const Vec2 head{neck.x + yaw, neck.y - head_len + tilt};

    auto wheel_point = [&](const ValueRange& angle_deg) {
        double a = sample_range(rng, angle_deg) * 3.14159265358979323846 / 180.0;
        double r = sample_range(rng, grammar.wheel_radius);
        return Vec2{grammar.wheel_cx + r * std::cos(a), grammar.wheel_cy - r * std::sin(a)};
    };

    const Vec2 r_wrist = spec.right_wrist_on_wheel ? wheel_point(grammar.right_wheel_angle_deg)
                                                   : sample_region(rng, spec.right_wrist_region);
    const Vec2 l_wrist = spec.left_wrist_on_wheel ? wheel_point(grammar.left_wheel_angle_deg)
                                                  : sample_region(rng, spec.left_wrist_region);

    // elbow as a bent midpoint, bowing away from the body centerline
    auto elbow_for = [&](const Vec2& shoulder, const Vec2& wrist, double side) {
        Vec2 mid{(shoulder.x + wrist.x) * 0.5, (shoulder.y + wrist.y) * 0.5};
        double dx = wrist.x - shoulder.x, dy = wrist.y - shoulder.y;
        double len = std::hypot(dx, dy);
        double bend = sample_range(rng, grammar.elbow_bend);
        if (len < 1e-9) return Vec2{mid.x + side * bend, mid.y};
        // perpendicular; sign chosen so the elbow bows outward
        double px = -dy / len, py = dx / len;
        if (px * side < 0) {
            px = -px;
            py = -py;
        }
        return Vec2{mid.x + px * bend, mid.y + py * bend};
    };
    const Vec2 r_elbow = elbow_for(r_shoulder, r_wrist, +1.0);
    const Vec2 l_elbow = elbow_for(l_shoulder, l_wrist, -1.0);

    auto conf = [&] { return sample_range(rng, grammar.keypoint_confidence); };
    auto kp = [&](const char* name, Vec2 p) {
        return Keypoint{name, clamp01(p.x), clamp01(p.y), conf()};
    };

    std::vector<Keypoint> kps;
    kps.push_back(kp("head_top", {head.x, head.y - 0.060}));
    kps.push_back(kp("forehead", {head.x, head.y - 0.035}));
    kps.push_back(kp("nose", {head.x, head.y + 0.010}));
    kps.push_back(kp("right_eye", {head.x + 0.025, head.y - 0.015}));
    kps.push_back(kp("left_eye", {head.x - 0.025, head.y - 0.015}));
    kps.push_back(kp("right_ear", {head.x + 0.050, head.y}));
    kps.push_back(kp("left_ear", {head.x - 0.050, head.y}));
    kps.push_back(kp("mouth", {head.x, head.y + 0.035}));
    kps.push_back(kp("chin", {head.x, head.y + 0.055}));
    kps.push_back(kp("neck", neck));
    kps.push_back(kp("right_shoulder", r_shoulder));
    kps.push_back(kp("left_shoulder", l_shoulder));
    kps.push_back(kp("right_elbow", r_elbow));
    kps.push_back(kp("left_elbow", l_elbow));
    kps.push_back(kp("right_wrist", r_wrist));
    kps.push_back(kp("left_wrist", l_wrist));
    kps.push_back(kp("right_hip", r_hip));
    kps.push_back(kp("left_hip", l_hip));
    return Skeleton::make(std::move(kps));
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

namespace {

double dist_point_segment(double px, double py, double ax, double ay, double bx, double by) {
    double abx = bx - ax, aby = by - ay;
    double apx = px - ax, apy = py - ay;
    double ab2 = abx * abx + aby * aby;
    double t = ab2 > 0 ? std::clamp((apx * abx + apy * aby) / ab2, 0.0, 1.0) : 0.0;
    double cx = ax + t * abx - px, cy = ay + t * aby - py;
    return std::hypot(cx, cy);
}

void paint_capsule(ImageBuffer& img, double ax, double ay, double bx, double by, double radius,
                   const std::array<float, 3>& color) {
    int x0 = std::max(0, static_cast<int>(std::floor(std::min(ax, bx) - radius)));
    int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(std::max(ax, bx) + radius)));
    int y0 = std::max(0, static_cast<int>(std::floor(std::min(ay, by) - radius)));
    int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(std::max(ay, by) + radius)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            double cx = x + 0.5, cy = y + 0.5;
            if (dist_point_segment(cx, cy, ax, ay, bx, by) <= radius)
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = color[static_cast<std::size_t>(c)];
        }
}

} // namespace

PoseMap render_skeleton(const Skeleton& skeleton, int width, int height) {
    if (width <= 0 || height <= 0)
        throw validation_error("render_skeleton: dimensions must be positive");
    PoseMap map;
    map.source_skeleton = skeleton;
    map.image = ImageBuffer(width, height, 3, PixelRange::Byte, 0.0f);

    const double scale = std::min(width, height) / 32.0;
    const double bone_radius = std::max(0.8, 1.0 * scale);
    const double kp_radius = std::max(1.0, 1.3 * scale);
    const auto& palette = pose_palette();

    auto px = [&](const Keypoint& k) { return k.x * width; };
    auto py = [&](const Keypoint& k) { return k.y * height; };

    int bone_index = 0;
    for (const auto& [a, b] : skeleton.bones) {
        const Keypoint* ka = skeleton.find(a);
        const Keypoint* kb = skeleton.find(b);
        paint_capsule(map.image, px(*ka), py(*ka), px(*kb), py(*kb), bone_radius,
                      palette[static_cast<std::size_t>(bone_index % 18)]);
        ++bone_index;
    }
    const auto& vocab = Skeleton::vocabulary();
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        const Keypoint* k = skeleton.find(vocab[i]);
        if (k == nullptr) continue;
        paint_capsule(map.image, px(*k), py(*k), px(*k), py(*k), kp_radius, palette[i]);
    }
    return map;
}

Skeleton extract_pose(const ImageBuffer& image, const PoseExtractor* extractor) {
    image.validate();
    if (extractor == nullptr)
        throw external_error("no extractor configured");
    Skeleton s = extractor->extract(image);
    try {
        s.validate();
    } catch (const Error& e) {
        throw external_error(std::string("extractor returned malformed keypoints: ") + e.what());
    }
    return s;
}

void write_pose_index(const std::map<std::string, Skeleton>& poses, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw validation_error("cannot open pose index for writing: " + path);
    for (const auto& [id, skel] : poses) {
        json line = {{"id", id}, {"skeleton", json::parse(skel.to_json())}};
        f << line.dump() << "\n";
    }
}

std::map<std::string, Skeleton> read_pose_index(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw validation_error("cannot open pose index: " + path);
    std::map<std::string, Skeleton> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("id") || !j.contains("skeleton"))
            throw validation_error(path + ":" + std::to_string(line_no) + ": malformed pose line");
        out[j["id"].get<std::string>()] = Skeleton::from_json(j["skeleton"].dump());
    }
    return out;
}

} // namespace pqdaf
