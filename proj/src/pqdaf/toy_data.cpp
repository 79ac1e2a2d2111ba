#include "pqdaf/toy_data.hpp"

#include "pqdaf/error.hpp"
#include "pqdaf/manifest_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

namespace pqdaf {

ToyStyle sample_style(Rng& rng) {
    ToyStyle s;
    const int primary = static_cast<int>(rng.uniform_int(3));
    const float base = static_cast<float>(std::floor(rng.uniform(180.0, 256.0)));
    for (int c = 0; c < 3; ++c)
        s.body[static_cast<std::size_t>(c)] =
            c == primary ? base : static_cast<float>(std::floor(base * rng.uniform(0.25, 0.85)));
    for (int c = 0; c < 3; ++c)
        s.background[static_cast<std::size_t>(c)] =
            static_cast<float>(std::floor(rng.uniform(0.0, 56.0)));
    return s;
}

ToyStyle style_for_id(const std::string& id, std::uint64_t dataset_seed) {
    Rng rng(hash_combine(hash_combine(0x7374796Cull, dataset_seed), hash64(id)));
    return sample_style(rng);
}

ImageBuffer render_figure(const Skeleton& skeleton, const ToyStyle& style, int width,
                          int height) {
    const PoseMap pm = render_skeleton(skeleton, width, height);
    const std::vector<float> lum = luminance01(pm.image);
    ImageBuffer img(width, height, 3, PixelRange::Byte);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const bool body = lum[static_cast<std::size_t>(y) * width + x] > 0.0f;
            const auto& color = body ? style.body : style.background;
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = color[static_cast<std::size_t>(c)];
        }
    return img;
}

ImageBuffer random_occlusion_mask(int width, int height, Rng& rng) {
    if (width < 4 || height < 4)
        throw validation_error("occlusion mask needs at least a 4x4 image");
    const double area = static_cast<double>(width) * height;
    for (int attempt = 0; attempt < 200; ++attempt) {
        int x0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(width)));
        int x1 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(width)));
        int y0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(height)));
        int y1 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(height)));
        if (x0 > x1) std::swap(x0, x1);
        if (y0 > y1) std::swap(y0, y1);
        const double frac = static_cast<double>(x1 - x0 + 1) * (y1 - y0 + 1) / area;
        if (frac < 0.2 || frac > 0.5) continue;
        ImageBuffer mask(width, height, 1, PixelRange::Byte, 1.0f);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) mask.at(0, y, x) = 0.0f;
        return mask;
    }
    // fallback: a centered rectangle covering about a third of the image
    ImageBuffer mask(width, height, 1, PixelRange::Byte, 1.0f);
    const int rw = std::max(1, width * 3 / 5), rh = std::max(1, height * 11 / 20);
    const int x0 = (width - rw) / 2, y0 = (height - rh) / 2;
    for (int y = y0; y < y0 + rh; ++y)
        for (int x = x0; x < x0 + rw; ++x) mask.at(0, y, x) = 0.0f;
    return mask;
}

void ToyDatasetConfig::validate() const {
    if (out_dir.empty()) throw validation_error("toy dataset needs an output directory");
    if (per_class_train < 1 || per_class_test < 1)
        throw validation_error("per-class counts must be >= 1");
    if (resolution < 16 || resolution % 8 != 0)
        throw validation_error("resolution must be a multiple of 8, at least 16");
}

namespace {

std::string sample_id(const char* split_tag, int category_id, int index) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "toy_%s_C%d_%03d", split_tag, category_id, index);
    return buf;
}

void render_split(const ToyDatasetConfig& cfg, const char* split_tag, std::uint64_t split_salt,
                  int per_class, Split split, DatasetManifest& manifest,
                  std::map<std::string, Skeleton>& poses) {
    manifest.split = split;
    manifest.seed = cfg.seed;
    const std::filesystem::path root(cfg.out_dir);
    for (int c = 0; c < kNumCategories; ++c) {
        const Category& category = category_from_id(c);
        for (int i = 0; i < per_class; ++i) {
            const std::string id = sample_id(split_tag, c, i);
            const std::uint64_t pose_seed = hash_combine(
                hash_combine(cfg.seed, split_salt),
                static_cast<std::uint64_t>(c) * 100000ull + static_cast<std::uint64_t>(i));
            const Skeleton skeleton = synth_pose(category, pose_seed);
            const ImageBuffer img = render_figure(skeleton, style_for_id(id, cfg.seed),
                                                  cfg.resolution, cfg.resolution);
            LabeledSample rec;
            rec.id = id;
            rec.path = "toy/images/" + id + ".ppm";
            rec.category_id = c;
            rec.provenance = Provenance::Real;
            write_image(img, (root / rec.path).string());
            manifest.records.push_back(std::move(rec));
            poses.emplace(id, skeleton);
        }
    }
}

} // namespace

ToyDataset make_toy_dataset(const ToyDatasetConfig& config) {
    config.validate();
    const std::filesystem::path root(config.out_dir);
    std::error_code ec;
    std::filesystem::create_directories(root / "toy" / "images", ec);
    if (ec)
        throw external_error("cannot create toy dataset directories under " + config.out_dir +
                             ": " + ec.message());

    ToyDataset ds;
    render_split(config, "tr", 0x7472ull, config.per_class_train, Split::Train, ds.train,
                 ds.poses);
    render_split(config, "te", 0x7465ull, config.per_class_test, Split::Test, ds.test, ds.poses);
    write_manifest(ds.train, (root / "toy" / "train.jsonl").string());
    write_manifest(ds.test, (root / "toy" / "test.jsonl").string());
    write_pose_index(ds.poses, (root / "toy" / "poses.jsonl").string());
    return ds;
}

GeneratorTrainingSet build_generator_training_set(const DatasetManifest& manifest,
                                                  const std::map<std::string, Skeleton>& poses,
                                                  const std::string& base_dir,
                                                  const EncoderSet<float>& encoders,
                                                  std::uint64_t seed) {
    if (manifest.records.empty()) throw validation_error("generator training manifest is empty");
    Rng rng(hash_combine(0x62756E646C65ull, seed));
    GeneratorTrainingSet set;
    set.targets.reserve(manifest.records.size());
    set.bundles.reserve(manifest.records.size());
    for (const LabeledSample& rec : manifest.records) {
        const auto pose_it = poses.find(rec.id);
        if (pose_it == poses.end())
            throw validation_error("no skeleton recorded for sample " + rec.id);
        const ImageBuffer target = resolve_image(rec, base_dir);
        const int w = target.width, h = target.height;

        const ToyStyle style = style_for_id(rec.id, manifest.seed);
        const Skeleton source_skeleton =
            synth_pose(category_from_id(rec.category_id), rng.next_u64());
        const ImageBuffer source = render_figure(source_skeleton, style, w, h);
        const ImageBuffer mask = random_occlusion_mask(w, h, rng);
        const bool reveal_target = rng.bernoulli(0.5);
        const ImageBuffer pair_target =
            reveal_target ? target : ImageBuffer(w, h, 3, PixelRange::Byte, 127.5f);

        set.bundles.push_back(assemble_conditions(source, pair_target,
                                                  render_skeleton(source_skeleton, w, h),
                                                  render_skeleton(pose_it->second, w, h), mask,
                                                  encoders));
        set.targets.push_back(to_tensor<float>(to_unit(target)));
    }
    return set;
}

ConditionBundle<float> build_generation_bundle(const ImageBuffer& source,
                                               const Skeleton& source_skeleton,
                                               const Skeleton& target_skeleton,
                                               const EncoderSet<float>& encoders) {
    const int w = source.width, h = source.height;
    const ImageBuffer neutral(w, h, 3, PixelRange::Byte, 127.5f);
    const ImageBuffer visible(w, h, 1, PixelRange::Byte, 1.0f);
    return assemble_conditions(source, neutral, render_skeleton(source_skeleton, w, h),
                               render_skeleton(target_skeleton, w, h), visible, encoders);
}

} // namespace pqdaf
