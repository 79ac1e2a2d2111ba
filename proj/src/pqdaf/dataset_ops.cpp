#include "pqdaf/dataset_ops.hpp"

#include "pqdaf/error.hpp"
#include "pqdaf/rng.hpp"

#include <array>
#include <cmath>

namespace pqdaf {

void MixSpec::validate() const {
    if (!(ratio >= 0.0)) throw validation_error("mix ratio must be >= 0");
    if (k_shot < 1) throw validation_error("k_shot must be >= 1");
}

long synthetic_count_per_class(int k_shot, double ratio) {
    return static_cast<long>(std::floor(static_cast<double>(k_shot) * ratio + 0.5));
}

namespace {

std::array<std::vector<std::size_t>, kNumCategories>
indices_by_class(const DatasetManifest& m, std::optional<Provenance> only) {
    std::array<std::vector<std::size_t>, kNumCategories> by_class;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        const auto& r = m.records[i];
        if (only.has_value() && r.provenance != *only) continue;
        by_class[static_cast<std::size_t>(category_from_id(r.category_id).id)].push_back(i);
    }
    return by_class;
}

} // namespace

DatasetManifest few_shot_subset(const DatasetManifest& source, int k, std::uint64_t seed) {
    if (k < 1) throw validation_error("few_shot_subset: k must be >= 1");
    source.validate();
    auto by_class = indices_by_class(source, Provenance::Real);

    DatasetManifest out;
    out.split = Split::Train;
    out.seed = seed;
    Rng base(seed);
    for (int c = 0; c < kNumCategories; ++c) {
        auto& pool = by_class[static_cast<std::size_t>(c)];
        if (pool.size() < static_cast<std::size_t>(k))
            throw ShortfallError(c, k, static_cast<long>(pool.size()),
                                 "few_shot_subset: class " + category_from_id(c).code + " has " +
                                     std::to_string(pool.size()) + " real samples, need " +
                                     std::to_string(k));
        Rng class_rng = base.child(static_cast<std::uint64_t>(c));
        auto chosen = class_rng.sample_without_replacement(pool.size(), static_cast<std::size_t>(k));
        for (std::size_t j : chosen) out.records.push_back(source.records[pool[j]]);
    }
    return out;
}

DatasetManifest mix(const DatasetManifest& real, const DatasetManifest& synthetic_pool,
                    const MixSpec& spec) {
    spec.validate();
    real.validate();
    synthetic_pool.validate();

    auto real_counts = per_class_counts(real);
    for (int c = 0; c < kNumCategories; ++c) {
        if (real_counts[static_cast<std::size_t>(c)] != static_cast<std::size_t>(spec.k_shot))
            throw validation_error("mix: real manifest must hold exactly k_shot=" +
                                   std::to_string(spec.k_shot) + " samples for class " +
                                   category_from_id(c).code + " (found " +
                                   std::to_string(real_counts[static_cast<std::size_t>(c)]) + ")");
    }
    for (const auto& r : synthetic_pool.records) {
        if (r.provenance != Provenance::Synthetic)
            throw validation_error("mix: pool sample is not synthetic: " + r.id);
        if (!r.score.has_value())
            throw validation_error("mix: pool sample has no quality score: " + r.id);
    }

    const long n_synth = synthetic_count_per_class(spec.k_shot, spec.ratio);
    auto pool_by_class = indices_by_class(synthetic_pool, Provenance::Synthetic);

    DatasetManifest out;
    out.split = Split::Train;
    out.seed = spec.seed;
    out.records = real.records;

    Rng base(spec.seed);
    long added = 0;
    for (int c = 0; c < kNumCategories; ++c) {
        auto& pool = pool_by_class[static_cast<std::size_t>(c)];
        if (pool.size() < static_cast<std::size_t>(n_synth))
            throw ShortfallError(c, n_synth, static_cast<long>(pool.size()),
                                 "mix: class " + category_from_id(c).code + " pool holds " +
                                     std::to_string(pool.size()) + " synthetic samples, need " +
                                     std::to_string(n_synth));
        Rng class_rng = base.child(0x1000u + static_cast<std::uint64_t>(c));
        auto chosen =
            class_rng.sample_without_replacement(pool.size(), static_cast<std::size_t>(n_synth));
        for (std::size_t j : chosen) out.records.push_back(synthetic_pool.records[pool[j]]);
        added += n_synth;
    }

    if (added > 0) {
        Rng shuffle_rng = base.child(0xFFFFu);
        shuffle_rng.shuffle(out.records);
    }
    out.validate();
    return out;
}

} // namespace pqdaf
