#pragma once

#include "pqdaf/sample.hpp"

#include <cstdint>
#include <vector>

namespace pqdaf {

// Real/synthetic mixing parameters. ratio is the synthetic-per-real
// multiplier: per class, round-half-up(k_shot * ratio) synthetic samples are
// added to the k_shot real ones.
struct MixSpec {
    double ratio = 1.0;
    int k_shot = 10;
    std::uint64_t seed = 0;

    void validate() const;
};

// Synthetic count for one class under a given spec.
long synthetic_count_per_class(int k_shot, double ratio);

// Seeded uniform subsampling without replacement: exactly k real samples per
// class, deterministic in (source, k, seed). A class with fewer than k real
// samples raises a ShortfallError naming the class.
DatasetManifest few_shot_subset(const DatasetManifest& source, int k, std::uint64_t seed);

// Per class: all k_shot real samples plus round-half-up(k_shot * ratio)
// synthetic samples drawn from the pool without replacement, then shuffled
// with the seed. With no synthetic samples to add the real manifest's order
// is preserved. Underfilled classes raise ShortfallError.
DatasetManifest mix(const DatasetManifest& real, const DatasetManifest& synthetic_pool,
                    const MixSpec& spec);

} // namespace pqdaf
