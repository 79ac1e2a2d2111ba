#pragma once

#include "pqdaf/image.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace pqdaf {

inline constexpr int kNumCategories = 10;

// One of the ten driver behavior categories, C0..C9.
struct Category {
    int id;                  // 0..9
    std::string code;        // "C0".."C9"
    std::string description; // short behavior description
};

// The fixed registry of all ten categories.
const std::array<Category, kNumCategories>& categories();

// Lookup is total on 0..9 and throws validation_error on any other id.
const Category& category_from_id(int id);
const Category& category_from_code(const std::string& code);

enum class Provenance { Real, Synthetic };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

// Unit flowing through the whole pipeline: an image with a behavior
// category, provenance, and (for filtered synthetic samples) a quality score.
struct LabeledSample {
    std::string id;
    std::string path; // image file, relative to the manifest directory
    int category_id = 0;
    Provenance provenance = Provenance::Real;
    std::optional<double> score; // in [0,1]; only for scored synthetic samples

    std::optional<ImageBuffer> image; // in-memory pixels, if already loaded

    // invariants: real implies no score; score, when present, in [0,1]
    void validate() const;
};

enum class Split { Train, Test, SyntheticPool };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

// Ordered collection of sample records plus the seed that produced it
// (0 when hand-authored).
struct DatasetManifest {
    std::vector<LabeledSample> records;
    Split split = Split::Train;
    std::uint64_t seed = 0;

    // all record ids unique, every record valid
    void validate() const;
};

// Per-class record counts, indexed by category id. The counts always sum to
// the number of records.
std::array<std::size_t, kNumCategories> per_class_counts(const DatasetManifest& manifest);

// Image access: prefer in-memory pixels, else read from base_dir/path.
ImageBuffer resolve_image(const LabeledSample& sample, const std::string& base_dir);

} // namespace pqdaf
