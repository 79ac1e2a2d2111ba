#include "pqdaf/sample.hpp"

#include "pqdaf/error.hpp"

#include <unordered_set>

namespace pqdaf {

const std::array<Category, kNumCategories>& categories() {
    static const std::array<Category, kNumCategories> table = {{
        {0, "C0", "Normal driving"},
        {1, "C1", "Texting with right hand"},
        {2, "C2", "Holding phone to right ear"},
        {3, "C3", "Texting with left hand"},
        {4, "C4", "Holding phone to left ear"},
        {5, "C5", "Adjusting multimedia"},
        {6, "C6", "Drinking water"},
        {7, "C7", "Reaching toward back seat"},
        {8, "C8", "Applying makeup"},
        {9, "C9", "Talking to passenger"},
    }};
    return table;
}

const Category& category_from_id(int id) {
    if (id < 0 || id >= kNumCategories)
        throw validation_error("category id out of range: " + std::to_string(id));
    return categories()[static_cast<std::size_t>(id)];
}

const Category& category_from_code(const std::string& code) {
    for (const auto& c : categories())
        if (c.code == code) return c;
    throw validation_error("unknown category code: " + code);
}

std::string to_string(Provenance p) {
    return p == Provenance::Real ? "real" : "synthetic";
}

Provenance provenance_from_string(const std::string& s) {
    if (s == "real") return Provenance::Real;
    if (s == "synthetic") return Provenance::Synthetic;
    throw validation_error("unknown provenance: " + s);
}

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Test: return "test";
        case Split::SyntheticPool: return "synthetic-pool";
    }
    throw validation_error("unknown split value");
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "test") return Split::Test;
    if (s == "synthetic-pool") return Split::SyntheticPool;
    throw validation_error("unknown split: " + s);
}

void LabeledSample::validate() const {
    if (id.empty()) throw validation_error("sample id must not be empty");
    category_from_id(category_id);
    if (provenance == Provenance::Real && score.has_value())
        throw validation_error("real sample must not carry a score: " + id);
    if (score.has_value() && !(*score >= 0.0 && *score <= 1.0))
        throw validation_error("sample score outside [0,1]: " + id);
}

void DatasetManifest::validate() const {
    std::unordered_set<std::string> seen;
    seen.reserve(records.size());
    for (const auto& r : records) {
        r.validate();
        if (!seen.insert(r.id).second)
            throw validation_error("duplicate sample id in manifest: " + r.id);
    }
}

std::array<std::size_t, kNumCategories> per_class_counts(const DatasetManifest& manifest) {
    std::array<std::size_t, kNumCategories> counts{};
    for (const auto& r : manifest.records)
        counts[static_cast<std::size_t>(category_from_id(r.category_id).id)]++;
    return counts;
}

ImageBuffer resolve_image(const LabeledSample& sample, const std::string& base_dir) {
    if (sample.image.has_value()) return *sample.image;
    if (sample.path.empty())
        throw validation_error("sample has neither pixels nor an image path: " + sample.id);
    std::string full = base_dir.empty() ? sample.path : base_dir + "/" + sample.path;
    return read_image(full);
}

} // namespace pqdaf
