#include "pqdaf/manifest_io.hpp"

#include "pqdaf/error.hpp"

#include <json.hpp>

#include <fstream>

namespace pqdaf {

using nlohmann::json;

void write_manifest(const DatasetManifest& manifest, const std::string& path) {
    manifest.validate();
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw validation_error("cannot open manifest for writing: " + path);
    json header = {
        {"split", to_string(manifest.split)},
        {"seed", manifest.seed},
        {"format_version", kManifestFormatVersion},
    };
    f << header.dump() << "\n";
    for (const auto& r : manifest.records) {
        json rec = {
            {"id", r.id},
            {"path", r.path},
            {"category_id", r.category_id},
            {"provenance", to_string(r.provenance)},
        };
        if (r.score.has_value()) rec["score"] = *r.score;
        f << rec.dump() << "\n";
    }
    if (!f) throw validation_error("failed writing manifest: " + path);
}

namespace {

json parse_line(const std::string& line, const std::string& path, int line_no) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw validation_error(path + ":" + std::to_string(line_no) + ": malformed manifest line");
    return j;
}

} // namespace

DatasetManifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw validation_error("cannot open manifest: " + path);

    DatasetManifest manifest;
    std::string line;
    int line_no = 0;

    if (!std::getline(f, line))
        throw validation_error(path + ": empty manifest file");
    ++line_no;
    json header = parse_line(line, path, line_no);
    if (!header.contains("format_version") || !header["format_version"].is_number_integer())
        throw validation_error(path + ":1: manifest header missing format_version");
    int version = header["format_version"].get<int>();
    if (version != kManifestFormatVersion)
        throw validation_error(path + ":1: unsupported manifest format_version " +
                               std::to_string(version) + " (expected " +
                               std::to_string(kManifestFormatVersion) + ")");
    if (!header.contains("split") || !header.contains("seed"))
        throw validation_error(path + ":1: manifest header missing split or seed");
    manifest.split = split_from_string(header["split"].get<std::string>());
    manifest.seed = header["seed"].get<std::uint64_t>();

    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = parse_line(line, path, line_no);
        LabeledSample r;
        try {
            r.id = j.at("id").get<std::string>();
            r.path = j.at("path").get<std::string>();
            r.category_id = j.at("category_id").get<int>();
            r.provenance = provenance_from_string(j.at("provenance").get<std::string>());
            if (j.contains("score")) r.score = j["score"].get<double>();
        } catch (const json::exception& e) {
            throw validation_error(path + ":" + std::to_string(line_no) +
                                   ": invalid manifest record: " + e.what());
        }
        manifest.records.push_back(std::move(r));
    }
    manifest.validate();
    return manifest;
}

} // namespace pqdaf
