#pragma once

#include "pqdaf/sample.hpp"

#include <string>

namespace pqdaf {

inline constexpr int kManifestFormatVersion = 1;

// Manifest file layout: a header line carrying {split, seed, format_version}
// followed by one JSON object per record with fields
// {id, path, category_id, provenance, score?}. score is omitted when absent.
void write_manifest(const DatasetManifest& manifest, const std::string& path);

// Errors cite the offending line number; an unknown format_version is
// reported as a distinct version error.
DatasetManifest read_manifest(const std::string& path);

} // namespace pqdaf
