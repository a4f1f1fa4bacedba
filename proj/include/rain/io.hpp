#pragma once

#include <string>
#include <vector>

#include "rain/config.hpp"
#include "rain/datagen.hpp"

namespace rain {

/// 8-bit PNG (any colour type) decoded to RGB reals in [0, 1].
Image read_png(const std::string& path);
/// Writes RGB 8-bit; values are clamped to [0, 1] and rounded.
void write_png(const std::string& path, const Image& image);

/// Loads `root/<identity_id>/<camera_id>_<index>.png`. Identity directories
/// are relabelled densely in ascending order; all images must share a shape.
std::vector<ImageRecord> load_directory(const std::string& root);

inline constexpr const char* kManifestSplits[] = {"train", "query", "gallery"};

/// One manifest line: {path, identity, camera, rate, split, labeled}.
struct ManifestEntry {
  std::string path;
  int identity = 0;
  int camera = 0;
  int rate = 1;
  std::string split;
  bool labeled = true;
};
Json to_json(const ManifestEntry& e);
/// Validates one parsed line; `where` prefixes error messages.
ManifestEntry manifest_entry_from_json(const Json& j, const std::string& where);

/// Writes every record of the dataset as PNG under `dir/images` plus
/// `dir/manifest.jsonl`. Returns the manifest path.
std::string write_dataset(const std::string& dir, const MlrDataset& dataset);

/// Reads a manifest (paths relative to the manifest's directory). LR records
/// carry no separate HR ground truth, so hr_pixels equals pixels for them.
/// num_identities is the number of distinct training identities.
MlrDataset load_manifest(const std::string& path);

/// Builds the dataset an experiment asks for (toy, directory or manifest).
MlrDataset build_dataset(const DatasetSpec& spec);

}  // namespace rain
