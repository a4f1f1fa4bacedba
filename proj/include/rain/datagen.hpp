#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "rain/common.hpp"

namespace rain {

/// H x W x 3 image, interleaved (HWC) storage, values nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width; }
  bool operator==(const Image& o) const = default;
};

struct ImageRecord {
  Image pixels;
  Image hr_pixels;  // reconstruction target x_{L->H}; equals pixels when rate == 1
  int identity = 0;
  int camera = 0;
  int rate = 1;
  bool labeled = true;
  std::string path;  // source file, empty for generated records

  bool operator==(const ImageRecord& o) const = default;
};

struct MlrDataset {
  std::vector<ImageRecord> train;
  std::vector<ImageRecord> query;
  std::vector<ImageRecord> gallery;
  std::vector<ImageRecord> test_hr;  // held-out HR records before LR synthesis
  int num_identities = 0;  // training identity vocabulary K; test labels start at K
  std::set<int> rates_used;
};

/// Area-average down-sampling to ceil(H/r) x ceil(W/r) followed by bilinear
/// up-sampling back to H x W. rate == 1 returns the input unchanged.
Image downsample_upsample(const Image& image, int rate);

/// Area-average reduction only (exposed for tests and tooling).
Image area_downsample(const Image& image, int out_h, int out_w);
/// Bilinear resize with half-pixel centers (align_corners = false).
Image bilinear_resize(const Image& image, int out_h, int out_w);

/// Decides which camera views are rendered at low resolution.
struct CameraPolicy {
  /// Cameras whose images are down-sampled. Empty means "every camera except
  /// the lowest-numbered one present in the input".
  std::set<int> lr_cameras;
  /// false: one rate per image (default). true: one rate per LR camera,
  /// the alternative reading of the MLR construction.
  bool per_camera_rate = false;
};

/// Down-samples the designated LR cameras with a rate drawn uniformly from
/// `rates`; other cameras stay at rate 1. hr_pixels keeps the HR source.
/// Returns the records only; see build_mlr_dataset for the full split.
std::vector<ImageRecord> synthesize_mlr(const std::vector<ImageRecord>& hr_records,
                                        const std::set<int>& rates, const CameraPolicy& policy,
                                        std::uint64_t seed);

/// Procedural identity corpus: per-identity colour layout, accent block and
/// stripe texture, rendered with per-image shift/brightness/noise jitter.
/// Cameras alternate 0/1 across an identity's images.
std::vector<ImageRecord> make_toy_corpus(int num_identities, int images_per_identity, int side,
                                         std::uint64_t seed);

struct QueryGallerySplit {
  std::vector<ImageRecord> query;
  std::vector<ImageRecord> gallery;
};

/// Single-shot split: one uniformly chosen HR image per identity goes to the
/// gallery, every LR image becomes a query. HR images not chosen are dropped.
QueryGallerySplit split_query_gallery(const std::vector<ImageRecord>& test_records,
                                      std::uint64_t seed);

/// Identity-level train/test partition. Training identities are relabelled to
/// [0, num_train); test identities keep distinct labels starting at num_train.
struct IdentitySplit {
  std::vector<ImageRecord> train;
  std::vector<ImageRecord> test;
  int num_train_identities = 0;
};
IdentitySplit split_identities(const std::vector<ImageRecord>& records, int num_train_identities,
                               std::uint64_t seed);

/// Full MLR pipeline over an HR corpus: identity split, LR synthesis of the
/// test set, single-shot query/gallery split.
MlrDataset build_mlr_dataset(const std::vector<ImageRecord>& hr_records, int num_train_identities,
                             const std::set<int>& rates, const CameraPolicy& policy,
                             std::uint64_t seed);

struct Triplet {
  int anchor = 0;
  int positive = 0;
  int negative = 0;
};

struct TripletBatch {
  std::vector<ImageRecord> records;  // P*Q records grouped by identity
  std::vector<int> source_index;     // index of each record in the train list
  std::vector<Triplet> triplets;     // indices into `records`
};

/// P x Q identity-balanced batch. One triplet per anchor; positive and negative
/// are drawn inside the batch. With `labeled_only`, triplets only use records
/// whose labeled flag is set (anchors lacking a labeled positive are skipped).
TripletBatch sample_triplet_batch(const std::vector<ImageRecord>& train, int identities_per_batch,
                                  int images_per_identity, Rng& rng, bool labeled_only = false);

/// Flags exactly floor(fraction * N) records as labeled, stratified over
/// identities (round-robin across identities in a seeded order).
std::vector<ImageRecord> mask_labels(std::vector<ImageRecord> train, double labeled_fraction,
                                     std::uint64_t seed);

}  // namespace rain
