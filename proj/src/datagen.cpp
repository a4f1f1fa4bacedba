#include "rain/datagen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace rain {

namespace {

void require_finite(const Image& image) {
  for (double v : image.data) {
    if (!std::isfinite(v)) throw std::invalid_argument("image contains non-finite pixel values");
  }
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(v[i - 1], v[pick(rng)]);
  }
}

int uniform_index(Rng& rng, std::size_t n) {
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  return static_cast<int>(pick(rng));
}

std::map<int, std::vector<int>> group_by_identity(const std::vector<ImageRecord>& records) {
  std::map<int, std::vector<int>> groups;
  for (int i = 0; i < static_cast<int>(records.size()); ++i) groups[records[i].identity].push_back(i);
  return groups;
}

}  // namespace

Image area_downsample(const Image& image, int out_h, int out_w) {
  Image out(out_h, out_w);
  const int ry = (image.height + out_h - 1) / out_h;
  const int rx = (image.width + out_w - 1) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    const int y0 = oy * ry;
    const int y1 = std::min(y0 + ry, image.height);
    for (int ox = 0; ox < out_w; ++ox) {
      const int x0 = ox * rx;
      const int x1 = std::min(x0 + rx, image.width);
      std::array<double, 3> acc{0.0, 0.0, 0.0};
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
          for (int c = 0; c < 3; ++c) acc[c] += image.at(y, x, c);
      const double inv = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
      for (int c = 0; c < 3; ++c) out.at(oy, ox, c) = acc[c] * inv;
    }
  }
  return out;
}

Image bilinear_resize(const Image& image, int out_h, int out_w) {
  Image out(out_h, out_w);
  const double sy = static_cast<double>(image.height) / out_h;
  const double sx = static_cast<double>(image.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = image.at(y0, x0, c) * (1.0 - wx) + image.at(y0, x1, c) * wx;
        const double bottom = image.at(y1, x0, c) * (1.0 - wx) + image.at(y1, x1, c) * wx;
        out.at(y, x, c) = top * (1.0 - wy) + bottom * wy;
      }
    }
  }
  return out;
}

Image downsample_upsample(const Image& image, int rate) {
  if (rate < 1) throw std::invalid_argument("down-sampling rate must be >= 1, got " + std::to_string(rate));
  require_finite(image);
  if (image.height < rate || image.width < rate) {
    throw std::invalid_argument("image smaller than down-sampling rate " + std::to_string(rate));
  }
  if (rate == 1) return image;
  const int h = (image.height + rate - 1) / rate;
  const int w = (image.width + rate - 1) / rate;
  return bilinear_resize(area_downsample(image, h, w), image.height, image.width);
}

std::vector<ImageRecord> synthesize_mlr(const std::vector<ImageRecord>& hr_records,
                                        const std::set<int>& rates, const CameraPolicy& policy,
                                        std::uint64_t seed) {
  if (hr_records.empty()) throw std::invalid_argument("synthesize_mlr: no input records");
  if (rates.empty()) throw std::invalid_argument("synthesize_mlr: empty rate set");
  for (int r : rates) {
    if (r < 1) throw std::invalid_argument("synthesize_mlr: rate must be >= 1, got " + std::to_string(r));
  }
  std::set<int> cameras;
  for (const auto& rec : hr_records) {
    if (rec.rate != 1) throw std::invalid_argument("synthesize_mlr: input records must be HR (rate 1)");
    cameras.insert(rec.camera);
  }
  std::set<int> lr_cameras = policy.lr_cameras;
  if (lr_cameras.empty()) {
    lr_cameras = cameras;
    lr_cameras.erase(lr_cameras.begin());
  }

  const std::vector<int> rate_list(rates.begin(), rates.end());
  Rng rng(derive_seed(seed, 0x31));
  std::map<int, int> camera_rate;
  if (policy.per_camera_rate) {
    for (int cam : lr_cameras) camera_rate[cam] = rate_list[uniform_index(rng, rate_list.size())];
  }

  std::vector<ImageRecord> out;
  out.reserve(hr_records.size());
  for (const auto& rec : hr_records) {
    ImageRecord copy = rec;
    copy.hr_pixels = rec.pixels;
    if (lr_cameras.count(rec.camera)) {
      const int r = policy.per_camera_rate ? camera_rate.at(rec.camera)
                                           : rate_list[uniform_index(rng, rate_list.size())];
      copy.rate = r;
      copy.pixels = downsample_upsample(rec.pixels, r);
    }
    out.push_back(std::move(copy));
  }
  return out;
}

namespace {

struct IdentityLook {
  std::array<double, 3> top{};
  std::array<double, 3> bottom{};
  std::array<double, 3> accent{};
  double split = 0.5;
  int accent_y = 0, accent_x = 0, accent_size = 0;
  int stripe_orientation = 0;  // 0 horizontal, 1 vertical, 2 diagonal
  int stripe_period = 2;
  double stripe_amplitude = 0.2;
  int stripe_region = 0;  // 0 top, 1 bottom, 2 whole image
};

IdentityLook make_look(int identity, int side, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x1000 + static_cast<std::uint64_t>(identity)));
  std::uniform_real_distribution<double> colour(0.1, 0.9);
  IdentityLook look;
  for (int c = 0; c < 3; ++c) {
    look.top[c] = colour(rng);
    look.bottom[c] = colour(rng);
    look.accent[c] = colour(rng);
  }
  look.split = std::uniform_real_distribution<double>(0.35, 0.65)(rng);
  look.accent_size = std::max(2, side / 4);
  look.accent_y = std::uniform_int_distribution<int>(0, side - look.accent_size)(rng);
  look.accent_x = std::uniform_int_distribution<int>(0, side - look.accent_size)(rng);
  look.stripe_orientation = std::uniform_int_distribution<int>(0, 2)(rng);
  look.stripe_period = std::uniform_int_distribution<int>(2, 4)(rng);
  look.stripe_amplitude = std::uniform_real_distribution<double>(0.15, 0.3)(rng);
  look.stripe_region = std::uniform_int_distribution<int>(0, 2)(rng);
  return look;
}

double stripe_wave(const IdentityLook& look, int y, int x) {
  int t = 0;
  switch (look.stripe_orientation) {
    case 0: t = y; break;
    case 1: t = x; break;
    default: t = x + y; break;
  }
  return (t % look.stripe_period) < (look.stripe_period + 1) / 2 ? 1.0 : -1.0;
}

Image render(const IdentityLook& look, int side, Rng& rng) {
  std::uniform_int_distribution<int> shift(-2, 2);
  const int dy = shift(rng);
  const int dx = shift(rng);
  const double brightness = std::uniform_real_distribution<double>(0.9, 1.1)(rng);
  std::normal_distribution<double> noise(0.0, 0.02);

  Image img(side, side);
  const int split_row = static_cast<int>(look.split * side);
  for (int y = 0; y < side; ++y) {
    const int sy = std::clamp(y - dy, 0, side - 1);
    for (int x = 0; x < side; ++x) {
      const int sx = std::clamp(x - dx, 0, side - 1);
      const bool top = sy < split_row;
      const bool in_accent = sy >= look.accent_y && sy < look.accent_y + look.accent_size &&
                             sx >= look.accent_x && sx < look.accent_x + look.accent_size;
      const auto& base = in_accent ? look.accent : (top ? look.top : look.bottom);
      const bool striped = look.stripe_region == 2 || (look.stripe_region == 0) == top;
      const double wave = striped && !in_accent ? look.stripe_amplitude * stripe_wave(look, sy, sx) : 0.0;
      for (int c = 0; c < 3; ++c) {
        img.at(y, x, c) = std::clamp(brightness * (base[c] + wave) + noise(rng), 0.0, 1.0);
      }
    }
  }
  return img;
}

}  // namespace

std::vector<ImageRecord> make_toy_corpus(int num_identities, int images_per_identity, int side,
                                         std::uint64_t seed) {
  if (num_identities < 2) throw std::invalid_argument("make_toy_corpus: num_identities must be >= 2");
  if (images_per_identity < 2) throw std::invalid_argument("make_toy_corpus: images_per_identity must be >= 2");
  if (side < 16) throw std::invalid_argument("make_toy_corpus: side must be >= 16");

  std::vector<ImageRecord> out;
  out.reserve(static_cast<std::size_t>(num_identities) * images_per_identity);
  for (int id = 0; id < num_identities; ++id) {
    const IdentityLook look = make_look(id, side, seed);
    Rng rng(derive_seed(seed, 0x2000 + static_cast<std::uint64_t>(id)));
    for (int k = 0; k < images_per_identity; ++k) {
      ImageRecord rec;
      rec.pixels = render(look, side, rng);
      rec.hr_pixels = rec.pixels;
      rec.identity = id;
      rec.camera = k % 2;
      rec.rate = 1;
      rec.labeled = true;
      out.push_back(std::move(rec));
    }
  }
  return out;
}

QueryGallerySplit split_query_gallery(const std::vector<ImageRecord>& test_records,
                                      std::uint64_t seed) {
  std::map<int, std::vector<int>> hr_by_id;
  std::set<int> identities;
  for (int i = 0; i < static_cast<int>(test_records.size()); ++i) {
    identities.insert(test_records[i].identity);
    if (test_records[i].rate == 1) hr_by_id[test_records[i].identity].push_back(i);
  }
  Rng rng(derive_seed(seed, 0x51));
  QueryGallerySplit split;
  for (int id : identities) {
    auto it = hr_by_id.find(id);
    if (it == hr_by_id.end()) {
      throw ProtocolError("identity " + std::to_string(id) + " has no HR image for the gallery");
    }
    split.gallery.push_back(test_records[it->second[uniform_index(rng, it->second.size())]]);
  }
  for (const auto& rec : test_records) {
    if (rec.rate > 1) split.query.push_back(rec);
  }
  return split;
}

IdentitySplit split_identities(const std::vector<ImageRecord>& records, int num_train_identities,
                               std::uint64_t seed) {
  std::set<int> ids;
  for (const auto& r : records) ids.insert(r.identity);
  if (num_train_identities < 1 || num_train_identities >= static_cast<int>(ids.size())) {
    throw std::invalid_argument("split_identities: need 1 <= num_train < number of identities");
  }
  std::vector<int> order(ids.begin(), ids.end());
  Rng rng(derive_seed(seed, 0x41));
  shuffle_in_place(order, rng);
  std::vector<int> train_ids(order.begin(), order.begin() + num_train_identities);
  std::vector<int> test_ids(order.begin() + num_train_identities, order.end());
  std::sort(train_ids.begin(), train_ids.end());
  std::sort(test_ids.begin(), test_ids.end());

  std::map<int, int> relabel;
  for (int i = 0; i < static_cast<int>(train_ids.size()); ++i) relabel[train_ids[i]] = i;
  for (int i = 0; i < static_cast<int>(test_ids.size()); ++i) relabel[test_ids[i]] = num_train_identities + i;

  IdentitySplit split;
  split.num_train_identities = num_train_identities;
  for (const auto& r : records) {
    ImageRecord copy = r;
    copy.identity = relabel.at(r.identity);
    (copy.identity < num_train_identities ? split.train : split.test).push_back(std::move(copy));
  }
  return split;
}

MlrDataset build_mlr_dataset(const std::vector<ImageRecord>& hr_records, int num_train_identities,
                             const std::set<int>& rates, const CameraPolicy& policy,
                             std::uint64_t seed) {
  IdentitySplit ids = split_identities(hr_records, num_train_identities, derive_seed(seed, 1));
  auto test = synthesize_mlr(ids.test, rates, policy, derive_seed(seed, 2));
  auto qg = split_query_gallery(test, derive_seed(seed, 3));
  MlrDataset ds;
  ds.train = std::move(ids.train);
  ds.query = std::move(qg.query);
  ds.gallery = std::move(qg.gallery);
  ds.test_hr = std::move(ids.test);
  ds.num_identities = num_train_identities;
  ds.rates_used = rates;
  return ds;
}

TripletBatch sample_triplet_batch(const std::vector<ImageRecord>& train, int identities_per_batch,
                                  int images_per_identity, Rng& rng, bool labeled_only) {
  if (identities_per_batch < 2) throw std::invalid_argument("sample_triplet_batch: P must be >= 2");
  if (images_per_identity < 1) throw std::invalid_argument("sample_triplet_batch: Q must be >= 1");
  const auto groups = group_by_identity(train);
  std::vector<int> eligible;
  for (const auto& [id, members] : groups) {
    if (static_cast<int>(members.size()) >= images_per_identity) eligible.push_back(id);
  }
  if (static_cast<int>(eligible.size()) < identities_per_batch) {
    throw std::invalid_argument("sample_triplet_batch: need " + std::to_string(identities_per_batch) +
                                " identities with >= " + std::to_string(images_per_identity) +
                                " images, found " + std::to_string(eligible.size()));
  }
  shuffle_in_place(eligible, rng);

  TripletBatch batch;
  for (int p = 0; p < identities_per_batch; ++p) {
    std::vector<int> members = groups.at(eligible[p]);
    shuffle_in_place(members, rng);
    for (int q = 0; q < images_per_identity; ++q) {
      batch.source_index.push_back(members[q]);
      batch.records.push_back(train[members[q]]);
    }
  }

  const int n = static_cast<int>(batch.records.size());
  auto usable = [&](int i) { return !labeled_only || batch.records[i].labeled; };
  std::vector<int> pos, neg;
  for (int a = 0; a < n; ++a) {
    if (!usable(a)) continue;
    pos.clear();
    neg.clear();
    for (int j = 0; j < n; ++j) {
      if (j == a || !usable(j)) continue;
      (batch.records[j].identity == batch.records[a].identity ? pos : neg).push_back(j);
    }
    if (pos.empty() || neg.empty()) continue;
    const int p = pos[uniform_index(rng, pos.size())];
    const int ng = neg[uniform_index(rng, neg.size())];
    batch.triplets.push_back({a, p, ng});
  }
  return batch;
}

std::vector<ImageRecord> mask_labels(std::vector<ImageRecord> train, double labeled_fraction,
                                     std::uint64_t seed) {
  if (!(labeled_fraction >= 0.0 && labeled_fraction <= 1.0)) {
    throw std::invalid_argument("mask_labels: labeled fraction must lie in [0, 1]");
  }
  const auto n_labeled = static_cast<std::size_t>(
      std::floor(labeled_fraction * static_cast<double>(train.size()) + 1e-9));
  auto groups = group_by_identity(train);
  Rng rng(derive_seed(seed, 0x61));
  std::vector<std::vector<int>> queues;
  for (auto& [id, members] : groups) {
    shuffle_in_place(members, rng);
    queues.push_back(members);
  }
  shuffle_in_place(queues, rng);

  for (auto& r : train) r.labeled = false;
  std::size_t flagged = 0;
  for (std::size_t depth = 0; flagged < n_labeled; ++depth) {
    for (const auto& q : queues) {
      if (flagged == n_labeled) break;
      if (depth < q.size()) {
        train[q[depth]].labeled = true;
        ++flagged;
      }
    }
  }
  return train;
}

}  // namespace rain
