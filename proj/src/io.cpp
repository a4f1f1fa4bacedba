#include "rain/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>

namespace rain {

namespace fs = std::filesystem;

Image read_png(const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw std::runtime_error(path + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw std::runtime_error(path + ": " + img.message);
  }
  Image out(static_cast<int>(img.height), static_cast<int>(img.width));
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = buf[i] / 255.0;
  return out;
}

void write_png(const std::string& path, const Image& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(image.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const double v = std::clamp(image.data[i], 0.0, 1.0);
    buf[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw std::runtime_error(path + ": " + img.message);
  }
}

std::vector<ImageRecord> load_directory(const std::string& root) {
  if (!fs::is_directory(root)) throw std::invalid_argument("dataset root is not a directory: " + root);
  static const std::regex file_re(R"((\d+)_(\d+)\.png)", std::regex::icase);
  std::vector<std::pair<std::string, fs::path>> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.emplace_back(e.path().filename().string(), e.path());
  const bool numeric = std::all_of(dirs.begin(), dirs.end(), [](const auto& d) {
    return !d.first.empty() && std::all_of(d.first.begin(), d.first.end(), ::isdigit);
  });
  std::sort(dirs.begin(), dirs.end(), [numeric](const auto& a, const auto& b) {
    return numeric ? std::stoll(a.first) < std::stoll(b.first) : a.first < b.first;
  });

  std::vector<ImageRecord> out;
  for (std::size_t id = 0; id < dirs.size(); ++id) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dirs[id].second))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::smatch m;
      const std::string name = f.filename().string();
      if (!std::regex_match(name, m, file_re)) continue;
      ImageRecord r;
      r.pixels = read_png(f.string());
      r.hr_pixels = r.pixels;
      r.identity = static_cast<int>(id);
      r.camera = std::stoi(m[1].str());
      r.path = f.string();
      if (!out.empty() && !r.pixels.same_shape(out.front().pixels)) {
        throw std::invalid_argument(f.string() + ": image shape differs from " + out.front().path);
      }
      out.push_back(std::move(r));
    }
  }
  if (out.empty()) throw std::invalid_argument("no <camera>_<index>.png images found under " + root);
  return out;
}

Json to_json(const ManifestEntry& e) {
  return Json{{"path", e.path},   {"identity", e.identity}, {"camera", e.camera},
              {"rate", e.rate},   {"split", e.split},       {"labeled", e.labeled}};
}

ManifestEntry manifest_entry_from_json(const Json& j, const std::string& where) {
  auto fail = [&](const std::string& msg) { throw ConfigError(where + ": " + msg); };
  if (!j.is_object()) fail("expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    static const std::set<std::string> known{"path", "identity", "camera", "rate", "split", "labeled"};
    if (!known.count(it.key())) fail("unknown field " + it.key());
  }
  for (const char* k : {"path", "identity", "camera", "rate", "split", "labeled"})
    if (!j.contains(k)) fail(std::string("missing field ") + k);
  if (!j["path"].is_string()) fail("path: expected a string");
  if (!j["identity"].is_number_integer() || j["identity"].get<long>() < 0) fail("identity: expected a non-negative integer");
  if (!j["camera"].is_number_integer() || j["camera"].get<long>() < 0) fail("camera: expected a non-negative integer");
  if (!j["rate"].is_number_integer() || j["rate"].get<long>() < 1) fail("rate: expected an integer >= 1");
  if (!j["labeled"].is_boolean()) fail("labeled: expected a boolean");
  ManifestEntry e;
  e.path = j["path"].get<std::string>();
  e.identity = j["identity"].get<int>();
  e.camera = j["camera"].get<int>();
  e.rate = j["rate"].get<int>();
  e.split = j["split"].is_string() ? j["split"].get<std::string>() : "";
  if (e.split != "train" && e.split != "query" && e.split != "gallery") fail("split: expected train, query or gallery");
  e.labeled = j["labeled"].get<bool>();
  if (e.split == "gallery" && e.rate != 1) fail("gallery records must have rate 1");
  if (e.split == "query" && e.rate < 2) fail("query records must have rate > 1");
  return e;
}

std::string write_dataset(const std::string& dir, const MlrDataset& dataset) {
  const fs::path base(dir);
  fs::create_directories(base / "images");
  const fs::path manifest = base / "manifest.jsonl";
  std::ofstream out(manifest);
  if (!out) throw std::runtime_error("cannot write " + manifest.string());
  auto emit = [&](const std::vector<ImageRecord>& records, const char* split) {
    int k = 0;
    for (const auto& r : records) {
      const std::string rel = std::string("images/") + split + "_" + std::to_string(k++) + "_id" +
                              std::to_string(r.identity) + "_c" + std::to_string(r.camera) + "_r" +
                              std::to_string(r.rate) + ".png";
      write_png((base / rel).string(), r.pixels);
      out << to_json(ManifestEntry{rel, r.identity, r.camera, r.rate, split, r.labeled}).dump() << '\n';
    }
  };
  emit(dataset.train, "train");
  emit(dataset.query, "query");
  emit(dataset.gallery, "gallery");
  return manifest.string();
}

MlrDataset load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open manifest " + path);
  const fs::path base = fs::path(path).parent_path();
  MlrDataset ds;
  std::set<int> train_ids, test_ids;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw ConfigError(where + ": " + e.what());
    }
    const ManifestEntry e = manifest_entry_from_json(j, where);
    ImageRecord r;
    const fs::path p = fs::path(e.path).is_absolute() ? fs::path(e.path) : base / e.path;
    r.pixels = read_png(p.string());
    r.hr_pixels = r.pixels;
    r.identity = e.identity;
    r.camera = e.camera;
    r.rate = e.rate;
    r.labeled = e.labeled;
    r.path = p.string();
    if (e.split == "train") {
      train_ids.insert(r.identity);
      ds.train.push_back(std::move(r));
    } else {
      test_ids.insert(r.identity);
      if (e.split == "query") ds.rates_used.insert(r.rate);
      if (e.split == "gallery") ds.test_hr.push_back(r);
      (e.split == "query" ? ds.query : ds.gallery).push_back(std::move(r));
    }
  }
  for (int id : train_ids) {
    if (test_ids.count(id)) throw ProtocolError(path + ": identity " + std::to_string(id) + " appears in train and test splits");
  }
  ds.num_identities = static_cast<int>(train_ids.size());
  if (!train_ids.empty() && (*train_ids.begin() != 0 || *train_ids.rbegin() != ds.num_identities - 1)) {
    throw ProtocolError(path + ": training identities must be labelled 0..K-1");
  }
  std::map<int, int> per_gallery;
  for (const auto& g : ds.gallery) ++per_gallery[g.identity];
  for (const auto& [id, n] : per_gallery)
    if (n != 1) throw ProtocolError(path + ": identity " + std::to_string(id) + " has " + std::to_string(n) + " gallery records");
  for (const auto& q : ds.query)
    if (!per_gallery.count(q.identity)) throw ProtocolError(path + ": query identity " + std::to_string(q.identity) + " has no gallery record");
  return ds;
}

MlrDataset build_dataset(const DatasetSpec& spec) {
  if (spec.kind == "manifest") return load_manifest(spec.root);
  std::vector<ImageRecord> hr;
  if (spec.kind == "toy") {
    hr = make_toy_corpus(spec.num_identities, spec.images_per_identity, spec.side, spec.seed);
  } else if (spec.kind == "directory") {
    hr = load_directory(spec.root);
  } else {
    throw ConfigError("dataset.kind: unsupported \"" + spec.kind + "\"");
  }
  CameraPolicy policy{spec.lr_cameras, spec.per_camera_rate};
  return build_mlr_dataset(hr, spec.train_identities, spec.rates, policy, spec.seed);
}

}  // namespace rain
