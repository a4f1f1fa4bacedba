#include "rain/checkpoint.hpp"

#include <span>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace rain {

namespace {

constexpr char kMagic[8] = {'R', 'A', 'I', 'N', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

std::string shape_text(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

void write_array(std::ostream& out, std::span<const double> v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

template <class Vec>
void read_array(std::istream& in, Vec& v, std::size_t n, const std::string& path) {
  v.resize(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw std::runtime_error(path + ": truncated checkpoint data");
}

}  // namespace

void save_checkpoint(const std::string& path, const RainModel& model, long step, const Json& metadata,
                     const Adam* generator, const Adam* discriminator) {
  Json index = Json::array();
  std::vector<std::span<const double>> blobs;
  for (const Param* p : model.all_parameters()) {
    index.push_back({{"name", p->name}, {"shape", p->shape}, {"size", p->size()}, {"kind", p->trainable ? "param" : "buffer"}});
    blobs.push_back(p->value);
  }
  Json header{{"model_config", to_json(model.config())}, {"metadata", metadata}, {"step", step}};
  auto add_optimizer = [&](const char* key, const Adam* opt) {
    if (!opt) return;
    header[key] = {{"t", opt->steps()}};
    for (const auto& [name, mom] : opt->state()) {
      index.push_back({{"name", std::string(key) + ".m." + name}, {"shape", {static_cast<int>(mom.m.size())}}, {"size", mom.m.size()}, {"kind", "moment"}});
      blobs.push_back(mom.m);
      index.push_back({{"name", std::string(key) + ".v." + name}, {"shape", {static_cast<int>(mom.v.size())}}, {"size", mom.v.size()}, {"kind", "moment"}});
      blobs.push_back(mom.v);
    }
  };
  add_optimizer("generator_optimizer", generator);
  add_optimizer("discriminator_optimizer", discriminator);
  header["arrays"] = index;

  const std::string text = header.dump();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path);
    out.write(kMagic, sizeof kMagic);
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto b : blobs) write_array(out, b);
    if (!out) throw std::runtime_error("error writing checkpoint " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot move checkpoint into place: " + path);
}

void assign_parameters(RainModel& model, const RainModel& source) {
  std::map<std::string, const Param*> src;
  for (const Param* p : source.all_parameters()) src[p->name] = p;
  std::vector<std::string> problems;
  std::set<std::string> used;
  for (Param* p : model.all_parameters()) {
    const auto it = src.find(p->name);
    if (it == src.end()) {
      problems.push_back(p->name + " " + shape_text(p->shape) + " missing from checkpoint");
    } else if (it->second->shape != p->shape) {
      problems.push_back(p->name + " expected " + shape_text(p->shape) + " found " + shape_text(it->second->shape));
    }
    used.insert(p->name);
  }
  for (const auto& [name, p] : src)
    if (!used.count(name)) problems.push_back(name + " " + shape_text(p->shape) + " not present in the model");
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match the model configuration:";
    for (const auto& s : problems) msg += "\n  " + s;
    throw CheckpointMismatch(msg);
  }
  for (Param* p : model.all_parameters()) p->value = src.at(p->name)->value;
}

LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw std::runtime_error(path + ": not a checkpoint file");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != kCheckpointVersion) throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1ULL << 32)) throw std::runtime_error(path + ": corrupt checkpoint header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error(path + ": truncated checkpoint header");
  const Json header = Json::parse(text);

  LoadedCheckpoint out;
  const ModelConfig stored = model_config_from_json(header.at("model_config"));
  out.model = RainModel(stored, 0);
  out.metadata = header.value("metadata", Json::object());
  out.step = header.at("step").get<long>();

  std::map<std::string, Param*> params;
  for (Param* p : out.model.all_parameters()) params[p->name] = p;
  std::vector<std::string> problems;
  std::vector<double> scratch;
  for (const auto& entry : header.at("arrays")) {
    const auto name = entry.at("name").get<std::string>();
    const auto size = entry.at("size").get<std::size_t>();
    const auto kind = entry.at("kind").get<std::string>();
    if (kind == "moment") {
      const bool gen = name.rfind("generator_optimizer.", 0) == 0;
      Adam& opt = gen ? out.generator : out.discriminator;
      const std::string rest = name.substr(gen ? 20 : 24);  // "m.<param>" or "v.<param>"
      auto& mom = opt.state()[rest.substr(2)];
      read_array(in, rest[0] == 'm' ? mom.m : mom.v, size, path);
      continue;
    }
    const auto shape = entry.at("shape").get<std::vector<int>>();
    const auto it = params.find(name);
    if (it == params.end() || it->second->shape != shape) {
      problems.push_back(name + " " + shape_text(shape) + " does not fit the stored configuration");
      read_array(in, scratch, size, path);
      continue;
    }
    read_array(in, it->second->value, size, path);
  }
  if (!problems.empty()) {
    std::string msg = path + ": inconsistent checkpoint:";
    for (const auto& s : problems) msg += "\n  " + s;
    throw CheckpointMismatch(msg);
  }
  if (header.contains("generator_optimizer")) {
    out.has_optimizer = true;
    out.generator.set_steps(header["generator_optimizer"].at("t").get<long>());
  }
  if (header.contains("discriminator_optimizer"))
    out.discriminator.set_steps(header["discriminator_optimizer"].at("t").get<long>());

  if (expected && !(*expected == stored)) {
    RainModel target(*expected, 0);
    assign_parameters(target, out.model);  // throws with the per-array listing
    // names and shapes agree; only non-structural fields differ
    std::string msg = path + ": checkpoint configuration differs: stored " + to_json(stored).dump() +
                      ", expected " + to_json(*expected).dump();
    throw CheckpointMismatch(msg);
  }
  return out;
}

}  // namespace rain
