#include "rain/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

extern char** environ;

namespace rain {

namespace {

// Walks one JSON object, remembers which keys were consumed and reports
// everything with a dotted path.
class Fields {
 public:
  Fields(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "expected an object");
  }

  [[noreturn]] static void fail(const std::string& path, const std::string& msg) {
    throw ConfigError(path + ": " + msg);
  }
  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }
  const Json& raw(const std::string& key) {
    seen_.push_back(key);
    return j_.at(key);
  }

  void get(const std::string& key, bool& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    if (!v.is_boolean()) fail(at(key), "expected a boolean");
    out = v.get<bool>();
  }
  void get(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    if (!v.is_string()) fail(at(key), "expected a string");
    out = v.get<std::string>();
  }
  void get(const std::string& key, double& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    if (!v.is_number()) fail(at(key), "expected a number");
    out = v.get<double>();
    if (!std::isfinite(out)) fail(at(key), "must be finite");
  }
  template <class I>
    requires std::is_integral_v<I>
  void get(const std::string& key, I& out) {
    if (!has(key)) return;
    out = integer<I>(raw(key), at(key));
  }
  template <class I>
  void get(const std::string& key, std::vector<I>& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    if (!v.is_array()) fail(at(key), "expected an array");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::string p = at(key) + "[" + std::to_string(i) + "]";
      if constexpr (std::is_same_v<I, std::string>) {
        if (!v[i].is_string()) fail(p, "expected a string");
        out.push_back(v[i].get<std::string>());
      } else if constexpr (std::is_floating_point_v<I>) {
        if (!v[i].is_number()) fail(p, "expected a number");
        out.push_back(v[i].get<I>());
      } else {
        out.push_back(integer<I>(v[i], p));
      }
    }
  }
  // Sets keep their element paths for range diagnostics done by the caller.
  void get_int_set(const std::string& key, std::set<int>& out, int min_value) {
    if (!has(key)) return;
    std::vector<int> v;
    get(key, v);
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] < min_value) {
        fail(at(key) + "[" + std::to_string(i) + "]",
             "value " + std::to_string(v[i]) + " is below the minimum " + std::to_string(min_value));
      }
      if (!out.insert(v[i]).second) fail(at(key) + "[" + std::to_string(i) + "]", "duplicate value");
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) fail(at(it.key()), "unknown field");
    }
  }

 private:
  template <class I>
  static I integer(const Json& v, const std::string& path) {
    if (!v.is_number_integer() && !v.is_number_unsigned()) fail(path, "expected an integer");
    if constexpr (std::is_unsigned_v<I>) {
      if (v.is_number_integer() && v.get<long long>() < 0) fail(path, "must be non-negative");
    }
    return v.get<I>();
  }

  const Json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

void require(bool ok, const std::string& path, const std::string& msg) {
  if (!ok) Fields::fail(path, msg);
}

void parse_losses(const Json& j, LossToggles& t) {
  Fields f(j, "train.losses");
  f.get("adv", t.adv);
  f.get("rec", t.rec);
  f.get("cls", t.cls);
  f.get("tri", t.tri);
  f.finish();
}

void parse_weights(const Json& j, LossWeights& w) {
  Fields f(j, "train.weights");
  f.get("adv", w.adv);
  f.get("rec", w.rec);
  f.get("cls", w.cls);
  f.get("tri", w.tri);
  f.finish();
  for (auto [k, v] : {std::pair{"adv", w.adv}, {"rec", w.rec}, {"cls", w.cls}, {"tri", w.tri}})
    require(v >= 0.0, std::string("train.weights.") + k, "must be >= 0");
}

TrainConfig parse_train(const Json& j) {
  TrainConfig c;
  Fields f(j, "train");
  f.get("steps", c.steps);
  f.get("epochs", c.epochs);
  f.get("identities_per_batch", c.identities_per_batch);
  f.get("images_per_identity", c.images_per_identity);
  f.get("lr", c.lr);
  f.get("lr_discriminator", c.lr_discriminator);
  f.get("beta1", c.beta1);
  f.get("beta2", c.beta2);
  f.get("margin", c.margin);
  f.get_int_set("rates", c.rates, 1);
  f.get("train_on_lr", c.train_on_lr);
  f.get_int_set("discriminator_levels", c.discriminator_levels, 1);
  if (f.has("losses")) parse_losses(f.raw("losses"), c.losses);
  if (f.has("weights")) parse_weights(f.raw("weights"), c.weights);
  f.get("labeled_fraction", c.labeled_fraction);
  f.get("seed", c.seed);
  f.get("eval_every", c.eval_every);
  std::string adv = c.adv_update == AdvUpdate::minimax ? "minimax" : "non_saturating";
  f.get("adv_update", adv);
  if (adv == "minimax") {
    c.adv_update = AdvUpdate::minimax;
  } else if (adv == "non_saturating") {
    c.adv_update = AdvUpdate::non_saturating;
  } else {
    Fields::fail("train.adv_update", "expected \"non_saturating\" or \"minimax\", got \"" + adv + "\"");
  }
  f.get("discriminator_steps", c.discriminator_steps);
  f.get("clip_norm", c.clip_norm);
  std::string mining = c.mining == TripletMining::batch_hard ? "batch_hard" : "random";
  f.get("mining", mining);
  if (mining == "random") {
    c.mining = TripletMining::random;
  } else if (mining == "batch_hard") {
    c.mining = TripletMining::batch_hard;
  } else {
    Fields::fail("train.mining", "expected \"random\" or \"batch_hard\", got \"" + mining + "\"");
  }
  f.finish();
  if (f.has("epochs") && !f.has("steps")) c.steps = 0;
  c.validate();
  return c;
}

DatasetSpec parse_dataset(const Json& j, const std::string& path) {
  DatasetSpec d;
  Fields f(j, path);
  f.get("kind", d.kind);
  f.get("num_identities", d.num_identities);
  f.get("images_per_identity", d.images_per_identity);
  f.get("side", d.side);
  f.get("train_identities", d.train_identities);
  f.get_int_set("rates", d.rates, 1);
  f.get_int_set("lr_cameras", d.lr_cameras, 0);
  f.get("per_camera_rate", d.per_camera_rate);
  f.get("seed", d.seed);
  f.get("root", d.root);
  f.finish();
  require(d.kind == "toy" || d.kind == "directory" || d.kind == "manifest", path + ".kind",
          "expected \"toy\", \"directory\" or \"manifest\", got \"" + d.kind + "\"");
  require(!d.rates.empty(), path + ".rates", "must not be empty");
  require(*d.rates.begin() >= 2, path + ".rates", "query rates must be >= 2");
  if (d.kind == "toy") {
    require(d.num_identities >= 2, path + ".num_identities", "must be >= 2");
    require(d.images_per_identity >= 2, path + ".images_per_identity", "must be >= 2");
    require(d.side >= 16, path + ".side", "must be >= 16");
    require(d.train_identities >= 2 && d.train_identities < d.num_identities, path + ".train_identities",
            "must lie in [2, num_identities)");
  } else {
    require(!d.root.empty(), path + ".root", "required for kind \"" + d.kind + "\"");
    require(d.train_identities >= 2, path + ".train_identities", "must be >= 2");
  }
  return d;
}

EvalSpec parse_eval(const Json& j) {
  EvalSpec e;
  Fields f(j, "eval");
  f.get("ranks", e.ranks);
  f.get("normalize", e.normalize);
  f.get("probe_rates", e.probe_rates);
  f.get("semi_fractions", e.semi_fractions);
  f.get("invariance_probe", e.invariance_probe);
  f.finish();
  require(!e.ranks.empty(), "eval.ranks", "must not be empty");
  for (std::size_t i = 0; i < e.ranks.size(); ++i)
    require(e.ranks[i] >= 1, "eval.ranks[" + std::to_string(i) + "]", "must be >= 1");
  for (std::size_t i = 0; i < e.probe_rates.size(); ++i)
    require(e.probe_rates[i] >= 2, "eval.probe_rates[" + std::to_string(i) + "]", "must be >= 2");
  for (std::size_t i = 0; i < e.semi_fractions.size(); ++i) {
    const std::string p = "eval.semi_fractions[" + std::to_string(i) + "]";
    require(e.semi_fractions[i] >= 0.0 && e.semi_fractions[i] <= 1.0, p, "must lie in [0, 1]");
    if (i > 0) require(e.semi_fractions[i] > e.semi_fractions[i - 1], p, "fractions must be sorted ascending");
  }
  return e;
}

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{"full",   "no_adv",       "no_rec",       "no_cls",
                                              "no_tri", "single_level", "hr_only",      "hr_lr_no_adv",
                                              "rate_2", "rate_3",       "rate_4",       "rate_234"};
  return names;
}

}  // namespace

void TrainConfig::validate() const {
  require(steps >= 0, "train.steps", "must be >= 0");
  require(epochs >= 0, "train.epochs", "must be >= 0");
  require(steps > 0 || epochs > 0, "train.steps", "either steps or epochs must be positive");
  require(identities_per_batch >= 2, "train.identities_per_batch", "must be >= 2");
  require(images_per_identity >= 2, "train.images_per_identity", "must be >= 2");
  require(lr > 0.0, "train.lr", "must be > 0");
  require(lr_discriminator > 0.0, "train.lr_discriminator", "must be > 0");
  require(beta1 >= 0.0 && beta1 < 1.0, "train.beta1", "must lie in [0, 1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "train.beta2", "must lie in [0, 1)");
  require(margin > 0.0, "train.margin", "must be > 0");
  require(!rates.empty(), "train.rates", "must not be empty");
  require(*rates.begin() >= 1, "train.rates", "rates must be >= 1");
  require(!discriminator_levels.empty(), "train.discriminator_levels", "must not be empty");
  require(losses.adv || losses.rec || losses.cls || losses.tri, "train.losses", "at least one loss must be enabled");
  require(labeled_fraction >= 0.0 && labeled_fraction <= 1.0, "train.labeled_fraction", "must lie in [0, 1]");
  require(eval_every >= 0, "train.eval_every", "must be >= 0");
  require(discriminator_steps >= 1, "train.discriminator_steps", "must be >= 1");
  if (labeled_fraction == 0.0 && !losses.rec && !adversarial_active()) {
    Fields::fail("train.labeled_fraction", "no labeled data and only identity losses (cls/tri) enabled");
  }
}

Json to_json(const ModelConfig& c) {
  return Json{{"input_height", c.input_height},
              {"input_width", c.input_width},
              {"channels", c.channels},
              {"decoder_channels", c.decoder_channels},
              {"discriminator_width", c.discriminator_width},
              {"discriminator_levels", c.discriminator_levels},
              {"num_identities", c.num_identities}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  Fields f(j, "model");
  f.get("input_height", c.input_height);
  f.get("input_width", c.input_width);
  f.get("channels", c.channels);
  f.get("decoder_channels", c.decoder_channels);
  f.get("discriminator_width", c.discriminator_width);
  f.get_int_set("discriminator_levels", c.discriminator_levels, 1);
  f.get("num_identities", c.num_identities);
  f.finish();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return c;
}

Json to_json(const TrainConfig& c) {
  return Json{{"steps", c.steps},
              {"epochs", c.epochs},
              {"identities_per_batch", c.identities_per_batch},
              {"images_per_identity", c.images_per_identity},
              {"lr", c.lr},
              {"lr_discriminator", c.lr_discriminator},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"margin", c.margin},
              {"rates", c.rates},
              {"train_on_lr", c.train_on_lr},
              {"discriminator_levels", c.discriminator_levels},
              {"losses", {{"adv", c.losses.adv}, {"rec", c.losses.rec}, {"cls", c.losses.cls}, {"tri", c.losses.tri}}},
              {"weights", {{"adv", c.weights.adv}, {"rec", c.weights.rec}, {"cls", c.weights.cls}, {"tri", c.weights.tri}}},
              {"labeled_fraction", c.labeled_fraction},
              {"seed", c.seed},
              {"eval_every", c.eval_every},
              {"adv_update", c.adv_update == AdvUpdate::minimax ? "minimax" : "non_saturating"},
              {"discriminator_steps", c.discriminator_steps},
              {"clip_norm", c.clip_norm},
              {"mining", c.mining == TripletMining::batch_hard ? "batch_hard" : "random"}};
}

Json to_json(const ExperimentSpec& s) {
  const DatasetSpec& d = s.dataset;
  Json dataset{{"kind", d.kind},
               {"num_identities", d.num_identities},
               {"images_per_identity", d.images_per_identity},
               {"side", d.side},
               {"train_identities", d.train_identities},
               {"rates", d.rates},
               {"lr_cameras", d.lr_cameras},
               {"per_camera_rate", d.per_camera_rate},
               {"seed", d.seed},
               {"root", d.root}};
  return Json{{"schema", "rain.experiment/" + std::to_string(s.schema_version)},
              {"name", s.name},
              {"dataset", dataset},
              {"model",
               {{"channels", s.model.channels},
                {"decoder_channels", s.model.decoder_channels},
                {"discriminator_width", s.model.discriminator_width}}},
              {"train", to_json(s.train)},
              {"eval",
               {{"ranks", s.eval.ranks},
                {"normalize", s.eval.normalize},
                {"probe_rates", s.eval.probe_rates},
                {"semi_fractions", s.eval.semi_fractions},
                {"invariance_probe", s.eval.invariance_probe}}},
              {"ablation", s.ablation}};
}

ExperimentSpec parse_experiment(const Json& j) {
  ExperimentSpec s;
  Fields f(j, "");
  std::string schema = "rain.experiment/1";
  f.get("schema", schema);
  if (schema != "rain.experiment/" + std::to_string(kExperimentSchemaVersion)) {
    Fields::fail("schema", "unsupported schema \"" + schema + "\" (expected rain.experiment/1)");
  }
  f.get("name", s.name);
  require(!s.name.empty(), "name", "must not be empty");

  std::map<std::string, DatasetSpec> declared;
  if (f.has("datasets")) {
    const Json& ds = f.raw("datasets");
    require(ds.is_object(), "datasets", "expected an object of named datasets");
    for (auto it = ds.begin(); it != ds.end(); ++it) declared[it.key()] = parse_dataset(it.value(), "datasets." + it.key());
  }
  if (f.has("dataset")) {
    const Json& d = f.raw("dataset");
    if (d.is_string()) {
      const auto it = declared.find(d.get<std::string>());
      if (it == declared.end()) Fields::fail("dataset", "references undeclared dataset \"" + d.get<std::string>() + "\"");
      s.dataset = it->second;
    } else {
      s.dataset = parse_dataset(d, "dataset");
    }
  } else if (declared.size() == 1) {
    s.dataset = declared.begin()->second;
  } else if (declared.size() > 1) {
    Fields::fail("dataset", "several datasets declared; name the one to use");
  }

  if (f.has("model")) {
    Fields m(f.raw("model"), "model");
    m.get("channels", s.model.channels);
    m.get("decoder_channels", s.model.decoder_channels);
    m.get("discriminator_width", s.model.discriminator_width);
    m.finish();
    require(!s.model.channels.empty(), "model.channels", "must not be empty");
    for (std::size_t i = 0; i < s.model.channels.size(); ++i)
      require(s.model.channels[i] >= 1, "model.channels[" + std::to_string(i) + "]", "must be >= 1");
    for (std::size_t i = 0; i < s.model.decoder_channels.size(); ++i)
      require(s.model.decoder_channels[i] >= 1, "model.decoder_channels[" + std::to_string(i) + "]", "must be >= 1");
    require(s.model.discriminator_width >= 1, "model.discriminator_width", "must be >= 1");
  }
  if (f.has("train")) s.train = parse_train(f.raw("train"));
  if (f.has("eval")) s.eval = parse_eval(f.raw("eval"));
  if (f.has("ablation")) {
    f.get("ablation", s.ablation);
    for (std::size_t i = 0; i < s.ablation.size(); ++i) {
      const auto& names = ablation_names();
      if (std::find(names.begin(), names.end(), s.ablation[i]) == names.end())
        Fields::fail("ablation[" + std::to_string(i) + "]", "unknown variant \"" + s.ablation[i] + "\"");
    }
  }
  f.finish();

  const int blocks = static_cast<int>(s.model.channels.size());
  for (int level : s.train.discriminator_levels) {
    require(level <= blocks, "train.discriminator_levels",
            "level " + std::to_string(level) + " exceeds the " + std::to_string(blocks) + " extractor blocks");
  }
  if (s.dataset.kind == "toy") {
    require(s.dataset.side % (1 << blocks) == 0, "dataset.side",
            "must be divisible by 2^" + std::to_string(blocks) + " for the configured extractor");
  }
  for (std::size_t i = 0; i < s.eval.probe_rates.size(); ++i) {
    if (s.train.rates.count(s.eval.probe_rates[i])) {
      Fields::fail("eval.probe_rates[" + std::to_string(i) + "]",
                   "rate " + std::to_string(s.eval.probe_rates[i]) + " is also a training rate");
    }
  }
  return s;
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open file");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    // translate the byte offset into line/column
    const std::size_t off = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    int line = 1, col = 1;
    for (std::size_t i = 0; i < off; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(path + ":" + std::to_string(line) + ":" + std::to_string(col) + ": parse error: " + e.what());
  }
}

std::map<std::string, std::string> environment_with_prefix(const std::string& prefix) {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string kv(*e);
    const auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    if (kv.compare(0, prefix.size(), prefix) == 0) out[kv.substr(prefix.size(), eq - prefix.size())] = kv.substr(eq + 1);
  }
  return out;
}

void apply_env_overrides(Json& j, const std::map<std::string, std::string>& env) {
  for (const auto& [name, value] : env) {
    // TRAIN__STEPS -> ["train", "steps"]
    std::vector<std::string> path;
    std::size_t start = 0;
    while (true) {
      const auto sep = name.find("__", start);
      std::string part = name.substr(start, sep == std::string::npos ? std::string::npos : sep - start);
      std::transform(part.begin(), part.end(), part.begin(), [](unsigned char ch) { return std::tolower(ch); });
      if (part.empty()) throw ConfigError("environment override RAIN_" + name + ": empty path component");
      path.push_back(part);
      if (sep == std::string::npos) break;
      start = sep + 2;
    }
    Json parsed;
    try {
      parsed = Json::parse(value);
    } catch (const Json::parse_error&) {
      parsed = value;
    }
    Json* node = &j;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
      if (!node->is_object()) throw ConfigError("environment override RAIN_" + name + ": " + path[i] + " is not an object");
      node = &(*node)[path[i]];
      if (node->is_null()) *node = Json::object();
    }
    if (!node->is_object()) throw ConfigError("environment override RAIN_" + name + ": parent is not an object");
    (*node)[path.back()] = parsed;
  }
}

ExperimentSpec load_experiment(const std::string& path) {
  Json j = read_json_file(path);
  apply_env_overrides(j, environment_with_prefix("RAIN_"));
  return parse_experiment(j);
}

ModelConfig resolve_model_config(const ExperimentSpec& spec, int input_height, int input_width, int num_identities) {
  ModelConfig c = spec.model;
  c.input_height = input_height;
  c.input_width = input_width;
  c.num_identities = num_identities;
  c.discriminator_levels = spec.train.discriminator_levels;
  return c;
}

std::string fingerprint(const Json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace rain
