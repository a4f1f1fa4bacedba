#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "rain/losses.hpp"
#include "rain/model.hpp"

namespace rain {

using Json = nlohmann::json;

inline constexpr int kExperimentSchemaVersion = 1;

struct LossToggles {
  bool adv = true;
  bool rec = true;
  bool cls = true;
  bool tri = true;
  bool operator==(const LossToggles&) const = default;
};

enum class TripletMining { random, batch_hard };

struct TrainConfig {
  long steps = 300;
  long epochs = 0;  // when > 0 and steps == 0: steps = epochs * ceil(N / (P * Q))
  int identities_per_batch = 4;
  int images_per_identity = 4;
  double lr = 3e-4;                // extractor, decoder, classifier
  double lr_discriminator = 1e-4;  // discriminators
  double beta1 = 0.9;
  double beta2 = 0.999;
  double margin = 0.3;
  std::set<int> rates{2, 3, 4};  // LR synthesis rates for training twins
  bool train_on_lr = true;       // false: HR-only baseline
  std::set<int> discriminator_levels{1, 2};
  LossToggles losses;
  LossWeights weights;
  double labeled_fraction = 1.0;
  std::uint64_t seed = 0;
  long eval_every = 0;  // 0: evaluate only at the end
  AdvUpdate adv_update = AdvUpdate::non_saturating;
  int discriminator_steps = 1;
  double clip_norm = 5.0;  // <= 0 disables clipping
  TripletMining mining = TripletMining::random;

  /// Adversarial alignment actually runs (needs the LR stream).
  bool adversarial_active() const noexcept { return losses.adv && train_on_lr; }
  /// Throws ConfigError naming the offending field ("train.<key>").
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct DatasetSpec {
  std::string kind = "toy";  // toy | directory | manifest
  int num_identities = 20;
  int images_per_identity = 16;
  int side = 32;
  int train_identities = 10;
  std::set<int> rates{2, 3, 4};  // query down-sampling rates
  std::set<int> lr_cameras;      // empty: every camera but the lowest
  bool per_camera_rate = false;
  std::uint64_t seed = 7;
  std::string root;  // directory root or manifest path
  bool operator==(const DatasetSpec&) const = default;
};

struct EvalSpec {
  std::vector<int> ranks{1, 5, 10, 20};
  bool normalize = true;
  std::vector<int> probe_rates;        // unseen-resolution probes
  std::vector<double> semi_fractions;  // sorted ascending
  bool invariance_probe = true;
  bool operator==(const EvalSpec&) const = default;
};

struct ExperimentSpec {
  int schema_version = kExperimentSchemaVersion;
  std::string name = "experiment";
  DatasetSpec dataset;
  ModelConfig model;  // input size, levels and K are filled in from dataset/train
  TrainConfig train;
  EvalSpec eval;
  std::vector<std::string> ablation;  // variant names; empty: no suite
  bool operator==(const ExperimentSpec&) const = default;
};

Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j);
Json to_json(const TrainConfig& c);
Json to_json(const ExperimentSpec& s);

/// Validates against the experiment schema. Unknown keys, wrong types and
/// out-of-range values raise ConfigError with a dotted field path.
ExperimentSpec parse_experiment(const Json& j);

/// Reads a spec file. Parse errors report line and column. Environment
/// variables RAIN_<SECTION>__<KEY>=<json value> override fields before
/// validation (e.g. RAIN_TRAIN__STEPS=50).
ExperimentSpec load_experiment(const std::string& path);
Json read_json_file(const std::string& path);
void apply_env_overrides(Json& j, const std::map<std::string, std::string>& env);
std::map<std::string, std::string> environment_with_prefix(const std::string& prefix = "RAIN_");

/// Model configuration implied by an experiment for a given dataset.
ModelConfig resolve_model_config(const ExperimentSpec& spec, int input_height, int input_width, int num_identities);

/// Stable FNV-1a fingerprint (hex) of a JSON document.
std::string fingerprint(const Json& j);

}  // namespace rain
