#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rain/config.hpp"
#include "rain/datagen.hpp"
#include "rain/eval.hpp"
#include "rain/model.hpp"
#include "rain/optim.hpp"

namespace rain {

/// One training batch: P*Q HR records followed (when training on LR) by their
/// synthesized LR twins, row for row.
struct StepBatch {
  TripletBatch batch;
  Tensor inputs;      // N = hr_count or 2 * hr_count rows
  Tensor hr_targets;  // hr_count rows: HR images (targets for both streams)
  std::vector<int> lr_rates;  // per HR record, rate of its LR twin
  std::vector<int> labels;    // per HR record
  std::vector<char> labeled;  // per HR record
  int hr_count = 0;
  bool has_lr = false;
  int labeled_count() const;
};

struct TrainHistory {
  std::vector<long> steps;
  std::vector<LossBundle> losses;
  std::vector<double> seconds;  // wall clock per step
  std::vector<std::pair<long, EvalReport>> evals;
};

/// Owns the parameters and both optimizers; applies the alternating
/// discriminator / generator updates serially.
class Trainer {
 public:
  Trainer(RainModel model, TrainConfig config, std::vector<ImageRecord> train_records);

  /// Batch for a given step, a pure function of (config.seed, step).
  StepBatch make_batch(long step) const;
  /// Training-mode extractor pass (updates normalisation statistics).
  FeaturePyramid forward(const StepBatch& batch);
  /// Ascent on the adversarial loss; touches only discriminator parameters.
  /// Returns the adversarial value per level seen by the discriminators.
  std::map<int, double> update_discriminators(const StepBatch& batch, const FeaturePyramid& features);
  /// Descent on the total loss; touches only extractor/decoder/classifier.
  LossBundle update_generator(const StepBatch& batch, const FeaturePyramid& features);
  /// Gradients of the discriminator objective (negated adversarial loss)
  /// left in the discriminator Param::grad arrays; nothing is updated.
  std::map<int, double> discriminator_gradients(const StepBatch& batch, const FeaturePyramid& features);
  /// Gradients of the generator objective left in the extractor, decoder and
  /// classifier Param::grad arrays; nothing is updated.
  LossBundle generator_gradients(const StepBatch& batch, const FeaturePyramid& features);
  /// make_batch + forward + both sub-updates. Throws TrainingAborted on a
  /// non-finite loss or gradient (parameters are left untouched).
  LossBundle step();

  long step_count() const noexcept { return step_; }
  void set_step_count(long s) noexcept { step_ = s; }
  RainModel& model() noexcept { return model_; }
  const RainModel& model() const noexcept { return model_; }
  const TrainConfig& config() const noexcept { return config_; }
  const std::vector<ImageRecord>& train_records() const noexcept { return train_; }
  Adam& generator_optimizer() noexcept { return gen_opt_; }
  Adam& discriminator_optimizer() noexcept { return disc_opt_; }
  const Adam& generator_optimizer() const noexcept { return gen_opt_; }
  const Adam& discriminator_optimizer() const noexcept { return disc_opt_; }

  std::vector<Param*> generator_parameters();
  std::vector<Param*> discriminator_parameters();

 private:
  RainModel model_;
  TrainConfig config_;
  std::vector<ImageRecord> train_;
  std::vector<int> lr_rates_;
  Adam gen_opt_;
  Adam disc_opt_;
  long step_ = 0;
};

/// Steps implied by the config (epochs are converted using the train size).
long total_steps(const TrainConfig& config, std::size_t train_size);

/// Seed used to initialise model parameters for a training seed.
std::uint64_t model_seed(std::uint64_t train_seed);

struct TrainOptions {
  std::string out_dir;  // empty: write nothing
  const ExperimentSpec* experiment = nullptr;  // recorded in the checkpoint
  std::vector<int> ranks{1, 5, 10, 20};
  bool normalize = true;
  std::string resume_from;  // checkpoint holding optimizer state
  long stop_after = -1;     // stop once this many steps are done (>= 0)
  std::function<void(long, const LossBundle&)> on_step;
};

struct TrainResult {
  RainModel model;
  TrainHistory history;
  EvalReport final_report;
  long steps_done = 0;
};

/// Full run: trains for total_steps, evaluates every eval_every steps and at
/// the end, and (with out_dir) writes metrics.jsonl, eval/*.json and
/// checkpoint.final. Deterministic given the seeds.
TrainResult train(const ModelConfig& model_config, const TrainConfig& config, const MlrDataset& dataset,
                  const TrainOptions& options = {});

/// JSON-lines record of one step.
Json metrics_record(long step, const LossBundle& b);
Json report_to_json(const EvalReport& r);
EvalReport report_from_json(const Json& j);

struct AblationRow {
  std::string name;
  TrainConfig config;
  EvalReport report;
  ProbeResult probe;
};

/// Variant configs derived from a base config, in suite order.
std::vector<std::pair<std::string, TrainConfig>> ablation_variants(const TrainConfig& base, int num_blocks,
                                                                   const std::vector<std::string>& names = {});

/// Trains every variant on the same dataset. Identical variant configs are
/// trained once. `workers` > 1 trains variants concurrently; results do not
/// depend on the worker count.
std::vector<AblationRow> run_ablation_suite(const ModelConfig& model_config, const TrainConfig& base,
                                            const MlrDataset& dataset, const std::vector<std::string>& names = {},
                                            int workers = 1, std::span<const int> ranks = {}, bool normalize = true);

/// Paired (HR, LR) records from the held-out identities for the invariance
/// probe; LR twins are synthesized at a rate drawn from `rates`.
std::pair<std::vector<ImageRecord>, std::vector<ImageRecord>> probe_pairs(const MlrDataset& dataset,
                                                                          const std::set<int>& rates,
                                                                          std::uint64_t seed);

}  // namespace rain
