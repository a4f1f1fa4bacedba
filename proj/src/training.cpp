#include "rain/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "rain/checkpoint.hpp"

namespace rain {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kBatchStream = 0xba7c4;
constexpr std::uint64_t kMaskStream = 0x1abe1;
constexpr std::uint64_t kModelStream = 0x30de1;

bool all_finite(std::span<Param* const> params) {
  for (const Param* p : params)
    for (double g : p->grad)
      if (!std::isfinite(g)) return false;
  return true;
}

void append(std::vector<Param*>& out, std::vector<Param*> more) { out.insert(out.end(), more.begin(), more.end()); }

}  // namespace

int StepBatch::labeled_count() const {
  return static_cast<int>(std::count(labeled.begin(), labeled.end(), char{1}));
}

std::uint64_t model_seed(std::uint64_t train_seed) { return derive_seed(train_seed, kModelStream); }

long total_steps(const TrainConfig& config, std::size_t train_size) {
  if (config.steps > 0) return config.steps;
  const long per_batch = static_cast<long>(config.identities_per_batch) * config.images_per_identity;
  const long per_epoch = std::max<long>(1, (static_cast<long>(train_size) + per_batch - 1) / per_batch);
  return config.epochs * per_epoch;
}

Trainer::Trainer(RainModel model, TrainConfig config, std::vector<ImageRecord> train_records)
    : model_(std::move(model)), config_(std::move(config)), train_(std::move(train_records)) {
  config_.validate();
  if (train_.empty()) throw ConfigError("train: no training records");
  for (int level : config_.discriminator_levels) {
    if (!model_.discriminators().count(level)) {
      throw ConfigError("train.discriminator_levels: level " + std::to_string(level) +
                        " has no discriminator in the model configuration");
    }
  }
  if (config_.labeled_fraction < 1.0) train_ = mask_labels(std::move(train_), config_.labeled_fraction,
                                                            derive_seed(config_.seed, kMaskStream));
  lr_rates_.assign(config_.rates.begin(), config_.rates.end());
  gen_opt_ = Adam(AdamConfig{config_.lr, config_.beta1, config_.beta2});
  disc_opt_ = Adam(AdamConfig{config_.lr_discriminator, config_.beta1, config_.beta2});
}

std::vector<Param*> Trainer::generator_parameters() {
  std::vector<Param*> out = model_.parameters(Component::extractor);
  append(out, model_.parameters(Component::decoder));
  append(out, model_.parameters(Component::classifier));
  return out;
}

std::vector<Param*> Trainer::discriminator_parameters() {
  std::vector<Param*> out;
  for (Param* p : model_.parameters(Component::discriminators)) {
    // only the configured levels take part in training
    for (int level : config_.discriminator_levels) {
      if (p->name.rfind("discriminator.level" + std::to_string(level) + ".", 0) == 0) {
        out.push_back(p);
        break;
      }
    }
  }
  return out;
}

StepBatch Trainer::make_batch(long step) const {
  Rng rng = make_rng(derive_seed(config_.seed, kBatchStream), static_cast<std::uint64_t>(step));
  StepBatch b;
  b.batch = sample_triplet_batch(train_, config_.identities_per_batch, config_.images_per_identity, rng, true);
  b.hr_count = static_cast<int>(b.batch.records.size());
  b.has_lr = config_.train_on_lr;
  std::vector<const Image*> hr;
  for (const auto& r : b.batch.records) {
    hr.push_back(&r.hr_pixels);
    b.labels.push_back(r.identity);
    b.labeled.push_back(r.labeled ? 1 : 0);
  }
  b.hr_targets = images_to_tensor(hr);
  if (!b.has_lr) {
    b.inputs = b.hr_targets;
    return b;
  }
  std::vector<Image> lr;
  lr.reserve(hr.size());
  std::uniform_int_distribution<std::size_t> pick(0, lr_rates_.size() - 1);
  for (const Image* img : hr) {
    const int r = lr_rates_[pick(rng)];
    b.lr_rates.push_back(r);
    lr.push_back(downsample_upsample(*img, r));
  }
  std::vector<const Image*> lr_ptr;
  for (const auto& img : lr) lr_ptr.push_back(&img);
  b.inputs = Tensor::concat(b.hr_targets, images_to_tensor(lr_ptr));
  return b;
}

FeaturePyramid Trainer::forward(const StepBatch& batch) { return model_.extractor().forward(batch.inputs); }

std::map<int, double> Trainer::discriminator_gradients(const StepBatch& batch, const FeaturePyramid& features) {
  std::map<int, double> seen;
  auto params = discriminator_parameters();
  zero_grads(params);
  if (!config_.adversarial_active() || !batch.has_lr) return seen;
  const int b = batch.hr_count;
  for (int level : config_.discriminator_levels) {
    Discriminator& d = model_.discriminator(level);
    const Vector z = d.forward(features.maps[level - 1]);
    const auto adv = adversarial_from_logits(z.head(b), z.tail(b));
    seen[level] = adv.value;
    // ascent on the adversarial loss = descent on its negation
    Vector dz(2 * b);
    dz.head(b) = -config_.weights.adv * adv.grad_hr;
    dz.tail(b) = -config_.weights.adv * adv.grad_lr;
    d.backward(dz, GradMode{true, false});
  }
  return seen;
}

std::map<int, double> Trainer::update_discriminators(const StepBatch& batch, const FeaturePyramid& features) {
  std::map<int, double> seen;
  if (!config_.adversarial_active() || !batch.has_lr) return seen;
  auto params = discriminator_parameters();
  for (int k = 0; k < config_.discriminator_steps; ++k) {
    seen = discriminator_gradients(batch, features);
    for (const auto& [level, v] : seen)
      if (!std::isfinite(v)) throw TrainingAborted("non-finite adversarial loss at level " + std::to_string(level), step_);
    if (!all_finite(params)) throw TrainingAborted("non-finite discriminator gradient", step_);
    clip_grad_norm(params, config_.clip_norm);
    disc_opt_.step(params);
  }
  return seen;
}

LossBundle Trainer::generator_gradients(const StepBatch& batch, const FeaturePyramid& features) {
  const int b = batch.hr_count;
  const int n = batch.inputs.n();
  const int levels = static_cast<int>(features.maps.size());
  const int dim = static_cast<int>(features.embedding.cols());
  auto params = generator_parameters();
  zero_grads(params);

  std::vector<Tensor> map_grads(levels);
  Matrix emb_grad = Matrix::Zero(n, dim);
  bool emb_touched = false;

  std::map<int, double> adv, adv_gen;
  if (config_.adversarial_active() && batch.has_lr) {
    for (int level : config_.discriminator_levels) {
      Discriminator& d = model_.discriminator(level);
      const Vector z = d.forward(features.maps[level - 1]);
      adv[level] = adversarial_from_logits(z.head(b), z.tail(b)).value;
      const auto obj = extractor_adversarial_objective(z.head(b), z.tail(b), config_.adv_update);
      adv_gen[level] = obj.value;
      Vector dz(2 * b);
      dz.head(b) = config_.weights.adv * obj.grad_hr;
      dz.tail(b) = config_.weights.adv * obj.grad_lr;
      Tensor g = d.backward(dz, GradMode{false, true});
      if (map_grads[level - 1].n() == 0) map_grads[level - 1] = std::move(g);
      else map_grads[level - 1] += g;
    }
  }

  double rec = 0.0;
  if (config_.losses.rec) {
    const Tensor recon = model_.decoder().forward(features.maps.back());
    const std::size_t per = batch.hr_targets.size();
    std::span<const double> all(recon.data(), recon.size());
    std::span<const double> target(batch.hr_targets.data(), per);
    const auto rg = batch.has_lr ? reconstruction_loss_grad(all.first(per), target, all.subspan(per), target)
                                 : reconstruction_loss_grad(all, target, {}, {});
    rec = rg.value;
    Tensor grad(recon.n(), recon.c(), recon.h(), recon.w());
    for (std::size_t i = 0; i < rg.grad_hr.size(); ++i) grad.data()[i] = config_.weights.rec * rg.grad_hr[i];
    for (std::size_t i = 0; i < rg.grad_lr.size(); ++i) grad.data()[per + i] = config_.weights.rec * rg.grad_lr[i];
    Tensor g = model_.decoder().backward(grad, GradMode{true, true});
    if (map_grads.back().n() == 0) map_grads.back() = std::move(g);
    else map_grads.back() += g;
  }

  const std::span<const int> labels(batch.labels);
  const std::span<const char> mask(batch.labeled);
  double cls = 0.0;
  if (config_.losses.cls) {
    const Matrix logits = model_.classifier().forward(features.embedding);
    const auto ce_hr = softmax_cross_entropy(logits.topRows(b), labels, mask);
    Matrix grad = Matrix::Zero(n, logits.cols());
    grad.topRows(b) = ce_hr.grad;
    cls = ce_hr.value;
    if (batch.has_lr) {
      const auto ce_lr = softmax_cross_entropy(logits.bottomRows(b), labels, mask);
      grad.bottomRows(b) = ce_lr.grad;
      cls += ce_lr.value;
    }
    grad *= config_.weights.cls;
    emb_grad += model_.classifier().backward(grad, GradMode{true, true});
    emb_touched = true;
  }

  double tri = 0.0;
  if (config_.losses.tri) {
    auto stream = [&](const Matrix& e) {
      return config_.mining == TripletMining::batch_hard
                 ? batch_hard_triplet_loss(e, labels, mask, config_.margin)
                 : batch_triplet_loss(e, batch.batch.triplets, config_.margin);
    };
    const auto t_hr = stream(features.embedding.topRows(b));
    tri = t_hr.value;
    emb_grad.topRows(b) += config_.weights.tri * t_hr.grad;
    if (batch.has_lr) {
      const auto t_lr = stream(features.embedding.bottomRows(b));
      tri += t_lr.value;
      emb_grad.bottomRows(b) += config_.weights.tri * t_lr.grad;
    }
    emb_touched = true;
  }

  LossBundle bundle = total_loss(adv, rec, cls, tri, config_.margin, config_.weights, &adv_gen);
  if (!std::isfinite(bundle.total) || !std::isfinite(bundle.generator_objective)) {
    throw TrainingAborted("non-finite loss (adv " + std::to_string(bundle.adv_sum) + ", rec " + std::to_string(rec) +
                              ", cls " + std::to_string(cls) + ", tri " + std::to_string(tri) + ")",
                          step_);
  }

  model_.extractor().backward(map_grads, emb_touched ? emb_grad : Matrix(), true);
  return bundle;
}

LossBundle Trainer::update_generator(const StepBatch& batch, const FeaturePyramid& features) {
  LossBundle bundle = generator_gradients(batch, features);
  auto params = generator_parameters();
  if (!all_finite(params)) throw TrainingAborted("non-finite gradient", step_);
  clip_grad_norm(params, config_.clip_norm);
  gen_opt_.step(params);
  return bundle;
}

LossBundle Trainer::step() {
  const StepBatch batch = make_batch(step_);
  if (batch.labeled_count() == 0 && !config_.losses.rec && !config_.adversarial_active()) {
    throw ConfigError("train: step " + std::to_string(step_) +
                      " has no labeled records and only identity losses (cls/tri) are enabled");
  }
  const FeaturePyramid features = forward(batch);
  update_discriminators(batch, features);
  LossBundle bundle = update_generator(batch, features);
  ++step_;
  return bundle;
}

// ---------------------------------------------------------------- reports

Json metrics_record(long step, const LossBundle& b) {
  Json adv = Json::object();
  for (const auto& [level, v] : b.adv) adv[std::to_string(level)] = v;
  return Json{{"step", step},     {"adv", adv},   {"adv_sum", b.adv_sum}, {"rec", b.rec},
              {"cls", b.cls},     {"tri", b.tri}, {"total", b.total},     {"margin", b.margin},
              {"generator_objective", b.generator_objective}};
}

Json report_to_json(const EvalReport& r) {
  Json cmc = Json::object();
  for (const auto& [rank, v] : r.cmc) cmc[std::to_string(rank)] = v;
  return Json{{"schema", kEvalReportSchema},
              {"cmc", cmc},
              {"map", r.map},
              {"per_query_ranks", r.per_query_ranks},
              {"fingerprint", r.fingerprint},
              {"query_rates", r.query_rates},
              {"num_queries", r.num_queries},
              {"num_gallery", r.num_gallery}};
}

EvalReport report_from_json(const Json& j) {
  if (j.value("schema", std::string()) != kEvalReportSchema) {
    throw std::runtime_error("eval report: expected schema " + std::string(kEvalReportSchema));
  }
  EvalReport r;
  for (auto it = j.at("cmc").begin(); it != j.at("cmc").end(); ++it) r.cmc[std::stoi(it.key())] = it.value().get<double>();
  r.map = j.at("map").get<double>();
  r.per_query_ranks = j.at("per_query_ranks").get<std::vector<std::vector<int>>>();
  r.fingerprint = j.at("fingerprint").get<std::string>();
  r.query_rates = j.at("query_rates").get<std::set<int>>();
  r.num_queries = j.at("num_queries").get<int>();
  r.num_gallery = j.at("num_gallery").get<int>();
  return r;
}

namespace {

void write_json(const fs::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace

TrainResult train(const ModelConfig& model_config, const TrainConfig& config, const MlrDataset& dataset,
                  const TrainOptions& options) {
  config.validate();
  const long steps = total_steps(config, dataset.train.size());
  const Json experiment = options.experiment ? to_json(*options.experiment) : Json{{"train", to_json(config)}};
  const std::string fp = fingerprint(experiment);

  long start = 0;
  RainModel model(model_config, model_seed(config.seed));
  std::optional<LoadedCheckpoint> resumed;
  if (!options.resume_from.empty()) {
    resumed = load_checkpoint(options.resume_from, &model_config);
    if (!resumed->has_optimizer) throw std::runtime_error(options.resume_from + ": checkpoint has no optimizer state");
    assign_parameters(model, resumed->model);
    start = resumed->step;
  }
  Trainer trainer(std::move(model), config, dataset.train);
  if (resumed) {
    trainer.generator_optimizer().state() = resumed->generator.state();
    trainer.generator_optimizer().set_steps(resumed->generator.steps());
    trainer.discriminator_optimizer().state() = resumed->discriminator.state();
    trainer.discriminator_optimizer().set_steps(resumed->discriminator.steps());
    trainer.set_step_count(start);
  }

  std::ofstream metrics;
  fs::path out_dir;
  if (!options.out_dir.empty()) {
    out_dir = options.out_dir;
    fs::create_directories(out_dir / "eval");
    metrics.open(out_dir / "metrics.jsonl", resumed ? std::ios::app : std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write " + (out_dir / "metrics.jsonl").string());
  }
  auto checkpoint_meta = [&]() { return Json{{"experiment", experiment}, {"fingerprint", fp}, {"total_steps", steps}}; };

  TrainResult result;
  const long stop = options.stop_after >= 0 ? std::min(steps, options.stop_after) : steps;
  for (long s = start; s < stop; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    LossBundle b = trainer.step();
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.steps.push_back(s);
    result.history.losses.push_back(b);
    result.history.seconds.push_back(dt);
    if (metrics.is_open()) metrics << metrics_record(s, b).dump() << '\n';
    if (options.on_step) options.on_step(s, b);
    const bool last = s + 1 == steps;
    if (config.eval_every > 0 && (s + 1) % config.eval_every == 0 && !last && !dataset.query.empty()) {
      EvalReport r = evaluate(trainer.model(), dataset.query, dataset.gallery, options.ranks, options.normalize, fp);
      if (!out_dir.empty()) {
        std::ostringstream name;
        name << "step_" << std::setw(6) << std::setfill('0') << (s + 1) << ".json";
        write_json(out_dir / "eval" / name.str(), report_to_json(r));
      }
      result.history.evals.emplace_back(s + 1, std::move(r));
    }
  }
  result.steps_done = trainer.step_count();
  if (metrics.is_open()) metrics.flush();

  if (result.steps_done < steps) {
    // interrupted run: leave a resumable checkpoint, no final evaluation
    if (!out_dir.empty()) {
      save_checkpoint((out_dir / "checkpoint.latest").string(), trainer.model(), result.steps_done, checkpoint_meta(),
                      &trainer.generator_optimizer(), &trainer.discriminator_optimizer());
    }
    result.model = std::move(trainer.model());
    return result;
  }
  if (!dataset.query.empty()) {
    result.final_report = evaluate(trainer.model(), dataset.query, dataset.gallery, options.ranks, options.normalize, fp);
    result.history.evals.emplace_back(steps, result.final_report);
    if (!out_dir.empty()) write_json(out_dir / "eval" / "final.json", report_to_json(result.final_report));
  }
  if (!out_dir.empty()) {
    save_checkpoint((out_dir / "checkpoint.final").string(), trainer.model(), result.steps_done, checkpoint_meta(),
                    &trainer.generator_optimizer(), &trainer.discriminator_optimizer());
  }
  result.model = std::move(trainer.model());
  return result;
}

// ---------------------------------------------------------------- ablation

std::vector<std::pair<std::string, TrainConfig>> ablation_variants(const TrainConfig& base, int num_blocks,
                                                                   const std::vector<std::string>& names) {
  static const std::vector<std::string> all{"full",   "no_adv",       "no_rec",  "no_cls",
                                            "no_tri", "single_level", "hr_only", "hr_lr_no_adv",
                                            "rate_2", "rate_3",       "rate_4",  "rate_234"};
  std::vector<std::pair<std::string, TrainConfig>> out;
  for (const auto& name : names.empty() ? all : names) {
    TrainConfig c = base;
    if (name == "full") {
    } else if (name == "no_adv") {
      c.losses.adv = false;
    } else if (name == "no_rec") {
      c.losses.rec = false;
    } else if (name == "no_cls") {
      c.losses.cls = false;
    } else if (name == "no_tri") {
      c.losses.tri = false;
    } else if (name == "single_level") {
      c.discriminator_levels = {num_blocks};
    } else if (name == "hr_only") {
      c.train_on_lr = false;
      c.losses.adv = false;
    } else if (name == "hr_lr_no_adv") {
      c.train_on_lr = true;
      c.losses.adv = false;
    } else if (name == "rate_2") {
      c.rates = {2};
    } else if (name == "rate_3") {
      c.rates = {3};
    } else if (name == "rate_4") {
      c.rates = {4};
    } else if (name == "rate_234") {
      c.rates = {2, 3, 4};
    } else {
      throw ConfigError("ablation: unknown variant \"" + name + "\"");
    }
    out.emplace_back(name, c);
  }
  return out;
}

std::pair<std::vector<ImageRecord>, std::vector<ImageRecord>> probe_pairs(const MlrDataset& dataset,
                                                                          const std::set<int>& rates,
                                                                          std::uint64_t seed) {
  if (rates.empty()) throw std::invalid_argument("probe_pairs: empty rate set");
  std::vector<int> r(rates.begin(), rates.end());
  Rng rng(derive_seed(seed, 0x9a1e));
  std::uniform_int_distribution<std::size_t> pick(0, r.size() - 1);
  std::vector<ImageRecord> hr, lr;
  for (const auto& rec : dataset.test_hr) {
    hr.push_back(rec);
    ImageRecord twin = rec;
    twin.rate = r[pick(rng)];
    twin.pixels = downsample_upsample(rec.hr_pixels, twin.rate);
    lr.push_back(std::move(twin));
  }
  return {std::move(hr), std::move(lr)};
}

std::vector<AblationRow> run_ablation_suite(const ModelConfig& model_config, const TrainConfig& base,
                                            const MlrDataset& dataset, const std::vector<std::string>& names,
                                            int workers, std::span<const int> ranks, bool normalize) {
  const auto variants = ablation_variants(base, model_config.num_blocks(), names);
  const std::vector<int> rank_list_v =
      ranks.empty() ? std::vector<int>{1, 5, 10, 20} : std::vector<int>(ranks.begin(), ranks.end());

  // unique configurations, trained once each
  std::vector<TrainConfig> unique;
  std::vector<std::size_t> slot(variants.size());
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const auto it = std::find(unique.begin(), unique.end(), variants[i].second);
    slot[i] = static_cast<std::size_t>(it - unique.begin());
    if (it == unique.end()) unique.push_back(variants[i].second);
  }

  const auto pairs = probe_pairs(dataset, dataset.rates_used.empty() ? base.rates : dataset.rates_used,
                                 derive_seed(base.seed, 0x9b0e));
  std::vector<std::pair<EvalReport, ProbeResult>> results(unique.size());
  std::vector<std::exception_ptr> errors(unique.size());
  auto run_one = [&](std::size_t k) {
    try {
      ModelConfig mc = model_config;
      mc.discriminator_levels = unique[k].discriminator_levels;
      TrainOptions opts;
      opts.ranks = rank_list_v;
      opts.normalize = normalize;
      TrainConfig c = unique[k];
      c.eval_every = 0;
      auto res = train(mc, c, dataset, opts);
      results[k].first = res.final_report;
      results[k].second = invariance_probe(res.model, pairs.first, pairs.second, base.seed, normalize);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  const int n_workers = std::max(1, std::min<int>(workers, static_cast<int>(unique.size())));
  if (n_workers == 1) {
    for (std::size_t k = 0; k < unique.size(); ++k) run_one(k);
  } else {
    std::mutex mu;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) {
      pool.emplace_back([&]() {
        while (true) {
          std::size_t k;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next >= unique.size()) return;
            k = next++;
          }
          run_one(k);
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    rows.push_back(AblationRow{variants[i].first, variants[i].second, results[slot[i]].first, results[slot[i]].second});
  }
  return rows;
}

}  // namespace rain
