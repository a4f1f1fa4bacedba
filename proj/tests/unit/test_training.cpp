#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "rain/checkpoint.hpp"
#include "rain/training.hpp"

using namespace rain;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model(int k) {
  ModelConfig c;
  c.input_height = 16;
  c.input_width = 16;
  c.channels = {4, 6};
  c.decoder_channels = {3, 3};
  c.discriminator_width = 4;
  c.discriminator_levels = {1, 2};
  c.num_identities = k;
  return c;
}

const MlrDataset& tiny_dataset() {
  static const MlrDataset ds = build_mlr_dataset(make_toy_corpus(8, 6, 16, 5), 5, {2, 3}, CameraPolicy{}, 5);
  return ds;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.steps = 6;
  t.identities_per_batch = 2;
  t.images_per_identity = 2;
  t.lr = 1e-3;
  t.lr_discriminator = 1e-3;
  t.rates = {2, 3};
  t.seed = 3;
  return t;
}

std::vector<AlignedVector> values_of(const std::vector<Param*>& ps) {
  std::vector<AlignedVector> out;
  for (const Param* p : ps) out.push_back(p->value);
  return out;
}

std::vector<double> grads_of(const std::vector<Param*>& ps) {
  std::vector<double> out;
  for (const Param* p : ps) out.insert(out.end(), p->grad.begin(), p->grad.end());
  return out;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rain_unit_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("batches are pure functions of the step and pair LR twins with HR rows") {
  const auto& ds = tiny_dataset();
  Trainer trainer(RainModel(tiny_model(ds.num_identities), 1), tiny_train(), ds.train);
  const StepBatch a = trainer.make_batch(4);
  const StepBatch b = trainer.make_batch(4);
  CHECK(a.inputs == b.inputs);
  CHECK(a.lr_rates == b.lr_rates);
  CHECK_FALSE(trainer.make_batch(5).inputs == a.inputs);
  REQUIRE(a.has_lr);
  CHECK(a.hr_count == 4);
  CHECK(a.inputs.n() == 8);
  for (int i = 0; i < a.hr_count; ++i) {
    CHECK(std::set<int>{2, 3}.count(a.lr_rates[i]) == 1);
    const Image hr = tensor_to_image(a.inputs, i);
    CHECK(tensor_to_image(a.inputs, a.hr_count + i) == downsample_upsample(hr, a.lr_rates[i]));
    CHECK(tensor_to_image(a.hr_targets, i) == hr);
  }

  TrainConfig hr_only = tiny_train();
  hr_only.train_on_lr = false;
  hr_only.losses.adv = false;
  Trainer t2(RainModel(tiny_model(ds.num_identities), 1), hr_only, ds.train);
  const StepBatch c = t2.make_batch(0);
  CHECK_FALSE(c.has_lr);
  CHECK(c.inputs.n() == c.hr_count);
}

TEST_CASE("sub-updates touch disjoint parameter sets") {
  const auto& ds = tiny_dataset();
  Trainer trainer(RainModel(tiny_model(ds.num_identities), 2), tiny_train(), ds.train);
  const auto gen = trainer.generator_parameters();
  const auto disc = trainer.discriminator_parameters();
  for (long s = 0; s < 5; ++s) {
    const StepBatch batch = trainer.make_batch(s);
    const FeaturePyramid f = trainer.forward(batch);
    const auto gen_before = values_of(gen);
    const auto disc_before = values_of(disc);
    trainer.update_discriminators(batch, f);
    CHECK(values_of(gen) == gen_before);
    CHECK_FALSE(values_of(disc) == disc_before);
    const auto disc_mid = values_of(disc);
    trainer.update_generator(batch, f);
    CHECK(values_of(disc) == disc_mid);
    CHECK_FALSE(values_of(gen) == gen_before);
    trainer.set_step_count(s + 1);
  }
}

TEST_CASE("generator gradient matches finite differences of the generator objective") {
  const auto& ds = tiny_dataset();
  for (AdvUpdate mode : {AdvUpdate::non_saturating, AdvUpdate::minimax}) {
    TrainConfig cfg = tiny_train();
    cfg.adv_update = mode;
    cfg.margin = 5.0;  // keep triplet hinges active
    RainModel model(tiny_model(ds.num_identities), 4);
    Rng rng(4);
    std::normal_distribution<double> n(0.0, 0.1);
    // random biases and classifier weights keep activations off their kinks
    for (Component c : {Component::decoder, Component::classifier, Component::discriminators})
      for (Param* p : model.parameters(c))
        if (p->trainable && (c == Component::classifier || p->name.find("bias") != std::string::npos))
          for (double& v : p->value) v = n(rng);
    Trainer trainer(std::move(model), cfg, ds.train);
    const StepBatch batch = trainer.make_batch(0);
    auto objective = [&]() {
      const FeaturePyramid f = trainer.forward(batch);
      return trainer.generator_gradients(batch, f).generator_objective;
    };
    const FeaturePyramid f = trainer.forward(batch);
    const LossBundle bundle = trainer.generator_gradients(batch, f);
    CHECK(bundle.cls > 0.0);
    CHECK(bundle.tri > 0.0);
    CHECK(bundle.rec > 0.0);
    const auto params = trainer.generator_parameters();
    const auto analytic = grads_of(params);
    std::vector<double> numeric;
    for (Param* p : params) {
      if (!p->trainable) {
        numeric.insert(numeric.end(), p->grad.size(), 0.0);
        continue;
      }
      for (double& v : p->value) numeric.push_back(test::central_difference(objective, v, 1e-5));
    }
    CHECK(test::rel_error(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("discriminator gradient matches finite differences of the negated adversarial loss") {
  const auto& ds = tiny_dataset();
  Trainer trainer(RainModel(tiny_model(ds.num_identities), 5), tiny_train(), ds.train);
  const StepBatch batch = trainer.make_batch(1);
  const FeaturePyramid f = trainer.forward(batch);
  auto objective = [&]() {
    double s = 0.0;
    for (const auto& [level, v] : trainer.discriminator_gradients(batch, f)) s -= v;
    return s;
  };
  trainer.discriminator_gradients(batch, f);
  const auto params = trainer.discriminator_parameters();
  const auto analytic = grads_of(params);
  std::vector<double> numeric;
  for (Param* p : params)
    for (double& v : p->value) numeric.push_back(test::central_difference(objective, v, 1e-5));
  CHECK(test::rel_error(analytic, numeric) < 1e-4);
}

TEST_CASE("unlabeled records contribute no identity-loss gradient") {
  const auto& ds = tiny_dataset();
  TrainConfig with_id = tiny_train();
  with_id.labeled_fraction = 0.0;
  TrainConfig rec_only = with_id;
  rec_only.losses = {false, true, false, false};
  with_id.losses = {false, true, true, true};
  Trainer a(RainModel(tiny_model(ds.num_identities), 6), with_id, ds.train);
  Trainer b(RainModel(tiny_model(ds.num_identities), 6), rec_only, ds.train);
  const StepBatch batch = a.make_batch(0);
  CHECK(batch.labeled_count() == 0);
  const LossBundle la = a.generator_gradients(batch, a.forward(batch));
  const LossBundle lb = b.generator_gradients(batch, b.forward(batch));
  CHECK(la.cls == 0.0);
  CHECK(la.tri == 0.0);
  CHECK(la.rec == lb.rec);
  CHECK(grads_of(a.generator_parameters()) == grads_of(b.generator_parameters()));
}

TEST_CASE("labeled fraction 0 reports zero identity losses at every step") {
  const auto& ds = tiny_dataset();
  TrainConfig cfg = tiny_train();
  cfg.labeled_fraction = 0.0;
  const auto res = train(tiny_model(ds.num_identities), cfg, ds);
  REQUIRE(res.history.losses.size() == 6);
  for (const auto& b : res.history.losses) {
    CHECK(b.cls == 0.0);
    CHECK(b.tri == 0.0);
    CHECK(b.rec > 0.0);
  }
}

TEST_CASE("partial labels mask exactly the flagged records") {
  const auto& ds = tiny_dataset();
  TrainConfig cfg = tiny_train();
  cfg.labeled_fraction = 0.5;
  Trainer trainer(RainModel(tiny_model(ds.num_identities), 7), cfg, ds.train);
  const auto labeled = std::count_if(trainer.train_records().begin(), trainer.train_records().end(),
                                     [](const ImageRecord& r) { return r.labeled; });
  CHECK(labeled == static_cast<long>(ds.train.size() / 2));
  const StepBatch batch = trainer.make_batch(0);
  for (int i = 0; i < batch.hr_count; ++i) {
    const auto& src = trainer.train_records()[batch.batch.source_index[i]];
    CHECK(static_cast<bool>(batch.labeled[i]) == src.labeled);
  }
}

TEST_CASE("configuration errors") {
  const auto& ds = tiny_dataset();
  TrainConfig cfg = tiny_train();
  cfg.labeled_fraction = 0.0;
  cfg.losses = {false, false, true, true};
  CHECK_THROWS_AS(Trainer(RainModel(tiny_model(ds.num_identities), 1), cfg, ds.train), ConfigError);

  cfg = tiny_train();
  cfg.losses = {false, false, false, false};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_train();
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_train();
  cfg.lr_discriminator = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_train();
  cfg.labeled_fraction = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  // discriminator level the model does not have
  cfg = tiny_train();
  cfg.discriminator_levels = {1, 2};
  ModelConfig mc = tiny_model(ds.num_identities);
  mc.discriminator_levels = {2};
  CHECK_THROWS_AS(Trainer(RainModel(mc, 1), cfg, ds.train), ConfigError);
}

TEST_CASE("all-unlabeled batch with only identity losses is a configuration error at step time") {
  const auto& ds = tiny_dataset();
  TrainConfig cfg = tiny_train();
  cfg.losses = {false, false, true, true};
  auto records = ds.train;
  for (auto& r : records) r.labeled = false;
  Trainer trainer(RainModel(tiny_model(ds.num_identities), 1), cfg, records);
  CHECK_THROWS_AS(trainer.step(), ConfigError);
}

TEST_CASE("non-finite loss aborts with the step recorded") {
  const auto& ds = tiny_dataset();
  RainModel model(tiny_model(ds.num_identities), 8);
  Trainer trainer(std::move(model), tiny_train(), ds.train);
  trainer.step();
  trainer.step();
  trainer.model().parameters(Component::decoder).front()->value[0] = std::nan("");
  const auto disc_before = values_of(trainer.discriminator_parameters());
  try {
    trainer.step();
    FAIL("expected TrainingAborted");
  } catch (const TrainingAborted& e) {
    CHECK(e.step() == 2);
  }
  CHECK(trainer.step_count() == 2);
  // the generator update never applied; nothing downstream of it is NaN
  for (const Param* p : trainer.generator_parameters())
    for (std::size_t i = 0; i < p->value.size(); ++i)
      if (!(p == trainer.model().parameters(Component::decoder).front() && i == 0)) CHECK(std::isfinite(p->value[i]));
  (void)disc_before;
}

TEST_CASE("training is deterministic") {
  const auto& ds = tiny_dataset();
  const auto a = train(tiny_model(ds.num_identities), tiny_train(), ds);
  const auto b = train(tiny_model(ds.num_identities), tiny_train(), ds);
  CHECK(a.history.losses == b.history.losses);
  CHECK(a.final_report == b.final_report);
  std::vector<double> va, vb;
  for (const Param* p : a.model.all_parameters()) va.insert(va.end(), p->value.begin(), p->value.end());
  for (const Param* p : b.model.all_parameters()) vb.insert(vb.end(), p->value.begin(), p->value.end());
  CHECK(va == vb);
  for (const auto& l : a.history.losses) CHECK(std::isfinite(l.total));
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run") {
  const auto& ds = tiny_dataset();
  const auto mc = tiny_model(ds.num_identities);
  const fs::path full_dir = scratch_dir("full"), part_dir = scratch_dir("part");
  TrainOptions full_opts;
  full_opts.out_dir = full_dir.string();
  const auto full = train(mc, tiny_train(), ds, full_opts);

  TrainOptions first;
  first.out_dir = part_dir.string();
  first.stop_after = 3;
  const auto part = train(mc, tiny_train(), ds, first);
  CHECK(part.steps_done == 3);
  REQUIRE(fs::exists(part_dir / "checkpoint.latest"));
  CHECK_FALSE(fs::exists(part_dir / "checkpoint.final"));

  TrainOptions second;
  second.out_dir = part_dir.string();
  second.resume_from = (part_dir / "checkpoint.latest").string();
  const auto resumed = train(mc, tiny_train(), ds, second);
  CHECK(resumed.steps_done == 6);
  CHECK(resumed.final_report == full.final_report);

  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(full_dir / "metrics.jsonl") == slurp(part_dir / "metrics.jsonl"));
  CHECK(slurp(full_dir / "eval" / "final.json") == slurp(part_dir / "eval" / "final.json"));
  const auto a = load_checkpoint((full_dir / "checkpoint.final").string());
  const auto b = load_checkpoint((part_dir / "checkpoint.final").string());
  std::vector<double> va, vb;
  for (const Param* p : a.model.all_parameters()) va.insert(va.end(), p->value.begin(), p->value.end());
  for (const Param* p : b.model.all_parameters()) vb.insert(vb.end(), p->value.begin(), p->value.end());
  CHECK(va == vb);
  fs::remove_all(full_dir);
  fs::remove_all(part_dir);
}

TEST_CASE("run outputs") {
  const auto& ds = tiny_dataset();
  const fs::path dir = scratch_dir("outputs");
  TrainConfig cfg = tiny_train();
  cfg.eval_every = 2;
  TrainOptions opts;
  opts.out_dir = dir.string();
  const auto res = train(tiny_model(ds.num_identities), cfg, ds, opts);
  CHECK(fs::exists(dir / "checkpoint.final"));
  CHECK(fs::exists(dir / "eval" / "step_000002.json"));
  CHECK(fs::exists(dir / "eval" / "step_000004.json"));
  CHECK(fs::exists(dir / "eval" / "final.json"));
  REQUIRE(res.history.evals.size() == 3);
  CHECK(res.history.evals.back().first == 6);
  for (std::size_t i = 1; i < res.history.steps.size(); ++i) CHECK(res.history.steps[i] > res.history.steps[i - 1]);

  std::ifstream in(dir / "metrics.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const Json j = Json::parse(line);
    CHECK(j.at("step").get<int>() == n);
    CHECK(j.contains("adv"));
    CHECK(j.contains("rec"));
    CHECK(j.contains("cls"));
    CHECK(j.contains("tri"));
    CHECK(j.contains("total"));
    ++n;
  }
  CHECK(n == 6);
  CHECK(report_from_json(report_to_json(res.final_report)) == res.final_report);
  fs::remove_all(dir);
}

TEST_CASE("step count from epochs") {
  TrainConfig c;
  c.steps = 0;
  c.epochs = 3;
  c.identities_per_batch = 4;
  c.images_per_identity = 4;
  CHECK(total_steps(c, 160) == 30);
  CHECK(total_steps(c, 161) == 33);
  c.steps = 7;
  CHECK(total_steps(c, 160) == 7);
}

TEST_CASE("ablation variants") {
  TrainConfig base;
  const auto all = ablation_variants(base, 2);
  REQUIRE(all.size() == 12);
  std::map<std::string, TrainConfig> by;
  for (const auto& [n, c] : all) by[n] = c;
  CHECK(by.at("full") == base);
  CHECK_FALSE(by.at("no_adv").losses.adv);
  CHECK(by.at("no_adv").train_on_lr);
  CHECK_FALSE(by.at("no_rec").losses.rec);
  CHECK_FALSE(by.at("no_cls").losses.cls);
  CHECK_FALSE(by.at("no_tri").losses.tri);
  CHECK(by.at("single_level").discriminator_levels == std::set<int>{2});
  CHECK_FALSE(by.at("hr_only").train_on_lr);
  CHECK_FALSE(by.at("hr_only").losses.adv);
  CHECK(by.at("hr_lr_no_adv").train_on_lr);
  CHECK_FALSE(by.at("hr_lr_no_adv").losses.adv);
  CHECK(by.at("rate_2").rates == std::set<int>{2});
  CHECK(by.at("rate_3").rates == std::set<int>{3});
  CHECK(by.at("rate_4").rates == std::set<int>{4});
  CHECK(by.at("rate_234").rates == std::set<int>{2, 3, 4});
  CHECK_THROWS_AS(ablation_variants(base, 2, {"no_such"}), ConfigError);
}

TEST_CASE("ablation suite rows are aligned and independent of worker count") {
  const auto& ds = tiny_dataset();
  TrainConfig cfg = tiny_train();
  cfg.steps = 2;
  const std::vector<std::string> names{"full", "no_adv", "hr_lr_no_adv", "no_rec"};
  const auto one = run_ablation_suite(tiny_model(ds.num_identities), cfg, ds, names, 1);
  const auto two = run_ablation_suite(tiny_model(ds.num_identities), cfg, ds, names, 2);
  REQUIRE(one.size() == 4);
  for (std::size_t i = 0; i < one.size(); ++i) {
    CHECK(one[i].name == names[i]);
    CHECK(one[i].report == two[i].report);
    CHECK(one[i].probe.probe_accuracy == two[i].probe.probe_accuracy);
    CHECK(one[i].report.cmc.size() == 4);
  }
  // identical configurations train once and report identically
  CHECK(one[1].report == one[2].report);
}
