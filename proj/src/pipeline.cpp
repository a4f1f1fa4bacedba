#include "rain/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

namespace rain {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}

template <class F>
void parallel_for(std::size_t n, int workers, F&& body) {
  std::vector<std::exception_ptr> errors(n);
  auto guarded = [&](std::size_t k) {
    try {
      body(k);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  const int w = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (w == 1) {
    for (std::size_t k = 0; k < n; ++k) guarded(k);
  } else {
    std::mutex mu;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (int t = 0; t < w; ++t) {
      pool.emplace_back([&]() {
        for (;;) {
          std::size_t k;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next >= n) return;
            k = next++;
          }
          guarded(k);
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

ModelConfig model_config_for(const ExperimentSpec& spec, const MlrDataset& dataset) {
  const auto& probe = dataset.train.empty() ? dataset.gallery : dataset.train;
  if (probe.empty()) throw ConfigError("dataset: no records");
  ModelConfig mc = resolve_model_config(spec, probe.front().pixels.height, probe.front().pixels.width,
                                        dataset.num_identities);
  try {
    mc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return mc;
}

std::vector<SemiRow> semi_sweep(const ModelConfig& model_config, const TrainConfig& base, const MlrDataset& dataset,
                                const std::vector<double>& fractions, int workers) {
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] >= 0.0 && fractions[i] <= 1.0)) {
      throw ConfigError("semi_fractions[" + std::to_string(i) + "]: must lie in [0, 1]");
    }
  }
  std::vector<SemiRow> rows(fractions.size());
  parallel_for(fractions.size(), workers, [&](std::size_t k) {
    TrainConfig c = base;
    c.labeled_fraction = fractions[k];
    c.eval_every = 0;
    bool zero = true;
    TrainOptions opts;
    opts.on_step = [&zero](long, const LossBundle& b) { zero = zero && b.cls == 0.0 && b.tri == 0.0; };
    const auto res = train(model_config, c, dataset, opts);
    rows[k] = SemiRow{fractions[k], res.final_report.cmc.count(1) ? res.final_report.cmc.at(1) : 0.0,
                      res.final_report.map, zero};
  });
  return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  auto out = open_out(path);
  out << "variant,rank1,rank5,rank10,rank20,map,probe_accuracy,mean_pair_distance\n";
  for (const auto& r : rows) {
    auto at = [&](int k) { return r.report.cmc.count(k) ? num(r.report.cmc.at(k)) : std::string(); };
    out << r.name << ',' << at(1) << ',' << at(5) << ',' << at(10) << ',' << at(20) << ',' << num(r.report.map) << ','
        << num(r.probe.probe_accuracy) << ',' << num(r.probe.mean_pair_distance) << '\n';
  }
}

void write_semi_csv(const std::string& path, const std::vector<SemiRow>& rows) {
  auto out = open_out(path);
  out << "fraction,rank1,map\n";
  for (const auto& r : rows) out << num(r.fraction) << ',' << num(r.rank1) << ',' << num(r.map) << '\n';
}

void write_loss_csv(const std::string& path, const TrainHistory& history) {
  auto out = open_out(path);
  out << "step,adv_sum,rec,cls,tri,total\n";
  for (std::size_t i = 0; i < history.steps.size(); ++i) {
    const auto& b = history.losses[i];
    out << history.steps[i] << ',' << num(b.adv_sum) << ',' << num(b.rec) << ',' << num(b.cls) << ',' << num(b.tri)
        << ',' << num(b.total) << '\n';
  }
}

void write_cmc_csv(const std::string& path, const EvalReport& report) {
  auto out = open_out(path);
  out << "rank,cmc\n";
  for (const auto& [k, v] : report.cmc) out << k << ',' << num(v) << '\n';
}

Json run_experiment(const ExperimentSpec& spec_in, const RunOptions& options) {
  ExperimentSpec spec = spec_in;
  if (options.seed) spec.train.seed = *options.seed;
  auto say = [&](const std::string& s) {
    if (!options.quiet) std::cerr << "[" << spec.name << "] " << s << '\n';
  };

  const MlrDataset dataset = build_dataset(spec.dataset);
  const ModelConfig mc = model_config_for(spec, dataset);
  say("dataset: " + std::to_string(dataset.train.size()) + " train, " + std::to_string(dataset.query.size()) +
      " query, " + std::to_string(dataset.gallery.size()) + " gallery");

  const fs::path out_dir = options.out_dir;
  if (!options.out_dir.empty()) fs::create_directories(out_dir);

  TrainOptions topts;
  topts.out_dir = options.out_dir;
  topts.experiment = &spec;
  topts.ranks = spec.eval.ranks;
  topts.normalize = spec.eval.normalize;
  const TrainResult res = train(mc, spec.train, dataset, topts);
  say("trained " + std::to_string(res.steps_done) + " steps, rank-1 " +
      num(res.final_report.cmc.count(1) ? res.final_report.cmc.at(1) : 0.0));

  Json report{{"schema", kRunReportSchema},
              {"name", spec.name},
              {"fingerprint", fingerprint(to_json(spec))},
              {"experiment", to_json(spec)},
              {"dataset",
               {{"train", dataset.train.size()},
                {"query", dataset.query.size()},
                {"gallery", dataset.gallery.size()},
                {"num_identities", dataset.num_identities},
                {"rates_used", dataset.rates_used}}},
              {"steps", res.steps_done},
              {"final", report_to_json(res.final_report)}};

  Json unseen = Json::object();
  for (int r : spec.eval.probe_rates) {
    const EvalReport u = unseen_resolution_eval(res.model, dataset.test_hr, spec.train.rates, r, spec.dataset.seed,
                                                spec.eval.ranks, spec.eval.normalize);
    unseen[std::to_string(r)] = report_to_json(u);
  }
  report["unseen"] = unseen;

  if (spec.eval.invariance_probe && !dataset.test_hr.empty()) {
    const auto pairs = probe_pairs(dataset, dataset.rates_used, derive_seed(spec.train.seed, 0x9b0e));
    const ProbeResult p = invariance_probe(res.model, pairs.first, pairs.second, spec.train.seed, spec.eval.normalize);
    report["invariance"] = {{"mean_pair_distance", p.mean_pair_distance}, {"probe_accuracy", p.probe_accuracy}};
  }

  if (!spec.ablation.empty()) {
    say("ablation suite: " + std::to_string(spec.ablation.size()) + " variants");
    const auto rows = run_ablation_suite(mc, spec.train, dataset, spec.ablation, options.workers, spec.eval.ranks,
                                         spec.eval.normalize);
    Json table = Json::array();
    for (const auto& r : rows) {
      table.push_back({{"variant", r.name},
                       {"report", report_to_json(r.report)},
                       {"probe_accuracy", r.probe.probe_accuracy},
                       {"mean_pair_distance", r.probe.mean_pair_distance}});
    }
    report["ablation"] = table;
    if (!options.out_dir.empty()) write_ablation_csv((out_dir / "ablation.csv").string(), rows);
  }

  if (!spec.eval.semi_fractions.empty()) {
    say("semi-supervised sweep: " + std::to_string(spec.eval.semi_fractions.size()) + " fractions");
    const auto rows = semi_sweep(mc, spec.train, dataset, spec.eval.semi_fractions, options.workers);
    Json table = Json::array();
    for (const auto& r : rows) {
      table.push_back({{"fraction", r.fraction}, {"rank1", r.rank1}, {"map", r.map},
                       {"identity_losses_zero", r.identity_losses_zero}});
    }
    report["semi"] = table;
    if (!options.out_dir.empty()) write_semi_csv((out_dir / "semi.csv").string(), rows);
  }

  if (!options.out_dir.empty()) {
    write_loss_csv((out_dir / "loss_curve.csv").string(), res.history);
    write_cmc_csv((out_dir / "cmc.csv").string(), res.final_report);
    auto out = open_out((out_dir / "report.json").string());
    out << report.dump(2) << '\n';
  }
  return report;
}

}  // namespace rain
