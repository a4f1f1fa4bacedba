// Command-line entry point: rain <command> <spec> [options]
//
// Exit codes: 0 success, 1 runtime abort, 2 validation failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "rain/checkpoint.hpp"
#include "rain/config.hpp"
#include "rain/eval.hpp"
#include "rain/io.hpp"
#include "rain/pipeline.hpp"
#include "rain/training.hpp"

namespace fs = std::filesystem;
using namespace rain;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out;
  int workers = 1;
  bool deterministic = false;
  bool quiet = false;
};

ExperimentSpec load(const std::string& path, const Globals& g) {
  ExperimentSpec spec = load_experiment(path);
  if (g.seed) spec.train.seed = *g.seed;
  return spec;
}

int workers(const Globals& g) { return g.deterministic ? 1 : std::max(1, g.workers); }

fs::path out_dir(const Globals& g, const ExperimentSpec& spec, const std::string& leaf = {}) {
  fs::path p = g.out.empty() ? fs::path("runs") / spec.name : fs::path(g.out);
  if (!leaf.empty()) p /= leaf;
  fs::create_directories(p);
  return p;
}

void write_json(const fs::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void log(const Globals& g, const std::string& s) {
  if (!g.quiet) std::cerr << s << '\n';
}

std::string pct(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

int cmd_synth(const std::string& spec_path, const Globals& g) {
  const ExperimentSpec spec = load(spec_path, g);
  const MlrDataset ds = build_dataset(spec.dataset);
  const fs::path dir = out_dir(g, spec, "dataset");
  const std::string manifest = write_dataset(dir.string(), ds);
  log(g, "wrote " + std::to_string(ds.train.size() + ds.query.size() + ds.gallery.size()) + " images");
  std::cout << manifest << '\n';
  return 0;
}

int cmd_train(const std::string& spec_path, const Globals& g, const std::string& resume, long stop_after) {
  const ExperimentSpec spec = load(spec_path, g);
  const MlrDataset ds = build_dataset(spec.dataset);
  const ModelConfig mc = model_config_for(spec, ds);
  const fs::path dir = out_dir(g, spec);
  TrainOptions opts;
  opts.out_dir = dir.string();
  opts.experiment = &spec;
  opts.ranks = spec.eval.ranks;
  opts.normalize = spec.eval.normalize;
  opts.resume_from = resume;
  opts.stop_after = stop_after;
  if (!g.quiet) {
    const long total = total_steps(spec.train, ds.train.size());
    opts.on_step = [total](long step, const LossBundle& b) {
      if (step % 50 == 0 || step == total) std::cerr << "step " << step << "/" << total << " total " << b.total << '\n';
    };
  }
  const TrainResult res = train(mc, spec.train, ds, opts);
  write_loss_csv((dir / "loss_curve.csv").string(), res.history);
  if (!res.final_report.cmc.empty()) {
    write_cmc_csv((dir / "cmc.csv").string(), res.final_report);
    std::cout << "rank1 " << pct(res.final_report.cmc.begin()->second) << " map " << pct(res.final_report.map) << '\n';
  } else {
    std::cout << "stopped at step " << res.steps_done << '\n';
  }
  return 0;
}

int cmd_eval(const std::string& spec_path, const Globals& g, const std::string& checkpoint) {
  const ExperimentSpec spec = load(spec_path, g);
  const MlrDataset ds = build_dataset(spec.dataset);
  const ModelConfig mc = model_config_for(spec, ds);
  const LoadedCheckpoint ck = load_checkpoint(checkpoint, &mc);
  const EvalReport rep = evaluate(ck.model, ds.query, ds.gallery, spec.eval.ranks, spec.eval.normalize);
  Json j{{"schema", kRunReportSchema}, {"name", spec.name}, {"checkpoint_step", ck.step}, {"final", report_to_json(rep)}};
  Json unseen = Json::object();
  for (int r : spec.eval.probe_rates) {
    unseen[std::to_string(r)] = report_to_json(unseen_resolution_eval(ck.model, ds.test_hr, spec.train.rates, r,
                                                                      spec.dataset.seed, spec.eval.ranks,
                                                                      spec.eval.normalize));
  }
  j["unseen"] = unseen;
  if (spec.eval.invariance_probe && !ds.test_hr.empty()) {
    const auto pairs = probe_pairs(ds, ds.rates_used, derive_seed(spec.train.seed, 0x9b0e));
    const ProbeResult p = invariance_probe(ck.model, pairs.first, pairs.second, spec.train.seed, spec.eval.normalize);
    j["invariance"] = {{"mean_pair_distance", p.mean_pair_distance}, {"probe_accuracy", p.probe_accuracy}};
  }
  const fs::path dir = out_dir(g, spec);
  write_json(dir / "eval.json", j);
  write_cmc_csv((dir / "eval_cmc.csv").string(), rep);
  std::cout << "rank1 " << pct(rep.cmc.begin()->second) << " map " << pct(rep.map) << '\n';
  return 0;
}

int cmd_ablate(const std::string& spec_path, const Globals& g, std::vector<std::string> variants) {
  const ExperimentSpec spec = load(spec_path, g);
  if (variants.empty()) variants = spec.ablation;
  const MlrDataset ds = build_dataset(spec.dataset);
  const ModelConfig mc = model_config_for(spec, ds);
  log(g, "training " + (variants.empty() ? std::string("all") : std::to_string(variants.size())) + " variants");
  const auto rows = run_ablation_suite(mc, spec.train, ds, variants, workers(g), spec.eval.ranks, spec.eval.normalize);
  const fs::path dir = out_dir(g, spec);
  write_ablation_csv((dir / "ablation.csv").string(), rows);
  for (const auto& r : rows) std::cout << r.name << " rank1 " << pct(r.report.cmc.begin()->second) << '\n';
  return 0;
}

int cmd_semi(const std::string& spec_path, const Globals& g, std::vector<double> fractions) {
  const ExperimentSpec spec = load(spec_path, g);
  if (fractions.empty()) fractions = spec.eval.semi_fractions;
  if (fractions.empty()) fractions = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] >= 0.0 && fractions[i] <= 1.0))
      throw ConfigError("--fractions[" + std::to_string(i) + "]: must lie in [0, 1]");
  }
  const MlrDataset ds = build_dataset(spec.dataset);
  const ModelConfig mc = model_config_for(spec, ds);
  const auto rows = semi_sweep(mc, spec.train, ds, fractions, workers(g));
  const fs::path dir = out_dir(g, spec);
  write_semi_csv((dir / "semi.csv").string(), rows);
  for (const auto& r : rows) std::cout << r.fraction << " rank1 " << pct(r.rank1) << " map " << pct(r.map) << '\n';
  return 0;
}

int cmd_export(const std::string& spec_path, const Globals& g, const std::string& checkpoint,
               const std::string& split) {
  const ExperimentSpec spec = load(spec_path, g);
  const MlrDataset ds = build_dataset(spec.dataset);
  const ModelConfig mc = model_config_for(spec, ds);
  const LoadedCheckpoint ck = load_checkpoint(checkpoint, &mc);
  const std::vector<ImageRecord>& records =
      split == "train" ? ds.train : split == "query" ? ds.query : ds.gallery;
  const Matrix e = embed_set(ck.model, records, spec.eval.normalize);
  std::vector<int> ids, rates;
  for (const auto& r : records) {
    ids.push_back(r.identity);
    rates.push_back(r.rate);
  }
  const fs::path path = out_dir(g, spec) / ("embeddings_" + split + ".csv");
  write_embeddings_csv(path.string(), e, ids, rates);
  std::cout << path.string() << '\n';
  return 0;
}

int cmd_run(const std::string& spec_path, const Globals& g) {
  const ExperimentSpec spec = load(spec_path, g);
  RunOptions opts;
  opts.out_dir = out_dir(g, spec).string();
  opts.workers = workers(g);
  opts.quiet = g.quiet;
  const Json report = run_experiment(spec, opts);
  std::cout << "rank1 " << pct(report["final"]["cmc"].begin()->get<double>()) << " map "
            << pct(report["final"]["map"].get<double>()) << '\n';
  std::cout << (fs::path(opts.out_dir) / "report.json").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-resolution re-identification toolkit"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Override train.seed");
  app.add_option("--out", g.out, "Output directory (default runs/<name>)");
  app.add_option("--workers", g.workers, "Concurrent training runs in sweeps")->check(CLI::PositiveNumber);
  app.add_flag("--deterministic", g.deterministic, "Single-worker, bitwise-reproducible mode");
  app.add_flag("-q,--quiet", g.quiet, "No progress output");

  std::string spec;
  auto spec_arg = [&spec](CLI::App* sub) { sub->add_option("spec", spec, "Experiment spec file")->required(); };

  auto* synth = app.add_subcommand("synth", "Write the dataset as PNGs plus manifest.jsonl");
  spec_arg(synth);

  std::string resume;
  long stop_after = -1;
  auto* train_cmd = app.add_subcommand("train", "Train one model");
  spec_arg(train_cmd);
  train_cmd->add_option("--resume", resume, "Checkpoint to resume from");
  train_cmd->add_option("--stop-after", stop_after, "Stop after this many steps, leaving checkpoint.latest");

  std::string checkpoint;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  spec_arg(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();

  std::vector<std::string> variants;
  auto* ablate = app.add_subcommand("ablate", "Train the ablation suite");
  spec_arg(ablate);
  ablate->add_option("--variants", variants, "Variant names (default: spec ablation list or all)")->delimiter(',');

  std::vector<double> fractions;
  auto* semi = app.add_subcommand("semi-sweep", "Train one model per labeled fraction");
  spec_arg(semi);
  semi->add_option("--fractions", fractions, "Labeled fractions")->delimiter(',');

  std::string split = "query";
  auto* exp = app.add_subcommand("export-embeddings", "Dump embeddings as CSV");
  spec_arg(exp);
  exp->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  exp->add_option("--split", split, "train, query or gallery")->check(CLI::IsMember({"train", "query", "gallery"}));

  auto* run = app.add_subcommand("run", "synth, train, eval and report in one go");
  spec_arg(run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*synth) return cmd_synth(spec, g);
    if (*train_cmd) return cmd_train(spec, g, resume, stop_after);
    if (*eval_cmd) return cmd_eval(spec, g, checkpoint);
    if (*ablate) return cmd_ablate(spec, g, variants);
    if (*semi) return cmd_semi(spec, g, fractions);
    if (*exp) return cmd_export(spec, g, checkpoint, split);
    if (*run) return cmd_run(spec, g);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ProtocolError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const CheckpointMismatch& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const TrainingAborted& e) {
    std::cerr << "aborted: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
