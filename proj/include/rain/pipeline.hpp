#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rain/config.hpp"
#include "rain/io.hpp"
#include "rain/training.hpp"

namespace rain {

inline constexpr const char* kRunReportSchema = "rain.report/1";

struct RunOptions {
  std::string out_dir;  // empty: nothing written
  int workers = 1;      // concurrent training runs inside ablation/semi sweeps
  std::optional<std::uint64_t> seed;  // overrides train.seed
  bool quiet = true;
};

struct SemiRow {
  double fraction = 0.0;
  double rank1 = 0.0;
  double map = 0.0;
  bool identity_losses_zero = false;  // cls == tri == 0 at every step
};

/// Trains one model per labeled fraction with otherwise identical settings.
std::vector<SemiRow> semi_sweep(const ModelConfig& model_config, const TrainConfig& base, const MlrDataset& dataset,
                                const std::vector<double>& fractions, int workers = 1);

/// synthesize -> train -> evaluate -> probes -> optional ablation and
/// semi-supervised sweep. Returns the report (also written as report.json
/// together with CSV tables when out_dir is set).
Json run_experiment(const ExperimentSpec& spec, const RunOptions& options);

/// Model configuration for a spec applied to a concrete dataset.
ModelConfig model_config_for(const ExperimentSpec& spec, const MlrDataset& dataset);

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows);
void write_semi_csv(const std::string& path, const std::vector<SemiRow>& rows);
void write_loss_csv(const std::string& path, const TrainHistory& history);
void write_cmc_csv(const std::string& path, const EvalReport& report);

}  // namespace rain
