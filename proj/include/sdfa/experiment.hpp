#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "sdfa/config.hpp"
#include "sdfa/data.hpp"
#include "sdfa/trainer.hpp"

namespace sdfa {

struct EvalPoint {
  long step = 0;
  double val_dsc = 0.0;
  double val_asd = 0.0;
};

struct FoldResult {
  int held_out = 0;
  std::string domain;
  std::uint64_t model_seed = 0;
  long best_step = 0;
  double best_val_dsc = 0.0;
  EvalReport test;
  std::vector<StepRecord> steps;
  std::vector<EvalPoint> evals;
};

/// Seed of the fresh model for a fold; every fold starts from its own init.
inline std::uint64_t fold_model_seed(std::uint64_t seed, int held_out) {
  return derive_seed(seed, 0x100 + static_cast<std::uint64_t>(held_out));
}

/// Trains one leave-one-domain-out fold. The model is evaluated on the
/// validation split every `eval_every` steps and after the last step; the
/// parameters with the best validation mean DSC are restored before testing.
/// If `out_dir` is non-empty, writes train_log.jsonl, eval_log.jsonl,
/// checkpoint.sdfa and result.json there.
FoldResult run_fold(const Dataset& data, int held_out, const ExperimentConfig& config,
                    const std::filesystem::path& out_dir = {},
                    const std::function<void(const StepRecord&)>& on_step = {});

/// One fold per domain; writes lodo.csv and lodo.json into `out_dir` when set.
std::vector<FoldResult> run_lodo(const Dataset& data, const ExperimentConfig& config,
                                 const std::filesystem::path& out_dir = {});

struct SweepRow {
  double lambda = 0.0;
  std::vector<double> dsc;  // per held-out domain
  double mean_dsc = 0.0;
};

std::vector<SweepRow> sweep_lambda(const Dataset& data, const ExperimentConfig& config,
                                   const std::vector<double>& values, const std::filesystem::path& out_dir = {});

struct AblationRow {
  std::string name;
  bool sds = true, sis = true, scl = true;
  std::vector<double> dsc;
  double mean_dsc = 0.0;
};

/// The four direction/intensity combinations with SCL on, plus full SDFA without SCL.
std::vector<AblationRow> run_ablations(const Dataset& data, const ExperimentConfig& config,
                                       const std::filesystem::path& out_dir = {});

nlohmann::json to_json(const EvalResult& r);
nlohmann::json to_json(const FoldResult& r, const Dataset& data);

std::vector<StepRecord> read_step_log(const std::filesystem::path& path);

/// Two-panel SVG: channels_selected against step for each run, and, when a
/// checkpoint is given, feature- and output-space difference maps on samples.
struct PlotInputs {
  std::vector<std::filesystem::path> run_dirs;
  std::vector<std::string> labels;
  std::filesystem::path checkpoint;  // optional
  const Dataset* data = nullptr;     // required with checkpoint
  int samples = 4;
  std::uint64_t seed = 0;
};
void write_plot(const PlotInputs& inputs, const std::filesystem::path& out);

}  // namespace sdfa
