#include "sdfa/experiment.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

using nlohmann::json;
namespace fs = std::filesystem;

namespace sdfa {

json to_json(const EvalResult& r) {
  return json{{"per_class_dsc", r.per_class_dsc},
              {"per_class_asd", r.per_class_asd},
              {"mean_dsc", r.mean_dsc},
              {"mean_asd", r.mean_asd},
              {"samples", r.samples}};
}

json to_json(const FoldResult& r, const Dataset& data) {
  json per_domain = json::object();
  for (const auto& [d, res] : r.test.per_domain) per_domain[data.domain_names.at(static_cast<std::size_t>(d))] = to_json(res);
  return json{{"held_out", r.held_out},
              {"domain", r.domain},
              {"model_seed", r.model_seed},
              {"best_step", r.best_step},
              {"best_val_dsc", r.best_val_dsc},
              {"test", to_json(r.test.overall)},
              {"test_per_domain", per_domain}};
}

namespace {

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::ofstream open_csv(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(6) << std::fixed;
  return out;
}

}  // namespace

FoldResult run_fold(const Dataset& data, int held_out, const ExperimentConfig& config, const fs::path& out_dir,
                    const std::function<void(const StepRecord&)>& on_step) {
  const auto& tc = config.train;
  tc.validate();
  const auto split = lodo_split(data.samples, held_out, tc.val_fraction, derive_seed(tc.seed, 20));

  BackboneConfig bc = config.backbone;
  bc.in_channels = data.in_channels;
  bc.num_classes = data.num_classes;
  bc.seed = fold_model_seed(tc.seed, held_out);
  SdfaModel<float> model(bc);
  Trainer<float> trainer(model, tc, split.train);

  FoldResult result;
  result.held_out = held_out;
  result.domain = data.domain_names.at(static_cast<std::size_t>(held_out));
  result.model_seed = bc.seed;
  result.best_val_dsc = -1.0;

  std::ofstream train_log, eval_log;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    train_log.open(out_dir / "train_log.jsonl");
    eval_log.open(out_dir / "eval_log.jsonl");
    if (!train_log || !eval_log) throw std::runtime_error("cannot write logs in " + out_dir.string());
  }

  std::vector<Matrix<float>> best;
  auto validate = [&](long step) {
    const auto rep = evaluate(model.backbone, std::span<const SegmentationSample>(split.val));
    EvalPoint p{step, rep.overall.mean_dsc, rep.overall.mean_asd};
    result.evals.push_back(p);
    if (eval_log.is_open()) eval_log << json{{"step", p.step}, {"val_dsc", p.val_dsc}, {"val_asd", p.val_asd}}.dump() << "\n";
    // strict: ties keep the earlier checkpoint
    if (p.val_dsc > result.best_val_dsc) {
      result.best_val_dsc = p.val_dsc;
      result.best_step = step;
      best = model.snapshot();
    }
  };

  for (int it = 0; it < tc.iterations; ++it) {
    StepRecord r;
    try {
      r = trainer.train_step();
    } catch (const NonFiniteLoss& e) {
      if (train_log.is_open()) train_log << to_json(e.record).dump() << "\n";
      throw;
    }
    result.steps.push_back(r);
    if (train_log.is_open()) train_log << to_json(r).dump() << "\n";
    if (on_step) on_step(r);
    const long done = trainer.step();
    if (done % tc.eval_every == 0 || done == tc.iterations) validate(done);
  }

  model.restore(best);
  result.test = evaluate(model.backbone, std::span<const SegmentationSample>(split.test));
  if (!out_dir.empty()) {
    save_checkpoint(out_dir / "checkpoint.sdfa", model);
    write_json(out_dir / "result.json", to_json(result, data));
  }
  return result;
}

std::vector<FoldResult> run_lodo(const Dataset& data, const ExperimentConfig& config, const fs::path& out_dir) {
  if (data.domain_names.size() < 2) throw ConfigError("lodo: need at least 2 domains");
  std::vector<FoldResult> folds;
  for (int d = 0; d < static_cast<int>(data.domain_names.size()); ++d) {
    const fs::path fold_dir = out_dir.empty() ? fs::path() : out_dir / ("fold_" + data.domain_names[static_cast<std::size_t>(d)]);
    folds.push_back(run_fold(data, d, config, fold_dir));
  }
  if (!out_dir.empty()) {
    auto csv = open_csv(out_dir / "lodo.csv");
    csv << "held_out,domain,test_dsc,test_asd,best_val_dsc,best_step\n";
    json rows = json::array();
    for (const auto& f : folds) {
      csv << f.held_out << "," << f.domain << "," << f.test.overall.mean_dsc << "," << f.test.overall.mean_asd << ","
          << f.best_val_dsc << "," << f.best_step << "\n";
      rows.push_back(to_json(f, data));
    }
    write_json(out_dir / "lodo.json", json{{"config", to_json(config)}, {"folds", rows}});
  }
  return folds;
}

namespace {

std::string lambda_tag(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

void write_domain_table(const fs::path& stem, const Dataset& data, const std::string& key_name,
                        const std::vector<std::pair<std::string, std::vector<double>>>& rows, const json& extra) {
  auto csv = open_csv(stem.string() + ".csv");
  csv << key_name;
  for (const auto& n : data.domain_names) csv << "," << n;
  csv << ",mean\n";
  json j = json::array();
  for (const auto& [key, dsc] : rows) {
    csv << key;
    for (double v : dsc) csv << "," << v;
    csv << "," << mean_of(dsc) << "\n";
    json per = json::object();
    for (std::size_t i = 0; i < dsc.size(); ++i) per[data.domain_names[i]] = dsc[i];
    j.push_back({{key_name, key}, {"dsc", per}, {"mean_dsc", mean_of(dsc)}});
  }
  write_json(stem.string() + ".json", json{{"rows", j}, {"config", extra}});
}

}  // namespace

std::vector<SweepRow> sweep_lambda(const Dataset& data, const ExperimentConfig& config, const std::vector<double>& values,
                                   const fs::path& out_dir) {
  if (values.empty()) throw ConfigError("sweep: no lambda values");
  std::vector<SweepRow> rows;
  std::vector<std::pair<std::string, std::vector<double>>> table;
  for (double v : values) {
    ExperimentConfig c = config;
    c.train.lambda = v;
    const auto sub = out_dir.empty() ? fs::path() : out_dir / ("lambda_" + lambda_tag(v));
    SweepRow row;
    row.lambda = v;
    for (const auto& f : run_lodo(data, c, sub)) row.dsc.push_back(f.test.overall.mean_dsc);
    row.mean_dsc = mean_of(row.dsc);
    table.emplace_back(lambda_tag(v), row.dsc);
    rows.push_back(std::move(row));
  }
  if (!out_dir.empty()) write_domain_table(out_dir / "sweep", data, "lambda", table, to_json(config));
  return rows;
}

std::vector<AblationRow> run_ablations(const Dataset& data, const ExperimentConfig& config, const fs::path& out_dir) {
  std::vector<AblationRow> rows = {
      {"random_d+gaussian_s", false, false, true, {}, 0.0},
      {"sds+gaussian_s", true, false, true, {}, 0.0},
      {"random_d+sis", false, true, true, {}, 0.0},
      {"sds+sis", true, true, true, {}, 0.0},
      {"sds+sis_no_scl", true, true, false, {}, 0.0},
  };
  std::vector<std::pair<std::string, std::vector<double>>> table;
  for (auto& row : rows) {
    ExperimentConfig c = config;
    c.train.enable_sds = row.sds;
    c.train.enable_sis = row.sis;
    c.train.enable_scl = row.scl;
    const auto sub = out_dir.empty() ? fs::path() : out_dir / row.name;
    for (const auto& f : run_lodo(data, c, sub)) row.dsc.push_back(f.test.overall.mean_dsc);
    row.mean_dsc = mean_of(row.dsc);
    table.emplace_back(row.name, row.dsc);
  }
  if (!out_dir.empty()) write_domain_table(out_dir / "ablation", data, "variant", table, to_json(config));
  return rows;
}

std::vector<StepRecord> read_step_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing training log " + path.string());
  std::vector<StepRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(step_record_from_json(json::parse(line)));
  }
  if (out.empty()) throw std::runtime_error("empty training log " + path.string());
  return out;
}

}  // namespace sdfa
