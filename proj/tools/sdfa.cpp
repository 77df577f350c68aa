// sdfa — dataset generation, training, LODO experiments, sweeps, ablations, plots.
//
// Exit codes: 0 success, 2 invalid arguments or configuration, 3 runtime failure.

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "sdfa/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sdfa;

namespace {

/// Flags shared by every training command; unset flags leave the config-file value alone.
std::optional<std::uint64_t> env_seed() {
  const char* env = std::getenv("SDFA_SEED");
  if (!env) return std::nullopt;
  const std::string text(env);
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size() || text.empty())
    throw ConfigError("SDFA_SEED: not an unsigned integer: " + text);
  return v;
}

struct TrainFlags {
  std::string data;
  std::string config;
  std::optional<std::string> out;  // config output_dir, else runs/default
  std::optional<double> lambda, lr, weight_decay, val_fraction;
  std::optional<int> iterations, batch_size, eval_every, cov_refresh, buffer, warmup_min, base_width, depth;
  std::optional<std::uint64_t> seed;
  bool no_sds = false, no_sis = false, no_scl = false, image_aug = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--data", data, "dataset root (images/ + masks/ per domain)")->required();
    cmd->add_option("--config", config, "experiment config JSON");
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--lambda", lambda, "weight of the augmented loss");
    cmd->add_option("--iterations", iterations);
    cmd->add_option("--batch-size", batch_size);
    cmd->add_option("--lr", lr);
    cmd->add_option("--weight-decay", weight_decay);
    cmd->add_option("--val-fraction", val_fraction);
    cmd->add_option("--eval-every", eval_every);
    cmd->add_option("--cov-refresh", cov_refresh);
    cmd->add_option("--buffer", buffer);
    cmd->add_option("--warmup-min", warmup_min);
    cmd->add_option("--base-width", base_width);
    cmd->add_option("--depth", depth);
    cmd->add_option("--seed", seed, "falls back to $SDFA_SEED");
    cmd->add_flag("--no-sds", no_sds, "random Bernoulli(0.5) direction instead of the selector");
    cmd->add_flag("--no-sis", no_sis, "unit Gaussian intensity instead of the covariance sampler");
    cmd->add_flag("--no-scl", no_scl, "drop the selective consistency loss");
    cmd->add_flag("--image-aug", image_aug, "image-level augmentation");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c = config.empty() ? ExperimentConfig{} : load_experiment_config(config);
    auto& t = c.train;
    if (lambda) t.lambda = *lambda;
    if (lr) t.lr = *lr;
    if (weight_decay) t.weight_decay = *weight_decay;
    if (val_fraction) t.val_fraction = *val_fraction;
    if (iterations) t.iterations = *iterations;
    if (batch_size) t.batch_size = *batch_size;
    if (eval_every) t.eval_every = *eval_every;
    if (cov_refresh) t.cov_refresh = *cov_refresh;
    if (buffer) t.buffer = *buffer;
    if (warmup_min) t.warmup_min = *warmup_min;
    if (base_width) c.backbone.base_width = *base_width;
    if (depth) c.backbone.depth = *depth;
    if (no_sds) t.enable_sds = false;
    if (no_sis) t.enable_sis = false;
    if (no_scl) t.enable_scl = false;
    if (image_aug) t.image_aug.enabled = true;
    if (seed) {
      t.seed = *seed;
    } else if (const auto env = env_seed()) {
      t.seed = *env;
    }
    if (out) c.output_dir = *out;
    c.backbone.validate();
    t.validate();
    return c;
  }
};

void echo_config(const ExperimentConfig& c, const Dataset& data, const std::string& data_path) {
  fs::create_directories(c.output_dir);
  json j = to_json(c);
  j["data"] = data_path;
  j["domains"] = data.domain_names;
  std::ofstream(c.output_dir / "config.json") << j.dump(2) << "\n";
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--values: not a number: '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("--values: empty list");
  return out;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void print_fold(const FoldResult& f) {
  std::cout << "held-out " << f.domain << ": test DSC " << f.test.overall.mean_dsc << ", ASD " << f.test.overall.mean_asd
            << " (best val DSC " << f.best_val_dsc << " at step " << f.best_step << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SDFA domain-generalization segmentation lab"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic multi-domain dataset");
  std::string gen_spec, gen_out;
  int gen_n = 100, gen_size = 32;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--spec", gen_spec, "JSON list of domain specs")->required();
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--n", gen_n, "samples per domain");
  gen->add_option("--size", gen_size, "image height and width");
  gen->add_option("--seed", gen_seed, "re-seeds every domain (falls back to $SDFA_SEED)");

  // train / lodo / sweep / ablate
  TrainFlags train_flags, lodo_flags, sweep_flags, ablate_flags;
  auto* train = app.add_subcommand("train", "train and test one leave-one-domain-out fold");
  train_flags.attach(train);
  std::string holdout;
  train->add_option("--holdout", holdout, "held-out domain (name or id)")->required();

  auto* lodo = app.add_subcommand("lodo", "run every leave-one-domain-out fold");
  lodo_flags.attach(lodo);

  auto* sweep = app.add_subcommand("sweep", "lambda sweep over full LODO runs");
  sweep_flags.attach(sweep);
  std::string sweep_values = "0.2,0.4,0.6,0.8,1.0";
  sweep->add_option("--values", sweep_values, "comma-separated lambda values");

  auto* ablate = app.add_subcommand("ablate", "direction/intensity/consistency ablations");
  ablate_flags.attach(ablate);

  // plot
  auto* plot = app.add_subcommand("plot", "channel-count curves and difference heat maps (SVG)");
  std::string plot_runs, plot_labels, plot_ckpt, plot_data, plot_out = "plot.svg";
  int plot_samples = 4;
  std::optional<std::uint64_t> plot_seed;
  plot->add_option("--runs", plot_runs, "comma-separated run directories holding train_log.jsonl")->required();
  plot->add_option("--labels", plot_labels, "comma-separated curve labels");
  plot->add_option("--checkpoint", plot_ckpt, "checkpoint for the heat-map panel");
  plot->add_option("--data", plot_data, "dataset root for the heat-map panel");
  plot->add_option("--samples", plot_samples);
  plot->add_option("--seed", plot_seed);
  plot->add_option("--out", plot_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      std::ifstream in(gen_spec);
      if (!in) throw ConfigError("--spec: cannot open " + gen_spec);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        throw ConfigError("--spec: invalid JSON: " + std::string(e.what()));
      }
      auto specs = domain_specs_from_json(j);
      if (gen_n < 1) throw ConfigError("--n must be >= 1");
      if (gen_size < 1) throw ConfigError("--size must be >= 1");
      std::optional<std::uint64_t> seed = gen_seed;
      if (!seed) seed = env_seed();
      if (seed) {
        for (auto& s : specs) s.seed = derive_seed(*seed, s.seed);
      }
      const auto data = generate_dataset(specs, gen_n, gen_size, gen_size);
      write_dataset(gen_out, data, specs);
      std::cout << "wrote " << data.samples.size() << " samples in " << specs.size() << " domains to " << gen_out << "\n";
      return 0;
    }

    if (*plot) {
      PlotInputs pin;
      for (const auto& r : split_list(plot_runs)) pin.run_dirs.emplace_back(r);
      pin.labels = split_list(plot_labels);
      pin.samples = plot_samples;
      if (plot_seed) pin.seed = *plot_seed;
      std::optional<Dataset> data;
      if (!plot_ckpt.empty()) {
        if (plot_data.empty()) throw ConfigError("--checkpoint needs --data");
        pin.checkpoint = plot_ckpt;
        data = load_directory(plot_data);
        pin.data = &*data;
      }
      write_plot(pin, plot_out);
      std::cout << "wrote " << plot_out << "\n";
      return 0;
    }

    TrainFlags& flags = *train ? train_flags : *lodo ? lodo_flags : *sweep ? sweep_flags : ablate_flags;
    const auto config = flags.resolve();
    const auto data = load_directory(flags.data);
    echo_config(config, data, flags.data);

    if (*train) {
      int held_out = 0;
      try {
        held_out = data.resolve_domain(holdout);
      } catch (const std::exception& e) {
        throw ConfigError(std::string("--holdout: ") + e.what());
      }
      print_fold(run_fold(data, held_out, config, config.output_dir));
    } else if (*lodo) {
      for (const auto& f : run_lodo(data, config, config.output_dir)) print_fold(f);
    } else if (*sweep) {
      for (const auto& row : sweep_lambda(data, config, parse_values(sweep_values), config.output_dir)) {
        std::cout << "lambda " << row.lambda << ": mean DSC " << row.mean_dsc << "\n";
      }
    } else {
      for (const auto& row : run_ablations(data, config, config.output_dir)) {
        std::cout << row.name << ": mean DSC " << row.mean_dsc << "\n";
      }
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
