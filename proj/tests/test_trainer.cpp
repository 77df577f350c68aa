#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "sdfa/experiment.hpp"
#include "test_util.hpp"

using namespace sdfa;
using sdfa::testing::rel_error;
namespace fs = std::filesystem;

namespace {

BackboneConfig tiny(std::uint64_t seed = 1) {
  BackboneConfig c;
  c.base_width = 4;
  c.depth = 2;
  c.seed = seed;
  return c;
}

Dataset toy_dataset(int domains = 3, int n = 12, int size = 16) {
  std::vector<SyntheticDomainSpec> specs;
  for (int d = 0; d < domains; ++d) {
    SyntheticDomainSpec s;
    s.name = "site" + std::to_string(d);
    s.intensity_bias = 0.15 * d;
    s.contrast_gain = 1.0 - 0.2 * d;
    s.noise_std = 0.05 * d;
    s.seed = 100 + static_cast<std::uint64_t>(d);
    specs.push_back(s);
  }
  return generate_dataset(specs, n, size, size);
}

TrainConfig quick(std::uint64_t seed = 0) {
  TrainConfig t;
  t.batch_size = 4;
  t.seed = seed;
  t.iterations = 20;
  t.eval_every = 5;
  return t;
}

std::string dump(const std::vector<StepRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

}  // namespace

namespace {

// the consistency term treats the clean loss as a constant reference, so the
// differentiated objective is total + Σ_gated ori_i / N with the gate frozen
template <class Pred>
void check_objective_gradient(bool sds, Pred wanted) {
  const auto data = toy_dataset();
  TrainConfig cfg = quick(3);
  cfg.lambda = 0.7;
  cfg.enable_sds = sds;
  SdfaModel<double> model(tiny());
  // move μ, σ off their identity init so both gradients are generic
  model.intensity.mu.value.setConstant(0.2);
  model.intensity.sigma.value.setConstant(1.3);

  std::vector<SegmentationSample> batch;
  {
    Trainer<double> t(model, cfg, data.samples);
    batch = t.sample_batch();
  }
  Trainer<double> t(model, cfg, data.samples);
  StepRecord rec;
  const auto parts = t.compute_gradients(batch, rec);
  CHECK(rec.augmented);
  CHECK(rec.scl > 0.0);  // some augmented sample got worse, so the gate is active
  const auto n = static_cast<double>(batch.size());
  CHECK(std::abs(parts.total - (parts.per_sample_ori.mean() + 0.7 * parts.per_sample_aug.mean() + parts.scl)) < 1e-12);
  const Eigen::Array<bool, Eigen::Dynamic, 1> gate = parts.per_sample_aug.array() > parts.per_sample_ori.array();

  auto surrogate = [&] {
    Trainer<double> fresh(model, cfg, data.samples);
    StepRecord r;
    const auto b = fresh.compute_gradients(batch, r);
    double s = b.total;
    for (Index i = 0; i < b.per_sample_ori.size(); ++i)
      if (gate[i]) s += b.per_sample_ori[i] / n;
    return s;
  };

  std::map<std::string, Matrix<double>> analytic;
  for (auto* p : model.parameters()) analytic[p->name] = p->grad;
  int checked = 0;
  for (auto* p : model.parameters()) {
    if (!wanted(p->name)) continue;
    const auto num = sdfa::testing::numeric_grad(*p, surrogate);
    if (num.cwiseAbs().maxCoeff() < 1e-6) {
      CHECK_MESSAGE(analytic[p->name].cwiseAbs().maxCoeff() < 1e-6, p->name);
    } else {
      CHECK_MESSAGE(rel_error(analytic[p->name], num) < 1e-4, p->name);
    }
    ++checked;
  }
  CHECK(checked > 0);
}

}  // namespace

TEST_CASE("objective gradient matches finite differences with random directions") {
  // no hard selector in the loop: every backbone parameter is smooth
  check_objective_gradient(false, [](const std::string& name) {
    return name.rfind("intensity.", 0) == 0 || name.rfind("backbone.", 0) == 0;
  });
}

TEST_CASE("objective gradient matches finite differences downstream of the selector") {
  // the encoder also receives the straight-through selector term, which finite
  // differences of the hard mask cannot see; everything after the bottleneck can
  check_objective_gradient(true, [](const std::string& name) {
    return name.rfind("intensity.", 0) == 0 || name.rfind("backbone.decoder.", 0) == 0 || name.rfind("backbone.head.", 0) == 0;
  });
}

TEST_CASE("lambda = 0 without SCL reduces to the ERM gradient") {
  const auto data = toy_dataset();
  TrainConfig sdfa_cfg = quick(5);
  sdfa_cfg.lambda = 0.0;
  sdfa_cfg.enable_scl = false;
  TrainConfig erm_cfg = sdfa_cfg;
  erm_cfg.enable_sds = erm_cfg.enable_sis = false;

  SdfaModel<double> a(tiny()), b(tiny());
  Trainer<double> ta(a, sdfa_cfg, data.samples), tb(b, erm_cfg, data.samples);
  const auto batch = ta.sample_batch();
  StepRecord ra, rb;
  ta.compute_gradients(batch, ra);
  tb.compute_gradients(batch, rb);
  CHECK_FALSE(ra.augmented);
  CHECK(ra.scl == 0.0);
  CHECK(ra.total == rb.total);
  const auto pa = a.parameters(), pb = b.parameters();
  double worst = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) worst = std::max(worst, (pa[i]->grad - pb[i]->grad).cwiseAbs().maxCoeff());
  CHECK(worst <= 1e-6);

  // with λ > 0 the augmented branch does contribute
  TrainConfig on = sdfa_cfg;
  on.lambda = 1.0;
  SdfaModel<double> c(tiny());
  Trainer<double> tc(c, on, data.samples);
  StepRecord rc;
  tc.compute_gradients(batch, rc);
  CHECK(rc.augmented);
  double diff = 0.0;
  const auto pc = c.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) diff = std::max(diff, (pc[i]->grad - pa[i]->grad).cwiseAbs().maxCoeff());
  CHECK(diff > 1e-6);
}

TEST_CASE("identical seeds give identical step records") {
  const auto data = toy_dataset();
  auto run = [&] {
    SdfaModel<float> m(tiny());
    TrainConfig cfg = quick(9);
    cfg.warmup_min = 2;
    cfg.cov_refresh = 3;
    Trainer<float> t(m, cfg, data.samples);
    std::vector<StepRecord> out;
    for (int i = 0; i < 12; ++i) out.push_back(t.train_step());
    return dump(out);
  };
  CHECK(run() == run());
}

TEST_CASE("batches do not depend on augmentation settings") {
  const auto data = toy_dataset();
  SdfaModel<float> a(tiny()), b(tiny());
  TrainConfig sdfa_cfg = quick(4), erm_cfg = quick(4);
  erm_cfg.lambda = 0;
  erm_cfg.enable_sds = erm_cfg.enable_sis = erm_cfg.enable_scl = false;
  Trainer<float> ta(a, sdfa_cfg, data.samples), tb(b, erm_cfg, data.samples);
  for (int i = 0; i < 5; ++i) {
    const auto ba = ta.sample_batch(), bb = tb.sample_batch();
    for (std::size_t k = 0; k < ba.size(); ++k) CHECK(ba[k].sample_id == bb[k].sample_id);
    ta.train_step(ba);
    tb.train_step(bb);
  }
}

TEST_CASE("batches draw domains uniformly") {
  auto data = toy_dataset(3, 12);
  // unbalanced pool: domain 0 has 4x the samples of the others
  auto extra = generate_domain(SyntheticDomainSpec{}, 36, 16, 16, 0);
  data.samples.insert(data.samples.end(), extra.begin(), extra.end());
  SdfaModel<float> m(tiny());
  TrainConfig cfg = quick(1);
  cfg.batch_size = 30;
  Trainer<float> t(m, cfg, data.samples);
  std::map<int, int> freq;
  for (int i = 0; i < 200; ++i)
    for (const auto& s : t.sample_batch()) ++freq[s.domain_id];
  for (int d = 0; d < 3; ++d) CHECK(std::abs(freq[d] / 6000.0 - 1.0 / 3) < 0.03);
}

TEST_CASE("SCL off keeps the scl term at exactly zero") {
  const auto data = toy_dataset();
  SdfaModel<float> m(tiny());
  TrainConfig cfg = quick(2);
  cfg.enable_scl = false;
  Trainer<float> t(m, cfg, data.samples);
  for (int i = 0; i < 10; ++i) {
    const auto r = t.train_step();
    CHECK(r.scl == 0.0);
    CHECK(r.augmented);
  }
}

TEST_CASE("random direction baseline selects about half the channels") {
  const auto data = toy_dataset();
  SdfaModel<float> m(tiny());
  TrainConfig cfg = quick(6);
  cfg.enable_sds = cfg.enable_sis = cfg.enable_scl = false;
  Trainer<float> t(m, cfg, data.samples);
  double sum = 0.0;
  const int steps = 40;
  for (int i = 0; i < steps; ++i) {
    const auto r = t.train_step();
    CHECK(r.channels_selected >= 0.0);
    CHECK(r.channels_selected <= 8.0);
    CHECK_FALSE(r.covariance_noise);
    sum += r.channels_selected;
  }
  CHECK(std::abs(sum / steps - 4.0) < 0.5);
  // intensity parameters are not part of this objective
  CHECK(m.intensity.mu.value.isZero(0.0));
}

TEST_CASE("covariance noise switches on after warm-up") {
  const auto data = toy_dataset();
  SdfaModel<float> m(tiny());
  TrainConfig cfg = quick(3);
  cfg.warmup_min = 4;
  cfg.cov_refresh = 5;
  Trainer<float> t(m, cfg, data.samples);
  bool seen = false;
  for (int i = 0; i < 15; ++i) seen = t.train_step().covariance_noise || seen;
  CHECK(seen);
  CHECK(t.bank().has_covariances());
}

TEST_CASE("non-finite loss aborts the step with a record") {
  const auto data = toy_dataset();
  SdfaModel<float> m(tiny());
  Trainer<float> t(m, quick(), data.samples);
  ParameterList<float> ps;
  m.backbone.collect(ps);
  ps.back()->value.setConstant(std::numeric_limits<float>::quiet_NaN());
  try {
    t.train_step();
    FAIL("expected NonFiniteLoss");
  } catch (const NonFiniteLoss& e) {
    CHECK(e.record.step == 0);
    CHECK_FALSE(std::isfinite(e.record.total));
  }
}

TEST_CASE("evaluate") {
  const auto data = toy_dataset(2, 6);
  SdfaModel<float> m(tiny());

  // ground truth against itself
  std::vector<LabelMap> gts;
  for (const auto& s : data.samples) gts.push_back(s.mask);
  const auto perfect = evaluate_masks(gts, gts, 2);
  CHECK(perfect.mean_dsc == 1.0);
  CHECK(perfect.mean_asd == 0.0);

  // constant background
  SdfaModel<float> bg(tiny());
  for (auto* p : bg.parameters()) p->value.setZero();
  ParameterList<float> ps;
  bg.backbone.collect(ps);
  ps.back()->value(0, 0) = 1.0f;  // head bias favours class 0
  const auto r = evaluate(bg.backbone, std::span<const SegmentationSample>(data.samples));
  CHECK(r.overall.mean_dsc == 0.0);
  CHECK(r.overall.mean_asd == doctest::Approx(std::sqrt(2.0) * 16));

  const auto before = m.snapshot();
  const auto b1 = evaluate(m.backbone, std::span<const SegmentationSample>(data.samples), 1);
  const auto b8 = evaluate(m.backbone, std::span<const SegmentationSample>(data.samples), 8);
  CHECK(std::abs(b1.overall.mean_dsc - b8.overall.mean_dsc) <= 1e-10);
  CHECK(std::abs(b1.overall.mean_asd - b8.overall.mean_asd) <= 1e-10);
  REQUIRE(b1.per_domain.size() == 2);
  CHECK(std::abs(b1.per_domain.at(1).mean_dsc - b8.per_domain.at(1).mean_dsc) <= 1e-10);
  const auto after = m.snapshot();
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
}

TEST_CASE("run_fold writes artifacts and selects the best validation checkpoint") {
  const auto dir = fs::temp_directory_path() / "sdfa_test_fold";
  fs::remove_all(dir);
  const auto data = toy_dataset(2, 10);
  ExperimentConfig cfg;
  cfg.backbone = tiny();
  cfg.train = quick(1);
  const auto fold = run_fold(data, 0, cfg, dir);
  for (const char* f : {"train_log.jsonl", "eval_log.jsonl", "checkpoint.sdfa", "result.json"}) CHECK(fs::exists(dir / f));
  CHECK(read_step_log(dir / "train_log.jsonl").size() == 20);

  std::ifstream ev(dir / "eval_log.jsonl");
  std::string line;
  double best = -1.0;
  long best_step = -1;
  int points = 0;
  while (std::getline(ev, line)) {
    const auto j = nlohmann::json::parse(line);
    ++points;
    if (j["val_dsc"].get<double>() > best) {
      best = j["val_dsc"];
      best_step = j["step"];
    }
  }
  CHECK(points == 4);
  CHECK(fold.best_val_dsc == best);
  CHECK(fold.best_step == best_step);

  // the saved checkpoint reproduces the reported test score
  SdfaModel<float> reloaded(checkpoint_backbone_config(dir / "checkpoint.sdfa"));
  load_checkpoint(dir / "checkpoint.sdfa", reloaded);
  const auto split = lodo_split(data.samples, 0, cfg.train.val_fraction, derive_seed(cfg.train.seed, 20));
  CHECK(evaluate(reloaded.backbone, std::span<const SegmentationSample>(split.test)).overall.mean_dsc ==
        fold.test.overall.mean_dsc);
  fs::remove_all(dir);
}

TEST_CASE("run_lodo on two domains gives two rows and is reproducible") {
  const auto dir = fs::temp_directory_path() / "sdfa_test_lodo";
  fs::remove_all(dir);
  const auto data = toy_dataset(2, 8);
  ExperimentConfig cfg;
  cfg.backbone = tiny();
  cfg.train = quick(2);
  cfg.train.iterations = 6;
  const auto a = run_lodo(data, cfg, dir);
  CHECK(a.size() == 2);
  std::ifstream csv(dir / "lodo.csv");
  int lines = 0;
  std::string line;
  while (std::getline(csv, line)) ++lines;
  CHECK(lines == 3);
  const auto b = run_lodo(data, cfg);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].test.overall.mean_dsc == b[i].test.overall.mean_dsc);
    CHECK(dump(a[i].steps) == dump(b[i].steps));
  }

  const auto rows = sweep_lambda(data, cfg, {0.5}, dir / "sweep");
  CHECK(rows.size() == 1);
  CHECK(fs::exists(dir / "sweep" / "sweep.csv"));
  CHECK_THROWS_AS(sweep_lambda(data, cfg, {}), ConfigError);
  fs::remove_all(dir);
}
