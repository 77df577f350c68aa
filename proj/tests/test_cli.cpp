#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;  // stdout and stderr together
};

Run sdfa(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + "'" SDFA_CLI_PATH "' " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  int n = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n;
}

const fs::path root = fs::temp_directory_path() / "sdfa_test_cli";
const std::string spec = std::string(SDFA_SOURCE_DIR) + "/configs/domains4.json";
// tiny model, few steps: these runs check plumbing, not accuracy
const std::string fast = " --base-width 4 --depth 2 --iterations 6 --batch-size 2 --eval-every 3 ";

const fs::path& dataset() {
  static const fs::path dir = [] {
    fs::remove_all(root);
    fs::create_directories(root);
    const auto d = root / "data";
    const auto r = sdfa("gen --spec '" + spec + "' --out '" + d.string() + "' --n 10 --size 16");
    REQUIRE_MESSAGE(r.code == 0, r.output);
    return d;
  }();
  return dir;
}

std::string data_arg() { return " --data '" + dataset().string() + "' "; }

}  // namespace

TEST_CASE("gen writes one folder per domain and is reproducible") {
  const auto& d = dataset();
  int domains = 0;
  for (const auto& e : fs::directory_iterator(d))
    if (e.is_directory()) ++domains;
  CHECK(domains == 4);
  for (const char* name : {"clean", "bright", "noisy", "textured"}) {
    int images = 0, masks = 0;
    for (const auto& e : fs::directory_iterator(d / name / "images")) images += e.path().extension() == ".png";
    for (const auto& e : fs::directory_iterator(d / name / "masks")) masks += e.path().extension() == ".png";
    CHECK(images == 10);
    CHECK(masks == 10);
  }
  const auto again = root / "data_again";
  REQUIRE(sdfa("gen --spec '" + spec + "' --out '" + again.string() + "' --n 10 --size 16").code == 0);
  for (const auto& e : fs::recursive_directory_iterator(d)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), d);
    CHECK_MESSAGE(slurp(e.path()) == slurp(again / rel), rel.string());
  }

  // a different seed changes the images
  const auto other = root / "data_seeded";
  REQUIRE(sdfa("gen --spec '" + spec + "' --out '" + other.string() + "' --n 2 --size 16 --seed 7").code == 0);
  CHECK(slurp(other / "clean/images/0000.png") != slurp(d / "clean/images/0000.png"));
  const auto env = root / "data_env";
  REQUIRE(sdfa("gen --spec '" + spec + "' --out '" + env.string() + "' --n 2 --size 16", "SDFA_SEED=7").code == 0);
  CHECK(slurp(other / "clean/images/0000.png") == slurp(env / "clean/images/0000.png"));
}

TEST_CASE("gen rejects invalid specs") {
  const auto bad = root / "bad_spec.json";
  std::ofstream(bad) << R"({"domains":[{"name":"a","noise_std":-1}]})";
  const auto r = sdfa("gen --spec '" + bad.string() + "' --out '" + (root / "never").string() + "'");
  CHECK(r.code == 2);
  CHECK(r.output.find("noise_std") != std::string::npos);

  std::ofstream(bad) << R"({"domains":[{"name":"a","colour":1}]})";
  const auto u = sdfa("gen --spec '" + bad.string() + "' --out '" + (root / "never").string() + "'");
  CHECK(u.code == 2);
  CHECK(u.output.find("colour") != std::string::npos);

  CHECK(sdfa("gen --out x").code == 2);
  CHECK(sdfa("frobnicate").code == 2);
}

TEST_CASE("train writes every artifact") {
  const auto out = root / "train";
  const auto r = sdfa("train" + data_arg() + "--holdout noisy --out '" + out.string() + "'" + fast + "--seed 3");
  REQUIRE_MESSAGE(r.code == 0, r.output);
  for (const char* f : {"config.json", "train_log.jsonl", "eval_log.jsonl", "checkpoint.sdfa", "result.json"})
    CHECK_MESSAGE(fs::exists(out / f), f);
  CHECK(count_lines(out / "train_log.jsonl") == 6);
  CHECK(count_lines(out / "eval_log.jsonl") == 2);

  const auto cfg = nlohmann::json::parse(slurp(out / "config.json"));
  CHECK(cfg["train"]["seed"] == 3);
  CHECK(cfg["train"]["iterations"] == 6);
  CHECK(cfg["backbone"]["base_width"] == 4);
  CHECK(cfg["domains"].size() == 4);

  const auto res = nlohmann::json::parse(slurp(out / "result.json"));
  CHECK(res["domain"] == "noisy");
  CHECK(res.contains("test"));
}

TEST_CASE("train rejects a bad holdout and a bad config") {
  const auto bad = sdfa("train" + data_arg() + "--holdout nowhere --out '" + (root / "x").string() + "'" + fast);
  CHECK(bad.code == 2);
  CHECK(bad.output.find("nowhere") != std::string::npos);
  CHECK(sdfa("train" + data_arg() + "--holdout 9 --out '" + (root / "x").string() + "'" + fast).code == 2);
  CHECK(sdfa("train" + data_arg() + "--holdout clean --lambda -1 --out '" + (root / "x").string() + "'" + fast).code == 2);
  CHECK(sdfa("train --data '" + (root / "missing").string() + "' --holdout clean --out '" + (root / "x").string() + "'" +
             fast)
            .code != 0);

  const auto cfg = root / "bad_config.json";
  std::ofstream(cfg) << R"({"train":{"lamda":1}})";
  const auto r = sdfa("train" + data_arg() + "--holdout clean --config '" + cfg.string() + "' --out '" +
                      (root / "x").string() + "'" + fast);
  CHECK(r.code == 2);
  CHECK(r.output.find("lamda") != std::string::npos);
}

TEST_CASE("seed fallback and flag precedence") {
  const auto cfg = root / "cfg.json";
  std::ofstream(cfg) << R"({"train":{"lambda":0.25,"seed":5,"iterations":4}})";
  const auto a = root / "env_seed";
  REQUIRE(sdfa("train" + data_arg() + "--holdout clean --config '" + cfg.string() + "' --out '" + a.string() + "'" + fast +
                   "--lambda 0.5",
               "SDFA_SEED=41")
              .code == 0);
  auto j = nlohmann::json::parse(slurp(a / "config.json"));
  CHECK(j["train"]["seed"] == 41);
  CHECK(j["train"]["lambda"] == 0.5);
  CHECK(j["train"]["iterations"] == 6);

  const auto b = root / "cfg_seed";
  REQUIRE(sdfa("train" + data_arg() + "--holdout clean --config '" + cfg.string() + "' --out '" + b.string() +
               "' --base-width 4 --depth 2 --batch-size 2 --eval-every 2 --seed 41")
              .code == 0);
  j = nlohmann::json::parse(slurp(b / "config.json"));
  CHECK(j["train"]["lambda"] == 0.25);
  CHECK(j["train"]["iterations"] == 4);
  CHECK(j["train"]["seed"] == 41);

  CHECK(sdfa("train" + data_arg() + "--holdout clean --out '" + (root / "x").string() + "'" + fast, "SDFA_SEED=abc").code == 2);

  // output_dir from the config file applies when --out is absent
  const auto routed = root / "routed";
  std::ofstream(cfg) << nlohmann::json{{"output_dir", routed.string()}, {"train", {{"iterations", 2}}}}.dump();
  REQUIRE(sdfa("train" + data_arg() + "--holdout clean --config '" + cfg.string() +
               "' --base-width 4 --depth 2 --batch-size 2 --eval-every 2")
              .code == 0);
  CHECK(fs::exists(routed / "train_log.jsonl"));
}

TEST_CASE("lodo and sweep tables") {
  const auto lodo = root / "lodo";
  const auto r = sdfa("lodo" + data_arg() + "--out '" + lodo.string() + "'" + fast);
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(count_lines(lodo / "lodo.csv") == 5);  // header + one row per domain
  CHECK(fs::exists(lodo / "lodo.json"));
  for (const char* name : {"clean", "bright", "noisy", "textured"}) CHECK(fs::exists(lodo / ("fold_" + std::string(name))));

  const auto sweep = root / "sweep";
  const auto s = sdfa("sweep" + data_arg() + "--out '" + sweep.string() + "' --values 0,0.25,0.5,0.75,1" +
                      " --base-width 4 --depth 2 --iterations 2 --batch-size 2 --eval-every 2");
  REQUIRE_MESSAGE(s.code == 0, s.output);
  CHECK(count_lines(sweep / "sweep.csv") == 6);
  CHECK(sdfa("sweep" + data_arg() + "--values 0,abc --out '" + (root / "x").string() + "'" + fast).code == 2);
}

TEST_CASE("plot") {
  const auto run = root / "train";
  if (!fs::exists(run / "train_log.jsonl")) {
    REQUIRE(sdfa("train" + data_arg() + "--holdout noisy --out '" + run.string() + "'" + fast).code == 0);
  }
  const auto svg = root / "fig.svg";
  const auto r = sdfa("plot --runs '" + run.string() + "' --labels sdfa --out '" + svg.string() + "'");
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(fs::file_size(svg) > 0);
  CHECK(slurp(svg).find("<svg") != std::string::npos);

  const auto heat = root / "heat.svg";
  const auto h = sdfa("plot --runs '" + run.string() + "' --checkpoint '" + (run / "checkpoint.sdfa").string() + "'" +
                      data_arg() + "--samples 2 --out '" + heat.string() + "'");
  REQUIRE_MESSAGE(h.code == 0, h.output);
  CHECK(fs::file_size(heat) > fs::file_size(svg));

  const auto missing = sdfa("plot --runs '" + (root / "nothing").string() + "' --out '" + (root / "n.svg").string() + "'");
  CHECK(missing.code != 0);
  CHECK(missing.output.find("training log") != std::string::npos);
}
