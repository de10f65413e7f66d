#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "gam/metrics.hpp"
#include "gam/sequence.hpp"
#include "gam/synth.hpp"

using namespace gam;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string cli() {
  const char* env = std::getenv("GAM_CLI");
  REQUIRE(env != nullptr);
  return env;
}

int run(const std::string& args) {
  const std::string cmd = cli() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gam_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool same_bytes(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  REQUIRE(fa);
  REQUIRE(fb);
  std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  return sa == sb;
}

void write_small_gen(const fs::path& p) {
  std::ofstream(p) << R"({"kinds": {"walk": 2, "sit": 1, "stand": 1},
                         "duration_s": 1.5, "fps": 30.0})";
}

void write_small_train(const fs::path& p, int epochs) {
  std::ofstream(p) << R"({
  "model": {"state_dim": 207, "interaction_dim": 46, "contact_dim": 9,
    "latent_motion": 12, "latent_interaction": 6,
    "motion_width": 24, "motion_depth": 1, "interaction_width": 12, "interaction_depth": 1,
    "decoder_width": 32, "decoder_depth": 1, "activation": "tanh",
    "w_recon_x": 1.0, "w_recon_g": 1.0, "w_kl_m": 0.001, "w_kl_g": 0.001,
    "w_consist": 1.0, "w_contact": 0.1},
  "train": {"epochs": )" << epochs
                   << R"(, "window_len": 8, "batch_windows": 8, "learning_rate": 0.0005,
    "grad_clip": 5.0, "kl_anneal_frac": 0.25, "rollout_period": 2, "seed": 7}})";
}

void write_small_optim(const fs::path& p, int s1, int s2) {
  std::ofstream(p) << R"({"lambda_prior": 0.1, "lambda_pconsist": 1.0, "lambda_data": 1.0,
   "lambda_reg_smooth": 0.1, "lambda_reg_contact": 0.1, "stage1_iters": )"
                   << s1 << R"(, "stage2_iters": )" << s2
                   << R"(, "step_size": 0.01, "tol": 1e-7, "seed": 1,
   "gm_scale_3d": 0.25, "gm_scale_2d": 25.0, "contact_prob_thresh": 0.5,
   "contact_dist_thresh": 0.08, "optimize_bone_scale": false,
   "init_iters": 30, "init_lr": 0.05, "init_smooth": 0.5})";
}

}  // namespace

TEST_CASE("gen-data writes a complete manifest and is seed deterministic") {
  const fs::path dir_a = fresh_dir("gen_a"), dir_b = fresh_dir("gen_b");
  const fs::path cfg = dir_a / "gen.json";
  write_small_gen(cfg);

  REQUIRE(run("gen-data --config " + cfg.string() + " --out " + dir_a.string() + " --seed 9") == 0);
  REQUIRE(run("gen-data --config " + cfg.string() + " --out " + dir_b.string() + " --seed 9") == 0);

  const json manifest = json::parse(std::ifstream(dir_a / "manifest.json"));
  REQUIRE(manifest.at("files").size() == 4);
  std::vector<MotionSequence> seqs;
  for (const auto& e : manifest["files"]) {
    const std::string f = e.at("file").get<std::string>();
    CHECK(fs::exists(dir_a / f));
    CHECK(same_bytes(dir_a / f, dir_b / f));
    seqs.push_back(load_sequence((dir_a / f).string()));
  }
  // Manifest bucket counts match an independent recount.
  const auto strata = stratify_by_hip_height(seqs);
  const auto& counts = manifest.at("bucket_counts");
  CHECK(counts.at(bucket_name(0)).get<size_t>() == strata[0].size());
  CHECK(counts.at(bucket_name(1)).get<size_t>() == strata[1].size());
  CHECK(counts.at(bucket_name(2)).get<size_t>() == strata[2].size());

  // A different seed changes the data.
  const fs::path dir_c = fresh_dir("gen_c");
  REQUIRE(run("gen-data --config " + cfg.string() + " --out " + dir_c.string() + " --seed 10") == 0);
  CHECK(!same_bytes(dir_a / "seq_00002_walk.json", dir_c / "seq_00002_walk.json"));
}

TEST_CASE("train emits checkpoint plus curve, supports zero epochs and resume") {
  const fs::path dir = fresh_dir("train");
  const fs::path gen = dir / "gen.json";
  write_small_gen(gen);
  REQUIRE(run("gen-data --config " + gen.string() + " --out " + (dir / "data").string() +
              " --seed 3") == 0);

  const fs::path tcfg = dir / "train.json";
  write_small_train(tcfg, 0);
  REQUIRE(run("train --config " + tcfg.string() + " --data " + (dir / "data").string() +
              " --out " + (dir / "ckpt0.json").string()) == 0);
  CHECK(fs::exists(dir / "ckpt0.json"));
  const json curve0 = json::parse(std::ifstream(dir / "ckpt0.json.curve.json"));
  CHECK(curve0.at("rows").size() == 1);  // just the initial evaluation row

  write_small_train(tcfg, 3);
  REQUIRE(run("train --config " + tcfg.string() + " --data " + (dir / "data").string() +
              " --out " + (dir / "ckpt.json").string()) == 0);
  const json curve = json::parse(std::ifstream(dir / "ckpt.json.curve.json"));
  CHECK(curve.at("rows").size() == 4);  // eval row + one per epoch

  // Interrupted-and-resumed equals uninterrupted.
  write_small_train(tcfg, 2);
  REQUIRE(run("train --config " + tcfg.string() + " --data " + (dir / "data").string() +
              " --out " + (dir / "ckpt_r.json").string()) == 0);
  write_small_train(tcfg, 3);
  REQUIRE(run("train --config " + tcfg.string() + " --data " + (dir / "data").string() +
              " --out " + (dir / "ckpt_r.json").string() + " --resume") == 0);
  CHECK(same_bytes(dir / "ckpt.json", dir / "ckpt_r.json"));
}

TEST_CASE("fit round trip: zero budget, valid outputs, recombining report") {
  const fs::path dir = fresh_dir("fit");
  write_small_gen(dir / "gen.json");
  REQUIRE(run("gen-data --config " + (dir / "gen.json").string() + " --out " +
              (dir / "data").string() + " --seed 4") == 0);
  write_small_train(dir / "train.json", 2);
  REQUIRE(run("train --config " + (dir / "train.json").string() + " --data " +
              (dir / "data").string() + " --out " + (dir / "ckpt.json").string()) == 0);

  write_small_optim(dir / "optim0.json", 0, 0);
  REQUIRE(run("fit --ckpt " + (dir / "ckpt.json").string() + " --seq " +
              (dir / "data" / "seq_00002_walk.json").string() +
              " --sigma 0.03 --noise-seed 5 --config " + (dir / "optim0.json").string() +
              " --out " + (dir / "fit0").string()) == 0);
  const MotionSequence fitted =
      load_sequence((dir / "fit0" / "seq_00002_walk_fit.json").string());
  CHECK_NOTHROW(fitted.validate());

  write_small_optim(dir / "optim.json", 5, 8);
  REQUIRE(run("fit --ckpt " + (dir / "ckpt.json").string() + " --seq " +
              (dir / "data" / "seq_00002_walk.json").string() +
              " --sigma 0.03 --noise-seed 5 --config " + (dir / "optim.json").string() +
              " --out " + (dir / "fit1").string()) == 0);
  const json report = json::parse(std::ifstream(dir / "fit1" / "seq_00002_walk_report.json"));
  for (const auto& stage : report.at("stages")) {
    const auto& w = stage.at("weights");
    for (const auto& it : stage.at("iterations")) {
      const double recombined = w.at("prior").get<double>() * it.at("prior").get<double>() +
                                w.at("pconsist").get<double>() * it.at("pconsist").get<double>() +
                                w.at("data").get<double>() * it.at("data").get<double>() +
                                w.at("reg_smooth").get<double>() * it.at("reg_smooth").get<double>() +
                                w.at("reg_contact").get<double>() * it.at("reg_contact").get<double>();
      CHECK(std::abs(recombined - it.at("total").get<double>()) < 1e-8);
    }
  }

  // Determinism of the whole fit command.
  REQUIRE(run("fit --ckpt " + (dir / "ckpt.json").string() + " --seq " +
              (dir / "data" / "seq_00002_walk.json").string() +
              " --sigma 0.03 --noise-seed 5 --config " + (dir / "optim.json").string() +
              " --out " + (dir / "fit2").string()) == 0);
  CHECK(same_bytes(dir / "fit1" / "seq_00002_walk_fit.json",
                   dir / "fit2" / "seq_00002_walk_fit.json"));
}

TEST_CASE("eval command reports zero errors for perfect predictions and fails cleanly") {
  const fs::path dir = fresh_dir("eval");
  write_small_gen(dir / "gen.json");
  REQUIRE(run("gen-data --config " + (dir / "gen.json").string() + " --out " +
              (dir / "data").string() + " --seed 6") == 0);
  REQUIRE(run("eval --pred " + (dir / "data").string() + " --gt " + (dir / "data").string() +
              " --out " + (dir / "report.json").string()) == 0);
  const json rep = json::parse(std::ifstream(dir / "report.json"));
  CHECK(rep.at("overall").at("mpjpe_mm").get<double>() == 0.0);
  CHECK(rep.at("overall").at("contact_accuracy").get<double>() == 1.0);

  // Missing ground-truth file: config/input error, exit code 2.
  CHECK(run("eval --pred " + (dir / "data").string() + " --gt /nonexistent/gt.json --out " +
            (dir / "r2.json").string()) == 2);
}

TEST_CASE("sample command modes and horizon") {
  const fs::path dir = fresh_dir("sample");
  write_small_gen(dir / "gen.json");
  REQUIRE(run("gen-data --config " + (dir / "gen.json").string() + " --out " +
              (dir / "data").string() + " --seed 8") == 0);
  write_small_train(dir / "train.json", 1);
  REQUIRE(run("train --config " + (dir / "train.json").string() + " --data " +
              (dir / "data").string() + " --out " + (dir / "ckpt.json").string()) == 0);

  // Mean mode is seed independent.
  REQUIRE(run("sample --ckpt " + (dir / "ckpt.json").string() + " --T 20 --mode mean --seed 1 " +
              "--init-seq " + (dir / "data" / "seq_00001_stand.json").string() + " --out " +
              (dir / "mean1.json").string()) == 0);
  REQUIRE(run("sample --ckpt " + (dir / "ckpt.json").string() + " --T 20 --mode mean --seed 2 " +
              "--init-seq " + (dir / "data" / "seq_00001_stand.json").string() + " --out " +
              (dir / "mean2.json").string()) == 0);
  // Identical motion; only the seed recorded in the metadata differs.
  const MotionSequence m1 = load_sequence((dir / "mean1.json").string());
  const MotionSequence m2 = load_sequence((dir / "mean2.json").string());
  CHECK((m1.flat_states() - m2.flat_states()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(m1.frames() == 21);  // x0 plus T steps

  // Sample mode is seed reproducible but seed sensitive.
  for (const char* seed : {"5", "5", "6"}) {
    static int i = 0;
    REQUIRE(run(std::string("sample --ckpt ") + (dir / "ckpt.json").string() +
                " --T 15 --mode sample --seed " + seed + " --init-seq " +
                (dir / "data" / "seq_00001_stand.json").string() + " --out " +
                (dir / ("s" + std::to_string(i++) + ".json")).string()) == 0);
  }
  CHECK(same_bytes(dir / "s0.json", dir / "s1.json"));
  CHECK(!same_bytes(dir / "s0.json", dir / "s2.json"));
}

TEST_CASE("configuration errors exit with code 2") {
  const fs::path dir = fresh_dir("errs");
  std::ofstream(dir / "bad.json") << "{\"kinds\": {\"swim\": 3}, \"duration_s\": 2, \"fps\": 30}";
  CHECK(run("gen-data --config " + (dir / "bad.json").string() + " --out " +
            (dir / "out").string()) == 2);
  CHECK(run("train --config /nonexistent.json --data /nope --out " +
            (dir / "ckpt.json").string()) == 2);
}
