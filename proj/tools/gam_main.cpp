// Command-line driver: data generation, training, fitting, evaluation, and
// prior rollouts, each writing a manifest that pins the exact configuration
// and seed needed to reproduce the run.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gam/checkpoint.hpp"
#include "gam/fit.hpp"
#include "gam/metrics.hpp"
#include "gam/model.hpp"
#include "gam/sequence.hpp"
#include "gam/synth.hpp"
#include "gam/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw gam::ConfigError("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw gam::FormatError(path + ": invalid JSON: " + e.what());
  }
  return j;
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw gam::FormatError("cannot write " + path);
  out << j.dump(2) << "\n";
}

void write_manifest(const fs::path& dir, const std::string& command, uint64_t seed,
                    const json& config, const json& extra) {
  json m;
  m["command"] = command;
  m["seed"] = seed;
  m["config"] = config;
  m["threads_note"] = "outputs are per-sequence deterministic; --jobs does not change content";
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  write_json((dir / "manifest.json").string(), m);
}

// Run fn(i) for i in [0, n) on up to `jobs` threads. Exceptions are
// collected and the first one rethrown after the pool drains.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(jobs);
  for (int w = 0; w < jobs; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
        next = n;
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct GenSpec {
  std::vector<std::pair<gam::MotionKind, int>> kinds;
  double duration_s = 3.0;
  double fps = 30.0;
  double tilt_max_deg = 0.0;
  double tilt_fraction = 0.0;
  gam::SkeletonDef skeleton = gam::SkeletonDef::default_skeleton();

  static GenSpec from_json(const json& j, const std::string& skeleton_path) {
    GenSpec s;
    try {
      for (auto it = j.at("kinds").begin(); it != j.at("kinds").end(); ++it)
        s.kinds.emplace_back(gam::motion_kind_from_string(it.key()), it.value().get<int>());
      s.duration_s = j.at("duration_s").get<double>();
      s.fps = j.at("fps").get<double>();
      if (j.contains("tilt_max_deg")) s.tilt_max_deg = j["tilt_max_deg"].get<double>();
      if (j.contains("tilt_fraction")) s.tilt_fraction = j["tilt_fraction"].get<double>();
    } catch (const json::exception& e) {
      throw gam::ConfigError(std::string("generator config: ") + e.what());
    }
    if (!skeleton_path.empty()) s.skeleton = gam::SkeletonDef::load(skeleton_path);
    if (s.kinds.empty()) throw gam::ConfigError("generator config: no kinds requested");
    return s;
  }
};

gam::MotionSequence generate_one(const GenSpec& spec, gam::MotionKind kind, uint64_t seq_seed) {
  gam::MotionSequence seq =
      gam::generate_sequence(spec.skeleton, kind, spec.duration_s, spec.fps, seq_seed);
  if (spec.tilt_max_deg > 0) {
    gam::Rng rng(gam::mix_seed(seq_seed, 0x7117));
    if (rng.uniform() < spec.tilt_fraction) {
      const double az = rng.uniform(-M_PI, M_PI);
      const double ang = rng.uniform(0.0, spec.tilt_max_deg * M_PI / 180.0);
      const gam::Vec3 axis(std::cos(az), std::sin(az), 0.0);
      seq = gam::transform_sequence(seq, gam::axis_angle_to_matrix(ang * axis),
                                    gam::Vec3::Zero());
    }
  }
  return seq;
}

int cmd_gen_data(const std::string& config_path, const std::string& skeleton_path,
                 const std::string& out_dir, uint64_t seed, int jobs) {
  const json cfg_json = read_json(config_path);
  const GenSpec spec = GenSpec::from_json(cfg_json, skeleton_path);
  fs::create_directories(out_dir);

  struct Task {
    gam::MotionKind kind;
    uint64_t seed;
    std::string file;
  };
  std::vector<Task> tasks;
  int idx = 0;
  for (const auto& [kind, count] : spec.kinds) {
    for (int i = 0; i < count; ++i, ++idx) {
      char name[64];
      std::snprintf(name, sizeof(name), "seq_%05d_%s.json", idx, gam::to_string(kind).c_str());
      tasks.push_back({kind, gam::mix_seed(seed, static_cast<uint64_t>(idx)), name});
    }
  }
  std::vector<json> entries(tasks.size());
  std::vector<gam::MotionSequence> seqs(tasks.size());
  parallel_for(static_cast<int>(tasks.size()), jobs, [&](int i) {
    seqs[i] = generate_one(spec, tasks[i].kind, tasks[i].seed);
    gam::save_sequence((fs::path(out_dir) / tasks[i].file).string(), seqs[i]);
    entries[i] = {{"file", tasks[i].file},
                  {"kind", gam::to_string(tasks[i].kind)},
                  {"seed", tasks[i].seed},
                  {"min_hip_height", gam::min_hip_height(seqs[i])},
                  {"bucket", gam::bucket_name(gam::hip_height_bucket(gam::min_hip_height(seqs[i])))}};
  });
  const auto strata = gam::stratify_by_hip_height(seqs);
  json extra;
  extra["files"] = entries;
  extra["bucket_counts"] = {{gam::bucket_name(0), strata[0].size()},
                            {gam::bucket_name(1), strata[1].size()},
                            {gam::bucket_name(2), strata[2].size()}};
  write_manifest(out_dir, "gen-data", seed, cfg_json, extra);
  std::cout << "wrote " << tasks.size() << " sequences to " << out_dir << "\n";
  return 0;
}

std::vector<std::string> manifest_files(const std::string& dir) {
  const json m = read_json((fs::path(dir) / "manifest.json").string());
  std::vector<std::string> files;
  for (const auto& e : m.at("files")) {
    if (e.is_string())
      files.push_back((fs::path(dir) / e.get<std::string>()).string());
    else
      files.push_back((fs::path(dir) / e.at("file").get<std::string>()).string());
  }
  return files;
}

std::vector<gam::MotionSequence> load_dataset(const std::string& path) {
  std::vector<gam::MotionSequence> seqs;
  if (fs::is_directory(path)) {
    for (const auto& f : manifest_files(path)) seqs.push_back(gam::load_sequence(f));
  } else {
    seqs.push_back(gam::load_sequence(path));
  }
  if (seqs.empty()) throw gam::ConfigError("no sequences found in " + path);
  return seqs;
}

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out_path, int64_t seed_override, bool resume, int epochs_override) {
  const json full = read_json(config_path);
  gam::ModelConfig mc = gam::ModelConfig::from_json(full.at("model"));
  gam::TrainConfig tc = gam::TrainConfig::from_json(full.at("train"));
  if (seed_override >= 0) tc.seed = static_cast<uint64_t>(seed_override);
  if (epochs_override >= 0) tc.epochs = epochs_override;

  const auto dataset = load_dataset(data_path);
  const gam::SkeletonDef skel = dataset.front().skeleton;
  for (const auto& s : dataset)
    if (s.skeleton.joint_count != skel.joint_count)
      throw gam::DimensionError("training data mixes skeletons");
  const auto windows = gam::build_windows(dataset, tc.window_len);

  const std::string state_path = out_path + ".state.json";
  const std::string curve_path = out_path + ".curve.json";
  gam::ModelWeights weights =
      resume ? gam::load_weights(out_path, mc) : gam::ModelWeights::init(mc, tc.seed);
  gam::TrainState state;
  if (resume) state = gam::load_train_state(state_path);

  const auto curve = gam::train(weights, skel, windows, tc, state);
  gam::save_weights(out_path, weights);
  gam::save_train_state(state_path, state);

  json jcurve;
  jcurve["format"] = "gam.loss_curve";
  jcurve["version"] = 1;
  json rows = json::array();
  for (const auto& e : curve)
    rows.push_back({{"epoch", e.epoch}, {"mode", e.mode}, {"loss", gam::loss_json(e.loss)}});
  jcurve["rows"] = rows;
  write_json(curve_path, jcurve);

  json extra;
  extra["checkpoint"] = out_path;
  extra["curve"] = curve_path;
  extra["epochs_done"] = state.epochs_done;
  extra["windows"] = windows.size();
  write_manifest(fs::path(out_path).parent_path(), "train", tc.seed, full, extra);
  std::cout << "trained " << state.epochs_done << " epochs; final loss "
            << curve.back().loss.total << "\n";
  return 0;
}

gam::OptimConfig load_optim_config(const std::string& path, int64_t seed_override) {
  gam::OptimConfig oc = path.empty() ? gam::OptimConfig{} : gam::OptimConfig::from_json(read_json(path));
  if (seed_override >= 0) oc.seed = static_cast<uint64_t>(seed_override);
  return oc;
}

int cmd_fit(const std::string& ckpt_path, const std::string& seq_path,
            const std::string& obs_path, double sigma, uint64_t noise_seed,
            const std::string& config_path, const std::string& out_dir, int64_t seed_override,
            int jobs, bool unknown_ground) {
  const gam::ModelWeights model = gam::load_weights(ckpt_path);
  const gam::OptimConfig cfg = load_optim_config(config_path, seed_override);
  fs::create_directories(out_dir);

  std::vector<std::string> gt_files;
  if (!seq_path.empty()) {
    if (fs::is_directory(seq_path))
      gt_files = manifest_files(seq_path);
    else
      gt_files.push_back(seq_path);
  } else if (obs_path.empty()) {
    throw gam::ConfigError("fit: provide --seq or --obs");
  }

  const int n = gt_files.empty() ? 1 : static_cast<int>(gt_files.size());
  std::vector<json> entries(n);
  parallel_for(n, jobs, [&](int i) {
    gam::ObservationSequence obs;
    gam::SkeletonDef skel = gam::SkeletonDef::default_skeleton();
    std::optional<gam::GroundPlane> plane;
    std::string base = "observations";
    if (!gt_files.empty()) {
      const gam::MotionSequence gt = gam::load_sequence(gt_files[i]);
      skel = gt.skeleton;
      plane = gt.plane;
      obs = gam::perturb_observations(gt, sigma, gam::mix_seed(noise_seed, i));
      base = fs::path(gt_files[i]).stem().string();
    } else {
      obs = gam::load_observations(obs_path);
      base = fs::path(obs_path).stem().string();
    }
    gam::FitResult result;
    if (unknown_ground) {
      result = gam::fit_with_ground(obs, model, skel, cfg);
    } else {
      if (!plane) throw gam::ConfigError("fit: fixed-ground fitting needs --seq for the plane");
      result = gam::fit_fixed_ground(obs, *plane, model, skel, cfg);
    }
    const std::string fit_file = base + "_fit.json";
    const std::string report_file = base + "_report.json";
    gam::save_sequence((fs::path(out_dir) / fit_file).string(), result.sequence);
    gam::save_fit_report((fs::path(out_dir) / report_file).string(), result.report);
    entries[i] = {{"file", fit_file},
                  {"report", report_file},
                  {"source", gt_files.empty() ? obs_path : gt_files[i]},
                  {"diverged", result.report.diverged},
                  {"final_total", result.report.final_total}};
    if (unknown_ground)
      entries[i]["plane"] = {{"normal", {result.plane.normal.x(), result.plane.normal.y(),
                                         result.plane.normal.z()}},
                             {"offset", result.plane.offset}};
  });

  json extra;
  extra["files"] = entries;
  extra["checkpoint"] = ckpt_path;
  extra["sigma"] = sigma;
  extra["noise_seed"] = noise_seed;
  write_manifest(out_dir, unknown_ground ? "fit-ground" : "fit", cfg.seed, cfg.to_json(), extra);
  std::cout << "fitted " << n << " sequence(s) into " << out_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& pred_path, const std::string& gt_path,
             const std::string& out_path) {
  const auto pred = load_dataset(pred_path);
  const auto gt = load_dataset(gt_path);
  const gam::EvalReport report = gam::evaluate(pred, gt);
  gam::save_report(out_path, report);
  std::cout << "mpjpe " << report.overall.mpjpe << " mm, mpjpe_g " << report.overall.mpjpe_g
            << " mm, mpjpe_pa " << report.overall.mpjpe_pa << " mm, contact_acc "
            << report.overall.contact_accuracy << ", accel " << report.overall.accel_mag
            << ", plane_cos " << report.overall.plane_cos << "\n";
  return 0;
}

int cmd_sample(const std::string& ckpt_path, int horizon, const std::string& mode_str,
               uint64_t seed, const std::string& init_seq_path, int init_frame,
               const std::string& out_path) {
  const gam::ModelWeights model = gam::load_weights(ckpt_path);
  const gam::RolloutMode mode = gam::rollout_mode_from_string(mode_str);

  gam::SkeletonDef skel = gam::SkeletonDef::default_skeleton();
  gam::MotionSequence init;
  if (!init_seq_path.empty()) {
    init = gam::load_sequence(init_seq_path);
    skel = init.skeleton;
  } else {
    init = gam::generate_sequence(skel, gam::MotionKind::stand, 1.0, 30.0, seed);
  }
  if (init_frame < 0 || init_frame >= init.frames())
    throw gam::ConfigError("sample: init frame out of range");
  const gam::VecX x0 = gam::flatten_state(skel, init.states[init_frame]);
  const gam::VecX g0 =
      gam::interaction_from_state(init.states[init_frame], init.plane).flatten();
  const gam::RolloutResult roll =
      gam::rollout(model, x0, g0, horizon, mode, seed, &init.plane, &skel);

  // Materialize with recomputed velocity fields and contacts so the output
  // file satisfies the sequence invariants.
  gam::MotionSequence seq;
  seq.fps = init.fps;
  seq.skeleton = skel;
  seq.plane = init.plane;
  seq.generator = std::string("rollout_") + mode_str;
  seq.seed = seed;
  const int frames = static_cast<int>(roll.x.cols());
  std::vector<gam::MatX> joints(frames), roots(frames), orients(frames);
  std::vector<gam::MotionState> states(frames);
  for (int t = 0; t < frames; ++t) {
    states[t] = gam::unflatten_state(skel, roll.x.col(t));
    joints[t] = states[t].joints;
    roots[t] = states[t].pose.root_translation;
    orients[t] = states[t].pose.root_orientation;
  }
  const auto jv = gam::compute_velocities(joints, seq.fps);
  const auto rv = gam::compute_velocities(roots, seq.fps);
  const auto av = gam::compute_velocities(orients, seq.fps);
  for (int t = 0; t < frames; ++t) {
    states[t].joint_velocities = jv[t];
    states[t].root_velocity = rv[t];
    states[t].root_angular_velocity = av[t];
    seq.states.push_back(states[t]);
    seq.contacts.push_back(
        gam::contact_labels(gam::interaction_from_state(states[t], seq.plane), skel));
  }
  gam::save_sequence(out_path, seq);

  json extra;
  extra["output"] = out_path;
  extra["mode"] = mode_str;
  extra["horizon"] = horizon;
  extra["checkpoint"] = ckpt_path;
  json cfg;
  cfg["init_seq"] = init_seq_path;
  cfg["init_frame"] = init_frame;
  write_manifest(fs::path(out_path).parent_path(), "sample", seed, cfg, extra);
  std::cout << "rolled out " << horizon << " steps to " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"motion reconstruction with a ground-interaction transition prior"};
  app.require_subcommand(1);

  std::function<int()> run;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate synthetic motion sequences");
  {
    static std::string config, out, skeleton;
    static uint64_t seed = 1;
    static int jobs = 1;
    gen->add_option("--config", config, "generator config JSON")->required();
    gen->add_option("--out", out, "output directory")->required();
    gen->add_option("--seed", seed, "base seed");
    gen->add_option("--jobs", jobs, "parallel workers across sequences");
    gen->add_option("--skeleton", skeleton, "skeleton config JSON (default built-in)");
    gen->callback([&] { run = [=] { return cmd_gen_data(config, skeleton, out, seed, jobs); }; });
  }

  // train
  auto* tr = app.add_subcommand("train", "train the transition model");
  {
    static std::string config, data, out;
    static int64_t seed = -1;
    static int epochs = -1;
    static bool resume = false;
    tr->add_option("--config", config, "JSON with {\"model\":{...},\"train\":{...}}")->required();
    tr->add_option("--data", data, "dataset directory (with manifest) or one sequence")->required();
    tr->add_option("--out", out, "checkpoint output path")->required();
    tr->add_option("--seed", seed, "override the training seed");
    tr->add_option("--epochs", epochs, "override the epoch count");
    tr->add_flag("--resume", resume, "continue from the saved checkpoint/state");
    tr->callback([&] { run = [=] { return cmd_train(config, data, out, seed, resume, epochs); }; });
  }

  // fit (fixed ground) and fit-ground (unknown ground)
  for (const bool unknown : {false, true}) {
    auto* f = app.add_subcommand(unknown ? "fit-ground" : "fit",
                                 unknown ? "reconstruct motion and ground plane from noisy joints"
                                         : "denoise motion against a known ground plane");
    static std::string ckpt[2], seq[2], obs[2], config[2], out[2];
    static double sigma[2] = {0.04, 0.04};
    static uint64_t noise_seed[2] = {1, 1};
    static int64_t seed[2] = {-1, -1};
    static int jobs[2] = {1, 1};
    const int k = unknown ? 1 : 0;
    f->add_option("--ckpt", ckpt[k], "trained checkpoint")->required();
    f->add_option("--seq", seq[k], "ground-truth sequence file or dataset dir");
    f->add_option("--obs", obs[k], "observation file (alternative to --seq)");
    f->add_option("--sigma", sigma[k], "observation noise std in meters (with --seq)");
    f->add_option("--noise-seed", noise_seed[k], "noise seed (with --seq)");
    f->add_option("--config", config[k], "optimizer config JSON (default built-in)");
    f->add_option("--out", out[k], "output directory")->required();
    f->add_option("--seed", seed[k], "override the optimizer seed");
    f->add_option("--jobs", jobs[k], "parallel workers across sequences");
    f->callback([&, k, unknown] {
      run = [=] {
        return cmd_fit(ckpt[k], seq[k], obs[k], sigma[k], noise_seed[k], config[k], out[k],
                       seed[k], jobs[k], unknown);
      };
    });
  }

  // eval
  auto* ev = app.add_subcommand("eval", "compute reconstruction metrics");
  {
    static std::string pred, gt, out;
    ev->add_option("--pred", pred, "predicted sequence file or dataset dir")->required();
    ev->add_option("--gt", gt, "ground-truth sequence file or dataset dir")->required();
    ev->add_option("--out", out, "report output path")->required();
    ev->callback([&] { run = [=] { return cmd_eval(pred, gt, out); }; });
  }

  // sample
  auto* sm = app.add_subcommand("sample", "roll the prior out autoregressively");
  {
    static std::string ckpt, mode = "mean", init_seq, out;
    static int horizon = 90, init_frame = 0;
    static uint64_t seed = 1;
    sm->add_option("--ckpt", ckpt, "trained checkpoint")->required();
    sm->add_option("--T", horizon, "rollout steps");
    sm->add_option("--mode", mode, "mean or sample");
    sm->add_option("--seed", seed, "sampling seed");
    sm->add_option("--init-seq", init_seq, "sequence supplying the initial state");
    sm->add_option("--init-frame", init_frame, "frame of --init-seq to start from");
    sm->add_option("--out", out, "output sequence path")->required();
    sm->callback([&] {
      run = [=] { return cmd_sample(ckpt, horizon, mode, seed, init_seq, init_frame, out); };
    });
  }

  CLI11_PARSE(app, argc, argv);
  try {
    return run();
  } catch (const gam::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const gam::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
}
