#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gam/checkpoint.hpp"
#include "gam/model.hpp"
#include "gam/sequence.hpp"

namespace gam {

struct TrainConfig {
  int epochs = 30;
  int window_len = 10;      // transitions per window
  int batch_windows = 16;   // windows per gradient step
  double learning_rate = 1e-4;
  double grad_clip = 5.0;
  double kl_anneal_frac = 0.1;  // KL weights ramp 0 -> 1 over this share of epochs
  int rollout_period = 2;       // every n-th epoch trains against own predictions
  uint64_t seed = 1;

  void validate() const {
    if (epochs < 0 || window_len < 1 || batch_windows < 1)
      throw ConfigError("train config: bad epoch/window/batch sizes");
    if (learning_rate < 0 || kl_anneal_frac < 0 || rollout_period < 1)
      throw ConfigError("train config: bad schedule values");
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"window_len", window_len},
            {"batch_windows", batch_windows},
            {"learning_rate", learning_rate},
            {"grad_clip", grad_clip},
            {"kl_anneal_frac", kl_anneal_frac},
            {"rollout_period", rollout_period},
            {"seed", seed}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
      c.epochs = j.at("epochs").get<int>();
      c.window_len = j.at("window_len").get<int>();
      c.batch_windows = j.at("batch_windows").get<int>();
      c.learning_rate = j.at("learning_rate").get<double>();
      c.grad_clip = j.at("grad_clip").get<double>();
      c.kl_anneal_frac = j.at("kl_anneal_frac").get<double>();
      c.rollout_period = j.at("rollout_period").get<int>();
      c.seed = j.at("seed").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// A contiguous slice of one sequence: states/interactions for steps 0..L and
// contact labels for transitions 1..L.
struct TrainWindow {
  MatX x;  // state_dim x (L+1)
  MatX g;  // interaction_dim x (L+1)
  MatX c;  // contact_dim x L
  GroundPlane plane;
};

inline std::vector<TrainWindow> build_windows(const std::vector<MotionSequence>& dataset,
                                              int window_len) {
  if (dataset.empty()) throw ConfigError("training: empty dataset");
  std::vector<TrainWindow> windows;
  for (const auto& seq : dataset) {
    const int frames = seq.frames();
    const MatX xs = seq.flat_states();
    MatX gs(seq.skeleton.interaction_dim(), frames);
    for (int t = 0; t < frames; ++t)
      gs.col(t) = interaction_from_state(seq.states[t], seq.plane).flatten();
    for (int start = 0; start + window_len < frames; start += window_len) {
      TrainWindow w;
      w.x = xs.middleCols(start, window_len + 1);
      w.g = gs.middleCols(start, window_len + 1);
      w.c.resize(kNumContactJoints, window_len);
      for (int t = 0; t < window_len; ++t)
        for (int k = 0; k < kNumContactJoints; ++k)
          w.c(k, t) = static_cast<double>(seq.contacts[start + 1 + t][k]);
      w.plane = seq.plane;
      windows.push_back(std::move(w));
    }
  }
  if (windows.empty()) throw ConfigError("training: sequences shorter than one window");
  return windows;
}

// Assemble a step-major TransitionBatch from a set of windows.
inline TransitionBatch make_batch(const SkeletonDef& skel, const std::vector<TrainWindow>& windows,
                                  const std::vector<int>& which, uint64_t epoch_key) {
  const int n_w = static_cast<int>(which.size());
  const int L = static_cast<int>(windows[which[0]].c.cols());
  const int sd = static_cast<int>(windows[which[0]].x.rows());
  const int gd = static_cast<int>(windows[which[0]].g.rows());
  TransitionBatch b;
  b.skeleton = skel;
  b.windows = n_w;
  b.steps = L;
  b.x_prev.resize(sd, n_w * L);
  b.x_curr.resize(sd, n_w * L);
  b.g_prev.resize(gd, n_w * L);
  b.g_curr.resize(gd, n_w * L);
  b.c_curr.resize(kNumContactJoints, n_w * L);
  b.plane.resize(n_w * L);
  b.item_seed.resize(n_w * L);
  for (int t = 0; t < L; ++t) {
    for (int i = 0; i < n_w; ++i) {
      const TrainWindow& w = windows[which[i]];
      const int col = t * n_w + i;
      b.x_prev.col(col) = w.x.col(t);
      b.x_curr.col(col) = w.x.col(t + 1);
      b.g_prev.col(col) = w.g.col(t);
      b.g_curr.col(col) = w.g.col(t + 1);
      b.c_curr.col(col) = w.c.col(t);
      b.plane[col] = w.plane;
      b.item_seed[col] = mix_seed(epoch_key, (static_cast<uint64_t>(which[i]) << 20) |
                                                 static_cast<uint64_t>(t));
    }
  }
  return b;
}

struct EpochStats {
  int epoch = 0;
  std::string mode;  // "eval", "teacher", "rollout"
  LossBreakdown loss;
};

// Optimizer state + RNG + progress; everything needed to resume training
// exactly where it stopped.
struct TrainState {
  AdamState adam;
  std::string rng_state;
  int epochs_done = 0;
  std::vector<EpochStats> curve;
};

inline nlohmann::json loss_json(const LossBreakdown& l) {
  return {{"recon_x", l.recon_x}, {"recon_g", l.recon_g}, {"kl_m", l.kl_m},
          {"kl_g", l.kl_g},       {"consist", l.consist}, {"contact", l.contact},
          {"total", l.total}};
}

inline LossBreakdown loss_from_json(const nlohmann::json& j) {
  LossBreakdown l;
  l.recon_x = j.at("recon_x").get<double>();
  l.recon_g = j.at("recon_g").get<double>();
  l.kl_m = j.at("kl_m").get<double>();
  l.kl_g = j.at("kl_g").get<double>();
  l.consist = j.at("consist").get<double>();
  l.contact = j.at("contact").get<double>();
  l.total = j.at("total").get<double>();
  return l;
}

inline void save_train_state(const std::string& path, const TrainState& s) {
  nlohmann::json j;
  j["format"] = "gam.train_state";
  j["version"] = kCheckpointVersion;
  j["epochs_done"] = s.epochs_done;
  j["rng_state"] = s.rng_state;
  j["adam_step"] = s.adam.step;
  nlohmann::json moments = nlohmann::json::array();
  for (size_t i = 0; i < s.adam.m.size(); ++i) {
    moments.push_back(
        {{"m", std::vector<double>(s.adam.m[i].data(), s.adam.m[i].data() + s.adam.m[i].size())},
         {"v", std::vector<double>(s.adam.v[i].data(), s.adam.v[i].data() + s.adam.v[i].size())}});
  }
  j["adam"] = std::move(moments);
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& e : s.curve)
    curve.push_back({{"epoch", e.epoch}, {"mode", e.mode}, {"loss", loss_json(e.loss)}});
  j["curve"] = std::move(curve);
  std::ofstream out(path);
  if (!out) throw FormatError("train state: cannot write " + path);
  out << j.dump() << "\n";
}

inline TrainState load_train_state(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("train state: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": invalid train state: " + e.what());
  }
  if (!j.contains("format") || j["format"] != "gam.train_state")
    throw FormatError(path + ": not a train-state file");
  TrainState s;
  s.epochs_done = j.at("epochs_done").get<int>();
  s.rng_state = j.at("rng_state").get<std::string>();
  s.adam.step = j.at("adam_step").get<long>();
  for (const auto& jm : j.at("adam")) {
    const auto m = jm.at("m").get<std::vector<double>>();
    const auto v = jm.at("v").get<std::vector<double>>();
    s.adam.m.push_back(Eigen::Map<const VecX>(m.data(), m.size()));
    s.adam.v.push_back(Eigen::Map<const VecX>(v.data(), v.size()));
  }
  for (const auto& je : j.at("curve")) {
    EpochStats e;
    e.epoch = je.at("epoch").get<int>();
    e.mode = je.at("mode").get<std::string>();
    e.loss = loss_from_json(je.at("loss"));
    s.curve.push_back(e);
  }
  return s;
}

// Mean loss over all windows without touching the weights.
inline LossBreakdown evaluate_dataset(const ModelWeights& w, const SkeletonDef& skel,
                                      const std::vector<TrainWindow>& windows, uint64_t seed) {
  LossBreakdown total;
  long items = 0;
  const int chunk = 256;
  for (size_t start = 0; start < windows.size(); start += chunk) {
    std::vector<int> which;
    for (size_t i = start; i < std::min(windows.size(), start + chunk); ++i)
      which.push_back(static_cast<int>(i));
    const TransitionBatch b = make_batch(skel, windows, which, mix_seed(seed, 0xe7a1));
    LossBreakdown bd;
    training_loss(w, b, LossMode::teacher_forced, seed, &bd);
    const long n = b.items();
    total.recon_x += bd.recon_x * n;
    total.recon_g += bd.recon_g * n;
    total.kl_m += bd.kl_m * n;
    total.kl_g += bd.kl_g * n;
    total.consist += bd.consist * n;
    total.contact += bd.contact * n;
    total.total += bd.total * n;
    items += n;
  }
  total.recon_x /= items;
  total.recon_g /= items;
  total.kl_m /= items;
  total.kl_g /= items;
  total.consist /= items;
  total.contact /= items;
  total.total /= items;
  return total;
}

// Gradient training over windowed transitions, alternating teacher-forced
// epochs with autoregressive-rollout epochs. Deterministic for a fixed seed
// in single-threaded use. Appends to `state` so a resumed run continues the
// interrupted one exactly.
inline std::vector<EpochStats> train(ModelWeights& w, const SkeletonDef& skel,
                                     const std::vector<TrainWindow>& windows,
                                     const TrainConfig& cfg, TrainState& state) {
  cfg.validate();
  ParamSpans params = w.param_spans();
  if (state.adam.m.empty()) state.adam = AdamState::zeros_like(params);
  Rng rng(cfg.seed ^ 0x452821e638d01377ULL);
  if (!state.rng_state.empty()) rng.deserialize(state.rng_state);

  if (state.epochs_done == 0 && state.curve.empty()) {
    EpochStats e0;
    e0.epoch = 0;
    e0.mode = "eval";
    e0.loss = evaluate_dataset(w, skel, windows, cfg.seed);
    state.curve.push_back(e0);
  }

  const int anneal_epochs =
      std::max(1, static_cast<int>(std::lround(cfg.kl_anneal_frac * cfg.epochs)));
  for (int epoch = state.epochs_done + 1; epoch <= cfg.epochs; ++epoch) {
    const bool rollout_epoch = (epoch % cfg.rollout_period == 0) && cfg.rollout_period > 1;
    const double kl_scale = std::min(1.0, static_cast<double>(epoch) / anneal_epochs);
    const std::vector<int> order = rng.permutation(static_cast<int>(windows.size()));

    LossBreakdown epoch_mean;
    long items = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_windows) {
      std::vector<int> which(order.begin() + start,
                             order.begin() + std::min(order.size(),
                                                      start + cfg.batch_windows));
      const uint64_t batch_key = rng.integer();
      const TransitionBatch batch = make_batch(skel, windows, which, batch_key);
      ModelGrads grads = ModelGrads::zeros_like(w);
      LossBreakdown bd;
      try {
        training_loss(w, batch, rollout_epoch ? LossMode::rollout : LossMode::teacher_forced,
                      batch_key, &bd, &grads, kl_scale);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": " +
                           e.what());
      }
      ParamSpans gspans = grads.param_spans();
      adam_step(params, gspans, state.adam, cfg.learning_rate, cfg.grad_clip);
      const long n = batch.items();
      epoch_mean.recon_x += bd.recon_x * n;
      epoch_mean.recon_g += bd.recon_g * n;
      epoch_mean.kl_m += bd.kl_m * n;
      epoch_mean.kl_g += bd.kl_g * n;
      epoch_mean.consist += bd.consist * n;
      epoch_mean.contact += bd.contact * n;
      epoch_mean.total += bd.total * n;
      items += n;
    }
    epoch_mean.recon_x /= items;
    epoch_mean.recon_g /= items;
    epoch_mean.kl_m /= items;
    epoch_mean.kl_g /= items;
    epoch_mean.consist /= items;
    epoch_mean.contact /= items;
    epoch_mean.total /= items;

    EpochStats es;
    es.epoch = epoch;
    es.mode = rollout_epoch ? "rollout" : "teacher";
    es.loss = epoch_mean;
    state.curve.push_back(es);
    state.epochs_done = epoch;
    state.rng_state = rng.serialize();
  }
  return state.curve;
}

}  // namespace gam
