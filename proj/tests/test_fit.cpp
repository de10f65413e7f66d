#include <catch2/catch_amalgamated.hpp>

#include "gam/fit.hpp"
#include "test_util.hpp"

using namespace gam;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.latent_motion = 6;
  c.latent_interaction = 4;
  c.motion_width = 12;
  c.motion_depth = 1;
  c.interaction_width = 8;
  c.interaction_depth = 1;
  c.decoder_width = 16;
  c.decoder_depth = 1;
  return c;
}

// Generic weights whose contact logits sit decisively away from the gating
// threshold, so finite differences cannot flip a gate.
ModelWeights generic_model(uint64_t seed, double scale = 0.08) {
  ModelWeights w = ModelWeights::init(tiny_config(), seed);
  Rng rng(seed ^ 0x5bd1e995);
  ParamSpans spans = w.param_spans();
  for (size_t i = 0; i < spans.count(); ++i) spans.add_to(i, scale * rng.normal());
  for (int k = 0; k < w.config.contact_dim; ++k)
    w.head_contact.b[k] = (k % 2 ? 1.5 : -1.5) + 0.2 * rng.normal();
  return w;
}

OptimVariables random_vars(const ModelWeights& model, int T, Rng& rng, bool with_plane) {
  OptimVariables v;
  v.x0 = rng.normal_vec(model.config.state_dim, 0.5);
  v.g0 = rng.normal_vec(model.config.interaction_dim, 0.5);
  v.z_m = rng.normal_mat(model.config.latent_motion, T, 0.5);
  v.z_g = rng.normal_mat(model.config.latent_interaction, T, 0.5);
  v.has_plane_var = with_plane;
  v.plane_raw = Vec4(0.2 * rng.normal(), 0.2 * rng.normal(), 1.0 + 0.2 * rng.normal(),
                     rng.normal());
  return v;
}

ObservationSequence random_obs(const SkeletonDef& skel, int frames, Rng& rng) {
  ObservationSequence obs;
  obs.fps = 30.0;
  for (int t = 0; t < frames; ++t) obs.joints_3d.push_back(rng.normal_mat(skel.joint_count, 3));
  return obs;
}

void zero_model(ModelWeights& w) {
  ParamSpans spans = w.param_spans();
  spans.set_zero();
}

}  // namespace

TEST_CASE("prior loss is minimized at the prior means") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  ModelWeights model = generic_model(1);
  Rng rng(2);
  const int T = 5;
  OptimVariables vars = random_vars(model, T, rng, false);
  const ObservationSequence obs = random_obs(skel, T + 1, rng);
  const GroundPlane plane;
  OptimConfig cfg;

  // Set every latent to its prior mean along the rollout.
  const StageWeights only_prior{1, 0, 0, 0, 0};
  for (int pass = 0; pass < 3; ++pass) {
    const FitEval ev =
        evaluate_fit_objective(model, skel, vars, obs, &plane, cfg, only_prior, false);
    for (int t = 1; t <= T; ++t) {
      vars.z_m.col(t - 1) = prior_motion(model, ev.states.col(t - 1)).mean;
      vars.z_g.col(t - 1) = prior_interaction(model, ev.interactions.col(t - 1)).mean;
    }
  }
  const double at_mean = loss_prior(model, skel, vars, obs, plane, cfg);

  // Normalization terms only: 0.5 * sum(lv + log 2pi) along the rollout.
  const FitEval ev = evaluate_fit_objective(model, skel, vars, obs, &plane, cfg, only_prior, false);
  double expect = 0;
  for (int t = 1; t <= T; ++t) {
    const GaussianParams pm = prior_motion(model, ev.states.col(t - 1));
    const GaussianParams pg = prior_interaction(model, ev.interactions.col(t - 1));
    expect += 0.5 * (pm.log_var.array() + std::log(2 * M_PI)).sum();
    expect += 0.5 * (pg.log_var.array() + std::log(2 * M_PI)).sum();
  }
  CHECK(at_mean == Catch::Approx(expect).margin(1e-8));

  // Any perturbation of a latent increases the prior loss.
  OptimVariables bumped = vars;
  bumped.z_m(2, 1) += 0.3;
  CHECK(loss_prior(model, skel, bumped, obs, plane, cfg) > at_mean);

  // Doubling one deviation quadruples its quadratic contribution. The last
  // step's latent feeds no later prior, so with it sitting exactly at its
  // conditional mean the effect is purely quadratic.
  {
    const FitEval ev2 =
        evaluate_fit_objective(model, skel, vars, obs, &plane, cfg, only_prior, false);
    vars.z_m.col(T - 1) = prior_motion(model, ev2.states.col(T - 1)).mean;
    vars.z_g.col(T - 1) = prior_interaction(model, ev2.interactions.col(T - 1)).mean;
  }
  const double at_exact = loss_prior(model, skel, vars, obs, plane, cfg);
  OptimVariables dev1 = vars, dev2 = vars;
  dev1.z_m(0, T - 1) += 0.2;
  dev2.z_m(0, T - 1) += 0.4;
  const double q1 = loss_prior(model, skel, dev1, obs, plane, cfg) - at_exact;
  const double q2 = loss_prior(model, skel, dev2, obs, plane, cfg) - at_exact;
  CHECK(q2 == Catch::Approx(4.0 * q1).epsilon(1e-6));
}

TEST_CASE("pconsist vanishes when the decoder reproduces the plane geometry") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  ModelWeights model = ModelWeights::init(tiny_config(), 3);
  zero_model(model);
  Rng rng(4);
  OptimVariables vars = random_vars(model, 4, rng, false);
  const GroundPlane plane = normalize_plane(Vec4(0.1, -0.2, 1.0, 0.4));
  // Frozen rollout: x_t = x0; make the interaction head output exactly f(x0).
  model.head_interaction.b = interaction_from_flat(skel, vars.x0, plane);
  const ObservationSequence obs = random_obs(skel, 5, rng);
  OptimConfig cfg;
  CHECK(loss_pconsist(model, skel, vars, obs, plane, cfg) < 1e-20);

  // An epsilon on one distance entry raises the loss by epsilon^2 per step.
  model.head_interaction.b[3] += 0.01;
  CHECK(loss_pconsist(model, skel, vars, obs, plane, cfg) ==
        Catch::Approx(4 * 0.01 * 0.01).epsilon(1e-9));
}

TEST_CASE("pconsist matches a per-frame oracle on a random rollout") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  ModelWeights model = generic_model(5);
  Rng rng(6);
  const int T = 6;
  OptimVariables vars = random_vars(model, T, rng, false);
  const GroundPlane plane = normalize_plane(Vec4(0.3, 0.1, 0.9, -0.2));
  const ObservationSequence obs = random_obs(skel, T + 1, rng);
  OptimConfig cfg;
  const StageWeights sw{0, 1, 0, 0, 0};
  const FitEval ev = evaluate_fit_objective(model, skel, vars, obs, &plane, cfg, sw, false);
  double oracle = 0;
  for (int t = 1; t <= T; ++t)
    oracle +=
        (ev.interactions.col(t) - interaction_from_flat(skel, ev.states.col(t), plane)).squaredNorm();
  CHECK(ev.terms.pconsist == Catch::Approx(oracle).margin(1e-8));
  CHECK(ev.total == Catch::Approx(oracle).margin(1e-8));
}

TEST_CASE("data loss: exact fit, robustness saturation, and per-joint oracle") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  ModelWeights model = ModelWeights::init(tiny_config(), 7);
  zero_model(model);
  Rng rng(8);
  OptimVariables vars = random_vars(model, 3, rng, false);
  const GroundPlane plane;
  OptimConfig cfg;

  // Frozen rollout equals the observations: zero data loss.
  ObservationSequence obs;
  obs.fps = 30;
  const MotionState s0 = unflatten_state(skel, vars.x0);
  for (int t = 0; t < 4; ++t) obs.joints_3d.push_back(s0.joints);
  CHECK(loss_data(model, skel, vars, obs, plane, cfg) == 0.0);

  // One 10 m outlier saturates near s^2.
  ObservationSequence outlier = obs;
  outlier.joints_3d[2](5, 0) += 10.0;
  const double sat = cfg.gm_scale_3d * cfg.gm_scale_3d;
  const double loss = loss_data(model, skel, vars, outlier, plane, cfg);
  CHECK(loss < 1.01 * sat);
  CHECK(loss > 0.9 * sat);

  // Random instance against a direct per-joint recomputation.
  ModelWeights gen = generic_model(9);
  OptimVariables rv = random_vars(gen, 4, rng, false);
  const ObservationSequence robs = random_obs(skel, 5, rng);
  const StageWeights sw{0, 0, 1, 0, 0};
  const FitEval ev = evaluate_fit_objective(gen, skel, rv, robs, &plane, cfg, sw, false);
  double oracle = 0;
  const int oj = offset_joints(skel);
  for (int t = 0; t <= 4; ++t)
    for (int j = 0; j < skel.joint_count; ++j) {
      const double q =
          (ev.states.col(t).segment<3>(oj + 3 * j) - robs.joints_3d[t].row(j).transpose())
              .squaredNorm();
      oracle += cfg.gm_scale_3d * cfg.gm_scale_3d * q / (cfg.gm_scale_3d * cfg.gm_scale_3d + q);
    }
  CHECK(ev.terms.data == Catch::Approx(oracle).margin(1e-8));
}

TEST_CASE("regularizers: frozen rollout is smooth, no contacts means no contact term") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  ModelWeights model = ModelWeights::init(tiny_config(), 10);
  zero_model(model);
  model.head_contact.b.setConstant(-20.0);  // never predicted in contact
  Rng rng(11);
  OptimVariables vars = random_vars(model, 5, rng, false);
  const GroundPlane plane;
  const ObservationSequence obs = random_obs(skel, 6, rng);
  OptimConfig cfg;
  CHECK(loss_reg_smooth(model, skel, vars, obs, plane, cfg) == 0.0);
  CHECK(loss_reg_contact(model, skel, vars, obs, plane, cfg) == 0.0);

  // Random instance against direct recomputation.
  ModelWeights gen = generic_model(12);
  OptimVariables rv = random_vars(gen, 5, rng, false);
  const StageWeights sw{0, 0, 0, 1, 1};
  const FitEval ev = evaluate_fit_objective(gen, skel, rv, obs, &plane, cfg, sw, false);
  const int oj = offset_joints(skel), ov = offset_joint_vel(skel);
  double smooth = 0, contact = 0;
  for (int t = 1; t < 5; ++t)
    smooth += (ev.states.col(t + 1).segment(oj, 66) - 2 * ev.states.col(t).segment(oj, 66) +
               ev.states.col(t - 1).segment(oj, 66))
                  .squaredNorm();
  for (int t = 1; t <= 5; ++t)
    for (int k = 0; k < kNumContactJoints; ++k) {
      if (ev.contact_probs(k, t - 1) <= 0.5) continue;
      const int j = skel.contact_joint_indices[k];
      const double d = plane.normal.dot(ev.states.col(t).segment<3>(oj + 3 * j)) + plane.offset;
      const double vn = plane.normal.dot(ev.states.col(t).segment<3>(ov + 3 * j));
      const double over = std::max(0.0, std::abs(d) - cfg.contact_dist_thresh);
      contact += vn * vn + over * over;
    }
  CHECK(ev.terms.reg_smooth == Catch::Approx(smooth).margin(1e-8));
  CHECK(ev.terms.reg_contact == Catch::Approx(contact).margin(1e-8));
}

namespace {

// Finite-difference check of one variable block via ParamSpans over its data.
void check_block(const ModelWeights& model, const SkeletonDef& skel, OptimVariables& vars,
                 const ObservationSequence& obs, const GroundPlane* plane,
                 const OptimConfig& cfg, const StageWeights& sw, int block, int trials,
                 Rng& pick) {
  const FitEval ev = evaluate_fit_objective(model, skel, vars, obs, plane, cfg, sw, true);
  FitGrads g = ev.grads;
  ParamSpans p, gs;
  switch (block) {
    case 0: p.add(vars.x0); gs.add(g.d_x0); break;
    case 1: p.add(vars.g0); gs.add(g.d_g0); break;
    case 2: p.add(vars.z_m); gs.add(g.d_z_m); break;
    case 3: p.add(vars.z_g); gs.add(g.d_z_g); break;
    case 4: {
      p.ptr.push_back(vars.plane_raw.data());
      p.len.push_back(4);
      gs.ptr.push_back(g.d_plane_raw.data());
      gs.len.push_back(4);
      break;
    }
  }
  auto loss = [&]() {
    return evaluate_fit_objective(model, skel, vars, obs, plane, cfg, sw, false).total;
  };
  const int k = std::min<int>(20, static_cast<int>(p.count()));
  for (int t = 0; t < trials; ++t) {
    const double err = gam::test::directional_gradient_error(p, gs, loss, pick, k);
    INFO("block " << block << " trial " << t);
    CHECK(err < 1e-4);
  }
}

}  // namespace

TEST_CASE("objective gradients match finite differences for every variable block") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  ModelWeights model = generic_model(13);
  Rng rng(14);
  const int T = 5;
  const GroundPlane plane = normalize_plane(Vec4(0.2, -0.1, 1.0, 0.3));
  OptimConfig cfg;
  const StageWeights full{0.1, 1.0, 1.0, 0.1, 0.1};

  SECTION("fixed-ground blocks") {
    OptimVariables vars = random_vars(model, T, rng, false);
    ObservationSequence obs = random_obs(skel, T + 1, rng);
    Rng pick(15);
    for (int block : {0, 1, 2, 3}) check_block(model, skel, vars, obs, &plane, cfg, full, block, 5, pick);
  }

  SECTION("unknown-ground blocks including the raw plane") {
    OptimVariables vars = random_vars(model, T, rng, true);
    ObservationSequence obs = random_obs(skel, T + 1, rng);
    Rng pick(16);
    for (int block : {0, 2, 3, 4}) check_block(model, skel, vars, obs, nullptr, cfg, full, block, 5, pick);
  }

  SECTION("each term separately on the unknown-ground path") {
    OptimVariables vars = random_vars(model, T, rng, true);
    ObservationSequence obs = random_obs(skel, T + 1, rng);
    Rng pick(17);
    const StageWeights isolated[5] = {{1, 0, 0, 0, 0},
                                      {0, 1, 0, 0, 0},
                                      {0, 0, 1, 0, 0},
                                      {0, 0, 0, 1, 0},
                                      {0, 0, 0, 0, 1}};
    for (int term = 0; term < 5; ++term)
      for (int block : {0, 2, 4})
        check_block(model, skel, vars, obs, nullptr, cfg, isolated[term], block, 4, pick);
  }

  SECTION("2D data term with a camera") {
    OptimVariables vars = random_vars(model, T, rng, false);
    vars.x0 *= 0.3;
    ObservationSequence obs = random_obs(skel, T + 1, rng);
    Camera cam;
    cam.translation = Vec3(0, 0, 8.0);  // body well in front
    obs.camera = cam;
    std::vector<MatX> uv;
    for (int t = 0; t <= T; ++t) {
      MatX m(skel.joint_count, 2);
      for (int j = 0; j < skel.joint_count; ++j)
        m.row(j) = (rng.normal_vec(2, 30.0) + Eigen::Vector2d(640, 360)).transpose();
      uv.push_back(m);
    }
    obs.joints_2d = uv;
    Rng pick(18);
    const StageWeights data_only{0, 0, 1, 0, 0};
    for (int block : {0, 2}) check_block(model, skel, vars, obs, &plane, cfg, data_only, block, 5, pick);
  }
}

TEST_CASE("all loss terms are invariant to positive rescaling of plane_raw") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  ModelWeights model = generic_model(19);
  Rng rng(20);
  const int T = 4;
  OptimVariables vars = random_vars(model, T, rng, true);
  const ObservationSequence obs = random_obs(skel, T + 1, rng);
  OptimConfig cfg;
  const StageWeights full{0.1, 1.0, 1.0, 0.1, 0.1};
  const FitEval base = evaluate_fit_objective(model, skel, vars, obs, nullptr, cfg, full, false);
  for (double scale : {0.3, 2.0, 17.5}) {
    OptimVariables scaled = vars;
    scaled.plane_raw *= scale;
    const FitEval ev = evaluate_fit_objective(model, skel, scaled, obs, nullptr, cfg, full, false);
    CHECK(std::abs(ev.terms.prior - base.terms.prior) < 1e-9);
    CHECK(std::abs(ev.terms.pconsist - base.terms.pconsist) < 1e-9);
    CHECK(std::abs(ev.terms.data - base.terms.data) < 1e-9);
    CHECK(std::abs(ev.terms.reg_smooth - base.terms.reg_smooth) < 1e-9);
    CHECK(std::abs(ev.terms.reg_contact - base.terms.reg_contact) < 1e-9);
  }
}

TEST_CASE("initializer drafts are close to the observations") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  ModelWeights model = generic_model(21);
  const MotionSequence seq = generate_sequence(skel, MotionKind::walk, 1.0, 30.0, 22);
  OptimConfig cfg;
  cfg.init_iters = 80;

  const double sigma = 0.04;
  const ObservationSequence clean = perturb_observations(seq, 0.0, 1);
  const ObservationSequence noisy = perturb_observations(seq, sigma, 1);

  const InitializeResult init_clean = initialize(clean, model, skel, &seq.plane, cfg);
  const InitializeResult init_noisy = initialize(noisy, model, skel, &seq.plane, cfg);

  // Sanity ordering: the clean fit starts closer to its observations.
  const double d_clean = loss_data(model, skel, init_clean.vars, clean, seq.plane, cfg);
  const double d_noisy = loss_data(model, skel, init_noisy.vars, noisy, seq.plane, cfg);
  CHECK(d_clean < d_noisy);

  // Draft first frame within 3 sigma of the first observation, RMS.
  const MotionState first = unflatten_state(skel, init_noisy.draft_states.col(0));
  const double rms = std::sqrt((first.joints - noisy.joints_3d[0]).squaredNorm() /
                               skel.joint_count);
  CHECK(rms < 3 * sigma);

  // With a plane provided, g0 is exactly f(x0, plane).
  CHECK((init_noisy.vars.g0 -
         interaction_from_flat(skel, init_noisy.vars.x0, seq.plane)).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(initialize(ObservationSequence{}, model, skel, &seq.plane, cfg),
                  DimensionError);
}

TEST_CASE("zero-budget fits return the initialization unchanged") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  ModelWeights model = generic_model(23);
  const MotionSequence seq = generate_sequence(skel, MotionKind::walk, 1.0, 30.0, 24);
  const ObservationSequence obs = perturb_observations(seq, 0.02, 2);
  OptimConfig cfg;
  cfg.stage1_iters = 0;
  cfg.stage2_iters = 0;
  cfg.init_iters = 30;

  const InitializeResult init = initialize(obs, model, skel, &seq.plane, cfg);
  const FitResult fit = fit_fixed_ground(obs, seq.plane, model, skel, cfg);
  CHECK((fit.vars.x0 - init.vars.x0).cwiseAbs().maxCoeff() == 0.0);
  CHECK((fit.vars.z_m - init.vars.z_m).cwiseAbs().maxCoeff() == 0.0);
  CHECK_NOTHROW(fit.sequence.validate());

  // Unknown ground with the true plane injected and zero budget returns it.
  const FitResult fg = fit_with_ground(obs, model, skel, cfg, seq.plane);
  CHECK((fg.plane.normal - seq.plane.normal).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(std::abs(fg.plane.offset - seq.plane.offset) < 1e-12);
}

TEST_CASE("descent is monotone and the report recombines exactly") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  ModelWeights model = generic_model(25);
  const MotionSequence seq = generate_sequence(skel, MotionKind::walk, 1.0, 30.0, 26);
  const ObservationSequence obs = perturb_observations(seq, 0.04, 3);
  OptimConfig cfg;
  cfg.stage1_iters = 8;
  cfg.stage2_iters = 12;
  cfg.init_iters = 40;

  const FitResult fit = fit_fixed_ground(obs, seq.plane, model, skel, cfg);
  REQUIRE(fit.report.stages.size() == 2);
  for (const auto& stage : fit.report.stages) {
    REQUIRE(!stage.iterations.empty());
    for (size_t i = 1; i < stage.iterations.size(); ++i)
      CHECK(stage.iterations[i].total <= stage.iterations[i - 1].total + 1e-12);
    for (const auto& it : stage.iterations) {
      const double recombined = stage.weights.total_of(it.terms);
      CHECK(std::abs(recombined - it.total) < 1e-8);
    }
  }

  // The data term cannot exceed its initialization value under stage 1.
  const InitializeResult init = initialize(obs, model, skel, &seq.plane, cfg);
  const double init_data = loss_data(model, skel, init.vars, obs, seq.plane, cfg);
  const auto& stage1 = fit.report.stages[0];
  CHECK(stage1.iterations.back().terms.data <= init_data + 1e-9);

  CHECK_NOTHROW(fit.sequence.validate());
  CHECK(fit.sequence.frames() == obs.frames());
}
