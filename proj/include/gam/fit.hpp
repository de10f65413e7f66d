#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gam/ground.hpp"
#include "gam/metrics.hpp"
#include "gam/model.hpp"
#include "gam/sequence.hpp"
#include "gam/synth.hpp"

namespace gam {

struct OptimConfig {
  double lambda_prior = 0.1;
  double lambda_pconsist = 1.0;
  double lambda_data = 1.0;
  double lambda_reg_smooth = 0.1;
  double lambda_reg_contact = 0.1;
  int stage1_iters = 200;
  int stage2_iters = 800;
  double step_size = 0.01;
  double tol = 1e-7;              // relative change of the total that counts as converged
  uint64_t seed = 1;
  double gm_scale_3d = 0.25;      // Geman-McClure scale, meters
  double gm_scale_2d = 25.0;      // Geman-McClure scale, pixels
  double contact_prob_thresh = 0.5;
  double contact_dist_thresh = kDefaultContactDistThresh;
  bool optimize_bone_scale = false;
  int init_iters = 150;           // observation-fit refinement steps
  double init_lr = 0.05;
  double init_smooth = 0.5;       // temporal pose-smoothness weight in the initializer

  void validate() const {
    for (double v : {lambda_prior, lambda_pconsist, lambda_data, lambda_reg_smooth,
                     lambda_reg_contact})
      if (v < 0) throw ConfigError("optim config: weights must be non-negative");
    if (stage1_iters < 0 || stage2_iters < 0 || init_iters < 0)
      throw ConfigError("optim config: iteration budgets must be non-negative");
    if (step_size <= 0 || gm_scale_3d <= 0 || gm_scale_2d <= 0)
      throw ConfigError("optim config: scales must be positive");
  }

  nlohmann::json to_json() const {
    return {{"lambda_prior", lambda_prior},
            {"lambda_pconsist", lambda_pconsist},
            {"lambda_data", lambda_data},
            {"lambda_reg_smooth", lambda_reg_smooth},
            {"lambda_reg_contact", lambda_reg_contact},
            {"stage1_iters", stage1_iters},
            {"stage2_iters", stage2_iters},
            {"step_size", step_size},
            {"tol", tol},
            {"seed", seed},
            {"gm_scale_3d", gm_scale_3d},
            {"gm_scale_2d", gm_scale_2d},
            {"contact_prob_thresh", contact_prob_thresh},
            {"contact_dist_thresh", contact_dist_thresh},
            {"optimize_bone_scale", optimize_bone_scale},
            {"init_iters", init_iters},
            {"init_lr", init_lr},
            {"init_smooth", init_smooth}};
  }

  static OptimConfig from_json(const nlohmann::json& j) {
    OptimConfig c;
    try {
      c.lambda_prior = j.at("lambda_prior").get<double>();
      c.lambda_pconsist = j.at("lambda_pconsist").get<double>();
      c.lambda_data = j.at("lambda_data").get<double>();
      c.lambda_reg_smooth = j.at("lambda_reg_smooth").get<double>();
      c.lambda_reg_contact = j.at("lambda_reg_contact").get<double>();
      c.stage1_iters = j.at("stage1_iters").get<int>();
      c.stage2_iters = j.at("stage2_iters").get<int>();
      c.step_size = j.at("step_size").get<double>();
      c.tol = j.at("tol").get<double>();
      c.seed = j.at("seed").get<uint64_t>();
      c.gm_scale_3d = j.at("gm_scale_3d").get<double>();
      c.gm_scale_2d = j.at("gm_scale_2d").get<double>();
      c.contact_prob_thresh = j.at("contact_prob_thresh").get<double>();
      c.contact_dist_thresh = j.at("contact_dist_thresh").get<double>();
      c.optimize_bone_scale = j.at("optimize_bone_scale").get<bool>();
      c.init_iters = j.at("init_iters").get<int>();
      c.init_lr = j.at("init_lr").get<double>();
      c.init_smooth = j.at("init_smooth").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("optim config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// Everything the optimizer moves: the initial states, the latent sequence,
// and (unknown-ground setting only) the raw plane vector. In that setting g0
// is derived from x0 and the current plane instead of being free.
struct OptimVariables {
  VecX x0;
  VecX g0;
  MatX z_m;  // latent_motion x T
  MatX z_g;  // latent_interaction x T
  Vec4 plane_raw = Vec4(0, 0, 1, 0);
  bool has_plane_var = false;
  double bone_scale = 1.0;

  int horizon() const { return static_cast<int>(z_m.cols()); }
};

struct FitTerms {
  double prior = 0, pconsist = 0, data = 0, reg_smooth = 0, reg_contact = 0;
};

struct StageWeights {
  double prior = 0, pconsist = 0, data = 0, reg_smooth = 0, reg_contact = 0;

  double total_of(const FitTerms& t) const {
    return prior * t.prior + pconsist * t.pconsist + data * t.data +
           reg_smooth * t.reg_smooth + reg_contact * t.reg_contact;
  }
};

struct FitGrads {
  VecX d_x0, d_g0;
  MatX d_z_m, d_z_g;
  Vec4 d_plane_raw = Vec4::Zero();
};

struct FitEval {
  FitTerms terms;
  double total = 0;
  FitGrads grads;
  MatX states;        // state_dim x (T+1) rollout including x0
  MatX interactions;  // interaction_dim x (T+1)
  MatX contact_probs; // contact_dim x T
};

namespace fit_detail {

struct FitStepCache {
  model_detail::GaussCache pri_m, pri_g;
  GaussianParams p_m, p_g;
  DecodeCache dec;
  MatX logits;
};

inline double gm_rho(double q, double s) {  // q = squared residual
  return s * s * q / (s * s + q);
}

inline double gm_drho_dq(double q, double s) {
  const double d = s * s + q;
  return s * s * s * s / (d * d);
}

}  // namespace fit_detail

// Single forward (and optional backward) pass over the whole rollout. The
// decoder is unrolled from x0/g0 with the given latents; every loss term is
// evaluated on the resulting trajectory.
inline FitEval evaluate_fit_objective(const ModelWeights& model, const SkeletonDef& skel,
                                      const OptimVariables& vars, const ObservationSequence& obs,
                                      const GroundPlane* fixed_plane, const OptimConfig& cfg,
                                      const StageWeights& sw, bool want_grad) {
  using namespace fit_detail;
  const ModelConfig& mc = model.config;
  const int T = vars.horizon();
  if (obs.frames() != T + 1)
    throw DimensionError("fit: observations must cover T+1 frames of the rollout");
  const bool use_2d = obs.joints_2d.has_value();
  if (use_2d && !obs.camera) throw ConfigError("fit: 2D observations require a camera");

  const GroundPlane plane =
      vars.has_plane_var ? normalize_plane(vars.plane_raw) : *fixed_plane;

  FitEval ev;
  ev.states.resize(mc.state_dim, T + 1);
  ev.interactions.resize(mc.interaction_dim, T + 1);
  ev.contact_probs.resize(mc.contact_dim, T);
  ev.states.col(0) = vars.x0;
  ev.interactions.col(0) =
      vars.has_plane_var ? interaction_from_flat(skel, vars.x0, plane) : vars.g0;

  std::vector<FitStepCache> caches(T);
  for (int t = 1; t <= T; ++t) {
    FitStepCache& c = caches[t - 1];
    const MatX x_prev = ev.states.col(t - 1);
    const MatX g_prev = ev.interactions.col(t - 1);
    c.p_m = model_detail::gaussian_forward(model.motion_prior, x_prev, &c.pri_m);
    c.p_g = model_detail::gaussian_forward(model.interaction_prior, g_prev, &c.pri_g);
    const DecodeOut out =
        decode(model, vars.z_m.col(t - 1), vars.z_g.col(t - 1), x_prev, g_prev, &c.dec);
    c.logits = out.contact_logits;
    ev.states.col(t) = out.x_hat;
    ev.interactions.col(t) = out.g_hat;
    ev.contact_probs.col(t - 1) = sigmoid(out.contact_logits);

    // Negative log density of the free latents under the conditional priors.
    const auto nll = [](const VecX& z, const GaussianParams& p) {
      const auto diff = (z - p.mean.col(0)).array();
      const auto lv = p.log_var.col(0).array();
      return 0.5 * (diff.square() * (-lv).exp() + lv + std::log(2.0 * M_PI)).sum();
    };
    ev.terms.prior += nll(vars.z_m.col(t - 1), c.p_m) + nll(vars.z_g.col(t - 1), c.p_g);
  }

  const int oj = offset_joints(skel), ov = offset_joint_vel(skel);
  const int jc = skel.joint_count;

  // Interaction consistency of the rolled-out pairs against plane geometry.
  MatX f_all(mc.interaction_dim, T + 1);
  for (int t = 0; t <= T; ++t)
    f_all.col(t) = interaction_from_flat(skel, ev.states.col(t), plane);
  for (int t = 1; t <= T; ++t)
    ev.terms.pconsist += (ev.interactions.col(t) - f_all.col(t)).squaredNorm();

  // Robust data term on every observed frame.
  for (int t = 0; t <= T; ++t) {
    for (int j = 0; j < jc; ++j) {
      const Vec3 pj = ev.states.col(t).segment<3>(oj + 3 * j);
      if (use_2d) {
        const Camera& cam = *obs.camera;
        const Vec3 pc = cam.rotation * pj + cam.translation;
        if (pc.z() < 1e-6)
          throw NumericError("fit: joint moved behind the camera at frame " + std::to_string(t));
        const Eigen::Vector2d uv(cam.fx * pc.x() / pc.z() + cam.cx,
                                 cam.fy * pc.y() / pc.z() + cam.cy);
        const Eigen::Vector2d res = uv - (*obs.joints_2d)[t].row(j).transpose();
        ev.terms.data += gm_rho(res.squaredNorm(), cfg.gm_scale_2d);
      } else {
        const Vec3 res = pj - obs.joints_3d[t].row(j).transpose();
        ev.terms.data += gm_rho(res.squaredNorm(), cfg.gm_scale_3d);
      }
    }
  }

  // Joint-acceleration smoothness over the rollout.
  for (int t = 1; t < T; ++t) {
    const VecX second = ev.states.col(t + 1).segment(oj, 3 * jc) -
                        2.0 * ev.states.col(t).segment(oj, 3 * jc) +
                        ev.states.col(t - 1).segment(oj, 3 * jc);
    ev.terms.reg_smooth += second.squaredNorm();
  }

  // Contact regularizer: joints the model believes are grounded should be
  // still along the normal and within the contact distance band.
  for (int t = 1; t <= T; ++t) {
    for (int k = 0; k < kNumContactJoints; ++k) {
      if (ev.contact_probs(k, t - 1) <= cfg.contact_prob_thresh) continue;
      const int j = skel.contact_joint_indices[k];
      const Vec3 pj = ev.states.col(t).segment<3>(oj + 3 * j);
      const Vec3 vj = ev.states.col(t).segment<3>(ov + 3 * j);
      const double d = plane.normal.dot(pj) + plane.offset;
      const double vn = plane.normal.dot(vj);
      const double over = std::abs(d) - cfg.contact_dist_thresh;
      ev.terms.reg_contact += vn * vn + (over > 0 ? over * over : 0.0);
    }
  }

  ev.total = sw.total_of(ev.terms);
  const struct {
    const char* name;
    double v;
  } named[] = {{"prior", ev.terms.prior},
               {"pconsist", ev.terms.pconsist},
               {"data", ev.terms.data},
               {"reg_smooth", ev.terms.reg_smooth},
               {"reg_contact", ev.terms.reg_contact}};
  for (const auto& n : named)
    if (!std::isfinite(n.v)) throw NumericError(std::string("fit: non-finite term ") + n.name);
  if (!want_grad) return ev;

  // ----- reverse pass -----
  MatX d_x = MatX::Zero(mc.state_dim, T + 1);
  MatX d_g = MatX::Zero(mc.interaction_dim, T + 1);
  ev.grads.d_z_m = MatX::Zero(mc.latent_motion, T);
  ev.grads.d_z_g = MatX::Zero(mc.latent_interaction, T);
  Vec3 d_normal = Vec3::Zero();
  double d_offset = 0;

  for (int t = 1; t <= T; ++t) {
    const VecX resid = 2.0 * sw.pconsist * (ev.interactions.col(t) - f_all.col(t));
    d_g.col(t) += resid;
    VecX dx = VecX::Zero(mc.state_dim);
    interaction_from_flat_backward(skel, plane, -resid, dx);
    d_x.col(t) += dx;
    if (vars.has_plane_var) interaction_plane_backward(skel, ev.states.col(t), -resid, d_normal, d_offset);
  }

  for (int t = 0; t <= T; ++t) {
    for (int j = 0; j < jc; ++j) {
      const Vec3 pj = ev.states.col(t).segment<3>(oj + 3 * j);
      if (use_2d) {
        const Camera& cam = *obs.camera;
        const Vec3 pc = cam.rotation * pj + cam.translation;
        const Eigen::Vector2d uv(cam.fx * pc.x() / pc.z() + cam.cx,
                                 cam.fy * pc.y() / pc.z() + cam.cy);
        const Eigen::Vector2d res = uv - (*obs.joints_2d)[t].row(j).transpose();
        const double w = sw.data * gm_drho_dq(res.squaredNorm(), cfg.gm_scale_2d);
        Eigen::Matrix<double, 2, 3> duv_dpc;
        duv_dpc << cam.fx / pc.z(), 0, -cam.fx * pc.x() / (pc.z() * pc.z()),
            0, cam.fy / pc.z(), -cam.fy * pc.y() / (pc.z() * pc.z());
        d_x.col(t).segment<3>(oj + 3 * j) +=
            2.0 * w * (cam.rotation.transpose() * (duv_dpc.transpose() * res));
      } else {
        const Vec3 res = pj - obs.joints_3d[t].row(j).transpose();
        const double w = sw.data * gm_drho_dq(res.squaredNorm(), cfg.gm_scale_3d);
        d_x.col(t).segment<3>(oj + 3 * j) += 2.0 * w * res;
      }
    }
  }

  for (int t = 1; t < T; ++t) {
    const VecX second = ev.states.col(t + 1).segment(oj, 3 * jc) -
                        2.0 * ev.states.col(t).segment(oj, 3 * jc) +
                        ev.states.col(t - 1).segment(oj, 3 * jc);
    d_x.col(t + 1).segment(oj, 3 * jc) += 2.0 * sw.reg_smooth * second;
    d_x.col(t).segment(oj, 3 * jc) -= 4.0 * sw.reg_smooth * second;
    d_x.col(t - 1).segment(oj, 3 * jc) += 2.0 * sw.reg_smooth * second;
  }

  for (int t = 1; t <= T; ++t) {
    for (int k = 0; k < kNumContactJoints; ++k) {
      if (ev.contact_probs(k, t - 1) <= cfg.contact_prob_thresh) continue;
      const int j = skel.contact_joint_indices[k];
      const Vec3 pj = ev.states.col(t).segment<3>(oj + 3 * j);
      const Vec3 vj = ev.states.col(t).segment<3>(ov + 3 * j);
      const double d = plane.normal.dot(pj) + plane.offset;
      const double vn = plane.normal.dot(vj);
      d_x.col(t).segment<3>(ov + 3 * j) += 2.0 * sw.reg_contact * vn * plane.normal;
      if (vars.has_plane_var) d_normal += 2.0 * sw.reg_contact * vn * vj;
      const double over = std::abs(d) - cfg.contact_dist_thresh;
      if (over > 0) {
        const double dd = 2.0 * sw.reg_contact * over * (d >= 0 ? 1.0 : -1.0);
        d_x.col(t).segment<3>(oj + 3 * j) += dd * plane.normal;
        if (vars.has_plane_var) {
          d_normal += dd * pj;
          d_offset += dd;
        }
      }
    }
  }

  // Chain backwards through the decoder and the prior densities.
  for (int t = T; t >= 1; --t) {
    const FitStepCache& c = caches[t - 1];
    MatX d_z_m_t, d_z_g_t, d_x_prev, d_g_prev;
    decode_backward(model, c.dec, d_x.col(t), d_g.col(t), MatX(), nullptr, &d_z_m_t, &d_z_g_t,
                    &d_x_prev, &d_g_prev);
    ev.grads.d_z_m.col(t - 1) += d_z_m_t;
    ev.grads.d_z_g.col(t - 1) += d_z_g_t;
    d_x.col(t - 1) += d_x_prev;
    d_g.col(t - 1) += d_g_prev;

    const auto nll_backward = [&](const VecX& z, const GaussianParams& p, VecX& dz,
                                  MatX& d_mean, MatX& d_lv) {
      const VecX diff = z - p.mean.col(0);
      const VecX inv_v = (-p.log_var.col(0).array()).exp();
      dz += sw.prior * diff.cwiseProduct(inv_v);
      d_mean = -sw.prior * diff.cwiseProduct(inv_v);
      d_lv = sw.prior * 0.5 *
             (VecX::Ones(z.size()) - diff.array().square().matrix().cwiseProduct(inv_v));
    };
    VecX dz_m = VecX::Zero(mc.latent_motion), dz_g = VecX::Zero(mc.latent_interaction);
    MatX d_pm_mean, d_pm_lv, d_pg_mean, d_pg_lv;
    nll_backward(vars.z_m.col(t - 1), c.p_m, dz_m, d_pm_mean, d_pm_lv);
    nll_backward(vars.z_g.col(t - 1), c.p_g, dz_g, d_pg_mean, d_pg_lv);
    ev.grads.d_z_m.col(t - 1) += dz_m;
    ev.grads.d_z_g.col(t - 1) += dz_g;
    MatX d_pri_in;
    model_detail::gaussian_backward(model.motion_prior, c.pri_m, d_pm_mean, d_pm_lv, nullptr,
                                    &d_pri_in);
    d_x.col(t - 1) += d_pri_in;
    model_detail::gaussian_backward(model.interaction_prior, c.pri_g, d_pg_mean, d_pg_lv, nullptr,
                                    &d_pri_in);
    d_g.col(t - 1) += d_pri_in;
  }

  ev.grads.d_x0 = d_x.col(0);
  if (vars.has_plane_var) {
    // g0 was derived from x0 and the plane.
    VecX dx0 = VecX::Zero(mc.state_dim);
    interaction_from_flat_backward(skel, plane, d_g.col(0), dx0);
    ev.grads.d_x0 += dx0;
    interaction_plane_backward(skel, vars.x0, d_g.col(0), d_normal, d_offset);
    ev.grads.d_g0 = VecX::Zero(mc.interaction_dim);
    // Through the normalization n = a/|a|, offset = b/|a|.
    const Vec3 a = vars.plane_raw.head<3>();
    const double na = a.norm();
    const Vec3 n = a / na;
    const Vec3 da =
        ((Mat3::Identity() - n * n.transpose()) * d_normal - d_offset * (vars.plane_raw[3] / na) * n) / na;
    ev.grads.d_plane_raw.head<3>() = da;
    ev.grads.d_plane_raw[3] = d_offset / na;
  } else {
    ev.grads.d_g0 = d_g.col(0);
    ev.grads.d_plane_raw.setZero();
  }
  return ev;
}

// Individual loss terms (shared rollout underneath).
inline double loss_prior(const ModelWeights& m, const SkeletonDef& s, const OptimVariables& v,
                         const ObservationSequence& o, const GroundPlane& plane,
                         const OptimConfig& c) {
  return evaluate_fit_objective(m, s, v, o, &plane, c, {}, false).terms.prior;
}
inline double loss_pconsist(const ModelWeights& m, const SkeletonDef& s, const OptimVariables& v,
                            const ObservationSequence& o, const GroundPlane& plane,
                            const OptimConfig& c) {
  return evaluate_fit_objective(m, s, v, o, &plane, c, {}, false).terms.pconsist;
}
inline double loss_data(const ModelWeights& m, const SkeletonDef& s, const OptimVariables& v,
                        const ObservationSequence& o, const GroundPlane& plane,
                        const OptimConfig& c) {
  return evaluate_fit_objective(m, s, v, o, &plane, c, {}, false).terms.data;
}
inline double loss_reg_smooth(const ModelWeights& m, const SkeletonDef& s,
                              const OptimVariables& v, const ObservationSequence& o,
                              const GroundPlane& plane, const OptimConfig& c) {
  return evaluate_fit_objective(m, s, v, o, &plane, c, {}, false).terms.reg_smooth;
}
inline double loss_reg_contact(const ModelWeights& m, const SkeletonDef& s,
                               const OptimVariables& v, const ObservationSequence& o,
                               const GroundPlane& plane, const OptimConfig& c) {
  return evaluate_fit_objective(m, s, v, o, &plane, c, {}, false).terms.reg_contact;
}

namespace fit_detail {

// Greedy per-frame pose from observed joints: root from the pelvis, root
// orientation from the pelvis-adjacent bones, then minimal rotations down
// the tree. Twist about observed bones stays zero.
inline Pose pose_from_joints(const SkeletonDef& skel, const MatX& joints) {
  Pose pose = Pose::zero(skel);
  pose.root_translation = joints.row(0).transpose();

  std::vector<std::vector<int>> children(skel.joint_count);
  for (int i = 1; i < skel.joint_count; ++i) children[skel.parent_index[i]].push_back(i);

  MatX rest(3, children[0].size()), seen(3, children[0].size());
  for (size_t k = 0; k < children[0].size(); ++k) {
    const int c = children[0][k];
    rest.col(k) = skel.bone_scale * skel.rest_offset[c];
    seen.col(k) = (joints.row(c) - joints.row(0)).transpose();
  }
  std::vector<Mat3> acc(skel.joint_count);
  acc[0] = kabsch_rotation(rest, seen);
  pose.root_orientation = matrix_to_axis_angle(acc[0]);

  for (int i = 1; i < skel.joint_count; ++i) {
    const int p = skel.parent_index[i];
    Vec3 aa = Vec3::Zero();
    if (!children[i].empty()) {
      if (children[i].size() == 1) {
        const int c = children[i][0];
        const Vec3 target = acc[p].transpose() * (joints.row(c) - joints.row(i)).transpose();
        aa = rotation_between(skel.bone_scale * skel.rest_offset[c], target);
      } else {
        MatX r(3, children[i].size()), s(3, children[i].size());
        for (size_t k = 0; k < children[i].size(); ++k) {
          const int c = children[i][k];
          r.col(k) = skel.bone_scale * skel.rest_offset[c];
          s.col(k) = acc[p].transpose() * (joints.row(c) - joints.row(i)).transpose();
        }
        aa = matrix_to_axis_angle(kabsch_rotation(r, s));
      }
    }
    pose.joint_angles.row(i - 1) = aa.transpose();
    acc[i] = acc[p] * axis_angle_to_matrix(aa);
  }
  return pose;
}

}  // namespace fit_detail

// Stage-0 observation fit: greedy per-frame poses refined by a joint
// least-squares objective (FK fit to the observed joints plus temporal pose
// smoothness), then latents from the posterior-encoder means on consecutive
// draft states. Returns the draft states alongside the variables.
struct InitializeResult {
  OptimVariables vars;
  MatX draft_states;  // state_dim x (T+1)
  GroundPlane plane;
};

inline InitializeResult initialize(const ObservationSequence& obs, const ModelWeights& model,
                                   const SkeletonDef& skel, const GroundPlane* plane_in,
                                   const OptimConfig& cfg,
                                   const std::optional<GroundPlane>& plane_hint = {}) {
  if (obs.frames() < 2) throw DimensionError("initialize: need at least 2 observation frames");
  for (const auto& f : obs.joints_3d)
    if (!f.allFinite()) throw NumericError("initialize: non-finite observations");
  const int frames = obs.frames();
  const int T = frames - 1;

  SkeletonDef fit_skel = skel;
  if (cfg.optimize_bone_scale) {
    // Least-squares global scale from observed bone lengths.
    double num = 0, den = 0;
    for (const auto& f : obs.joints_3d)
      for (int i = 1; i < skel.joint_count; ++i) {
        const double rest = skel.rest_offset[i].norm();
        num += (f.row(i) - f.row(skel.parent_index[i])).norm() * rest;
        den += rest * rest;
      }
    fit_skel.bone_scale = std::max(0.2, num / std::max(1e-12, den));
  }

  std::vector<Pose> poses(frames);
  for (int t = 0; t < frames; ++t)
    poses[t] = fit_detail::pose_from_joints(fit_skel, obs.joints_3d[t]);

  // Joint refinement: sum_t |FK - y|^2 + smooth * sum_t |pose_t - pose_{t-1}|^2.
  const int pose_dim = 6 + 3 * (skel.joint_count - 1);
  auto pack = [&](const Pose& p) {
    VecX v(pose_dim);
    v.segment<3>(0) = p.root_translation;
    v.segment<3>(3) = p.root_orientation;
    for (int i = 0; i + 1 < skel.joint_count; ++i)
      v.segment<3>(6 + 3 * i) = p.joint_angles.row(i).transpose();
    return v;
  };
  auto unpack = [&](const VecX& v) {
    Pose p = Pose::zero(skel);
    p.root_translation = v.segment<3>(0);
    p.root_orientation = v.segment<3>(3);
    for (int i = 0; i + 1 < skel.joint_count; ++i)
      p.joint_angles.row(i) = v.segment<3>(6 + 3 * i).transpose();
    return p;
  };
  MatX theta(pose_dim, frames);
  for (int t = 0; t < frames; ++t) theta.col(t) = pack(poses[t]);

  ParamSpans spans;
  spans.add(theta);
  AdamState adam = AdamState::zeros_like(spans);
  for (int it = 0; it < cfg.init_iters; ++it) {
    MatX grad = MatX::Zero(pose_dim, frames);
    for (int t = 0; t < frames; ++t) {
      const Pose p = unpack(theta.col(t));
      const FkCache cache = forward_kinematics_full(fit_skel, p);
      const MatX resid = cache.position - obs.joints_3d[t];
      const PoseGrad pg = forward_kinematics_backward(fit_skel, p, cache, 2.0 * resid);
      VecX g(pose_dim);
      g.segment<3>(0) = pg.d_root_translation;
      g.segment<3>(3) = pg.d_root_orientation;
      for (int i = 0; i + 1 < skel.joint_count; ++i)
        g.segment<3>(6 + 3 * i) = pg.d_joint_angles.row(i).transpose();
      grad.col(t) += g;
    }
    for (int t = 1; t < frames; ++t) {
      const VecX diff = theta.col(t) - theta.col(t - 1);
      grad.col(t) += 2.0 * cfg.init_smooth * diff;
      grad.col(t - 1) -= 2.0 * cfg.init_smooth * diff;
    }
    ParamSpans gs;
    gs.add(grad);
    adam_step(spans, gs, adam, cfg.init_lr, 0.0);
  }

  // Draft states: exact kinematics of the refined poses, velocities by
  // backward differences.
  std::vector<MatX> joints(frames), roots(frames), orients(frames);
  for (int t = 0; t < frames; ++t) {
    poses[t] = unpack(theta.col(t));
    joints[t] = forward_kinematics(fit_skel, poses[t]);
    roots[t] = poses[t].root_translation;
    orients[t] = poses[t].root_orientation;
  }
  const auto jv = compute_velocities(joints, obs.fps);
  const auto rv = compute_velocities(roots, obs.fps);
  const auto av = compute_velocities(orients, obs.fps);

  GroundPlane plane;
  if (plane_in) {
    plane = *plane_in;
  } else if (plane_hint) {
    plane = *plane_hint;
  } else {
    // Horizontal guess through the lowest observed joint.
    double low = std::numeric_limits<double>::infinity();
    for (const auto& f : obs.joints_3d) low = std::min(low, f.col(2).minCoeff());
    plane.normal = Vec3::UnitZ();
    plane.offset = -low;
  }

  MatX draft(skel.state_dim(), frames);
  for (int t = 0; t < frames; ++t) {
    MotionState s;
    s.pose = poses[t];
    s.joints = joints[t];
    s.joint_velocities = jv[t];
    s.root_velocity = rv[t];
    s.root_angular_velocity = av[t];
    draft.col(t) = flatten_state(skel, s);
  }
  MatX draft_g(skel.interaction_dim(), frames);
  for (int t = 0; t < frames; ++t)
    draft_g.col(t) = interaction_from_flat(skel, draft.col(t), plane);

  InitializeResult out;
  out.plane = plane;
  out.draft_states = draft;
  out.vars.x0 = draft.col(0);
  out.vars.g0 = draft_g.col(0);
  out.vars.bone_scale = fit_skel.bone_scale;
  out.vars.has_plane_var = plane_in == nullptr;
  out.vars.plane_raw = plane.raw();
  // Latents: posterior-encoder means over consecutive draft states.
  const GaussianParams qm =
      encode_motion(model, draft.leftCols(T), draft.rightCols(T));
  const GaussianParams qg =
      encode_interaction(model, draft_g.leftCols(T), draft_g.rightCols(T));
  out.vars.z_m = qm.mean;
  out.vars.z_g = qg.mean;
  return out;
}

struct IterationLog {
  int iter = 0;
  FitTerms terms;
  double total = 0;
  double step = 0;
};

struct StageReport {
  std::string name;
  StageWeights weights;
  std::vector<IterationLog> iterations;
  bool converged = false;
};

struct FitReport {
  std::vector<StageReport> stages;
  bool diverged = false;
  std::string diagnostic;
  FitTerms final_terms;
  double final_total = 0;

  nlohmann::json to_json() const {
    nlohmann::json js = nlohmann::json::array();
    for (const auto& s : stages) {
      nlohmann::json jit = nlohmann::json::array();
      for (const auto& it : s.iterations)
        jit.push_back({{"iter", it.iter},
                       {"prior", it.terms.prior},
                       {"pconsist", it.terms.pconsist},
                       {"data", it.terms.data},
                       {"reg_smooth", it.terms.reg_smooth},
                       {"reg_contact", it.terms.reg_contact},
                       {"total", it.total},
                       {"step", it.step}});
      js.push_back({{"name", s.name},
                    {"weights",
                     {{"prior", s.weights.prior},
                      {"pconsist", s.weights.pconsist},
                      {"data", s.weights.data},
                      {"reg_smooth", s.weights.reg_smooth},
                      {"reg_contact", s.weights.reg_contact}}},
                    {"converged", s.converged},
                    {"iterations", jit}});
    }
    return {{"format", "gam.fit_report"},
            {"version", 1},
            {"stages", std::move(js)},
            {"diverged", diverged},
            {"diagnostic", diagnostic},
            {"final_total", final_total},
            {"final", {{"prior", final_terms.prior},
                       {"pconsist", final_terms.pconsist},
                       {"data", final_terms.data},
                       {"reg_smooth", final_terms.reg_smooth},
                       {"reg_contact", final_terms.reg_contact}}}};
  }
};

struct FitResult {
  MotionSequence sequence;
  GroundPlane plane;
  FitReport report;
  OptimVariables vars;
};

namespace fit_detail {

struct BlockMask {
  bool x0 = false, g0 = false, latents = false, plane = false;
};

// Backtracking gradient descent over the active variable blocks. Accepted
// iterates never increase the objective.
inline void descend(const ModelWeights& model, const SkeletonDef& skel, OptimVariables& vars,
                    const ObservationSequence& obs, const GroundPlane* fixed_plane,
                    const OptimConfig& cfg, const StageWeights& sw, const BlockMask& mask,
                    int budget, const std::string& stage_name, FitReport& report) {
  StageReport stage;
  stage.name = stage_name;
  stage.weights = sw;
  auto log_iter = [&](int i, const FitEval& ev, double step) {
    IterationLog lg;
    lg.iter = i;
    lg.terms = ev.terms;
    lg.total = ev.total;
    lg.step = step;
    stage.iterations.push_back(lg);
  };

  FitEval ev;
  try {
    ev = evaluate_fit_objective(model, skel, vars, obs, fixed_plane, cfg, sw, true);
  } catch (const NumericError& e) {
    report.diverged = true;
    report.diagnostic = stage_name + ": " + e.what();
    report.stages.push_back(std::move(stage));
    return;
  }
  log_iter(0, ev, 0.0);

  for (int it = 1; it <= budget; ++it) {
    double gnorm2 = 0;
    if (mask.x0) gnorm2 += ev.grads.d_x0.squaredNorm();
    if (mask.g0 && !vars.has_plane_var) gnorm2 += ev.grads.d_g0.squaredNorm();
    if (mask.latents) gnorm2 += ev.grads.d_z_m.squaredNorm() + ev.grads.d_z_g.squaredNorm();
    if (mask.plane && vars.has_plane_var) gnorm2 += ev.grads.d_plane_raw.squaredNorm();
    if (gnorm2 < 1e-20) {
      stage.converged = true;
      break;
    }

    double alpha = cfg.step_size;
    bool accepted = false;
    OptimVariables trial = vars;
    FitEval trial_ev;
    for (int half = 0; half < 40; ++half) {
      trial = vars;
      if (mask.x0) trial.x0 -= alpha * ev.grads.d_x0;
      if (mask.g0 && !vars.has_plane_var) trial.g0 -= alpha * ev.grads.d_g0;
      if (mask.latents) {
        trial.z_m -= alpha * ev.grads.d_z_m;
        trial.z_g -= alpha * ev.grads.d_z_g;
      }
      if (mask.plane && vars.has_plane_var) trial.plane_raw -= alpha * ev.grads.d_plane_raw;
      bool ok = true;
      try {
        trial_ev = evaluate_fit_objective(model, skel, trial, obs, fixed_plane, cfg, sw, false);
      } catch (const NumericError&) {
        ok = false;
      }
      if (ok && trial_ev.total <= ev.total - 1e-4 * alpha * gnorm2) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      stage.converged = true;  // no descent direction at line-search resolution
      break;
    }
    const double prev_total = ev.total;
    vars = trial;
    try {
      ev = evaluate_fit_objective(model, skel, vars, obs, fixed_plane, cfg, sw, true);
    } catch (const NumericError& e) {
      report.diverged = true;
      report.diagnostic = stage_name + ": " + e.what();
      log_iter(it, trial_ev, alpha);
      break;
    }
    log_iter(it, ev, alpha);
    if (std::abs(prev_total - ev.total) <= cfg.tol * std::max(1.0, std::abs(prev_total))) {
      stage.converged = true;
      break;
    }
  }
  report.stages.push_back(std::move(stage));
}

// Decode the fitted variables into a sequence whose velocity fields and
// contact labels satisfy the container invariants.
inline MotionSequence materialize(const ModelWeights& model, const SkeletonDef& skel,
                                  const OptimVariables& vars, const ObservationSequence& obs,
                                  const GroundPlane& plane, uint64_t seed) {
  const FitEval ev = evaluate_fit_objective(model, skel, vars, obs, &plane, OptimConfig{},
                                            StageWeights{}, false);
  MotionSequence seq;
  seq.fps = obs.fps;
  seq.skeleton = skel;
  seq.skeleton.bone_scale = vars.bone_scale;
  seq.plane = plane;
  seq.generator = "fit";
  seq.seed = seed;
  const int frames = static_cast<int>(ev.states.cols());
  std::vector<MatX> joints(frames), roots(frames), orients(frames);
  std::vector<MotionState> states(frames);
  for (int t = 0; t < frames; ++t) {
    states[t] = unflatten_state(skel, ev.states.col(t));
    joints[t] = states[t].joints;
    roots[t] = states[t].pose.root_translation;
    orients[t] = states[t].pose.root_orientation;
  }
  const auto jv = compute_velocities(joints, obs.fps);
  const auto rv = compute_velocities(roots, obs.fps);
  const auto av = compute_velocities(orients, obs.fps);
  for (int t = 0; t < frames; ++t) {
    states[t].joint_velocities = jv[t];
    states[t].root_velocity = rv[t];
    states[t].root_angular_velocity = av[t];
    seq.states.push_back(states[t]);
    seq.contacts.push_back(contact_labels(interaction_from_state(states[t], plane), skel));
  }
  return seq;
}

}  // namespace fit_detail

// Denoising with a known, fixed ground plane: fits x0, g0, and the latent
// sequence. Stage 1 moves only the initial state under data + smoothness;
// stage 2 optimizes everything under the full objective.
inline FitResult fit_fixed_ground(const ObservationSequence& obs, const GroundPlane& plane,
                                  const ModelWeights& model, const SkeletonDef& skel,
                                  const OptimConfig& cfg) {
  using namespace fit_detail;
  cfg.validate();
  const InitializeResult init = initialize(obs, model, skel, &plane, cfg);
  OptimVariables vars = init.vars;

  FitResult out;
  StageWeights stage1{0, 0, cfg.lambda_data, cfg.lambda_reg_smooth, 0};
  BlockMask mask1;
  mask1.x0 = true;
  descend(model, skel, vars, obs, &plane, cfg, stage1, mask1, cfg.stage1_iters, "stage1",
          out.report);

  StageWeights stage2{cfg.lambda_prior, cfg.lambda_pconsist, cfg.lambda_data,
                      cfg.lambda_reg_smooth, cfg.lambda_reg_contact};
  BlockMask mask2;
  mask2.x0 = mask2.g0 = mask2.latents = true;
  if (!out.report.diverged)
    descend(model, skel, vars, obs, &plane, cfg, stage2, mask2, cfg.stage2_iters, "stage2",
            out.report);

  if (!out.report.stages.empty() && !out.report.stages.back().iterations.empty()) {
    const auto& last = out.report.stages.back().iterations.back();
    out.report.final_terms = last.terms;
    out.report.final_total = last.total;
  }
  out.plane = plane;
  out.vars = vars;
  out.sequence = materialize(model, skel, vars, obs, plane, cfg.seed);
  return out;
}

// Reconstruction with an unknown ground plane: the raw plane vector joins the
// variable set and g0 is re-derived from x0 and the current plane throughout.
inline FitResult fit_with_ground(const ObservationSequence& obs, const ModelWeights& model,
                                 const SkeletonDef& skel, const OptimConfig& cfg,
                                 const std::optional<GroundPlane>& plane_init = {}) {
  using namespace fit_detail;
  cfg.validate();
  const InitializeResult init = initialize(obs, model, skel, nullptr, cfg, plane_init);
  OptimVariables vars = init.vars;

  FitResult out;
  StageWeights stage1{0, 0, cfg.lambda_data, cfg.lambda_reg_smooth, 0};
  BlockMask mask1;
  mask1.x0 = mask1.plane = true;
  descend(model, skel, vars, obs, nullptr, cfg, stage1, mask1, cfg.stage1_iters, "stage1",
          out.report);

  StageWeights stage2{cfg.lambda_prior, cfg.lambda_pconsist, cfg.lambda_data,
                      cfg.lambda_reg_smooth, cfg.lambda_reg_contact};
  BlockMask mask2;
  mask2.x0 = mask2.latents = mask2.plane = true;
  if (!out.report.diverged)
    descend(model, skel, vars, obs, nullptr, cfg, stage2, mask2, cfg.stage2_iters, "stage2",
            out.report);

  if (!out.report.stages.empty() && !out.report.stages.back().iterations.empty()) {
    const auto& last = out.report.stages.back().iterations.back();
    out.report.final_terms = last.terms;
    out.report.final_total = last.total;
  }
  // The sign convention set at initialization (body above the plane) is
  // preserved by descent; re-orienting here would desync the plane from the
  // optimized rollout, whose g0 was derived from it.
  const GroundPlane recovered = normalize_plane(vars.plane_raw);
  out.plane = recovered;
  out.vars = vars;
  out.sequence = fit_detail::materialize(model, skel, vars, obs, recovered, cfg.seed);
  return out;
}

inline void save_fit_report(const std::string& path, const FitReport& report) {
  std::ofstream out(path);
  if (!out) throw FormatError("fit report: cannot write " + path);
  out << report.to_json().dump(2) << "\n";
}

}  // namespace gam
