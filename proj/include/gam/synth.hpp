#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "gam/rng.hpp"
#include "gam/sequence.hpp"

namespace gam {

enum class MotionKind { walk, jump, sit, crouch, stand };

inline MotionKind motion_kind_from_string(const std::string& s) {
  if (s == "walk") return MotionKind::walk;
  if (s == "jump") return MotionKind::jump;
  if (s == "sit") return MotionKind::sit;
  if (s == "crouch") return MotionKind::crouch;
  if (s == "stand") return MotionKind::stand;
  throw ConfigError("unknown motion kind: " + s);
}

inline std::string to_string(MotionKind k) {
  switch (k) {
    case MotionKind::walk: return "walk";
    case MotionKind::jump: return "jump";
    case MotionKind::sit: return "sit";
    case MotionKind::crouch: return "crouch";
    case MotionKind::stand: return "stand";
  }
  return "?";
}

namespace synth_detail {

// Joint indices of the default skeleton the generators articulate.
constexpr int kSpine1 = 1, kSpine3 = 3, kNeck = 4;
constexpr int kLShoulder = 8, kRShoulder = 9, kLElbow = 10, kRElbow = 11;
constexpr int kLHip = 14, kRHip = 15, kLKnee = 16, kRKnee = 17;
constexpr int kLAnkle = 18, kRAnkle = 19;

inline double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

// Angle of joint j lives at row j-1.
inline void set_angle(Pose& pose, int joint, const Vec3& aa) { pose.joint_angles.row(joint - 1) = aa.transpose(); }

struct GaitParams {
  double cycle_hz;      // full left+right cycle frequency
  double hip_amp;       // hip swing amplitude, rad
  double knee_amp;      // knee flexion amplitude, rad
  double arm_amp;       // shoulder counter-swing, rad
  double speed;         // forward speed, m/s
  double turn_rate;     // heading rate, rad/s
  double heading0;
  double x0, y0;
  double sway_amp;      // spine sway, rad
};

// Legs-and-arms pose at gait phase `ph` (radians), heading psi.
inline Pose gait_pose(const SkeletonDef& skel, const GaitParams& gp, double ph, double psi) {
  Pose pose = Pose::zero(skel);
  pose.root_orientation = Vec3(0, 0, psi);
  const double swing_l = gp.hip_amp * std::sin(ph);
  const double swing_r = gp.hip_amp * std::sin(ph + M_PI);
  // Negative pitch about +y swings the leg forward (+x).
  set_angle(pose, kLHip, Vec3(0, -swing_l, 0));
  set_angle(pose, kRHip, Vec3(0, -swing_r, 0));
  // Knee flexes while its leg swings forward, lifting the foot.
  const double knee_l = gp.knee_amp * 0.5 * (1.0 + std::sin(ph - 0.4));
  const double knee_r = gp.knee_amp * 0.5 * (1.0 + std::sin(ph + M_PI - 0.4));
  set_angle(pose, kLKnee, Vec3(0, knee_l, 0));
  set_angle(pose, kRKnee, Vec3(0, knee_r, 0));
  // Ankles counter the shank so feet stay roughly level.
  set_angle(pose, kLAnkle, Vec3(0, 0.3 * (swing_l - knee_l), 0));
  set_angle(pose, kRAnkle, Vec3(0, 0.3 * (swing_r - knee_r), 0));
  set_angle(pose, kLShoulder, Vec3(0, gp.arm_amp * std::sin(ph + M_PI), 0));
  set_angle(pose, kRShoulder, Vec3(0, gp.arm_amp * std::sin(ph), 0));
  set_angle(pose, kSpine1, Vec3(gp.sway_amp * std::sin(ph), 0, 0));
  return pose;
}

// Leg fold between standing (fold=0) and the deepest pose (fold=1). The squat
// variant bends the knees under the body (pelvis bottoms out around 0.43 m);
// the seated variant extends the legs forward along the floor (around 0.21 m).
inline Pose fold_pose(const SkeletonDef& skel, double fold, double psi, double arm_raise,
                      double lean, bool seated = false) {
  Pose pose = Pose::zero(skel);
  pose.root_orientation = Vec3(0, 0, psi);
  const double hip = fold * (seated ? 1.5 : 1.75);
  const double knee = fold * (seated ? 0.25 : 2.2);
  const double ankle = seated ? 0.9 * fold : -(knee - hip) * 0.55;
  set_angle(pose, kLHip, Vec3(0, -hip, 0));
  set_angle(pose, kRHip, Vec3(0, -hip, 0));
  set_angle(pose, kLKnee, Vec3(0, knee, 0));
  set_angle(pose, kRKnee, Vec3(0, knee, 0));
  set_angle(pose, kLAnkle, Vec3(0, ankle, 0));
  set_angle(pose, kRAnkle, Vec3(0, ankle, 0));
  set_angle(pose, kSpine1, Vec3(0, -lean, 0));
  set_angle(pose, kLShoulder, Vec3(0, -arm_raise, 0));
  set_angle(pose, kRShoulder, Vec3(0, -arm_raise, 0));
  return pose;
}

// Min signed distance over the contact joints for a pose evaluated with the
// root at z = 0 and the canonical plane z = 0.
inline double min_contact_height(const SkeletonDef& skel, const MatX& joints) {
  double m = std::numeric_limits<double>::infinity();
  for (int ci : skel.contact_joint_indices) m = std::min(m, joints(ci, 2));
  return m;
}

}  // namespace synth_detail

// Deterministic parametric motion over the canonical ground plane z = 0.
// Joint positions come from forward kinematics of smooth pose curves; the
// pelvis height is solved per frame so the lowest contact joint either rides
// at the requested clearance (stance) or follows a ballistic arc (flight).
inline MotionSequence generate_sequence(const SkeletonDef& skel, MotionKind kind,
                                        double duration_s, double fps, uint64_t seed) {
  using namespace synth_detail;
  if (duration_s < 1.0) throw ConfigError("generate_sequence: duration must be >= 1 s");
  if (fps < 10.0) throw ConfigError("generate_sequence: fps must be >= 10");
  const int frames = static_cast<int>(std::lround(duration_s * fps));
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);

  std::vector<Pose> poses(frames);
  std::vector<double> pin_clearance(frames, 0.0);   // stance clearance target
  std::vector<double> flight_z(frames, std::numeric_limits<double>::quiet_NaN());

  const double psi0 = rng.uniform(-M_PI, M_PI);
  const double x0 = rng.uniform(-0.5, 0.5), y0 = rng.uniform(-0.5, 0.5);

  switch (kind) {
    case MotionKind::stand: {
      Pose pose = fold_pose(skel, 0.0, psi0, rng.uniform(0.0, 0.3), rng.uniform(-0.05, 0.1));
      pose.root_translation = Vec3(x0, y0, 0);
      for (int t = 0; t < frames; ++t) poses[t] = pose;
      break;
    }
    case MotionKind::walk: {
      GaitParams gp;
      gp.cycle_hz = rng.uniform(0.75, 1.05);
      gp.hip_amp = rng.uniform(0.28, 0.42);
      gp.knee_amp = rng.uniform(0.25, 0.45);
      gp.arm_amp = rng.uniform(0.1, 0.25);
      gp.turn_rate = rng.uniform(-0.5, 0.5);
      gp.heading0 = psi0;
      gp.speed = 0.9 * gp.hip_amp * 2.0 * M_PI * gp.cycle_hz * 0.4;
      gp.sway_amp = rng.uniform(0.02, 0.06);
      const double phase0 = rng.uniform(0.0, 2.0 * M_PI);
      for (int t = 0; t < frames; ++t) {
        const double tt = t / fps;
        const double ph = phase0 + 2.0 * M_PI * gp.cycle_hz * tt;
        const double psi = gp.heading0 + gp.turn_rate * tt;
        poses[t] = gait_pose(skel, gp, ph, psi);
        double px, py;
        if (std::abs(gp.turn_rate) > 1e-6) {
          px = x0 + gp.speed / gp.turn_rate * (std::sin(psi) - std::sin(gp.heading0));
          py = y0 - gp.speed / gp.turn_rate * (std::cos(psi) - std::cos(gp.heading0));
        } else {
          px = x0 + gp.speed * tt * std::cos(gp.heading0);
          py = y0 + gp.speed * tt * std::sin(gp.heading0);
        }
        poses[t].root_translation = Vec3(px, py, 0);
        pin_clearance[t] = 0.001 + 0.001 * std::sin(ph * 2.0);
      }
      break;
    }
    case MotionKind::jump: {
      // Ground-phase timings shrink with short clips; the flight itself does
      // not, so the apex always clears the contact-distance threshold.
      const double scale = std::clamp(duration_s / 3.0, 1.0 / 3.0, 1.0);
      const double t_crouch = scale * rng.uniform(0.6, 0.9);
      const double t_launch = t_crouch + scale * rng.uniform(0.25, 0.35);
      const double t_fly = rng.uniform(0.42, 0.52);
      const double fold_depth = rng.uniform(0.35, 0.5);
      const double arm = rng.uniform(0.4, 0.9);
      const double g = 9.81;
      const double v0 = 0.5 * g * t_fly;
      for (int t = 0; t < frames; ++t) {
        const double tt = t / fps;
        double fold, raise;
        if (tt < t_crouch) {
          fold = fold_depth * smoothstep(tt / t_crouch);
          raise = 0.2 * smoothstep(tt / t_crouch);
        } else if (tt < t_launch) {
          const double u = smoothstep((tt - t_crouch) / (t_launch - t_crouch));
          fold = fold_depth * (1.0 - u);
          raise = 0.2 + (arm - 0.2) * u;
        } else if (tt < t_launch + t_fly) {
          const double u = (tt - t_launch) / t_fly;
          fold = 0.12 * std::sin(M_PI * u);   // slight tuck mid-flight
          raise = arm;
        } else {
          const double u = smoothstep(std::min(1.0, (tt - t_launch - t_fly) / 0.5));
          fold = fold_depth * 0.8 * std::sin(M_PI * std::min(1.0, u)) * (1.0 - 0.4 * u);
          raise = arm * (1.0 - u);
        }
        poses[t] = fold_pose(skel, fold, psi0, raise, 0.1 * fold);
        poses[t].root_translation = Vec3(x0, y0, 0);
        if (tt >= t_launch && tt < t_launch + t_fly) {
          const double u = tt - t_launch;
          flight_z[t] = v0 * u - 0.5 * g * u * u;
        }
        pin_clearance[t] = 0.0005;
      }
      break;
    }
    case MotionKind::sit:
    case MotionKind::crouch: {
      const bool sit = kind == MotionKind::sit;
      const double depth = sit ? rng.uniform(0.93, 1.0) : rng.uniform(0.84, 1.0);
      const double t_down = std::min(rng.uniform(0.8, 1.1), (duration_s - 0.3) / 2.0);
      const double t_hold = duration_s - 2.0 * t_down;
      const double sway_hz = rng.uniform(0.3, 0.6);
      const double arm = rng.uniform(0.3, 0.6);
      for (int t = 0; t < frames; ++t) {
        const double tt = t / fps;
        double fold;
        if (tt < t_down) {
          fold = depth * smoothstep(tt / t_down);
        } else if (tt < t_down + t_hold) {
          fold = depth * (1.0 - 0.02 * std::sin(2.0 * M_PI * sway_hz * (tt - t_down)));
        } else {
          fold = depth * (1.0 - 0.85 * smoothstep((tt - t_down - t_hold) / t_down));
        }
        poses[t] = fold_pose(skel, fold, psi0, arm * fold, 0.25 * fold, sit);
        poses[t].root_translation = Vec3(x0, y0, 0);
        pin_clearance[t] = 0.0005;
      }
      break;
    }
  }

  // Solve the pelvis height: FK is translation-equivariant, so evaluate at
  // z = 0 and shift. Stance frames pin the lowest contact joint at the
  // clearance target; flight frames add the ballistic arc to the takeoff pin.
  MotionSequence seq;
  seq.fps = fps;
  seq.skeleton = skel;
  seq.plane = GroundPlane{};
  seq.generator = to_string(kind);
  seq.seed = seed;
  std::vector<MatX> joints(frames);
  double last_pin = 0.0;
  for (int t = 0; t < frames; ++t) {
    MatX j = forward_kinematics(skel, poses[t]);
    const double pin_z = pin_clearance[t] - min_contact_height(skel, j);
    double root_z;
    if (std::isnan(flight_z[t])) {
      root_z = pin_z;
      last_pin = pin_z;
    } else {
      root_z = std::max(last_pin + flight_z[t], pin_z);
    }
    poses[t].root_translation.z() = root_z;
    j.col(2).array() += root_z;
    joints[t] = j;
  }
  std::vector<MatX> rootp(frames), orient(frames);
  for (int t = 0; t < frames; ++t) {
    rootp[t] = poses[t].root_translation;
    orient[t] = poses[t].root_orientation;
  }
  const auto jv = compute_velocities(joints, fps);
  const auto rv = compute_velocities(rootp, fps);
  const auto av = compute_velocities(orient, fps);
  seq.states.resize(frames);
  seq.contacts.resize(frames);
  for (int t = 0; t < frames; ++t) {
    MotionState& s = seq.states[t];
    s.pose = poses[t];
    s.joints = joints[t];
    s.joint_velocities = jv[t];
    s.root_velocity = rv[t];
    s.root_angular_velocity = av[t];
    seq.contacts[t] = contact_labels(interaction_from_state(s, seq.plane), skel);
  }
  return seq;
}

inline MotionSequence generate_sequence(MotionKind kind, double duration_s, double fps,
                                        uint64_t seed) {
  return generate_sequence(SkeletonDef::default_skeleton(), kind, duration_s, fps, seed);
}

// Adds i.i.d. zero-mean Gaussian noise to every joint coordinate.
inline ObservationSequence perturb_observations(const MotionSequence& seq, double sigma,
                                                uint64_t seed) {
  if (sigma < 0) throw ConfigError("perturb_observations: sigma must be >= 0");
  Rng rng(seed ^ 0x51d342b1c03f8a99ULL);
  ObservationSequence obs;
  obs.fps = seq.fps;
  obs.noise_sigma = sigma;
  obs.joints_3d.reserve(seq.frames());
  for (const auto& s : seq.states) {
    MatX j = s.joints;
    for (int r = 0; r < j.rows(); ++r)
      for (int c = 0; c < 3; ++c) j(r, c) += sigma * rng.normal();
    obs.joints_3d.push_back(std::move(j));
  }
  return obs;
}

inline Eigen::Vector2d project_point(const Camera& cam, const Vec3& p_world) {
  const Vec3 pc = cam.rotation * p_world + cam.translation;
  if (pc.z() <= 0) throw NumericError("projection: non-positive depth");
  return {cam.fx * pc.x() / pc.z() + cam.cx, cam.fy * pc.y() / pc.z() + cam.cy};
}

// Pixel observations of the true joints under a pinhole camera.
inline ObservationSequence project_to_camera(const MotionSequence& seq, const Camera& cam) {
  ObservationSequence obs;
  obs.fps = seq.fps;
  obs.noise_sigma = 0.0;
  obs.camera = cam;
  std::vector<MatX> all2d;
  for (int t = 0; t < seq.frames(); ++t) {
    const MatX& j = seq.states[t].joints;
    MatX uv(j.rows(), 2);
    for (int i = 0; i < j.rows(); ++i) {
      try {
        uv.row(i) = project_point(cam, j.row(i).transpose()).transpose();
      } catch (const NumericError&) {
        throw NumericError("projection: non-positive depth at frame " + std::to_string(t));
      }
    }
    all2d.push_back(std::move(uv));
    obs.joints_3d.push_back(seq.states[t].joints);
  }
  obs.joints_2d = std::move(all2d);
  return obs;
}

inline double min_hip_height(const MotionSequence& seq) {
  double m = std::numeric_limits<double>::infinity();
  for (const auto& s : seq.states)
    m = std::min(m, signed_distance(seq.plane, s.joints.row(0).transpose()));
  return m;
}

// Difficulty buckets by minimum pelvis height: [0,0.3), [0.3,0.6), [0.6,inf).
// Heights below zero land in the first bucket.
inline int hip_height_bucket(double h) {
  if (h < 0.3) return 0;
  if (h < 0.6) return 1;
  return 2;
}

inline const char* bucket_name(int b) {
  static const char* names[3] = {"0-0.3", "0.3-0.6", "0.6-1.0"};
  return names[b];
}

inline std::array<std::vector<int>, 3> stratify_by_hip_height(
    const std::vector<MotionSequence>& seqs) {
  if (seqs.empty()) throw ConfigError("stratify: no sequences");
  std::array<std::vector<int>, 3> buckets;
  for (size_t i = 0; i < seqs.size(); ++i)
    buckets[hip_height_bucket(min_hip_height(seqs[i]))].push_back(static_cast<int>(i));
  return buckets;
}

}  // namespace gam
