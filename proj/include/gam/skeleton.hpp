#pragma once

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gam/common.hpp"
#include "gam/geometry.hpp"

namespace gam {

constexpr int kNumContactJoints = 9;

// Rigid kinematic tree. Joint 0 is the root (pelvis); every other joint hangs
// off a lower-indexed parent by a fixed rest offset scaled by bone_scale.
struct SkeletonDef {
  int joint_count = 22;
  std::vector<int> parent_index;          // parent of joint i, root = -1
  std::vector<Vec3> rest_offset;          // meters, bone vector from parent
  double bone_scale = 1.0;                // global size factor (shape stand-in)
  std::array<int, kNumContactJoints> contact_joint_indices{};
  std::vector<std::string> joint_names;   // optional, same length as joints

  int state_dim() const { return 12 + 3 * (joint_count - 1) + 6 * joint_count; }
  int interaction_dim() const { return 2 * (joint_count + 1); }

  void validate() const {
    if (joint_count < 2) throw ConfigError("skeleton: joint_count must be >= 2");
    if (static_cast<int>(parent_index.size()) != joint_count ||
        static_cast<int>(rest_offset.size()) != joint_count)
      throw DimensionError("skeleton: parent_index/rest_offset must have joint_count entries");
    if (parent_index[0] != -1) throw ConfigError("skeleton: joint 0 must be the root (parent -1)");
    for (int i = 1; i < joint_count; ++i) {
      if (parent_index[i] < 0 || parent_index[i] >= i)
        throw ConfigError("skeleton: parent index of joint " + std::to_string(i) +
                          " must be a lower joint index");
    }
    if (!(bone_scale > 0)) throw ConfigError("skeleton: bone_scale must be positive");
    std::array<bool, 256> seen{};
    for (int ci : contact_joint_indices) {
      if (ci < 0 || ci >= joint_count)
        throw ConfigError("skeleton: contact joint index out of range");
      if (seen[ci]) throw ConfigError("skeleton: duplicate contact joint index");
      seen[ci] = true;
    }
  }

  static SkeletonDef default_skeleton();
  static SkeletonDef load(const std::string& path);
  void save(const std::string& path) const;

  nlohmann::json to_json() const;
  static SkeletonDef from_json(const nlohmann::json& j);
};

// Pose parameters of one frame: root placement plus per-joint axis-angle
// rotations (joint_angles row i belongs to joint i+1).
struct Pose {
  Vec3 root_translation = Vec3::Zero();
  Vec3 root_orientation = Vec3::Zero();   // axis-angle
  MatX joint_angles;                      // (joint_count-1) x 3 axis-angle

  static Pose zero(const SkeletonDef& skel) {
    Pose p;
    p.joint_angles = MatX::Zero(skel.joint_count - 1, 3);
    return p;
  }

  void canonicalize() {
    root_orientation = canonicalize_axis_angle(root_orientation);
    for (int i = 0; i < joint_angles.rows(); ++i)
      joint_angles.row(i) = canonicalize_axis_angle(joint_angles.row(i).transpose()).transpose();
  }
};

// Full per-frame body state: pose parameters, world joint positions, and
// velocities of everything. Flattens to the fixed layout
// [r, rdot, phi, phidot, theta, joints, jdot] = 3+3+3+3+63+66+66 = 207.
struct MotionState {
  Pose pose;
  MatX joints;                            // joint_count x 3, world meters
  Vec3 root_velocity = Vec3::Zero();
  Vec3 root_angular_velocity = Vec3::Zero();
  MatX joint_velocities;                  // joint_count x 3, m/s
};

constexpr int kOffRoot = 0;
constexpr int kOffRootVel = 3;
constexpr int kOffOrient = 6;
constexpr int kOffOrientVel = 9;
constexpr int kOffAngles = 12;
inline int offset_joints(const SkeletonDef& s) { return 12 + 3 * (s.joint_count - 1); }
inline int offset_joint_vel(const SkeletonDef& s) { return offset_joints(s) + 3 * s.joint_count; }

struct FkCache {
  std::vector<Mat3> rotation;   // accumulated world rotation per joint
  MatX position;                // joint_count x 3
};

// Positions and accumulated rotations for every joint. Root-to-leaf
// composition: child = parent + R_parent_acc * (bone_scale * rest_offset).
// Root translation is added last so it shifts every joint by the same value.
inline FkCache forward_kinematics_full(const SkeletonDef& skel, const Pose& pose) {
  if (pose.joint_angles.rows() != skel.joint_count - 1 || pose.joint_angles.cols() != 3)
    throw DimensionError("forward_kinematics: pose does not match skeleton");
  FkCache out;
  out.rotation.resize(skel.joint_count);
  out.position.resize(skel.joint_count, 3);
  out.rotation[0] = axis_angle_to_matrix(pose.root_orientation);
  out.position.row(0).setZero();
  for (int i = 1; i < skel.joint_count; ++i) {
    const int p = skel.parent_index[i];
    const Vec3 bone = skel.bone_scale * skel.rest_offset[i];
    out.position.row(i) = out.position.row(p) + (out.rotation[p] * bone).transpose();
    out.rotation[i] = out.rotation[p] * axis_angle_to_matrix(pose.joint_angles.row(i - 1).transpose());
  }
  out.position.rowwise() += pose.root_translation.transpose();
  return out;
}

inline MatX forward_kinematics(const SkeletonDef& skel, const Pose& pose) {
  return forward_kinematics_full(skel, pose).position;
}

struct PoseGrad {
  Vec3 d_root_translation = Vec3::Zero();
  Vec3 d_root_orientation = Vec3::Zero();
  MatX d_joint_angles;       // (joint_count-1) x 3
  double d_bone_scale = 0.0;
};

// Reverse-mode pass through the kinematic tree: given dL/d(position) for all
// joints, returns dL/d(pose parameters). Used by the observation-fitting
// initializer; the generative model itself never differentiates FK.
inline PoseGrad forward_kinematics_backward(const SkeletonDef& skel, const Pose& pose,
                                            const FkCache& cache, const MatX& d_position) {
  PoseGrad g;
  g.d_joint_angles = MatX::Zero(skel.joint_count - 1, 3);
  std::vector<Vec3> d_pos(skel.joint_count);
  std::vector<Mat3> d_rot(skel.joint_count, Mat3::Zero());
  for (int i = 0; i < skel.joint_count; ++i) d_pos[i] = d_position.row(i).transpose();

  for (int i = skel.joint_count - 1; i >= 1; --i) {
    const int p = skel.parent_index[i];
    const Vec3 bone = skel.bone_scale * skel.rest_offset[i];
    const Mat3 r_local = axis_angle_to_matrix(pose.joint_angles.row(i - 1).transpose());
    // position.row(i) = position.row(p) + rotation[p] * bone
    d_pos[p] += d_pos[i];
    d_rot[p] += d_pos[i] * bone.transpose();
    g.d_bone_scale += d_pos[i].dot(cache.rotation[p] * skel.rest_offset[i]);
    // rotation[i] = rotation[p] * r_local
    d_rot[p] += d_rot[i] * r_local.transpose();
    const auto dr = axis_angle_to_matrix_jacobian(pose.joint_angles.row(i - 1).transpose());
    const Mat3 d_local = cache.rotation[p].transpose() * d_rot[i];
    for (int k = 0; k < 3; ++k) g.d_joint_angles(i - 1, k) = (d_local.array() * dr[k].array()).sum();
  }
  g.d_root_translation = d_pos[0];
  const auto dr0 = axis_angle_to_matrix_jacobian(pose.root_orientation);
  for (int k = 0; k < 3; ++k) g.d_root_orientation[k] = (d_rot[0].array() * dr0[k].array()).sum();
  return g;
}

// Backward finite differences at the given frame rate; the first frame copies
// the second. A length-1 sequence gets zero velocity.
template <typename T>
std::vector<T> compute_velocities(const std::vector<T>& positions, double fps) {
  if (positions.empty()) return {};
  if (!(fps > 0)) throw ConfigError("compute_velocities: fps must be positive");
  std::vector<T> vel(positions.size());
  if (positions.size() == 1) {
    vel[0] = positions[0];
    vel[0].setZero();
    return vel;
  }
  for (size_t t = 1; t < positions.size(); ++t) vel[t] = (positions[t] - positions[t - 1]) * fps;
  vel[0] = vel[1];
  return vel;
}

inline VecX flatten_state(const SkeletonDef& skel, const MotionState& x) {
  const int jc = skel.joint_count;
  if (x.joints.rows() != jc || x.joint_velocities.rows() != jc ||
      x.pose.joint_angles.rows() != jc - 1)
    throw DimensionError("flatten_state: state does not match skeleton");
  VecX v(skel.state_dim());
  v.segment<3>(kOffRoot) = x.pose.root_translation;
  v.segment<3>(kOffRootVel) = x.root_velocity;
  v.segment<3>(kOffOrient) = x.pose.root_orientation;
  v.segment<3>(kOffOrientVel) = x.root_angular_velocity;
  for (int i = 0; i < jc - 1; ++i)
    v.segment<3>(kOffAngles + 3 * i) = x.pose.joint_angles.row(i).transpose();
  const int oj = offset_joints(skel), ov = offset_joint_vel(skel);
  for (int i = 0; i < jc; ++i) {
    v.segment<3>(oj + 3 * i) = x.joints.row(i).transpose();
    v.segment<3>(ov + 3 * i) = x.joint_velocities.row(i).transpose();
  }
  return v;
}

inline MotionState unflatten_state(const SkeletonDef& skel, const VecX& v) {
  if (v.size() != skel.state_dim())
    throw DimensionError("unflatten_state: expected " + std::to_string(skel.state_dim()) +
                         " entries, got " + std::to_string(v.size()));
  const int jc = skel.joint_count;
  MotionState x;
  x.pose.root_translation = v.segment<3>(kOffRoot);
  x.root_velocity = v.segment<3>(kOffRootVel);
  x.pose.root_orientation = v.segment<3>(kOffOrient);
  x.root_angular_velocity = v.segment<3>(kOffOrientVel);
  x.pose.joint_angles.resize(jc - 1, 3);
  for (int i = 0; i < jc - 1; ++i)
    x.pose.joint_angles.row(i) = v.segment<3>(kOffAngles + 3 * i).transpose();
  x.joints.resize(jc, 3);
  x.joint_velocities.resize(jc, 3);
  const int oj = offset_joints(skel), ov = offset_joint_vel(skel);
  for (int i = 0; i < jc; ++i) {
    x.joints.row(i) = v.segment<3>(oj + 3 * i).transpose();
    x.joint_velocities.row(i) = v.segment<3>(ov + 3 * i).transpose();
  }
  return x;
}

// Extract the joint-position block of a flattened state as joint_count x 3.
inline MatX joints_from_flat(const SkeletonDef& skel, const VecX& v) {
  const int oj = offset_joints(skel);
  MatX j(skel.joint_count, 3);
  for (int i = 0; i < skel.joint_count; ++i) j.row(i) = v.segment<3>(oj + 3 * i).transpose();
  return j;
}

inline SkeletonDef SkeletonDef::default_skeleton() {
  SkeletonDef s;
  s.joint_count = 22;
  s.joint_names = {"pelvis",     "spine1",     "spine2",      "spine3",
                   "neck",       "head",       "l_clavicle",  "r_clavicle",
                   "l_shoulder", "r_shoulder", "l_elbow",     "r_elbow",
                   "l_wrist",    "r_wrist",    "l_hip",       "r_hip",
                   "l_knee",     "r_knee",     "l_ankle",     "r_ankle",
                   "l_toe",      "r_toe"};
  s.parent_index = {-1, 0, 1, 2, 3, 4, 3, 3, 6, 7, 8, 9, 10, 11, 0, 0, 14, 15, 16, 17, 18, 19};
  // World axes: +z up, +x facing direction, +y to the body's left. T-pose.
  s.rest_offset.assign(22, Vec3::Zero());
  s.rest_offset[1] = {0.0, 0.0, 0.12};     // spine1
  s.rest_offset[2] = {0.0, 0.0, 0.13};     // spine2
  s.rest_offset[3] = {0.0, 0.0, 0.13};     // spine3
  s.rest_offset[4] = {0.0, 0.0, 0.15};     // neck
  s.rest_offset[5] = {0.0, 0.0, 0.12};     // head
  s.rest_offset[6] = {0.0, 0.08, 0.05};    // l_clavicle
  s.rest_offset[7] = {0.0, -0.08, 0.05};   // r_clavicle
  s.rest_offset[8] = {0.0, 0.12, 0.0};     // l_shoulder
  s.rest_offset[9] = {0.0, -0.12, 0.0};    // r_shoulder
  s.rest_offset[10] = {0.0, 0.26, 0.0};    // l_elbow
  s.rest_offset[11] = {0.0, -0.26, 0.0};   // r_elbow
  s.rest_offset[12] = {0.0, 0.25, 0.0};    // l_wrist
  s.rest_offset[13] = {0.0, -0.25, 0.0};   // r_wrist
  s.rest_offset[14] = {0.0, 0.09, -0.06};  // l_hip
  s.rest_offset[15] = {0.0, -0.09, -0.06}; // r_hip
  s.rest_offset[16] = {0.0, 0.0, -0.40};   // l_knee
  s.rest_offset[17] = {0.0, 0.0, -0.40};   // r_knee
  s.rest_offset[18] = {0.0, 0.0, -0.40};   // l_ankle
  s.rest_offset[19] = {0.0, 0.0, -0.40};   // r_ankle
  s.rest_offset[20] = {0.14, 0.0, -0.05};  // l_toe
  s.rest_offset[21] = {0.14, 0.0, -0.05};  // r_toe
  // Pelvis, knees, ankles, toes, wrists: the parts that plausibly reach ground.
  s.contact_joint_indices = {0, 16, 17, 18, 19, 20, 21, 12, 13};
  s.validate();
  return s;
}

inline nlohmann::json SkeletonDef::to_json() const {
  nlohmann::json j;
  j["joint_count"] = joint_count;
  j["parent_index"] = parent_index;
  j["bone_scale"] = bone_scale;
  j["contact_joint_indices"] = contact_joint_indices;
  std::vector<std::array<double, 3>> offs;
  for (const auto& o : rest_offset) offs.push_back({o.x(), o.y(), o.z()});
  j["rest_offset_m"] = offs;
  if (!joint_names.empty()) j["joint_names"] = joint_names;
  return j;
}

inline SkeletonDef SkeletonDef::from_json(const nlohmann::json& j) {
  SkeletonDef s;
  try {
    s.joint_count = j.at("joint_count").get<int>();
    s.parent_index = j.at("parent_index").get<std::vector<int>>();
    s.bone_scale = j.at("bone_scale").get<double>();
    auto ci = j.at("contact_joint_indices").get<std::vector<int>>();
    if (ci.size() != kNumContactJoints)
      throw ConfigError("skeleton: expected 9 contact joint indices");
    std::copy(ci.begin(), ci.end(), s.contact_joint_indices.begin());
    auto offs = j.at("rest_offset_m").get<std::vector<std::array<double, 3>>>();
    for (const auto& o : offs) s.rest_offset.emplace_back(o[0], o[1], o[2]);
    if (j.contains("joint_names")) s.joint_names = j.at("joint_names").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("skeleton: malformed config: ") + e.what());
  }
  s.validate();
  return s;
}

inline SkeletonDef SkeletonDef::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("skeleton: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("skeleton: invalid JSON in ") + path + ": " + e.what());
  }
  return from_json(j);
}

inline void SkeletonDef::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("skeleton: cannot write " + path);
  out << to_json().dump(2) << "\n";
}

}  // namespace gam
