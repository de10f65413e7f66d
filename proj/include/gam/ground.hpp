#pragma once

#include <array>
#include <cmath>

#include "gam/common.hpp"
#include "gam/skeleton.hpp"

namespace gam {

// Plane {p : normal.p + offset = 0} with unit normal. The raw 4-vector form is
// what the ground-recovery optimizer moves; normalize_plane maps raw -> plane.
struct GroundPlane {
  Vec3 normal = Vec3::UnitZ();
  double offset = 0.0;

  Vec4 raw() const { return Vec4(normal.x(), normal.y(), normal.z(), offset); }
};

inline GroundPlane normalize_plane(const Vec4& raw) {
  const double n = raw.head<3>().norm();
  if (n < 1e-8) throw NumericError("normalize_plane: degenerate plane (near-zero normal)");
  GroundPlane p;
  p.normal = raw.head<3>() / n;
  p.offset = raw[3] / n;
  return p;
}

inline double signed_distance(const GroundPlane& plane, const Vec3& point) {
  return plane.normal.dot(point) + plane.offset;
}

// Flip the plane so the body's mean joint position sits at non-negative distance.
inline GroundPlane orient_towards(const GroundPlane& plane, const Vec3& body_point) {
  if (signed_distance(plane, body_point) >= 0) return plane;
  GroundPlane p;
  p.normal = -plane.normal;
  p.offset = -plane.offset;
  return p;
}

// Joint-to-ground coupling of one frame: signed distances for the root point
// plus every joint, and their velocity components along the plane normal.
struct InteractionState {
  VecX distances;           // (joint_count + 1), meters
  VecX normal_velocities;   // (joint_count + 1), m/s

  VecX flatten() const {
    VecX v(distances.size() + normal_velocities.size());
    v << distances, normal_velocities;
    return v;
  }

  static InteractionState unflatten(const VecX& v) {
    if (v.size() % 2 != 0) throw DimensionError("interaction: flattened size must be even");
    InteractionState g;
    const int n = static_cast<int>(v.size()) / 2;
    g.distances = v.head(n);
    g.normal_velocities = v.tail(n);
    return g;
  }
};

// Entry order: [root, joint 0, ..., joint jc-1]; the root point duplicates
// joint 0 for the default skeleton but keeps the layout explicit.
inline InteractionState interaction_from_state(const MotionState& x, const GroundPlane& plane) {
  const int jc = static_cast<int>(x.joints.rows());
  InteractionState g;
  g.distances.resize(jc + 1);
  g.normal_velocities.resize(jc + 1);
  g.distances[0] = signed_distance(plane, x.pose.root_translation);
  g.normal_velocities[0] = plane.normal.dot(x.root_velocity);
  for (int i = 0; i < jc; ++i) {
    g.distances[1 + i] = signed_distance(plane, x.joints.row(i).transpose());
    g.normal_velocities[1 + i] = plane.normal.dot(x.joint_velocities.row(i).transpose());
  }
  return g;
}

// Same map applied to a flattened state vector. Linear in the state for a
// fixed plane, which the losses and their backward passes rely on.
inline VecX interaction_from_flat(const SkeletonDef& skel, const VecX& x, const GroundPlane& plane) {
  const int jc = skel.joint_count;
  const int oj = offset_joints(skel), ov = offset_joint_vel(skel);
  VecX g(2 * (jc + 1));
  g[0] = plane.normal.dot(x.segment<3>(kOffRoot)) + plane.offset;
  g[jc + 1] = plane.normal.dot(x.segment<3>(kOffRootVel));
  for (int i = 0; i < jc; ++i) {
    g[1 + i] = plane.normal.dot(x.segment<3>(oj + 3 * i)) + plane.offset;
    g[jc + 2 + i] = plane.normal.dot(x.segment<3>(ov + 3 * i));
  }
  return g;
}

// Accumulates dL/dx given dL/dg for the map above (fixed plane).
inline void interaction_from_flat_backward(const SkeletonDef& skel, const GroundPlane& plane,
                                           const VecX& d_g, VecX& d_x) {
  const int jc = skel.joint_count;
  const int oj = offset_joints(skel), ov = offset_joint_vel(skel);
  d_x.segment<3>(kOffRoot) += d_g[0] * plane.normal;
  d_x.segment<3>(kOffRootVel) += d_g[jc + 1] * plane.normal;
  for (int i = 0; i < jc; ++i) {
    d_x.segment<3>(oj + 3 * i) += d_g[1 + i] * plane.normal;
    d_x.segment<3>(ov + 3 * i) += d_g[jc + 2 + i] * plane.normal;
  }
}

// Accumulates dL/d(normal) and dL/d(offset) given dL/dg, for the moving-plane case.
inline void interaction_plane_backward(const SkeletonDef& skel, const VecX& x, const VecX& d_g,
                                       Vec3& d_normal, double& d_offset) {
  const int jc = skel.joint_count;
  const int oj = offset_joints(skel), ov = offset_joint_vel(skel);
  d_normal += d_g[0] * x.segment<3>(kOffRoot) + d_g[jc + 1] * x.segment<3>(kOffRootVel);
  d_offset += d_g[0];
  for (int i = 0; i < jc; ++i) {
    d_normal += d_g[1 + i] * x.segment<3>(oj + 3 * i) + d_g[jc + 2 + i] * x.segment<3>(ov + 3 * i);
    d_offset += d_g[1 + i];
  }
}

constexpr double kDefaultContactDistThresh = 0.08;  // meters
constexpr double kDefaultContactVelThresh = 0.5;    // m/s

// A contact joint touches ground when it is both close and slow along the normal.
inline std::array<int, kNumContactJoints> contact_labels(
    const InteractionState& g, const SkeletonDef& skel,
    double d_thresh = kDefaultContactDistThresh, double v_thresh = kDefaultContactVelThresh) {
  if (!(d_thresh > 0) || !(v_thresh > 0))
    throw ConfigError("contact_labels: thresholds must be positive");
  std::array<int, kNumContactJoints> labels{};
  for (int k = 0; k < kNumContactJoints; ++k) {
    const int j = skel.contact_joint_indices[k];
    const double d = g.distances[1 + j];
    const double v = g.normal_velocities[1 + j];
    labels[k] = (std::abs(d) < d_thresh && std::abs(v) < v_thresh) ? 1 : 0;
  }
  return labels;
}

}  // namespace gam
