#include <catch2/catch_amalgamated.hpp>

#include "gam/ground.hpp"
#include "gam/rng.hpp"
#include "test_util.hpp"

using namespace gam;

namespace {

MotionState random_state(const SkeletonDef& skel, Rng& rng) {
  MotionState x;
  x.pose.root_translation = rng.normal_vec(3);
  x.pose.root_orientation = rng.normal_vec(3, 0.5);
  x.pose.joint_angles = rng.normal_mat(skel.joint_count - 1, 3, 0.5);
  x.joints = rng.normal_mat(skel.joint_count, 3);
  x.root_velocity = rng.normal_vec(3);
  x.root_angular_velocity = rng.normal_vec(3);
  x.joint_velocities = rng.normal_mat(skel.joint_count, 3);
  return x;
}

GroundPlane random_plane(Rng& rng) {
  Vec4 raw;
  raw.head<3>() = rng.normal_vec(3);
  while (raw.head<3>().norm() < 0.1) raw.head<3>() = rng.normal_vec(3);
  raw[3] = rng.normal();
  return normalize_plane(raw);
}

}  // namespace

TEST_CASE("signed_distance basics") {
  GroundPlane z0;  // z = 0, normal +z
  CHECK(signed_distance(z0, Vec3(1, 2, 0.5)) == 0.5);
  CHECK(signed_distance(z0, Vec3(-3, 9, 0)) == 0.0);
}

TEST_CASE("signed_distance equals the point-on-plane projection oracle") {
  // Oracle: pick an explicit plane point Q and project the vector Q->J onto
  // the unit normal (|QJ| cos alpha).
  GroundPlane p;
  p.normal = Vec3(0, 1, 1).normalized();
  p.offset = 0;
  const Vec3 point(0, 1, 1);
  const Vec3 q(0, 0, 0);  // on the plane
  const Vec3 qj = point - q;
  const double oracle = qj.norm() * std::cos(std::acos(qj.normalized().dot(p.normal)));
  CHECK(signed_distance(p, point) == Catch::Approx(std::sqrt(2.0)).margin(1e-12));
  CHECK(signed_distance(p, point) == Catch::Approx(oracle).margin(1e-12));

  Rng rng(30);
  for (int trial = 0; trial < 1000; ++trial) {
    const GroundPlane plane = random_plane(rng);
    const Vec3 j = rng.normal_vec(3, 2.0);
    const Vec3 q2 = -plane.offset * plane.normal;  // a point on the plane
    const Vec3 v = j - q2;
    const double d_oracle = v.dot(plane.normal);
    CHECK(std::abs(signed_distance(plane, j) - d_oracle) < 1e-9);
  }
}

TEST_CASE("signed_distance is linear in the point") {
  Rng rng(31);
  const GroundPlane plane = random_plane(rng);
  const Vec3 a = rng.normal_vec(3), b = rng.normal_vec(3);
  const double alpha = 0.7;
  const double lhs = signed_distance(plane, alpha * a + (1 - alpha) * b);
  const double rhs = alpha * signed_distance(plane, a) + (1 - alpha) * signed_distance(plane, b);
  CHECK(std::abs(lhs - rhs) < 1e-12);
}

TEST_CASE("interaction_from_state on a static body over z=0") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  MotionState x;
  x.pose = Pose::zero(skel);
  x.pose.root_translation = Vec3(0, 0, 0.91);
  x.joints = forward_kinematics(skel, x.pose);
  x.joint_velocities = MatX::Zero(skel.joint_count, 3);
  const InteractionState g = interaction_from_state(x, GroundPlane{});
  CHECK(g.distances.size() == 23);
  CHECK(g.normal_velocities.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.distances[0] == Catch::Approx(0.91));
  // Toes end up near the ground in the default stance.
  CHECK(std::abs(g.distances[1 + 20]) < 0.02);
  CHECK(std::abs(g.distances[1 + 21]) < 0.02);
}

TEST_CASE("normal velocity picks up vertical motion") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  Rng rng(33);
  MotionState x = random_state(skel, rng);
  x.joint_velocities.row(5) = Vec3(0, 0, 1.0).transpose();  // straight up at 1 m/s
  const InteractionState g = interaction_from_state(x, GroundPlane{});
  CHECK(g.normal_velocities[1 + 5] == 1.0);
}

TEST_CASE("interaction_from_state matches a per-joint projection oracle") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  Rng rng(34);
  for (int trial = 0; trial < 1000; ++trial) {
    const MotionState x = random_state(skel, rng);
    const GroundPlane plane = random_plane(rng);
    const InteractionState g = interaction_from_state(x, plane);
    const Vec3 q = -plane.offset * plane.normal;
    CHECK(std::abs(g.distances[0] - (x.pose.root_translation - q).dot(plane.normal)) < 1e-9);
    CHECK(std::abs(g.normal_velocities[0] - x.root_velocity.dot(plane.normal)) < 1e-9);
    for (int i = 0; i < skel.joint_count; ++i) {
      const Vec3 ji = x.joints.row(i).transpose();
      const Vec3 vi = x.joint_velocities.row(i).transpose();
      CHECK(std::abs(g.distances[1 + i] - (ji - q).dot(plane.normal)) < 1e-9);
      CHECK(std::abs(g.normal_velocities[1 + i] - vi.dot(plane.normal)) < 1e-9);
    }
  }
}

TEST_CASE("interaction is invariant under rigid motion of the whole scene") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  Rng rng(35);
  for (int trial = 0; trial < 50; ++trial) {
    const MotionState x = random_state(skel, rng);
    const GroundPlane plane = random_plane(rng);
    const Mat3 rot = axis_angle_to_matrix(rng.normal_vec(3));
    const Vec3 t = rng.normal_vec(3);

    MotionState moved = x;
    moved.pose.root_translation = rot * x.pose.root_translation + t;
    moved.root_velocity = rot * x.root_velocity;
    moved.joints = (rot * x.joints.transpose()).transpose();
    moved.joints.rowwise() += t.transpose();
    moved.joint_velocities = (rot * x.joint_velocities.transpose()).transpose();
    GroundPlane moved_plane;
    moved_plane.normal = rot * plane.normal;
    moved_plane.offset = plane.offset - moved_plane.normal.dot(t);

    const InteractionState g0 = interaction_from_state(x, plane);
    const InteractionState g1 = interaction_from_state(moved, moved_plane);
    CHECK((g0.distances - g1.distances).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((g0.normal_velocities - g1.normal_velocities).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("contact_labels thresholds") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  InteractionState g;
  g.distances = VecX::Constant(23, 1.0);
  g.normal_velocities = VecX::Constant(23, 1.0);
  const int toe = skel.contact_joint_indices[5];

  g.distances[1 + toe] = 0.01;
  g.normal_velocities[1 + toe] = 0.05;
  auto labels = contact_labels(g, skel);
  CHECK(labels[5] == 1);

  g.distances[1 + toe] = 0.5;
  labels = contact_labels(g, skel);
  CHECK(labels[5] == 0);
  g.distances[1 + toe] = 0.5;
  g.normal_velocities[1 + toe] = 0.0;
  CHECK(contact_labels(g, skel)[5] == 0);

  CHECK_THROWS_AS(contact_labels(g, skel, -0.1, 0.5), ConfigError);
}

TEST_CASE("contact_labels agree with an independent rule oracle on random data") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  Rng rng(36);
  for (int trial = 0; trial < 500; ++trial) {
    InteractionState g;
    g.distances = rng.normal_vec(23, 0.1);
    g.normal_velocities = rng.normal_vec(23, 0.6);
    const auto labels = contact_labels(g, skel, 0.08, 0.5);
    for (int k = 0; k < kNumContactJoints; ++k) {
      const int j = skel.contact_joint_indices[k];
      const bool expect =
          std::abs(g.distances[1 + j]) < 0.08 && std::abs(g.normal_velocities[1 + j]) < 0.5;
      CHECK(labels[k] == (expect ? 1 : 0));
    }
  }
}

TEST_CASE("normalize_plane") {
  const GroundPlane p = normalize_plane(Vec4(0, 0, 2, 4));
  CHECK((p.normal - Vec3(0, 0, 1)).norm() == 0.0);
  CHECK(p.offset == 2.0);

  const GroundPlane q = normalize_plane(Vec4(0, 1, 0, -3));
  CHECK((q.normal - Vec3(0, 1, 0)).norm() == 0.0);
  CHECK(q.offset == -3.0);

  CHECK_THROWS_AS(normalize_plane(Vec4(1e-9, 0, 0, 1)), NumericError);

  // Positive rescaling of the raw vector leaves distances unchanged.
  Rng rng(37);
  for (int trial = 0; trial < 200; ++trial) {
    Vec4 raw;
    raw << rng.normal_vec(3), rng.normal();
    if (raw.head<3>().norm() < 0.1) continue;
    const Vec3 point = rng.normal_vec(3, 2.0);
    const double scale = std::exp(rng.normal());
    const double d1 = signed_distance(normalize_plane(raw), point);
    const double d2 = signed_distance(normalize_plane(scale * raw), point);
    CHECK(std::abs(d1 - d2) < 1e-9);
  }
}

TEST_CASE("flat-state interaction map agrees with the struct version") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  Rng rng(38);
  for (int trial = 0; trial < 100; ++trial) {
    const MotionState x = random_state(skel, rng);
    const GroundPlane plane = random_plane(rng);
    const VecX flat_g = interaction_from_flat(skel, flatten_state(skel, x), plane);
    const VecX struct_g = interaction_from_state(x, plane).flatten();
    CHECK((flat_g - struct_g).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("flat-state interaction backward passes match finite differences") {
  const SkeletonDef skel = SkeletonDef::default_skeleton();
  Rng rng(39);
  const VecX x = rng.normal_vec(skel.state_dim());
  const GroundPlane plane = random_plane(rng);
  const VecX w = rng.normal_vec(skel.interaction_dim());
  auto loss = [&](const VecX& xs, const GroundPlane& pl) {
    return w.dot(interaction_from_flat(skel, xs, pl));
  };

  VecX dx = VecX::Zero(x.size());
  interaction_from_flat_backward(skel, plane, w, dx);
  const double h = 1e-6;
  Rng pick(40);
  for (int trial = 0; trial < 30; ++trial) {
    const int i = static_cast<int>(pick.integer() % x.size());
    VecX xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (loss(xp, plane) - loss(xm, plane)) / (2 * h);
    CHECK(test::rel_err(dx[i], fd) < 1e-6);
  }

  Vec3 dn = Vec3::Zero();
  double doff = 0;
  interaction_plane_backward(skel, x, w, dn, doff);
  for (int k = 0; k < 3; ++k) {
    GroundPlane pp = plane, pm = plane;
    pp.normal[k] += h;
    pm.normal[k] -= h;
    CHECK(test::rel_err(dn[k], (loss(x, pp) - loss(x, pm)) / (2 * h)) < 1e-6);
  }
  GroundPlane pp = plane, pm = plane;
  pp.offset += h;
  pm.offset -= h;
  CHECK(test::rel_err(doff, (loss(x, pp) - loss(x, pm)) / (2 * h)) < 1e-6);
}

TEST_CASE("orient_towards enforces the body-above-plane sign convention") {
  GroundPlane p;
  p.normal = Vec3(0, 0, -1);
  p.offset = 0;
  const GroundPlane q = orient_towards(p, Vec3(0, 0, 1.0));
  CHECK(signed_distance(q, Vec3(0, 0, 1.0)) > 0);
}
