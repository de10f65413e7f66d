#pragma once

#include <array>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gam/common.hpp"
#include "gam/ground.hpp"
#include "gam/skeleton.hpp"

namespace gam {

constexpr const char* kSequenceMagic = "gam.sequence";
constexpr const char* kObservationsMagic = "gam.observations";
constexpr int kSequenceVersion = 1;

namespace detail {

inline nlohmann::json vec3_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

inline Vec3 vec3_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw DimensionError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline nlohmann::json mat_json(const MatX& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline MatX mat_from(const nlohmann::json& j, int rows, int cols, const char* what) {
  if (!j.is_array() || static_cast<int>(j.size()) != rows)
    throw DimensionError(std::string(what) + ": wrong row count");
  MatX m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const auto& row = j[r];
    if (!row.is_array() || static_cast<int>(row.size()) != cols)
      throw DimensionError(std::string(what) + ": wrong column count");
    for (int c = 0; c < cols; ++c) m(r, c) = row[c].get<double>();
  }
  return m;
}

inline nlohmann::json read_json_file(const std::string& path, const char* magic) {
  std::ifstream in(path);
  if (!in) throw FormatError(std::string("cannot open ") + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": invalid or truncated file: " + e.what());
  }
  if (!j.contains("format") || j["format"] != magic)
    throw FormatError(path + ": not a " + std::string(magic) + " file");
  if (!j.contains("version") || j["version"].get<int>() != kSequenceVersion)
    throw FormatError(path + ": unsupported format version");
  return j;
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw FormatError(std::string("cannot write ") + path);
  out << j.dump() << "\n";
  if (!out) throw FormatError(std::string("write failed for ") + path);
}

}  // namespace detail

// Ground-truth motion clip: states, their skeleton, the ground plane, and the
// per-frame contact labels that are consistent with the states and plane.
struct MotionSequence {
  double fps = 30.0;
  SkeletonDef skeleton;
  std::vector<MotionState> states;
  GroundPlane plane;
  std::vector<std::array<int, kNumContactJoints>> contacts;
  std::string generator;
  uint64_t seed = 0;

  int frames() const { return static_cast<int>(states.size()); }

  MatX flat_states() const {
    MatX m(skeleton.state_dim(), frames());
    for (int t = 0; t < frames(); ++t) m.col(t) = flatten_state(skeleton, states[t]);
    return m;
  }

  // Velocity fields must equal backward differences of their position fields,
  // and contacts must equal the labels recomputed from states and plane.
  void validate(double tol = 1e-9) const {
    if (states.empty()) throw DimensionError("sequence: no frames");
    if (contacts.size() != states.size()) throw DimensionError("sequence: contacts/frames mismatch");
    std::vector<MatX> pos, rootp, orient;
    for (const auto& s : states) {
      if (s.joints.rows() != skeleton.joint_count)
        throw DimensionError("sequence: joint count mismatch");
      pos.push_back(s.joints);
      rootp.push_back(s.pose.root_translation);
      orient.push_back(s.pose.root_orientation);
    }
    const auto jv = compute_velocities(pos, fps);
    const auto rv = compute_velocities(rootp, fps);
    const auto av = compute_velocities(orient, fps);
    for (int t = 0; t < frames(); ++t) {
      if ((states[t].joint_velocities - jv[t]).cwiseAbs().maxCoeff() > tol ||
          (states[t].root_velocity - rv[t]).cwiseAbs().maxCoeff() > tol ||
          (states[t].root_angular_velocity - av[t]).cwiseAbs().maxCoeff() > tol)
        throw NumericError("sequence: velocities are not backward differences at frame " +
                           std::to_string(t));
      const auto labels = contact_labels(interaction_from_state(states[t], plane), skeleton);
      if (labels != contacts[t])
        throw NumericError("sequence: stored contacts disagree with states at frame " +
                           std::to_string(t));
    }
  }
};

// Pinhole camera; world-to-camera is p_cam = rotation * p_world + translation.
struct Camera {
  double fx = 1000, fy = 1000, cx = 640, cy = 360;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
};

// What the reconstruction pipeline actually sees: noisy 3D joints and,
// optionally, pixel-space projections with the camera that produced them.
struct ObservationSequence {
  double fps = 30.0;
  std::vector<MatX> joints_3d;                     // per frame joint_count x 3
  std::optional<std::vector<MatX>> joints_2d;      // per frame joint_count x 2
  std::optional<Camera> camera;
  double noise_sigma = 0.0;

  int frames() const { return static_cast<int>(joints_3d.size()); }

  void validate() const {
    if (joints_2d && !camera) throw ConfigError("observations: joints_2d requires a camera");
    if (joints_2d && joints_2d->size() != joints_3d.size())
      throw DimensionError("observations: 2d/3d frame count mismatch");
  }
};

inline void save_sequence(const std::string& path, const MotionSequence& seq) {
  nlohmann::json j;
  j["format"] = kSequenceMagic;
  j["version"] = kSequenceVersion;
  j["fps"] = seq.fps;
  j["skeleton"] = seq.skeleton.to_json();
  j["plane"] = {{"normal", detail::vec3_json(seq.plane.normal)}, {"offset", seq.plane.offset}};
  j["meta"] = {{"generator", seq.generator}, {"seed", seq.seed}};
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& s : seq.states) {
    nlohmann::json f;
    f["r"] = detail::vec3_json(s.pose.root_translation);
    f["rdot"] = detail::vec3_json(s.root_velocity);
    f["phi"] = detail::vec3_json(s.pose.root_orientation);
    f["phidot"] = detail::vec3_json(s.root_angular_velocity);
    f["theta"] = detail::mat_json(s.pose.joint_angles);
    f["joints"] = detail::mat_json(s.joints);
    f["jdot"] = detail::mat_json(s.joint_velocities);
    frames.push_back(std::move(f));
  }
  j["frames"] = std::move(frames);
  j["contacts"] = seq.contacts;
  detail::write_json_file(path, j);
}

inline MotionSequence load_sequence(const std::string& path) {
  const nlohmann::json j = detail::read_json_file(path, kSequenceMagic);
  MotionSequence seq;
  try {
    seq.fps = j.at("fps").get<double>();
    seq.skeleton = SkeletonDef::from_json(j.at("skeleton"));
    seq.plane.normal = detail::vec3_from(j.at("plane").at("normal"));
    seq.plane.offset = j.at("plane").at("offset").get<double>();
    seq.generator = j.at("meta").at("generator").get<std::string>();
    seq.seed = j.at("meta").at("seed").get<uint64_t>();
    const int jc = seq.skeleton.joint_count;
    for (const auto& f : j.at("frames")) {
      MotionState s;
      s.pose.root_translation = detail::vec3_from(f.at("r"));
      s.root_velocity = detail::vec3_from(f.at("rdot"));
      s.pose.root_orientation = detail::vec3_from(f.at("phi"));
      s.root_angular_velocity = detail::vec3_from(f.at("phidot"));
      s.pose.joint_angles = detail::mat_from(f.at("theta"), jc - 1, 3, "theta");
      s.joints = detail::mat_from(f.at("joints"), jc, 3, "joints");
      s.joint_velocities = detail::mat_from(f.at("jdot"), jc, 3, "jdot");
      seq.states.push_back(std::move(s));
    }
    for (const auto& c : j.at("contacts")) {
      std::array<int, kNumContactJoints> labels{};
      if (c.size() != kNumContactJoints) throw DimensionError("contacts: expected 9 labels");
      for (int k = 0; k < kNumContactJoints; ++k) labels[k] = c[k].get<int>();
      seq.contacts.push_back(labels);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed sequence: " + e.what());
  }
  if (seq.contacts.size() != seq.states.size())
    throw DimensionError(path + ": contacts/frames mismatch");
  return seq;
}

inline void save_observations(const std::string& path, const ObservationSequence& obs) {
  obs.validate();
  nlohmann::json j;
  j["format"] = kObservationsMagic;
  j["version"] = kSequenceVersion;
  j["fps"] = obs.fps;
  j["noise_sigma"] = obs.noise_sigma;
  nlohmann::json j3 = nlohmann::json::array();
  for (const auto& m : obs.joints_3d) j3.push_back(detail::mat_json(m));
  j["joints_3d"] = std::move(j3);
  if (obs.joints_2d) {
    nlohmann::json j2 = nlohmann::json::array();
    for (const auto& m : *obs.joints_2d) j2.push_back(detail::mat_json(m));
    j["joints_2d"] = std::move(j2);
  }
  if (obs.camera) {
    const Camera& c = *obs.camera;
    j["camera"] = {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy},
                   {"rotation", detail::mat_json(c.rotation)},
                   {"translation", detail::vec3_json(c.translation)}};
  }
  detail::write_json_file(path, j);
}

inline ObservationSequence load_observations(const std::string& path) {
  const nlohmann::json j = detail::read_json_file(path, kObservationsMagic);
  ObservationSequence obs;
  try {
    obs.fps = j.at("fps").get<double>();
    obs.noise_sigma = j.at("noise_sigma").get<double>();
    const auto& j3 = j.at("joints_3d");
    if (j3.empty()) throw DimensionError("observations: no frames");
    const int jc = static_cast<int>(j3[0].size());
    for (const auto& m : j3) obs.joints_3d.push_back(detail::mat_from(m, jc, 3, "joints_3d"));
    if (j.contains("joints_2d")) {
      std::vector<MatX> v2;
      for (const auto& m : j.at("joints_2d")) v2.push_back(detail::mat_from(m, jc, 2, "joints_2d"));
      obs.joints_2d = std::move(v2);
    }
    if (j.contains("camera")) {
      Camera c;
      c.fx = j["camera"].at("fx").get<double>();
      c.fy = j["camera"].at("fy").get<double>();
      c.cx = j["camera"].at("cx").get<double>();
      c.cy = j["camera"].at("cy").get<double>();
      c.rotation = detail::mat_from(j["camera"].at("rotation"), 3, 3, "camera rotation");
      c.translation = detail::vec3_from(j["camera"].at("translation"));
      obs.camera = c;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed observations: " + e.what());
  }
  obs.validate();
  return obs;
}

// Express a sequence in a rigidly moved world frame: p' = R p + t. Velocity
// fields are recomputed from the transformed positions so the sequence
// invariants keep holding exactly.
inline MotionSequence transform_sequence(const MotionSequence& seq, const Mat3& rot, const Vec3& t) {
  MotionSequence out = seq;
  std::vector<MatX> pos, rootp, orient;
  for (size_t i = 0; i < seq.states.size(); ++i) {
    MotionState s = seq.states[i];
    s.pose.root_translation = rot * s.pose.root_translation + t;
    s.pose.root_orientation =
        matrix_to_axis_angle(rot * axis_angle_to_matrix(seq.states[i].pose.root_orientation));
    s.joints = (rot * s.joints.transpose()).transpose();
    s.joints.rowwise() += t.transpose();
    out.states[i] = s;
    pos.push_back(out.states[i].joints);
    rootp.push_back(out.states[i].pose.root_translation);
    orient.push_back(out.states[i].pose.root_orientation);
  }
  const auto jv = compute_velocities(pos, seq.fps);
  const auto rv = compute_velocities(rootp, seq.fps);
  const auto av = compute_velocities(orient, seq.fps);
  for (int i = 0; i < out.frames(); ++i) {
    out.states[i].joint_velocities = jv[i];
    out.states[i].root_velocity = rv[i];
    out.states[i].root_angular_velocity = av[i];
  }
  out.plane.normal = rot * seq.plane.normal;
  out.plane.offset = seq.plane.offset - out.plane.normal.dot(t);
  for (int i = 0; i < out.frames(); ++i)
    out.contacts[i] = contact_labels(interaction_from_state(out.states[i], out.plane), out.skeleton);
  return out;
}

}  // namespace gam
