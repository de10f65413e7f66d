#pragma once

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gam/sequence.hpp"
#include "gam/synth.hpp"

namespace gam {

namespace metrics_detail {

inline void check_shapes(const std::vector<MatX>& pred, const std::vector<MatX>& gt) {
  if (pred.size() != gt.size()) throw DimensionError("metrics: frame count mismatch");
  if (pred.empty()) throw DimensionError("metrics: empty sequences");
  for (size_t t = 0; t < pred.size(); ++t)
    if (pred[t].rows() != gt[t].rows() || pred[t].cols() != 3 || gt[t].cols() != 3)
      throw DimensionError("metrics: joint array shape mismatch");
}

}  // namespace metrics_detail

// Mean per-joint position error in millimeters after per-frame root
// alignment (joint 0 translated onto the ground truth).
inline double mpjpe(const std::vector<MatX>& pred, const std::vector<MatX>& gt) {
  metrics_detail::check_shapes(pred, gt);
  double acc = 0;
  long count = 0;
  for (size_t t = 0; t < pred.size(); ++t) {
    const Eigen::RowVector3d shift = gt[t].row(0) - pred[t].row(0);
    MatX aligned = pred[t];
    aligned.rowwise() += shift;
    acc += (aligned - gt[t]).rowwise().norm().sum();
    count += pred[t].rows();
  }
  return 1000.0 * acc / count;
}

// Same error over raw world positions, no alignment.
inline double mpjpe_g(const std::vector<MatX>& pred, const std::vector<MatX>& gt) {
  metrics_detail::check_shapes(pred, gt);
  double acc = 0;
  long count = 0;
  for (size_t t = 0; t < pred.size(); ++t) {
    acc += (pred[t] - gt[t]).rowwise().norm().sum();
    count += pred[t].rows();
  }
  return 1000.0 * acc / count;
}

// Per-frame rigid Procrustes alignment (rotation + translation, no scale)
// before the error. Frames whose joints are all coincident fall back to
// translation-only alignment.
inline double mpjpe_pa(const std::vector<MatX>& pred, const std::vector<MatX>& gt) {
  metrics_detail::check_shapes(pred, gt);
  double acc = 0;
  long count = 0;
  for (size_t t = 0; t < pred.size(); ++t) {
    const Eigen::RowVector3d cp = pred[t].colwise().mean();
    const Eigen::RowVector3d cg = gt[t].colwise().mean();
    MatX p = pred[t].rowwise() - cp;
    MatX g = gt[t].rowwise() - cg;
    Mat3 rot = Mat3::Identity();
    if (p.rowwise().norm().maxCoeff() > 1e-12)
      rot = kabsch_rotation(p.transpose(), g.transpose());
    MatX aligned = (rot * p.transpose()).transpose();
    aligned.rowwise() += cg;
    MatX target = g.rowwise() + cg;
    acc += (aligned - target).rowwise().norm().sum();
    count += pred[t].rows();
  }
  return 1000.0 * acc / count;
}

// Fraction of exactly matching binary labels over frames x contact joints.
inline double contact_accuracy(const std::vector<std::array<int, kNumContactJoints>>& pred,
                               const std::vector<std::array<int, kNumContactJoints>>& gt) {
  if (pred.size() != gt.size()) throw DimensionError("contact_accuracy: frame count mismatch");
  if (pred.empty()) throw DimensionError("contact_accuracy: empty sequences");
  long hit = 0;
  for (size_t t = 0; t < pred.size(); ++t)
    for (int k = 0; k < kNumContactJoints; ++k) hit += (pred[t][k] == gt[t][k]) ? 1 : 0;
  return static_cast<double>(hit) / (pred.size() * kNumContactJoints);
}

// Mean second-difference magnitude of joint positions, mm per frame^2.
inline double accel_mag(const std::vector<MatX>& pred) {
  if (pred.size() < 3) return 0.0;
  double acc = 0;
  long count = 0;
  for (size_t t = 1; t + 1 < pred.size(); ++t) {
    acc += (pred[t + 1] - 2.0 * pred[t] + pred[t - 1]).rowwise().norm().sum();
    count += pred[t].rows();
  }
  return 1000.0 * acc / count;
}

// Cosine similarity of unit plane normals, after flipping each normal to the
// side of the ground-truth up direction (sign disambiguation).
inline double plane_cos(const GroundPlane& pred, const GroundPlane& gt) {
  const Vec3 up = gt.normal.normalized();
  Vec3 a = pred.normal.normalized();
  Vec3 b = up;
  if (a.dot(up) < 0) a = -a;
  if (b.dot(up) < 0) b = -b;
  return a.dot(b);
}

struct SequenceMetrics {
  double mpjpe = 0, mpjpe_g = 0, mpjpe_pa = 0;
  double contact_accuracy = 0;
  double accel_mag = 0;
  double plane_cos = 0;
  int frames = 0;
  int bucket = 0;  // by ground-truth minimum hip height

  nlohmann::json to_json() const {
    return {{"mpjpe_mm", mpjpe},
            {"mpjpe_g_mm", mpjpe_g},
            {"mpjpe_pa_mm", mpjpe_pa},
            {"contact_accuracy", contact_accuracy},
            {"accel_mag_mm", accel_mag},
            {"plane_cos", plane_cos},
            {"frames", frames},
            {"bucket", bucket_name(bucket)}};
  }
};

struct EvalReport {
  std::vector<SequenceMetrics> per_sequence;
  SequenceMetrics overall;
  std::array<SequenceMetrics, 3> by_bucket;
  std::array<int, 3> bucket_counts{};

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = "gam.eval_report";
    j["version"] = 1;
    nlohmann::json per = nlohmann::json::array();
    for (const auto& m : per_sequence) per.push_back(m.to_json());
    j["per_sequence"] = std::move(per);
    j["overall"] = overall.to_json();
    for (int b = 0; b < 3; ++b) {
      j["buckets"][bucket_name(b)] = by_bucket[b].to_json();
      j["buckets"][bucket_name(b)]["sequences"] = bucket_counts[b];
    }
    return j;
  }
};

namespace metrics_detail {

// Frame-weighted mean of a set of per-sequence metrics.
inline SequenceMetrics aggregate(const std::vector<SequenceMetrics>& ms,
                                 const std::vector<int>& idx) {
  SequenceMetrics out;
  double weight = 0;
  for (int i : idx) {
    const SequenceMetrics& m = ms[i];
    const double w = m.frames;
    out.mpjpe += w * m.mpjpe;
    out.mpjpe_g += w * m.mpjpe_g;
    out.mpjpe_pa += w * m.mpjpe_pa;
    out.contact_accuracy += w * m.contact_accuracy;
    out.accel_mag += w * m.accel_mag;
    out.plane_cos += w * m.plane_cos;
    out.frames += m.frames;
    weight += w;
  }
  if (weight > 0) {
    out.mpjpe /= weight;
    out.mpjpe_g /= weight;
    out.mpjpe_pa /= weight;
    out.contact_accuracy /= weight;
    out.accel_mag /= weight;
    out.plane_cos /= weight;
  }
  return out;
}

}  // namespace metrics_detail

// Full evaluation of prediction/ground-truth pairs with difficulty buckets
// taken from the ground truth.
inline EvalReport evaluate(const std::vector<MotionSequence>& pred,
                           const std::vector<MotionSequence>& gt) {
  if (pred.size() != gt.size()) throw DimensionError("evaluate: sequence count mismatch");
  if (pred.empty()) throw DimensionError("evaluate: no sequences");
  EvalReport report;
  for (size_t s = 0; s < pred.size(); ++s) {
    if (pred[s].frames() != gt[s].frames())
      throw DimensionError("evaluate: length mismatch in sequence " + std::to_string(s));
    std::vector<MatX> pj, gj;
    for (int t = 0; t < pred[s].frames(); ++t) {
      pj.push_back(pred[s].states[t].joints);
      gj.push_back(gt[s].states[t].joints);
    }
    SequenceMetrics m;
    m.mpjpe = mpjpe(pj, gj);
    m.mpjpe_g = mpjpe_g(pj, gj);
    m.mpjpe_pa = mpjpe_pa(pj, gj);
    m.contact_accuracy = contact_accuracy(pred[s].contacts, gt[s].contacts);
    m.accel_mag = accel_mag(pj);
    m.plane_cos = plane_cos(pred[s].plane, gt[s].plane);
    m.frames = pred[s].frames();
    m.bucket = hip_height_bucket(min_hip_height(gt[s]));
    report.per_sequence.push_back(m);
  }
  std::vector<int> all;
  std::array<std::vector<int>, 3> buckets;
  for (size_t s = 0; s < pred.size(); ++s) {
    all.push_back(static_cast<int>(s));
    buckets[report.per_sequence[s].bucket].push_back(static_cast<int>(s));
  }
  report.overall = metrics_detail::aggregate(report.per_sequence, all);
  for (int b = 0; b < 3; ++b) {
    report.by_bucket[b] = metrics_detail::aggregate(report.per_sequence, buckets[b]);
    report.bucket_counts[b] = static_cast<int>(buckets[b].size());
  }
  return report;
}

inline void save_report(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw FormatError("report: cannot write " + path);
  out << report.to_json().dump(2) << "\n";
}

}  // namespace gam
