#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace gam {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Wrong array/vector sizes (state vectors, files with mismatched joint counts, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Unreadable or wrong-format files: bad magic, unsupported version, truncation.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values (unknown motion kind, bad thresholds, missing keys).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Numeric divergence: NaN/Inf in a loss term, a rollout state, or a training step.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace gam
