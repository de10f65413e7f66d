#pragma once

#include <cmath>
#include <functional>

#include "gam/common.hpp"
#include "gam/rng.hpp"

namespace gam::test {

// Independent rotation construction via unit quaternions, used as the oracle
// for the Rodrigues-based implementation.
inline Mat3 quaternion_rotation_oracle(const Vec3& aa) {
  const double theta = aa.norm();
  double w = 1, x = 0, y = 0, z = 0;
  if (theta > 0) {
    const Vec3 axis = aa / theta;
    w = std::cos(0.5 * theta);
    const double s = std::sin(0.5 * theta);
    x = s * axis.x();
    y = s * axis.y();
    z = s * axis.z();
  }
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

// Central finite difference of a scalar function of one coordinate.
inline double central_diff(const std::function<double(double)>& f, double x0, double h = 1e-5) {
  return (f(x0 + h) - f(x0 - h)) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace gam::test

#include "gam/nn.hpp"

namespace gam::test {

// Directional-derivative check over a random slice of `k` parameters.
// Central differences cannot resolve gradients below ~eps*|loss|/h, so the
// relative error uses that measurement floor as its denominator minimum.
template <typename LossFn>
double directional_gradient_error(ParamSpans& params, const ParamSpans& grads, LossFn&& loss,
                                  Rng& pick, int k = 20, double h = 1e-5) {
  const size_t n = params.count();
  std::vector<size_t> idx;
  while (static_cast<int>(idx.size()) < k) {
    const size_t cand = pick.integer() % n;
    if (std::find(idx.begin(), idx.end(), cand) == idx.end()) idx.push_back(cand);
  }
  VecX dir(k);
  for (int i = 0; i < k; ++i) dir[i] = pick.normal();
  dir.normalize();

  double analytic = 0;
  for (int i = 0; i < k; ++i) analytic += grads.get(idx[i]) * dir[i];
  for (int i = 0; i < k; ++i) params.add_to(idx[i], h * dir[i]);
  const double up = loss();
  for (int i = 0; i < k; ++i) params.add_to(idx[i], -2 * h * dir[i]);
  const double dn = loss();
  for (int i = 0; i < k; ++i) params.add_to(idx[i], h * dir[i]);
  const double fd = (up - dn) / (2 * h);
  const double noise_floor = 1e-7 * std::max(1.0, std::abs(up)) * (1e-5 / h);
  return std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), noise_floor});
}

}  // namespace gam::test
