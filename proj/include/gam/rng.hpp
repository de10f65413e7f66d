#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "gam/common.hpp"

namespace gam {

// Seeded generator with hand-rolled uniform/normal transforms so that the
// produced streams depend only on the mt19937_64 engine state. No cached
// state beyond the engine, which keeps serialization (training resume) exact.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  // Uniform on (0, 1].
  double uniform() {
    return static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller without the usual cached second value.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  VecX normal_vec(int n, double stddev = 1.0) {
    VecX v(n);
    for (int i = 0; i < n; ++i) v[i] = stddev * normal();
    return v;
  }

  MatX normal_mat(int rows, int cols, double stddev = 1.0) {
    MatX m(rows, cols);
    for (int c = 0; c < cols; ++c)
      for (int r = 0; r < rows; ++r) m(r, c) = stddev * normal();
    return m;
  }

  uint64_t integer() { return engine_(); }

  // Fisher-Yates over [0, n).
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(engine_() % static_cast<uint64_t>(i + 1));
      std::swap(p[i], p[j]);
    }
    return p;
  }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw FormatError("rng: cannot restore engine state");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace gam
