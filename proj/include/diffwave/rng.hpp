#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>

#include "diffwave/error.hpp"

namespace diffwave {

/// Seeded random stream with a fully specified output sequence.
///
/// std::mt19937_64 is defined bit-for-bit by the standard, while the
/// standard distributions are not, so the conversions to uniform and normal
/// variates are done here. Normals are generated in Box-Muller pairs with no
/// cached state, which keeps the serialized state equal to the engine state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Independent stream for (seed, index), e.g. per generated sample.
  static Rng stream(std::uint64_t seed, std::uint64_t index) {
    return Rng(splitmix(seed ^ splitmix(index + 0x9e3779b97f4a7c15ULL)));
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [lo, hi], rejection-sampled so it is exactly uniform.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    require(lo <= hi, "uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(engine_());
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % span;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return lo + static_cast<std::int64_t>(v % span);
  }

  double normal() {
    double a, b;
    normal_pair(a, b);
    return a;
  }

  template <class Real>
  void fill_normal(std::span<Real> out) {
    std::size_t i = 0;
    for (; i + 1 < out.size(); i += 2) {
      double a, b;
      normal_pair(a, b);
      out[i] = static_cast<Real>(a);
      out[i + 1] = static_cast<Real>(b);
    }
    if (i < out.size()) out[i] = static_cast<Real>(normal());
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) fail(ErrorKind::Io, "rng: malformed state blob");
  }

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  void normal_pair(double& a, double& b) {
    // 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * std::numbers::pi * u2;
    a = r * std::cos(th);
    b = r * std::sin(th);
  }

  std::mt19937_64 engine_;
};

}  // namespace diffwave
