#pragma once

#include <cstdint>
#include <limits>

namespace metadrop {

/// Counter-based pseudo random generator. A draw is a pure function of
/// (seed, stream, counter), so independent streams can be handed to
/// concurrent episodes and any stream can be reconstructed from its seed
/// and the number of values consumed.
class Rng {
 public:
  Rng() : Rng(0, 0) {}
  Rng(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next_u64();

  /// Uniform on (0, 1), never exactly 0 or 1.
  double uniform();
  /// Uniform on [lo, hi).
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller; consumes exactly two raw draws.
  double normal();
  /// Gamma(shape, 1), Marsaglia-Tsang with the shape<1 boost.
  double gamma(double shape);
  /// Beta(a, b) from two gamma draws.
  double beta(double a, double b);
  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);

  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  // UniformRandomBitGenerator interface
  using result_type = std::uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() { return next_u64(); }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace metadrop
