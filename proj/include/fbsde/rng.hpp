#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>

namespace fbsde {

// Philox4x32-10 counter-based generator. Every draw is a pure function of (key, counter),
// so random streams are addressed by (seed, path, step) and independent of scheduling.
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;

  explicit Philox4x32(std::uint64_t seed) noexcept
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}

  [[nodiscard]] Counter operator()(Counter ctr) const noexcept {
    std::array<std::uint32_t, 2> key = key_;
    for (int round = 0; round < 10; ++round) {
      ctr = single_round(ctr, key);
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    return ctr;
  }

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  static Counter single_round(const Counter& c, const std::array<std::uint32_t, 2>& k) noexcept {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
  }

  std::array<std::uint32_t, 2> key_;
};

// Independent purposes draw from disjoint counter streams.
enum class Stream : std::uint32_t {
  Prior = 1,
  Signal = 2,
  Truth = 3,
  Resample = 4,
  Brownian = 5,
};

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Derives a child seed, e.g. one per observation record.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept {
  return splitmix64(seed ^ splitmix64(index + 0x632BE59BD9B4E019ull));
}

// Uniform in (0, 1), never exactly 0.
inline double to_unit(std::uint32_t hi, std::uint32_t lo) noexcept {
  // 52 bits so that the half-offset keeps the top value strictly below 1.
  const std::uint64_t bits = ((static_cast<std::uint64_t>(hi) << 32) | lo) >> 12;
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-52;
}

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) noexcept : gen_(seed) {}

  [[nodiscard]] std::array<std::uint32_t, 4> raw(Stream stream, std::uint64_t index, std::uint64_t step) const noexcept {
    return gen_({static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(index),
                 static_cast<std::uint32_t>(index >> 32),
                 static_cast<std::uint32_t>(stream) | static_cast<std::uint32_t>(step >> 32) << 8});
  }

  // Two independent uniforms.
  [[nodiscard]] std::pair<double, double> uniforms(Stream stream, std::uint64_t index, std::uint64_t step) const noexcept {
    const auto r = raw(stream, index, step);
    return {to_unit(r[0], r[1]), to_unit(r[2], r[3])};
  }

  // Two independent standard normals (Box-Muller).
  [[nodiscard]] std::pair<double, double> normals(Stream stream, std::uint64_t index, std::uint64_t step) const noexcept {
    const auto [u1, u2] = uniforms(stream, index, step);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    return {radius * std::cos(angle), radius * std::sin(angle)};
  }

  // One standard normal per step: steps 2j and 2j+1 share a Box-Muller pair.
  [[nodiscard]] double normal(Stream stream, std::uint64_t index, std::uint64_t step) const noexcept {
    const auto [a, b] = normals(stream, index, step >> 1);
    return (step & 1u) ? b : a;
  }

 private:
  Philox4x32 gen_;
};

}  // namespace fbsde
