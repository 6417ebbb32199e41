#pragma once

// Interface between a posterior and the blocked Metropolis sampler.

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace nbsynth {

/// Per-chain generator: 64-bit Mersenne twister seeded from splitmix64
/// outputs of the master seed.
using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::vector<std::uint64_t> derive_seeds(std::uint64_t master, std::size_t n) {
  std::vector<std::uint64_t> out;
  std::uint64_t state = master;
  for (std::size_t i = 0; i < n; ++i) out.push_back(splitmix64(state));
  return out;
}

enum class MoveKind {
  random_walk,  // Gaussian step on `coords` jointly
  shift,        // coords += c, negated -= c (scalar c)
  scale,        // coords[0] += s; members rescaled by exp(s) about centre
};

struct Block {
  std::string name;
  MoveKind kind = MoveKind::random_walk;
  std::vector<std::size_t> coords;
  std::vector<std::size_t> negated;
  std::vector<std::size_t> members;
  std::optional<std::size_t> centre;  // scale only; nullopt = 0

  std::size_t proposal_dim() const {
    return kind == MoveKind::random_walk ? coords.size() : 1;
  }
};

/// `block_log_density(x, b)` must return the log posterior up to terms that
/// stay constant under block b's move.
template <typename T>
concept BlockTarget = requires(const T& t, std::span<const double> x, std::size_t b,
                               std::size_t chain, Rng& rng) {
  { t.dimension() } -> std::convertible_to<std::size_t>;
  { t.param_names() } -> std::convertible_to<std::vector<std::string>>;
  { t.blocks() } -> std::convertible_to<std::vector<Block>>;
  { t.block_log_density(x, b) } -> std::convertible_to<double>;
  { t.initial_state(chain, rng) } -> std::convertible_to<std::vector<double>>;
};

/// Wraps a full log density as a single random-walk block; used for
/// analytic test targets.
class DensityTarget {
 public:
  using LogDensity = std::function<double(std::span<const double>)>;

  DensityTarget(LogDensity f, std::vector<double> start, double jitter = 1.0)
      : f_(std::move(f)), start_(std::move(start)), jitter_(jitter) {}

  std::size_t dimension() const { return start_.size(); }
  std::vector<std::string> param_names() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < start_.size(); ++i) out.push_back("x" + std::to_string(i));
    return out;
  }
  std::vector<Block> blocks() const {
    Block b{.name = "all"};
    for (std::size_t i = 0; i < start_.size(); ++i) b.coords.push_back(i);
    return {b};
  }
  double block_log_density(std::span<const double> x, std::size_t) const { return f_(x); }
  std::vector<double> initial_state(std::size_t, Rng& rng) const {
    std::normal_distribution<double> z;
    auto x = start_;
    for (double& v : x) v += jitter_ * z(rng);
    return x;
  }

 private:
  LogDensity f_;
  std::vector<double> start_;
  double jitter_;
};

}  // namespace nbsynth
