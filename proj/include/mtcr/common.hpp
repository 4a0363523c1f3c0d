#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mtcr {

/// Error categories surfaced to callers and to the CLI's machine-readable
/// error line.
enum class ErrorCode {
  InvalidArgument,
  Geometry,
  Data,
  Io,
  Divergence,
  Dependency,
  Config,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

using Rng = std::mt19937_64;

/// Derives an independent seed for a named stochastic site from the global
/// seed. Adding a new site never perturbs the streams of existing ones.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name, std::uint64_t index);

inline Rng make_rng(std::uint64_t seed, std::string_view name) {
  return Rng(derive_seed(seed, name));
}

/// Uniform integer in [0, n). Implemented on raw engine output so draws do
/// not depend on the standard library's distribution internals.
std::size_t uniform_index(Rng& rng, std::size_t n);

/// Uniform real in [0, 1) with 53 random bits.
double uniform_unit(Rng& rng);

/// Standard normal draw (Box-Muller on uniform_unit).
double standard_normal(Rng& rng);

/// Fisher-Yates shuffle on top of uniform_index.
template <typename It>
void shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::size_t>(last - first);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = uniform_index(rng, i);
    using std::swap;
    swap(first[i - 1], first[j]);
  }
}

}  // namespace mtcr
