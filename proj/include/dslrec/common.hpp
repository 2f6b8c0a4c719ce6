#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace dslrec {

using Real = double;
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
using Rng = std::mt19937_64;

// Flat row-major index into an (N+M) x d table.
using Position = std::size_t;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file. `line()` is 1-based.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Argument or configuration outside its documented domain.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf in a gradient or loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

// Round-half-to-even, independent of the floating-point environment.
inline std::size_t round_half_even(double x) {
  const double lo = std::floor(x);
  const double frac = x - lo;
  double r = lo;
  if (frac > 0.5) {
    r = lo + 1.0;
  } else if (frac == 0.5) {
    r = std::fmod(lo, 2.0) == 0.0 ? lo : lo + 1.0;
  }
  return static_cast<std::size_t>(r);
}

// Number of active positions a table of `total` entries keeps at sparsity s.
inline std::size_t active_budget(std::size_t total, double sparsity) {
  return round_half_even(static_cast<double>(total) * (1.0 - sparsity));
}

inline void check_sparsity(double s) {
  if (!(s >= 0.0 && s < 1.0)) {
    throw ConfigError("sparsity must lie in [0, 1), got " + std::to_string(s));
  }
}

// Independent generator streams derived from one run seed (splitmix64 mix).
inline Rng make_stream(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return Rng(z);
}

}  // namespace dslrec
