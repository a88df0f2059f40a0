#pragma once

// Shared small utilities: error categories, 3-vector / 3x3-matrix math,
// deterministic RNG helpers, and an order-independent content hash.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gnoc {

// ---------------------------------------------------------------------------
// Error categories. Every precondition violation throws one of these; the CLI
// maps ConfigError to exit code 2 and everything else to 1.
// ---------------------------------------------------------------------------

struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IndexError : ContractError {
  using ContractError::ContractError;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct GeometryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NormalizationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StatisticsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct RelaxationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define GNOC_CHECK(cond, err, msg)                                             \
  do {                                                                         \
    if (!(cond)) throw err(std::string(msg));                                  \
  } while (0)

// ---------------------------------------------------------------------------
// 3-vector / 3x3 matrix helpers (row-vector convention: a lattice is a matrix
// whose rows are the cell vectors, and cartesian = fractional * cell).
// ---------------------------------------------------------------------------

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<Vec3, 3>;
using Offset3 = std::array<int, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
inline Vec3 operator-(const Vec3& a, const Vec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline Vec3 operator*(double s, const Vec3& a) {
  return {s * a[0], s * a[1], s * a[2]};
}
inline double dot(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
          a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

// fractional -> cartesian with lattice rows
inline Vec3 frac_to_cart(const Vec3& f, const Mat3& cell) {
  return f[0] * cell[0] + f[1] * cell[1] + f[2] * cell[2];
}

inline double det3(const Mat3& m) { return dot(m[0], cross(m[1], m[2])); }

// Inverse of the lattice matrix, used to map cartesian -> fractional
// (f = x * inv(cell) in the row-vector convention).
inline Mat3 inv3(const Mat3& m) {
  const double d = det3(m);
  GNOC_CHECK(std::abs(d) > 1e-14, GeometryError,
             "singular cell matrix (det ~ 0)");
  const Vec3 c0 = cross(m[1], m[2]);
  const Vec3 c1 = cross(m[2], m[0]);
  const Vec3 c2 = cross(m[0], m[1]);
  // columns of the inverse are c_i / d (rows of the cofactor transpose)
  Mat3 inv;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) inv[r][c] = (c == 0 ? c0 : c == 1 ? c1 : c2)[r] / d;
  return inv;
}

inline Vec3 mat_vec(const Vec3& x, const Mat3& m) {  // x * m (row vector)
  return {x[0] * m[0][0] + x[1] * m[1][0] + x[2] * m[2][0],
          x[0] * m[0][1] + x[1] * m[1][1] + x[2] * m[2][1],
          x[0] * m[0][2] + x[1] * m[1][2] + x[2] * m[2][2]};
}

// ---------------------------------------------------------------------------
// Deterministic RNG. A named sub-stream is derived from (seed, label) so that
// independent components never share a stream by accident.
// ---------------------------------------------------------------------------

inline std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
  // splitmix64 step over the xor
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  std::uint64_t z = h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::mt19937_64 make_rng(std::uint64_t seed, const std::string& label) {
  return std::mt19937_64(hash_combine(seed, fnv1a(label)));
}

// ---------------------------------------------------------------------------
// Misc
// ---------------------------------------------------------------------------

// Full-precision text form that round-trips a double exactly.
inline std::string fmt_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace gnoc
