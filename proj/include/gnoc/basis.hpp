#pragma once

// Radial and angular basis functions.
//
// Radial features are decoupled from angular features: every radial family is
// multiplied by a polynomial envelope that is C^2-flat at the interaction
// cutoff, and angular features are Legendre / spherical-harmonic expansions
// of the triplet and quadruplet cosines. Scalar evaluators come with analytic
// derivatives so the tensor-level wrappers stay differentiable end to end.

#include <array>
#include <cmath>
#include <mutex>
#include <optional>
#include <vector>

#include "gnoc/common.hpp"
#include "gnoc/tensor.hpp"

namespace gnoc {

enum class RadialBasisKind { gaussian, bessel0, spherical_bessel };
enum class AngularBasisKind { legendre_product, spherical_harmonics };

struct BasisConfig {
  RadialBasisKind radial = RadialBasisKind::gaussian;
  int n_radial = 128;
  double cutoff = 12.0;  // interaction cutoff c_int (angstrom)
  int envelope_p = 5;
  AngularBasisKind angular = AngularBasisKind::legendre_product;
  int max_degree = 4;  // angular expansion order L

  void validate() const {
    GNOC_CHECK(n_radial >= 1, ConfigError, "basis: n_radial must be >= 1");
    GNOC_CHECK(cutoff > 0.0, ConfigError, "basis: cutoff must be positive");
    GNOC_CHECK(envelope_p >= 2, ConfigError, "basis: envelope_p must be >= 2");
    GNOC_CHECK(max_degree >= 0, ConfigError, "basis: max_degree must be >= 0");
  }

  // width of the quadruplet angular feature row
  std::size_t quad_angular_size() const {
    const std::size_t L1 = std::size_t(max_degree) + 1;
    return L1 * L1 + L1;
  }
};

// ---------------------------------------------------------------------------
// Polynomial envelope: u(d/c) with value, first, and second derivative all
// zero at d = c, and u(0) = 1.
//   u(x) = 1 - (p+1)(p+2)/2 x^p + p(p+2) x^(p+1) - p(p+1)/2 x^(p+2)
// ---------------------------------------------------------------------------

inline double polynomial_envelope(double d, double c, int p) {
  GNOC_CHECK(c > 0.0 && p >= 2, ContractError, "envelope: invalid parameters");
  GNOC_CHECK(d >= 0.0, ContractError, "envelope: negative distance");
  const double x = d / c;
  if (x >= 1.0) return 0.0;
  const double a1 = -0.5 * (p + 1) * (p + 2);
  const double a2 = double(p) * (p + 2);
  const double a3 = -0.5 * double(p) * (p + 1);
  const double xp = std::pow(x, p);
  return 1.0 + xp * (a1 + x * (a2 + x * a3));
}

inline double polynomial_envelope_deriv(double d, double c, int p) {
  GNOC_CHECK(c > 0.0 && p >= 2, ContractError, "envelope: invalid parameters");
  GNOC_CHECK(d >= 0.0, ContractError, "envelope: negative distance");
  const double x = d / c;
  if (x >= 1.0) return 0.0;
  const double a1 = -0.5 * (p + 1) * (p + 2);
  const double a2 = double(p) * (p + 2);
  const double a3 = -0.5 * double(p) * (p + 1);
  const double xp1 = std::pow(x, p - 1);
  return xp1 * (a1 * p + x * (a2 * (p + 1) + x * a3 * (p + 2))) / c;
}

// ---------------------------------------------------------------------------
// Gaussian radial basis: n_radial centers linearly spaced on [0, cutoff],
// width equal to the center spacing, multiplied by the envelope.
// ---------------------------------------------------------------------------

inline void gaussian_rbf(double d, const BasisConfig& cfg, double* out,
                         double* dout) {
  cfg.validate();
  const int K = cfg.n_radial;
  const double spacing = K > 1 ? cfg.cutoff / double(K - 1) : cfg.cutoff;
  const double inv2s2 = 1.0 / (2.0 * spacing * spacing);
  const double env = polynomial_envelope(d, cfg.cutoff, cfg.envelope_p);
  const double denv = dout ? polynomial_envelope_deriv(d, cfg.cutoff, cfg.envelope_p) : 0.0;
  for (int i = 0; i < K; ++i) {
    const double mu = K > 1 ? cfg.cutoff * double(i) / double(K - 1) : 0.0;
    const double arg = d - mu;
    const double g = std::exp(-arg * arg * inv2s2);
    out[i] = g * env;
    if (dout) dout[i] = g * (denv - 2.0 * arg * inv2s2 * env);
  }
}

// ---------------------------------------------------------------------------
// Zeroth-order spherical Bessel radial basis:
//   b_n(d) = sqrt(2/c) sin(n pi d / c) / d, n = 1..K, times the envelope.
// Below d = 1e-8 the sinc limit n pi sqrt(2/c) / c is used.
// ---------------------------------------------------------------------------

inline void bessel0_rbf(double d, const BasisConfig& cfg, double* out,
                        double* dout) {
  cfg.validate();
  const double c = cfg.cutoff;
  const double norm = std::sqrt(2.0 / c);
  const double env = polynomial_envelope(d, c, cfg.envelope_p);
  const double denv = dout ? polynomial_envelope_deriv(d, c, cfg.envelope_p) : 0.0;
  for (int n = 1; n <= cfg.n_radial; ++n) {
    const double a = double(n) * M_PI / c;
    double b, db;
    if (d < 1e-8) {
      b = norm * a;  // lim sin(ad)/d = a
      db = 0.0;      // sinc is even: slope vanishes at the origin
    } else {
      const double s = std::sin(a * d);
      b = norm * s / d;
      db = norm * (a * std::cos(a * d) * d - s) / (d * d);
    }
    out[n - 1] = b * env;
    if (dout) dout[n - 1] = db * env + b * denv;
  }
}

// ---------------------------------------------------------------------------
// Spherical Bessel functions j_l and their roots.
// ---------------------------------------------------------------------------

// j_l(x) evaluated by upward recurrence when safe (x > l) and by downward
// (Miller) recurrence otherwise; series limit near x = 0.
inline double spherical_bessel_jl(int l, double x) {
  GNOC_CHECK(l >= 0, ContractError, "bessel: order must be >= 0");
  GNOC_CHECK(x >= 0.0, ContractError, "bessel: argument must be >= 0");
  if (x < 1e-8) {
    if (l == 0) return 1.0 - x * x / 6.0;
    // x^l / (2l+1)!!
    double dfac = 1.0;
    for (int k = 1; k <= l; ++k) dfac *= double(2 * k + 1);
    return std::pow(x, l) / dfac;
  }
  const double j0 = std::sin(x) / x;
  if (l == 0) return j0;
  const double j1 = j0 / x - std::cos(x) / x;
  if (l == 1) return j1;
  if (x > double(l)) {
    double jm = j0, jc = j1;
    for (int n = 1; n < l; ++n) {
      const double jn = double(2 * n + 1) / x * jc - jm;
      jm = jc;
      jc = jn;
    }
    return jc;
  }
  // downward recurrence from a padded start order, normalized against j0
  const int start = l + 16 + static_cast<int>(x);
  double jp = 0.0, jc = 1e-30, target = 0.0;
  for (int n = start; n >= 1; --n) {
    const double jm = double(2 * n + 1) / x * jc - jp;
    jp = jc;
    jc = jm;
    if (n - 1 == l) target = jc;
    // rescale to avoid overflow
    if (std::abs(jc) > 1e200) {
      jc *= 1e-200;
      jp *= 1e-200;
      target *= 1e-200;
    }
  }
  return target * (j0 / jc);
}

// Roots z_{l,n} of j_l, found by bisection between brackets supplied by the
// interlacing property z_{l-1,n} < z_{l,n} < z_{l-1,n+1}.
struct SphericalBesselRoots {
  int max_l = 0;
  int n_per_l = 0;
  std::vector<double> z;  // row l holds roots n = 1..n_per_l

  double root(int l, int n) const {
    GNOC_CHECK(l >= 0 && l <= max_l && n >= 1 && n <= n_per_l, ContractError,
               "bessel roots: (l, n) out of table range");
    return z[std::size_t(l) * n_per_l + (n - 1)];
  }

  static SphericalBesselRoots compute(int max_l, int n_per_l,
                                      double tol = 1e-12) {
    GNOC_CHECK(max_l >= 0 && n_per_l >= 1, ContractError,
               "bessel roots: invalid table size");
    SphericalBesselRoots t;
    t.max_l = max_l;
    t.n_per_l = n_per_l;
    // row 0 needs extra roots to seed the brackets of the rows above
    std::vector<double> prev(n_per_l + max_l);
    for (std::size_t n = 0; n < prev.size(); ++n) {
      // bisection on j_0 in [(n+0.5-0.4)pi, (n+0.5+0.4)pi] around (n+1)pi
      double lo = (double(n) + 0.6) * M_PI;
      double hi = (double(n) + 1.4) * M_PI;
      prev[n] = bisect(0, lo, hi, tol);
    }
    t.z.resize(std::size_t(max_l + 1) * n_per_l);
    for (int n = 0; n < n_per_l; ++n) t.z[n] = prev[n];
    std::vector<double> cur;
    for (int l = 1; l <= max_l; ++l) {
      cur.assign(prev.size() - 1, 0.0);
      for (std::size_t n = 0; n < cur.size(); ++n)
        cur[n] = bisect(l, prev[n], prev[n + 1], tol);
      for (int n = 0; n < n_per_l; ++n)
        t.z[std::size_t(l) * n_per_l + n] = cur[n];
      prev = cur;
    }
    return t;
  }

 private:
  static double bisect(int l, double lo, double hi, double tol) {
    double flo = spherical_bessel_jl(l, lo);
    const double fhi = spherical_bessel_jl(l, hi);
    GNOC_CHECK(flo * fhi < 0.0, NumericError, "bessel roots: bad bracket");
    while (hi - lo > tol) {
      const double mid = 0.5 * (lo + hi);
      const double fm = spherical_bessel_jl(l, mid);
      if ((flo < 0) == (fm < 0)) {
        lo = mid;
        flo = fm;
      } else {
        hi = mid;
      }
    }
    return 0.5 * (lo + hi);
  }
};

namespace detail {

// process-wide grow-only root cache (pure math, so shared freely)
inline const SphericalBesselRoots& cached_bessel_roots(int max_l, int n_per_l) {
  static std::mutex mu;
  static SphericalBesselRoots table;
  std::lock_guard<std::mutex> lock(mu);
  if (table.max_l < max_l || table.n_per_l < n_per_l)
    table = SphericalBesselRoots::compute(std::max(table.max_l, max_l),
                                          std::max(table.n_per_l, n_per_l));
  return table;
}

}  // namespace detail

// j_l evaluated at the n-th root scaled to the cutoff: j_l(z_{l,n} d / c).
inline double spherical_bessel_multiorder(double d, int l, int n,
                                          const BasisConfig& cfg) {
  cfg.validate();
  GNOC_CHECK(d >= 0.0, ContractError, "bessel: negative distance");
  const auto& roots = detail::cached_bessel_roots(l, n);
  return spherical_bessel_jl(l, roots.root(l, n) * d / cfg.cutoff);
}

// Multi-order radial family used when RadialBasisKind::spherical_bessel is
// selected: order-0 roots (z_{0,n} = n pi) times the envelope.
inline void spherical_bessel_rbf(double d, const BasisConfig& cfg, double* out,
                                 double* dout) {
  cfg.validate();
  const auto& roots = detail::cached_bessel_roots(0, cfg.n_radial);
  const double c = cfg.cutoff;
  const double env = polynomial_envelope(d, c, cfg.envelope_p);
  const double denv = dout ? polynomial_envelope_deriv(d, c, cfg.envelope_p) : 0.0;
  for (int n = 1; n <= cfg.n_radial; ++n) {
    const double a = roots.root(0, n) / c;
    const double x = a * d;
    const double j = spherical_bessel_jl(0, x);
    out[n - 1] = j * env;
    if (dout) {
      // j0'(x) = -j1(x)
      const double dj = -spherical_bessel_jl(1, x) * a;
      dout[n - 1] = dj * env + j * denv;
    }
  }
}

// ---------------------------------------------------------------------------
// Legendre polynomials P_0..P_L by the three-term recurrence, with the
// derivative recurrence P'_l = P'_{l-2} + (2l-1) P_{l-1}.
// ---------------------------------------------------------------------------

inline double check_cos_domain(double x, const char* what) {
  constexpr double kSlack = 1e-9;
  GNOC_CHECK(x >= -1.0 - kSlack && x <= 1.0 + kSlack, ContractError,
             cat(what, ": cosine outside [-1, 1]"));
  return std::min(1.0, std::max(-1.0, x));
}

inline void legendre_vector(double x, int L, double* out, double* dout = nullptr) {
  x = check_cos_domain(x, "legendre");
  out[0] = 1.0;
  if (dout) dout[0] = 0.0;
  if (L == 0) return;
  out[1] = x;
  if (dout) dout[1] = 1.0;
  for (int l = 2; l <= L; ++l) {
    out[l] = (double(2 * l - 1) * x * out[l - 1] - double(l - 1) * out[l - 2]) /
             double(l);
    if (dout) dout[l] = dout[l - 2] + double(2 * l - 1) * out[l - 1];
  }
}

// P_0..P_L of one cosine, or the flattened outer product of two expansions
// when a second cosine is given: out[i (L+1) + j] = P_i(cos1) P_j(cos2).
inline std::vector<double> legendre_angular(double cos1,
                                            std::optional<double> cos2, int L) {
  GNOC_CHECK(L >= 0, ContractError, "legendre: order must be >= 0");
  std::vector<double> p1(L + 1);
  legendre_vector(cos1, L, p1.data());
  if (!cos2) return p1;
  std::vector<double> p2(L + 1);
  legendre_vector(*cos2, L, p2.data());
  std::vector<double> out((L + 1) * std::size_t(L + 1));
  for (int i = 0; i <= L; ++i)
    for (int j = 0; j <= L; ++j) out[std::size_t(i) * (L + 1) + j] = p1[i] * p2[j];
  return out;
}

// ---------------------------------------------------------------------------
// Real spherical harmonics Y_{l,m}(phi, theta), phi polar / theta azimuthal,
// flattened as l*(l+1)+m for l = 0..L, m = -l..l. The associated Legendre
// part is evaluated through its polynomial factor A_l^m (P_l^m = sin^m(phi)
// A_l^m(cos phi), no Condon-Shortley phase), which keeps the derivative in
// phi finite at the poles.
// ---------------------------------------------------------------------------

inline std::size_t sh_size(int L) { return std::size_t(L + 1) * (L + 1); }

inline void spherical_harmonics(double phi, double theta, int L, double* out,
                                double* dphi = nullptr, double* dtheta = nullptr) {
  GNOC_CHECK(L >= 0, ContractError, "spherical harmonics: order must be >= 0");
  GNOC_CHECK(std::isfinite(phi) && std::isfinite(theta), ContractError,
             "spherical harmonics: non-finite angle");
  const double x = std::cos(phi);   // polar cosine
  const double s = std::sin(phi);   // >= 0 for phi in [0, pi]
  const int n = L + 1;
  // A[l][m] and dA[l][m] = dA/dx tables
  std::vector<double> A(std::size_t(n) * n, 0.0), dA(std::size_t(n) * n, 0.0);
  auto at = [n](std::vector<double>& v, int l, int m) -> double& {
    return v[std::size_t(l) * n + m];
  };
  for (int m = 0; m <= L; ++m) {
    double dfac = 1.0;
    for (int k = 1; k <= m; ++k) dfac *= double(2 * k - 1);
    at(A, m, m) = dfac;
    at(dA, m, m) = 0.0;
    if (m + 1 <= L) {
      at(A, m + 1, m) = x * double(2 * m + 1) * dfac;
      at(dA, m + 1, m) = double(2 * m + 1) * dfac;
    }
    for (int l = m + 2; l <= L; ++l) {
      const double c1 = double(2 * l - 1) / double(l - m);
      const double c2 = double(l + m - 1) / double(l - m);
      at(A, l, m) = c1 * x * at(A, l - 1, m) - c2 * at(A, l - 2, m);
      at(dA, l, m) = c1 * (at(A, l - 1, m) + x * at(dA, l - 1, m)) -
                     c2 * at(dA, l - 2, m);
    }
  }
  // sin^m(phi) powers and azimuthal factors
  std::vector<double> sp(n), cm(n), sm(n);
  sp[0] = 1.0;
  for (int m = 1; m <= L; ++m) sp[m] = sp[m - 1] * s;
  for (int m = 0; m <= L; ++m) {
    cm[m] = std::cos(m * theta);
    sm[m] = std::sin(m * theta);
  }
  for (int l = 0; l <= L; ++l) {
    for (int m = 0; m <= l; ++m) {
      double fac = 1.0;  // (l-m)! / (l+m)!
      for (int k = l - m + 1; k <= l + m; ++k) fac /= double(k);
      const double N =
          std::sqrt(double(2 * l + 1) / (4.0 * M_PI) * fac) * (m > 0 ? M_SQRT2 : 1.0);
      const double a = at(A, l, m);
      const double da = at(dA, l, m);
      const double plm = sp[m] * a;
      // d/dphi [sin^m(phi) A(cos phi)] =
      //   m sin^(m-1) cos A - sin^(m+1) dA
      const double dplm =
          (m > 0 ? double(m) * sp[m - 1] * x * a : 0.0) - sp[m] * s * da;
      const std::size_t base = std::size_t(l) * (l + 1);
      out[base + m] = N * plm * cm[m];
      if (dphi) dphi[base + m] = N * dplm * cm[m];
      if (dtheta) dtheta[base + m] = -N * plm * double(m) * sm[m];
      if (m > 0) {
        out[base - m] = N * plm * sm[m];
        if (dphi) dphi[base - m] = N * dplm * sm[m];
        if (dtheta) dtheta[base - m] = N * plm * double(m) * cm[m];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Tensor-level wrappers (differentiable through map_expand / map_expand2)
// ---------------------------------------------------------------------------

namespace detail {

// adapts a double-valued scalar evaluator to map_expand's Real buffers
template <typename Real, typename Eval>
auto real_expand_fn(std::size_t K, Eval eval) {
  return [K, eval, buf = std::vector<double>(K),
          dbuf = std::vector<double>(K)](Real x, Real* out, Real* dout) mutable {
    eval(double(x), buf.data(), dout ? dbuf.data() : nullptr);
    for (std::size_t k = 0; k < K; ++k) {
      out[k] = Real(buf[k]);
      if (dout) dout[k] = Real(dbuf[k]);
    }
  };
}

}  // namespace detail

// [n, n_radial] features of a distance column, envelope included.
template <typename Real>
TensorPtrT<Real> radial_features(const TensorPtrT<Real>& dist,
                                 const BasisConfig& cfg) {
  cfg.validate();
  const std::size_t K = cfg.n_radial;
  switch (cfg.radial) {
    case RadialBasisKind::gaussian:
      return map_expand(dist, K,
                        detail::real_expand_fn<Real>(
                            K, [cfg](double d, double* out, double* dout) {
                              gaussian_rbf(d, cfg, out, dout);
                            }));
    case RadialBasisKind::bessel0:
      return map_expand(dist, K,
                        detail::real_expand_fn<Real>(
                            K, [cfg](double d, double* out, double* dout) {
                              bessel0_rbf(d, cfg, out, dout);
                            }));
    case RadialBasisKind::spherical_bessel: {
      // snapshot the roots so per-element evaluation stays lock-free
      const auto& tab = detail::cached_bessel_roots(1, cfg.n_radial);
      std::vector<double> zr(K);
      for (std::size_t n = 0; n < K; ++n) zr[n] = tab.root(0, int(n) + 1);
      auto eval = [cfg, zr](double d, double* out, double* dout) {
        const double c = cfg.cutoff;
        const double env = polynomial_envelope(d, c, cfg.envelope_p);
        const double denv =
            dout ? polynomial_envelope_deriv(d, c, cfg.envelope_p) : 0.0;
        for (std::size_t n = 0; n < zr.size(); ++n) {
          const double a = zr[n] / c;
          const double x = a * d;
          const double j = spherical_bessel_jl(0, x);
          out[n] = j * env;
          if (dout) dout[n] = -spherical_bessel_jl(1, x) * a * env + j * denv;
        }
      };
      return map_expand(dist, K, detail::real_expand_fn<Real>(K, eval));
    }
  }
  throw ConfigError("basis: unknown radial kind");
}

// [n, L+1] Legendre features of a cosine column.
template <typename Real>
TensorPtrT<Real> legendre_features(const TensorPtrT<Real>& cosv, int L) {
  GNOC_CHECK(L >= 0, ContractError, "legendre: order must be >= 0");
  const std::size_t K = std::size_t(L) + 1;
  return map_expand(cosv, K,
                    detail::real_expand_fn<Real>(
                        K, [L](double x, double* out, double* dout) {
                          legendre_vector(x, L, out, dout);
                        }));
}

namespace detail {

// two-input variant of the adapter for map_expand2
template <typename Real, typename Eval>
auto real_expand2_fn(std::size_t K, Eval eval) {
  return [K, eval, buf = std::vector<double>(K), d1 = std::vector<double>(K),
          d2 = std::vector<double>(K)](Real x, Real y, Real* out, Real* dx,
                                       Real* dy) mutable {
    eval(double(x), double(y), buf.data(), dx ? d1.data() : nullptr,
         dx ? d2.data() : nullptr);
    for (std::size_t k = 0; k < K; ++k) {
      out[k] = Real(buf[k]);
      if (dx) dx[k] = Real(d1[k]);
      if (dy) dy[k] = Real(d2[k]);
    }
  };
}

}  // namespace detail

// Quadruplet angular features [(L+1)^2 + (L+1)]: the (phi_cab, dihedral)
// expansion followed by the Legendre expansion of the second flank angle.
template <typename Real>
TensorPtrT<Real> quad_angular_features(const TensorPtrT<Real>& cos_cab,
                                       const TensorPtrT<Real>& cos_abd,
                                       const TensorPtrT<Real>& cos_dihedral,
                                       const BasisConfig& cfg) {
  cfg.validate();
  const int L = cfg.max_degree;
  TensorPtrT<Real> main;
  if (cfg.angular == AngularBasisKind::legendre_product) {
    main = row_outer(legendre_features(cos_cab, L),
                     legendre_features(cos_dihedral, L));
  } else {
    auto phi = acos_clamped(cos_cab);
    auto theta = acos_clamped(cos_dihedral);
    main = map_expand2(
        phi, theta, sh_size(L),
        detail::real_expand2_fn<Real>(
            sh_size(L), [L](double p, double t, double* out, double* dp,
                            double* dt) { spherical_harmonics(p, t, L, out, dp, dt); }));
  }
  return concat_cols(
      std::vector<TensorPtrT<Real>>{main, legendre_features(cos_abd, L)});
}

}  // namespace gnoc
