#pragma once

// Dense tensor core with define-by-run reverse-mode differentiation.
//
// Tensors are 1-D or 2-D row-major buffers of a scalar type (double in the
// shipped pipeline; float is instantiable). Every primitive below computes its
// value eagerly and, when a tape is active and an input tracks gradients,
// records a backward closure onto that tape. Replaying the tape in reverse
// recording order visits each closure exactly once; accumulation loops run in
// ascending row order, so gradients are bit-reproducible for a fixed graph.
//
// The dense matmul inside `affine` is delegated to BLAS (pinned to a single
// thread); everything else, including all backward passes, is first-party.

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <utility>
#include <vector>

#include "gnoc/common.hpp"

extern "C" void openblas_set_num_threads(int);

namespace gnoc {

using Shape = std::vector<std::size_t>;
using Index = std::int32_t;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

template <typename Real>
struct TapeT;

template <typename Real>
struct TensorT {
  Shape shape;
  std::vector<Real> values;
  bool requires_grad = false;
  std::vector<Real> grad;       // lazily allocated on first accumulation
  TapeT<Real>* tape = nullptr;  // tape this tensor was recorded on, if any

  std::size_t size() const { return values.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() == 2 ? shape[1] : 1; }
  bool is_scalar() const { return size() == 1; }

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), Real(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), Real(0)); }

  static std::shared_ptr<TensorT> zeros(Shape s) {
    auto t = std::make_shared<TensorT>();
    t->shape = std::move(s);
    t->values.assign(numel(t->shape), Real(0));
    return t;
  }
  static std::shared_ptr<TensorT> full(Shape s, Real v) {
    auto t = zeros(std::move(s));
    std::fill(t->values.begin(), t->values.end(), v);
    return t;
  }
  static std::shared_ptr<TensorT> from(Shape s, std::vector<Real> v) {
    GNOC_CHECK(numel(s) == v.size(), ContractError,
               "tensor: value count does not match shape");
    auto t = std::make_shared<TensorT>();
    t->shape = std::move(s);
    t->values = std::move(v);
    return t;
  }
  static std::shared_ptr<TensorT> scalar(Real v) { return from({1}, {v}); }
};

template <typename Real>
using TensorPtrT = std::shared_ptr<TensorT<Real>>;

using Tensor = TensorT<double>;
using TensorPtr = TensorPtrT<double>;

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <typename Real>
struct TapeT {
  std::vector<std::function<void()>> nodes;
  bool consumed = false;

  void record(std::function<void()> f) { nodes.emplace_back(std::move(f)); }

  // One active tape per thread; nested scopes restore the previous one.
  static TapeT*& active() {
    thread_local TapeT* t = nullptr;
    return t;
  }
};

template <typename Real>
class TapeScopeT {
 public:
  TapeScopeT() : prev_(TapeT<Real>::active()) { TapeT<Real>::active() = &tape_; }
  ~TapeScopeT() { TapeT<Real>::active() = prev_; }
  TapeScopeT(const TapeScopeT&) = delete;
  TapeScopeT& operator=(const TapeScopeT&) = delete;
  TapeT<Real>& tape() { return tape_; }

 private:
  TapeT<Real> tape_;
  TapeT<Real>* prev_;
};

using Tape = TapeT<double>;
using TapeScope = TapeScopeT<double>;

// Seeds d(out)/d(out) = 1 and replays the tape backwards. Each closure adds
// into its inputs' grad buffers, so repeated use of a value accumulates.
template <typename Real>
void backward(const TensorPtrT<Real>& out) {
  GNOC_CHECK(out->tape != nullptr, ContractError,
             "backward: output was not recorded on a tape");
  GNOC_CHECK(out->is_scalar(), ContractError,
             "backward: output must be a scalar");
  TapeT<Real>* tp = out->tape;
  GNOC_CHECK(!tp->consumed, ContractError, "backward: tape already replayed");
  tp->consumed = true;
  out->ensure_grad();
  out->grad[0] = Real(1);
  for (auto it = tp->nodes.rbegin(); it != tp->nodes.rend(); ++it) (*it)();
}

namespace detail {

template <typename Real>
bool rec_any(std::initializer_list<const TensorPtrT<Real>*> ins) {
  if (TapeT<Real>::active() == nullptr) return false;
  for (const auto* p : ins)
    if ((*p)->requires_grad) return true;
  return false;
}

template <typename Real>
TensorPtrT<Real> make_out(Shape shape, bool rec) {
  auto t = TensorT<Real>::zeros(std::move(shape));
  if (rec) {
    t->requires_grad = true;
    t->tape = TapeT<Real>::active();
  }
  return t;
}

inline void blas_single_thread_once() {
  static const bool done = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)done;
}

inline void gemm(bool ta, bool tb, int m, int n, int k, const double* A,
                 int lda, const double* B, int ldb, double beta, double* C,
                 int ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (beta == 0.0)
      for (int i = 0; i < m; ++i) std::fill(C + i * ldc, C + i * ldc + n, 0.0);
    return;
  }
  blas_single_thread_once();
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, 1.0, A, lda, B, ldb,
              beta, C, ldc);
}

inline void gemm(bool ta, bool tb, int m, int n, int k, const float* A,
                 int lda, const float* B, int ldb, float beta, float* C,
                 int ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (beta == 0.0f)
      for (int i = 0; i < m; ++i) std::fill(C + i * ldc, C + i * ldc + n, 0.0f);
    return;
  }
  blas_single_thread_once();
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, 1.0f, A, lda, B, ldb,
              beta, C, ldc);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

template <typename Real>
TensorPtrT<Real> identity(const TensorPtrT<Real>& a) {
  const bool rec = detail::rec_any<Real>({&a});
  auto out = detail::make_out<Real>(a->shape, rec);
  out->values = a->values;
  if (rec)
    TapeT<Real>::active()->record([a, out] {
      if (out->grad.empty() || !a->requires_grad) return;
      a->ensure_grad();
      for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
    });
  return out;
}

template <typename Real>
TensorPtrT<Real> add(const TensorPtrT<Real>& a, const TensorPtrT<Real>& b) {
  GNOC_CHECK(a->shape == b->shape, ContractError, "add: shape mismatch");
  const bool rec = detail::rec_any<Real>({&a, &b});
  auto out = detail::make_out<Real>(a->shape, rec);
  for (std::size_t i = 0; i < a->size(); ++i)
    out->values[i] = a->values[i] + b->values[i];
  if (rec)
    TapeT<Real>::active()->record([a, b, out] {
      if (out->grad.empty()) return;
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < b->size(); ++i) b->grad[i] += out->grad[i];
      }
    });
  return out;
}

template <typename Real>
TensorPtrT<Real> sub(const TensorPtrT<Real>& a, const TensorPtrT<Real>& b) {
  GNOC_CHECK(a->shape == b->shape, ContractError, "sub: shape mismatch");
  const bool rec = detail::rec_any<Real>({&a, &b});
  auto out = detail::make_out<Real>(a->shape, rec);
  for (std::size_t i = 0; i < a->size(); ++i)
    out->values[i] = a->values[i] - b->values[i];
  if (rec)
    TapeT<Real>::active()->record([a, b, out] {
      if (out->grad.empty()) return;
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < b->size(); ++i) b->grad[i] -= out->grad[i];
      }
    });
  return out;
}

// Hadamard product.
template <typename Real>
TensorPtrT<Real> mul(const TensorPtrT<Real>& a, const TensorPtrT<Real>& b) {
  GNOC_CHECK(a->shape == b->shape, ContractError, "mul: shape mismatch");
  const bool rec = detail::rec_any<Real>({&a, &b});
  auto out = detail::make_out<Real>(a->shape, rec);
  for (std::size_t i = 0; i < a->size(); ++i)
    out->values[i] = a->values[i] * b->values[i];
  if (rec)
    TapeT<Real>::active()->record([a, b, out] {
      if (out->grad.empty()) return;
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->size(); ++i)
          a->grad[i] += out->grad[i] * b->values[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < b->size(); ++i)
          b->grad[i] += out->grad[i] * a->values[i];
      }
    });
  return out;
}

template <typename Real>
TensorPtrT<Real> div(const TensorPtrT<Real>& a, const TensorPtrT<Real>& b) {
  GNOC_CHECK(a->shape == b->shape, ContractError, "div: shape mismatch");
  const bool rec = detail::rec_any<Real>({&a, &b});
  auto out = detail::make_out<Real>(a->shape, rec);
  for (std::size_t i = 0; i < a->size(); ++i)
    out->values[i] = a->values[i] / b->values[i];
  if (rec)
    TapeT<Real>::active()->record([a, b, out] {
      if (out->grad.empty()) return;
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->size(); ++i)
          a->grad[i] += out->grad[i] / b->values[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < b->size(); ++i)
          b->grad[i] -= out->grad[i] * a->values[i] / (b->values[i] * b->values[i]);
      }
    });
  return out;
}

template <typename Real>
TensorPtrT<Real> scale(const TensorPtrT<Real>& a, Real c) {
  const bool rec = detail::rec_any<Real>({&a});
  auto out = detail::make_out<Real>(a->shape, rec);
  for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = c * a->values[i];
  if (rec)
    TapeT<Real>::active()->record([a, out, c] {
      if (out->grad.empty() || !a->requires_grad) return;
      a->ensure_grad();
      for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += c * out->grad[i];
    });
  return out;
}

template <typename Real>
TensorPtrT<Real> add_scalar(const TensorPtrT<Real>& a, Real c) {
  const bool rec = detail::rec_any<Real>({&a});
  auto out = detail::make_out<Real>(a->shape, rec);
  for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = a->values[i] + c;
  if (rec)
    TapeT<Real>::active()->record([a, out] {
      if (out->grad.empty() || !a->requires_grad) return;
      a->ensure_grad();
      for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
    });
  return out;
}

// ---------------------------------------------------------------------------
// Generic elementwise maps. `map_unary` applies f with derivative df;
// `map_expand` maps each scalar of a [n] / [n,1] input to K outputs, with the
// KxN derivative table captured for backward. Basis functions plug in here.
// ---------------------------------------------------------------------------

template <typename Real, typename F, typename DF>
TensorPtrT<Real> map_unary(const TensorPtrT<Real>& a, F f, DF df) {
  const bool rec = detail::rec_any<Real>({&a});
  auto out = detail::make_out<Real>(a->shape, rec);
  for (std::size_t i = 0; i < a->size(); ++i)
    out->values[i] = f(a->values[i]);
  if (rec) {
    std::vector<Real> d(a->size());
    for (std::size_t i = 0; i < a->size(); ++i) d[i] = df(a->values[i]);
    TapeT<Real>::active()->record([a, out, d = std::move(d)] {
      if (out->grad.empty() || !a->requires_grad) return;
      a->ensure_grad();
      for (std::size_t i = 0; i < a->size(); ++i)
        a->grad[i] += out->grad[i] * d[i];
    });
  }
  return out;
}

// fn(x, out, dout): writes K values; dout is null when gradients are off.
template <typename Real, typename Fn>
TensorPtrT<Real> map_expand(const TensorPtrT<Real>& a, std::size_t K, Fn fn) {
  GNOC_CHECK(a->shape.size() == 1 || (a->shape.size() == 2 && a->shape[1] == 1),
             ContractError, "map_expand: input must be a column");
  GNOC_CHECK(K >= 1, ContractError, "map_expand: K must be >= 1");
  const std::size_t n = a->size();
  const bool rec = detail::rec_any<Real>({&a});
  auto out = detail::make_out<Real>({n, K}, rec);
  if (!rec) {
    for (std::size_t i = 0; i < n; ++i)
      fn(a->values[i], out->values.data() + i * K, static_cast<Real*>(nullptr));
    return out;
  }
  std::vector<Real> d(n * K);
  for (std::size_t i = 0; i < n; ++i)
    fn(a->values[i], out->values.data() + i * K, d.data() + i * K);
  TapeT<Real>::active()->record([a, out, K, d = std::move(d)] {
    if (out->grad.empty() || !a->requires_grad) return;
    a->ensure_grad();
    for (std::size_t i = 0; i < a->size(); ++i) {
      Real g = 0;
      for (std::size_t k = 0; k < K; ++k)
        g += out->grad[i * K + k] * d[i * K + k];
      a->grad[i] += g;
    }
  });
  return out;
}

// Two-input variant: fn(x, y, out, dout_dx, dout_dy) maps each row's (x, y)
// scalar pair to K outputs. Derivative tables are null when gradients are off.
template <typename Real, typename Fn>
TensorPtrT<Real> map_expand2(const TensorPtrT<Real>& a,
                             const TensorPtrT<Real>& b, std::size_t K, Fn fn) {
  GNOC_CHECK(a->shape.size() <= 2 && a->size() == a->rows(), ContractError,
             "map_expand2: first input must be a column");
  GNOC_CHECK(a->size() == b->size(), ContractError,
             "map_expand2: inputs must have equal length");
  GNOC_CHECK(K >= 1, ContractError, "map_expand2: K must be >= 1");
  const std::size_t n = a->size();
  const bool rec = detail::rec_any<Real>({&a, &b});
  auto out = detail::make_out<Real>({n, K}, rec);
  if (!rec) {
    for (std::size_t i = 0; i < n; ++i)
      fn(a->values[i], b->values[i], out->values.data() + i * K,
         static_cast<Real*>(nullptr), static_cast<Real*>(nullptr));
    return out;
  }
  std::vector<Real> da(n * K), db(n * K);
  for (std::size_t i = 0; i < n; ++i)
    fn(a->values[i], b->values[i], out->values.data() + i * K,
       da.data() + i * K, db.data() + i * K);
  TapeT<Real>::active()->record(
      [a, b, out, K, da = std::move(da), db = std::move(db)] {
        if (out->grad.empty()) return;
        for (std::size_t i = 0; i < a->size(); ++i) {
          Real ga = 0, gb = 0;
          for (std::size_t k = 0; k < K; ++k) {
            ga += out->grad[i * K + k] * da[i * K + k];
            gb += out->grad[i * K + k] * db[i * K + k];
          }
          if (a->requires_grad) {
            a->ensure_grad();
            a->grad[i] += ga;
          }
          if (b->requires_grad) {
            b->ensure_grad();
            b->grad[i] += gb;
          }
        }
      });
  return out;
}

// Per-row outer product flattened to [n, p*q]: out[i, jp*q + jq] = a[i,jp]*b[i,jq].
template <typename Real>
TensorPtrT<Real> row_outer(const TensorPtrT<Real>& a, const TensorPtrT<Real>& b) {
  GNOC_CHECK(a->shape.size() == 2 && b->shape.size() == 2 &&
                 a->shape[0] == b->shape[0],
             ContractError, "row_outer: matching 2-D row counts required");
  const std::size_t n = a->shape[0], p = a->shape[1], q = b->shape[1];
  const bool rec = detail::rec_any<Real>({&a, &b});
  auto out = detail::make_out<Real>({n, p * q}, rec);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t jp = 0; jp < p; ++jp)
      for (std::size_t jq = 0; jq < q; ++jq)
        out->values[(i * p + jp) * q + jq] =
            a->values[i * p + jp] * b->values[i * q + jq];
  if (rec)
    TapeT<Real>::active()->record([a, b, out, n, p, q] {
      if (out->grad.empty()) return;
      for (std::size_t i = 0; i < n; ++i) {
        if (a->requires_grad) {
          a->ensure_grad();
          for (std::size_t jp = 0; jp < p; ++jp) {
            Real g = 0;
            for (std::size_t jq = 0; jq < q; ++jq)
              g += out->grad[(i * p + jp) * q + jq] * b->values[i * q + jq];
            a->grad[i * p + jp] += g;
          }
        }
        if (b->requires_grad) {
          b->ensure_grad();
          for (std::size_t jq = 0; jq < q; ++jq) {
            Real g = 0;
            for (std::size_t jp = 0; jp < p; ++jp)
              g += out->grad[(i * p + jp) * q + jq] * a->values[i * p + jp];
            b->grad[i * q + jq] += g;
          }
        }
      }
    });
  return out;
}

template <typename Real>
TensorPtrT<Real> sqrt_(const TensorPtrT<Real>& a) {
  return map_unary(
      a, [](Real x) { return std::sqrt(x); },
      [](Real x) { return Real(0.5) / std::sqrt(x); });
}

template <typename Real>
TensorPtrT<Real> square_(const TensorPtrT<Real>& a) {
  return map_unary(
      a, [](Real x) { return x * x; }, [](Real x) { return Real(2) * x; });
}

template <typename Real>
TensorPtrT<Real> exp_(const TensorPtrT<Real>& a) {
  return map_unary(
      a, [](Real x) { return std::exp(x); },
      [](Real x) { return std::exp(x); });
}

template <typename Real>
TensorPtrT<Real> sin_(const TensorPtrT<Real>& a) {
  return map_unary(
      a, [](Real x) { return std::sin(x); },
      [](Real x) { return std::cos(x); });
}

template <typename Real>
TensorPtrT<Real> cos_(const TensorPtrT<Real>& a) {
  return map_unary(
      a, [](Real x) { return std::cos(x); },
      [](Real x) { return -std::sin(x); });
}

template <typename Real>
TensorPtrT<Real> abs_(const TensorPtrT<Real>& a) {
  return map_unary(
      a, [](Real x) { return std::abs(x); },
      [](Real x) { return x >= Real(0) ? Real(1) : Real(-1); });
}

// acos with the argument clamped to [-1+m, 1-m]; keeps angle features finite
// even when a cosine sits exactly on the domain edge.
template <typename Real>
TensorPtrT<Real> acos_clamped(const TensorPtrT<Real>& a, Real margin = Real(1e-12)) {
  const Real lim = Real(1) - margin;
  auto clampf = [lim](Real x) { return std::min(lim, std::max(-lim, x)); };
  return map_unary(
      a, [clampf](Real x) { return std::acos(clampf(x)); },
      [clampf](Real x) {
        const Real c = clampf(x);
        return Real(-1) / std::sqrt(Real(1) - c * c);
      });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

enum class Nonlinearity { scaled_silu, silu, identity };

template <typename Real>
TensorPtrT<Real> activation(const TensorPtrT<Real>& a, Nonlinearity kind) {
  if (kind == Nonlinearity::identity) return identity(a);
  // SiLU x*sigmoid(x); the scaled variant divides by E[silu'] ~ 0.6 so that a
  // unit-variance input keeps roughly unit variance.
  const Real s = kind == Nonlinearity::scaled_silu
                     ? Real(1) / Real(0.6)
                     : Real(1);
  return map_unary(
      a,
      [s](Real x) {
        const Real sig = Real(1) / (Real(1) + std::exp(-x));
        return s * x * sig;
      },
      [s](Real x) {
        const Real sig = Real(1) / (Real(1) + std::exp(-x));
        return s * (sig + x * sig * (Real(1) - sig));
      });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// y = x W + b. x: [n,k], W: [k,m], b: [m] or null.
template <typename Real>
TensorPtrT<Real> affine(const TensorPtrT<Real>& x, const TensorPtrT<Real>& W,
                        const TensorPtrT<Real>& b = nullptr) {
  GNOC_CHECK(x->shape.size() == 2 && W->shape.size() == 2, ContractError,
             "affine: x and W must be 2-D");
  GNOC_CHECK(x->shape[1] == W->shape[0], ContractError,
             "affine: inner dimensions disagree");
  if (b)
    GNOC_CHECK(b->shape.size() == 1 && b->shape[0] == W->shape[1],
               ContractError, "affine: bias length must equal output width");
  const std::size_t n = x->shape[0], k = x->shape[1], m = W->shape[1];
  const bool rec = b ? detail::rec_any<Real>({&x, &W, &b})
                     : detail::rec_any<Real>({&x, &W});
  auto out = detail::make_out<Real>({n, m}, rec);
  if (b)
    for (std::size_t i = 0; i < n; ++i)
      std::copy(b->values.begin(), b->values.end(), out->values.begin() + i * m);
  detail::gemm(false, false, static_cast<int>(n), static_cast<int>(m),
               static_cast<int>(k), x->values.data(), static_cast<int>(k),
               W->values.data(), static_cast<int>(m), b ? Real(1) : Real(0),
               out->values.data(), static_cast<int>(m));
  if (rec)
    TapeT<Real>::active()->record([x, W, b, out, n, k, m] {
      if (out->grad.empty()) return;
      if (x->requires_grad) {
        x->ensure_grad();
        detail::gemm(false, true, static_cast<int>(n), static_cast<int>(k),
                     static_cast<int>(m), out->grad.data(),
                     static_cast<int>(m), W->values.data(),
                     static_cast<int>(m), Real(1), x->grad.data(),
                     static_cast<int>(k));
      }
      if (W->requires_grad) {
        W->ensure_grad();
        detail::gemm(true, false, static_cast<int>(k), static_cast<int>(m),
                     static_cast<int>(n), x->values.data(),
                     static_cast<int>(k), out->grad.data(),
                     static_cast<int>(m), Real(1), W->grad.data(),
                     static_cast<int>(m));
      }
      if (b && b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j)
            b->grad[j] += out->grad[i * m + j];
      }
    });
  return out;
}

template <typename Real>
TensorPtrT<Real> matmul(const TensorPtrT<Real>& x, const TensorPtrT<Real>& W) {
  return affine(x, W, TensorPtrT<Real>(nullptr));
}

// ---------------------------------------------------------------------------
// Row-structured primitives
// ---------------------------------------------------------------------------

// Multiplies row i of x by s[i]. s: [n] or [n,1].
template <typename Real>
TensorPtrT<Real> scale_rows(const TensorPtrT<Real>& x,
                            const TensorPtrT<Real>& s) {
  GNOC_CHECK(x->shape.size() == 2, ContractError, "scale_rows: x must be 2-D");
  GNOC_CHECK(s->size() == x->shape[0], ContractError,
             "scale_rows: one scale per row required");
  const std::size_t n = x->shape[0], m = x->shape[1];
  const bool rec = detail::rec_any<Real>({&x, &s});
  auto out = detail::make_out<Real>(x->shape, rec);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      out->values[i * m + j] = x->values[i * m + j] * s->values[i];
  if (rec)
    TapeT<Real>::active()->record([x, s, out, n, m] {
      if (out->grad.empty()) return;
      if (x->requires_grad) {
        x->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j)
            x->grad[i * m + j] += out->grad[i * m + j] * s->values[i];
      }
      if (s->requires_grad) {
        s->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          Real g = 0;
          for (std::size_t j = 0; j < m; ++j)
            g += out->grad[i * m + j] * x->values[i * m + j];
          s->grad[i] += g;
        }
      }
    });
  return out;
}

template <typename Real>
TensorPtrT<Real> div_rows(const TensorPtrT<Real>& x, const TensorPtrT<Real>& s) {
  GNOC_CHECK(x->shape.size() == 2, ContractError, "div_rows: x must be 2-D");
  GNOC_CHECK(s->size() == x->shape[0], ContractError,
             "div_rows: one divisor per row required");
  const std::size_t n = x->shape[0], m = x->shape[1];
  const bool rec = detail::rec_any<Real>({&x, &s});
  auto out = detail::make_out<Real>(x->shape, rec);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      out->values[i * m + j] = x->values[i * m + j] / s->values[i];
  if (rec)
    TapeT<Real>::active()->record([x, s, out, n, m] {
      if (out->grad.empty()) return;
      if (x->requires_grad) {
        x->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j)
            x->grad[i * m + j] += out->grad[i * m + j] / s->values[i];
      }
      if (s->requires_grad) {
        s->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          Real g = 0;
          for (std::size_t j = 0; j < m; ++j)
            g += out->grad[i * m + j] * x->values[i * m + j];
          s->grad[i] -= g / (s->values[i] * s->values[i]);
        }
      }
    });
  return out;
}

// Euclidean norm of each row -> [n,1]. The backward divisor is floored at a
// tiny epsilon so an exactly-zero row yields zero gradient instead of NaN.
template <typename Real>
TensorPtrT<Real> row_norm(const TensorPtrT<Real>& x) {
  GNOC_CHECK(x->shape.size() == 2, ContractError, "row_norm: x must be 2-D");
  const std::size_t n = x->shape[0], m = x->shape[1];
  const bool rec = detail::rec_any<Real>({&x});
  auto out = detail::make_out<Real>({n, std::size_t(1)}, rec);
  for (std::size_t i = 0; i < n; ++i) {
    Real s = 0;
    for (std::size_t j = 0; j < m; ++j) s += x->values[i * m + j] * x->values[i * m + j];
    out->values[i] = std::sqrt(s);
  }
  if (rec)
    TapeT<Real>::active()->record([x, out, n, m] {
      if (out->grad.empty() || !x->requires_grad) return;
      x->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const Real d = std::max(out->values[i], Real(1e-30));
        for (std::size_t j = 0; j < m; ++j)
          x->grad[i * m + j] += out->grad[i] * x->values[i * m + j] / d;
      }
    });
  return out;
}

template <typename Real>
TensorPtrT<Real> row_dot(const TensorPtrT<Real>& a, const TensorPtrT<Real>& b) {
  GNOC_CHECK(a->shape == b->shape && a->shape.size() == 2, ContractError,
             "row_dot: matching 2-D shapes required");
  const std::size_t n = a->shape[0], m = a->shape[1];
  const bool rec = detail::rec_any<Real>({&a, &b});
  auto out = detail::make_out<Real>({n, std::size_t(1)}, rec);
  for (std::size_t i = 0; i < n; ++i) {
    Real s = 0;
    for (std::size_t j = 0; j < m; ++j) s += a->values[i * m + j] * b->values[i * m + j];
    out->values[i] = s;
  }
  if (rec)
    TapeT<Real>::active()->record([a, b, out, n, m] {
      if (out->grad.empty()) return;
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j)
            a->grad[i * m + j] += out->grad[i] * b->values[i * m + j];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j)
            b->grad[i * m + j] += out->grad[i] * a->values[i * m + j];
      }
    });
  return out;
}

template <typename Real>
TensorPtrT<Real> row_cross(const TensorPtrT<Real>& a, const TensorPtrT<Real>& b) {
  GNOC_CHECK(a->shape == b->shape && a->shape.size() == 2 && a->shape[1] == 3,
             ContractError, "row_cross: [n,3] inputs required");
  const std::size_t n = a->shape[0];
  const bool rec = detail::rec_any<Real>({&a, &b});
  auto out = detail::make_out<Real>(a->shape, rec);
  auto cr = [](const Real* u, const Real* v, Real* w) {
    w[0] = u[1] * v[2] - u[2] * v[1];
    w[1] = u[2] * v[0] - u[0] * v[2];
    w[2] = u[0] * v[1] - u[1] * v[0];
  };
  for (std::size_t i = 0; i < n; ++i)
    cr(a->values.data() + 3 * i, b->values.data() + 3 * i,
       out->values.data() + 3 * i);
  if (rec)
    TapeT<Real>::active()->record([a, b, out, n, cr] {
      if (out->grad.empty()) return;
      // d(a x b) contracted with g: da += b x g, db += g x a
      for (std::size_t i = 0; i < n; ++i) {
        const Real* g = out->grad.data() + 3 * i;
        Real t[3];
        if (a->requires_grad) {
          a->ensure_grad();
          cr(b->values.data() + 3 * i, g, t);
          for (int j = 0; j < 3; ++j) a->grad[3 * i + j] += t[j];
        }
        if (b->requires_grad) {
          b->ensure_grad();
          cr(g, a->values.data() + 3 * i, t);
          for (int j = 0; j < 3; ++j) b->grad[3 * i + j] += t[j];
        }
      }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Gather / scatter / reductions
// ---------------------------------------------------------------------------

template <typename Real>
TensorPtrT<Real> gather_rows(const TensorPtrT<Real>& x,
                             const std::vector<Index>& idx) {
  GNOC_CHECK(x->shape.size() == 2, ContractError, "gather_rows: x must be 2-D");
  const std::size_t N = x->shape[0], m = x->shape[1];
  for (Index i : idx)
    GNOC_CHECK(i >= 0 && static_cast<std::size_t>(i) < N, IndexError,
               "gather_rows: row index out of range");
  const bool rec = detail::rec_any<Real>({&x});
  auto out = detail::make_out<Real>({idx.size(), m}, rec);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(x->values.begin() + idx[i] * m, x->values.begin() + (idx[i] + 1) * m,
              out->values.begin() + i * m);
  if (rec)
    TapeT<Real>::active()->record([x, out, idx, m] {
      if (out->grad.empty() || !x->requires_grad) return;
      x->ensure_grad();
      // ascending output row order: deterministic scatter-add
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < m; ++j)
          x->grad[idx[i] * m + j] += out->grad[i * m + j];
    });
  return out;
}

// Sums rows of x into n_segments buckets. Accumulation runs in ascending row
// order, which makes the result independent of thread count and repeatable.
template <typename Real>
TensorPtrT<Real> segment_sum(const TensorPtrT<Real>& x,
                             const std::vector<Index>& ids,
                             std::size_t n_segments) {
  GNOC_CHECK(x->shape.size() == 2, ContractError, "segment_sum: x must be 2-D");
  GNOC_CHECK(ids.size() == x->shape[0], ContractError,
             "segment_sum: one segment id per row required");
  for (Index s : ids)
    GNOC_CHECK(s >= 0 && static_cast<std::size_t>(s) < n_segments, IndexError,
               "segment_sum: segment id out of range");
  const std::size_t m = x->shape[1];
  const bool rec = detail::rec_any<Real>({&x});
  auto out = detail::make_out<Real>({n_segments, m}, rec);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Real* dst = out->values.data() + static_cast<std::size_t>(ids[i]) * m;
    const Real* src = x->values.data() + i * m;
    for (std::size_t j = 0; j < m; ++j) dst[j] += src[j];
  }
  if (rec)
    TapeT<Real>::active()->record([x, out, ids, m] {
      if (out->grad.empty() || !x->requires_grad) return;
      x->ensure_grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const Real* src = out->grad.data() + static_cast<std::size_t>(ids[i]) * m;
        Real* dst = x->grad.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) dst[j] += src[j];
      }
    });
  return out;
}

template <typename Real>
TensorPtrT<Real> reduce_sum(const TensorPtrT<Real>& x) {
  const bool rec = detail::rec_any<Real>({&x});
  auto out = detail::make_out<Real>({1}, rec);
  Real s = 0;
  for (Real v : x->values) s += v;
  out->values[0] = s;
  if (rec)
    TapeT<Real>::active()->record([x, out] {
      if (out->grad.empty() || !x->requires_grad) return;
      x->ensure_grad();
      for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[0];
    });
  return out;
}

// ---------------------------------------------------------------------------
// Concatenation
// ---------------------------------------------------------------------------

template <typename Real>
TensorPtrT<Real> concat_cols(const std::vector<TensorPtrT<Real>>& parts) {
  GNOC_CHECK(!parts.empty(), ContractError, "concat_cols: empty input list");
  const std::size_t n = parts[0]->rows();
  std::size_t mtot = 0;
  for (const auto& p : parts) {
    GNOC_CHECK(p->shape.size() == 2, ContractError, "concat_cols: 2-D inputs");
    GNOC_CHECK(p->shape[0] == n, ContractError, "concat_cols: row count mismatch");
    mtot += p->shape[1];
  }
  bool rec = false;
  if (TapeT<Real>::active())
    for (const auto& p : parts) rec = rec || p->requires_grad;
  auto out = detail::make_out<Real>({n, mtot}, rec);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t m = p->shape[1];
    for (std::size_t i = 0; i < n; ++i)
      std::copy(p->values.begin() + i * m, p->values.begin() + (i + 1) * m,
                out->values.begin() + i * mtot + off);
    off += m;
  }
  if (rec)
    TapeT<Real>::active()->record([parts, out, n, mtot] {
      if (out->grad.empty()) return;
      std::size_t off = 0;
      for (const auto& p : parts) {
        const std::size_t m = p->shape[1];
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
              p->grad[i * m + j] += out->grad[i * mtot + off + j];
        }
        off += m;
      }
    });
  return out;
}

template <typename Real>
TensorPtrT<Real> concat_rows(const std::vector<TensorPtrT<Real>>& parts) {
  GNOC_CHECK(!parts.empty(), ContractError, "concat_rows: empty input list");
  const std::size_t m = parts[0]->cols();
  std::size_t ntot = 0;
  for (const auto& p : parts) {
    GNOC_CHECK(p->shape.size() == 2, ContractError, "concat_rows: 2-D inputs");
    GNOC_CHECK(p->shape[1] == m, ContractError, "concat_rows: column mismatch");
    ntot += p->shape[0];
  }
  bool rec = false;
  if (TapeT<Real>::active())
    for (const auto& p : parts) rec = rec || p->requires_grad;
  auto out = detail::make_out<Real>({ntot, m}, rec);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->values.begin(), p->values.end(), out->values.begin() + off);
    off += p->size();
  }
  if (rec)
    TapeT<Real>::active()->record([parts, out] {
      if (out->grad.empty()) return;
      std::size_t off = 0;
      for (const auto& p : parts) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < p->size(); ++i)
            p->grad[i] += out->grad[off + i];
        }
        off += p->size();
      }
    });
  return out;
}

// axis 0 = rows, axis 1 = columns
template <typename Real>
TensorPtrT<Real> concatenate(const std::vector<TensorPtrT<Real>>& parts,
                             int axis) {
  GNOC_CHECK(axis == 0 || axis == 1, ContractError,
             "concatenate: axis must be 0 or 1");
  return axis == 0 ? concat_rows(parts) : concat_cols(parts);
}

// ---------------------------------------------------------------------------
// Initializers (deterministic for a fixed generator state)
// ---------------------------------------------------------------------------

template <typename Real>
TensorPtrT<Real> randn(Shape s, std::mt19937_64& rng, Real stddev = Real(1)) {
  auto t = TensorT<Real>::zeros(std::move(s));
  std::normal_distribution<double> d(0.0, 1.0);
  for (auto& v : t->values) v = static_cast<Real>(d(rng)) * stddev;
  return t;
}

template <typename Real>
TensorPtrT<Real> uniform(Shape s, std::mt19937_64& rng, Real lo, Real hi) {
  auto t = TensorT<Real>::zeros(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t->values) v = static_cast<Real>(d(rng));
  return t;
}

// Semi-orthogonal [rows, cols] matrix: orthonormal columns when rows >= cols,
// orthonormal rows otherwise (modified Gram-Schmidt on a Gaussian draw).
template <typename Real>
TensorPtrT<Real> orthogonal(std::size_t rows, std::size_t cols,
                            std::mt19937_64& rng) {
  const bool tall = rows >= cols;
  const std::size_t r = tall ? rows : cols;
  const std::size_t c = tall ? cols : rows;
  std::vector<double> g(r * c);
  std::normal_distribution<double> d(0.0, 1.0);
  for (auto& v : g) v = d(rng);
  // orthonormalize the c columns of the r x c matrix
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t p = 0; p < j; ++p) {
      double proj = 0;
      for (std::size_t i = 0; i < r; ++i) proj += g[i * c + j] * g[i * c + p];
      for (std::size_t i = 0; i < r; ++i) g[i * c + j] -= proj * g[i * c + p];
    }
    double nrm = 0;
    for (std::size_t i = 0; i < r; ++i) nrm += g[i * c + j] * g[i * c + j];
    nrm = std::sqrt(nrm);
    GNOC_CHECK(nrm > 1e-8, NumericError, "orthogonal: degenerate random draw");
    for (std::size_t i = 0; i < r; ++i) g[i * c + j] /= nrm;
  }
  auto t = TensorT<Real>::zeros({rows, cols});
  if (tall) {
    for (std::size_t i = 0; i < rows * cols; ++i)
      t->values[i] = static_cast<Real>(g[i]);
  } else {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j)
        t->values[i * cols + j] = static_cast<Real>(g[j * rows + i]);
  }
  return t;
}

}  // namespace gnoc
