#include "co4/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "co4/errors.hpp"

namespace co4::ops {

// ---------------------------------------------------------------------------
// Instrumentation
// ---------------------------------------------------------------------------

namespace {
thread_local OpStats g_stats;
thread_local MacSection g_section = MacSection::kOther;
thread_local bool g_nan_debug = false;

inline void count(uint64_t n) { g_stats.macs[static_cast<size_t>(g_section)] += n; }
}  // namespace

uint64_t OpStats::total() const {
  uint64_t t = 0;
  for (uint64_t m : macs) t += m;
  return t;
}

void OpStats::reset() {
  macs.fill(0);
  topk_compares = 0;
  max_alloc_elems = 0;
}

OpStats& op_stats() { return g_stats; }

MacSectionScope::MacSectionScope(MacSection s) : prev_(g_section) { g_section = s; }
MacSectionScope::~MacSectionScope() { g_section = prev_; }

void count_topk_compares(uint64_t n) { g_stats.topk_compares += n; }

void set_nan_debug(bool on) { g_nan_debug = on; }
bool nan_debug() { return g_nan_debug; }

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

namespace {

Tensor finish(Tensor out) {
  g_stats.max_alloc_elems = std::max<uint64_t>(g_stats.max_alloc_elems, out.size());
  if (g_nan_debug && !out.all_finite()) {
    throw NumericError("op produced a non-finite value (debug sentinel)");
  }
  return out;
}

// Active tape if any involved tensor is tracked.
Tape* tape_for(std::initializer_list<const Tensor*> ins) {
  Tape* t = active_tape();
  if (!t) return nullptr;
  for (const Tensor* in : ins) {
    if (in->tracked()) return t;
  }
  return nullptr;
}

enum class Broadcast { kSame, kScalar, kSuffix };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.size() == 1) return Broadcast::kScalar;
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() <= as.size() &&
      std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
    return Broadcast::kSuffix;
  }
  throw ShapeError("broadcast: cannot apply " + shape_str(bs) + " to " + shape_str(as));
}

// Generic tracked binary elementwise op with trailing broadcast of b.
template <typename Fwd, typename DfDa, typename DfDb>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd f, DfDa dfda, DfDb dfdb) {
  Broadcast bc = broadcast_kind(a, b);
  size_t n = a.size(), bn = b.size();
  std::vector<double> out(n);
  const double* pa = a.data();
  const double* pb = b.data();
  for (size_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[bc == Broadcast::kSame ? i : i % bn]);
  count(n);
  Tensor res = finish(Tensor::unchecked(a.shape(), std::move(out)));
  if (Tape* tape = tape_for({&a, &b})) {
    Tensor av = a, bv = b;
    int na = a.node(), nb = b.node();
    int id = tape->add_node(n, {na, nb}, [av, bv, na, nb, bc, dfda, dfdb](
                                             Tape& t, const std::vector<double>& og) {
      size_t n = av.size(), bn = bv.size();
      const double* pa = av.data();
      const double* pb = bv.data();
      if (na >= 0) {
        auto& ga = t.grad_buffer(na);
        for (size_t i = 0; i < n; ++i) {
          ga[i] += og[i] * dfda(pa[i], pb[bc == Broadcast::kSame ? i : i % bn]);
        }
      }
      if (nb >= 0) {
        auto& gb = t.grad_buffer(nb);
        for (size_t i = 0; i < n; ++i) {
          size_t j = bc == Broadcast::kSame ? i : i % bn;
          gb[j] += og[i] * dfdb(pa[i], pb[j]);
        }
      }
    });
    res = res.with_node(id);
  }
  return res;
}

// Generic tracked unary elementwise op; dfdx receives (x, y).
template <typename Fwd, typename Dfdx>
Tensor unary_op(const Tensor& a, uint64_t macs_per_elem, Fwd f, Dfdx dfdx) {
  size_t n = a.size();
  std::vector<double> out(n);
  const double* pa = a.data();
  for (size_t i = 0; i < n; ++i) out[i] = f(pa[i]);
  count(macs_per_elem * n);
  Tensor res = finish(Tensor::unchecked(a.shape(), std::move(out)));
  if (Tape* tape = tape_for({&a})) {
    Tensor av = a, yv = res;
    int na = a.node();
    int id = tape->add_node(n, {na}, [av, yv, na, dfdx](Tape& t, const std::vector<double>& og) {
      auto& ga = t.grad_buffer(na);
      const double* px = av.data();
      const double* py = yv.data();
      for (size_t i = 0; i < og.size(); ++i) ga[i] += og[i] * dfdx(px[i], py[i]);
    });
    res = res.with_node(id);
  }
  return res;
}

// Blocked f64 gemm kernels. Each output element is accumulated by exactly one
// thread in a fixed k order, so results are bitwise identical for any thread
// count.
constexpr int kBlock = 64;

void gemm_nn(size_t M, size_t N, size_t K, const double* A, const double* B, double* C) {
#pragma omp parallel for schedule(static)
  for (long long i0 = 0; i0 < static_cast<long long>(M); i0 += kBlock) {
    size_t i1 = std::min<size_t>(i0 + kBlock, M);
    for (size_t k0 = 0; k0 < K; k0 += kBlock) {
      size_t k1 = std::min(k0 + kBlock, K);
      for (size_t j0 = 0; j0 < N; j0 += kBlock) {
        size_t j1 = std::min(j0 + kBlock, N);
        for (size_t i = static_cast<size_t>(i0); i < i1; ++i) {
          double* Crow = C + i * N;
          for (size_t k = k0; k < k1; ++k) {
            double a = A[i * K + k];
            const double* Brow = B + k * N;
#pragma omp simd
            for (size_t j = j0; j < j1; ++j) Crow[j] += a * Brow[j];
          }
        }
      }
    }
  }
}

// C(M,N) += A(M,K) * B^T where B is (N,K).
void gemm_nt(size_t M, size_t N, size_t K, const double* A, const double* B, double* C) {
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(M); ++i) {
    const double* Arow = A + i * K;
    double* Crow = C + i * N;
    for (size_t j = 0; j < N; ++j) {
      const double* Brow = B + j * K;
      double acc = 0.0;
#pragma omp simd reduction(+ : acc)
      for (size_t k = 0; k < K; ++k) acc += Arow[k] * Brow[k];
      Crow[j] += acc;
    }
  }
}

// C(M,N) += A^T * B where A is (K,M), B is (K,N).
void gemm_tn(size_t M, size_t N, size_t K, const double* A, const double* B, double* C) {
#pragma omp parallel for schedule(static)
  for (long long i0 = 0; i0 < static_cast<long long>(M); i0 += kBlock) {
    size_t i1 = std::min<size_t>(i0 + kBlock, M);
    for (size_t k = 0; k < K; ++k) {
      const double* Brow = B + k * N;
      for (size_t i = static_cast<size_t>(i0); i < i1; ++i) {
        double a = A[k * M + i];
        double* Crow = C + i * N;
#pragma omp simd
        for (size_t j = 0; j < N; ++j) Crow[j] += a * Brow[j];
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor add(const Tensor& a, double b) {
  return unary_op(
      a, 1, [b](double x) { return x + b; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor mul(const Tensor& a, double s) {
  return unary_op(
      a, 1, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      a, 0, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor abs(const Tensor& a) {
  // Subgradient 0 at x = 0.
  return unary_op(
      a, 0, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, 1, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor exp2(const Tensor& a) {
  return unary_op(
      a, 1, [](double x) { return std::exp2(x); },
      [](double, double y) { return y * std::numbers::ln2; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, 1, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

namespace {
constexpr double inv_sqrt2 = 0.7071067811865475244;
constexpr double inv_sqrt2pi = 0.3989422804014326779;
}  // namespace

Tensor gelu(const Tensor& a) {
  return unary_op(
      a, 1, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

Tensor relu_alpha(const Tensor& a, double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("relu_alpha: alpha must be > 0");
  // Subgradient 0 at both kinks (x = 0 and x = alpha).
  return unary_op(
      a, 0, [alpha](double x) { return std::min(std::max(0.0, x), alpha); },
      [alpha](double x, double) { return (x > 0.0 && x < alpha) ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo < hi)) throw ConfigError("clamp: lo must be < hi");
  return unary_op(
      a, 0, [lo, hi](double x) { return std::min(std::max(lo, x), hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra / shape surgery
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expected 2-D operands, got " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(m, n, k, a.data(), b.data(), out.data());
  count(m * n * k);
  Tensor res = finish(Tensor::unchecked({m, n}, std::move(out)));
  if (Tape* tape = tape_for({&a, &b})) {
    Tensor av = a, bv = b;
    int na = a.node(), nb = b.node();
    int id = tape->add_node(m * n, {na, nb}, [av, bv, na, nb, m, n, k](
                                                 Tape& t, const std::vector<double>& og) {
      if (na >= 0) {  // dA += dC * B^T
        gemm_nt(m, k, n, og.data(), bv.data(), t.grad_buffer(na).data());
        count(m * k * n);
      }
      if (nb >= 0) {  // dB += A^T * dC
        gemm_tn(k, n, m, av.data(), og.data(), t.grad_buffer(nb).data());
        count(m * k * n);
      }
    });
    res = res.with_node(id);
  }
  return res;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected 2-D, got " + shape_str(a.shape()));
  size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(a.size());
  const double* pa = a.data();
  for (size_t i = 0; i < r; ++i)
    for (size_t j = 0; j < c; ++j) out[j * r + i] = pa[i * c + j];
  Tensor res = finish(Tensor::unchecked({c, r}, std::move(out)));
  if (Tape* tape = tape_for({&a})) {
    int na = a.node();
    int id = tape->add_node(a.size(), {na}, [na, r, c](Tape& t, const std::vector<double>& og) {
      auto& ga = t.grad_buffer(na);
      for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < c; ++j) ga[i * c + j] += og[j * r + i];
    });
    res = res.with_node(id);
  }
  return res;
}

Tensor slice_cols(const Tensor& a, size_t c0, size_t c1) {
  if (a.rank() != 2) throw ShapeError("slice_cols: expected 2-D");
  size_t r = a.dim(0), c = a.dim(1);
  if (c0 >= c1 || c1 > c) throw ShapeError("slice_cols: bad column range");
  size_t w = c1 - c0;
  std::vector<double> out(r * w);
  const double* pa = a.data();
  for (size_t i = 0; i < r; ++i)
    std::copy(pa + i * c + c0, pa + i * c + c1, out.begin() + i * w);
  Tensor res = finish(Tensor::unchecked({r, w}, std::move(out)));
  if (Tape* tape = tape_for({&a})) {
    int na = a.node();
    int id =
        tape->add_node(r * w, {na}, [na, r, c, c0, w](Tape& t, const std::vector<double>& og) {
          auto& ga = t.grad_buffer(na);
          for (size_t i = 0; i < r; ++i)
            for (size_t j = 0; j < w; ++j) ga[i * c + c0 + j] += og[i * w + j];
        });
    res = res.with_node(id);
  }
  return res;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  size_t r = parts[0].dim(0), total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != r) throw ShapeError("concat_cols: row mismatch");
    total += p.dim(1);
  }
  std::vector<double> out(r * total);
  size_t off = 0;
  for (const Tensor& p : parts) {
    size_t w = p.dim(1);
    for (size_t i = 0; i < r; ++i)
      std::copy(p.data() + i * w, p.data() + (i + 1) * w, out.begin() + i * total + off);
    off += w;
  }
  Tensor res = finish(Tensor::unchecked({r, total}, std::move(out)));
  Tape* tape = active_tape();
  bool any = false;
  if (tape) {
    for (const Tensor& p : parts) any = any || p.tracked();
  }
  if (tape && any) {
    std::vector<int> ids;
    std::vector<size_t> widths;
    for (const Tensor& p : parts) {
      ids.push_back(p.node());
      widths.push_back(p.dim(1));
    }
    int id = tape->add_node(r * total, ids,
                            [ids, widths, r, total](Tape& t, const std::vector<double>& og) {
                              size_t off = 0;
                              for (size_t pi = 0; pi < ids.size(); ++pi) {
                                size_t w = widths[pi];
                                if (ids[pi] >= 0) {
                                  auto& g = t.grad_buffer(ids[pi]);
                                  for (size_t i = 0; i < r; ++i)
                                    for (size_t j = 0; j < w; ++j)
                                      g[i * w + j] += og[i * total + off + j];
                                }
                                off += w;
                              }
                            });
    res = res.with_node(id);
  }
  return res;
}

Tensor slice_batch(const Tensor& a, size_t index) {
  if (a.rank() < 2) throw ShapeError("slice_batch: rank must be >= 2");
  size_t b = a.dim(0);
  if (index >= b) throw ShapeError("slice_batch: index out of range");
  std::vector<size_t> rest(a.shape().begin() + 1, a.shape().end());
  size_t n = shape_product(rest);
  std::vector<double> out(a.data() + index * n, a.data() + (index + 1) * n);
  Tensor res = finish(Tensor::unchecked(rest, std::move(out)));
  if (Tape* tape = tape_for({&a})) {
    int na = a.node();
    int id = tape->add_node(n, {na}, [na, index, n](Tape& t, const std::vector<double>& og) {
      auto& ga = t.grad_buffer(na);
      for (size_t i = 0; i < n; ++i) ga[index * n + i] += og[i];
    });
    res = res.with_node(id);
  }
  return res;
}

Tensor stack_batch(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("stack_batch: no parts");
  const auto& s0 = parts[0].shape();
  size_t n = parts[0].size();
  std::vector<double> out;
  out.reserve(n * parts.size());
  for (const Tensor& p : parts) {
    if (p.shape() != s0) throw ShapeError("stack_batch: shape mismatch");
    out.insert(out.end(), p.data(), p.data() + n);
  }
  std::vector<size_t> shape;
  shape.push_back(parts.size());
  shape.insert(shape.end(), s0.begin(), s0.end());
  Tensor res = finish(Tensor::unchecked(std::move(shape), std::move(out)));
  Tape* tape = active_tape();
  bool any = false;
  if (tape) {
    for (const Tensor& p : parts) any = any || p.tracked();
  }
  if (tape && any) {
    std::vector<int> ids;
    for (const Tensor& p : parts) ids.push_back(p.node());
    int id = tape->add_node(n * parts.size(), ids,
                            [ids, n](Tape& t, const std::vector<double>& og) {
                              for (size_t pi = 0; pi < ids.size(); ++pi) {
                                if (ids[pi] < 0) continue;
                                t.accum(ids[pi], og.data() + pi * n, n);
                              }
                            });
    res = res.with_node(id);
  }
  return res;
}

Tensor gather_rows(const Tensor& a, const std::vector<size_t>& rows) {
  if (a.rank() != 2) throw ShapeError("gather_rows: expected 2-D");
  size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out;
  out.reserve(rows.size() * c);
  for (size_t ri : rows) {
    if (ri >= r) throw ShapeError("gather_rows: row index out of range");
    out.insert(out.end(), a.data() + ri * c, a.data() + (ri + 1) * c);
  }
  Tensor res = finish(Tensor::unchecked({rows.size(), c}, std::move(out)));
  if (Tape* tape = tape_for({&a})) {
    int na = a.node();
    std::vector<size_t> rcopy = rows;
    int id = tape->add_node(rows.size() * c, {na},
                            [na, rcopy, c](Tape& t, const std::vector<double>& og) {
                              auto& ga = t.grad_buffer(na);
                              for (size_t i = 0; i < rcopy.size(); ++i)
                                for (size_t j = 0; j < c; ++j)
                                  ga[rcopy[i] * c + j] += og[i * c + j];
                            });
    res = res.with_node(id);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reductions / network pieces
// ---------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("softmax_rows: empty tensor");
  size_t c = a.shape().back();
  if (c == 0) throw ShapeError("softmax_rows: empty axis");
  size_t rows = a.size() / c;
  std::vector<double> out(a.size());
  const double* pa = a.data();
  for (size_t i = 0; i < rows; ++i) {
    const double* row = pa + i * c;
    double m = row[0];
    for (size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double sum = 0.0;
    for (size_t j = 0; j < c; ++j) {
      double e = std::exp(row[j] - m);
      out[i * c + j] = e;
      sum += e;
    }
    double inv = 1.0 / sum;
    for (size_t j = 0; j < c; ++j) out[i * c + j] *= inv;
  }
  count(3 * a.size());
  Tensor res = finish(Tensor::unchecked(a.shape(), std::move(out)));
  if (Tape* tape = tape_for({&a})) {
    Tensor yv = res;
    int na = a.node();
    int id = tape->add_node(a.size(), {na},
                            [na, yv, rows, c](Tape& t, const std::vector<double>& og) {
                              auto& ga = t.grad_buffer(na);
                              const double* y = yv.data();
                              for (size_t i = 0; i < rows; ++i) {
                                double dot = 0.0;
                                for (size_t j = 0; j < c; ++j) dot += og[i * c + j] * y[i * c + j];
                                for (size_t j = 0; j < c; ++j)
                                  ga[i * c + j] += y[i * c + j] * (og[i * c + j] - dot);
                              }
                            });
    res = res.with_node(id);
  }
  return res;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  size_t c = x.shape().back();
  if (gamma.size() != c || beta.size() != c) {
    throw ShapeError("layer_norm: gamma/beta must match the last axis");
  }
  size_t rows = x.size() / c;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  for (size_t i = 0; i < rows; ++i) {
    const double* row = px + i * c;
    double mean = 0.0;
    for (size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (size_t j = 0; j < c; ++j) {
      double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (size_t j = 0; j < c; ++j) {
      double h = (row[j] - mean) * is;
      xhat[i * c + j] = h;
      out[i * c + j] = pg[j] * h + pb[j];
    }
  }
  count(5 * x.size());
  Tensor res = finish(Tensor::unchecked(x.shape(), std::move(out)));
  if (Tape* tape = tape_for({&x, &gamma, &beta})) {
    int nx = x.node(), ng = gamma.node(), nb = beta.node();
    Tensor gv = gamma;
    auto xhat_p = std::make_shared<std::vector<double>>(std::move(xhat));
    auto istd_p = std::make_shared<std::vector<double>>(std::move(inv_std));
    int id = tape->add_node(
        x.size(), {nx, ng, nb},
        [nx, ng, nb, gv, xhat_p, istd_p, rows, c](Tape& t, const std::vector<double>& og) {
          const auto& xh = *xhat_p;
          const auto& istd = *istd_p;
          const double* pg = gv.data();
          if (ng >= 0) {
            auto& gg = t.grad_buffer(ng);
            for (size_t i = 0; i < rows; ++i)
              for (size_t j = 0; j < c; ++j) gg[j] += og[i * c + j] * xh[i * c + j];
          }
          if (nb >= 0) {
            auto& gb = t.grad_buffer(nb);
            for (size_t i = 0; i < rows; ++i)
              for (size_t j = 0; j < c; ++j) gb[j] += og[i * c + j];
          }
          if (nx >= 0) {
            auto& gx = t.grad_buffer(nx);
            double cn = static_cast<double>(c);
            for (size_t i = 0; i < rows; ++i) {
              double sum_dh = 0.0, sum_dh_h = 0.0;
              for (size_t j = 0; j < c; ++j) {
                double dh = og[i * c + j] * pg[j];
                sum_dh += dh;
                sum_dh_h += dh * xh[i * c + j];
              }
              for (size_t j = 0; j < c; ++j) {
                double dh = og[i * c + j] * pg[j];
                gx[i * c + j] +=
                    istd[i] * (dh - sum_dh / cn - xh[i * c + j] * sum_dh_h / cn);
              }
            }
          }
        });
    res = res.with_node(id);
  }
  return res;
}

Tensor mean_pool(const Tensor& x) {
  if (x.rank() == 2) {
    size_t n = x.dim(0), e = x.dim(1);
    std::vector<double> out(e, 0.0);
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < e; ++j) out[j] += x.data()[i * e + j];
    for (double& v : out) v /= static_cast<double>(n);
    count(x.size());
    Tensor res = finish(Tensor::unchecked({e}, std::move(out)));
    if (Tape* tape = tape_for({&x})) {
      int nx = x.node();
      int id = tape->add_node(e, {nx}, [nx, n, e](Tape& t, const std::vector<double>& og) {
        auto& g = t.grad_buffer(nx);
        double inv = 1.0 / static_cast<double>(n);
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < e; ++j) g[i * e + j] += og[j] * inv;
      });
      res = res.with_node(id);
    }
    return res;
  }
  if (x.rank() != 3) throw ShapeError("mean_pool: expected rank 2 or 3");
  size_t b = x.dim(0), n = x.dim(1), e = x.dim(2);
  if (n == 0) throw ShapeError("mean_pool: empty axis");
  std::vector<double> out(b * e, 0.0);
  for (size_t bi = 0; bi < b; ++bi)
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < e; ++j) out[bi * e + j] += x.data()[(bi * n + i) * e + j];
  for (double& v : out) v /= static_cast<double>(n);
  count(x.size());
  Tensor res = finish(Tensor::unchecked({b, e}, std::move(out)));
  if (Tape* tape = tape_for({&x})) {
    int nx = x.node();
    int id = tape->add_node(b * e, {nx}, [nx, b, n, e](Tape& t, const std::vector<double>& og) {
      auto& g = t.grad_buffer(nx);
      double inv = 1.0 / static_cast<double>(n);
      for (size_t bi = 0; bi < b; ++bi)
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < e; ++j) g[(bi * n + i) * e + j] += og[bi * e + j] * inv;
    });
    res = res.with_node(id);
  }
  return res;
}

Tensor mean_axis0(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("mean_axis0: rank must be >= 2");
  size_t b = x.dim(0);
  std::vector<size_t> rest(x.shape().begin() + 1, x.shape().end());
  size_t n = shape_product(rest);
  std::vector<double> out(n, 0.0);
  for (size_t bi = 0; bi < b; ++bi)
    for (size_t i = 0; i < n; ++i) out[i] += x.data()[bi * n + i];
  double inv = 1.0 / static_cast<double>(b);
  for (double& v : out) v *= inv;
  count(x.size());
  Tensor res = finish(Tensor::unchecked(rest, std::move(out)));
  if (Tape* tape = tape_for({&x})) {
    int nx = x.node();
    int id = tape->add_node(n, {nx}, [nx, b, n](Tape& t, const std::vector<double>& og) {
      auto& g = t.grad_buffer(nx);
      double inv = 1.0 / static_cast<double>(b);
      for (size_t bi = 0; bi < b; ++bi)
        for (size_t i = 0; i < n; ++i) g[bi * n + i] += og[i] * inv;
    });
    res = res.with_node(id);
  }
  return res;
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a.data()[i];
  count(a.size());
  Tensor res = finish(Tensor::unchecked({1}, {s}));
  if (Tape* tape = tape_for({&a})) {
    int na = a.node();
    size_t n = a.size();
    int id = tape->add_node(1, {na}, [na, n](Tape& t, const std::vector<double>& og) {
      auto& g = t.grad_buffer(na);
      for (size_t i = 0; i < n; ++i) g[i] += og[0];
    });
    res = res.with_node(id);
  }
  return res;
}

Tensor mean_all(const Tensor& a) { return mul(sum_all(a), 1.0 / static_cast<double>(a.size())); }

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be 2-D");
  size_t b = logits.dim(0), k = logits.dim(1);
  if (labels.size() != b) throw ShapeError("cross_entropy: label count mismatch");
  for (int l : labels) {
    if (l < 0 || static_cast<size_t>(l) >= k) throw ShapeError("cross_entropy: label out of range");
  }
  const double* pz = logits.data();
  double loss = 0.0;
  std::vector<double> probs(b * k);
  for (size_t i = 0; i < b; ++i) {
    const double* row = pz + i * k;
    double m = row[0];
    for (size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double sum = 0.0;
    for (size_t j = 0; j < k; ++j) {
      double e = std::exp(row[j] - m);
      probs[i * k + j] = e;
      sum += e;
    }
    double inv = 1.0 / sum;
    for (size_t j = 0; j < k; ++j) probs[i * k + j] *= inv;
    loss += m + std::log(sum) - row[labels[i]];
  }
  loss /= static_cast<double>(b);
  count(3 * b * k);
  Tensor res = finish(Tensor::unchecked({1}, {loss}));
  if (Tape* tape = tape_for({&logits})) {
    int nz = logits.node();
    auto probs_p = std::make_shared<std::vector<double>>(std::move(probs));
    std::vector<int> lab = labels;
    int id = tape->add_node(1, {nz},
                            [nz, probs_p, lab, b, k](Tape& t, const std::vector<double>& og) {
                              auto& g = t.grad_buffer(nz);
                              const auto& p = *probs_p;
                              double scale = og[0] / static_cast<double>(b);
                              for (size_t i = 0; i < b; ++i) {
                                for (size_t j = 0; j < k; ++j) g[i * k + j] += scale * p[i * k + j];
                                g[i * k + static_cast<size_t>(lab[i])] -= scale;
                              }
                            });
    res = res.with_node(id);
  }
  return res;
}

Tensor randn(std::vector<size_t> shape, Rng& rng, double mean, double sd) {
  size_t n = shape_product(shape);
  std::vector<double> out(n);
  for (double& v : out) v = rng.normal(mean, sd);
  return Tensor::unchecked(std::move(shape), std::move(out));
}

Tensor rand_uniform(std::vector<size_t> shape, Rng& rng, double lo, double hi) {
  size_t n = shape_product(shape);
  std::vector<double> out(n);
  for (double& v : out) v = rng.uniform(lo, hi);
  return Tensor::unchecked(std::move(shape), std::move(out));
}

}  // namespace co4::ops
