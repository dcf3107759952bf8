#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "co4/rng.hpp"
#include "co4/tape.hpp"
#include "co4/tensor.hpp"

namespace co4::ops {

// ---------------------------------------------------------------------------
// Instrumentation. Sections let a forward pass attribute its scalar op counts
// to the terms of the analytic cost model. Counting convention (mirrored by
// bench::macs_detail):
//   matmul (m,k)x(k,n)            m*k*n
//   binary elementwise / unary transcendental / sums   size
//   neg, abs, relu, clamp, slices, transpose, gather   0
//   softmax_rows                  3*size
//   layer_norm                    5*size
//   cross_entropy                 3*B*K
// Top-k selection comparisons are tallied separately (they are not MACs).
// ---------------------------------------------------------------------------
enum class MacSection {
  kOther = 0,
  kProjection,
  kModulation,
  kTopK,
  kAttention,
  kReadout,
  kCount
};

struct OpStats {
  std::array<uint64_t, static_cast<size_t>(MacSection::kCount)> macs{};
  uint64_t topk_compares = 0;
  uint64_t max_alloc_elems = 0;

  uint64_t total() const;
  uint64_t in(MacSection s) const { return macs[static_cast<size_t>(s)]; }
  void reset();
};

OpStats& op_stats();

class MacSectionScope {
 public:
  explicit MacSectionScope(MacSection s);
  ~MacSectionScope();
  MacSectionScope(const MacSectionScope&) = delete;
  MacSectionScope& operator=(const MacSectionScope&) = delete;

 private:
  MacSection prev_;
};

void count_topk_compares(uint64_t n);

// Debug sentinel: when on, every op output is scanned and non-finite values
// raise NumericError at the op that produced them.
void set_nan_debug(bool on);
bool nan_debug();

// ---------------------------------------------------------------------------
// Elementwise. Binary ops require equal shapes, a scalar b, or b's shape being
// a trailing suffix of a's (the broadcast rule used throughout).
// ---------------------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, double s);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor exp2(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor relu_alpha(const Tensor& a, double alpha);
Tensor clamp(const Tensor& a, double lo, double hi);

// ---------------------------------------------------------------------------
// Linear algebra and shape surgery.
// ---------------------------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k)x(k,n)
Tensor transpose(const Tensor& a);                // 2-D
Tensor slice_cols(const Tensor& a, size_t c0, size_t c1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_batch(const Tensor& a, size_t index);       // drop leading dim
Tensor stack_batch(const std::vector<Tensor>& parts);    // add leading dim
Tensor gather_rows(const Tensor& a, const std::vector<size_t>& rows);  // 2-D

// ---------------------------------------------------------------------------
// Reductions and network pieces.
// ---------------------------------------------------------------------------
Tensor softmax_rows(const Tensor& a);  // softmax over the last axis
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor mean_pool(const Tensor& x);   // (B,N,E)->(B,E) or (N,E)->(E)
Tensor mean_axis0(const Tensor& x);  // (B,...)->(...)
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Untracked random fills.
Tensor randn(std::vector<size_t> shape, Rng& rng, double mean = 0.0, double sd = 1.0);
Tensor rand_uniform(std::vector<size_t> shape, Rng& rng, double lo, double hi);

}  // namespace co4::ops
