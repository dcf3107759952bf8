#pragma once

#include <string>

#include "co4/tensor.hpp"

namespace co4 {

// The four operating regimes of a two-point unit, keyed by the relative
// strength of the evidence stream R and the context stream C.
enum class ModRegime { kAiAc, kAa, kAd, kAdAwake };

std::string to_string(ModRegime r);

// Two-parameter sigmoid sigma(x) = 1 / (1 + exp(-(x - theta) / s)), s > 0.
struct SigmoidParams {
  double theta = 0.0;
  double s = 1.0;

  double operator()(double x) const;
  void validate() const;
};

namespace mod {

// Context-driven cooperation (AD): C1^2 + 2*C1 + C2*(1 + |R|).
// Evidence enters only through the C2 gate; with C1 = C2 = 0 both the output
// and its derivative w.r.t. R vanish identically.
Tensor ad(const Tensor& r, const Tensor& c1, const Tensor& c2);

// Additive evidence-driven cooperation (AA): R + R*C.
Tensor aa(const Tensor& r, const Tensor& c);

// Dual-drive cooperation (AD+Awake): R1 + C*(1 + |R2|), with the caller
// supplying the unilateral evidence drive R1.
Tensor ad_awake(const Tensor& r1, const Tensor& r2, const Tensor& c);

// Scalar-surface convenience: R^2 + 2R + C*(1 + |R|).
Tensor fig1d(const Tensor& r, const Tensor& c);

// Asynchronous transfer-function family; exponent arguments are saturated at
// +/-700 before exp/2^x so overflow cannot occur.
enum class TmVariant { kTm1, kTm2, kTm3, kTm4 };
Tensor tm_transfer(TmVariant variant, const Tensor& r, const Tensor& c);

}  // namespace mod

// Burst-probability composition laws across the four regimes. `params` holds
// the four sigmoid components in the order: p1b(b), p2a(a), p2b(b), ph2a(a).
struct BurstParams {
  SigmoidParams p1b;
  SigmoidParams p2a;
  SigmoidParams p2b;
  SigmoidParams ph2a;

  void validate() const;
};

enum class BurstRegime { kLL, kHL, kLH, kHH };

double burst_prob(BurstRegime regime, double b, double a, const BurstParams& params);

// Bins mean|R| and mean|C| as strong/weak against `high` and maps the pair
// onto the regime table. `low` in the pair is kept for diagnostics; the
// paper gives qualitative bands only, so the values are configuration.
struct RegimeThresholds {
  double low = 0.1;
  double high = 1.0;
};

ModRegime classify_regime(const Tensor& r, const Tensor& c,
                          const RegimeThresholds& thresholds = {});

}  // namespace co4
