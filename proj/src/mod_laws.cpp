#include "co4/mod_laws.hpp"

#include <cmath>

#include "co4/errors.hpp"
#include "co4/ops.hpp"

namespace co4 {

std::string to_string(ModRegime r) {
  switch (r) {
    case ModRegime::kAiAc: return "AI_AC";
    case ModRegime::kAa: return "AA";
    case ModRegime::kAd: return "AD";
    case ModRegime::kAdAwake: return "AD_AWAKE";
  }
  return "?";
}

double SigmoidParams::operator()(double x) const {
  return 1.0 / (1.0 + std::exp(-(x - theta) / s));
}

void SigmoidParams::validate() const {
  if (!(s > 0.0)) throw ConfigError("sigmoid: slope scale s must be > 0");
}

namespace mod {

namespace {
constexpr double kExpCap = 700.0;  // exp(700) is still finite in f64
}

Tensor ad(const Tensor& r, const Tensor& c1, const Tensor& c2) {
  using namespace ops;
  Tensor fc = add(mul(c1, c1), mul(c1, 2.0));
  Tensor gate = mul(c2, add(abs(r), 1.0));
  return add(fc, gate);
}

Tensor aa(const Tensor& r, const Tensor& c) {
  using namespace ops;
  return add(r, mul(r, c));
}

Tensor ad_awake(const Tensor& r1, const Tensor& r2, const Tensor& c) {
  using namespace ops;
  return add(r1, mul(c, add(abs(r2), 1.0)));
}

Tensor fig1d(const Tensor& r, const Tensor& c) {
  using namespace ops;
  Tensor fr = add(mul(r, r), mul(r, 2.0));
  return ad_awake(fr, r, c);
}

Tensor tm_transfer(TmVariant variant, const Tensor& r, const Tensor& c) {
  using namespace ops;
  Tensor rc = mul(r, c);
  switch (variant) {
    case TmVariant::kTm1:
      return mul(mul(r, add(exp(clamp(rc, -kExpCap, kExpCap)), 1.0)), 0.5);
    case TmVariant::kTm2:
      return add(r, rc);
    case TmVariant::kTm3:
      return mul(r, add(tanh(rc), 1.0));
    case TmVariant::kTm4:
      return mul(r, exp2(clamp(rc, -kExpCap, kExpCap)));
  }
  throw ConfigError("tm_transfer: unknown variant");
}

}  // namespace mod

void BurstParams::validate() const {
  p1b.validate();
  p2a.validate();
  p2b.validate();
  ph2a.validate();
}

double burst_prob(BurstRegime regime, double b, double a, const BurstParams& params) {
  params.validate();
  if (!std::isfinite(b) || !std::isfinite(a)) {
    throw NumericError("burst_prob: non-finite stimulus amplitude");
  }
  double p1b = params.p1b(b);
  double p2a = params.p2a(a);
  double p2b = params.p2b(b);
  double ph2a = params.ph2a(a);
  double ll = p1b * p2a;
  switch (regime) {
    case BurstRegime::kLL:
      return ll;
    case BurstRegime::kHL:
      return p1b * p2b + ll * (1.0 - p2b);
    case BurstRegime::kLH:
      return ph2a + ll * (1.0 - ph2a);
    case BurstRegime::kHH: {
      double hl = p1b * p2b + ll * (1.0 - p2b);
      return ph2a + hl * (1.0 - ph2a);
    }
  }
  throw ConfigError("burst_prob: unknown regime");
}

ModRegime classify_regime(const Tensor& r, const Tensor& c, const RegimeThresholds& th) {
  if (!(th.low < th.high)) throw ConfigError("classify_regime: low must be < high");
  auto mean_abs = [](const Tensor& t) {
    double s = 0.0;
    for (size_t i = 0; i < t.size(); ++i) s += std::abs(t[i]);
    return s / static_cast<double>(t.size());
  };
  bool r_strong = mean_abs(r) >= th.high;
  bool c_strong = mean_abs(c) >= th.high;
  if (r_strong && c_strong) return ModRegime::kAdAwake;
  if (r_strong) return ModRegime::kAa;
  if (c_strong) return ModRegime::kAd;
  return ModRegime::kAiAc;
}

}  // namespace co4
