#pragma once

#include <cstdint>

#include "co4/param.hpp"
#include "co4/rng.hpp"
#include "co4/tensor.hpp"

namespace co4 {

struct VitConfig {
  size_t embed_dim = 128;  // E, divisible by heads
  size_t num_tokens = 64;  // N
  size_t heads = 4;
  size_t layers = 1;
  size_t mlp_hidden = 0;  // 0 means 4*E; Table-style overrides (e.g. 3076) allowed
  double dropout = 0.0;

  size_t hidden() const { return mlp_hidden == 0 ? 4 * embed_dim : mlp_hidden; }
  void validate() const;
};

// Pre-norm transformer block: x + MHSA(LN(x)), then h + MLP(LN(h)).
// `dropout_rng` enables inverted dropout on the attention output and MLP
// hidden activations; pass nullptr for eval mode.
class MhsaBlock {
 public:
  MhsaBlock(const VitConfig& cfg, uint64_t seed);

  Tensor forward(const Tensor& x, Rng* dropout_rng = nullptr);

  // Attention sublayer only (no residual), exposed for oracle tests.
  Tensor attend(const Tensor& x_normed, Rng* dropout_rng = nullptr);

  void collect_params(ParamRefs& out);
  const VitConfig& config() const { return cfg_; }

 private:
  VitConfig cfg_;
  Param ln1_g_, ln1_b_, ln2_g_, ln2_b_;
  Param wq_, wk_, wv_, wo_;
  Param bq_, bk_, bv_, bo_;
  Param mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;

  Tensor p(Param& par) const { return par.live.empty() ? par.value : par.live; }
};

}  // namespace co4
