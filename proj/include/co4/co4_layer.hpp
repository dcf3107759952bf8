#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "co4/mod_laws.hpp"
#include "co4/param.hpp"
#include "co4/tensor.hpp"

namespace co4 {

enum class LatentInit { kNormal, kProjection };
enum class ReadoutKind { kTopkAttn, kMlpOnly };
enum class TopkScore { kVmNorm, kQmKm };

// Modulation-equation sets for the regime-collapse ablation. kCanonical is
// the reference law; the others collapse parts of its structure.
enum class ModEquationSet {
  kCanonical,      // Qm = Qx + Ql*Kx ; Km = Kx + Kl*Qx ; Vm = Vx^2+2Vx+QmKm(1+|Vl|)
  kSelfContext,    // Qm = Ql + Ql*Qx ; Km = Kl + Kl*Kx ; Vm as canonical
  kLatentAnchored, // Qm = Ql + Ql*Kx ; Km = Kl + Kl*Qx ; Vm as canonical
  kIdentityV,      // Qm, Km as canonical ; Vm = Vx
  kLinearV,        // Qm, Km as canonical ; Vm = Vx + Vl*Qm*Km
};

constexpr size_t kNumEquationSets = 5;
ModEquationSet equation_set_from_id(size_t id);
std::string to_string(ModEquationSet eq);

struct Co4Config {
  size_t embed_dim = 128;   // E
  size_t num_tokens = 64;   // N
  size_t num_latents = 0;   // l; 0 means l = N (one latent per token)
  LatentInit variant = LatentInit::kProjection;
  ReadoutKind readout = ReadoutKind::kMlpOnly;
  size_t k = 8;
  bool strict_k = false;  // enforce k <= ceil(sqrt(N))
  // Belief-update step size. 0 disables the belief loop entirely (the
  // "without mu" single-step mode) for any iteration count, since mu only
  // has dynamics through alpha.
  double alpha_mu = 0.1;
  size_t iterations = 1;
  double relu_cap = 6.0;
  size_t heads = 1;
  // mu fill value when the belief loop is active; 0 is an absorbing fixed
  // point of the multiplicative update and reproduces single-step outputs.
  double mu_init = 0.0;
  double mu_clamp = 10.0;
  size_t mlp_hidden = 0;  // 0 means 2*E
  TopkScore score = TopkScore::kVmNorm;
  ModEquationSet eq_set = ModEquationSet::kCanonical;
  RegimeThresholds thresholds;

  size_t latents() const { return num_latents == 0 ? num_tokens : num_latents; }
  size_t hidden() const { return mlp_hidden == 0 ? 2 * embed_dim : mlp_hidden; }
  void validate() const;
};

// Universal-context vector with its step size (the mu of the belief update).
struct BeliefState {
  Tensor mu;  // (l, E)
  double alpha = 0.0;
};

// Activations of one forward pass: input tokens, their projections, and the
// latent streams. Under projection init the latents alias the projections.
struct TokenBatch {
  Tensor x;             // (B, N, E)
  Tensor qx, kx, vx;    // (B, N, E)
  Tensor ql, kl, vl;    // (l, E) for normal init, (B, N, E) aliases otherwise
};

struct ModOutputs {
  Tensor qm, km, vm;
};

// Draws latents for the requested variant. Normal init fills (l,E) tensors
// with N(0, 0.02^2) deterministically from the seed; projection init aliases
// the batch projections.
void init_latents(const Co4Config& cfg, uint64_t rng_seed, TokenBatch& batch);

// Triadic modulation with normally-initialized latents. `mu` is the
// universal context (nullptr = zero contribution, the single-step mode);
// `eq` selects the ablation law (mu enters the canonical law only).
ModOutputs modulate_normal_init(const TokenBatch& batch, const Tensor* mu,
                                ModEquationSet eq = ModEquationSet::kCanonical);

// Triadic modulation with latents aliased to the input projections;
// the value stream is capped by relu_alpha at `relu_cap`.
ModOutputs modulate_projection_init(const TokenBatch& batch, double relu_cap);

// Belief update: E = |Qm-Ql| + |Km-Kl| + |Vm-Vl| (mean-reduced over the batch
// axis), mu <- clamp(mu * (1 + alpha*E)). Throws NumericError on non-finite E.
BeliefState update_belief(const BeliefState& state, const ModOutputs& m, const Tensor& ql,
                          const Tensor& kl, const Tensor& vl, double clamp_abs = 10.0);

// Indices of the k largest scores per row; ties broken toward the lowest
// index; returned ascending. Comparison count is tallied in op_stats.
std::vector<std::vector<size_t>> topk_select(const Tensor& scores, size_t k);

struct Co4Diagnostics {
  std::vector<std::vector<double>> token_scores;   // per batch row
  std::vector<std::vector<size_t>> selected;       // per batch row (top-k readout)
  ModRegime regime = ModRegime::kAiAc;
  Tensor final_mu;
};

// One Co4 block: projections, triadic modulation with optional belief
// iteration, and a top-k-attention or MLP readout. Holds the learnable
// parameters; forward is tracked when a tape is active and the params were
// prepared on it.
class Co4Layer {
 public:
  Co4Layer(const Co4Config& cfg, uint64_t seed);

  // x: (B, N, E) embedded tokens. Returns (B, N, E) for the MLP readout or
  // (B, k, E) for the top-k readout.
  Tensor forward(const Tensor& x, Co4Diagnostics* diag = nullptr);

  // Modulated streams only (used by audits and tests).
  ModOutputs modulate(const TokenBatch& batch) const;
  TokenBatch project(const Tensor& x);

  const Co4Config& config() const { return cfg_; }
  void collect_params(ParamRefs& out);

 private:
  Co4Config cfg_;
  Param wq_, wk_, wv_;        // (E, E)
  Param bq_, bk_, bv_;        // (E)
  Param lat_q_, lat_k_, lat_v_;  // (l, E), normal init only
  Param mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;  // MLP readout

  Tensor param_tensor(Param& p) const;
};

}  // namespace co4
