#pragma once

#include <cstdint>
#include <vector>

#include "co4/attention.hpp"
#include "co4/co4_layer.hpp"
#include "co4/param.hpp"

namespace co4 {

// Linear patch embedding with learnable positional embeddings. Both
// classifier models share this front end so their token streams match.
class PatchEmbed {
 public:
  PatchEmbed(size_t patch_dim, size_t num_tokens, size_t embed_dim, uint64_t seed);
  Tensor forward(const Tensor& patches);  // (B, N, P) -> (B, N, E)
  void collect_params(ParamRefs& out);

 private:
  size_t patch_dim_, num_tokens_, embed_dim_;
  Param w_, b_, pos_;

  Tensor p(Param& par) const { return par.live.empty() ? par.value : par.live; }
};

// Co4 classifier: patch embed -> Co4 layer stack -> mean pool -> linear head.
// With the top-k readout each layer shrinks the token count to its k.
class Co4Model {
 public:
  Co4Model(const Co4Config& layer_cfg, size_t patch_dim, size_t num_classes,
           size_t num_layers, uint64_t seed);

  Tensor forward(const Tensor& patches, Co4Diagnostics* diag = nullptr);
  ParamRefs params();
  const Co4Config& layer_config(size_t i) const { return layers_[i].config(); }
  size_t num_layers() const { return layers_.size(); }

 private:
  PatchEmbed embed_;
  std::vector<Co4Layer> layers_;
  Param head_w_, head_b_;

  Tensor p(Param& par) const { return par.live.empty() ? par.value : par.live; }
};

// ViT baseline: patch embed -> pre-norm MHSA blocks -> final LN -> mean pool
// -> linear head.
class VitModel {
 public:
  VitModel(const VitConfig& cfg, size_t patch_dim, size_t num_classes, uint64_t seed);

  Tensor forward(const Tensor& patches, Rng* dropout_rng = nullptr);
  ParamRefs params();
  const VitConfig& config() const { return cfg_; }

 private:
  VitConfig cfg_;
  PatchEmbed embed_;
  std::vector<MhsaBlock> blocks_;
  Param fin_g_, fin_b_;
  Param head_w_, head_b_;

  Tensor p(Param& par) const { return par.live.empty() ? par.value : par.live; }
};

}  // namespace co4
