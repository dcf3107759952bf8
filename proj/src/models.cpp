#include "co4/models.hpp"

#include "co4/errors.hpp"
#include "co4/ops.hpp"
#include "co4/rng.hpp"

namespace co4 {

PatchEmbed::PatchEmbed(size_t patch_dim, size_t num_tokens, size_t embed_dim, uint64_t seed)
    : patch_dim_(patch_dim), num_tokens_(num_tokens), embed_dim_(embed_dim) {
  Rng rng(seed);
  Rng r1 = rng.split(1), r2 = rng.split(2);
  w_ = Param("embed_w", ops::randn({patch_dim, embed_dim}, r1, 0.0, 0.02));
  b_ = Param("embed_b", Tensor::zeros({embed_dim}));
  pos_ = Param("pos", ops::randn({num_tokens, embed_dim}, r2, 0.0, 0.02));
}

Tensor PatchEmbed::forward(const Tensor& patches) {
  using namespace ops;
  if (patches.rank() != 3 || patches.dim(1) != num_tokens_ || patches.dim(2) != patch_dim_) {
    throw ShapeError("patch embed: expected (B," + std::to_string(num_tokens_) + "," +
                     std::to_string(patch_dim_) + "), got " + shape_str(patches.shape()));
  }
  MacSectionScope sec(MacSection::kProjection);
  size_t b = patches.dim(0);
  Tensor flat = patches.reshaped({b * num_tokens_, patch_dim_});
  Tensor emb = add(matmul(flat, p(w_)), p(b_)).reshaped({b, num_tokens_, embed_dim_});
  return add(emb, p(pos_));
}

void PatchEmbed::collect_params(ParamRefs& out) {
  out.push_back(&w_);
  out.push_back(&b_);
  out.push_back(&pos_);
}

Co4Model::Co4Model(const Co4Config& layer_cfg, size_t patch_dim, size_t num_classes,
                   size_t num_layers, uint64_t seed)
    : embed_(patch_dim, layer_cfg.num_tokens, layer_cfg.embed_dim, seed ^ 0xe5c0ull) {
  if (num_layers == 0) throw ConfigError("co4 model: need at least one layer");
  Rng rng(seed);
  size_t tokens = layer_cfg.num_tokens;
  for (size_t i = 0; i < num_layers; ++i) {
    Co4Config cfg = layer_cfg;
    cfg.num_tokens = tokens;
    if (cfg.num_latents > tokens) cfg.num_latents = 0;
    cfg.k = std::min(cfg.k, tokens);
    layers_.emplace_back(cfg, rng.split(100 + i).next_u64());
    tokens = cfg.readout == ReadoutKind::kTopkAttn ? cfg.k : tokens;
  }
  Rng rh = rng.split(7);
  head_w_ = Param("head_w",
                  ops::randn({layer_cfg.embed_dim, num_classes}, rh, 0.0, 0.02));
  head_b_ = Param("head_b", Tensor::zeros({num_classes}));
}

Tensor Co4Model::forward(const Tensor& patches, Co4Diagnostics* diag) {
  using namespace ops;
  Tensor h = embed_.forward(patches);
  for (size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(h, i + 1 == layers_.size() ? diag : nullptr);
  }
  MacSectionScope sec(MacSection::kReadout);
  Tensor pooled = mean_pool(h);
  return add(matmul(pooled, p(head_w_)), p(head_b_));
}

ParamRefs Co4Model::params() {
  ParamRefs out;
  embed_.collect_params(out);
  for (auto& l : layers_) l.collect_params(out);
  out.push_back(&head_w_);
  out.push_back(&head_b_);
  return out;
}

VitModel::VitModel(const VitConfig& cfg, size_t patch_dim, size_t num_classes, uint64_t seed)
    : cfg_(cfg), embed_(patch_dim, cfg.num_tokens, cfg.embed_dim, seed ^ 0x717ull) {
  cfg_.validate();
  Rng rng(seed);
  for (size_t i = 0; i < cfg_.layers; ++i) {
    blocks_.emplace_back(cfg_, rng.split(200 + i).next_u64());
  }
  fin_g_ = Param("final_ln_g", Tensor::ones({cfg.embed_dim}));
  fin_b_ = Param("final_ln_b", Tensor::zeros({cfg.embed_dim}));
  Rng rh = rng.split(7);
  head_w_ = Param("head_w", ops::randn({cfg.embed_dim, num_classes}, rh, 0.0, 0.02));
  head_b_ = Param("head_b", Tensor::zeros({num_classes}));
}

Tensor VitModel::forward(const Tensor& patches, Rng* dropout_rng) {
  using namespace ops;
  Tensor h = embed_.forward(patches);
  for (auto& blk : blocks_) h = blk.forward(h, dropout_rng);
  MacSectionScope sec(MacSection::kReadout);
  h = layer_norm(h, p(fin_g_), p(fin_b_));
  Tensor pooled = mean_pool(h);
  return add(matmul(pooled, p(head_w_)), p(head_b_));
}

ParamRefs VitModel::params() {
  ParamRefs out;
  embed_.collect_params(out);
  for (auto& blk : blocks_) blk.collect_params(out);
  out.push_back(&fin_g_);
  out.push_back(&fin_b_);
  out.push_back(&head_w_);
  out.push_back(&head_b_);
  return out;
}

}  // namespace co4
