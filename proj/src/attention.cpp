#include "co4/attention.hpp"

#include <cmath>

#include "co4/errors.hpp"
#include "co4/ops.hpp"

namespace co4 {

void VitConfig::validate() const {
  if (embed_dim == 0 || num_tokens == 0) throw ConfigError("vit: E and N must be positive");
  if (heads == 0 || embed_dim % heads != 0) {
    throw ConfigError("vit: embed dim must be divisible by heads");
  }
  if (layers == 0) throw ConfigError("vit: layers must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("vit: dropout must be in [0,1)");
}

namespace {

// Inverted dropout driven by an explicit stream; identity when rng is null or
// the rate is zero.
Tensor maybe_dropout(const Tensor& x, double rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0) return x;
  std::vector<double> mask(x.size());
  double keep = 1.0 - rate;
  for (double& m : mask) m = rng->uniform() < keep ? 1.0 / keep : 0.0;
  return ops::mul(x, Tensor::unchecked(x.shape(), std::move(mask)));
}

}  // namespace

MhsaBlock::MhsaBlock(const VitConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  size_t e = cfg_.embed_dim, h = cfg_.hidden();
  auto w_init = [&](std::vector<size_t> shape, uint64_t stream) {
    Rng r = rng.split(stream);
    return ops::randn(std::move(shape), r, 0.0, 0.02);
  };
  ln1_g_ = Param("ln1_g", Tensor::ones({e}));
  ln1_b_ = Param("ln1_b", Tensor::zeros({e}));
  ln2_g_ = Param("ln2_g", Tensor::ones({e}));
  ln2_b_ = Param("ln2_b", Tensor::zeros({e}));
  wq_ = Param("attn_wq", w_init({e, e}, 1));
  wk_ = Param("attn_wk", w_init({e, e}, 2));
  wv_ = Param("attn_wv", w_init({e, e}, 3));
  wo_ = Param("attn_wo", w_init({e, e}, 4));
  bq_ = Param("attn_bq", Tensor::zeros({e}));
  bk_ = Param("attn_bk", Tensor::zeros({e}));
  bv_ = Param("attn_bv", Tensor::zeros({e}));
  bo_ = Param("attn_bo", Tensor::zeros({e}));
  mlp_w1_ = Param("mlp_w1", w_init({e, h}, 5));
  mlp_b1_ = Param("mlp_b1", Tensor::zeros({h}));
  mlp_w2_ = Param("mlp_w2", w_init({h, e}, 6));
  mlp_b2_ = Param("mlp_b2", Tensor::zeros({e}));
}

void MhsaBlock::collect_params(ParamRefs& out) {
  for (Param* p : {&ln1_g_, &ln1_b_, &ln2_g_, &ln2_b_, &wq_, &wk_, &wv_, &wo_, &bq_, &bk_,
                   &bv_, &bo_, &mlp_w1_, &mlp_b1_, &mlp_w2_, &mlp_b2_}) {
    out.push_back(p);
  }
}

Tensor MhsaBlock::attend(const Tensor& xn, Rng* dropout_rng) {
  using namespace ops;
  size_t b = xn.dim(0), n = xn.dim(1), e = xn.dim(2);
  size_t heads = cfg_.heads, dh = e / heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor flat = xn.reshaped({b * n, e});
  Tensor q, k, v;
  {
    MacSectionScope proj(MacSection::kProjection);
    q = add(matmul(flat, p(wq_)), p(bq_));
    k = add(matmul(flat, p(wk_)), p(bk_));
    v = add(matmul(flat, p(wv_)), p(bv_));
  }
  MacSectionScope sec(MacSection::kAttention);
  std::vector<Tensor> batch_outs;
  batch_outs.reserve(b);
  Tensor q3 = q.reshaped({b, n, e}), k3 = k.reshaped({b, n, e}), v3 = v.reshaped({b, n, e});
  for (size_t bi = 0; bi < b; ++bi) {
    Tensor qb = slice_batch(q3, bi), kb = slice_batch(k3, bi), vb = slice_batch(v3, bi);
    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (size_t hh = 0; hh < heads; ++hh) {
      Tensor qh = heads == 1 ? qb : slice_cols(qb, hh * dh, (hh + 1) * dh);
      Tensor kh = heads == 1 ? kb : slice_cols(kb, hh * dh, (hh + 1) * dh);
      Tensor vh = heads == 1 ? vb : slice_cols(vb, hh * dh, (hh + 1) * dh);
      Tensor att = softmax_rows(mul(matmul(qh, transpose(kh)), scale));
      head_outs.push_back(matmul(att, vh));
    }
    batch_outs.push_back(heads == 1 ? head_outs[0] : concat_cols(head_outs));
  }
  Tensor merged = stack_batch(batch_outs).reshaped({b * n, e});
  Tensor out;
  {
    MacSectionScope proj(MacSection::kProjection);
    out = add(matmul(merged, p(wo_)), p(bo_));
  }
  out = maybe_dropout(out, cfg_.dropout, dropout_rng);
  return out.reshaped({b, n, e});
}

Tensor MhsaBlock::forward(const Tensor& x, Rng* dropout_rng) {
  using namespace ops;
  if (x.rank() != 3) throw ShapeError("mhsa: input must be (B, N, E)");
  if (x.dim(2) != cfg_.embed_dim) {
    throw ShapeError("mhsa: embedding dim mismatch, input " + shape_str(x.shape()));
  }
  size_t b = x.dim(0), n = x.dim(1), e = x.dim(2);
  Tensor h = add(x, attend(layer_norm(x, p(ln1_g_), p(ln1_b_)), dropout_rng));
  MacSectionScope sec(MacSection::kReadout);
  Tensor hn = layer_norm(h, p(ln2_g_), p(ln2_b_));
  Tensor flat = hn.reshaped({b * n, e});
  Tensor mid = gelu(add(matmul(flat, p(mlp_w1_)), p(mlp_b1_)));
  mid = maybe_dropout(mid, cfg_.dropout, dropout_rng);
  Tensor out = add(matmul(mid, p(mlp_w2_)), p(mlp_b2_)).reshaped({b, n, e});
  return add(h, out);
}

}  // namespace co4
