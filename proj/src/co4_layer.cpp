#include "co4/co4_layer.hpp"

#include <algorithm>
#include <cmath>

#include "co4/errors.hpp"
#include "co4/ops.hpp"
#include "co4/rng.hpp"

namespace co4 {

ModEquationSet equation_set_from_id(size_t id) {
  switch (id) {
    case 0: return ModEquationSet::kCanonical;
    case 1: return ModEquationSet::kSelfContext;
    case 2: return ModEquationSet::kLatentAnchored;
    case 3: return ModEquationSet::kIdentityV;
    case 4: return ModEquationSet::kLinearV;
  }
  throw ConfigError("unknown modulation-equation set id " + std::to_string(id));
}

std::string to_string(ModEquationSet eq) {
  switch (eq) {
    case ModEquationSet::kCanonical: return "canonical";
    case ModEquationSet::kSelfContext: return "self_context";
    case ModEquationSet::kLatentAnchored: return "latent_anchored";
    case ModEquationSet::kIdentityV: return "identity_v";
    case ModEquationSet::kLinearV: return "linear_v";
  }
  return "?";
}

void Co4Config::validate() const {
  if (embed_dim == 0 || num_tokens == 0) throw ConfigError("co4: E and N must be positive");
  if (k == 0 || k > num_tokens) {
    throw ConfigError("co4: k must satisfy 1 <= k <= N (k=" + std::to_string(k) +
                      ", N=" + std::to_string(num_tokens) + ")");
  }
  if (strict_k) {
    size_t cap = static_cast<size_t>(std::ceil(std::sqrt(static_cast<double>(num_tokens))));
    if (k > cap) {
      throw ConfigError("co4: strict_k requires k <= ceil(sqrt(N)) = " + std::to_string(cap));
    }
  }
  if (latents() > num_tokens) throw ConfigError("co4: l must be <= N");
  if (iterations < 1) throw ConfigError("co4: iterations must be >= 1");
  if (alpha_mu < 0.0) throw ConfigError("co4: alpha_mu must be >= 0");
  if (relu_cap <= 0.0) throw ConfigError("co4: relu_cap must be > 0");
  if (heads == 0 || embed_dim % heads != 0) {
    throw ConfigError("co4: heads must divide the embedding dim");
  }
}

void init_latents(const Co4Config& cfg, uint64_t rng_seed, TokenBatch& batch) {
  if (cfg.variant == LatentInit::kProjection) {
    batch.ql = batch.qx;
    batch.kl = batch.kx;
    batch.vl = batch.vx;
    return;
  }
  Rng rng(rng_seed);
  size_t l = cfg.latents(), e = cfg.embed_dim;
  Rng r1 = rng.split(1), r2 = rng.split(2), r3 = rng.split(3);
  batch.ql = ops::randn({l, e}, r1, 0.0, 0.02);
  batch.kl = ops::randn({l, e}, r2, 0.0, 0.02);
  batch.vl = ops::randn({l, e}, r3, 0.0, 0.02);
}

namespace {

// Canonical value law: Vx^2 + 2Vx + (Qm+mu)(Km+mu)(1 + |Vl|).
Tensor value_law(const Tensor& vx, const Tensor& vl, const Tensor& qm, const Tensor& km,
                 const Tensor* mu) {
  using namespace ops;
  Tensor fc = add(mul(vx, vx), mul(vx, 2.0));
  Tensor q = mu ? add(qm, *mu) : qm;
  Tensor kk = mu ? add(km, *mu) : km;
  return add(fc, mul(mul(q, kk), add(abs(vl), 1.0)));
}

}  // namespace

ModOutputs modulate_normal_init(const TokenBatch& batch, const Tensor* mu, ModEquationSet eq) {
  using namespace ops;
  const Tensor &qx = batch.qx, &kx = batch.kx, &vx = batch.vx;
  const Tensor &ql = batch.ql, &kl = batch.kl, &vl = batch.vl;
  ModOutputs out;
  switch (eq) {
    case ModEquationSet::kCanonical: {
      // Qm = (Qx+mu) + Ql(Kx+mu), Km = (Kx+mu) + Kl(Qx+mu).
      Tensor c_q = mu ? add(qx, *mu) : qx;
      Tensor c_k = mu ? add(kx, *mu) : kx;
      out.qm = add(c_q, mul(c_k, ql));
      out.km = add(c_k, mul(c_q, kl));
      out.vm = value_law(vx, vl, out.qm, out.km, mu);
      return out;
    }
    case ModEquationSet::kSelfContext:
      out.qm = add(mul(qx, ql), ql);
      out.km = add(mul(kx, kl), kl);
      out.vm = value_law(vx, vl, out.qm, out.km, nullptr);
      return out;
    case ModEquationSet::kLatentAnchored:
      out.qm = add(mul(kx, ql), ql);
      out.km = add(mul(qx, kl), kl);
      out.vm = value_law(vx, vl, out.qm, out.km, nullptr);
      return out;
    case ModEquationSet::kIdentityV:
      out.qm = add(qx, mul(kx, ql));
      out.km = add(kx, mul(qx, kl));
      out.vm = vx;
      return out;
    case ModEquationSet::kLinearV:
      out.qm = add(qx, mul(kx, ql));
      out.km = add(kx, mul(qx, kl));
      out.vm = add(vx, mul(mul(out.qm, out.km), vl));
      return out;
  }
  throw ConfigError("modulate_normal_init: unknown equation set");
}

ModOutputs modulate_projection_init(const TokenBatch& batch, double relu_cap) {
  using namespace ops;
  const Tensor &qx = batch.qx, &kx = batch.kx;
  const Tensor &ql = batch.ql, &kl = batch.kl, &vl = batch.vl;
  ModOutputs out;
  out.qm = add(ql, mul(ql, kx));
  out.km = add(kl, mul(kl, qx));
  Tensor fr = add(mul(vl, vl), mul(vl, 2.0));
  Tensor raw = add(fr, mul(mul(out.qm, out.km), add(abs(vl), 1.0)));
  out.vm = relu_alpha(raw, relu_cap);
  return out;
}

BeliefState update_belief(const BeliefState& state, const ModOutputs& m, const Tensor& ql,
                          const Tensor& kl, const Tensor& vl, double clamp_abs) {
  using namespace ops;
  Tensor eq = abs(sub(m.qm, ql));
  Tensor ek = abs(sub(m.km, kl));
  Tensor ev = abs(sub(m.vm, vl));
  Tensor err = add(add(eq, ek), ev);
  if (!err.all_finite()) throw NumericError("update_belief: non-finite prediction error");
  if (err.rank() == 3) err = mean_axis0(err);  // (B,l,E) -> (l,E)
  Tensor gain = add(mul(err, state.alpha), 1.0);
  BeliefState next;
  next.alpha = state.alpha;
  next.mu = clamp(mul(state.mu, gain), -clamp_abs, clamp_abs);
  return next;
}

std::vector<std::vector<size_t>> topk_select(const Tensor& scores, size_t k) {
  if (scores.rank() != 2) throw ShapeError("topk_select: scores must be (B, N)");
  size_t b = scores.dim(0), n = scores.dim(1);
  if (k == 0 || k > n) throw ShapeError("topk_select: need 1 <= k <= N");
  uint64_t compares = 0;
  std::vector<std::vector<size_t>> result(b);
  for (size_t bi = 0; bi < b; ++bi) {
    const double* s = scores.data() + bi * n;
    // `better` = larger score, ties toward the lower index.
    auto better = [&](size_t i, size_t j) {
      ++compares;
      if (s[i] != s[j]) return s[i] > s[j];
      return i < j;
    };
    // Heap with the worst kept index at the root.
    std::vector<size_t> heap(k);
    for (size_t i = 0; i < k; ++i) heap[i] = i;
    auto sift_down = [&](size_t p) {
      for (;;) {
        size_t c1 = 2 * p + 1, c2 = 2 * p + 2;
        if (c1 >= k) break;
        size_t worst = c1;
        if (c2 < k && better(heap[c1], heap[c2])) worst = c2;
        if (better(heap[worst], heap[p])) break;
        std::swap(heap[p], heap[worst]);
        p = worst;
      }
    };
    if (k > 1) {
      for (size_t p = k / 2; p-- > 0;) sift_down(p);
    }
    for (size_t i = k; i < n; ++i) {
      if (better(i, heap[0])) {
        heap[0] = i;
        sift_down(0);
      }
    }
    std::sort(heap.begin(), heap.end());
    result[bi] = std::move(heap);
  }
  ops::count_topk_compares(compares);
  return result;
}

// ---------------------------------------------------------------------------
// Co4Layer
// ---------------------------------------------------------------------------

Co4Layer::Co4Layer(const Co4Config& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  size_t e = cfg_.embed_dim, l = cfg_.latents(), h = cfg_.hidden();
  auto w_init = [&](std::vector<size_t> shape, uint64_t stream) {
    Rng r = rng.split(stream);
    return ops::randn(std::move(shape), r, 0.0, 0.02);
  };
  wq_ = Param("wq", w_init({e, e}, 1));
  wk_ = Param("wk", w_init({e, e}, 2));
  wv_ = Param("wv", w_init({e, e}, 3));
  bq_ = Param("bq", Tensor::zeros({e}));
  bk_ = Param("bk", Tensor::zeros({e}));
  bv_ = Param("bv", Tensor::zeros({e}));
  if (cfg_.variant == LatentInit::kNormal) {
    lat_q_ = Param("lat_q", w_init({l, e}, 4));
    lat_k_ = Param("lat_k", w_init({l, e}, 5));
    lat_v_ = Param("lat_v", w_init({l, e}, 6));
  }
  if (cfg_.readout == ReadoutKind::kMlpOnly) {
    mlp_w1_ = Param("mlp_w1", w_init({e, h}, 7));
    mlp_b1_ = Param("mlp_b1", Tensor::zeros({h}));
    mlp_w2_ = Param("mlp_w2", w_init({h, e}, 8));
    mlp_b2_ = Param("mlp_b2", Tensor::zeros({e}));
  }
}

void Co4Layer::collect_params(ParamRefs& out) {
  out.push_back(&wq_);
  out.push_back(&wk_);
  out.push_back(&wv_);
  out.push_back(&bq_);
  out.push_back(&bk_);
  out.push_back(&bv_);
  if (cfg_.variant == LatentInit::kNormal) {
    out.push_back(&lat_q_);
    out.push_back(&lat_k_);
    out.push_back(&lat_v_);
  }
  if (cfg_.readout == ReadoutKind::kMlpOnly) {
    out.push_back(&mlp_w1_);
    out.push_back(&mlp_b1_);
    out.push_back(&mlp_w2_);
    out.push_back(&mlp_b2_);
  }
}

Tensor Co4Layer::param_tensor(Param& p) const { return p.live.empty() ? p.value : p.live; }

TokenBatch Co4Layer::project(const Tensor& x) {
  using namespace ops;
  if (x.rank() != 3) throw ShapeError("co4: input must be (B, N, E)");
  size_t b = x.dim(0), n = x.dim(1), e = x.dim(2);
  if (n != cfg_.num_tokens || e != cfg_.embed_dim) {
    throw ShapeError("co4: input " + shape_str(x.shape()) + " does not match config (N=" +
                     std::to_string(cfg_.num_tokens) +
                     ", E=" + std::to_string(cfg_.embed_dim) + ")");
  }
  MacSectionScope sec(MacSection::kProjection);
  Tensor flat = x.reshaped({b * n, e});
  TokenBatch batch;
  batch.x = x;
  batch.qx = add(matmul(flat, param_tensor(wq_)), param_tensor(bq_)).reshaped({b, n, e});
  batch.kx = add(matmul(flat, param_tensor(wk_)), param_tensor(bk_)).reshaped({b, n, e});
  batch.vx = add(matmul(flat, param_tensor(wv_)), param_tensor(bv_)).reshaped({b, n, e});
  return batch;
}

ModOutputs Co4Layer::modulate(const TokenBatch& batch) const {
  if (cfg_.variant == LatentInit::kProjection) {
    return modulate_projection_init(batch, cfg_.relu_cap);
  }
  return modulate_normal_init(batch, nullptr, cfg_.eq_set);
}

namespace {

// Reduced-latent mode (l < N): each latent row is broadcast against the token
// axis, the canonical law is applied in the expanded space, and the result is
// mean-reduced over tokens. Cost is l*N*E.
ModOutputs modulate_reduced(const TokenBatch& batch, const Tensor* mu, ModEquationSet eq) {
  using namespace ops;
  size_t l = batch.ql.dim(0), e = batch.ql.dim(1);
  std::vector<Tensor> q_rows, k_rows, v_rows;
  q_rows.reserve(l);
  k_rows.reserve(l);
  v_rows.reserve(l);
  for (size_t j = 0; j < l; ++j) {
    TokenBatch slice = batch;
    slice.ql = gather_rows(batch.ql, {j}).reshaped({e});
    slice.kl = gather_rows(batch.kl, {j}).reshaped({e});
    slice.vl = gather_rows(batch.vl, {j}).reshaped({e});
    Tensor mu_row;
    const Tensor* mu_ptr = nullptr;
    if (mu) {
      mu_row = gather_rows(*mu, {j}).reshaped({e});
      mu_ptr = &mu_row;
    }
    ModOutputs mo = modulate_normal_init(slice, mu_ptr, eq);
    q_rows.push_back(mean_pool(mo.qm));  // (B,N,E) -> (B,E)
    k_rows.push_back(mean_pool(mo.km));
    v_rows.push_back(mean_pool(mo.vm));
  }
  // Assemble (B, l, E) from l tensors of (B, E).
  auto assemble = [&](std::vector<Tensor>& rows) {
    size_t b = rows[0].dim(0);
    std::vector<Tensor> per_batch;
    per_batch.reserve(b);
    for (size_t bi = 0; bi < b; ++bi) {
      std::vector<Tensor> items;
      items.reserve(l);
      for (size_t j = 0; j < l; ++j) {
        items.push_back(slice_batch(rows[j], bi).reshaped({1, e}));
      }
      per_batch.push_back(stack_batch(items).reshaped({l, e}));
    }
    return stack_batch(per_batch);
  };
  ModOutputs out;
  out.qm = assemble(q_rows);
  out.km = assemble(k_rows);
  out.vm = assemble(v_rows);
  return out;
}

}  // namespace

Tensor Co4Layer::forward(const Tensor& x, Co4Diagnostics* diag) {
  using namespace ops;
  cfg_.validate();
  TokenBatch batch = project(x);
  size_t b = x.dim(0), e = cfg_.embed_dim, l = cfg_.latents();

  if (cfg_.variant == LatentInit::kProjection) {
    batch.ql = batch.qx;
    batch.kl = batch.kx;
    batch.vl = batch.vx;
  } else {
    batch.ql = param_tensor(lat_q_);
    batch.kl = param_tensor(lat_k_);
    batch.vl = param_tensor(lat_v_);
  }

  ModOutputs m;
  BeliefState belief;
  // The belief state only has dynamics through alpha (Eq.-1-style
  // multiplicative update), so alpha_mu == 0 IS the "without mu" single-step
  // mode for any iteration count: mu is never read and the loop is a fixed
  // point. With alpha_mu > 0, mu starts at mu_init and recurs (mu_init = 0
  // stays at the update's absorbing fixed point).
  bool use_mu = cfg_.alpha_mu > 0.0;
  bool reduced = (cfg_.variant == LatentInit::kNormal && l != cfg_.num_tokens);
  {
    MacSectionScope sec(MacSection::kModulation);
    if (cfg_.variant == LatentInit::kProjection) {
      // This variant's laws carry no mu term; iterating is a fixed point.
      m = modulate_projection_init(batch, cfg_.relu_cap);
      if (diag && use_mu) {
        belief.mu = Tensor::full({cfg_.num_tokens, e}, cfg_.mu_init);
        belief.alpha = cfg_.alpha_mu;
        belief = update_belief(belief, m, batch.ql, batch.kl, batch.vl, cfg_.mu_clamp);
      }
    } else if (!use_mu) {
      m = reduced ? modulate_reduced(batch, nullptr, cfg_.eq_set)
                  : modulate_normal_init(batch, nullptr, cfg_.eq_set);
    } else {
      belief.mu = Tensor::full({l, e}, cfg_.mu_init);
      belief.alpha = cfg_.alpha_mu;
      for (size_t it = 0; it < cfg_.iterations; ++it) {
        m = reduced ? modulate_reduced(batch, &belief.mu, cfg_.eq_set)
                    : modulate_normal_init(batch, &belief.mu, cfg_.eq_set);
        belief = update_belief(belief, m, batch.ql, batch.kl, batch.vl, cfg_.mu_clamp);
      }
    }
  }

  size_t rows = reduced ? l : cfg_.num_tokens;

  if (diag) {
    auto macc = [](const Tensor& t) {
      double s = 0.0;
      for (size_t i = 0; i < t.size(); ++i) s += std::abs(t[i]);
      return s / static_cast<double>(t.size());
    };
    double r_abs = (macc(batch.ql) + macc(batch.kl) + macc(batch.vl)) / 3.0;
    double c_abs = (macc(batch.qx) + macc(batch.kx) + macc(batch.vx)) / 3.0;
    diag->regime =
        classify_regime(Tensor::scalar(r_abs), Tensor::scalar(c_abs), cfg_.thresholds);
    diag->final_mu = belief.mu;
  }

  if (cfg_.readout == ReadoutKind::kMlpOnly) {
    MacSectionScope sec(MacSection::kReadout);
    Tensor flat = m.vm.reshaped({b * rows, e});
    Tensor h = gelu(add(matmul(flat, param_tensor(mlp_w1_)), param_tensor(mlp_b1_)));
    Tensor out = add(matmul(h, param_tensor(mlp_w2_)), param_tensor(mlp_b2_));
    if (diag) diag->token_scores.assign(b, {});
    return out.reshaped({b, rows, e});
  }

  // Top-k attention readout: score tokens, select, attend among the selected.
  size_t kk = cfg_.k;
  std::vector<double> score_data(b * rows, 0.0);
  {
    MacSectionScope sec(MacSection::kTopK);
    const double* vm = m.vm.data();
    const double* qm = m.qm.data();
    const double* km = m.km.data();
    for (size_t bi = 0; bi < b; ++bi) {
      for (size_t t = 0; t < rows; ++t) {
        const size_t off = (bi * rows + t) * e;
        double acc = 0.0;
        if (cfg_.score == TopkScore::kVmNorm) {
          for (size_t j = 0; j < e; ++j) acc += vm[off + j] * vm[off + j];
          acc = std::sqrt(acc);
        } else {
          for (size_t j = 0; j < e; ++j) acc += qm[off + j] * km[off + j];
          acc = std::abs(acc);
        }
        score_data[bi * rows + t] = acc;
      }
    }
    op_stats().macs[static_cast<size_t>(MacSection::kTopK)] +=
        static_cast<uint64_t>(b) * rows * e;
  }
  Tensor scores = Tensor::unchecked({b, rows}, score_data);
  auto selected = topk_select(scores, kk);
  if (diag) {
    diag->token_scores.resize(b);
    for (size_t bi = 0; bi < b; ++bi) {
      diag->token_scores[bi].assign(score_data.begin() + bi * rows,
                                    score_data.begin() + (bi + 1) * rows);
    }
    diag->selected = selected;
  }

  MacSectionScope sec(MacSection::kAttention);
  size_t heads = cfg_.heads, dh = e / heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(b);
  for (size_t bi = 0; bi < b; ++bi) {
    Tensor qb = gather_rows(slice_batch(m.qm, bi), selected[bi]);
    Tensor kb = gather_rows(slice_batch(m.km, bi), selected[bi]);
    Tensor vb = gather_rows(slice_batch(m.vm, bi), selected[bi]);
    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (size_t h = 0; h < heads; ++h) {
      Tensor qh = heads == 1 ? qb : slice_cols(qb, h * dh, (h + 1) * dh);
      Tensor kh = heads == 1 ? kb : slice_cols(kb, h * dh, (h + 1) * dh);
      Tensor vh = heads == 1 ? vb : slice_cols(vb, h * dh, (h + 1) * dh);
      Tensor att = softmax_rows(mul(matmul(qh, transpose(kh)), scale));
      head_outs.push_back(matmul(att, vh));
    }
    outs.push_back(heads == 1 ? head_outs[0] : concat_cols(head_outs));
  }
  return stack_batch(outs);
}

}  // namespace co4
