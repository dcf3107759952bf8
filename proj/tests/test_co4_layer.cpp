#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "co4/co4_layer.hpp"
#include "co4/errors.hpp"
#include "co4/ops.hpp"
#include "test_util.hpp"

using namespace co4;
using namespace co4::testutil;

namespace {

Co4Config tiny_cfg() {
  Co4Config cfg;
  cfg.embed_dim = 8;
  cfg.num_tokens = 6;
  cfg.k = 3;
  cfg.alpha_mu = 0.0;
  cfg.iterations = 1;
  return cfg;
}

Tensor S(double v) { return Tensor::scalar(v); }

}  // namespace

TEST_CASE("init_latents: determinism, aliasing, and moment oracle") {
  Co4Config cfg = tiny_cfg();
  cfg.variant = LatentInit::kNormal;
  TokenBatch a, b;
  init_latents(cfg, 99, a);
  init_latents(cfg, 99, b);
  for (size_t i = 0; i < a.ql.size(); ++i) {
    CHECK(a.ql[i] == b.ql[i]);
    CHECK(a.vl[i] == b.vl[i]);
  }

  // Projection init aliases: ql - qx == 0 exactly.
  Co4Config pcfg = tiny_cfg();
  pcfg.variant = LatentInit::kProjection;
  Rng rng(3);
  TokenBatch pb;
  pb.qx = rand_tensor({2, 6, 8}, rng);
  pb.kx = rand_tensor({2, 6, 8}, rng);
  pb.vx = rand_tensor({2, 6, 8}, rng);
  init_latents(pcfg, 1, pb);
  for (size_t i = 0; i < pb.qx.size(); ++i) CHECK(pb.ql[i] - pb.qx[i] == 0.0);

  // Statistical oracle: 1e6 N(0, 0.02^2) draws, |mean| <= 3*sigma/sqrt(n).
  Co4Config big = tiny_cfg();
  big.variant = LatentInit::kNormal;
  big.embed_dim = 1000;
  big.num_tokens = 1000;
  TokenBatch bb;
  init_latents(big, 7, bb);
  double mean = std::accumulate(bb.ql.data(), bb.ql.data() + bb.ql.size(), 0.0) /
                static_cast<double>(bb.ql.size());
  CHECK(std::abs(mean) <= 3.0 * 0.02 / std::sqrt(1e6));
}

TEST_CASE("normal-init modulation: scalar evaluations") {
  TokenBatch b;
  // mu = 0, Qx = Kx = 0 -> Qm = 0 regardless of Ql.
  b.qx = S(0.0);
  b.kx = S(0.0);
  b.vx = S(0.0);
  b.ql = S(123.0);
  b.kl = S(-5.0);
  b.vl = S(9.0);
  ModOutputs m = modulate_normal_init(b, nullptr);
  CHECK(m.qm.item() == 0.0);

  // Qx=1, Ql=1, Kx=1 -> Qm = 1 + 1 = 2.
  b.qx = S(1.0);
  b.kx = S(1.0);
  b.ql = S(1.0);
  b.kl = S(0.0);
  m = modulate_normal_init(b, nullptr);
  CHECK(m.qm.item() == doctest::Approx(2.0));

  // Vx=1, Qm=1, Km=1, Vl=0 -> Vm = 1 + 2 + 1 = 4. Inputs are chosen so the
  // intermediate Qm and Km both evaluate to 1: Qx=1, Ql=0, Kx=1, Kl=0.
  b.qx = S(1.0);
  b.kx = S(1.0);
  b.vx = S(1.0);
  b.ql = S(0.0);
  b.kl = S(0.0);
  b.vl = S(0.0);
  m = modulate_normal_init(b, nullptr);
  CHECK(m.qm.item() == doctest::Approx(1.0));
  CHECK(m.km.item() == doctest::Approx(1.0));
  CHECK(m.vm.item() == doctest::Approx(4.0));
}

TEST_CASE("projection-init modulation: pass-through, scalar values, cap") {
  TokenBatch b;
  // Kx = 0 -> Qm = Ql exactly.
  Rng rng(5);
  b.qx = rand_tensor({2, 3, 4}, rng);
  b.kx = Tensor::zeros({2, 3, 4});
  b.vx = rand_tensor({2, 3, 4}, rng);
  b.ql = b.qx;
  b.kl = b.kx;
  b.vl = b.vx;
  ModOutputs m = modulate_projection_init(b, 6.0);
  for (size_t i = 0; i < b.ql.size(); ++i) CHECK(m.qm[i] == b.ql[i]);

  // Vl=1, Qm=1, Km=1 -> Vm = min(1+2+2, 6) = 5.
  TokenBatch s;
  s.qx = S(0.0);
  s.kx = S(0.0);
  s.vx = S(1.0);
  s.ql = S(1.0);  // Qm = 1 + 1*0 = 1
  s.kl = S(1.0);  // Km = 1 + 1*0 = 1
  s.vl = S(1.0);
  m = modulate_projection_init(s, 6.0);
  CHECK(m.vm.item() == doctest::Approx(5.0));

  // Vl=2, Qm=2, Km=2 -> raw 20 -> capped at 6.
  s.qx = S(1.0);
  s.kx = S(1.0);
  s.ql = S(1.0);  // Qm = 1 + 1 = 2
  s.kl = S(1.0);  // Km = 1 + 1 = 2
  s.vl = S(2.0);
  m = modulate_projection_init(s, 6.0);
  CHECK(m.qm.item() == doctest::Approx(2.0));
  CHECK(m.km.item() == doctest::Approx(2.0));
  CHECK(m.vm.item() == doctest::Approx(6.0));
}

TEST_CASE("belief update: fixed points and direct evaluation") {
  BeliefState bs;
  bs.mu = S(1.0);
  bs.alpha = 0.0;
  ModOutputs m;
  m.qm = S(3.0);
  m.km = S(0.0);
  m.vm = S(0.0);
  // alpha = 0 -> unchanged.
  BeliefState r = update_belief(bs, m, S(1.0), S(0.0), S(0.0));
  CHECK(r.mu.item() == 1.0);

  // mu=1, alpha=0.1, E=2 -> mu' = 1.2.
  bs.alpha = 0.1;
  r = update_belief(bs, m, S(1.0), S(0.0), S(0.0));
  CHECK(r.mu.item() == doctest::Approx(1.2));

  // Zero prediction error -> unchanged.
  m.qm = S(5.0);
  m.km = S(-2.0);
  m.vm = S(0.5);
  r = update_belief(bs, m, S(5.0), S(-2.0), S(0.5));
  CHECK(r.mu.item() == 1.0);
}

TEST_CASE("topk_select: hand cases, ties, sort oracle, monotone invariance") {
  Tensor s({1, 3}, {3, 1, 2});
  auto idx = topk_select(s, 2);
  CHECK(idx[0] == std::vector<size_t>{0, 2});

  Tensor ties({1, 4}, {7, 7, 7, 7});
  idx = topk_select(ties, 2);
  CHECK(idx[0] == std::vector<size_t>{0, 1});

  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    size_t n = 2 + rng.below(40);
    size_t k = 1 + rng.below(n);
    Tensor row = rand_tensor({1, n}, rng, -5, 5);
    auto got = topk_select(row, k)[0];
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return row[a] > row[b]; });
    std::vector<size_t> expect(order.begin(), order.begin() + k);
    std::sort(expect.begin(), expect.end());
    CHECK(got == expect);

    // Strictly monotone transforms leave the selected set unchanged.
    std::vector<double> t1(n), t2(n);
    for (size_t i = 0; i < n; ++i) {
      t1[i] = 2.0 * row[i] + 1.0;
      t2[i] = row[i] * row[i] * row[i];  // x^3 is strictly monotone
    }
    CHECK(topk_select(Tensor({1, n}, t1), k)[0] == got);
    CHECK(topk_select(Tensor({1, n}, t2), k)[0] == got);
  }
}

TEST_CASE("forward: k = N selects every token (degenerate top-k)") {
  Co4Config cfg = tiny_cfg();
  cfg.readout = ReadoutKind::kTopkAttn;
  cfg.k = cfg.num_tokens;
  Co4Layer layer(cfg, 1);
  Rng rng(2);
  Tensor x = rand_tensor({2, cfg.num_tokens, cfg.embed_dim}, rng);
  Co4Diagnostics diag;
  Tensor out = layer.forward(x, &diag);
  CHECK(out.shape() == std::vector<size_t>{2, cfg.num_tokens, cfg.embed_dim});
  std::vector<size_t> all(cfg.num_tokens);
  std::iota(all.begin(), all.end(), 0);
  for (const auto& sel : diag.selected) CHECK(sel == all);
}

TEST_CASE("forward: invalid k raises ConfigError") {
  Co4Config cfg = tiny_cfg();
  cfg.k = cfg.num_tokens + 1;
  CHECK_THROWS_AS(Co4Layer(cfg, 1), ConfigError);
  Co4Config strict = tiny_cfg();
  strict.strict_k = true;
  strict.k = 4;  // ceil(sqrt(6)) = 3
  CHECK_THROWS_AS(Co4Layer(strict, 1), ConfigError);
}

TEST_CASE("forward: single-step mode ignores mu_init bitwise") {
  Co4Config a = tiny_cfg();
  a.variant = LatentInit::kNormal;
  a.iterations = 1;
  a.alpha_mu = 0.0;
  a.mu_init = 0.0;
  Co4Config b = a;
  b.mu_init = 7.5;  // must not be read in single-step mode
  Co4Layer la(a, 11), lb(b, 11);
  Rng rng(4);
  Tensor x = rand_tensor({2, a.num_tokens, a.embed_dim}, rng);
  Tensor ya = la.forward(x), yb = lb.forward(x);
  for (size_t i = 0; i < ya.size(); ++i) CHECK(ya[i] == yb[i]);
}

TEST_CASE("forward: iteration count matters only when alpha_mu > 0") {
  auto run = [](size_t iters, double alpha) {
    Co4Config cfg = tiny_cfg();
    cfg.variant = LatentInit::kNormal;
    cfg.iterations = iters;
    cfg.alpha_mu = alpha;
    cfg.mu_init = 1.0;  // nonzero so the multiplicative update can move
    Co4Layer layer(cfg, 21);
    Rng rng(6);
    Tensor x = rand_tensor({1, cfg.num_tokens, cfg.embed_dim}, rng);
    return layer.forward(x);
  };
  Tensor a1 = run(1, 0.1), a3 = run(3, 0.1);
  double diff = 0.0;
  for (size_t i = 0; i < a1.size(); ++i) diff = std::max(diff, std::abs(a1[i] - a3[i]));
  CHECK(diff > 0.0);

  Tensor b1 = run(1, 0.0), b3 = run(3, 0.0);
  for (size_t i = 0; i < b1.size(); ++i) CHECK(b1[i] == b3[i]);
}

TEST_CASE("gradient flow: projection init is evidence-anchored") {
  Co4Config cfg = tiny_cfg();
  cfg.variant = LatentInit::kProjection;
  cfg.readout = ReadoutKind::kMlpOnly;
  Co4Layer layer(cfg, 3);
  ParamRefs params;
  layer.collect_params(params);
  // Zero the context projections (Q and K streams).
  for (Param* p : params) {
    if (p->name == "wq" || p->name == "wk" || p->name == "bq" || p->name == "bk") {
      p->value = Tensor::zeros(p->value.shape());
    }
  }
  Tape tape;
  TapeScope scope(tape);
  for (Param* p : params) p->prepare(&tape);
  Rng rng(8);
  Tensor x = rand_tensor({2, cfg.num_tokens, cfg.embed_dim}, rng, -2, 2);
  Tensor out = layer.forward(x);
  tape.backward(ops::sum_all(ops::mul(out, out)));
  double wv_grad_norm = 0.0;
  for (Param* p : params) {
    if (p->name == "wv") {
      auto g = tape.try_grad(p->live);
      REQUIRE(g.has_value());
      for (size_t i = 0; i < g->size(); ++i) wv_grad_norm += (*g)[i] * (*g)[i];
    }
    p->live = Tensor();
  }
  CHECK(wv_grad_norm > 0.0);
}

TEST_CASE("gradient flow: normal init with zero context is gated shut") {
  Co4Config cfg = tiny_cfg();
  cfg.variant = LatentInit::kNormal;
  cfg.readout = ReadoutKind::kMlpOnly;
  Co4Layer layer(cfg, 3);
  ParamRefs params;
  layer.collect_params(params);
  for (Param* p : params) {
    if (p->name == "wq" || p->name == "wk" || p->name == "wv" || p->name == "bq" ||
        p->name == "bk" || p->name == "bv") {
      p->value = Tensor::zeros(p->value.shape());
    }
  }
  Tape tape;
  TapeScope scope(tape);
  for (Param* p : params) p->prepare(&tape);
  Rng rng(9);
  Tensor x = rand_tensor({2, cfg.num_tokens, cfg.embed_dim}, rng, -2, 2);
  Tensor out = layer.forward(x);
  tape.backward(ops::sum_all(ops::mul(out, out)));
  for (Param* p : params) {
    if (p->name == "lat_q" || p->name == "lat_k" || p->name == "lat_v") {
      auto g = tape.try_grad(p->live);
      if (g.has_value()) {
        for (size_t i = 0; i < g->size(); ++i) CHECK((*g)[i] == 0.0);
      }
    }
    p->live = Tensor();
  }
}

TEST_CASE("mlp readout allocates no NxN intermediate") {
  Co4Config cfg;
  cfg.embed_dim = 16;
  cfg.num_tokens = 256;
  cfg.readout = ReadoutKind::kMlpOnly;
  cfg.alpha_mu = 0.0;
  Co4Layer layer(cfg, 1);
  Rng rng(2);
  Tensor x = rand_tensor({1, 256, 16}, rng);
  ops::op_stats().reset();
  layer.forward(x);
  uint64_t biggest = ops::op_stats().max_alloc_elems;
  CHECK(biggest < 256ull * 256ull);
}

TEST_CASE("forward outputs stay finite for |x| <= 10") {
  for (LatentInit v : {LatentInit::kNormal, LatentInit::kProjection}) {
    for (ReadoutKind r : {ReadoutKind::kMlpOnly, ReadoutKind::kTopkAttn}) {
      Co4Config cfg = tiny_cfg();
      cfg.variant = v;
      cfg.readout = r;
      Co4Layer layer(cfg, 5);
      Rng rng(13);
      Tensor x = rand_tensor({2, cfg.num_tokens, cfg.embed_dim}, rng, -10, 10);
      Tensor out = layer.forward(x);
      CHECK(out.all_finite());
    }
  }
}

TEST_CASE("instrumented op count is affine in N (fixed E, k)") {
  for (ReadoutKind r : {ReadoutKind::kMlpOnly, ReadoutKind::kTopkAttn}) {
    std::vector<double> xs, ys;
    for (size_t n : {64, 128, 256, 512, 1024, 2048, 4096}) {
      Co4Config cfg;
      cfg.embed_dim = 32;
      cfg.num_tokens = n;
      cfg.k = 8;
      cfg.readout = r;
      cfg.alpha_mu = 0.0;
      Co4Layer layer(cfg, 1);
      Rng rng(1);
      Tensor x = rand_tensor({1, n, 32}, rng);
      ops::op_stats().reset();
      layer.forward(x);
      xs.push_back(static_cast<double>(n));
      ys.push_back(static_cast<double>(ops::op_stats().total()));
    }
    double n = static_cast<double>(xs.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
      sx += xs[i];
      sy += ys[i];
      sxx += xs[i] * xs[i];
      sxy += xs[i] * ys[i];
    }
    double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    double intercept = (sy - slope * sx) / n;
    double ss_res = 0, ss_tot = 0, mean = sy / n;
    for (size_t i = 0; i < xs.size(); ++i) {
      double pred = slope * xs[i] + intercept;
      ss_res += (ys[i] - pred) * (ys[i] - pred);
      ss_tot += (ys[i] - mean) * (ys[i] - mean);
    }
    double r2 = 1.0 - ss_res / ss_tot;
    CHECK(r2 > 0.999);
  }
}

TEST_CASE("reduced latent mode (l < N) produces (B,l,E) and stays finite") {
  Co4Config cfg;
  cfg.embed_dim = 8;
  cfg.num_tokens = 12;
  cfg.num_latents = 4;
  cfg.variant = LatentInit::kNormal;
  cfg.readout = ReadoutKind::kMlpOnly;
  cfg.alpha_mu = 0.0;
  Co4Layer layer(cfg, 9);
  Rng rng(3);
  Tensor x = rand_tensor({2, 12, 8}, rng);
  Tensor out = layer.forward(x);
  CHECK(out.shape() == std::vector<size_t>{2, 4, 8});
  CHECK(out.all_finite());

  // Gradients flow through the reduced path.
  ParamRefs params;
  layer.collect_params(params);
  Tape tape;
  TapeScope scope(tape);
  for (Param* p : params) p->prepare(&tape);
  Tensor out2 = layer.forward(x);
  tape.backward(ops::sum_all(ops::mul(out2, out2)));
  bool latent_grad = false;
  for (Param* p : params) {
    if (p->name == "lat_q" && tape.try_grad(p->live).has_value()) latent_grad = true;
    p->live = Tensor();
  }
  CHECK(latent_grad);
}

TEST_CASE("multi-head split keeps shapes and stays finite") {
  Co4Config cfg = tiny_cfg();
  cfg.embed_dim = 8;
  cfg.heads = 4;
  cfg.readout = ReadoutKind::kTopkAttn;
  Co4Layer layer(cfg, 2);
  Rng rng(10);
  Tensor x = rand_tensor({2, cfg.num_tokens, 8}, rng);
  Tensor out = layer.forward(x);
  CHECK(out.shape() == std::vector<size_t>{2, cfg.k, 8});
  CHECK(out.all_finite());
}

TEST_CASE("full-layer gradients match finite differences (both variants)") {
  for (LatentInit v : {LatentInit::kNormal, LatentInit::kProjection}) {
    Co4Config cfg;
    cfg.embed_dim = 4;
    cfg.num_tokens = 4;
    cfg.k = 2;
    cfg.variant = v;
    cfg.readout = ReadoutKind::kMlpOnly;
    cfg.alpha_mu = 0.0;
    Co4Layer layer(cfg, 31);
    ParamRefs params;
    layer.collect_params(params);
    Rng rng(14);
    Tensor x = rand_tensor({2, 4, 4}, rng, -1.5, 1.5);
    std::vector<Tensor> values;
    for (Param* p : params) values.push_back(p->value);
    auto f = [&](const std::vector<Tensor>& in) {
      for (size_t i = 0; i < params.size(); ++i) params[i]->live = in[i];
      Tensor out = layer.forward(x);
      for (Param* p : params) p->live = Tensor();
      return ops::mean_all(ops::mul(out, out));
    };
    double err = fd_max_rel_err(values, f);
    CHECK(err < 1e-5);
  }
}
