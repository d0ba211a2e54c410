#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "dcs/backbone.hpp"
#include "dcs/flops.hpp"
#include "dcs/gates.hpp"
#include "dcs/rng.hpp"

#include "gradcheck.hpp"

using dcs::BlockGeometry;
using dcs::BudgetConfig;
using dcs::Tensor;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, dcs::Rng& rng, double lo = -1.0,
                             double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  testutil::fill_uniform(t, [&] { return rng.uniform(); }, lo, hi);
  return t;
}

dcs::GateParams<double> random_gate(int c_in, int c_out, int hidden, dcs::Rng& rng) {
  dcs::GateParams<double> p;
  p.w0 = random_tensor({hidden, c_in}, rng, -0.5, 0.5);
  p.bn_gamma = Tensor<double>::full({hidden}, 1.0);
  p.bn_beta = Tensor<double>::zeros({hidden});
  p.bn_mean = Tensor<double>::zeros({hidden});
  p.bn_var = Tensor<double>::full({hidden}, 1.0);
  p.w1 = random_tensor({c_out, hidden}, rng, -0.5, 0.5);
  p.b1 = random_tensor({c_out}, rng, -0.5, 0.5);
  return p;
}

BlockGeometry desk_like_geom() {
  BlockGeometry g;
  g.c_in = 16;
  g.c_out = 32;
  g.k = 3;
  g.h_in = g.w_in = 8;
  g.h1 = g.w1 = 8;
  g.h2 = g.w2 = 8;
  g.hidden = 8;  // r = 4
  return g;
}

}  // namespace

TEST_CASE("gate_logits with zero W1 ignores the input") {
  dcs::Rng rng(1);
  auto p = random_gate(4, 8, 2, rng);
  for (std::int64_t i = 0; i < p.w1.size(); ++i) p.w1.data()[i] = 0.0;
  for (std::int64_t i = 0; i < p.b1.size(); ++i) p.b1.data()[i] = 0.0;
  auto x = random_tensor({3, 4, 5, 5}, rng);
  auto logits = dcs::gate_logits(x, p, true);
  REQUIRE(logits.shape() == std::vector<int>{3, 8});
  for (std::int64_t i = 0; i < logits.size(); ++i) CHECK(logits.data()[i] == 0.0);
}

TEST_CASE("gate pooling of a constant image recovers the constant") {
  auto x = Tensor<double>::full({2, 3, 4, 4}, 1.75);
  auto z = dcs::gap2d(x);
  for (std::int64_t i = 0; i < z.size(); ++i) CHECK(z.data()[i] == doctest::Approx(1.75));
}

TEST_CASE("gate_logits gradients match finite differences") {
  dcs::Rng rng(2);
  auto p = random_gate(4, 6, 2, rng);
  auto x = random_tensor({3, 4, 4, 4}, rng);
  auto r = random_tensor({3, 6}, rng);
  auto fn = [&] {
    // Fresh stats each call: gate_logits in train mode updates them.
    p.bn_mean = Tensor<double>::zeros({2});
    p.bn_var = Tensor<double>::full({2}, 1.0);
    return dcs::sum_all(dcs::mul(dcs::gate_logits(x, p, true), r));
  };
  CHECK(testutil::gradcheck(fn, {p.w0, p.w1, p.b1, x}) < 1e-4);
}

TEST_CASE("train-mode mask activates with probability sigmoid(logit) independent of tau") {
  // G1 - G0 is Logistic(0,1), so P(logit + G1 - G0 > 0) = sigmoid(logit).
  dcs::Rng rng(3);
  const int draws = 100000;
  for (double tau : {5.0, 0.5}) {
    for (double logit : {0.0, 1.2, -0.8}) {
      auto logits = Tensor<double>::full({1, 1}, logit);
      int on = 0;
      for (int i = 0; i < draws; ++i) {
        auto gs = dcs::sample_mask_train(logits, tau, rng);
        on += gs.hard.data()[0] == 1.0 ? 1 : 0;
      }
      const double p = 1.0 / (1.0 + std::exp(-logit));
      const double sd = std::sqrt(p * (1.0 - p) / draws);
      CHECK(std::abs(static_cast<double>(on) / draws - p) < 3.0 * sd + 1e-9);
    }
  }
}

TEST_CASE("soft mask concentrates on {0,1} as tau shrinks") {
  dcs::Rng rng(4);
  auto logits = Tensor<double>::full({1, 1}, 0.3);
  double gap = 0.0;
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) {
    auto gs = dcs::sample_mask_train(logits, 0.01, rng);
    gap += std::abs(gs.soft.data()[0] - gs.hard.data()[0]);
  }
  CHECK(gap / draws < 0.01);
}

TEST_CASE("eval mask thresholds logits at zero, inclusive") {
  auto logits = Tensor<double>::from_data({1, 3}, {0.3, -0.2, 0.0});
  auto gs = dcs::sample_mask_eval(logits);
  CHECK(gs.hard.data()[0] == 1.0);
  CHECK(gs.hard.data()[1] == 0.0);
  CHECK(gs.hard.data()[2] == 1.0);

  auto neg = Tensor<double>::full({2, 4}, -0.5);
  auto off = dcs::sample_mask_eval(neg);
  for (std::int64_t i = 0; i < off.hard.size(); ++i) CHECK(off.hard.data()[i] == 0.0);
}

TEST_CASE("eval mask agrees with the train-mode majority for decisive logits") {
  dcs::Rng rng(5);
  for (double logit : {7.0, -6.5}) {
    auto logits = Tensor<double>::full({1, 1}, logit);
    const double eval_on = dcs::sample_mask_eval(logits).hard.data()[0];
    int agree = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
      auto gs = dcs::sample_mask_train(logits, 1.0, rng);
      agree += gs.hard.data()[0] == eval_on ? 1 : 0;
    }
    CHECK(static_cast<double>(agree) / draws > 0.997);
  }
}

TEST_CASE("straight-through gradient equals the soft-path gradient at the same noise") {
  dcs::Rng rng(6);
  auto logits = random_tensor({2, 5}, rng, -2.0, 2.0);
  auto r = random_tensor({2, 5}, rng);
  auto grads_for = [&](dcs::GateMode mode) {
    auto l = Tensor<double>::from_data(logits.shape(), logits.values());
    l.set_requires_grad(true);
    dcs::Rng noise(99);
    auto gs = dcs::sample_mask_train(l, 1.3, noise, mode);
    dcs::backward(dcs::sum_all(dcs::mul(gs.mask, r)));
    return l.grad();
  };
  auto hard_path = grads_for(dcs::GateMode::Train);
  auto soft_path = grads_for(dcs::GateMode::Soft);
  REQUIRE(hard_path.size() == soft_path.size());
  for (std::size_t i = 0; i < hard_path.size(); ++i) CHECK(hard_path[i] == soft_path[i]);
}

TEST_CASE("dense_flops matches hand counts") {
  auto g = desk_like_geom();
  // First conv term alone: 3*3*16*32*8*8.
  const std::int64_t second = 9LL * 32 * 32 * 8 * 8;
  CHECK(dcs::dense_flops(g) - second == 294912);

  BlockGeometry unit;
  unit.c_in = 5;
  unit.c_out = 7;
  unit.k = 1;
  unit.h_in = unit.w_in = unit.h1 = unit.w1 = unit.h2 = unit.w2 = 1;
  unit.hidden = 1;
  CHECK(dcs::dense_flops(unit) == 5 * 7 + 7 * 7);
}

TEST_CASE("desk configuration dense totals match the spreadsheet count") {
  dcs::BackboneConfig cfg;  // [16,32,64] x2, side 32, r 4
  auto geoms = dcs::block_geometries(cfg);
  REQUIRE(geoms.size() == 6);
  const std::vector<std::int64_t> want_dense{4718592, 4718592, 3538944, 4718592, 3538944,
                                             4718592};
  const std::vector<std::int64_t> want_overhead{16512, 16512, 16768, 8704, 9728, 6144};
  std::int64_t total = 0;
  for (std::size_t i = 0; i < geoms.size(); ++i) {
    CHECK(dcs::dense_flops(geoms[i]) == want_dense[i]);
    CHECK(dcs::gate_overhead(geoms[i]) == want_overhead[i]);
    total += dcs::dense_flops(geoms[i]);
  }
  CHECK(total == 25952256);
}

TEST_CASE("gate_overhead hand example") {
  BlockGeometry g = desk_like_geom();  // C_in=16, C_out=32, r=4, H=W=8
  CHECK(dcs::gate_overhead(g) == 1408);
}

TEST_CASE("dynamic_flops endpoints: all-on and all-off masks") {
  auto g = desk_like_geom();
  const int B = 4;
  for (double fill : {1.0, 0.0}) {
    dcs::GateState<double> gs;
    gs.mask = Tensor<double>::full({B, g.c_out}, fill);
    auto f = dcs::dynamic_flops(gs, g);
    const double want = fill == 1.0
                            ? static_cast<double>(dcs::dense_flops(g) + dcs::gate_overhead(g))
                            : static_cast<double>(dcs::gate_overhead(g));
    CHECK(f.item() == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("turning off any single channel strictly decreases dynamic cost") {
  auto g = desk_like_geom();
  dcs::GateState<double> gs;
  gs.mask = Tensor<double>::full({2, g.c_out}, 1.0);
  const double base = dcs::dynamic_flops(gs, g).item();
  for (int c = 0; c < g.c_out; ++c) {
    gs.mask.data()[c] = 0.0;
    CHECK(dcs::dynamic_flops(gs, g).item() < base);
    gs.mask.data()[c] = 1.0;
  }
}

TEST_CASE("hard_dynamic_flops agrees with the tensor path on hard masks") {
  auto g = desk_like_geom();
  dcs::Rng rng(7);
  dcs::GateState<double> gs;
  gs.mask = Tensor<double>::zeros({1, g.c_out});
  int active = 0;
  for (int c = 0; c < g.c_out; ++c) {
    const bool on = rng.bernoulli(0.6);
    gs.mask.data()[c] = on ? 1.0 : 0.0;
    active += on ? 1 : 0;
  }
  CHECK(dcs::dynamic_flops(gs, g).item() ==
        doctest::Approx(static_cast<double>(dcs::hard_dynamic_flops(g, active))).epsilon(1e-12));
}

TEST_CASE("flop ratio is independent of the MAC-vs-FLOP convention") {
  auto g = desk_like_geom();
  const std::int64_t conv_part = dcs::hard_dynamic_flops(g, 20) - dcs::gate_overhead(g);
  const double r1 = static_cast<double>(conv_part) / static_cast<double>(dcs::dense_flops(g));
  const double r2 =
      static_cast<double>(2 * conv_part) / static_cast<double>(2 * dcs::dense_flops(g));
  CHECK(r1 == r2);
}

TEST_CASE("sparsity_loss hand values") {
  BudgetConfig cfg;
  cfg.t_d = 0.5;
  cfg.lambda = 5.0;
  auto g = desk_like_geom();

  // Build a mask whose dynamic/dense ratio is exactly the target: pick the
  // soft mask value directly.
  auto make_blocks = [&](double ratio) {
    dcs::GateState<double> gs;
    const double a =
        (ratio * dcs::dense_flops(g) - dcs::gate_overhead(g)) / dcs::conv_coeff(g);
    gs.mask = Tensor<double>::full({1, g.c_out}, a / g.c_out);
    std::vector<dcs::BlockFlops<double>> blocks;
    blocks.push_back({dcs::dense_flops(g), dcs::dynamic_flops(gs, g)});
    return blocks;
  };
  CHECK(dcs::sparsity_loss(make_blocks(0.5), cfg).item() == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(dcs::sparsity_loss(make_blocks(0.7), cfg).item() ==
        doctest::Approx(0.2).epsilon(1e-6));
}

TEST_CASE("sparsity gradient flows to gate logits through the whole ledger") {
  dcs::Rng rng(8);
  auto logits = random_tensor({3, 6}, rng, -1.5, 1.5);
  BlockGeometry g;
  g.c_in = 4;
  g.c_out = 6;
  g.k = 3;
  g.h_in = g.w_in = 6;
  g.h1 = g.w1 = 6;
  g.h2 = g.w2 = 6;
  g.hidden = 2;
  BudgetConfig cfg;
  cfg.t_d = 0.4;
  auto fn = [&] {
    dcs::Rng noise(123);
    auto gs = dcs::sample_mask_train(logits, 2.0, noise, dcs::GateMode::Soft);
    std::vector<dcs::BlockFlops<double>> blocks;
    blocks.push_back({dcs::dense_flops(g), dcs::dynamic_flops(gs, g)});
    return dcs::total_gating_loss(blocks, 0.0, cfg);
  };
  CHECK(testutil::gradcheck(fn, {logits}) < 1e-4);
}

TEST_CASE("bound_loss hand values and relaxation") {
  BudgetConfig cfg;
  cfg.t_d = 0.5;
  cfg.gamma = 1.0;
  cfg.p_b = 0.3;
  auto block_at = [&](double ratio) {
    std::vector<dcs::BlockFlops<double>> blocks;
    blocks.push_back({1000, Tensor<double>::scalar(ratio * 1000.0)});
    return blocks;
  };
  CHECK(dcs::bound_loss(block_at(0.5), 0.0, cfg).item() == doctest::Approx(0.0));
  CHECK(dcs::bound_loss(block_at(0.5), 1.0, cfg).item() == doctest::Approx(0.0));
  CHECK(dcs::bound_loss(block_at(0.8), 0.0, cfg).item() == doctest::Approx(0.09).epsilon(1e-9));
  // Past the relaxation horizon the deadband covers [0,1].
  for (double r : {0.0, 0.25, 0.9, 1.0}) {
    CHECK(dcs::bound_loss(block_at(r), 0.3, cfg).item() == doctest::Approx(0.0));
    CHECK(dcs::bound_loss(block_at(r), 0.9, cfg).item() == doctest::Approx(0.0));
  }
  // Same full-range coverage for an asymmetric target.
  BudgetConfig c3 = cfg;
  c3.t_d = 0.3;
  for (double r : {0.0, 1.0})
    CHECK(dcs::bound_loss(block_at(r), 0.5, c3).item() == doctest::Approx(0.0));
}

TEST_CASE("total_gating_loss composes its two terms linearly") {
  BudgetConfig cfg;
  cfg.t_d = 0.5;
  CHECK(cfg.lambda == 5.0);  // paper defaults
  CHECK(cfg.gamma == 1.0);

  std::vector<dcs::BlockFlops<double>> blocks;
  blocks.push_back({1000, Tensor<double>::scalar(820.0)});
  blocks.push_back({2000, Tensor<double>::scalar(700.0)});
  const double full = dcs::total_gating_loss(blocks, 0.1, cfg).item();
  BudgetConfig only_sparse = cfg;
  only_sparse.gamma = 0.0;
  BudgetConfig only_bound = cfg;
  only_bound.lambda = 0.0;
  const double s = dcs::total_gating_loss(blocks, 0.1, only_sparse).item();
  const double b = dcs::total_gating_loss(blocks, 0.1, only_bound).item();
  CHECK(full == doctest::Approx(s + b).epsilon(1e-12));

  std::vector<dcs::BlockFlops<double>> exact;
  exact.push_back({1000, Tensor<double>::scalar(500.0)});
  CHECK(dcs::total_gating_loss(exact, 1.0, cfg).item() == doctest::Approx(0.0));
}
