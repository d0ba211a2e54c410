#pragma once

#include <cstdint>
#include <vector>

#include "dcs/gates.hpp"
#include "dcs/ops.hpp"
#include "dcs/tensor.hpp"

namespace dcs {

// Shapes of one gated residual block, everything the FLOP accounting needs.
// All counts in this file are multiply-accumulates (no x2 convention).
struct BlockGeometry {
  int c_in = 0, c_out = 0;
  int k = 3;
  int h_in = 0, w_in = 0;    // block input (gate gap reads this)
  int h1 = 0, w1 = 0;        // after conv1
  int h2 = 0, w2 = 0;        // after conv2
  int hidden = 0;            // gate bottleneck width, floor(c_out / r)
};

// Both convolutions of the ungated block.
inline std::int64_t dense_flops(const BlockGeometry& g) {
  const std::int64_t k2 = static_cast<std::int64_t>(g.k) * g.k;
  return k2 * g.c_in * g.c_out * g.h1 * g.w1 +
         k2 * g.c_out * g.c_out * g.h2 * g.w2;
}

// Cost of running the gate itself: spatial pooling plus the two linear maps.
inline std::int64_t gate_overhead(const BlockGeometry& g) {
  return static_cast<std::int64_t>(g.c_in) * g.h_in * g.w_in +
         static_cast<std::int64_t>(g.c_in) * g.hidden +
         static_cast<std::int64_t>(g.hidden) * g.c_out;
}

// Per active channel, conv1 produces it and conv2 consumes it.
inline std::int64_t conv_coeff(const BlockGeometry& g) {
  const std::int64_t k2 = static_cast<std::int64_t>(g.k) * g.k;
  return k2 * g.c_in * g.h1 * g.w1 + k2 * g.c_out * g.h2 * g.w2;
}

// Exact cost of a hard mask with `active` channels on, for one sample.
inline std::int64_t hard_dynamic_flops(const BlockGeometry& g, int active) {
  return conv_coeff(g) * active + gate_overhead(g);
}

// Batch-mean dynamic cost, differentiable through the mask's soft path.
template <typename S>
Tensor<S> dynamic_flops(const GateState<S>& gs, const BlockGeometry& g) {
  const int batch = gs.mask.dim(0);
  auto mean_active = scale(sum_all(gs.mask), S(1.0 / batch));
  return add_scalar(scale(mean_active, static_cast<S>(conv_coeff(g))),
                    static_cast<S>(gate_overhead(g)));
}

// Budget regularizer settings; defaults follow the training recipe.
struct BudgetConfig {
  double t_d = 0.5;     // target compute density in (0,1]
  double lambda = 5.0;  // weight of the global budget term
  double gamma = 1.0;   // weight of the per-block bound term
  double p_b = 0.3;     // fraction of training over which the bound relaxes
};

template <typename S>
struct BlockFlops {
  std::int64_t dense = 0;   // F^O
  Tensor<S> dynamic;        // F^R, scalar tensor
};

// lambda * (sum F^R / sum F^O - t_d)^2.
template <typename S>
Tensor<S> sparsity_loss(const std::vector<BlockFlops<S>>& blocks, const BudgetConfig& cfg) {
  if (blocks.empty()) throw DimError("sparsity_loss: no gated blocks");
  std::int64_t total_dense = 0;
  Tensor<S> total_dyn = blocks[0].dynamic;
  total_dense += blocks[0].dense;
  for (std::size_t i = 1; i < blocks.size(); ++i) {
    total_dyn = add(total_dyn, blocks[i].dynamic);
    total_dense += blocks[i].dense;
  }
  auto ratio = scale(total_dyn, S(1.0 / static_cast<double>(total_dense)));
  auto diff = add_scalar(ratio, static_cast<S>(-cfg.t_d));
  return scale(mul(diff, diff), static_cast<S>(cfg.lambda));
}

// Deadband half-width: zero at the start of training, wide enough to free
// every block once `progress` reaches p_b.
inline double bound_deadband(double progress, const BudgetConfig& cfg) {
  const double ramp = progress >= cfg.p_b ? 1.0 : progress / cfg.p_b;
  const double half = std::min(cfg.t_d, 1.0 - cfg.t_d);
  return ramp * (1.0 - half);
}

// Mean over blocks of max(0, |r_l - t_d| - deadband)^2 with r_l = F^R/F^O.
template <typename S>
Tensor<S> bound_loss(const std::vector<BlockFlops<S>>& blocks, double progress,
                     const BudgetConfig& cfg) {
  if (blocks.empty()) throw DimError("bound_loss: no gated blocks");
  if (progress < 0.0 || progress > 1.0) throw Error("bound_loss: progress outside [0,1]");
  const double delta = bound_deadband(progress, cfg);
  Tensor<S> acc;
  for (const auto& b : blocks) {
    auto r = scale(b.dynamic, S(1.0 / static_cast<double>(b.dense)));
    auto excess = relu(add_scalar(absolute(add_scalar(r, static_cast<S>(-cfg.t_d))),
                                  static_cast<S>(-delta)));
    auto sq = mul(excess, excess);
    acc = acc.defined() ? add(acc, sq) : sq;
  }
  return scale(acc, S(1.0 / static_cast<double>(blocks.size())));
}

// L_G = sparsity term + gamma * bound term.
template <typename S>
Tensor<S> total_gating_loss(const std::vector<BlockFlops<S>>& blocks, double progress,
                            const BudgetConfig& cfg) {
  return add(sparsity_loss(blocks, cfg),
             scale(bound_loss(blocks, progress, cfg), static_cast<S>(cfg.gamma)));
}

}  // namespace dcs
