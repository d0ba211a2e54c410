#pragma once

#include <vector>

#include "dcs/ops.hpp"
#include "dcs/rng.hpp"
#include "dcs/tensor.hpp"

namespace dcs {

// SE-style gating head for one residual block: C_in -> hidden -> C_out,
// where hidden = floor(C_out / reduction). The produced logits index the
// output channels of the block's first convolution.
template <typename S>
struct GateParams {
  Tensor<S> w0;                             // [hidden, C_in], no bias (BN follows)
  Tensor<S> bn_gamma, bn_beta;              // [hidden]
  Tensor<S> bn_mean, bn_var;                // [hidden] running stats
  Tensor<S> w1;                             // [C_out, hidden]
  Tensor<S> b1;                             // [C_out]

  int hidden() const { return w0.dim(0); }
  int in_channels() const { return w0.dim(1); }
  int out_channels() const { return w1.dim(0); }
};

enum class GateMode {
  Train,  // Gumbel relaxation, straight-through hard mask
  Eval,   // deterministic threshold at zero
  Soft,   // Gumbel relaxation without the hard rounding (gradient checks)
};

// Per-block gate decision. `mask` is what actually multiplies the feature
// map: the straight-through tensor in train mode, the hard threshold in
// eval mode.
template <typename S>
struct GateState {
  Tensor<S> logits;  // [B,C]
  Tensor<S> soft;    // [B,C], in (0,1) when sampled, equals hard in eval
  Tensor<S> hard;    // [B,C], values in {0,1}, detached
  Tensor<S> mask;    // [B,C], the tensor applied to the features
  double temperature = 1.0;
};

// z = gap(x); logits = W1 * relu(BN(W0 * z)) + b1.
template <typename S>
Tensor<S> gate_logits(const Tensor<S>& x, GateParams<S>& p, bool training) {
  auto z = gap2d(x);
  auto h = linear(z, p.w0, Tensor<S>());
  h = relu(batchnorm1d(h, p.bn_gamma, p.bn_beta, p.bn_mean, p.bn_var, training));
  return linear(h, p.w1, p.b1);
}

// Binary-concrete relaxation: soft = sigmoid((logits + G1 - G0)/tau) with
// independent Gumbel noises, hard = 1[soft >= 0.5], forward value hard,
// gradient routed through soft.
template <typename S>
GateState<S> sample_mask_train(const Tensor<S>& logits, double tau, Rng& rng,
                               GateMode mode = GateMode::Train) {
  if (tau <= 0.0) throw Error("gate temperature must be positive");
  GateState<S> gs;
  gs.logits = logits;
  gs.temperature = tau;
  Tensor<S> noisy(logits.shape());
  {
    // Noise is data, not graph: perturb a detached copy, then re-attach the
    // logits through add so gradients flow to them alone.
    for (std::int64_t i = 0; i < noisy.size(); ++i)
      noisy.data()[i] = static_cast<S>(rng.gumbel() - rng.gumbel());
  }
  auto shifted = scale(add(logits, noisy), S(1.0 / tau));
  gs.soft = sigmoid(shifted);
  std::vector<S> hard(static_cast<std::size_t>(gs.soft.size()));
  for (std::int64_t i = 0; i < gs.soft.size(); ++i)
    hard[static_cast<std::size_t>(i)] = gs.soft.data()[i] >= S(0.5) ? S(1) : S(0);
  gs.hard = Tensor<S>::from_data(logits.shape(), hard);
  gs.mask = (mode == GateMode::Soft) ? gs.soft : straight_through(gs.soft, hard);
  return gs;
}

// Deterministic inference rule: channel stays on iff its logit is >= 0.
template <typename S>
GateState<S> sample_mask_eval(const Tensor<S>& logits) {
  GateState<S> gs;
  gs.logits = logits;
  gs.temperature = 0.0;
  std::vector<S> hard(static_cast<std::size_t>(logits.size()));
  for (std::int64_t i = 0; i < logits.size(); ++i)
    hard[static_cast<std::size_t>(i)] = logits.data()[i] >= S(0) ? S(1) : S(0);
  gs.hard = Tensor<S>::from_data(logits.shape(), hard);
  gs.soft = gs.hard;
  gs.mask = gs.hard;
  return gs;
}

}  // namespace dcs
