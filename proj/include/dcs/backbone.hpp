#pragma once

#include <string>
#include <vector>

#include "dcs/flops.hpp"
#include "dcs/gates.hpp"
#include "dcs/ops.hpp"
#include "dcs/rng.hpp"
#include "dcs/tensor.hpp"

namespace dcs {

struct BackboneConfig {
  std::vector<int> stage_widths{16, 32, 64};
  int blocks_per_stage = 2;
  int side = 32;          // input spatial size
  int reduction = 4;      // gate bottleneck divisor r
  int in_channels = 3;

  int d_enc() const { return stage_widths.back(); }

  void validate() const {
    if (stage_widths.empty()) throw ConfigError("backbone: stage_widths must be non-empty");
    if (blocks_per_stage < 1) throw ConfigError("backbone: blocks_per_stage must be >= 1");
    if (side < 4) throw ConfigError("backbone: side must be >= 4");
    if (reduction < 1) throw ConfigError("backbone: reduction must be >= 1");
    for (int w : stage_widths) {
      if (w < 1) throw ConfigError("backbone: stage widths must be positive");
      if (w / reduction < 1)
        throw ConfigError("backbone: width " + std::to_string(w) +
                          " under reduction " + std::to_string(reduction) +
                          " leaves no gate bottleneck");
    }
  }
};

template <typename S>
struct ConvLayer {
  Tensor<S> w;  // [C_out, C_in, k, k], no bias (BN follows)
  int stride = 1;
  int pad = 1;
};

template <typename S>
struct BnLayer {
  Tensor<S> gamma, beta;  // undefined when affine == false
  Tensor<S> mean, var;
  bool affine = true;
};

template <typename S>
struct Fc {
  Tensor<S> w;  // [out, in]
  Tensor<S> b;  // optional
};

// Basic residual block, gated after its first convolution.
template <typename S>
struct GatedBlock {
  ConvLayer<S> conv1;  // carries the stage stride
  BnLayer<S> bn1;
  ConvLayer<S> conv2;
  BnLayer<S> bn2;
  GateParams<S> gate;
  bool projected = false;  // 1x1 strided shortcut when shape changes
  ConvLayer<S> sc_conv;
  BnLayer<S> sc_bn;
};

template <typename S>
struct Backbone {
  BackboneConfig cfg;
  ConvLayer<S> stem;
  BnLayer<S> stem_bn;
  std::vector<GatedBlock<S>> blocks;
};

// Static per-block shape table; order matches Backbone::blocks.
inline std::vector<BlockGeometry> block_geometries(const BackboneConfig& cfg) {
  cfg.validate();
  std::vector<BlockGeometry> out;
  int side = cfg.side;  // unchanged by the 3x3 stride-1 stem
  int c_in = cfg.stage_widths.front();
  for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s) {
    const int c_out = cfg.stage_widths[s];
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      BlockGeometry g;
      g.c_in = c_in;
      g.c_out = c_out;
      g.k = 3;
      g.h_in = g.w_in = side;
      side = (side - 1) / stride + 1;
      g.h1 = g.w1 = side;
      g.h2 = g.w2 = side;
      g.hidden = c_out / cfg.reduction;
      out.push_back(g);
      c_in = c_out;
    }
  }
  return out;
}

namespace detail {

template <typename S>
ConvLayer<S> make_conv(int c_out, int c_in, int k, int stride, Rng& rng) {
  ConvLayer<S> l;
  l.w = Tensor<S>({c_out, c_in, k, k});
  l.stride = stride;
  l.pad = k / 2;
  const double std = std::sqrt(2.0 / (static_cast<double>(k) * k * c_out));  // fan-out
  for (std::int64_t i = 0; i < l.w.size(); ++i)
    l.w.data()[i] = static_cast<S>(rng.normal() * std);
  return l;
}

template <typename S>
BnLayer<S> make_bn(int c, bool affine = true) {
  BnLayer<S> l;
  l.affine = affine;
  if (affine) {
    l.gamma = Tensor<S>::full({c}, S(1));
    l.beta = Tensor<S>::zeros({c});
  }
  l.mean = Tensor<S>::zeros({c});
  l.var = Tensor<S>::full({c}, S(1));
  return l;
}

template <typename S>
Fc<S> make_fc(int out, int in, bool bias, Rng& rng) {
  Fc<S> l;
  l.w = Tensor<S>({out, in});
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (std::int64_t i = 0; i < l.w.size(); ++i)
    l.w.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
  if (bias) {
    l.b = Tensor<S>({out});
    for (std::int64_t i = 0; i < l.b.size(); ++i)
      l.b.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
  }
  return l;
}

template <typename S>
GateParams<S> make_gate(int c_in, int c_out, int hidden, Rng& rng) {
  GateParams<S> p;
  auto w0 = make_fc<S>(hidden, c_in, /*bias=*/false, rng);
  p.w0 = w0.w;
  auto bn = make_bn<S>(hidden);
  p.bn_gamma = bn.gamma;
  p.bn_beta = bn.beta;
  p.bn_mean = bn.mean;
  p.bn_var = bn.var;
  auto w1 = make_fc<S>(c_out, hidden, /*bias=*/true, rng);
  p.w1 = w1.w;
  // Start near all-on so the budget loss, not dead blocks, decides sparsity.
  p.b1 = Tensor<S>::full({c_out}, S(1));
  return p;
}

template <typename S>
Tensor<S> bn_forward(const Tensor<S>& x, BnLayer<S>& bn, bool training) {
  return x.rank() == 4 ? batchnorm2d(x, bn.gamma, bn.beta, bn.mean, bn.var, training)
                       : batchnorm1d(x, bn.gamma, bn.beta, bn.mean, bn.var, training);
}

}  // namespace detail

template <typename S>
Backbone<S> make_backbone(const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  Backbone<S> net;
  net.cfg = cfg;
  net.stem = detail::make_conv<S>(cfg.stage_widths.front(), cfg.in_channels, 3, 1, rng);
  net.stem_bn = detail::make_bn<S>(cfg.stage_widths.front());
  const auto geoms = block_geometries(cfg);
  for (std::size_t i = 0; i < geoms.size(); ++i) {
    const auto& g = geoms[i];
    GatedBlock<S> blk;
    const auto stage = i / static_cast<std::size_t>(cfg.blocks_per_stage);
    const auto slot = i % static_cast<std::size_t>(cfg.blocks_per_stage);
    const int stride = (stage > 0 && slot == 0) ? 2 : 1;
    blk.conv1 = detail::make_conv<S>(g.c_out, g.c_in, g.k, stride, rng);
    blk.bn1 = detail::make_bn<S>(g.c_out);
    blk.conv2 = detail::make_conv<S>(g.c_out, g.c_out, g.k, 1, rng);
    blk.bn2 = detail::make_bn<S>(g.c_out);
    blk.gate = detail::make_gate<S>(g.c_in, g.c_out, g.hidden, rng);
    if (stride != 1 || g.c_in != g.c_out) {
      blk.projected = true;
      blk.sc_conv = detail::make_conv<S>(g.c_out, g.c_in, 1, stride, rng);
      blk.sc_bn = detail::make_bn<S>(g.c_out);
    }
    net.blocks.push_back(std::move(blk));
  }
  return net;
}

// y1 = mask . relu(BN1(conv1(x))); out = relu(BN2(conv2(y1)) + shortcut(x)).
// The gate reads the block input; rng is only touched in Train/Soft modes.
template <typename S>
std::pair<Tensor<S>, GateState<S>> gated_block_forward(GatedBlock<S>& blk, const Tensor<S>& x,
                                                       GateMode mode, double tau, Rng* rng) {
  const bool training = mode != GateMode::Eval;
  auto logits = gate_logits(x, blk.gate, training);
  GateState<S> gs;
  if (mode == GateMode::Eval) {
    gs = sample_mask_eval(logits);
  } else {
    if (rng == nullptr) throw Error("gated_block_forward: train mode needs an RNG");
    gs = sample_mask_train(logits, tau, *rng, mode);
  }
  auto y1 = mask_channels(relu(detail::bn_forward(conv2d(x, blk.conv1.w, blk.conv1.stride,
                                                         blk.conv1.pad),
                                                  blk.bn1, training)),
                          gs.mask);
  auto y2 = detail::bn_forward(conv2d(y1, blk.conv2.w, blk.conv2.stride, blk.conv2.pad), blk.bn2,
                               training);
  Tensor<S> sc = x;
  if (blk.projected)
    sc = detail::bn_forward(conv2d(x, blk.sc_conv.w, blk.sc_conv.stride, blk.sc_conv.pad),
                            blk.sc_bn, training);
  return {relu(add(y2, sc)), std::move(gs)};
}

// Full backbone pass: stem -> gated stages -> spatial mean. Gate states are
// appended to `states` in block order when it is non-null.
template <typename S>
Tensor<S> encode(Backbone<S>& net, const Tensor<S>& batch, GateMode mode, double tau, Rng* rng,
                 std::type_identity_t<std::vector<GateState<S>>*> states) {
  const bool training = mode != GateMode::Eval;
  auto x = relu(detail::bn_forward(conv2d(batch, net.stem.w, net.stem.stride, net.stem.pad),
                                   net.stem_bn, training));
  for (auto& blk : net.blocks) {
    auto [y, gs] = gated_block_forward(blk, x, mode, tau, rng);
    x = y;
    if (states) states->push_back(std::move(gs));
  }
  return gap2d(x);
}

}  // namespace dcs
