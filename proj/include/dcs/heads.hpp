#pragma once

#include "dcs/backbone.hpp"
#include "dcs/ops.hpp"
#include "dcs/tensor.hpp"

namespace dcs {

struct HeadsConfig {
  int d_enc = 64;
  int d_hidden = 256;  // projector hidden width
  int d_proj = 256;
  int d_pred_hidden = 64;  // predictor bottleneck

  void validate() const {
    if (d_enc < 1 || d_hidden < 1 || d_proj < 1 || d_pred_hidden < 1)
      throw ConfigError("heads: all widths must be >= 1");
  }
};

// Projector h (two BN'd layers, final BN without affine) and predictor
// g_phi (bottleneck MLP).
template <typename S>
struct Heads {
  HeadsConfig cfg;
  Fc<S> p1;
  BnLayer<S> p1_bn;
  Fc<S> p2;
  BnLayer<S> p2_bn;  // affine == false
  Fc<S> q1;
  BnLayer<S> q1_bn;
  Fc<S> q2;  // carries the only head bias
};

template <typename S>
Heads<S> make_heads(const HeadsConfig& cfg, Rng& rng) {
  cfg.validate();
  Heads<S> h;
  h.cfg = cfg;
  h.p1 = detail::make_fc<S>(cfg.d_hidden, cfg.d_enc, /*bias=*/false, rng);
  h.p1_bn = detail::make_bn<S>(cfg.d_hidden);
  h.p2 = detail::make_fc<S>(cfg.d_proj, cfg.d_hidden, /*bias=*/false, rng);
  h.p2_bn = detail::make_bn<S>(cfg.d_proj, /*affine=*/false);
  h.q1 = detail::make_fc<S>(cfg.d_pred_hidden, cfg.d_proj, /*bias=*/false, rng);
  h.q1_bn = detail::make_bn<S>(cfg.d_pred_hidden);
  h.q2 = detail::make_fc<S>(cfg.d_proj, cfg.d_pred_hidden, /*bias=*/true, rng);
  return h;
}

template <typename S>
Tensor<S> project(Heads<S>& h, const Tensor<S>& embedding, bool training) {
  auto t = relu(detail::bn_forward(linear(embedding, h.p1.w, h.p1.b), h.p1_bn, training));
  return detail::bn_forward(linear(t, h.p2.w, h.p2.b), h.p2_bn, training);
}

template <typename S>
Tensor<S> predict(Heads<S>& h, const Tensor<S>& z, bool training) {
  auto t = relu(detail::bn_forward(linear(z, h.q1.w, h.q1.b), h.q1_bn, training));
  return linear(t, h.q2.w, h.q2.b);
}

// Batch mean of negative cosine similarity between matching rows.
template <typename S>
Tensor<S> negcos(const Tensor<S>& a, const Tensor<S>& b) {
  return scale(mean_all(rows_dot(l2_normalize(a), l2_normalize(b))), S(-1));
}

// L = D(p1, SG(z2))/2 + D(p2, SG(z1))/2.
template <typename S>
Tensor<S> simsiam_loss(const Tensor<S>& p1, const Tensor<S>& p2, const Tensor<S>& z1,
                       const Tensor<S>& z2) {
  return add(scale(negcos(p1, stop_gradient(z2)), S(0.5)),
             scale(negcos(p2, stop_gradient(z1)), S(0.5)));
}

}  // namespace dcs
