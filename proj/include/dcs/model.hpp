#pragma once

#include <string>
#include <vector>

#include "dcs/backbone.hpp"
#include "dcs/heads.hpp"

namespace dcs {

// What a parameter is, for the optimizer's decay policy: weight matrices
// decay, normalization scales/offsets and biases do not.
enum class ParamKind { Weight, Bias, BnGamma, BnBeta };

template <typename S>
struct ParamRef {
  std::string name;
  Tensor<S>* tensor = nullptr;
  ParamKind kind = ParamKind::Weight;
};

template <typename S>
struct StatRef {
  std::string name;
  Tensor<S>* tensor = nullptr;
};

template <typename S>
struct Model {
  Backbone<S> backbone;
  Heads<S> heads;
};

template <typename S>
Model<S> make_model(const BackboneConfig& bcfg, HeadsConfig hcfg, std::uint64_t seed) {
  hcfg.d_enc = bcfg.d_enc();
  Rng rng = derive_rng(seed, {0x1417});
  Model<S> m;
  m.backbone = make_backbone<S>(bcfg, rng);
  m.heads = make_heads<S>(hcfg, rng);
  for (auto& p : param_refs(m)) p.tensor->set_requires_grad(true);
  return m;
}

namespace detail {

template <typename S, typename F>
void visit_bn(BnLayer<S>& bn, const std::string& prefix, F&& add_param,
              std::vector<StatRef<S>>* stats) {
  if (bn.affine) {
    add_param(prefix + ".gamma", &bn.gamma, ParamKind::BnGamma);
    add_param(prefix + ".beta", &bn.beta, ParamKind::BnBeta);
  }
  if (stats) {
    stats->push_back({prefix + ".running_mean", &bn.mean});
    stats->push_back({prefix + ".running_var", &bn.var});
  }
}

}  // namespace detail

// Deterministic enumeration of every trainable tensor (and, when `stats`
// is non-null, every BN running stat). The order defines checkpoint layout
// and optimizer slot order, so it must stay stable.
template <typename S>
std::vector<ParamRef<S>> param_refs(Model<S>& m, std::vector<StatRef<S>>* stats = nullptr) {
  std::vector<ParamRef<S>> out;
  auto add = [&out](const std::string& name, Tensor<S>* t, ParamKind kind) {
    out.push_back({name, t, kind});
  };
  add("stem.conv.w", &m.backbone.stem.w, ParamKind::Weight);
  detail::visit_bn(m.backbone.stem_bn, "stem.bn", add, stats);
  for (std::size_t i = 0; i < m.backbone.blocks.size(); ++i) {
    auto& blk = m.backbone.blocks[i];
    const std::string p = "block" + std::to_string(i);
    add(p + ".conv1.w", &blk.conv1.w, ParamKind::Weight);
    detail::visit_bn(blk.bn1, p + ".bn1", add, stats);
    add(p + ".conv2.w", &blk.conv2.w, ParamKind::Weight);
    detail::visit_bn(blk.bn2, p + ".bn2", add, stats);
    add(p + ".gate.w0", &blk.gate.w0, ParamKind::Weight);
    add(p + ".gate.bn.gamma", &blk.gate.bn_gamma, ParamKind::BnGamma);
    add(p + ".gate.bn.beta", &blk.gate.bn_beta, ParamKind::BnBeta);
    if (stats) {
      stats->push_back({p + ".gate.bn.running_mean", &blk.gate.bn_mean});
      stats->push_back({p + ".gate.bn.running_var", &blk.gate.bn_var});
    }
    add(p + ".gate.w1", &blk.gate.w1, ParamKind::Weight);
    add(p + ".gate.b1", &blk.gate.b1, ParamKind::Bias);
    if (blk.projected) {
      add(p + ".shortcut.conv.w", &blk.sc_conv.w, ParamKind::Weight);
      detail::visit_bn(blk.sc_bn, p + ".shortcut.bn", add, stats);
    }
  }
  auto& h = m.heads;
  add("proj.fc1.w", &h.p1.w, ParamKind::Weight);
  detail::visit_bn(h.p1_bn, "proj.bn1", add, stats);
  add("proj.fc2.w", &h.p2.w, ParamKind::Weight);
  detail::visit_bn(h.p2_bn, "proj.bn2", add, stats);  // stats only, no affine
  add("pred.fc1.w", &h.q1.w, ParamKind::Weight);
  detail::visit_bn(h.q1_bn, "pred.bn1", add, stats);
  add("pred.fc2.w", &h.q2.w, ParamKind::Weight);
  add("pred.fc2.b", &h.q2.b, ParamKind::Bias);
  return out;
}

}  // namespace dcs
