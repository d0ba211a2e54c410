#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <utility>
#include <vector>

#include "dcs/backbone.hpp"
#include "dcs/data.hpp"
#include "dcs/flops.hpp"
#include "dcs/gates.hpp"
#include "dcs/ops.hpp"
#include "dcs/tensor.hpp"

namespace dcs {

// Per-sample record of what the sparse executor actually computed.
struct SparseStats {
  std::vector<std::vector<int>> active;    // [block][sample] active channel count
  std::vector<std::int64_t> sample_macs;   // [sample] gated conv MACs + gate overhead
  std::int64_t dense_macs = 0;             // sum of dense_flops over gated blocks

  double mean_macs() const {
    if (sample_macs.empty()) return 0.0;
    double s = 0.0;
    for (auto v : sample_macs) s += static_cast<double>(v);
    return s / static_cast<double>(sample_macs.size());
  }
  double mean_ratio() const {
    return dense_macs == 0 ? 0.0 : mean_macs() / static_cast<double>(dense_macs);
  }
};

namespace detail {

// Evaluation-time basic block that gathers the filters of active channels and
// runs compact GEMMs, so skipped channels cost no arithmetic. Writes the raw
// conv2 output (pre-BN) for sample `b` of `raw2` and returns conv MACs spent.
template <typename S>
std::int64_t sparse_block_sample(const GatedBlock<S>& blk, const S* x, int b,
                                 const BlockGeometry& g, const std::vector<int>& act,
                                 std::vector<S>& cols1, std::vector<S>& y1,
                                 std::vector<S>& cols2, std::vector<S>& wc,
                                 Tensor<S>& raw2) {
  const int k = g.k, k2 = k * k;
  const int P1 = g.h1 * g.w1, P2 = g.h2 * g.w2;
  const int a = static_cast<int>(act.size());
  S* out = raw2.data() + static_cast<std::int64_t>(b) * g.c_out * P2;
  if (a == 0) {
    std::memset(out, 0, sizeof(S) * static_cast<std::size_t>(g.c_out) * P2);
    return 0;
  }

  // conv1: only the rows of active output channels.
  cols1.resize(static_cast<std::size_t>(k2) * g.c_in * P1);
  im2col(x, g.c_in, g.h_in, g.w_in, k, blk.conv1.stride, blk.conv1.pad, g.h1, g.w1,
         cols1.data());
  const int kc1 = k2 * g.c_in;
  wc.resize(static_cast<std::size_t>(a) * kc1);
  for (int i = 0; i < a; ++i)
    std::memcpy(wc.data() + static_cast<std::size_t>(i) * kc1,
                blk.conv1.w.data() + static_cast<std::int64_t>(act[static_cast<std::size_t>(i)]) * kc1,
                sizeof(S) * static_cast<std::size_t>(kc1));
  y1.resize(static_cast<std::size_t>(a) * P1);
  RowMap<S>(y1.data(), a, P1).noalias() =
      ConstRowMap<S>(wc.data(), a, kc1) * ConstRowMap<S>(cols1.data(), kc1, P1);

  // Folded BN + relu on the compact channel set.
  std::vector<S> scale(static_cast<std::size_t>(g.c_out)), shift(static_cast<std::size_t>(g.c_out));
  bn_fold(blk.bn1.affine ? blk.bn1.gamma.data() : nullptr,
          blk.bn1.affine ? blk.bn1.beta.data() : nullptr, blk.bn1.mean.data(),
          blk.bn1.var.data(), g.c_out, 1e-5, scale.data(), shift.data());
  for (int i = 0; i < a; ++i) {
    const int c = act[static_cast<std::size_t>(i)];
    S* row = y1.data() + static_cast<std::size_t>(i) * P1;
    for (int p = 0; p < P1; ++p) {
      const S v = row[p] * scale[static_cast<std::size_t>(c)] + shift[static_cast<std::size_t>(c)];
      row[p] = v > S(0) ? v : S(0);
    }
  }

  // conv2: consume only the active input channels.
  cols2.resize(static_cast<std::size_t>(k2) * a * P2);
  im2col(y1.data(), a, g.h1, g.w1, k, blk.conv2.stride, blk.conv2.pad, g.h2, g.w2,
         cols2.data());
  const int kc2 = k2 * a;
  wc.resize(static_cast<std::size_t>(g.c_out) * kc2);
  {
    ConstRowMap<S> wfull(blk.conv2.w.data(), g.c_out, k2 * g.c_out);
    RowMap<S> wcomp(wc.data(), g.c_out, kc2);
    for (int i = 0; i < a; ++i)
      wcomp.block(0, i * k2, g.c_out, k2) =
          wfull.block(0, act[static_cast<std::size_t>(i)] * k2, g.c_out, k2);
  }
  RowMap<S>(out, g.c_out, P2).noalias() =
      ConstRowMap<S>(wc.data(), g.c_out, kc2) * ConstRowMap<S>(cols2.data(), kc2, P2);

  return static_cast<std::int64_t>(k2) * g.c_in * a * P1 +
         static_cast<std::int64_t>(k2) * a * g.c_out * P2;
}

}  // namespace detail

// Evaluation-mode forward that decides each block's gates first and then
// physically computes only the active channels. Output matches the dense
// masked forward within float accumulation error (bitwise when every gate
// is on), and the per-sample MAC counts match the ledger exactly.
template <typename S>
std::pair<Tensor<S>, SparseStats> sparse_forward(Backbone<S>& net, const Tensor<S>& batch) {
  NoGradGuard guard;
  const auto geoms = block_geometries(net.cfg);
  const int B = batch.dim(0);

  SparseStats stats;
  stats.active.resize(geoms.size());
  stats.sample_macs.assign(static_cast<std::size_t>(B), 0);
  for (const auto& g : geoms) stats.dense_macs += dense_flops(g);

  auto x = relu(detail::bn_forward(conv2d(batch, net.stem.w, net.stem.stride, net.stem.pad),
                                   net.stem_bn, false));

  std::vector<S> cols1, y1, cols2, wc;
  for (std::size_t l = 0; l < net.blocks.size(); ++l) {
    auto& blk = net.blocks[l];
    const auto& g = geoms[l];

    auto logits = gate_logits(x, blk.gate, false);
    auto gs = sample_mask_eval(logits);
    const Tensor<S>& mask = gs.mask;

    auto raw2 = Tensor<S>::zeros({B, g.c_out, g.h2, g.w2});
    stats.active[l].resize(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
      std::vector<int> act;
      for (int c = 0; c < g.c_out; ++c)
        if (mask.data()[static_cast<std::int64_t>(b) * g.c_out + c] >= S(0.5)) act.push_back(c);
      stats.active[l][static_cast<std::size_t>(b)] = static_cast<int>(act.size());
      const S* xb = x.data() + static_cast<std::int64_t>(b) * g.c_in * g.h_in * g.w_in;
      const std::int64_t conv_macs =
          detail::sparse_block_sample(blk, xb, b, g, act, cols1, y1, cols2, wc, raw2);
      stats.sample_macs[static_cast<std::size_t>(b)] += conv_macs + gate_overhead(g);
    }

    auto y2 = detail::bn_forward(raw2, blk.bn2, false);
    Tensor<S> sc = x;
    if (blk.projected)
      sc = detail::bn_forward(conv2d(x, blk.sc_conv.w, blk.sc_conv.stride, blk.sc_conv.pad),
                              blk.sc_bn, false);
    x = relu(add(y2, sc));
  }

  return {gap2d(x), std::move(stats)};
}

// Aggregate budget measurement over a dataset split.
struct BudgetReport {
  double mean_ratio = 0.0;                  // measured gated MACs / dense gated MACs
  double mean_macs = 0.0;
  std::int64_t dense_macs = 0;
  std::int64_t samples = 0;
  std::vector<double> block_ratio;          // per block: mean dynamic / dense
  std::vector<double> block_active_mean;    // per block: mean active channels
  std::vector<std::int64_t> histogram;      // per-sample ratio in bins of 0.1, last = >= 1.0
};

template <typename S>
BudgetReport measure_budget(Backbone<S>& net, const std::vector<LabeledImage>& images,
                            int batch_size) {
  if (images.empty()) throw DimError("measure_budget: empty split");
  const auto geoms = block_geometries(net.cfg);
  BudgetReport rep;
  rep.block_ratio.assign(geoms.size(), 0.0);
  rep.block_active_mean.assign(geoms.size(), 0.0);
  rep.histogram.assign(11, 0);
  for (const auto& g : geoms) rep.dense_macs += dense_flops(g);

  double total_macs = 0.0;
  std::vector<double> block_macs(geoms.size(), 0.0);
  for (std::size_t start = 0; start < images.size();
       start += static_cast<std::size_t>(batch_size)) {
    const int b = static_cast<int>(
        std::min<std::size_t>(static_cast<std::size_t>(batch_size), images.size() - start));
    auto batch = Tensor<S>::zeros({b, 3, net.cfg.side, net.cfg.side});
    for (int i = 0; i < b; ++i) {
      const auto& px = images[start + static_cast<std::size_t>(i)].pixels;
      for (std::int64_t j = 0; j < px.size(); ++j)
        batch.data()[static_cast<std::int64_t>(i) * px.size() + j] = static_cast<S>(px.data()[j]);
    }
    auto [emb, st] = sparse_forward(net, batch);
    (void)emb;
    for (int i = 0; i < b; ++i) {
      const double macs = static_cast<double>(st.sample_macs[static_cast<std::size_t>(i)]);
      total_macs += macs;
      const double r = macs / static_cast<double>(rep.dense_macs);
      const int bin = std::min(10, static_cast<int>(r * 10.0));
      rep.histogram[static_cast<std::size_t>(std::max(0, bin))]++;
    }
    for (std::size_t l = 0; l < geoms.size(); ++l)
      for (int i = 0; i < b; ++i) {
        const int a = st.active[l][static_cast<std::size_t>(i)];
        block_macs[l] += static_cast<double>(hard_dynamic_flops(geoms[l], a));
        rep.block_active_mean[l] += a;
      }
    rep.samples += b;
  }
  rep.mean_macs = total_macs / static_cast<double>(rep.samples);
  rep.mean_ratio = rep.mean_macs / static_cast<double>(rep.dense_macs);
  for (std::size_t l = 0; l < geoms.size(); ++l) {
    rep.block_ratio[l] = block_macs[l] / static_cast<double>(rep.samples) /
                         static_cast<double>(dense_flops(geoms[l]));
    rep.block_active_mean[l] /= static_cast<double>(rep.samples);
  }
  return rep;
}

}  // namespace dcs
