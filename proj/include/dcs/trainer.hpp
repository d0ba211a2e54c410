#pragma once

#if __has_include(<malloc.h>)
#include <malloc.h>
#endif

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "dcs/backbone.hpp"
#include "dcs/checkpoint.hpp"
#include "dcs/data.hpp"
#include "dcs/flops.hpp"
#include "dcs/heads.hpp"
#include "dcs/model.hpp"
#include "dcs/rng.hpp"

namespace dcs {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 128;
  double base_lr = 0.01;
  int warmup_epochs = 5;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 1;
  BudgetConfig budget;
  double tau_start = 5.0;  // relaxation temperature, annealed per epoch
  double tau_end = 0.5;
  int checkpoint_every = 10;
  std::string checkpoint_path;  // empty: no checkpoints written
  std::string metrics_path;     // empty: no CSV written

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2 (batch norm)");
    if (base_lr <= 0.0) throw ConfigError("train.base_lr must be positive");
    if (warmup_epochs < 0 || warmup_epochs >= epochs)
      throw ConfigError("train.warmup_epochs must lie in [0, epochs)");
    if (momentum < 0.0 || momentum >= 1.0)
      throw ConfigError("train.momentum must lie in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
    if (tau_end <= 0.0 || tau_start < tau_end)
      throw ConfigError("train.tau schedule needs tau_start >= tau_end > 0");
    if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be >= 1");
  }
};

// Linear ramp from zero over the warmup fraction, then cosine decay to zero.
inline double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg) {
  if (step < 0 || step >= total_steps) throw Error("lr_at: step outside [0, total_steps)");
  const std::int64_t warmup = total_steps * cfg.warmup_epochs / cfg.epochs;
  if (step < warmup)
    return cfg.base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double t =
      static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// Exponential anneal tau_start -> tau_end, held fixed within each epoch.
inline double tau_at(int epoch, const TrainConfig& cfg) {
  if (cfg.epochs <= 1) return cfg.tau_start;
  const double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1);
  return cfg.tau_start * std::pow(cfg.tau_end / cfg.tau_start, t);
}

template <typename S>
struct SgdState {
  std::map<std::string, std::vector<S>> velocity;  // keyed by parameter name
};

// Weight decay applies to weight matrices only; the exclusion list is every
// bias (the gate's +1-initialized output bias included) and all batch-norm
// affine parameters.
inline bool weight_decay_applies(ParamKind kind) { return kind == ParamKind::Weight; }

template <typename S>
void sgd_step(Model<S>& m, SgdState<S>& opt, double lr, const TrainConfig& cfg) {
  const S mu = static_cast<S>(cfg.momentum);
  for (auto& p : param_refs(m)) {
    Tensor<S>& t = *p.tensor;
    auto& vel = opt.velocity[p.name];
    vel.resize(static_cast<std::size_t>(t.size()), S(0));
    const S wd = weight_decay_applies(p.kind) ? static_cast<S>(cfg.weight_decay) : S(0);
    const S* g = t.has_grad() ? t.grad_data() : nullptr;
    for (std::int64_t i = 0; i < t.size(); ++i) {
      const S grad = (g ? g[i] : S(0)) + wd * t.data()[i];
      vel[static_cast<std::size_t>(i)] = mu * vel[static_cast<std::size_t>(i)] + grad;
      t.data()[i] -= static_cast<S>(lr) * vel[static_cast<std::size_t>(i)];
    }
  }
}

struct StepMetrics {
  double loss_ssl = 0.0;
  double loss_gate = 0.0;
  double flop_ratio = 0.0;  // hard-mask dynamic / dense, gated blocks only
  double lr = 0.0;
};

struct EpochMetrics {
  int epoch = 0;
  double loss_ssl = 0.0;
  double loss_gate = 0.0;
  double flop_ratio = 0.0;
  double lr = 0.0;
  double tau = 0.0;
};

// One SGD step of L = L_SSL + L_G on a pair of augmented views. Both views'
// gate decisions feed the ledger (their per-block dynamic counts are averaged).
template <typename S>
StepMetrics train_step(Model<S>& m, SgdState<S>& opt, const Tensor<S>& view1,
                       const Tensor<S>& view2, const std::vector<BlockGeometry>& geoms,
                       const TrainConfig& cfg, double tau, double lr, double progress,
                       Rng& rng) {
  for (auto& p : param_refs(m)) p.tensor->zero_grad();

  std::vector<GateState<S>> gs1, gs2;
  auto e1 = encode(m.backbone, view1, GateMode::Train, tau, &rng, &gs1);
  auto e2 = encode(m.backbone, view2, GateMode::Train, tau, &rng, &gs2);
  auto z1 = project(m.heads, e1, true);
  auto z2 = project(m.heads, e2, true);
  auto p1 = predict(m.heads, z1, true);
  auto p2 = predict(m.heads, z2, true);
  auto l_ssl = simsiam_loss(p1, p2, z1, z2);

  std::vector<BlockFlops<S>> blocks;
  std::int64_t dense_total = 0;
  double dynamic_total = 0.0;
  for (std::size_t i = 0; i < geoms.size(); ++i) {
    BlockFlops<S> b;
    b.dense = dense_flops(geoms[i]);
    b.dynamic = scale(add(dynamic_flops(gs1[i], geoms[i]), dynamic_flops(gs2[i], geoms[i])),
                      S(0.5));
    dense_total += b.dense;
    dynamic_total += static_cast<double>(b.dynamic.item());
    blocks.push_back(std::move(b));
  }
  auto l_gate = total_gating_loss(blocks, progress, cfg.budget);
  auto loss = add(l_ssl, l_gate);

  StepMetrics out;
  out.loss_ssl = static_cast<double>(l_ssl.item());
  out.loss_gate = static_cast<double>(l_gate.item());
  out.flop_ratio = dynamic_total / static_cast<double>(dense_total);
  out.lr = lr;
  if (!std::isfinite(out.loss_ssl) || !std::isfinite(out.loss_gate))
    throw NumericFault("training loss is not finite (loss_ssl=" +
                       std::to_string(out.loss_ssl) +
                       ", loss_gate=" + std::to_string(out.loss_gate) + ")");

  dcs::backward(loss, /*release_graph=*/true);
  sgd_step(m, opt, lr, cfg);
  return out;
}

template <typename S>
void store_opt(Checkpoint& ck, const SgdState<S>& opt) {
  for (const auto& [name, vel] : opt.velocity) {
    Blob b;
    b.name = "opt/" + name;
    b.shape = {static_cast<int>(vel.size())};
    b.data.assign(vel.begin(), vel.end());
    ck.blobs.push_back(std::move(b));
  }
}

template <typename S>
void load_opt(const Checkpoint& ck, SgdState<S>& opt) {
  opt.velocity.clear();
  for (const auto& b : ck.blobs)
    if (b.name.rfind("opt/", 0) == 0)
      opt.velocity[b.name.substr(4)] = std::vector<S>(b.data.begin(), b.data.end());
}

namespace detail {

inline std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

template <typename S>
Tensor<S> stack_views(const std::vector<Tensor<float>>& views) {
  const int b = static_cast<int>(views.size());
  const auto& s = views[0].shape();
  auto out = Tensor<S>::zeros({b, s[0], s[1], s[2]});
  const std::int64_t per = views[0].size();
  for (int i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < per; ++j)
      out.data()[i * per + j] = static_cast<S>(views[static_cast<std::size_t>(i)].data()[j]);
  return out;
}

}  // namespace detail

struct FitResult {
  std::vector<EpochMetrics> history;
};

// Full training loop. Deterministic given cfg.seed: every epoch derives its
// own RNG stream, so resuming from a checkpoint at epoch k replays epochs
// k+1.. exactly as an uninterrupted run would. Incomplete trailing batches
// are dropped (batch norm needs >= 2 samples). `stop_after_epoch` simulates
// an interruption after that many completed epochs while keeping every
// schedule tied to the full cfg.epochs horizon.
template <typename S>
FitResult fit(const std::vector<LabeledImage>& images, Model<S>& m, SgdState<S>& opt,
              const TrainConfig& cfg, const AugmentationConfig& aug, int start_epoch = 0,
              int stop_after_epoch = -1) {
#if defined(__GLIBC__) && defined(M_MMAP_THRESHOLD)
  // Long trainings interleave short-lived MB-scale activation buffers with
  // small graph bookkeeping in one heap arena, and the arena fragments
  // without bound (hundreds of MB per thousand steps). Routing every buffer
  // above 256 KB through mmap keeps them out of the arena entirely, so its
  // frees return to the OS; the ~10% mmap churn cost is the price of a flat
  // resident footprint.
  [[maybe_unused]] static const int malloc_tuned = mallopt(M_MMAP_THRESHOLD, 256 << 10);
#endif
  cfg.validate();
  aug.validate();
  const std::int64_t steps_per_epoch =
      static_cast<std::int64_t>(images.size()) / cfg.batch_size;
  if (steps_per_epoch < 1)
    throw ConfigError("train.batch_size " + std::to_string(cfg.batch_size) +
                      " exceeds the dataset size " + std::to_string(images.size()));
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  const auto geoms = block_geometries(m.backbone.cfg);

  FitResult result;
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const double tau = tau_at(epoch, cfg);
    Rng rng = derive_rng(cfg.seed, {0xE90C, static_cast<std::uint64_t>(epoch)});

    std::vector<std::size_t> order(images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    EpochMetrics em;
    em.epoch = epoch;
    em.tau = tau;
    for (std::int64_t step = 0; step < steps_per_epoch; ++step) {
      std::vector<Tensor<float>> v1s, v2s;
      v1s.reserve(static_cast<std::size_t>(cfg.batch_size));
      v2s.reserve(static_cast<std::size_t>(cfg.batch_size));
      for (int i = 0; i < cfg.batch_size; ++i) {
        const auto& img = images[order[static_cast<std::size_t>(step * cfg.batch_size + i)]];
        auto [a, b] = two_views(img, aug, rng);
        v1s.push_back(std::move(a));
        v2s.push_back(std::move(b));
      }
      auto view1 = detail::stack_views<S>(v1s);
      auto view2 = detail::stack_views<S>(v2s);

      const std::int64_t global_step = epoch * steps_per_epoch + step;
      const double lr = lr_at(global_step, total_steps, cfg);
      const double progress =
          static_cast<double>(global_step) / static_cast<double>(total_steps);
      StepMetrics sm;
      try {
        sm = train_step(m, opt, view1, view2, geoms, cfg, tau, lr, progress, rng);
      } catch (const NumericFault& e) {
        throw NumericFault(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(step));
      }
      em.loss_ssl += sm.loss_ssl;
      em.loss_gate += sm.loss_gate;
      em.flop_ratio += sm.flop_ratio;
      em.lr = sm.lr;
    }
    em.loss_ssl /= static_cast<double>(steps_per_epoch);
    em.loss_gate /= static_cast<double>(steps_per_epoch);
    em.flop_ratio /= static_cast<double>(steps_per_epoch);
    result.history.push_back(em);

    if (!cfg.metrics_path.empty()) {
      const bool fresh = epoch == 0;
      std::ofstream csv(cfg.metrics_path,
                        fresh ? (std::ios::out | std::ios::trunc) : std::ios::app);
      if (!csv) throw IoError("cannot write metrics to '" + cfg.metrics_path + "'");
      if (fresh) csv << "epoch,loss_ssl,loss_gate,flop_ratio,lr,tau\n";
      csv << epoch << ',' << detail::format_metric(em.loss_ssl) << ','
          << detail::format_metric(em.loss_gate) << ','
          << detail::format_metric(em.flop_ratio) << ',' << detail::format_metric(em.lr)
          << ',' << detail::format_metric(em.tau) << '\n';
    }

    const bool last = epoch + 1 == cfg.epochs;
    if (!cfg.checkpoint_path.empty() &&
        ((epoch + 1) % cfg.checkpoint_every == 0 || last)) {
      Checkpoint ck;
      store_config_meta(ck, m.backbone.cfg, m.heads.cfg);
      ck.set_meta("epoch", std::to_string(epoch + 1));
      ck.set_meta("seed", std::to_string(cfg.seed));
      ck.set_meta("budget.t_d", detail::format_metric(cfg.budget.t_d));
      store_model(ck, m);
      store_opt(ck, opt);
      save_checkpoint(cfg.checkpoint_path, ck);
    }
#if defined(__GLIBC__)
    // Between epochs only the model, optimizer, and dataset are live, so the
    // heap's free space is maximally coalesced and returnable.
    malloc_trim(0);
#endif
    if (stop_after_epoch >= 0 && epoch + 1 >= stop_after_epoch) break;
  }
  return result;
}

}  // namespace dcs
