#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcs/backbone.hpp"
#include "dcs/data.hpp"
#include "dcs/sparse_infer.hpp"
#include "dcs/tensor.hpp"

namespace dcs {

// Backbone representations for a labeled split, rows L2-normalized so the
// nearest-neighbour metric is a plain dot product.
template <typename S>
struct EmbeddingSet {
  Tensor<S> embeddings;  // [N, d]
  std::vector<int> labels;
};

namespace detail {

template <typename S>
Tensor<S> image_batch(const std::vector<LabeledImage>& images, std::size_t start, int count,
                      int channels, int side) {
  Tensor<S> batch({count, channels, side, side});
  const std::int64_t per = static_cast<std::int64_t>(channels) * side * side;
  for (int i = 0; i < count; ++i) {
    const auto& px = images[start + static_cast<std::size_t>(i)].pixels;
    if (px.size() != per) throw DimError("image does not match the backbone input shape");
    for (std::int64_t j = 0; j < per; ++j)
      batch.data()[static_cast<std::int64_t>(i) * per + j] = static_cast<S>(px.data()[j]);
  }
  return batch;
}

}  // namespace detail

// Deterministic evaluation-mode embeddings (hard gates, running BN stats).
template <typename S>
EmbeddingSet<S> extract_embeddings(Backbone<S>& net, const std::vector<LabeledImage>& images,
                                   int batch_size) {
  if (images.empty()) throw DimError("extract_embeddings: empty split");
  if (batch_size < 1) throw ConfigError("extract_embeddings: batch_size must be >= 1");
  NoGradGuard guard;
  const int d = net.cfg.d_enc();
  EmbeddingSet<S> set;
  set.embeddings = Tensor<S>({static_cast<int>(images.size()), d});
  set.labels.reserve(images.size());
  for (const auto& im : images) set.labels.push_back(im.label);

  for (std::size_t start = 0; start < images.size();
       start += static_cast<std::size_t>(batch_size)) {
    const int b = static_cast<int>(
        std::min<std::size_t>(static_cast<std::size_t>(batch_size), images.size() - start));
    auto batch = detail::image_batch<S>(images, start, b, net.cfg.in_channels, net.cfg.side);
    auto emb = encode(net, batch, GateMode::Eval, 0.0, nullptr, nullptr);
    for (int i = 0; i < b; ++i) {
      const S* src = emb.data() + static_cast<std::int64_t>(i) * d;
      S* dst = set.embeddings.data() + (static_cast<std::int64_t>(start) + i) * d;
      double norm = 0.0;
      for (int j = 0; j < d; ++j) norm += static_cast<double>(src[j]) * src[j];
      const S inv = norm > 0.0 ? static_cast<S>(1.0 / std::sqrt(norm)) : S(0);
      for (int j = 0; j < d; ++j) dst[j] = src[j] * inv;
    }
  }
  return set;
}

// 1-nearest-neighbour accuracy under cosine similarity. Equal similarities
// resolve to the lowest reference index, so results are order-stable.
template <typename S>
double knn_accuracy(const EmbeddingSet<S>& train, const EmbeddingSet<S>& test) {
  const int n_train = train.embeddings.dim(0);
  const int n_test = test.embeddings.dim(0);
  const int d = train.embeddings.dim(1);
  if (n_train == 0 || n_test == 0) throw DimError("knn_accuracy: empty embedding set");
  if (test.embeddings.dim(1) != d) throw DimError("knn_accuracy: dimension mismatch");

  detail::ConstRowMap<S> tr(train.embeddings.data(), n_train, d);
  std::int64_t correct = 0;
  std::vector<S> sims(static_cast<std::size_t>(n_train));
  for (int i = 0; i < n_test; ++i) {
    detail::ConstRowMap<S> q(test.embeddings.data() + static_cast<std::int64_t>(i) * d, 1, d);
    detail::RowMap<S>(sims.data(), 1, n_train).noalias() = q * tr.transpose();
    int best = 0;
    for (int j = 1; j < n_train; ++j)
      if (sims[static_cast<std::size_t>(j)] > sims[static_cast<std::size_t>(best)]) best = j;
    if (train.labels[static_cast<std::size_t>(best)] == test.labels[static_cast<std::size_t>(i)])
      ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n_test);
}

// How often each gated channel fires across a split, from the deterministic
// evaluation rule. Counts are exact integers so the always-on / always-off
// categories are crisp, not a float comparison.
struct ChannelUsage {
  std::vector<std::vector<std::int64_t>> on_counts;  // [block][channel]
  std::int64_t samples = 0;

  double frequency(std::size_t block, std::size_t channel) const {
    return samples == 0 ? 0.0
                        : static_cast<double>(on_counts[block][channel]) /
                              static_cast<double>(samples);
  }
};

enum class UsageCategory { AlwaysOff, Mixed, AlwaysOn };

inline UsageCategory categorize(std::int64_t on, std::int64_t total) {
  if (on == 0) return UsageCategory::AlwaysOff;
  if (on == total) return UsageCategory::AlwaysOn;
  return UsageCategory::Mixed;
}

inline const char* usage_name(UsageCategory c) {
  switch (c) {
    case UsageCategory::AlwaysOff: return "always_off";
    case UsageCategory::AlwaysOn: return "always_on";
    default: return "mixed";
  }
}

template <typename S>
ChannelUsage channel_usage(Backbone<S>& net, const std::vector<LabeledImage>& images,
                           int batch_size) {
  if (images.empty()) throw DimError("channel_usage: empty split");
  NoGradGuard guard;
  const auto geoms = block_geometries(net.cfg);
  ChannelUsage usage;
  usage.on_counts.resize(geoms.size());
  for (std::size_t l = 0; l < geoms.size(); ++l)
    usage.on_counts[l].assign(static_cast<std::size_t>(geoms[l].c_out), 0);

  for (std::size_t start = 0; start < images.size();
       start += static_cast<std::size_t>(batch_size)) {
    const int b = static_cast<int>(
        std::min<std::size_t>(static_cast<std::size_t>(batch_size), images.size() - start));
    auto batch = detail::image_batch<S>(images, start, b, net.cfg.in_channels, net.cfg.side);
    std::vector<GateState<S>> states;
    encode(net, batch, GateMode::Eval, 0.0, nullptr, &states);
    for (std::size_t l = 0; l < states.size(); ++l) {
      const int c_out = geoms[l].c_out;
      const S* hard = states[l].hard.data();
      for (int i = 0; i < b; ++i)
        for (int c = 0; c < c_out; ++c)
          if (hard[static_cast<std::int64_t>(i) * c_out + c] >= S(0.5))
            usage.on_counts[l][static_cast<std::size_t>(c)]++;
    }
    usage.samples += b;
  }
  return usage;
}

// channel_usage.csv (one row per gated channel) plus summary.json with the
// headline numbers a run leaves behind.
inline void emit_reports(const std::string& out_dir, const ChannelUsage& usage,
                         const BudgetReport& budget, double knn) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);

  {
    std::ofstream csv(fs::path(out_dir) / "channel_usage.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write channel_usage.csv under " + out_dir);
    csv << "block,channel,frequency,category\n";
    std::ostringstream row;
    row.precision(10);
    for (std::size_t l = 0; l < usage.on_counts.size(); ++l)
      for (std::size_t c = 0; c < usage.on_counts[l].size(); ++c) {
        const auto cat = categorize(usage.on_counts[l][c], usage.samples);
        row.str("");
        row << "block" << l << "," << c << "," << usage.frequency(l, c) << ","
            << usage_name(cat) << "\n";
        csv << row.str();
      }
    if (!csv.flush()) throw IoError("failed writing channel_usage.csv under " + out_dir);
  }

  nlohmann::ordered_json j;
  j["samples"] = usage.samples;
  j["knn_accuracy"] = knn;
  j["flops"] = {{"dense_macs", budget.dense_macs},
                {"mean_macs", budget.mean_macs},
                {"mean_ratio", budget.mean_ratio}};
  auto blocks = nlohmann::ordered_json::array();
  std::int64_t off = 0, on = 0, mixed = 0, total = 0;
  for (std::size_t l = 0; l < usage.on_counts.size(); ++l) {
    std::int64_t b_off = 0, b_on = 0;
    for (auto cnt : usage.on_counts[l]) {
      switch (categorize(cnt, usage.samples)) {
        case UsageCategory::AlwaysOff: ++b_off; ++off; break;
        case UsageCategory::AlwaysOn: ++b_on; ++on; break;
        default: ++mixed; break;
      }
    }
    total += static_cast<std::int64_t>(usage.on_counts[l].size());
    nlohmann::ordered_json b;
    b["name"] = "block" + std::to_string(l);
    b["channels"] = usage.on_counts[l].size();
    b["flop_ratio"] = l < budget.block_ratio.size() ? budget.block_ratio[l] : 0.0;
    b["active_mean"] = l < budget.block_active_mean.size() ? budget.block_active_mean[l] : 0.0;
    b["always_off"] = b_off;
    b["always_on"] = b_on;
    blocks.push_back(std::move(b));
  }
  j["blocks"] = std::move(blocks);
  j["channels"] = {{"total", total},
                   {"always_off", off},
                   {"always_on", on},
                   {"mixed", mixed}};
  j["ratio_histogram"] = budget.histogram;

  std::ofstream js(fs::path(out_dir) / "summary.json", std::ios::trunc);
  if (!js) throw IoError("cannot write summary.json under " + out_dir);
  js << j.dump(2) << "\n";
  if (!js.flush()) throw IoError("failed writing summary.json under " + out_dir);
}

}  // namespace dcs
