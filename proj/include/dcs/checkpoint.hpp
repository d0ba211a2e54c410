#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dcs/common.hpp"
#include "dcs/heads.hpp"
#include "dcs/model.hpp"

namespace dcs {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Versioned binary container: 8-byte magic "DCSCKPT\n", u32 format version,
// key=value metadata strings, then named float32 blobs (name, shape, raw
// little-endian values). Parameters, BN running stats, and optimizer slots
// all travel as blobs; configuration facts travel as metadata.
struct Blob {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<Blob> blobs;

  const Blob* find(const std::string& name) const {
    for (const auto& b : blobs)
      if (b.name == name) return &b;
    return nullptr;
  }
  const std::string* meta_value(const std::string& key) const {
    for (const auto& kv : meta)
      if (kv.first == key) return &kv.second;
    return nullptr;
  }
  void set_meta(const std::string& key, const std::string& value) {
    for (auto& kv : meta)
      if (kv.first == key) {
        kv.second = value;
        return;
      }
    meta.emplace_back(key, value);
  }
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

namespace detail {

inline std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace detail

template <typename S>
void store_model(Checkpoint& ck, Model<S>& m) {
  std::vector<StatRef<S>> stats;
  for (const auto& p : param_refs(m, &stats)) {
    Blob b;
    b.name = p.name;
    b.shape = p.tensor->shape();
    b.data.reserve(static_cast<std::size_t>(p.tensor->size()));
    for (std::int64_t i = 0; i < p.tensor->size(); ++i)
      b.data.push_back(static_cast<float>(p.tensor->data()[i]));
    ck.blobs.push_back(std::move(b));
  }
  for (const auto& s : stats) {
    Blob b;
    b.name = s.name;
    b.shape = s.tensor->shape();
    for (std::int64_t i = 0; i < s.tensor->size(); ++i)
      b.data.push_back(static_cast<float>(s.tensor->data()[i]));
    ck.blobs.push_back(std::move(b));
  }
}

template <typename S>
void load_model(const Checkpoint& ck, Model<S>& m) {
  std::vector<StatRef<S>> stats;
  auto fill = [&ck](const std::string& name, Tensor<S>* t) {
    const Blob* b = ck.find(name);
    if (!b) throw CheckpointMismatch("checkpoint is missing tensor '" + name + "'");
    if (b->shape != t->shape())
      throw CheckpointMismatch("checkpoint tensor '" + name + "' has shape [" +
                               detail::join_ints(b->shape) + "], model expects [" +
                               detail::join_ints(t->shape()) + "]");
    for (std::int64_t i = 0; i < t->size(); ++i)
      t->data()[i] = static_cast<S>(b->data[static_cast<std::size_t>(i)]);
  };
  for (const auto& p : param_refs(m, &stats)) fill(p.name, p.tensor);
  for (const auto& s : stats) fill(s.name, s.tensor);
}

inline void store_config_meta(Checkpoint& ck, const BackboneConfig& bcfg,
                              const HeadsConfig& hcfg) {
  ck.set_meta("format", "gated-simsiam-model");
  ck.set_meta("backbone.stage_widths", detail::join_ints(bcfg.stage_widths));
  ck.set_meta("backbone.blocks_per_stage", std::to_string(bcfg.blocks_per_stage));
  ck.set_meta("backbone.side", std::to_string(bcfg.side));
  ck.set_meta("backbone.reduction", std::to_string(bcfg.reduction));
  ck.set_meta("backbone.in_channels", std::to_string(bcfg.in_channels));
  ck.set_meta("heads.d_hidden", std::to_string(hcfg.d_hidden));
  ck.set_meta("heads.d_proj", std::to_string(hcfg.d_proj));
  ck.set_meta("heads.d_pred_hidden", std::to_string(hcfg.d_pred_hidden));
}

inline void check_config_meta(const Checkpoint& ck, const BackboneConfig& bcfg,
                              const HeadsConfig& hcfg) {
  auto expect = [&ck](const std::string& key, const std::string& want) {
    const std::string* got = ck.meta_value(key);
    if (!got)
      throw CheckpointMismatch("checkpoint metadata is missing '" + key + "'");
    if (*got != want)
      throw CheckpointMismatch("checkpoint was written with " + key + "=" + *got +
                               " but the current configuration has " + key + "=" + want);
  };
  expect("backbone.stage_widths", detail::join_ints(bcfg.stage_widths));
  expect("backbone.blocks_per_stage", std::to_string(bcfg.blocks_per_stage));
  expect("backbone.side", std::to_string(bcfg.side));
  expect("backbone.reduction", std::to_string(bcfg.reduction));
  expect("backbone.in_channels", std::to_string(bcfg.in_channels));
  expect("heads.d_hidden", std::to_string(hcfg.d_hidden));
  expect("heads.d_proj", std::to_string(hcfg.d_proj));
  expect("heads.d_pred_hidden", std::to_string(hcfg.d_pred_hidden));
}

}  // namespace dcs
