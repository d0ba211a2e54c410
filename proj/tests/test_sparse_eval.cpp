#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcs/backbone.hpp"
#include "dcs/data.hpp"
#include "dcs/eval.hpp"
#include "dcs/flops.hpp"
#include "dcs/rng.hpp"
#include "dcs/sparse_infer.hpp"

using dcs::BackboneConfig;
using dcs::Tensor;

namespace {

BackboneConfig small_cfg(int blocks_per_stage = 1) {
  BackboneConfig cfg;
  cfg.stage_widths = {8, 16};
  cfg.blocks_per_stage = blocks_per_stage;
  cfg.side = 16;
  cfg.reduction = 4;
  return cfg;
}

dcs::Backbone<float> small_net(std::uint64_t seed, int blocks_per_stage = 1) {
  dcs::Rng rng(seed);
  return dcs::make_backbone<float>(small_cfg(blocks_per_stage), rng);
}

void set_gate_bias(dcs::Backbone<float>& net, float value) {
  for (auto& blk : net.blocks)
    for (std::int64_t i = 0; i < blk.gate.b1.size(); ++i) blk.gate.b1.data()[i] = value;
}

// Small random biases around zero so the eval threshold splits per sample.
void mix_gates(dcs::Backbone<float>& net, std::uint64_t seed) {
  dcs::Rng rng(seed);
  for (auto& blk : net.blocks) {
    for (std::int64_t i = 0; i < blk.gate.b1.size(); ++i)
      blk.gate.b1.data()[i] = static_cast<float>(rng.uniform(-0.3, 0.3));
    for (std::int64_t i = 0; i < blk.gate.w1.size(); ++i)
      blk.gate.w1.data()[i] = static_cast<float>(rng.uniform(-2.0, 2.0));
  }
}

Tensor<float> random_batch(int b, int side, std::uint64_t seed) {
  dcs::Rng rng(seed);
  Tensor<float> x({b, 3, side, side});
  for (std::int64_t i = 0; i < x.size(); ++i)
    x.data()[i] = static_cast<float>(rng.uniform(0.0, 1.0));
  return x;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           (tag + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("sparse forward is bitwise dense when every gate is open") {
  for (int bps : {1, 2}) {
    auto net = small_net(11, bps);
    set_gate_bias(net, 50.0f);
    auto x = random_batch(5, net.cfg.side, 21);

    auto dense = dcs::encode(net, x, dcs::GateMode::Eval, 0.0, nullptr, nullptr);
    auto [sparse, stats] = dcs::sparse_forward(net, x);

    REQUIRE(sparse.size() == dense.size());
    CHECK(std::memcmp(sparse.data(), dense.data(),
                      sizeof(float) * static_cast<std::size_t>(dense.size())) == 0);

    const auto geoms = dcs::block_geometries(net.cfg);
    std::int64_t full = 0;
    for (const auto& g : geoms) full += dcs::dense_flops(g) + dcs::gate_overhead(g);
    for (auto m : stats.sample_macs) CHECK(m == full);
    for (std::size_t l = 0; l < geoms.size(); ++l)
      for (int a : stats.active[l]) CHECK(a == geoms[l].c_out);
    std::int64_t overhead = 0;
    for (const auto& g : geoms) overhead += dcs::gate_overhead(g);
    CHECK(stats.dense_macs == full - overhead);
  }
}

TEST_CASE("closed gates cost exactly the gate overhead and nothing else") {
  auto net = small_net(13);
  set_gate_bias(net, -50.0f);
  auto x = random_batch(4, net.cfg.side, 31);

  auto dense = dcs::encode(net, x, dcs::GateMode::Eval, 0.0, nullptr, nullptr);
  auto [sparse, stats] = dcs::sparse_forward(net, x);
  CHECK(std::memcmp(sparse.data(), dense.data(),
                    sizeof(float) * static_cast<std::size_t>(dense.size())) == 0);

  const auto geoms = dcs::block_geometries(net.cfg);
  std::int64_t overhead = 0;
  for (const auto& g : geoms) overhead += dcs::gate_overhead(g);
  for (auto m : stats.sample_macs) CHECK(m == overhead);
  for (const auto& per_block : stats.active)
    for (int a : per_block) CHECK(a == 0);

  SUBCASE("a single dark block contributes zero conv work") {
    auto net2 = small_net(13);
    set_gate_bias(net2, 50.0f);
    for (std::int64_t i = 0; i < net2.blocks[0].gate.b1.size(); ++i)
      net2.blocks[0].gate.b1.data()[i] = -50.0f;
    auto [emb, st] = dcs::sparse_forward(net2, x);
    (void)emb;
    std::int64_t expect = dcs::gate_overhead(geoms[0]);
    for (std::size_t l = 1; l < geoms.size(); ++l)
      expect += dcs::dense_flops(geoms[l]) + dcs::gate_overhead(geoms[l]);
    for (auto m : st.sample_macs) CHECK(m == expect);
    for (int a : st.active[0]) CHECK(a == 0);
  }
}

TEST_CASE("sparse output tracks the masked dense path under mixed gates") {
  for (std::uint64_t seed : {101u, 202u, 303u}) {
    auto net = small_net(seed, 2);
    mix_gates(net, seed * 7 + 1);
    auto x = random_batch(16, net.cfg.side, seed + 5);

    std::vector<dcs::GateState<float>> states;
    auto dense = dcs::encode(net, x, dcs::GateMode::Eval, 0.0, nullptr, &states);
    auto [sparse, stats] = dcs::sparse_forward(net, x);

    float max_diff = 0.0f;
    for (std::int64_t i = 0; i < dense.size(); ++i)
      max_diff = std::max(max_diff, std::fabs(dense.data()[i] - sparse.data()[i]));
    CHECK(max_diff < 1e-5f);

    // The executor's channel decisions must be the dense rule's decisions,
    // and every sample must be billed via the per-channel cost identity.
    const auto geoms = dcs::block_geometries(net.cfg);
    REQUIRE(states.size() == stats.active.size());
    bool saw_partial = false;
    for (int b = 0; b < 16; ++b) {
      std::int64_t want = 0;
      for (std::size_t l = 0; l < states.size(); ++l) {
        int on = 0;
        const float* hard = states[l].hard.data();
        for (int c = 0; c < geoms[l].c_out; ++c)
          if (hard[static_cast<std::int64_t>(b) * geoms[l].c_out + c] >= 0.5f) ++on;
        CHECK(stats.active[l][static_cast<std::size_t>(b)] == on);
        if (on > 0 && on < geoms[l].c_out) saw_partial = true;
        want += dcs::hard_dynamic_flops(geoms[l], on);
      }
      CHECK(stats.sample_macs[static_cast<std::size_t>(b)] == want);
    }
    CHECK(saw_partial);  // the scenario must actually exercise partial masks
  }
}

TEST_CASE("budget measurement is invariant to batch size and order") {
  auto net = small_net(17, 2);
  mix_gates(net, 99);
  auto images = dcs::make_synthetic(4, 15, 16, 7);
  REQUIRE(images.size() == 60);

  auto a = dcs::measure_budget(net, images, 1);
  auto b = dcs::measure_budget(net, images, 7);
  auto c = dcs::measure_budget(net, images, 64);
  CHECK(a.samples == 60);
  CHECK(a.histogram == b.histogram);
  CHECK(a.histogram == c.histogram);
  CHECK(a.mean_ratio == doctest::Approx(b.mean_ratio).epsilon(1e-12));
  CHECK(a.mean_ratio == doctest::Approx(c.mean_ratio).epsilon(1e-12));
  for (std::size_t l = 0; l < a.block_ratio.size(); ++l) {
    CHECK(a.block_ratio[l] == doctest::Approx(b.block_ratio[l]).epsilon(1e-12));
    CHECK(a.block_active_mean[l] == doctest::Approx(b.block_active_mean[l]).epsilon(1e-12));
  }

  auto shuffled = images;
  dcs::Rng rng(12345);
  for (std::size_t i = shuffled.size(); i > 1; --i)
    std::swap(shuffled[i - 1],
              shuffled[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
  auto d = dcs::measure_budget(net, shuffled, 16);
  CHECK(a.histogram == d.histogram);
  CHECK(a.mean_ratio == doctest::Approx(d.mean_ratio).epsilon(1e-12));

  // Internal consistency of the report itself.
  CHECK(a.mean_ratio == doctest::Approx(a.mean_macs / static_cast<double>(a.dense_macs)));
  CHECK(std::accumulate(a.histogram.begin(), a.histogram.end(), std::int64_t{0}) == a.samples);
  const auto geoms = dcs::block_geometries(net.cfg);
  for (std::size_t l = 0; l < geoms.size(); ++l) {
    const double lo = static_cast<double>(dcs::gate_overhead(geoms[l])) /
                      static_cast<double>(dcs::dense_flops(geoms[l]));
    CHECK(a.block_ratio[l] >= lo - 1e-12);
    CHECK(a.block_active_mean[l] >= 0.0);
    CHECK(a.block_active_mean[l] <= static_cast<double>(geoms[l].c_out));
  }
}

TEST_CASE("nearest neighbour resolves the coordinate axes and breaks ties low") {
  dcs::EmbeddingSet<float> train;
  train.embeddings = Tensor<float>::from_data({2, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
  train.labels = {0, 1};

  auto query = [&](float x, float y, int label) {
    dcs::EmbeddingSet<float> t;
    const float n = std::sqrt(x * x + y * y);
    t.embeddings = Tensor<float>::from_data({1, 2}, {x / n, y / n});
    t.labels = {label};
    return dcs::knn_accuracy(train, t);
  };

  CHECK(query(0.9f, 0.1f, 0) == 1.0);
  CHECK(query(0.1f, 0.9f, 1) == 1.0);
  CHECK(query(0.9f, 0.1f, 1) == 0.0);
  // Equidistant from both axes: the earlier reference row must win.
  CHECK(query(1.0f, 1.0f, 0) == 1.0);
  CHECK(query(1.0f, 1.0f, 1) == 0.0);
}

TEST_CASE("every point is its own nearest neighbour") {
  dcs::Rng rng(555);
  const int n = 100, d = 8;
  dcs::EmbeddingSet<float> set;
  set.embeddings = Tensor<float>({n, d});
  for (int i = 0; i < n; ++i) {
    double norm = 0.0;
    float* row = set.embeddings.data() + static_cast<std::int64_t>(i) * d;
    for (int j = 0; j < d; ++j) {
      row[j] = static_cast<float>(rng.normal());
      norm += static_cast<double>(row[j]) * row[j];
    }
    for (int j = 0; j < d; ++j) row[j] = static_cast<float>(row[j] / std::sqrt(norm));
    set.labels.push_back(i);  // unique labels: only an exact self-match scores
  }
  CHECK(dcs::knn_accuracy(set, set) == 1.0);
}

TEST_CASE("nearest neighbour agrees with a brute-force reference") {
  // Integer-valued embeddings make every dot product exact in both float
  // and double, so the comparison is deterministic even through ties.
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    dcs::Rng rng(seed);
    const int n_train = 200 + static_cast<int>(seed) * 60;
    const int n_test = 100, d = 16;

    dcs::EmbeddingSet<float> train, test;
    train.embeddings = Tensor<float>({n_train, d});
    for (std::int64_t i = 0; i < train.embeddings.size(); ++i)
      train.embeddings.data()[i] = static_cast<float>(rng.uniform_int(-3, 3));
    for (int i = 0; i < n_train; ++i) train.labels.push_back(i);  // identity labels

    test.embeddings = Tensor<float>({n_test, d});
    for (std::int64_t i = 0; i < test.embeddings.size(); ++i)
      test.embeddings.data()[i] = static_cast<float>(rng.uniform_int(-3, 3));

    // Reference: double-precision scan, strict improvement, ascending index.
    test.labels.assign(static_cast<std::size_t>(n_test), -1);
    for (int i = 0; i < n_test; ++i) {
      int best = 0;
      double best_sim = -1e300;
      for (int j = 0; j < n_train; ++j) {
        double s = 0.0;
        for (int k = 0; k < d; ++k)
          s += static_cast<double>(test.embeddings.data()[static_cast<std::int64_t>(i) * d + k]) *
               train.embeddings.data()[static_cast<std::int64_t>(j) * d + k];
        if (s > best_sim) {
          best_sim = s;
          best = j;
        }
      }
      test.labels[static_cast<std::size_t>(i)] = best;
    }

    // With identity labels, accuracy 1.0 means every single argmax matched.
    CHECK(dcs::knn_accuracy(train, test) == 1.0);
  }
}

TEST_CASE("extracted embeddings are unit length and batch-size independent") {
  auto net = small_net(23, 2);
  mix_gates(net, 77);
  auto images = dcs::make_synthetic(5, 4, 16, 3);

  auto a = dcs::extract_embeddings(net, images, 3);
  auto b = dcs::extract_embeddings(net, images, 20);
  REQUIRE(a.embeddings.size() == b.embeddings.size());
  CHECK(std::memcmp(a.embeddings.data(), b.embeddings.data(),
                    sizeof(float) * static_cast<std::size_t>(a.embeddings.size())) == 0);

  const int d = a.embeddings.dim(1);
  for (int i = 0; i < a.embeddings.dim(0); ++i) {
    double norm = 0.0;
    for (int j = 0; j < d; ++j) {
      const float v = a.embeddings.data()[static_cast<std::int64_t>(i) * d + j];
      norm += static_cast<double>(v) * v;
    }
    CHECK(std::fabs(std::sqrt(norm) - 1.0) < 1e-5);
  }
  for (std::size_t i = 0; i < images.size(); ++i)
    CHECK(a.labels[i] == images[i].label);
}

TEST_CASE("channel usage counts are exact and partition the channels") {
  auto net = small_net(29, 2);
  mix_gates(net, 31);
  auto images = dcs::make_synthetic(3, 10, 16, 9);

  auto usage = dcs::channel_usage(net, images, 7);
  CHECK(usage.samples == 30);

  // Reference count from one whole-split pass through the dense rule.
  dcs::NoGradGuard guard;
  auto batch = dcs::detail::image_batch<float>(images, 0, 30, 3, 16);
  std::vector<dcs::GateState<float>> states;
  dcs::encode(net, batch, dcs::GateMode::Eval, 0.0, nullptr, &states);
  const auto geoms = dcs::block_geometries(net.cfg);
  REQUIRE(usage.on_counts.size() == states.size());
  bool any_mixed = false;
  for (std::size_t l = 0; l < states.size(); ++l) {
    const int c_out = geoms[l].c_out;
    for (int c = 0; c < c_out; ++c) {
      std::int64_t on = 0;
      for (int i = 0; i < 30; ++i)
        if (states[l].hard.data()[static_cast<std::int64_t>(i) * c_out + c] >= 0.5f) ++on;
      CHECK(usage.on_counts[l][static_cast<std::size_t>(c)] == on);
      const double f = usage.frequency(l, static_cast<std::size_t>(c));
      CHECK(f >= 0.0);
      CHECK(f <= 1.0);
      const auto cat = dcs::categorize(on, usage.samples);
      CHECK((f == 0.0) == (cat == dcs::UsageCategory::AlwaysOff));
      CHECK((f == 1.0) == (cat == dcs::UsageCategory::AlwaysOn));
      if (cat == dcs::UsageCategory::Mixed) any_mixed = true;
    }
  }
  CHECK(any_mixed);
}

TEST_CASE("reports are well formed and byte-stable") {
  auto net = small_net(37, 2);
  mix_gates(net, 41);
  auto images = dcs::make_synthetic(3, 8, 16, 13);

  auto usage = dcs::channel_usage(net, images, 8);
  auto budget = dcs::measure_budget(net, images, 8);
  const double knn = 0.625;

  TempDir dir("report-test");
  dcs::emit_reports(dir.path.string(), usage, budget, knn);
  const auto csv1 = slurp(dir.path / "channel_usage.csv");
  const auto json1 = slurp(dir.path / "summary.json");
  dcs::emit_reports(dir.path.string(), usage, budget, knn);
  CHECK(csv1 == slurp(dir.path / "channel_usage.csv"));
  CHECK(json1 == slurp(dir.path / "summary.json"));

  // CSV: header plus one row per gated channel, categories recomputable.
  const auto geoms = dcs::block_geometries(net.cfg);
  std::int64_t total_channels = 0;
  for (const auto& g : geoms) total_channels += g.c_out;
  std::istringstream lines(csv1);
  std::string line;
  REQUIRE(std::getline(lines, line));
  CHECK(line == "block,channel,frequency,category");
  std::int64_t rows = 0, seen_off = 0, seen_on = 0, seen_mixed = 0;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    ++rows;
    const auto last = line.rfind(',');
    const auto cat = line.substr(last + 1);
    if (cat == "always_off")
      ++seen_off;
    else if (cat == "always_on")
      ++seen_on;
    else if (cat == "mixed")
      ++seen_mixed;
    else
      FAIL("unknown category: " << cat);
  }
  CHECK(rows == total_channels);

  auto j = nlohmann::json::parse(json1);
  CHECK(j["samples"].get<std::int64_t>() == static_cast<std::int64_t>(images.size()));
  CHECK(j["knn_accuracy"].get<double>() == doctest::Approx(knn));
  CHECK(j["flops"]["dense_macs"].get<std::int64_t>() == budget.dense_macs);
  CHECK(j["flops"]["mean_ratio"].get<double>() == doctest::Approx(budget.mean_ratio));
  CHECK(j["channels"]["total"].get<std::int64_t>() == total_channels);
  CHECK(j["channels"]["always_off"].get<std::int64_t>() == seen_off);
  CHECK(j["channels"]["always_on"].get<std::int64_t>() == seen_on);
  CHECK(j["channels"]["mixed"].get<std::int64_t>() == seen_mixed);
  CHECK(j["channels"]["always_off"].get<std::int64_t>() +
            j["channels"]["always_on"].get<std::int64_t>() +
            j["channels"]["mixed"].get<std::int64_t>() ==
        total_channels);
  CHECK(j["blocks"].size() == geoms.size());
  std::int64_t hist_sum = 0;
  for (const auto& h : j["ratio_histogram"]) hist_sum += h.get<std::int64_t>();
  CHECK(hist_sum == budget.samples);
}
