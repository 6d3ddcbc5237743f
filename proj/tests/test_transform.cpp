#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "eas/data.hpp"
#include "eas/net.hpp"
#include "eas/transform.hpp"
#include "test_util.hpp"

using namespace eas;

namespace {

// Independent channel-label simulation: the input label list a consumer sees
// inside a dense block, before and after an event, and the implied map.
struct Label {
  int seg;  // 0 = block input, s = member s output; -1 allowed for picks
  int idx;
  bool operator==(const Label&) const = default;
};

std::vector<Label> concat_labels(const std::vector<int>& widths) {
  std::vector<Label> out;
  for (size_t s = 0; s < widths.size(); ++s)
    for (int i = 0; i < widths[s]; ++i)
      out.push_back(Label{static_cast<int>(s), i});
  return out;
}

std::vector<int> map_from_labels(const std::vector<Label>& new_labels,
                                 const std::vector<Label>& old_labels) {
  std::vector<int> map(new_labels.size());
  for (size_t j = 0; j < new_labels.size(); ++j) {
    auto it = std::find(old_labels.begin(), old_labels.end(), new_labels[j]);
    REQUIRE(it != old_labels.end());
    map[j] = static_cast<int>(it - old_labels.begin());
  }
  return map;
}

// Random valid transform action, mirroring the masked action space.
TransformAction random_action(const ArchitectureSpec& spec,
                              const WidthTable& table, Rng& rng) {
  std::vector<int> widenable;
  for (int i = 0; i < static_cast<int>(spec.layers.size()); ++i)
    if (widen_eligible(spec, i, table)) widenable.push_back(i);
  std::vector<std::vector<int>> deepen_idx = valid_deepen_indices(spec, table);
  std::vector<int> blocks_with_options;
  for (size_t b = 0; b < deepen_idx.size(); ++b)
    if (!deepen_idx[b].empty()) blocks_with_options.push_back(b);

  bool widen = !widenable.empty() &&
               (blocks_with_options.empty() || rng.bernoulli(0.5));
  if (widen) {
    int layer = widenable[rng.uniform_int(
        0, static_cast<int>(widenable.size()) - 1)];
    return WidenAction{layer};
  }
  REQUIRE(!blocks_with_options.empty());
  int b = blocks_with_options[rng.uniform_int(
      0, static_cast<int>(blocks_with_options.size()) - 1)];
  const std::vector<int>& idx = deepen_idx[b];
  DeepenAction d;
  d.block = b;
  d.index = idx[rng.uniform_int(0, static_cast<int>(idx.size()) - 1)];
  bool is_fc = split_blocks(spec)[b].is_fc;
  if (!is_fc) {
    const int ks[3] = {1, 3, 5};
    d.filter_size = ks[rng.uniform_int(0, 2)];
  }
  return d;
}

}  // namespace

TEST_CASE("sample_remap: no new channels means identity") {
  Rng rng(9);
  RemapFunction r = sample_remap(4, 4, rng);
  CHECK(r.is_identity());
  CHECK(r.map == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("sample_remap reproduces the worked example map") {
  // 1-based (1,2,1,1) over f=2, f_hat=4.
  Rng rng(1);
  RemapFunction r = sample_remap(2, 4, rng);
  CHECK(r.map == std::vector<int>{0, 1, 0, 0});
  CHECK(r.replication_counts() == std::vector<int>{3, 1, 3, 3});
}

TEST_CASE("sample_remap tail is uniform (chi-square over 10k draws)") {
  Rng rng(123);
  int counts[3] = {0, 0, 0};
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    RemapFunction r = sample_remap(3, 5, rng);
    for (int j = 3; j < 5; ++j) ++counts[r.map[j]];
    // identity prefix invariant
    for (int j = 0; j < 3; ++j) CHECK(r.map[j] == j);
  }
  double expect = 2.0 * trials / 3.0;
  double sigma = std::sqrt(2.0 * trials * (1.0 / 3) * (2.0 / 3));
  for (int c = 0; c < 3; ++c)
    CHECK(std::abs(counts[c] - expect) <= 3.0 * sigma);
}

TEST_CASE("equivalent_remap reproduces the worked example") {
  RemapFunction g;
  g.source_width = 2;
  g.map = {0, 1, 0, 0};
  RemapFunction eq = equivalent_remap(g, 5, 2);
  // 1-based: {1..11} -> {1,2,3,4,5,6,7,6,6,8,9}
  std::vector<int> one_based;
  for (int v : eq.map) one_based.push_back(v + 1);
  CHECK(one_based ==
        std::vector<int>{1, 2, 3, 4, 5, 6, 7, 6, 6, 8, 9});
  CHECK(eq.source_width == 9);
}

TEST_CASE("equivalent_remap of identity is identity") {
  RemapFunction g = RemapFunction::identity(3);
  RemapFunction eq = equivalent_remap(g, 4, 2);
  CHECK(eq.is_identity());
}

TEST_CASE("equivalent_remap agrees with brute-force label tracking") {
  Rng rng(55);
  for (int trial = 0; trial < 50; ++trial) {
    int prefix = rng.uniform_int(0, 4);
    int suffix = rng.uniform_int(0, 4);
    int f = rng.uniform_int(1, 4);
    int f_hat = f + rng.uniform_int(0, 3);
    RemapFunction g = sample_remap(f, f_hat, rng);

    // Labels: segment 0 (prefix), 1 (the widened segment), 2 (suffix).
    std::vector<Label> old_list = concat_labels({prefix, f, suffix});
    std::vector<Label> new_list;
    for (int i = 0; i < prefix; ++i) new_list.push_back({0, i});
    for (int j = 0; j < f_hat; ++j) new_list.push_back({1, g.map[j]});
    for (int i = 0; i < suffix; ++i) new_list.push_back({2, i});

    RemapFunction eq = equivalent_remap(g, prefix, suffix);
    CHECK(eq.map == map_from_labels(new_list, old_list));
  }
}

TEST_CASE("widen with identity remap returns the same net") {
  Rng rng(3);
  ArchitectureSpec spec = testutil::random_plain_spec(rng);
  NetworkParams<double> params = init_params<double>(spec, 8);
  int layer = 0;
  RemapFunction g = RemapFunction::identity(spec.layers[layer].width);
  auto res = widen_layer_with_remap(spec, params, layer, g);
  CHECK(res.spec == spec);
  for (size_t li = 0; li < params.layers.size(); ++li)
    for (int64_t t = 0; t < params.layers[li].kernel.numel(); ++t)
      CHECK(res.params.layers[li].kernel.data[t] ==
            params.layers[li].kernel.data[t]);
}

TEST_CASE("next-layer slices divide by replication counts (worked example)") {
  // 1x1 convs; next-layer input slices [6, 4] with G=(1,2,1,1) become
  // [2, 4, 2, 2].
  ArchitectureSpec spec;
  spec.in_channels = 1;
  spec.in_height = spec.in_width = 2;
  LayerSpec c1 = LayerSpec::conv(2, 1, false);
  LayerSpec c2 = LayerSpec::conv(1, 1, false);
  spec.layers = {c1, c2, LayerSpec::softmax(2)};
  NetworkParams<double> params = init_params<double>(spec, 4);
  params.layers[1].kernel.at4(0, 0, 0, 0) = 6.0;
  params.layers[1].kernel.at4(0, 0, 1, 0) = 4.0;

  RemapFunction g;
  g.source_width = 2;
  g.map = {0, 1, 0, 0};
  auto res = widen_layer_with_remap(spec, params, 0, g);
  const Tensor<double>& k2 = res.params.layers[1].kernel;
  CHECK(k2.shape == std::vector<int>{1, 1, 4, 1});
  CHECK(k2.at4(0, 0, 0, 0) == doctest::Approx(2.0));
  CHECK(k2.at4(0, 0, 1, 0) == doctest::Approx(4.0));
  CHECK(k2.at4(0, 0, 2, 0) == doctest::Approx(2.0));
  CHECK(k2.at4(0, 0, 3, 0) == doctest::Approx(2.0));
}

TEST_CASE("widen replicates bias and batchnorm state by the remap") {
  ArchitectureSpec spec;
  spec.in_channels = 2;
  spec.in_height = spec.in_width = 4;
  spec.layers = {LayerSpec::conv(3, 3, true), LayerSpec::conv(4, 3, true),
                 LayerSpec::softmax(3)};
  NetworkParams<double> params = init_params<double>(spec, 21);
  Rng srng(2);
  for (auto* t : {&params.layers[0].bias, &params.layers[0].bn_gamma,
                  &params.layers[0].bn_beta, &params.layers[0].bn_mean})
    for (double& v : t->data) v = srng.normal();
  for (double& v : params.layers[0].bn_var.data)
    v = 0.5 + srng.uniform01();

  Rng rng(77);
  RemapFunction g = sample_remap(3, 5, rng);
  auto res = widen_layer_with_remap(spec, params, 0, g);
  for (int j = 0; j < 5; ++j) {
    CHECK(res.params.layers[0].bias.data[j] ==
          params.layers[0].bias.data[g.map[j]]);
    CHECK(res.params.layers[0].bn_gamma.data[j] ==
          params.layers[0].bn_gamma.data[g.map[j]]);
    CHECK(res.params.layers[0].bn_beta.data[j] ==
          params.layers[0].bn_beta.data[g.map[j]]);
    CHECK(res.params.layers[0].bn_mean.data[j] ==
          params.layers[0].bn_mean.data[g.map[j]]);
    CHECK(res.params.layers[0].bn_var.data[j] ==
          params.layers[0].bn_var.data[g.map[j]]);
  }
}

TEST_CASE("widening the middle layer preserves the function") {
  for (uint64_t t = 0; t < 10; ++t) {
    Rng rng(derive_seed(0x71d, t));
    ArchitectureSpec spec;
    spec.in_channels = 3;
    spec.in_height = spec.in_width = 8;
    spec.layers = {LayerSpec::conv(16, 3, true),
                   LayerSpec::conv(32, 3, true, 0.2),
                   LayerSpec::pool(2, 2, PoolMode::Max),
                   LayerSpec::fc(64, true), LayerSpec::softmax(10)};
    NetworkParams<double> params64 = init_params<double>(spec, t + 1);
    NetworkParams<float> params32 = params64.cast<float>();

    auto r64 = widen_layer(spec, params64, 1, 64, rng);
    Rng rng32(derive_seed(0x71d, t));  // same remap stream
    auto r32 = widen_layer(spec, params32, 1, 64, rng32);

    auto rep64 = verify_preservation(spec, params64, r64.spec, r64.params, 16,
                                     1e-10, t);
    CHECK(rep64.pass);
    auto rep32 = verify_preservation(spec, params32, r32.spec, r32.params, 16,
                                     1e-4, t);
    CHECK(rep32.pass);
  }
}

TEST_CASE("widening idempotence: new channels replicate old outputs") {
  ArchitectureSpec spec;
  spec.in_channels = 2;
  spec.in_height = spec.in_width = 4;
  spec.layers = {LayerSpec::conv(3, 3, true), LayerSpec::conv(4, 3, true),
                 LayerSpec::softmax(4)};
  NetworkParams<double> params = init_params<double>(spec, 5);
  Rng rng(31);
  RemapFunction g = sample_remap(3, 6, rng);
  auto res = widen_layer_with_remap(spec, params, 0, g);

  Rng brng(8);
  Tensor<double> batch = testutil::random_batch<double>(spec, 2, brng);
  Tensor<double> old_out = input_at_layer(spec, params, batch, 1);
  Tensor<double> new_out = input_at_layer(res.spec, res.params, batch, 1);
  int H = old_out.shape[2], W = old_out.shape[3];
  for (int n = 0; n < 2; ++n)
    for (int j = 0; j < 6; ++j)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
          CHECK(new_out.at4(n, j, h, w) ==
                doctest::Approx(old_out.at4(n, g.map[j], h, w))
                    .epsilon(1e-12));
}

TEST_CASE("plain deepen without batchnorm is bitwise identical") {
  ArchitectureSpec spec;
  spec.in_channels = 2;
  spec.in_height = spec.in_width = 8;
  spec.layers = {LayerSpec::conv(8, 3, false),
                 LayerSpec::pool(2, 2, PoolMode::Max),
                 LayerSpec::conv(16, 3, false), LayerSpec::fc(32, false),
                 LayerSpec::softmax(5)};
  NetworkParams<float> params = init_params<float>(spec, 6);
  DeepenAction a{1, 1, 3};  // after the conv in block 1
  Rng rng(2);
  auto res = deepen(spec, params, a, nullptr, rng);
  REQUIRE(res.spec.layers.size() == spec.layers.size() + 1);
  CHECK(res.spec.layers[3].kind == LayerKind::Conv);
  CHECK(res.spec.layers[3].width == 16);

  Rng brng(4);
  Tensor<float> batch = testutil::random_batch<float>(spec, 4, brng);
  Tensor<float> a_logits = forward(spec, params, batch, Mode::Eval);
  Tensor<float> b_logits = forward(res.spec, res.params, batch, Mode::Eval);
  for (int64_t t = 0; t < a_logits.numel(); ++t)
    CHECK(a_logits.data[t] == b_logits.data[t]);  // bitwise
}

TEST_CASE("fc identity insertion preserves within 1e-10") {
  ArchitectureSpec spec;
  spec.in_channels = 3;
  spec.in_height = spec.in_width = 8;
  spec.layers = {LayerSpec::conv(16, 3, true),
                 LayerSpec::pool(2, 2, PoolMode::Avg), LayerSpec::fc(256, true),
                 LayerSpec::softmax(10)};
  NetworkParams<double> params = init_params<double>(spec, 11);
  DeepenAction a{1, 1, std::nullopt};  // after FC(256)
  LabeledImageSet calib_set = synthesize_dataset(4, 64, 8, 99);
  std::vector<int> idx(64);
  for (int i = 0; i < 64; ++i) idx[i] = i;
  Tensor<double> calib = gather_batch<double>(calib_set, idx);
  Rng rng(3);
  auto res = deepen(spec, params, a, &calib, rng);
  REQUIRE(res.spec.layers.size() == 5);
  CHECK(res.spec.layers[3].kind == LayerKind::FC);
  CHECK(res.spec.layers[3].width == 256);
  auto rep =
      verify_preservation(spec, params, res.spec, res.params, 16, 1e-10, 5);
  CHECK(rep.pass);
}

TEST_CASE("conv insertion with calibrated batchnorm preserves (32-bit)") {
  ArchitectureSpec spec;
  spec.in_channels = 3;
  spec.in_height = spec.in_width = 8;
  spec.layers = {LayerSpec::conv(16, 3, true),
                 LayerSpec::pool(2, 2, PoolMode::Max),
                 LayerSpec::conv(32, 3, true), LayerSpec::fc(64, true),
                 LayerSpec::softmax(10)};
  NetworkParams<float> params = init_params<float>(spec, 7);
  LabeledImageSet calib_set = synthesize_dataset(4, 256, 8, 17);
  std::vector<int> idx(256);
  for (int i = 0; i < 256; ++i) idx[i] = i;
  Tensor<float> calib = gather_batch<float>(calib_set, idx);

  DeepenAction a{1, 0, 5};  // block start, 5x5 identity
  Rng rng(12);
  auto res = deepen(spec, params, a, &calib, rng);
  auto rep =
      verify_preservation(spec, params, res.spec, res.params, 16, 1e-4, 9);
  CHECK(rep.pass);
}

TEST_CASE("deepen rejects the position before the first layer") {
  ArchitectureSpec spec = start_point_network();
  NetworkParams<float> params = init_params<float>(spec, 1);
  Rng rng(1);
  CHECK_THROWS_AS(deepen(spec, params, DeepenAction{0, 0, 3}, nullptr, rng),
                  std::invalid_argument);
}

TEST_CASE("widen rejects softmax and saturated layers") {
  ArchitectureSpec spec = start_point_network();
  NetworkParams<float> params = init_params<float>(spec, 1);
  WidthTable table = WidthTable::standard();
  Rng rng(1);
  CHECK_THROWS_AS(
      apply_transform(spec, params,
                      TransformAction{WidenAction{9}}, table, nullptr, rng),
      std::invalid_argument);
  spec.layers[0].width = 512;  // saturated
  NetworkParams<float> p2 = init_params<float>(spec, 1);
  CHECK_THROWS_AS(
      apply_transform(spec, p2, TransformAction{WidenAction{0}}, table,
                      nullptr, rng),
      std::invalid_argument);
}

TEST_CASE("dense: single-member block widening equals the plain case") {
  // Degenerate reduction: with one member and a transition conv right after
  // the block, the adjusted consumer matches widen on the plain net whose
  // consumer sees [block_input, member].
  ArchitectureSpec dense;
  dense.connectivity = Connectivity::Dense;
  dense.in_channels = 2;
  dense.in_height = dense.in_width = 4;
  dense.layers = {LayerSpec::conv(8, 3, true), LayerSpec::conv(12, 3, true),
                  LayerSpec::conv(6, 1, true), LayerSpec::softmax(3)};
  dense.dense_blocks.emplace_back(1, 2);
  NetworkParams<double> params = init_params<double>(dense, 44);
  Rng rng(10);
  auto res = widen_layer(dense, params, 1, 16, rng);
  auto rep = verify_preservation(dense, params, res.spec, res.params, 16,
                                 1e-10, 3);
  CHECK(rep.pass);
}

TEST_CASE("dense widen preserves and matches label-tracking on kernels") {
  for (uint64_t t = 0; t < 10; ++t) {
    Rng rng(derive_seed(0xde5e, t));
    ArchitectureSpec spec = testutil::random_dense_spec(rng);
    REQUIRE(validate_architecture(spec).ok);
    NetworkParams<double> params = init_params<double>(spec, t + 3);
    auto [first, last] = spec.dense_blocks[0];
    int members = last - first;
    int target = first + rng.uniform_int(0, members - 1);
    int old_width = spec.layers[target].width;
    int new_width = old_width + rng.uniform_int(1, 8);

    Rng wrng(derive_seed(0xabc, t));
    RemapFunction g = sample_remap(old_width, new_width, wrng);
    auto res = widen_layer_with_remap(spec, params, target, g);

    auto rep = verify_preservation(spec, params, res.spec, res.params, 8,
                                   1e-10, t);
    CHECK(rep.pass);

    // Label oracle: every member after the widened one consumes the
    // concatenation with the widened segment replicated per G.
    std::vector<LayerIO> io = compute_flow(spec);
    int widened_seg = target - first + 1;  // segment 0 is the block input
    for (int m = target - first + 1; m < members; ++m) {
      std::vector<int> old_widths{io[first].in_c};
      for (int q = 0; q < m; ++q)
        old_widths.push_back(spec.layers[first + q].width);
      std::vector<Label> old_list = concat_labels(old_widths);
      std::vector<Label> new_list;
      for (size_t s = 0; s < old_widths.size(); ++s) {
        if (static_cast<int>(s) == widened_seg) {
          for (int j = 0; j < new_width; ++j)
            new_list.push_back({static_cast<int>(s), g.map[j]});
        } else {
          for (int i = 0; i < old_widths[s]; ++i)
            new_list.push_back({static_cast<int>(s), i});
        }
      }
      std::vector<int> expect_map = map_from_labels(new_list, old_list);
      std::vector<int> per_source(old_list.size(), 0);
      for (int v : expect_map) ++per_source[v];

      const Tensor<double>& k_old = params.layers[first + m].kernel;
      const Tensor<double>& k_new = res.params.layers[first + m].kernel;
      int kw = k_old.shape[0], kh = k_old.shape[1], fo = k_old.shape[3];
      REQUIRE(k_new.shape[2] == static_cast<int>(new_list.size()));
      for (int x = 0; x < kw; ++x)
        for (int y = 0; y < kh; ++y)
          for (size_t j = 0; j < new_list.size(); ++j)
            for (int o = 0; o < fo; ++o) {
              double want = k_old.at4(x, y, expect_map[j], o) /
                            per_source[expect_map[j]];
              CHECK(k_new.at4(x, y, static_cast<int>(j), o) ==
                    doctest::Approx(want).epsilon(1e-12));
            }
    }
  }
}

TEST_CASE("dense deepen: one-hot filters replicate chosen channels exactly") {
  ArchitectureSpec spec;
  spec.connectivity = Connectivity::Dense;
  spec.in_channels = 2;
  spec.in_height = spec.in_width = 4;
  spec.layers = {LayerSpec::conv(8, 3, false), LayerSpec::conv(8, 3, false),
                 LayerSpec::conv(8, 3, false), LayerSpec::softmax(3)};
  spec.dense_blocks.emplace_back(1, 3);
  NetworkParams<double> params = init_params<double>(spec, 123);

  // Insert after member 0: input is [block_input(8), member0(8)] = 16 ch.
  DeepenAction a{0, 2, 3};
  std::vector<int> picks = {3, 11, 0, 15, 7, 8, 2, 9};
  auto res = deepen_with_picks(spec, params, a, picks, nullptr);
  REQUIRE(res.spec.dense_blocks[0] == std::pair<int, int>{1, 4});

  Rng brng(5);
  Tensor<double> batch = testutil::random_batch<double>(spec, 2, brng);
  // The inserted layer's output equals the picked channels of its input.
  Tensor<double> member_in = input_at_layer(res.spec, res.params, batch, 2);
  Tensor<double> next_in = input_at_layer(res.spec, res.params, batch, 3);
  // next_in = [block_input(8), member0(8), inserted(8)]
  int H = member_in.shape[2], W = member_in.shape[3];
  for (int n = 0; n < 2; ++n)
    for (int j = 0; j < 8; ++j)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
          CHECK(next_in.at4(n, 16 + j, h, w) ==
                doctest::Approx(member_in.at4(n, picks[j], h, w))
                    .epsilon(1e-12));

  auto rep = verify_preservation(spec, params, res.spec, res.params, 8, 1e-10,
                                 77);
  CHECK(rep.pass);
}

TEST_CASE("dense deepen preserves over random blocks (both precisions)") {
  for (uint64_t t = 0; t < 10; ++t) {
    Rng rng(derive_seed(0xdd, t));
    ArchitectureSpec spec = testutil::random_dense_spec(rng);
    NetworkParams<double> params64 = init_params<double>(spec, t + 9);
    NetworkParams<float> params32 = params64.cast<float>();

    std::vector<std::vector<int>> options =
        valid_deepen_indices(spec, WidthTable::standard());
    // Target the dense block (block index of split_blocks holding it).
    std::vector<BlockRange> blocks = split_blocks(spec);
    auto [bfirst, blast] = spec.dense_blocks[0];
    int target_block = -1;
    for (size_t b = 0; b < blocks.size(); ++b)
      if (!blocks[b].is_fc && blocks[b].first <= bfirst &&
          bfirst < blocks[b].first + blocks[b].count)
        target_block = static_cast<int>(b);
    REQUIRE(target_block >= 0);

    // Pick an index landing inside the dense block.
    std::vector<int> inside;
    for (int idx : options[target_block]) {
      int pos = blocks[target_block].first + idx;
      if (pos >= bfirst && pos <= blast) inside.push_back(idx);
    }
    if (inside.empty()) continue;
    DeepenAction a;
    a.block = target_block;
    a.index = inside[rng.uniform_int(0, static_cast<int>(inside.size()) - 1)];
    a.filter_size = rng.bernoulli(0.5) ? 3 : 1;

    Rng r64(derive_seed(0xdd, t, 1));
    auto res64 = deepen(spec, params64, a, nullptr, r64);
    Rng r32(derive_seed(0xdd, t, 1));
    auto res32 = deepen(spec, params32, a, nullptr, r32);

    CHECK(verify_preservation(spec, params64, res64.spec, res64.params, 8,
                              1e-10, t)
              .pass);
    CHECK(verify_preservation(spec, params32, res32.spec, res32.params, 8,
                              1e-4, t)
              .pass);
  }
}

TEST_CASE("verify_preservation: identical nets give zero diff") {
  Rng rng(66);
  ArchitectureSpec spec = testutil::random_plain_spec(rng);
  NetworkParams<float> params = init_params<float>(spec, 2);
  auto rep = verify_preservation(spec, params, spec, params, 4, 1e-12, 1);
  CHECK(rep.pass);
  CHECK(rep.max_abs_diff == 0.0);
}

TEST_CASE("verify_preservation flags a corrupted kernel entry") {
  Rng rng(67);
  ArchitectureSpec spec = testutil::random_plain_spec(rng);
  NetworkParams<float> params = init_params<float>(spec, 2);
  NetworkParams<float> bad = params;
  bad.layers[0].kernel.data[0] += 1.0f;
  auto rep = verify_preservation(spec, params, spec, bad, 4, 1e-4, 1);
  CHECK_FALSE(rep.pass);
}

TEST_CASE("chains of 5 deepen + 4 widen preserve the function") {
  for (uint64_t t = 0; t < 5; ++t) {
    Rng rng(derive_seed(0xc4a, t));
    ArchitectureSpec spec = rng.bernoulli(0.5)
                                ? testutil::random_dense_spec(rng)
                                : testutil::random_plain_spec(rng, false);
    NetworkParams<double> params = init_params<double>(spec, t);
    WidthTable table = WidthTable::standard();

    ArchitectureSpec cur_spec = spec;
    NetworkParams<double> cur = params;
    int applied = 0;
    for (int step = 0; step < 9; ++step) {
      TransformAction a = random_action(cur_spec, table, rng);
      auto res = apply_transform(cur_spec, cur, a, table, nullptr, rng);
      cur_spec = res.spec;
      cur = std::move(res.params);
      ++applied;
    }
    CHECK(applied == 9);
    auto rep = verify_preservation(spec, params, cur_spec, cur, 8, 1e-10, t);
    CHECK(rep.pass);
  }
}

TEST_CASE("exhaustive remap tails on a two-layer 1x1 net (<=1e-12)") {
  for (int f = 1; f <= 3; ++f) {
    for (int f_hat = f; f_hat <= 5; ++f_hat) {
      int tails = f_hat - f;
      int64_t combos = 1;
      for (int i = 0; i < tails; ++i) combos *= f;
      for (int64_t c = 0; c < combos; ++c) {
        RemapFunction g;
        g.source_width = f;
        g.map.resize(f_hat);
        for (int j = 0; j < f; ++j) g.map[j] = j;
        int64_t rem = c;
        for (int j = f; j < f_hat; ++j) {
          g.map[j] = static_cast<int>(rem % f);
          rem /= f;
        }
        ArchitectureSpec spec;
        spec.in_channels = 2;
        spec.in_height = spec.in_width = 3;
        spec.layers = {LayerSpec::conv(f, 1, false),
                       LayerSpec::conv(3, 1, false), LayerSpec::softmax(2)};
        NetworkParams<double> params =
            init_params<double>(spec, derive_seed(0xe113, f, f_hat, c));
        auto res = widen_layer_with_remap(spec, params, 0, g);
        auto rep = verify_preservation(spec, params, res.spec, res.params, 8,
                                       1e-12, c);
        CHECK(rep.pass);
      }
    }
  }
}

TEST_CASE("action text round trip") {
  TransformAction w = WidenAction{3};
  CHECK(action_to_text(w) == "widen layer=3");
  CHECK(action_from_text("widen layer=3") == w);
  TransformAction d = DeepenAction{2, 1, 3};
  CHECK(action_to_text(d) == "deepen block=2 index=1 k=3");
  CHECK(action_from_text("deepen block=2 index=1 k=3") == d);
  TransformAction dfc = DeepenAction{4, 0, std::nullopt};
  CHECK(action_to_text(dfc) == "deepen block=4 index=0");
  CHECK(action_from_text("deepen block=4 index=0") == dfc);
  CHECK_THROWS_AS(action_from_text("prune layer=1"), std::invalid_argument);
}

TEST_CASE("apply_action_to_spec matches the weight-level spec output") {
  Rng rng(0x5eed);
  WidthTable table = WidthTable::standard();
  for (int t = 0; t < 20; ++t) {
    ArchitectureSpec spec = rng.bernoulli(0.4)
                                ? testutil::random_dense_spec(rng)
                                : testutil::random_plain_spec(rng);
    NetworkParams<float> params = init_params<float>(spec, t);
    TransformAction a = random_action(spec, table, rng);
    ArchitectureSpec spec_only = apply_action_to_spec(spec, a, table);
    Rng rng2(derive_seed(1, t));
    auto res = apply_transform(spec, params, a, table, nullptr, rng2);
    CHECK(spec_only == res.spec);
    check_params(res.spec, res.params);
  }
}

TEST_CASE("transform error paths") {
  Rng bad_rng(1);
  CHECK_THROWS_AS(sample_remap(4, 3, bad_rng), std::invalid_argument);
  CHECK_THROWS_AS(equivalent_remap(RemapFunction::identity(2), -1, 0),
                  std::invalid_argument);

  ArchitectureSpec spec = start_point_network();
  NetworkParams<float> params = init_params<float>(spec, 1);
  Rng rng(1);
  // Pool layers cannot be widened.
  CHECK_THROWS_AS(widen_layer(spec, params, 1, 64, rng),
                  std::invalid_argument);
  // Even filter sizes cannot be centered.
  CHECK_THROWS_AS(deepen(spec, params, DeepenAction{1, 1, 2}, nullptr, rng),
                  std::invalid_argument);
  // Conv insertions need a filter size; fc insertions must not carry one.
  CHECK_THROWS_AS(
      deepen(spec, params, DeepenAction{1, 1, std::nullopt}, nullptr, rng),
      std::invalid_argument);
  CHECK_THROWS_AS(deepen(spec, params, DeepenAction{4, 0, 3}, nullptr, rng),
                  std::invalid_argument);

  // Shape-mismatched nets cannot be compared.
  ArchitectureSpec other;
  other.in_channels = 3;
  other.in_height = other.in_width = 16;
  other.layers = {LayerSpec::conv(16, 3, true),
                  LayerSpec::pool(2, 2, PoolMode::Max),
                  LayerSpec::fc(64, true), LayerSpec::softmax(10)};
  NetworkParams<float> oparams = init_params<float>(other, 1);
  CHECK_THROWS_AS(
      verify_preservation(spec, params, other, oparams, 4, 1e-4, 1),
      std::invalid_argument);
}

TEST_CASE("widen propagates across two dense blocks through the pool") {
  // Widening a member of the first block leaves replicated channels in its
  // export concatenation; they flow through the pool into the second
  // block's input segment, so every member there and the final consumer
  // must absorb the remap.
  ArchitectureSpec spec;
  spec.connectivity = Connectivity::Dense;
  spec.in_channels = 2;
  spec.in_height = spec.in_width = 8;
  spec.layers = {LayerSpec::conv(8, 3, true),   // stem
                 LayerSpec::conv(6, 3, true),   // block 1 member 0
                 LayerSpec::conv(6, 1, true),   // block 1 member 1
                 LayerSpec::pool(2, 2, PoolMode::Avg),
                 LayerSpec::conv(6, 3, true),   // block 2 member 0
                 LayerSpec::conv(6, 3, true),   // block 2 member 1
                 LayerSpec::fc(32, true),
                 LayerSpec::softmax(5)};
  spec.dense_blocks.emplace_back(1, 3);
  spec.dense_blocks.emplace_back(4, 6);
  REQUIRE(validate_architecture(spec).ok);

  for (uint64_t t = 0; t < 5; ++t) {
    NetworkParams<double> params = init_params<double>(spec, derive_seed(0x2b, t));
    Rng rng(derive_seed(0x2c, t));
    int target = 1 + static_cast<int>(t % 2);  // either member of block 1
    auto res = widen_layer(spec, params, target,
                           spec.layers[target].width + 5, rng);
    auto rep =
        verify_preservation(spec, params, res.spec, res.params, 8, 1e-10, t);
    CHECK(rep.pass);

    // The second block's members must have grown input kernels.
    int grown = res.params.layers[4].kernel.shape[2];
    CHECK(grown == params.layers[4].kernel.shape[2] + 5);
  }

  // Same propagation for a dense insertion into block 1.
  NetworkParams<double> params = init_params<double>(spec, 0x99);
  Rng rng(0x9a);
  DeepenAction a{0, 2, 3};  // after block-1 member 0 (stem is block 0 pos 0)
  auto res = deepen(spec, params, a, nullptr, rng);
  auto rep = verify_preservation(spec, params, res.spec, res.params, 8,
                                 1e-10, 7);
  CHECK(rep.pass);
}
