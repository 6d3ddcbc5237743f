#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "eas/data.hpp"
#include "eas/rng.hpp"

using namespace eas;

namespace {

std::string scratch_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "eas_data_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

// Hand-built CIFAR-format records.
void write_cifar_fixture(const std::string& path, int n, bool truncate_last,
                         bool bad_label) {
  std::ofstream out(path, std::ios::binary);
  Rng rng(99);
  for (int i = 0; i < n; ++i) {
    unsigned char label =
        bad_label && i == n - 1 ? 17 : static_cast<unsigned char>(i % 10);
    out.put(static_cast<char>(label));
    int pixels = 3072;
    if (truncate_last && i == n - 1) pixels = 100;
    for (int p = 0; p < pixels; ++p)
      out.put(static_cast<char>(rng.uniform_int(0, 255)));
  }
}

}  // namespace

TEST_CASE("cifar loader: fixture file loads with /255 scaling") {
  std::string path = scratch_path("ok.bin");
  write_cifar_fixture(path, 7, false, false);
  LabeledImageSet set = load_cifar_binary(path);
  CHECK(set.size() == 7);
  CHECK(set.images.shape == std::vector<int>{7, 3, 32, 32});
  CHECK(set.class_count == 10);
  for (float v : set.images.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  for (int i = 0; i < 7; ++i) CHECK(set.labels[i] == i % 10);
}

TEST_CASE("cifar loader: first record round-trips to identical bytes") {
  std::string path = scratch_path("rt.bin");
  write_cifar_fixture(path, 3, false, false);
  LabeledImageSet set = load_cifar_binary(path);
  std::string out = scratch_path("rt_out.bin");
  save_cifar_binary(set, out);
  std::ifstream a(path, std::ios::binary), b(out, std::ios::binary);
  std::vector<char> ba((std::istreambuf_iterator<char>(a)), {});
  std::vector<char> bb((std::istreambuf_iterator<char>(b)), {});
  REQUIRE(ba.size() == bb.size());
  CHECK(ba == bb);
}

TEST_CASE("cifar loader: truncated and bad-label files are errors") {
  std::string trunc = scratch_path("trunc.bin");
  write_cifar_fixture(trunc, 3, true, false);
  CHECK_THROWS_WITH_AS(load_cifar_binary(trunc),
                       doctest::Contains("truncated"), std::runtime_error);

  std::string empty = scratch_path("empty.bin");
  { std::ofstream out(empty, std::ios::binary); }
  CHECK_THROWS_AS(load_cifar_binary(empty), std::runtime_error);

  std::string bad = scratch_path("badlabel.bin");
  write_cifar_fixture(bad, 2, false, true);
  CHECK_THROWS_WITH_AS(load_cifar_binary(bad),
                       doctest::Contains("label"), std::runtime_error);
}

TEST_CASE("official cifar batches load when CIFAR_DIR is set") {
  const char* dir = std::getenv("CIFAR_DIR");
  if (!dir) {
    MESSAGE("CIFAR_DIR not set; skipping full-dataset check");
    return;
  }
  LabeledImageSet set = load_cifar_binary(dir);
  CHECK(set.size() == 50000);
  CHECK(set.images.shape == std::vector<int>{50000, 3, 32, 32});
}

TEST_CASE("synthesize_dataset is deterministic and label-balanced") {
  LabeledImageSet a = synthesize_dataset(10, 1000, 16, 5);
  LabeledImageSet b = synthesize_dataset(10, 1000, 16, 5);
  CHECK(a.images.data == b.images.data);
  CHECK(a.labels == b.labels);
  std::vector<int> counts(10, 0);
  for (int lab : a.labels) ++counts[lab];
  for (int c : counts) CHECK(c == 100);
}

TEST_CASE("nearest-template classifier solves the noise-free variant") {
  int classes = 10, n = 200, size = 16;
  LabeledImageSet set = synthesize_dataset(classes, n, size, 31, 0.0);
  Tensor<float> tpl = synthetic_templates(classes, size, 31);
  int64_t per = static_cast<int64_t>(3) * size * size;
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    double best = 1e300;
    int arg = -1;
    for (int c = 0; c < classes; ++c) {
      double d = 0;
      for (int64_t t = 0; t < per; ++t) {
        double diff = set.images.data[i * per + t] - tpl.data[c * per + t];
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        arg = c;
      }
    }
    if (arg == set.labels[i]) ++correct;
  }
  CHECK(correct >= static_cast<int>(0.9 * n));
}

TEST_CASE("augment_one: center crop with no flip is the identity") {
  Rng rng(3);
  Tensor<float> batch({2, 3, 8, 8});
  for (float& v : batch.data) v = static_cast<float>(rng.normal());
  Tensor<float> out(batch.shape);
  augment_one(batch, 0, out, 4, 4, false);
  augment_one(batch, 1, out, 4, 4, false);
  CHECK(out.data == batch.data);
}

TEST_CASE("augment_one: forced flip twice restores the image") {
  Rng rng(4);
  Tensor<float> batch({1, 3, 8, 8});
  for (float& v : batch.data) v = static_cast<float>(rng.normal());
  Tensor<float> once(batch.shape), twice(batch.shape);
  augment_one(batch, 0, once, 4, 4, true);
  augment_one(once, 0, twice, 4, 4, true);
  CHECK(twice.data == batch.data);
}

TEST_CASE("flip preserves the pixel histogram") {
  Rng rng(5);
  Tensor<float> batch({1, 1, 6, 6});
  for (float& v : batch.data) v = static_cast<float>(rng.uniform_int(0, 9));
  Tensor<float> out(batch.shape);
  augment_one(batch, 0, out, 4, 4, true);
  std::vector<int> ha(10, 0), hb(10, 0);
  for (float v : batch.data) ++ha[static_cast<int>(v)];
  for (float v : out.data) ++hb[static_cast<int>(v)];
  CHECK(ha == hb);
}

TEST_CASE("normalize: unit stats afterward, idempotent, zero-variance error") {
  LabeledImageSet set = synthesize_dataset(4, 300, 8, 9, 0.8);
  ChannelStats stats = normalize(set);
  // Recompute stats on the normalized data.
  int C = set.images.shape[1];
  int64_t per = static_cast<int64_t>(8) * 8;
  int64_t m = static_cast<int64_t>(set.size()) * per;
  for (int c = 0; c < C; ++c) {
    double s1 = 0, s2 = 0;
    for (int n = 0; n < set.size(); ++n) {
      const float* p =
          set.images.data.data() + (static_cast<int64_t>(n) * C + c) * per;
      for (int64_t t = 0; t < per; ++t) {
        s1 += p[t];
        s2 += static_cast<double>(p[t]) * p[t];
      }
    }
    double mean = s1 / m;
    double stddev = std::sqrt(s2 / m - mean * mean);
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(stddev - 1.0) <= 1e-5);
  }
  CHECK(stats.mean.size() == 3);

  LabeledImageSet copy = set;
  ChannelStats again = normalize(copy);
  for (int c = 0; c < C; ++c) {
    CHECK(std::abs(again.mean[c]) <= 1e-6);
    CHECK(std::abs(again.stddev[c] - 1.0) <= 1e-5);
  }
  for (size_t i = 0; i < copy.images.data.size(); ++i)
    CHECK(std::abs(copy.images.data[i] - set.images.data[i]) <= 1e-5);

  LabeledImageSet flat;
  flat.class_count = 2;
  flat.images = Tensor<float>({4, 1, 2, 2});
  flat.images.fill(0.5f);
  flat.labels = {0, 1, 0, 1};
  CHECK_THROWS_AS(normalize(flat), std::runtime_error);
}

TEST_CASE("split_validation: disjoint, exhaustive, seed-deterministic") {
  LabeledImageSet set = synthesize_dataset(10, 6000, 4, 2);
  auto [train1, val1] = split_validation(set, 600, 77);
  CHECK(train1.size() == 5400);
  CHECK(val1.size() == 600);
  auto [train2, val2] = split_validation(set, 600, 77);
  CHECK(train1.images.data == train2.images.data);
  CHECK(val1.labels == val2.labels);

  // Union of the two sides restores the multiset of images.
  auto key = [](const LabeledImageSet& s, int i) {
    int64_t per = s.images.numel() / s.size();
    double acc = s.labels[i];
    for (int64_t t = 0; t < per; ++t)
      acc += s.images.data[i * per + t] * (0.5 + (t % 7));
    return acc;
  };
  std::vector<double> all, parts;
  for (int i = 0; i < set.size(); ++i) all.push_back(key(set, i));
  for (int i = 0; i < train1.size(); ++i) parts.push_back(key(train1, i));
  for (int i = 0; i < val1.size(); ++i) parts.push_back(key(val1, i));
  std::sort(all.begin(), all.end());
  std::sort(parts.begin(), parts.end());
  CHECK(all == parts);

  CHECK_THROWS_AS(split_validation(set, 6000, 1), std::invalid_argument);
}

TEST_CASE("synthetic 32x32 sets serialize to the cifar record layout") {
  LabeledImageSet set = synthesize_dataset(10, 20, 32, 5, 0.2);
  std::string path = scratch_path("synth32.bin");
  save_cifar_binary(set, path);
  LabeledImageSet back = load_cifar_binary(path);
  CHECK(back.size() == 20);
  CHECK(back.labels == set.labels);
  // Byte quantization bounds the round-trip error.
  for (size_t i = 0; i < set.images.data.size(); ++i) {
    float clamped = std::clamp(set.images.data[i], 0.0f, 1.0f);
    CHECK(std::abs(back.images.data[i] - clamped) <= 0.5f / 255.0f + 1e-6f);
  }
}
