#include "eas/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace eas {

namespace {

constexpr int kCifarDim = 32;
constexpr int kCifarChannels = 3;
constexpr int kCifarRecord = 1 + kCifarChannels * kCifarDim * kCifarDim;

void load_cifar_file(const std::string& path, std::vector<float>& pixels,
                     std::vector<int>& labels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<unsigned char> buf(kCifarRecord);
  while (true) {
    in.read(reinterpret_cast<char*>(buf.data()), kCifarRecord);
    std::streamsize got = in.gcount();
    if (got == 0) break;
    if (got != kCifarRecord)
      throw std::runtime_error("truncated record in " + path);
    if (buf[0] >= 10)
      throw std::runtime_error("label out of range in " + path);
    labels.push_back(buf[0]);
    for (int t = 1; t < kCifarRecord; ++t)
      pixels.push_back(buf[t] / 255.0f);
  }
}

}  // namespace

LabeledImageSet load_cifar_binary(const std::string& path) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  if (fs::is_directory(path)) {
    for (int i = 1; i <= 5; ++i) {
      std::string f = path + "/data_batch_" + std::to_string(i) + ".bin";
      if (fs::exists(f)) files.push_back(f);
    }
    if (files.empty())
      throw std::runtime_error("no data_batch_*.bin under " + path);
  } else {
    files.push_back(path);
  }
  std::vector<float> pixels;
  std::vector<int> labels;
  for (const std::string& f : files) load_cifar_file(f, pixels, labels);
  if (labels.empty()) throw std::runtime_error("truncated: empty " + path);

  LabeledImageSet set;
  set.class_count = 10;
  set.labels = std::move(labels);
  set.provenance = "cifar:" + path;
  set.images = Tensor<float>(
      {static_cast<int>(set.labels.size()), kCifarChannels, kCifarDim,
       kCifarDim});
  set.images.data = std::move(pixels);
  return set;
}

void save_cifar_binary(const LabeledImageSet& set, const std::string& path) {
  if (set.images.shape[1] != kCifarChannels ||
      set.images.shape[2] != kCifarDim || set.images.shape[3] != kCifarDim)
    throw std::invalid_argument("not cifar-shaped");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  int64_t per = kCifarRecord - 1;
  for (int n = 0; n < set.size(); ++n) {
    unsigned char lab = static_cast<unsigned char>(set.labels[n]);
    out.put(static_cast<char>(lab));
    const float* p = set.images.data.data() + n * per;
    for (int64_t t = 0; t < per; ++t) {
      float v = std::clamp(p[t], 0.0f, 1.0f);
      out.put(static_cast<char>(
          static_cast<unsigned char>(std::lround(v * 255.0f))));
    }
  }
}

Tensor<float> synthetic_templates(int class_count, int image_size,
                                  uint64_t seed, int channels) {
  Tensor<float> tpl({class_count, channels, image_size, image_size});
  for (int c = 0; c < class_count; ++c) {
    Rng rng(derive_seed(seed, 0x7e4u, static_cast<uint64_t>(c)));
    double fx = 0.5 + rng.uniform01() * 2.5;
    double fy = 0.5 + rng.uniform01() * 2.5;
    double phase = rng.uniform01() * 6.283185307179586;
    double bx = rng.uniform01() * image_size;
    double by = rng.uniform01() * image_size;
    double sigma = image_size * (0.12 + 0.1 * rng.uniform01());
    for (int ch = 0; ch < channels; ++ch) {
      double chg = rng.uniform(-1.0, 1.0);
      for (int h = 0; h < image_size; ++h)
        for (int w = 0; w < image_size; ++w) {
          double u = static_cast<double>(h) / image_size;
          double v = static_cast<double>(w) / image_size;
          double wave = std::sin(6.283185307179586 * (fx * u + fy * v) + phase);
          double d2 = ((h - bx) * (h - bx) + (w - by) * (w - by)) /
                      (2.0 * sigma * sigma);
          double blob = std::exp(-d2);
          tpl.at4(c, ch, h, w) =
              static_cast<float>(0.5 + 0.25 * wave + 0.35 * chg * blob);
        }
    }
  }
  return tpl;
}

LabeledImageSet synthesize_dataset(int class_count, int n, int image_size,
                                   uint64_t seed, double noise, int channels) {
  if (class_count < 1 || n < 1 || image_size < 1)
    throw std::invalid_argument("synthesize_dataset: parameters must be > 0");
  Tensor<float> tpl = synthetic_templates(class_count, image_size, seed,
                                          channels);
  LabeledImageSet set;
  set.class_count = class_count;
  set.provenance = "synthetic";
  set.images = Tensor<float>({n, channels, image_size, image_size});
  set.labels.resize(n);
  int64_t per = static_cast<int64_t>(channels) * image_size * image_size;
  Rng rng(derive_seed(seed, 0x5158u));
  for (int i = 0; i < n; ++i) {
    int label = i % class_count;  // uniform up to rounding
    set.labels[i] = label;
    const float* t = tpl.data.data() + label * per;
    float* dst = set.images.data.data() + i * per;
    for (int64_t k = 0; k < per; ++k)
      dst[k] = t[k] + static_cast<float>(noise * rng.normal());
  }
  return set;
}

template <typename Real>
void augment_one(const Tensor<Real>& batch, int n, Tensor<Real>& out,
                 int off_h, int off_w, bool flip) {
  int C = batch.shape[1], H = batch.shape[2], W = batch.shape[3];
  constexpr int pad = 4;
  for (int c = 0; c < C; ++c) {
    const Real* src =
        batch.data.data() + (static_cast<int64_t>(n) * C + c) * H * W;
    Real* dst = out.data.data() + (static_cast<int64_t>(n) * C + c) * H * W;
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        int sh = h + off_h - pad;
        int sw = w + off_w - pad;
        if (flip) sw = W - 1 - sw;
        Real v = Real(0);
        if (sh >= 0 && sh < H && sw >= 0 && sw < W)
          v = src[static_cast<int64_t>(sh) * W + sw];
        dst[static_cast<int64_t>(h) * W + w] = v;
      }
  }
}

template <typename Real>
Tensor<Real> augment(const Tensor<Real>& batch, Rng& rng) {
  if (batch.shape[2] != batch.shape[3])
    throw std::invalid_argument("augment expects square images");
  Tensor<Real> out(batch.shape);
  int N = batch.shape[0];
  for (int n = 0; n < N; ++n) {
    int oh = rng.uniform_int(0, 8);
    int ow = rng.uniform_int(0, 8);
    bool flip = rng.bernoulli(0.5);
    augment_one(batch, n, out, oh, ow, flip);
  }
  return out;
}

ChannelStats normalize(LabeledImageSet& set) {
  if (set.size() == 0) throw std::invalid_argument("empty dataset");
  int C = set.images.shape[1];
  int64_t per = static_cast<int64_t>(set.images.shape[2]) *
                set.images.shape[3];
  int64_t m = static_cast<int64_t>(set.size()) * per;
  ChannelStats stats;
  stats.mean.assign(C, 0.0);
  stats.stddev.assign(C, 0.0);
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
    double var = s2 / m - mean * mean;
    if (var <= 1e-12)
      throw std::runtime_error("zero-variance channel " + std::to_string(c));
    stats.mean[c] = mean;
    stats.stddev[c] = std::sqrt(var);
  }
  apply_normalization(set, stats);
  return stats;
}

void apply_normalization(LabeledImageSet& set, const ChannelStats& stats) {
  int C = set.images.shape[1];
  int64_t per = static_cast<int64_t>(set.images.shape[2]) *
                set.images.shape[3];
  for (int n = 0; n < set.size(); ++n)
    for (int c = 0; c < C; ++c) {
      float* p = set.images.data.data() +
                 (static_cast<int64_t>(n) * C + c) * per;
      float mean = static_cast<float>(stats.mean[c]);
      float inv = static_cast<float>(1.0 / stats.stddev[c]);
      for (int64_t t = 0; t < per; ++t) p[t] = (p[t] - mean) * inv;
    }
}

std::pair<LabeledImageSet, LabeledImageSet> split_validation(
    const LabeledImageSet& set, int n_val, uint64_t seed) {
  int n = set.size();
  if (n_val >= n)
    throw std::invalid_argument("n_val must be smaller than the dataset");
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, 0x5b117u));
  rng.shuffle(idx);

  auto take = [&](int from, int count) {
    LabeledImageSet out;
    out.class_count = set.class_count;
    out.provenance = set.provenance;
    out.images = Tensor<float>({count, set.images.shape[1],
                                set.images.shape[2], set.images.shape[3]});
    out.labels.resize(count);
    int64_t per = set.images.numel() / n;
    for (int i = 0; i < count; ++i) {
      int src = idx[from + i];
      std::copy_n(set.images.data.data() + src * per, per,
                  out.images.data.data() + static_cast<int64_t>(i) * per);
      out.labels[i] = set.labels[src];
    }
    return out;
  };
  LabeledImageSet val = take(0, n_val);
  LabeledImageSet train = take(n_val, n - n_val);
  return {std::move(train), std::move(val)};
}

template <typename Real>
Tensor<Real> gather_batch(const LabeledImageSet& set,
                          const std::vector<int>& indices) {
  int C = set.images.shape[1], H = set.images.shape[2], W = set.images.shape[3];
  Tensor<Real> out({static_cast<int>(indices.size()), C, H, W});
  int64_t per = static_cast<int64_t>(C) * H * W;
  for (size_t i = 0; i < indices.size(); ++i) {
    const float* src = set.images.data.data() + indices[i] * per;
    Real* dst = out.data.data() + static_cast<int64_t>(i) * per;
    for (int64_t t = 0; t < per; ++t) dst[t] = static_cast<Real>(src[t]);
  }
  return out;
}

LabeledImageSet load_dataset(const std::string& uri) {
  if (uri.rfind("synthetic:", 0) == 0) {
    int classes = 10, n = 2000, size = 16;
    uint64_t seed = 7;
    double noise = 0.35;
    std::string rest = uri.substr(10);
    size_t pos = 0;
    while (pos < rest.size()) {
      size_t comma = rest.find(',', pos);
      std::string kv = rest.substr(pos, comma == std::string::npos
                                            ? std::string::npos
                                            : comma - pos);
      size_t eq = kv.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("bad synthetic spec near '" + kv + "'");
      std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
      if (k == "classes")
        classes = std::stoi(v);
      else if (k == "n")
        n = std::stoi(v);
      else if (k == "size")
        size = std::stoi(v);
      else if (k == "seed")
        seed = std::stoull(v);
      else if (k == "noise")
        noise = std::stod(v);
      else
        throw std::invalid_argument("unknown synthetic key '" + k + "'");
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    return synthesize_dataset(classes, n, size, seed, noise);
  }
  return load_cifar_binary(uri);
}

template Tensor<float> augment<float>(const Tensor<float>&, Rng&);
template Tensor<double> augment<double>(const Tensor<double>&, Rng&);
template void augment_one<float>(const Tensor<float>&, int, Tensor<float>&,
                                 int, int, bool);
template void augment_one<double>(const Tensor<double>&, int, Tensor<double>&,
                                  int, int, bool);
template Tensor<float> gather_batch<float>(const LabeledImageSet&,
                                           const std::vector<int>&);
template Tensor<double> gather_batch<double>(const LabeledImageSet&,
                                             const std::vector<int>&);

}  // namespace eas
