// Dataset loading, synthesis, augmentation, normalization and splits.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "eas/rng.hpp"
#include "eas/tensor.hpp"

namespace eas {

struct LabeledImageSet {
  Tensor<float> images;  // (N, C, H, W), values typically in [0,1] or normalized
  std::vector<int> labels;
  int class_count = 0;
  std::string provenance;

  int size() const { return images.empty() ? 0 : images.shape[0]; }
};

// Standard CIFAR-10 binary records: 1 label byte + 3072 CHW pixel bytes.
// Accepts a single .bin file or a directory with data_batch_{1..5}.bin.
LabeledImageSet load_cifar_binary(const std::string& path);
// Writes the same record layout (pixels rounded back to bytes).
void save_cifar_binary(const LabeledImageSet& set, const std::string& path);

// Class-conditional sinusoid + blob patterns plus noise; a small CNN can
// exceed 90% accuracy, a template matcher solves the noise-free variant.
LabeledImageSet synthesize_dataset(int class_count, int n, int image_size,
                                   uint64_t seed, double noise = 0.35,
                                   int channels = 3);
// The per-class templates underlying synthesize_dataset.
Tensor<float> synthetic_templates(int class_count, int image_size,
                                  uint64_t seed, int channels = 3);

// Pad 4px, random crop back, horizontal flip with p=0.5.
template <typename Real>
Tensor<Real> augment(const Tensor<Real>& batch, Rng& rng);
// Deterministic single-image variant used by augment: offsets in [0, 8].
template <typename Real>
void augment_one(const Tensor<Real>& batch, int n, Tensor<Real>& out,
                 int off_h, int off_w, bool flip);

struct ChannelStats {
  std::vector<double> mean, stddev;
};

// In-place per-channel standardization; returns the stats for reuse.
ChannelStats normalize(LabeledImageSet& set);
void apply_normalization(LabeledImageSet& set, const ChannelStats& stats);

std::pair<LabeledImageSet, LabeledImageSet> split_validation(
    const LabeledImageSet& set, int n_val, uint64_t seed);

template <typename Real>
Tensor<Real> gather_batch(const LabeledImageSet& set,
                          const std::vector<int>& indices);

// "synthetic:classes=10,n=2000,size=16,seed=7,noise=0.35" or a file path.
LabeledImageSet load_dataset(const std::string& uri);

}  // namespace eas
