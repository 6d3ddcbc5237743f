// Shared test helpers: independent oracles (naive convolution, finite
// differences, channel-label simulation) and random network generators.
#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "eas/arch.hpp"
#include "eas/net.hpp"
#include "eas/rng.hpp"
#include "eas/tensor.hpp"

namespace testutil {

// Direct convolution with materialized zero padding; independent of the
// runtime's clamped-range implementation.
template <typename Real>
eas::Tensor<Real> naive_conv_same(const eas::Tensor<Real>& x,
                                  const eas::Tensor<Real>& k,
                                  const eas::Tensor<Real>& bias) {
  int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  int kw = k.shape[0], kh = k.shape[1], fo = k.shape[3];
  int P = kw / 2;
  eas::Tensor<Real> padded({N, C, H + 2 * P, W + 2 * P});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
          padded.at4(n, c, h + P, w + P) = x.at4(n, c, h, w);
  eas::Tensor<Real> y({N, fo, H, W});
  for (int n = 0; n < N; ++n)
    for (int j = 0; j < fo; ++j)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          Real acc = bias.data[j];
          for (int i = 0; i < C; ++i)
            for (int a = 0; a < kw; ++a)
              for (int b = 0; b < kh; ++b)
                acc += k.at4(a, b, i, j) * padded.at4(n, i, h + a, w + b);
          y.at4(n, j, h, w) = acc;
        }
  return y;
}

template <typename Real>
eas::Tensor<Real> naive_relu(eas::Tensor<Real> x) {
  for (Real& v : x.data) v = std::max(v, Real(0));
  return x;
}

template <typename Real>
eas::Tensor<Real> naive_avg_pool(const eas::Tensor<Real>& x, int k, int s) {
  int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  int Ho = (H - k) / s + 1, Wo = (W - k) / s + 1;
  eas::Tensor<Real> y({N, C, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int ho = 0; ho < Ho; ++ho)
        for (int wo = 0; wo < Wo; ++wo) {
          Real acc = 0;
          for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b)
              acc += x.at4(n, c, ho * s + a, wo * s + b);
          y.at4(n, c, ho, wo) = acc / static_cast<Real>(k * k);
        }
  return y;
}

// Central finite differences over every parameter against analytic grads.
// Returns the max relative error with a small denominator floor.
template <typename Real>
double fd_max_rel_error(const eas::ArchitectureSpec& spec,
                        eas::NetworkParams<Real> params,
                        const eas::Tensor<Real>& batch,
                        const std::vector<int>& labels, Real weight_decay,
                        uint64_t seed, Real eps, double floor = 1e-6) {
  eas::LossAndGrads<Real> base =
      eas::loss_and_grads(spec, params, batch, labels, weight_decay, seed);
  double worst = 0.0;
  for (size_t li = 0; li < params.layers.size(); ++li) {
    eas::LayerParams<Real>& lp = params.layers[li];
    const eas::LayerParams<Real>& gl = base.grads.layers[li];
    std::vector<std::pair<eas::Tensor<Real>*, const eas::Tensor<Real>*>> slots =
        {{&lp.kernel, &gl.kernel},
         {&lp.bias, &gl.bias},
         {&lp.bn_gamma, &gl.bn_gamma},
         {&lp.bn_beta, &gl.bn_beta}};
    for (auto [theta, grad] : slots) {
      if (theta->empty()) continue;
      for (int64_t t = 0; t < theta->numel(); ++t) {
        Real saved = theta->data[t];
        theta->data[t] = saved + eps;
        Real lp_loss = eas::loss_and_grads(spec, params, batch, labels,
                                           weight_decay, seed)
                           .loss;
        theta->data[t] = saved - eps;
        Real lm_loss = eas::loss_and_grads(spec, params, batch, labels,
                                           weight_decay, seed)
                           .loss;
        theta->data[t] = saved;
        double fd = (static_cast<double>(lp_loss) -
                     static_cast<double>(lm_loss)) /
                    (2.0 * static_cast<double>(eps));
        double an = static_cast<double>(grad->data[t]);
        double rel = std::abs(fd - an) /
                     std::max({std::abs(fd), std::abs(an), floor});
        worst = std::max(worst, rel);
      }
    }
  }
  return worst;
}

// Random plain CNN with 2-6 parametric layers; widths from table prefixes.
inline eas::ArchitectureSpec random_plain_spec(eas::Rng& rng,
                                               bool allow_dropout = true) {
  eas::ArchitectureSpec spec;
  spec.in_channels = rng.uniform_int(1, 3);
  spec.in_height = spec.in_width = 8;
  bool bn = rng.bernoulli(0.7);
  int n_conv = rng.uniform_int(1, 3);
  std::vector<int> conv_widths = {16, 32, 64};
  std::vector<int> ks = {1, 3, 5};
  for (int i = 0; i < n_conv; ++i) {
    double drop =
        allow_dropout && i > 0 && rng.bernoulli(0.3) ? 0.2 : 0.0;
    spec.layers.push_back(eas::LayerSpec::conv(
        conv_widths[rng.uniform_int(0, 2)], ks[rng.uniform_int(0, 2)], bn,
        drop));
    if (rng.bernoulli(0.5))
      spec.layers.push_back(eas::LayerSpec::pool(
          2, 2, rng.bernoulli(0.5) ? eas::PoolMode::Max : eas::PoolMode::Avg));
  }
  int n_fc = rng.uniform_int(0, 2);
  std::vector<int> fc_widths = {64, 128};
  for (int i = 0; i < n_fc; ++i)
    spec.layers.push_back(
        eas::LayerSpec::fc(fc_widths[rng.uniform_int(0, 1)], bn));
  spec.layers.push_back(eas::LayerSpec::softmax(rng.uniform_int(4, 10)));
  return spec;
}

// Stem conv + one dense block (2-4 members) + pool (+ optional transition
// conv and fc) + softmax.
inline eas::ArchitectureSpec random_dense_spec(eas::Rng& rng,
                                               int min_members = 2,
                                               int max_members = 4) {
  eas::ArchitectureSpec spec;
  spec.connectivity = eas::Connectivity::Dense;
  spec.in_channels = rng.uniform_int(1, 3);
  spec.in_height = spec.in_width = 4;
  bool bn = rng.bernoulli(0.7);
  std::vector<int> growth = {40, 44, 48, 52};
  std::vector<int> stem_widths = {16, 32};
  spec.layers.push_back(
      eas::LayerSpec::conv(stem_widths[rng.uniform_int(0, 1)], 3, bn));
  int members = rng.uniform_int(min_members, max_members);
  int first = static_cast<int>(spec.layers.size());
  for (int m = 0; m < members; ++m) {
    int k = rng.bernoulli(0.3) ? 1 : 3;
    spec.layers.push_back(
        eas::LayerSpec::conv(growth[rng.uniform_int(0, 2)], k, bn));
  }
  spec.dense_blocks.emplace_back(first, first + members);
  spec.layers.push_back(eas::LayerSpec::pool(
      2, 2, rng.bernoulli(0.5) ? eas::PoolMode::Max : eas::PoolMode::Avg));
  if (rng.bernoulli(0.4))
    spec.layers.push_back(eas::LayerSpec::conv(16, 1, bn));
  if (rng.bernoulli(0.5))
    spec.layers.push_back(eas::LayerSpec::fc(64, bn));
  spec.layers.push_back(eas::LayerSpec::softmax(rng.uniform_int(4, 10)));
  return spec;
}

template <typename Real>
eas::Tensor<Real> random_batch(const eas::ArchitectureSpec& spec, int n,
                               eas::Rng& rng) {
  eas::Tensor<Real> batch(
      {n, spec.in_channels, spec.in_height, spec.in_width});
  for (Real& v : batch.data) v = static_cast<Real>(rng.normal());
  return batch;
}

}  // namespace testutil
