// Network parameters and the forward/backward runtime for the IR layer set,
// plain and dense connectivity.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "eas/arch.hpp"
#include "eas/rng.hpp"
#include "eas/tensor.hpp"

namespace eas {

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.9;  // running = m*running + (1-m)*batch

enum class Mode { Train, Eval };

template <typename Real>
struct LayerParams {
  Tensor<Real> kernel;  // conv: (k, k, f_in, f_out); fc: (in, out)
  Tensor<Real> bias;    // (f_out)
  Tensor<Real> bn_gamma, bn_beta, bn_mean, bn_var;  // (f_out) when batchnorm
};

template <typename Real>
struct NetworkParams {
  std::vector<LayerParams<Real>> layers;

  template <typename Other>
  NetworkParams<Other> cast() const {
    NetworkParams<Other> out;
    out.layers.resize(layers.size());
    for (size_t i = 0; i < layers.size(); ++i) {
      out.layers[i].kernel = layers[i].kernel.template cast<Other>();
      out.layers[i].bias = layers[i].bias.template cast<Other>();
      out.layers[i].bn_gamma = layers[i].bn_gamma.template cast<Other>();
      out.layers[i].bn_beta = layers[i].bn_beta.template cast<Other>();
      out.layers[i].bn_mean = layers[i].bn_mean.template cast<Other>();
      out.layers[i].bn_var = layers[i].bn_var.template cast<Other>();
    }
    return out;
  }
};

struct NonFiniteError : std::runtime_error {
  int layer;
  explicit NonFiniteError(int layer_)
      : std::runtime_error("non-finite values in layer " +
                           std::to_string(layer_)),
        layer(layer_) {}
};

// He-normal kernels, zero biases, unit bn scale.
template <typename Real>
NetworkParams<Real> init_params(const ArchitectureSpec& spec, uint64_t seed);

// Throws std::invalid_argument when tensor shapes disagree with the spec.
template <typename Real>
void check_params(const ArchitectureSpec& spec,
                  const NetworkParams<Real>& params);

template <typename Real>
int64_t param_count(const NetworkParams<Real>& params);

// Eval mode is a pure function of (spec, params, batch); Train mode uses
// batch statistics and dropout masks seeded from `seed` (running stats are
// not touched here).
template <typename Real>
Tensor<Real> forward(const ArchitectureSpec& spec,
                     const NetworkParams<Real>& params,
                     const Tensor<Real>& batch, Mode mode, uint64_t seed = 0);

// The activation a layer inserted at position `pos` would consume: the input
// of the current layers[pos], concatenated for dense members. Eval mode.
template <typename Real>
Tensor<Real> input_at_layer(const ArchitectureSpec& spec,
                            const NetworkParams<Real>& params,
                            const Tensor<Real>& batch, int pos);

template <typename Real>
struct LossAndGrads {
  Real loss = 0;                // data loss + weight decay term
  Real data_loss = 0;
  NetworkParams<Real> grads;    // kernel/bias/bn_gamma/bn_beta slots used
  Tensor<Real> logits;
  // Batch statistics per layer (empty when layer has no batchnorm); used by
  // the trainer to update running stats.
  std::vector<std::vector<Real>> batch_mean, batch_var;
};

template <typename Real>
LossAndGrads<Real> loss_and_grads(const ArchitectureSpec& spec,
                                  const NetworkParams<Real>& params,
                                  const Tensor<Real>& batch,
                                  const std::vector<int>& labels,
                                  Real weight_decay, uint64_t seed);

// Row-wise softmax of a (N, K) tensor.
template <typename Real>
Tensor<Real> softmax_rows(const Tensor<Real>& logits);

}  // namespace eas
