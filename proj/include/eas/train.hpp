// Training loop: SGD with Nesterov momentum, cosine learning rate decay,
// seeded shuffling/augmentation, batchnorm running-stat updates.
#pragma once

#include <vector>

#include "eas/data.hpp"
#include "eas/net.hpp"

namespace eas {

enum class LrSchedule { Cosine, Constant };

struct TrainConfig {
  int epochs = 20;
  int batch_size = 64;
  double lr0 = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  LrSchedule lr_schedule = LrSchedule::Cosine;
  uint64_t seed = 1;
  bool augment = false;
};

// lr at step t of T total steps.
double cosine_lr(int64_t t, int64_t total, double lr0);

// v' = mu*v - lr*g;  theta' = theta - mu*v + (1+mu)*v'
template <typename Real>
void sgd_nesterov_step(NetworkParams<Real>& params,
                       const NetworkParams<Real>& grads,
                       NetworkParams<Real>& velocity, Real lr, Real momentum);

template <typename Real>
NetworkParams<Real> zeros_like(const NetworkParams<Real>& params);

struct EpochPoint {
  int epoch;
  double loss;      // mean train loss (incl. weight decay)
  double accuracy;  // train accuracy from the same forward passes
};

struct TrainDivergence : std::runtime_error {
  int epoch;
  explicit TrainDivergence(int epoch_)
      : std::runtime_error("training diverged in epoch " +
                           std::to_string(epoch_)),
        epoch(epoch_) {}
};

template <typename Real>
std::vector<EpochPoint> train(const ArchitectureSpec& spec,
                              NetworkParams<Real>& params,
                              const LabeledImageSet& data,
                              const TrainConfig& cfg);

// Fraction of argmax-correct predictions, Eval mode; ties go to the lowest
// class index. Throws on an empty dataset.
template <typename Real>
double evaluate(const ArchitectureSpec& spec, const NetworkParams<Real>& params,
                const LabeledImageSet& data, int batch_size = 256);

}  // namespace eas
