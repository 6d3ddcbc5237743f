#include "eas/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace eas {

double cosine_lr(int64_t t, int64_t total, double lr0) {
  if (total <= 0) return lr0;
  return lr0 * 0.5 *
         (1.0 + std::cos(3.141592653589793238462643383279502884 *
                         static_cast<double>(t) / static_cast<double>(total)));
}

namespace {

template <typename Real>
void nesterov_tensor(Tensor<Real>& theta, const Tensor<Real>& g,
                     Tensor<Real>& v, Real lr, Real mu) {
  for (int64_t t = 0; t < theta.numel(); ++t) {
    Real v_new = mu * v.data[t] - lr * g.data[t];
    theta.data[t] += -mu * v.data[t] + (Real(1) + mu) * v_new;
    v.data[t] = v_new;
  }
}

}  // namespace

template <typename Real>
void sgd_nesterov_step(NetworkParams<Real>& params,
                       const NetworkParams<Real>& grads,
                       NetworkParams<Real>& velocity, Real lr, Real momentum) {
  for (size_t i = 0; i < params.layers.size(); ++i) {
    LayerParams<Real>& p = params.layers[i];
    const LayerParams<Real>& g = grads.layers[i];
    LayerParams<Real>& v = velocity.layers[i];
    if (!p.kernel.empty()) nesterov_tensor(p.kernel, g.kernel, v.kernel, lr,
                                           momentum);
    if (!p.bias.empty()) nesterov_tensor(p.bias, g.bias, v.bias, lr, momentum);
    if (!p.bn_gamma.empty()) {
      nesterov_tensor(p.bn_gamma, g.bn_gamma, v.bn_gamma, lr, momentum);
      nesterov_tensor(p.bn_beta, g.bn_beta, v.bn_beta, lr, momentum);
    }
  }
}

template <typename Real>
NetworkParams<Real> zeros_like(const NetworkParams<Real>& params) {
  NetworkParams<Real> out;
  out.layers.resize(params.layers.size());
  for (size_t i = 0; i < params.layers.size(); ++i) {
    const LayerParams<Real>& p = params.layers[i];
    LayerParams<Real>& z = out.layers[i];
    if (!p.kernel.empty()) z.kernel = Tensor<Real>(p.kernel.shape);
    if (!p.bias.empty()) z.bias = Tensor<Real>(p.bias.shape);
    if (!p.bn_gamma.empty()) {
      z.bn_gamma = Tensor<Real>(p.bn_gamma.shape);
      z.bn_beta = Tensor<Real>(p.bn_beta.shape);
    }
  }
  return out;
}

template <typename Real>
std::vector<EpochPoint> train(const ArchitectureSpec& spec,
                              NetworkParams<Real>& params,
                              const LabeledImageSet& data,
                              const TrainConfig& cfg) {
  check_params(spec, params);
  std::vector<EpochPoint> curve;
  if (cfg.epochs == 0) return curve;
  int n = data.size();
  if (n == 0) throw std::invalid_argument("empty training set");
  int bs = std::min(cfg.batch_size, n);
  int64_t steps_per_epoch = (n + bs - 1) / bs;
  int64_t total_steps = steps_per_epoch * cfg.epochs;

  NetworkParams<Real> velocity = zeros_like(params);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, 0x3a17u, epoch));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0;
    int64_t correct = 0;
    for (int64_t b = 0; b < steps_per_epoch; ++b, ++step) {
      int lo = static_cast<int>(b * bs);
      int hi = std::min(n, lo + bs);
      std::vector<int> idx(order.begin() + lo, order.begin() + hi);
      Tensor<Real> batch = gather_batch<Real>(data, idx);
      if (cfg.augment) {
        Rng aug_rng(derive_seed(cfg.seed, 0xa46u, epoch, b));
        batch = augment(batch, aug_rng);
      }
      std::vector<int> labels(idx.size());
      for (size_t i = 0; i < idx.size(); ++i) labels[i] = data.labels[idx[i]];

      uint64_t fwd_seed = derive_seed(cfg.seed, 0xf0du, epoch, b);
      LossAndGrads<Real> lg;
      try {
        lg = loss_and_grads(spec, params, batch, labels,
                            static_cast<Real>(cfg.weight_decay), fwd_seed);
      } catch (const NonFiniteError&) {
        throw TrainDivergence(epoch);
      }
      if (!std::isfinite(static_cast<double>(lg.loss)))
        throw TrainDivergence(epoch);

      double lr = cfg.lr_schedule == LrSchedule::Cosine
                      ? cosine_lr(step, total_steps, cfg.lr0)
                      : cfg.lr0;
      sgd_nesterov_step(params, lg.grads, velocity, static_cast<Real>(lr),
                        static_cast<Real>(cfg.momentum));

      // Running batchnorm statistics.
      for (size_t li = 0; li < params.layers.size(); ++li) {
        if (lg.batch_mean[li].empty()) continue;
        LayerParams<Real>& lp = params.layers[li];
        for (int64_t c = 0; c < lp.bn_mean.numel(); ++c) {
          lp.bn_mean.data[c] =
              static_cast<Real>(kBnMomentum) * lp.bn_mean.data[c] +
              static_cast<Real>(1.0 - kBnMomentum) * lg.batch_mean[li][c];
          lp.bn_var.data[c] =
              static_cast<Real>(kBnMomentum) * lp.bn_var.data[c] +
              static_cast<Real>(1.0 - kBnMomentum) * lg.batch_var[li][c];
        }
      }

      epoch_loss += static_cast<double>(lg.loss) * static_cast<double>(idx.size());
      int K = lg.logits.shape[1];
      for (size_t i = 0; i < idx.size(); ++i) {
        const Real* row =
            lg.logits.data.data() + static_cast<int64_t>(i) * K;
        int arg = 0;
        for (int k = 1; k < K; ++k)
          if (row[k] > row[arg]) arg = k;
        if (arg == labels[i]) ++correct;
      }
    }
    curve.push_back(EpochPoint{epoch, epoch_loss / n,
                               static_cast<double>(correct) / n});
  }
  return curve;
}

template <typename Real>
double evaluate(const ArchitectureSpec& spec, const NetworkParams<Real>& params,
                const LabeledImageSet& data, int batch_size) {
  int n = data.size();
  if (n == 0) throw std::invalid_argument("evaluate on empty dataset");
  int64_t correct = 0;
  for (int lo = 0; lo < n; lo += batch_size) {
    int hi = std::min(n, lo + batch_size);
    std::vector<int> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    Tensor<Real> batch = gather_batch<Real>(data, idx);
    Tensor<Real> logits = forward(spec, params, batch, Mode::Eval);
    int K = logits.shape[1];
    for (int i = 0; i < hi - lo; ++i) {
      const Real* row = logits.data.data() + static_cast<int64_t>(i) * K;
      int arg = 0;
      for (int k = 1; k < K; ++k)
        if (row[k] > row[arg]) arg = k;
      if (arg == data.labels[lo + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / n;
}

#define EAS_TRAIN_INSTANTIATE(Real)                                           \
  template void sgd_nesterov_step<Real>(NetworkParams<Real>&,                 \
                                        const NetworkParams<Real>&,           \
                                        NetworkParams<Real>&, Real, Real);    \
  template NetworkParams<Real> zeros_like<Real>(const NetworkParams<Real>&);  \
  template std::vector<EpochPoint> train<Real>(                               \
      const ArchitectureSpec&, NetworkParams<Real>&, const LabeledImageSet&,  \
      const TrainConfig&);                                                    \
  template double evaluate<Real>(const ArchitectureSpec&,                     \
                                 const NetworkParams<Real>&,                  \
                                 const LabeledImageSet&, int);

EAS_TRAIN_INSTANTIATE(float)
EAS_TRAIN_INSTANTIATE(double)

}  // namespace eas
