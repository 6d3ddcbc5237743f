#include "eas/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace eas {

namespace {

template <typename Real>
Tensor<Real> reshape(Tensor<Real> t, std::vector<int> s) {
  if (Tensor<Real>::numel_of(s) != t.numel())
    throw std::invalid_argument("reshape changes element count");
  t.shape = std::move(s);
  return t;
}

template <typename Real>
Tensor<Real> concat_channels(const std::vector<Tensor<Real>>& parts) {
  if (parts.size() == 1) return parts[0];
  int N = parts[0].shape[0], H = parts[0].shape[2], W = parts[0].shape[3];
  int C = 0;
  for (const auto& p : parts) C += p.shape[1];
  Tensor<Real> out({N, C, H, W});
  int64_t plane = static_cast<int64_t>(H) * W;
  for (int n = 0; n < N; ++n) {
    int64_t off = static_cast<int64_t>(n) * C * plane;
    for (const auto& p : parts) {
      int pc = p.shape[1];
      const Real* src = p.data.data() + static_cast<int64_t>(n) * pc * plane;
      std::memcpy(out.data.data() + off, src, sizeof(Real) * pc * plane);
      off += pc * plane;
    }
  }
  return out;
}

// Splits a gradient on a channel concatenation back into per-part grads,
// accumulating into existing tensors.
template <typename Real>
void split_channels_accum(const Tensor<Real>& grad,
                          std::vector<Tensor<Real>*> parts) {
  int N = grad.shape[0], H = grad.shape[2], W = grad.shape[3];
  int64_t plane = static_cast<int64_t>(H) * W;
  int C = grad.shape[1];
  for (int n = 0; n < N; ++n) {
    int64_t off = static_cast<int64_t>(n) * C * plane;
    for (Tensor<Real>* p : parts) {
      int pc = p->shape[1];
      Real* dst = p->data.data() + static_cast<int64_t>(n) * pc * plane;
      const Real* src = grad.data.data() + off;
      for (int64_t t = 0; t < pc * plane; ++t) dst[t] += src[t];
      off += pc * plane;
    }
  }
}

template <typename Real>
Tensor<Real> conv2d_same(const Tensor<Real>& x, const Tensor<Real>& k,
                         const Tensor<Real>& bias) {
  int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  int kw = k.shape[0], kh = k.shape[1], fi = k.shape[2], fo = k.shape[3];
  if (fi != C) throw std::invalid_argument("conv input channel mismatch");
  int P = kw / 2;
  Tensor<Real> y({N, fo, H, W});
  const Real* xd = x.data.data();
  const Real* kd = k.data.data();
  Real* yd = y.data.data();
  int64_t plane = static_cast<int64_t>(H) * W;
  for (int n = 0; n < N; ++n) {
    for (int j = 0; j < fo; ++j) {
      Real* yrow = yd + (static_cast<int64_t>(n) * fo + j) * plane;
      Real b = bias.data[j];
      for (int64_t t = 0; t < plane; ++t) yrow[t] = b;
      for (int i = 0; i < C; ++i) {
        const Real* xch = xd + (static_cast<int64_t>(n) * C + i) * plane;
        for (int dx = 0; dx < kw; ++dx) {
          int hlo = std::max(0, P - dx);
          int hhi = std::min(H - 1, H - 1 + P - dx);
          for (int dy = 0; dy < kh; ++dy) {
            Real kv = kd[((static_cast<int64_t>(dx) * kh + dy) * fi + i) * fo +
                         j];
            int wlo = std::max(0, P - dy);
            int whi = std::min(W - 1, W - 1 + P - dy);
            for (int h = hlo; h <= hhi; ++h) {
              const Real* xr = xch + (h + dx - P) * W + (dy - P);
              Real* yr = yrow + static_cast<int64_t>(h) * W;
              for (int w = wlo; w <= whi; ++w) yr[w] += kv * xr[w];
            }
          }
        }
      }
    }
  }
  return y;
}

template <typename Real>
Tensor<Real> conv2d_backward(const Tensor<Real>& x, const Tensor<Real>& k,
                             const Tensor<Real>& dy, Tensor<Real>& dk,
                             Tensor<Real>& db) {
  int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  int kw = k.shape[0], kh = k.shape[1], fi = k.shape[2], fo = k.shape[3];
  int P = kw / 2;
  int64_t plane = static_cast<int64_t>(H) * W;
  Tensor<Real> dx({N, C, H, W});
  const Real* xd = x.data.data();
  const Real* kd = k.data.data();
  const Real* dyd = dy.data.data();
  Real* dxd = dx.data.data();

  for (int n = 0; n < N; ++n) {
    for (int j = 0; j < fo; ++j) {
      const Real* dyrow = dyd + (static_cast<int64_t>(n) * fo + j) * plane;
      Real bacc = 0;
      for (int64_t t = 0; t < plane; ++t) bacc += dyrow[t];
      db.data[j] += bacc;
      for (int i = 0; i < C; ++i) {
        const Real* xch = xd + (static_cast<int64_t>(n) * C + i) * plane;
        Real* dxch = dxd + (static_cast<int64_t>(n) * C + i) * plane;
        for (int dxk = 0; dxk < kw; ++dxk) {
          int hlo = std::max(0, P - dxk);
          int hhi = std::min(H - 1, H - 1 + P - dxk);
          for (int dyk = 0; dyk < kh; ++dyk) {
            int wlo = std::max(0, P - dyk);
            int whi = std::min(W - 1, W - 1 + P - dyk);
            int64_t kidx =
                ((static_cast<int64_t>(dxk) * kh + dyk) * fi + i) * fo + j;
            Real kv = kd[kidx];
            Real kacc = 0;
            for (int h = hlo; h <= hhi; ++h) {
              const Real* xr = xch + (h + dxk - P) * W + (dyk - P);
              Real* dxr = dxch + (h + dxk - P) * W + (dyk - P);
              const Real* dyr = dyrow + static_cast<int64_t>(h) * W;
              for (int w = wlo; w <= whi; ++w) {
                kacc += xr[w] * dyr[w];
                dxr[w] += kv * dyr[w];
              }
            }
            dk.data[kidx] += kacc;
          }
        }
      }
    }
  }
  return dx;
}

template <typename Real>
Tensor<Real> pool_forward(const Tensor<Real>& x, const LayerSpec& l,
                          std::vector<int64_t>* argmax) {
  int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  int k = l.filter_size, s = l.stride;
  int Ho = (H - k) / s + 1, Wo = (W - k) / s + 1;
  Tensor<Real> y({N, C, Ho, Wo});
  if (argmax && l.pool_mode == PoolMode::Max)
    argmax->assign(y.numel(), 0);
  int64_t oi = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const Real* xch =
          x.data.data() + (static_cast<int64_t>(n) * C + c) * H * W;
      for (int ho = 0; ho < Ho; ++ho) {
        for (int wo = 0; wo < Wo; ++wo, ++oi) {
          if (l.pool_mode == PoolMode::Max) {
            int64_t best_idx = static_cast<int64_t>(ho * s) * W + wo * s;
            Real best = xch[best_idx];
            for (int a = 0; a < k; ++a)
              for (int b = 0; b < k; ++b) {
                int64_t idx = static_cast<int64_t>(ho * s + a) * W + wo * s + b;
                if (xch[idx] > best) {
                  best = xch[idx];
                  best_idx = idx;
                }
              }
            y.data[oi] = best;
            if (argmax)
              (*argmax)[oi] =
                  (static_cast<int64_t>(n) * C + c) * H * W + best_idx;
          } else {
            Real acc = 0;
            for (int a = 0; a < k; ++a)
              for (int b = 0; b < k; ++b)
                acc += xch[static_cast<int64_t>(ho * s + a) * W + wo * s + b];
            y.data[oi] = acc / static_cast<Real>(k * k);
          }
        }
      }
    }
  }
  return y;
}

template <typename Real>
Tensor<Real> pool_backward(const Tensor<Real>& x, const Tensor<Real>& dy,
                           const LayerSpec& l,
                           const std::vector<int64_t>& argmax) {
  int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  int k = l.filter_size, s = l.stride;
  int Ho = dy.shape[2], Wo = dy.shape[3];
  Tensor<Real> dx({N, C, H, W});
  if (l.pool_mode == PoolMode::Max) {
    for (int64_t oi = 0; oi < dy.numel(); ++oi)
      dx.data[argmax[oi]] += dy.data[oi];
  } else {
    Real inv = Real(1) / static_cast<Real>(k * k);
    int64_t oi = 0;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        Real* dxch =
            dx.data.data() + (static_cast<int64_t>(n) * C + c) * H * W;
        for (int ho = 0; ho < Ho; ++ho)
          for (int wo = 0; wo < Wo; ++wo, ++oi) {
            Real g = dy.data[oi] * inv;
            for (int a = 0; a < k; ++a)
              for (int b = 0; b < k; ++b)
                dxch[static_cast<int64_t>(ho * s + a) * W + wo * s + b] += g;
          }
      }
  }
  return dx;
}

template <typename Real>
Tensor<Real> fc_forward(const Tensor<Real>& x, const Tensor<Real>& w,
                        const Tensor<Real>& bias) {
  int N = x.shape[0], F = x.shape[1];
  int O = w.shape[1];
  if (w.shape[0] != F) throw std::invalid_argument("fc input mismatch");
  Tensor<Real> y({N, O});
  for (int n = 0; n < N; ++n) {
    Real* yr = y.data.data() + static_cast<int64_t>(n) * O;
    for (int o = 0; o < O; ++o) yr[o] = bias.data[o];
    const Real* xr = x.data.data() + static_cast<int64_t>(n) * F;
    for (int f = 0; f < F; ++f) {
      Real xv = xr[f];
      const Real* wr = w.data.data() + static_cast<int64_t>(f) * O;
      for (int o = 0; o < O; ++o) yr[o] += xv * wr[o];
    }
  }
  return y;
}

template <typename Real>
Tensor<Real> fc_backward(const Tensor<Real>& x, const Tensor<Real>& w,
                         const Tensor<Real>& dy, Tensor<Real>& dw,
                         Tensor<Real>& db) {
  int N = x.shape[0], F = x.shape[1], O = w.shape[1];
  Tensor<Real> dx({N, F});
  for (int n = 0; n < N; ++n) {
    const Real* xr = x.data.data() + static_cast<int64_t>(n) * F;
    const Real* dyr = dy.data.data() + static_cast<int64_t>(n) * O;
    Real* dxr = dx.data.data() + static_cast<int64_t>(n) * F;
    for (int o = 0; o < O; ++o) db.data[o] += dyr[o];
    for (int f = 0; f < F; ++f) {
      Real* dwr = dw.data.data() + static_cast<int64_t>(f) * O;
      const Real* wr = w.data.data() + static_cast<int64_t>(f) * O;
      Real acc = 0;
      Real xv = xr[f];
      for (int o = 0; o < O; ++o) {
        dwr[o] += xv * dyr[o];
        acc += wr[o] * dyr[o];
      }
      dxr[f] = acc;
    }
  }
  return dx;
}

// (N, C, S) view of a channel-major tensor: S = product of trailing dims.
template <typename Real>
void ncs_dims(const Tensor<Real>& t, int& N, int& C, int64_t& S) {
  N = t.shape[0];
  C = t.shape[1];
  S = 1;
  for (size_t i = 2; i < t.shape.size(); ++i) S *= t.shape[i];
}

template <typename Real>
void bn_batch_stats(const Tensor<Real>& x, std::vector<Real>& mean,
                    std::vector<Real>& var) {
  int N, C;
  int64_t S;
  ncs_dims(x, N, C, S);
  mean.assign(C, Real(0));
  var.assign(C, Real(0));
  int64_t M = static_cast<int64_t>(N) * S;
  for (int c = 0; c < C; ++c) {
    Real s1 = 0, s2 = 0;
    for (int n = 0; n < N; ++n) {
      const Real* p = x.data.data() + (static_cast<int64_t>(n) * C + c) * S;
      for (int64_t t = 0; t < S; ++t) {
        s1 += p[t];
        s2 += p[t] * p[t];
      }
    }
    mean[c] = s1 / static_cast<Real>(M);
    var[c] = s2 / static_cast<Real>(M) - mean[c] * mean[c];
    if (var[c] < Real(0)) var[c] = Real(0);
  }
}

template <typename Real>
Tensor<Real> bn_apply(const Tensor<Real>& x, const Real* mean, const Real* var,
                      const Tensor<Real>& gamma, const Tensor<Real>& beta) {
  int N, C;
  int64_t S;
  ncs_dims(x, N, C, S);
  Tensor<Real> y = x;
  for (int c = 0; c < C; ++c) {
    Real den = std::sqrt(var[c] + static_cast<Real>(kBnEps));
    Real g = gamma.data[c] / den;
    Real b = beta.data[c] - mean[c] * g;
    for (int n = 0; n < N; ++n) {
      Real* p = y.data.data() + (static_cast<int64_t>(n) * C + c) * S;
      for (int64_t t = 0; t < S; ++t) p[t] = g * p[t] + b;
    }
  }
  return y;
}

// Backward through train-mode batchnorm (batch statistics in the graph).
template <typename Real>
Tensor<Real> bn_backward(const Tensor<Real>& x, const Tensor<Real>& dy,
                         const std::vector<Real>& mean,
                         const std::vector<Real>& var,
                         const Tensor<Real>& gamma, Tensor<Real>& dgamma,
                         Tensor<Real>& dbeta) {
  int N, C;
  int64_t S;
  ncs_dims(x, N, C, S);
  int64_t M = static_cast<int64_t>(N) * S;
  Tensor<Real> dx = dy;
  for (int c = 0; c < C; ++c) {
    Real den = std::sqrt(var[c] + static_cast<Real>(kBnEps));
    Real g = gamma.data[c];
    Real s_dy = 0, s_dy_xhat = 0;
    for (int n = 0; n < N; ++n) {
      const Real* xp = x.data.data() + (static_cast<int64_t>(n) * C + c) * S;
      const Real* dyp = dy.data.data() + (static_cast<int64_t>(n) * C + c) * S;
      for (int64_t t = 0; t < S; ++t) {
        Real xhat = (xp[t] - mean[c]) / den;
        s_dy += dyp[t];
        s_dy_xhat += dyp[t] * xhat;
      }
    }
    dgamma.data[c] += s_dy_xhat;
    dbeta.data[c] += s_dy;
    Real m1 = s_dy / static_cast<Real>(M);
    Real m2 = s_dy_xhat / static_cast<Real>(M);
    for (int n = 0; n < N; ++n) {
      const Real* xp = x.data.data() + (static_cast<int64_t>(n) * C + c) * S;
      Real* dxp = dx.data.data() + (static_cast<int64_t>(n) * C + c) * S;
      for (int64_t t = 0; t < S; ++t) {
        Real xhat = (xp[t] - mean[c]) / den;
        dxp[t] = g / den * (dxp[t] - m1 - xhat * m2);
      }
    }
  }
  return dx;
}

template <typename Real>
bool all_finite(const Tensor<Real>& t) {
  for (Real v : t.data)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

template <typename Real>
struct LayerCache {
  Tensor<Real> input;     // what the parametric op consumed (conv 4d / fc 2d)
  Tensor<Real> pre_bn;    // linear output
  Tensor<Real> post_bn;   // after batchnorm (== pre_bn when no bn)
  Tensor<Real> post_act;  // after activation, before dropout
  Tensor<Real> output;
  std::vector<Real> mean, var;  // batch stats used (train mode)
  std::vector<int64_t> pool_arg;
  std::vector<uint8_t> drop_mask;
};

template <typename Real>
struct WalkResult {
  Tensor<Real> logits;
  std::vector<LayerCache<Real>> caches;
  Tensor<Real> probe;  // input of the probed layer, when requested
};

// Single walk used by forward / loss_and_grads / input_at_layer.
template <typename Real>
WalkResult<Real> run_forward(const ArchitectureSpec& spec,
                             const NetworkParams<Real>& params,
                             const Tensor<Real>& batch, Mode mode,
                             uint64_t seed, bool want_caches, int probe_pos) {
  if (batch.rank() != 4 || batch.shape[1] != spec.in_channels ||
      batch.shape[2] != spec.in_height || batch.shape[3] != spec.in_width)
    throw std::invalid_argument("batch shape does not match input_shape");
  if (params.layers.size() != spec.layers.size())
    throw std::invalid_argument("params layer count mismatch");

  int L = static_cast<int>(spec.layers.size());
  WalkResult<Real> res;
  if (want_caches) res.caches.resize(L);

  Tensor<Real> cur = batch;
  std::vector<Tensor<Real>> stack;
  int cur_block = -1;
  bool flat = false;

  for (int i = 0; i < L; ++i) {
    const LayerSpec& l = spec.layers[i];
    const LayerParams<Real>& lp = params.layers[i];
    auto blk = spec.dense_block_of(i);
    if (blk.has_value() && *blk != cur_block) {
      cur_block = *blk;
      stack.clear();
      stack.push_back(cur);
    }

    LayerCache<Real> scratch;
    LayerCache<Real>& cache = want_caches ? res.caches[i] : scratch;

    if (l.kind == LayerKind::Pool) {
      if (probe_pos == i) {
        res.probe = cur;
        return res;
      }
      cache.input = cur;
      cache.output = pool_forward(cur, l, &cache.pool_arg);
      cur = cache.output;
    } else {
      // Parametric layer: conv or fc family.
      Tensor<Real> input;
      if (l.kind == LayerKind::Conv) {
        input = blk.has_value() ? concat_channels(stack) : cur;
      } else {
        if (!flat && !blk.has_value()) {
          cur = reshape(std::move(cur),
                        {cur.shape[0], static_cast<int>(cur.numel() /
                                                        cur.shape[0])});
          flat = true;
        }
        input = cur;
      }
      if (probe_pos == i) {
        res.probe = input;
        return res;
      }
      cache.input = input;
      Tensor<Real> z = l.kind == LayerKind::Conv
                           ? conv2d_same(input, lp.kernel, lp.bias)
                           : fc_forward(input, lp.kernel, lp.bias);
      cache.pre_bn = z;
      if (l.has_batchnorm) {
        if (mode == Mode::Train) {
          bn_batch_stats(z, cache.mean, cache.var);
          z = bn_apply(z, cache.mean.data(), cache.var.data(), lp.bn_gamma,
                       lp.bn_beta);
        } else {
          z = bn_apply(z, lp.bn_mean.data.data(), lp.bn_var.data.data(),
                       lp.bn_gamma, lp.bn_beta);
        }
      }
      cache.post_bn = z;
      if (l.activation == Activation::ReLU) {
        for (Real& v : z.data)
          if (v < Real(0)) v = Real(0);
      }
      cache.post_act = z;
      if (l.dropout_rate > 0.0 && mode == Mode::Train) {
        Rng rng(derive_seed(seed, 0xD0u, static_cast<uint64_t>(i)));
        cache.drop_mask.resize(z.numel());
        Real scale = Real(1) / static_cast<Real>(1.0 - l.dropout_rate);
        for (int64_t t = 0; t < z.numel(); ++t) {
          bool keep = rng.uniform01() >= l.dropout_rate;
          cache.drop_mask[t] = keep ? 1 : 0;
          z.data[t] = keep ? z.data[t] * scale : Real(0);
        }
      }
      cache.output = z;

      if (!all_finite(cache.output)) throw NonFiniteError(i);

      if (blk.has_value()) {
        stack.push_back(cache.output);
        bool last_member = i + 1 == spec.dense_blocks[*blk].second;
        if (last_member) cur = concat_channels(stack);
      } else {
        cur = cache.output;
      }
    }
  }
  res.logits = cur;
  return res;
}

}  // namespace

template <typename Real>
NetworkParams<Real> init_params(const ArchitectureSpec& spec, uint64_t seed) {
  std::vector<LayerIO> io = compute_flow(spec);
  NetworkParams<Real> params;
  params.layers.resize(spec.layers.size());
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    LayerParams<Real>& lp = params.layers[i];
    if (l.kind == LayerKind::Pool) continue;
    Rng rng(derive_seed(seed, 0x1217u, static_cast<uint64_t>(i)));
    int fan_in = io[i].kernel_in;
    if (l.kind == LayerKind::Conv) {
      fan_in *= l.filter_size * l.filter_size;
      lp.kernel =
          Tensor<Real>({l.filter_size, l.filter_size, io[i].kernel_in,
                        l.width});
    } else {
      lp.kernel = Tensor<Real>({io[i].kernel_in, l.width});
    }
    double stddev = std::sqrt(2.0 / fan_in);
    for (Real& v : lp.kernel.data)
      v = static_cast<Real>(rng.normal(0.0, stddev));
    lp.bias = Tensor<Real>({l.width});
    if (l.has_batchnorm) {
      lp.bn_gamma = Tensor<Real>({l.width});
      lp.bn_gamma.fill(Real(1));
      lp.bn_beta = Tensor<Real>({l.width});
      lp.bn_mean = Tensor<Real>({l.width});
      lp.bn_var = Tensor<Real>({l.width});
      lp.bn_var.fill(Real(1));
    }
  }
  return params;
}

template <typename Real>
void check_params(const ArchitectureSpec& spec,
                  const NetworkParams<Real>& params) {
  if (params.layers.size() != spec.layers.size())
    throw std::invalid_argument("layer count mismatch");
  std::vector<LayerIO> io = compute_flow(spec);
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const LayerParams<Real>& lp = params.layers[i];
    if (l.kind == LayerKind::Pool) continue;
    std::vector<int> want =
        l.kind == LayerKind::Conv
            ? std::vector<int>{l.filter_size, l.filter_size, io[i].kernel_in,
                               l.width}
            : std::vector<int>{io[i].kernel_in, l.width};
    if (lp.kernel.shape != want)
      throw std::invalid_argument("kernel shape mismatch at layer " +
                                  std::to_string(i));
    if (lp.bias.shape != std::vector<int>{l.width})
      throw std::invalid_argument("bias shape mismatch at layer " +
                                  std::to_string(i));
    if (l.has_batchnorm) {
      for (const Tensor<Real>* t :
           {&lp.bn_gamma, &lp.bn_beta, &lp.bn_mean, &lp.bn_var})
        if (t->shape != std::vector<int>{l.width})
          throw std::invalid_argument("bn shape mismatch at layer " +
                                      std::to_string(i));
      for (Real v : lp.bn_gamma.data)
        if (!(v > Real(0)))
          throw std::invalid_argument("bn gamma must stay positive");
      for (Real v : lp.bn_var.data)
        if (!(v > Real(0)))
          throw std::invalid_argument("bn variance must stay positive");
    }
  }
}

template <typename Real>
int64_t param_count(const NetworkParams<Real>& params) {
  int64_t n = 0;
  for (const auto& lp : params.layers)
    n += lp.kernel.numel() + lp.bias.numel() + lp.bn_gamma.numel() +
         lp.bn_beta.numel();
  return n;
}

template <typename Real>
Tensor<Real> forward(const ArchitectureSpec& spec,
                     const NetworkParams<Real>& params,
                     const Tensor<Real>& batch, Mode mode, uint64_t seed) {
  return run_forward(spec, params, batch, mode, seed, false, -1).logits;
}

template <typename Real>
Tensor<Real> input_at_layer(const ArchitectureSpec& spec,
                            const NetworkParams<Real>& params,
                            const Tensor<Real>& batch, int pos) {
  WalkResult<Real> r =
      run_forward(spec, params, batch, Mode::Eval, 0, false, pos);
  if (r.probe.empty()) throw std::invalid_argument("probe position invalid");
  return r.probe;
}

template <typename Real>
Tensor<Real> softmax_rows(const Tensor<Real>& logits) {
  int N = logits.shape[0], K = logits.shape[1];
  Tensor<Real> p = logits;
  for (int n = 0; n < N; ++n) {
    Real* row = p.data.data() + static_cast<int64_t>(n) * K;
    Real m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
    Real z = 0;
    for (int k = 0; k < K; ++k) {
      row[k] = std::exp(row[k] - m);
      z += row[k];
    }
    for (int k = 0; k < K; ++k) row[k] /= z;
  }
  return p;
}

template <typename Real>
LossAndGrads<Real> loss_and_grads(const ArchitectureSpec& spec,
                                  const NetworkParams<Real>& params,
                                  const Tensor<Real>& batch,
                                  const std::vector<int>& labels,
                                  Real weight_decay, uint64_t seed) {
  WalkResult<Real> walk =
      run_forward(spec, params, batch, Mode::Train, seed, true, -1);
  int L = static_cast<int>(spec.layers.size());
  int N = walk.logits.shape[0];
  int K = walk.logits.shape[1];
  if (static_cast<int>(labels.size()) != N)
    throw std::invalid_argument("label count mismatch");
  for (int lab : labels)
    if (lab < 0 || lab >= K) throw std::invalid_argument("label out of range");

  LossAndGrads<Real> out;
  out.logits = walk.logits;
  out.grads.layers.resize(L);
  out.batch_mean.resize(L);
  out.batch_var.resize(L);
  for (int i = 0; i < L; ++i) {
    const LayerParams<Real>& lp = params.layers[i];
    LayerParams<Real>& g = out.grads.layers[i];
    if (!lp.kernel.empty()) g.kernel = Tensor<Real>(lp.kernel.shape);
    if (!lp.bias.empty()) g.bias = Tensor<Real>(lp.bias.shape);
    if (!lp.bn_gamma.empty()) {
      g.bn_gamma = Tensor<Real>(lp.bn_gamma.shape);
      g.bn_beta = Tensor<Real>(lp.bn_beta.shape);
    }
    out.batch_mean[i] = walk.caches[i].mean;
    out.batch_var[i] = walk.caches[i].var;
  }

  // Softmax cross-entropy on the logits, averaged over the batch.
  Tensor<Real> dlogits({N, K});
  Real data_loss = 0;
  for (int n = 0; n < N; ++n) {
    const Real* row = walk.logits.data.data() + static_cast<int64_t>(n) * K;
    Real* drow = dlogits.data.data() + static_cast<int64_t>(n) * K;
    Real m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
    Real z = 0;
    for (int k = 0; k < K; ++k) z += std::exp(row[k] - m);
    Real lse = m + std::log(z);
    data_loss += lse - row[labels[n]];
    for (int k = 0; k < K; ++k)
      drow[k] = std::exp(row[k] - m) / z / static_cast<Real>(N);
    drow[labels[n]] -= Real(1) / static_cast<Real>(N);
  }
  data_loss /= static_cast<Real>(N);

  // Backward walk mirroring the forward flow.
  auto backward_parametric = [&](int i, Tensor<Real> dout) -> Tensor<Real> {
    const LayerSpec& l = spec.layers[i];
    const LayerParams<Real>& lp = params.layers[i];
    LayerParams<Real>& g = out.grads.layers[i];
    LayerCache<Real>& c = walk.caches[i];
    if (!c.drop_mask.empty()) {
      Real scale = Real(1) / static_cast<Real>(1.0 - l.dropout_rate);
      for (int64_t t = 0; t < dout.numel(); ++t)
        dout.data[t] = c.drop_mask[t] ? dout.data[t] * scale : Real(0);
    }
    if (l.activation == Activation::ReLU) {
      for (int64_t t = 0; t < dout.numel(); ++t)
        if (c.post_act.data[t] <= Real(0)) dout.data[t] = Real(0);
    }
    if (l.has_batchnorm)
      dout = bn_backward(c.pre_bn, dout, c.mean, c.var, lp.bn_gamma,
                         g.bn_gamma, g.bn_beta);
    if (l.kind == LayerKind::Conv)
      return conv2d_backward(c.input, lp.kernel, dout, g.kernel, g.bias);
    return fc_backward(c.input, lp.kernel, dout, g.kernel, g.bias);
  };

  Tensor<Real> dcur = dlogits;
  int i = L - 1;
  while (i >= 0) {
    const LayerSpec& l = spec.layers[i];
    auto blk = spec.dense_block_of(i);
    if (blk.has_value() && i + 1 == spec.dense_blocks[*blk].second) {
      // Entire dense block at once. dcur is the grad on the export concat.
      auto [first, last] = spec.dense_blocks[*blk];
      int members = last - first;
      // Per-segment grads: segment 0 is the block input.
      std::vector<Tensor<Real>> segs(members + 1);
      segs[0] = Tensor<Real>(walk.caches[first].input.shape);
      for (int m = 0; m < members; ++m)
        segs[m + 1] = Tensor<Real>(walk.caches[first + m].output.shape);
      {
        // An fc consumer may have flattened the export concat.
        int ec = segs[0].shape[1];
        for (int m = 0; m < members; ++m) ec += segs[m + 1].shape[1];
        std::vector<int> export_shape{segs[0].shape[0], ec, segs[0].shape[2],
                                      segs[0].shape[3]};
        if (dcur.shape != export_shape)
          dcur = reshape(std::move(dcur), export_shape);
      }
      {
        std::vector<Tensor<Real>*> parts;
        for (auto& s : segs) parts.push_back(&s);
        split_channels_accum(dcur, parts);
      }
      for (int m = members - 1; m >= 0; --m) {
        Tensor<Real> dinput = backward_parametric(first + m, segs[m + 1]);
        std::vector<Tensor<Real>*> parts;
        for (int q = 0; q <= m; ++q) parts.push_back(&segs[q]);
        split_channels_accum(dinput, parts);
      }
      dcur = segs[0];
      i = first - 1;
      continue;
    }
    if (l.kind == LayerKind::Pool) {
      LayerCache<Real>& c = walk.caches[i];
      dcur = pool_backward(c.input, dcur, l, c.pool_arg);
    } else {
      if (dcur.shape != walk.caches[i].output.shape)
        dcur = reshape(std::move(dcur), walk.caches[i].output.shape);
      dcur = backward_parametric(i, std::move(dcur));
    }
    // Reshape flat grads back to the spatial shape of the producer.
    if (i > 0) {
      const Tensor<Real>& prev_out = walk.caches[i - 1].output.empty()
                                         ? walk.caches[i - 1].input
                                         : walk.caches[i - 1].output;
      if (!prev_out.empty() && dcur.numel() == prev_out.numel() &&
          dcur.shape != prev_out.shape)
        dcur = reshape(std::move(dcur), prev_out.shape);
    }
    --i;
  }

  // Weight decay over kernels/weights.
  Real reg = 0;
  for (int li = 0; li < L; ++li) {
    const Tensor<Real>& k = params.layers[li].kernel;
    if (k.empty()) continue;
    Tensor<Real>& gk = out.grads.layers[li].kernel;
    for (int64_t t = 0; t < k.numel(); ++t) {
      reg += k.data[t] * k.data[t];
      gk.data[t] += weight_decay * k.data[t];
    }
  }
  out.data_loss = data_loss;
  out.loss = data_loss + weight_decay * reg / Real(2);
  return out;
}

#define EAS_INSTANTIATE(Real)                                                  \
  template NetworkParams<Real> init_params<Real>(const ArchitectureSpec&,      \
                                                 uint64_t);                    \
  template void check_params<Real>(const ArchitectureSpec&,                    \
                                   const NetworkParams<Real>&);                \
  template int64_t param_count<Real>(const NetworkParams<Real>&);              \
  template Tensor<Real> forward<Real>(const ArchitectureSpec&,                 \
                                      const NetworkParams<Real>&,              \
                                      const Tensor<Real>&, Mode, uint64_t);    \
  template Tensor<Real> input_at_layer<Real>(const ArchitectureSpec&,          \
                                             const NetworkParams<Real>&,       \
                                             const Tensor<Real>&, int);        \
  template Tensor<Real> softmax_rows<Real>(const Tensor<Real>&);               \
  template LossAndGrads<Real> loss_and_grads<Real>(                            \
      const ArchitectureSpec&, const NetworkParams<Real>&, const Tensor<Real>&,\
      const std::vector<int>&, Real, uint64_t);

EAS_INSTANTIATE(float)
EAS_INSTANTIATE(double)

}  // namespace eas
