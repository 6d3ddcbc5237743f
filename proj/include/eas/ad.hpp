// Small reverse-mode autodiff over double vectors, used by the controller.
// Values are computed eagerly; backward replays closures in reverse order.
#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <map>
#include <string>
#include <vector>

namespace eas {

// Named flat parameter storage with matching gradient buffer.
struct ParamStore {
  struct Span {
    int offset = 0;
    int rows = 0;
    int cols = 1;
    int size() const { return rows * cols; }
  };

  std::vector<double> theta, grad;
  std::map<std::string, Span> spans;

  Span add(const std::string& name, int rows, int cols = 1) {
    Span s{static_cast<int>(theta.size()), rows, cols};
    spans.emplace(name, s);
    theta.resize(theta.size() + static_cast<size_t>(rows) * cols, 0.0);
    grad.resize(theta.size(), 0.0);
    return s;
  }
  const Span& span(const std::string& name) const {
    auto it = spans.find(name);
    if (it == spans.end()) throw std::invalid_argument("no span " + name);
    return it->second;
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
  int size() const { return static_cast<int>(theta.size()); }
};

class Tape {
 public:
  using Var = int;

  explicit Tape(ParamStore* store) : store_(store) {}

  const std::vector<double>& value(Var v) const { return nodes_[v].value; }
  double scalar(Var v) const { return nodes_[v].value.at(0); }
  int size(Var v) const { return static_cast<int>(nodes_[v].value.size()); }

  Var param(const std::string& name) {
    auto cached = param_cache_.find(name);
    if (cached != param_cache_.end()) return cached->second;
    const ParamStore::Span s = store_->span(name);
    Var v = fresh(std::vector<double>(store_->theta.begin() + s.offset,
                                      store_->theta.begin() + s.offset +
                                          s.size()));
    nodes_[v].back = [this, v, s]() {
      for (int i = 0; i < s.size(); ++i)
        store_->grad[s.offset + i] += nodes_[v].grad[i];
    };
    param_cache_.emplace(name, v);
    return v;
  }

  Var constant(std::vector<double> vals) { return fresh(std::move(vals)); }

  Var zeros(int n) { return fresh(std::vector<double>(n, 0.0)); }

  Var slice(Var x, int start, int len) {
    std::vector<double> out(nodes_[x].value.begin() + start,
                            nodes_[x].value.begin() + start + len);
    Var v = fresh(std::move(out));
    nodes_[v].back = [this, v, x, start, len]() {
      for (int i = 0; i < len; ++i)
        nodes_[x].grad[start + i] += nodes_[v].grad[i];
    };
    return v;
  }

  Var concat(Var a, Var b) {
    std::vector<double> out = nodes_[a].value;
    out.insert(out.end(), nodes_[b].value.begin(), nodes_[b].value.end());
    Var v = fresh(std::move(out));
    int na = size(a);
    Var vb = b;
    nodes_[v].back = [this, v, a, vb, na]() {
      for (int i = 0; i < na; ++i) nodes_[a].grad[i] += nodes_[v].grad[i];
      for (size_t i = 0; i < nodes_[vb].value.size(); ++i)
        nodes_[vb].grad[i] += nodes_[v].grad[na + i];
    };
    return v;
  }

  Var add(Var a, Var b) {
    assert(size(a) == size(b));
    std::vector<double> out = nodes_[a].value;
    for (int i = 0; i < size(b); ++i) out[i] += nodes_[b].value[i];
    Var v = fresh(std::move(out));
    nodes_[v].back = [this, v, a, b]() {
      for (size_t i = 0; i < nodes_[v].value.size(); ++i) {
        nodes_[a].grad[i] += nodes_[v].grad[i];
        nodes_[b].grad[i] += nodes_[v].grad[i];
      }
    };
    return v;
  }

  Var mul(Var a, Var b) {
    assert(size(a) == size(b));
    std::vector<double> out = nodes_[a].value;
    for (int i = 0; i < size(b); ++i) out[i] *= nodes_[b].value[i];
    Var v = fresh(std::move(out));
    nodes_[v].back = [this, v, a, b]() {
      for (size_t i = 0; i < nodes_[v].value.size(); ++i) {
        nodes_[a].grad[i] += nodes_[v].grad[i] * nodes_[b].value[i];
        nodes_[b].grad[i] += nodes_[v].grad[i] * nodes_[a].value[i];
      }
    };
    return v;
  }

  Var scale(Var a, double s) {
    std::vector<double> out = nodes_[a].value;
    for (double& x : out) x *= s;
    Var v = fresh(std::move(out));
    nodes_[v].back = [this, v, a, s]() {
      for (size_t i = 0; i < nodes_[v].value.size(); ++i)
        nodes_[a].grad[i] += nodes_[v].grad[i] * s;
    };
    return v;
  }

  // y = W x, with W a flat var viewed as (rows x cols), x of length cols.
  Var matvec(Var w, int rows, int cols, Var x) {
    assert(size(w) == rows * cols);
    assert(size(x) == cols);
    std::vector<double> out(rows, 0.0);
    for (int r = 0; r < rows; ++r) {
      double acc = 0;
      const double* wr = nodes_[w].value.data() + static_cast<size_t>(r) * cols;
      for (int c = 0; c < cols; ++c) acc += wr[c] * nodes_[x].value[c];
      out[r] = acc;
    }
    Var v = fresh(std::move(out));
    nodes_[v].back = [this, v, w, x, rows, cols]() {
      for (int r = 0; r < rows; ++r) {
        double g = nodes_[v].grad[r];
        if (g == 0.0) continue;
        double* wg = nodes_[w].grad.data() + static_cast<size_t>(r) * cols;
        const double* wv =
            nodes_[w].value.data() + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) {
          wg[c] += g * nodes_[x].value[c];
          nodes_[x].grad[c] += g * wv[c];
        }
      }
    };
    return v;
  }

  Var sigmoid(Var x) {
    std::vector<double> out = nodes_[x].value;
    for (double& v : out) v = 1.0 / (1.0 + std::exp(-v));
    Var v = fresh(std::move(out));
    nodes_[v].back = [this, v, x]() {
      for (size_t i = 0; i < nodes_[v].value.size(); ++i) {
        double s = nodes_[v].value[i];
        nodes_[x].grad[i] += nodes_[v].grad[i] * s * (1.0 - s);
      }
    };
    return v;
  }

  Var tanh_op(Var x) {
    std::vector<double> out = nodes_[x].value;
    for (double& v : out) v = std::tanh(v);
    Var v = fresh(std::move(out));
    nodes_[v].back = [this, v, x]() {
      for (size_t i = 0; i < nodes_[v].value.size(); ++i) {
        double t = nodes_[v].value[i];
        nodes_[x].grad[i] += nodes_[v].grad[i] * (1.0 - t * t);
      }
    };
    return v;
  }

  Var dot(Var a, Var b) {
    assert(size(a) == size(b));
    double acc = 0;
    for (int i = 0; i < size(a); ++i)
      acc += nodes_[a].value[i] * nodes_[b].value[i];
    Var v = fresh({acc});
    nodes_[v].back = [this, v, a, b]() {
      double g = nodes_[v].grad[0];
      for (size_t i = 0; i < nodes_[a].value.size(); ++i) {
        nodes_[a].grad[i] += g * nodes_[b].value[i];
        nodes_[b].grad[i] += g * nodes_[a].value[i];
      }
    };
    return v;
  }

  // log P(outcome) for a Bernoulli with logit z (size-1 var):
  //   widen: -softplus(-z); keep: -softplus(z).
  Var bernoulli_logprob(Var z, bool outcome) {
    double zv = scalar(z);
    double lp = outcome ? -softplus(-zv) : -softplus(zv);
    Var v = fresh({lp});
    nodes_[v].back = [this, v, z, outcome]() {
      double zv2 = nodes_[z].value[0];
      double d = outcome ? 1.0 / (1.0 + std::exp(zv2))      // sigmoid(-z)
                         : -1.0 / (1.0 + std::exp(-zv2));   // -sigmoid(z)
      nodes_[z].grad[0] += nodes_[v].grad[0] * d;
    };
    return v;
  }

  // log softmax over the unmasked entries of `logits`, picked at `index`.
  Var masked_log_softmax_pick(Var logits, const std::vector<uint8_t>& mask,
                              int index) {
    assert(mask.size() == nodes_[logits].value.size());
    assert(mask[index]);
    const std::vector<double>& z = nodes_[logits].value;
    double m = -1e300;
    for (size_t i = 0; i < z.size(); ++i)
      if (mask[i]) m = std::max(m, z[i]);
    double denom = 0;
    for (size_t i = 0; i < z.size(); ++i)
      if (mask[i]) denom += std::exp(z[i] - m);
    double lp = z[index] - m - std::log(denom);
    Var v = fresh({lp});
    std::vector<uint8_t> mask_copy = mask;
    nodes_[v].back = [this, v, logits, mask_copy, index, m, denom]() {
      double g = nodes_[v].grad[0];
      const std::vector<double>& zz = nodes_[logits].value;
      for (size_t i = 0; i < zz.size(); ++i) {
        if (!mask_copy[i]) continue;
        double p = std::exp(zz[i] - m) / denom;
        nodes_[logits].grad[i] +=
            g * ((static_cast<int>(i) == index ? 1.0 : 0.0) - p);
      }
    };
    return v;
  }

  // Softmax probabilities over unmasked entries (no tape node; for sampling).
  std::vector<double> masked_softmax(Var logits,
                                     const std::vector<uint8_t>& mask) const {
    const std::vector<double>& z = nodes_[logits].value;
    std::vector<double> p(z.size(), 0.0);
    double m = -1e300;
    for (size_t i = 0; i < z.size(); ++i)
      if (mask[i]) m = std::max(m, z[i]);
    double denom = 0;
    for (size_t i = 0; i < z.size(); ++i)
      if (mask[i]) {
        p[i] = std::exp(z[i] - m);
        denom += p[i];
      }
    for (double& v : p) v /= denom;
    return p;
  }

  Var add_many(const std::vector<Var>& vars) {
    assert(!vars.empty());
    Var acc = vars[0];
    for (size_t i = 1; i < vars.size(); ++i) acc = add(acc, vars[i]);
    return acc;
  }

  void backward(Var loss) {
    for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
    nodes_[loss].grad.assign(nodes_[loss].value.size(), 1.0);
    for (int v = loss; v >= 0; --v)
      if (nodes_[v].back) nodes_[v].back();
  }

  static double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
  }

 private:
  struct Node {
    std::vector<double> value;
    std::vector<double> grad;
    std::function<void()> back;
  };

  Var fresh(std::vector<double> value) {
    Node n;
    n.grad.assign(value.size(), 0.0);
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size()) - 1;
  }

  ParamStore* store_;
  std::vector<Node> nodes_;
  std::map<std::string, Var> param_cache_;
};

}  // namespace eas
