// Dense n-d tensor. Activations are (N, C, H, W); conv kernels are
// (k_w, k_h, f_i, f_o); fc weights are (in, out).
#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace eas {

template <typename Real>
struct Tensor {
  std::vector<int> shape;
  std::vector<Real> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), Real(0));
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("negative tensor dim");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  bool empty() const { return data.empty(); }
  int dim(int i) const { return shape.at(i); }
  int rank() const { return static_cast<int>(shape.size()); }

  void fill(Real v) { std::fill(data.begin(), data.end(), v); }

  // 4-d accessors (activations and conv kernels).
  Real& at4(int a, int b, int c, int d) {
    return data[idx4(a, b, c, d)];
  }
  Real at4(int a, int b, int c, int d) const {
    return data[idx4(a, b, c, d)];
  }
  int64_t idx4(int a, int b, int c, int d) const {
    assert(rank() == 4);
    return ((static_cast<int64_t>(a) * shape[1] + b) * shape[2] + c) *
               shape[3] +
           d;
  }

  Real& at2(int a, int b) { return data[idx2(a, b)]; }
  Real at2(int a, int b) const { return data[idx2(a, b)]; }
  int64_t idx2(int a, int b) const {
    assert(rank() == 2);
    return static_cast<int64_t>(a) * shape[1] + b;
  }

  Real& at1(int a) {
    assert(rank() == 1);
    return data[a];
  }
  Real at1(int a) const {
    assert(rank() == 1);
    return data[a];
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<Other>(data[i]);
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

}  // namespace eas
