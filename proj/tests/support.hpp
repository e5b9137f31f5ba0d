#pragma once

#include <cmath>
#include <functional>

#include "s2c/layers.hpp"
#include "s2c/tensor.hpp"

namespace s2c::testing {

// Direct seven-loop cross-correlation with zero padding.
template <RealScalar S>
Tensor<S> naive_conv(const Tensor<S>& x, const Tensor<S>& w, Index stride, Index pad) {
  const Index n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const Index oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  auto y = Tensor<S>::zeros({n, co, oh, ow});
  for (Index b = 0; b < n; ++b)
    for (Index o = 0; o < co; ++o)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (Index c = 0; c < ci; ++c)
            for (Index u = 0; u < kh; ++u)
              for (Index v = 0; v < kw; ++v) {
                const Index r = i * stride - pad + u, q = j * stride - pad + v;
                if (r < 0 || r >= h || q < 0 || q >= wd) continue;
                acc += static_cast<double>(x(b, c, r, q)) * static_cast<double>(w(o, c, u, v));
              }
          y(b, o, i, j) = static_cast<S>(acc);
        }
  return y;
}

// Central difference of f with respect to one scalar, restored afterwards.
template <RealScalar S>
double central_difference(const std::function<double()>& f, S& x, double h) {
  const S saved = x;
  x = static_cast<S>(static_cast<double>(saved) + h);
  const double up = f();
  x = static_cast<S>(static_cast<double>(saved) - h);
  const double down = f();
  x = saved;
  return (up - down) / (2.0 * h);
}

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

template <RealScalar S>
double dot(const Tensor<S>& a, const Tensor<S>& b) {
  double s = 0.0;
  for (Index i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

template <RealScalar S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  double m = 0.0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace s2c::testing
