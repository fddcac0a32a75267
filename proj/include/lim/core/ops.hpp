// Copyright (c) 2026 The lim authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lim/core/tensor.hpp"
#include "lim/error.hpp"

namespace lim {

enum class Mode { kTrain, kEval };

namespace detail {

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(str(op, ": shape mismatch ", shape_str(a), " vs ", shape_str(b)));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (same shape).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> v(a.value().begin(), a.value().end());
  for (int64_t i = 0; i < b.numel(); ++i) v[i] += b.value()[i];
  return detail::make_op<T>(a.shape(), std::move(v), {a, b}, [](Node<T>& n) {
    for (int p = 0; p < 2; ++p) {
      if (!n.parents[p]->requires_grad) continue;
      auto& g = n.parents[p]->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> v(a.value().begin(), a.value().end());
  for (int64_t i = 0; i < b.numel(); ++i) v[i] -= b.value()[i];
  return detail::make_op<T>(a.shape(), std::move(v), {a, b}, [](Node<T>& n) {
    if (n.parents[0]->requires_grad) {
      auto& g = n.parents[0]->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& g = n.parents[1]->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> v(static_cast<size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i) v[i] = a.value()[i] * b.value()[i];
  return detail::make_op<T>(a.shape(), std::move(v), {a, b}, [](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      auto& g = n.parents[0]->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& g = n.parents[1]->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "div");
  std::vector<T> v(static_cast<size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i) v[i] = a.value()[i] / b.value()[i];
  return detail::make_op<T>(a.shape(), std::move(v), {a, b}, [](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      auto& g = n.parents[0]->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / bv[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& g = n.parents[1]->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> v(a.value().begin(), a.value().end());
  for (auto& x : v) x += c;
  return detail::make_op<T>(a.shape(), std::move(v), {a}, [](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& g = n.parents[0]->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  std::vector<T> v(a.value().begin(), a.value().end());
  for (auto& x : v) x *= c;
  return detail::make_op<T>(a.shape(), std::move(v), {a}, [c](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& g = n.parents[0]->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * c;
  });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

// ---------------------------------------------------------------------------
// Pointwise maps.
// ---------------------------------------------------------------------------

enum class Pointwise { kRelu, kLeakyRelu, kSigmoid, kExp, kLog, kAbs, kSqrt, kSoftplus };

template <typename T>
Tensor<T> pointwise(const Tensor<T>& x, Pointwise kind, T slope = T(0.2)) {
  const auto& xv = x.value();
  std::vector<T> v(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) {
    const T xi = xv[i];
    switch (kind) {
      case Pointwise::kRelu:
        v[i] = xi > T(0) ? xi : T(0);
        break;
      case Pointwise::kLeakyRelu:
        v[i] = xi > T(0) ? xi : slope * xi;
        break;
      case Pointwise::kSigmoid:
        v[i] = xi >= T(0) ? T(1) / (T(1) + std::exp(-xi))
                          : std::exp(xi) / (T(1) + std::exp(xi));
        break;
      case Pointwise::kExp:
        v[i] = std::exp(xi);
        break;
      case Pointwise::kLog:
        if (!(xi > T(0))) {
          throw DomainError(detail::str("log: non-positive value ", xi, " at index ", i));
        }
        v[i] = std::log(xi);
        break;
      case Pointwise::kAbs:
        v[i] = std::abs(xi);
        break;
      case Pointwise::kSqrt:
        if (xi < T(0)) {
          throw DomainError(detail::str("sqrt: negative value ", xi, " at index ", i));
        }
        v[i] = std::sqrt(xi);
        break;
      case Pointwise::kSoftplus:
        // max(x,0) + log1p(exp(-|x|)): saturation-free in both tails.
        v[i] = std::max(xi, T(0)) + std::log1p(std::exp(-std::abs(xi)));
        break;
    }
  }
  return detail::make_op<T>(x.shape(), std::move(v), {x}, [kind, slope](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    const auto& xv = n.parents[0]->value;
    const auto& yv = n.value;
    auto& g = n.parents[0]->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) {
      T d;
      switch (kind) {
        case Pointwise::kRelu:
          d = xv[i] > T(0) ? T(1) : T(0);
          break;
        case Pointwise::kLeakyRelu:
          d = xv[i] > T(0) ? T(1) : slope;
          break;
        case Pointwise::kSigmoid:
          d = yv[i] * (T(1) - yv[i]);
          break;
        case Pointwise::kExp:
          d = yv[i];
          break;
        case Pointwise::kLog:
          d = T(1) / xv[i];
          break;
        case Pointwise::kAbs:
          d = xv[i] > T(0) ? T(1) : (xv[i] < T(0) ? T(-1) : T(0));
          break;
        case Pointwise::kSqrt:
          d = yv[i] > T(0) ? T(1) / (T(2) * yv[i]) : T(0);
          break;
        case Pointwise::kSoftplus:
          d = xv[i] >= T(0) ? T(1) / (T(1) + std::exp(-xv[i]))
                            : std::exp(xv[i]) / (T(1) + std::exp(xv[i]));
          break;
      }
      g[i] += n.grad[i] * d;
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return pointwise(x, Pointwise::kRelu);
}
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.2)) {
  return pointwise(x, Pointwise::kLeakyRelu, slope);
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return pointwise(x, Pointwise::kSigmoid);
}
template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return pointwise(x, Pointwise::kExp);
}
template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return pointwise(x, Pointwise::kLog);
}
template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return pointwise(x, Pointwise::kAbs);
}
template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return pointwise(x, Pointwise::kSqrt);
}
template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return pointwise(x, Pointwise::kSoftplus);
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError(detail::str("reshape: cannot view ", shape_str(x.shape()), " as ",
                                     shape_str(shape)));
  }
  std::vector<T> v(x.value().begin(), x.value().end());
  return detail::make_op<T>(std::move(shape), std::move(v), {x}, [](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& g = n.parents[0]->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.size(0) != b.size(0)) {
    throw DimensionError(detail::str("concat_cols: incompatible shapes ", shape_str(a.shape()),
                                     " and ", shape_str(b.shape())));
  }
  const int64_t rows = a.size(0), ca = a.size(1), cb = b.size(1);
  std::vector<T> v(static_cast<size_t>(rows * (ca + cb)));
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < ca; ++j) v[r * (ca + cb) + j] = a.value()[r * ca + j];
    for (int64_t j = 0; j < cb; ++j) v[r * (ca + cb) + ca + j] = b.value()[r * cb + j];
  }
  return detail::make_op<T>({rows, ca + cb}, std::move(v), {a, b}, [rows, ca, cb](Node<T>& n) {
    if (n.parents[0]->requires_grad) {
      auto& g = n.parents[0]->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < ca; ++j) g[r * ca + j] += n.grad[r * (ca + cb) + j];
    }
    if (n.parents[1]->requires_grad) {
      auto& g = n.parents[1]->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < cb; ++j) g[r * cb + j] += n.grad[r * (ca + cb) + ca + j];
    }
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int64_t begin, int64_t end) {
  if (x.rank() < 1 || begin < 0 || end > x.size(0) || begin >= end) {
    throw DimensionError(detail::str("slice_rows: invalid range [", begin, ", ", end,
                                     ") for shape ", shape_str(x.shape())));
  }
  const int64_t row = x.numel() / x.size(0);
  Shape out_shape = x.shape();
  out_shape[0] = end - begin;
  std::vector<T> v(x.value().begin() + begin * row, x.value().begin() + end * row);
  return detail::make_op<T>(std::move(out_shape), std::move(v), {x}, [begin, row](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& g = n.parents[0]->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) g[static_cast<size_t>(begin * row) + i] += n.grad[i];
  });
}

// out[r] = x[r, labels[r]].
template <typename T>
Tensor<T> take_class(const Tensor<T>& x, const std::vector<int64_t>& labels) {
  if (x.rank() != 2 || static_cast<int64_t>(labels.size()) != x.size(0)) {
    throw DimensionError(detail::str("take_class: need [rows, classes] input and one label per "
                                     "row, got ", shape_str(x.shape()), " with ", labels.size(),
                                     " labels"));
  }
  const int64_t rows = x.size(0), cols = x.size(1);
  std::vector<T> v(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || labels[r] >= cols) {
      throw DomainError(detail::str("take_class: label ", labels[r], " out of range [0, ", cols,
                                    ") at row ", r));
    }
    v[r] = x.value()[r * cols + labels[r]];
  }
  return detail::make_op<T>({rows}, std::move(v), {x}, [labels, cols](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& g = n.parents[0]->ensure_grad();
    for (size_t r = 0; r < labels.size(); ++r) g[r * cols + labels[r]] += n.grad[r];
  });
}

// ---------------------------------------------------------------------------
// Affine map: x [B, I] * w [O, I]^T + b [O].
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.size(1) != w.size(1) ||
      w.size(0) != b.size(0)) {
    throw DimensionError(detail::str("linear: incompatible shapes x=", shape_str(x.shape()),
                                     " w=", shape_str(w.shape()), " b=", shape_str(b.shape())));
  }
  const int64_t batch = x.size(0), in = x.size(1), out = w.size(0);
  std::vector<T> v(static_cast<size_t>(batch * out));
  const T* xv = x.value().data();
  const T* wv = w.value().data();
  const T* bv = b.value().data();
  for (int64_t r = 0; r < batch; ++r) {
    for (int64_t o = 0; o < out; ++o) {
      T acc = bv[o];
      const T* xr = xv + r * in;
      const T* wr = wv + o * in;
      for (int64_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      v[r * out + o] = acc;
    }
  }
  return detail::make_op<T>({batch, out}, std::move(v), {x, w, b},
                            [batch, in, out](Node<T>& n) {
    const T* xv = n.parents[0]->value.data();
    const T* wv = n.parents[1]->value.data();
    const T* gv = n.grad.data();
    if (n.parents[0]->requires_grad) {
      auto& gx = n.parents[0]->ensure_grad();
      for (int64_t r = 0; r < batch; ++r)
        for (int64_t o = 0; o < out; ++o) {
          const T go = gv[r * out + o];
          const T* wr = wv + o * in;
          T* gxr = gx.data() + r * in;
          for (int64_t i = 0; i < in; ++i) gxr[i] += go * wr[i];
        }
    }
    if (n.parents[1]->requires_grad) {
      auto& gw = n.parents[1]->ensure_grad();
      for (int64_t r = 0; r < batch; ++r)
        for (int64_t o = 0; o < out; ++o) {
          const T go = gv[r * out + o];
          const T* xr = xv + r * in;
          T* gwr = gw.data() + o * in;
          for (int64_t i = 0; i < in; ++i) gwr[i] += go * xr[i];
        }
    }
    if (n.parents[2]->requires_grad) {
      auto& gb = n.parents[2]->ensure_grad();
      for (int64_t r = 0; r < batch; ++r)
        for (int64_t o = 0; o < out; ++o) gb[o] += gv[r * out + o];
    }
  });
}

// ---------------------------------------------------------------------------
// 1-D convolution (cross-correlation, no implicit padding):
// x [B, Ci, Ti] * k [Co, Ci, K] -> [B, Co, (Ti-K)/stride + 1].
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& k, int64_t stride = 1) {
  if (x.rank() != 3 || k.rank() != 3 || x.size(1) != k.size(1)) {
    throw DimensionError(detail::str("conv1d: incompatible shapes x=", shape_str(x.shape()),
                                     " k=", shape_str(k.shape())));
  }
  if (stride < 1) throw DimensionError(detail::str("conv1d: stride must be >= 1, got ", stride));
  const int64_t batch = x.size(0), cin = x.size(1), tin = x.size(2);
  const int64_t cout = k.size(0), klen = k.size(2);
  if (klen > tin) {
    throw DimensionError(detail::str("conv1d: kernel length ", klen, " exceeds input length ",
                                     tin));
  }
  const int64_t tout = (tin - klen) / stride + 1;
  std::vector<T> v(static_cast<size_t>(batch * cout * tout));
  const T* xv = x.value().data();
  const T* kv = k.value().data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t o = 0; o < cout; ++o) {
      for (int64_t t = 0; t < tout; ++t) {
        T acc = 0;
        for (int64_t i = 0; i < cin; ++i) {
          const T* xr = xv + (b * cin + i) * tin + t * stride;
          const T* kr = kv + (o * cin + i) * klen;
          for (int64_t kk = 0; kk < klen; ++kk) acc += xr[kk] * kr[kk];
        }
        v[(b * cout + o) * tout + t] = acc;
      }
    }
  }
  return detail::make_op<T>({batch, cout, tout}, std::move(v), {x, k},
                            [batch, cin, tin, cout, klen, tout, stride](Node<T>& n) {
    const T* xv = n.parents[0]->value.data();
    const T* kv = n.parents[1]->value.data();
    const T* gv = n.grad.data();
    if (n.parents[0]->requires_grad) {
      auto& gx = n.parents[0]->ensure_grad();
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t o = 0; o < cout; ++o)
          for (int64_t i = 0; i < cin; ++i) {
            const T* kr = kv + (o * cin + i) * klen;
            T* gxr = gx.data() + (b * cin + i) * tin;
            const T* gr = gv + (b * cout + o) * tout;
            for (int64_t t = 0; t < tout; ++t) {
              const T go = gr[t];
              T* dst = gxr + t * stride;
              for (int64_t kk = 0; kk < klen; ++kk) dst[kk] += go * kr[kk];
            }
          }
    }
    if (n.parents[1]->requires_grad) {
      auto& gk = n.parents[1]->ensure_grad();
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t o = 0; o < cout; ++o)
          for (int64_t i = 0; i < cin; ++i) {
            T* gkr = gk.data() + (o * cin + i) * klen;
            const T* gr = gv + (b * cout + o) * tout;
            const T* xr = xv + (b * cin + i) * tin;
            for (int64_t t = 0; t < tout; ++t) {
              const T go = gr[t];
              const T* src = xr + t * stride;
              for (int64_t kk = 0; kk < klen; ++kk) gkr[kk] += go * src[kk];
            }
          }
    }
  });
}

// Non-overlapping max pooling over the time axis; the remainder is dropped.
template <typename T>
Tensor<T> maxpool1d(const Tensor<T>& x, int64_t factor) {
  if (x.rank() != 3) {
    throw DimensionError(detail::str("maxpool1d: need [B, C, T] input, got ",
                                     shape_str(x.shape())));
  }
  if (factor < 1 || x.size(2) < factor) {
    throw DimensionError(detail::str("maxpool1d: factor ", factor, " invalid for length ",
                                     x.size(2)));
  }
  const int64_t batch = x.size(0), ch = x.size(1), tin = x.size(2);
  const int64_t tout = tin / factor;
  std::vector<T> v(static_cast<size_t>(batch * ch * tout));
  std::vector<int64_t> argmax(v.size());
  const T* xv = x.value().data();
  for (int64_t bc = 0; bc < batch * ch; ++bc) {
    const T* xr = xv + bc * tin;
    for (int64_t t = 0; t < tout; ++t) {
      int64_t best = t * factor;
      for (int64_t j = 1; j < factor; ++j) {
        if (xr[t * factor + j] > xr[best]) best = t * factor + j;
      }
      v[bc * tout + t] = xr[best];
      argmax[bc * tout + t] = bc * tin + best;
    }
  }
  return detail::make_op<T>({batch, ch, tout}, std::move(v), {x},
                            [argmax = std::move(argmax)](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& g = n.parents[0]->ensure_grad();
    for (size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Normalizations.
// ---------------------------------------------------------------------------

// Per-sample normalization over the feature axis (population variance).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& offset,
                     T eps) {
  if (x.rank() != 2 || gain.rank() != 1 || offset.rank() != 1 || gain.size(0) != x.size(1) ||
      offset.size(0) != x.size(1)) {
    throw DimensionError(detail::str("layer_norm: incompatible shapes x=", shape_str(x.shape()),
                                     " gain=", shape_str(gain.shape()), " offset=",
                                     shape_str(offset.shape())));
  }
  const int64_t batch = x.size(0), feat = x.size(1);
  std::vector<T> v(static_cast<size_t>(batch * feat));
  std::vector<T> xhat(v.size());
  std::vector<T> inv_std(static_cast<size_t>(batch));
  const T* xv = x.value().data();
  const T* gv = gain.value().data();
  const T* ov = offset.value().data();
  for (int64_t r = 0; r < batch; ++r) {
    const T* xr = xv + r * feat;
    double mean = 0;
    for (int64_t j = 0; j < feat; ++j) mean += xr[j];
    mean /= static_cast<double>(feat);
    double var = 0;
    for (int64_t j = 0; j < feat; ++j) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(feat);
    const T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    inv_std[r] = istd;
    for (int64_t j = 0; j < feat; ++j) {
      const T xh = (xr[j] - static_cast<T>(mean)) * istd;
      xhat[r * feat + j] = xh;
      v[r * feat + j] = gv[j] * xh + ov[j];
    }
  }
  return detail::make_op<T>({batch, feat}, std::move(v), {x, gain, offset},
                            [batch, feat, xhat = std::move(xhat),
                             inv_std = std::move(inv_std)](Node<T>& n) {
    const T* gv = n.parents[1]->value.data();
    const T* dy = n.grad.data();
    if (n.parents[0]->requires_grad) {
      auto& gx = n.parents[0]->ensure_grad();
      for (int64_t r = 0; r < batch; ++r) {
        double sum_dyh = 0, sum_dyh_xhat = 0;
        for (int64_t j = 0; j < feat; ++j) {
          const double dyh = static_cast<double>(dy[r * feat + j]) * gv[j];
          sum_dyh += dyh;
          sum_dyh_xhat += dyh * xhat[r * feat + j];
        }
        const double m1 = sum_dyh / feat, m2 = sum_dyh_xhat / feat;
        for (int64_t j = 0; j < feat; ++j) {
          const double dyh = static_cast<double>(dy[r * feat + j]) * gv[j];
          gx[r * feat + j] += static_cast<T>(inv_std[r] * (dyh - m1 - xhat[r * feat + j] * m2));
        }
      }
    }
    if (n.parents[1]->requires_grad) {
      auto& gg = n.parents[1]->ensure_grad();
      for (int64_t r = 0; r < batch; ++r)
        for (int64_t j = 0; j < feat; ++j) gg[j] += dy[r * feat + j] * xhat[r * feat + j];
    }
    if (n.parents[2]->requires_grad) {
      auto& go = n.parents[2]->ensure_grad();
      for (int64_t r = 0; r < batch; ++r)
        for (int64_t j = 0; j < feat; ++j) go[j] += dy[r * feat + j];
    }
  });
}

// Per-feature batch normalization. Train mode normalizes by batch statistics
// (population variance) and folds them into the running state with
//   running <- (1 - momentum) * running + momentum * batch_stat;
// eval mode applies the running state as a fixed affine map. The running
// tensors are plain leaves mutated in place; they never carry gradients.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& offset,
                     Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode, T momentum,
                     T eps) {
  if (x.rank() != 2 || gain.size(0) != x.size(1) || offset.size(0) != x.size(1) ||
      running_mean.size(0) != x.size(1) || running_var.size(0) != x.size(1)) {
    throw DimensionError(detail::str("batch_norm: incompatible shapes x=", shape_str(x.shape()),
                                     " gain=", shape_str(gain.shape())));
  }
  const int64_t batch = x.size(0), feat = x.size(1);
  const T* xv = x.value().data();
  const T* gv = gain.value().data();
  const T* ov = offset.value().data();
  std::vector<T> v(static_cast<size_t>(batch * feat));

  if (mode == Mode::kEval) {
    const T* rm = running_mean.value().data();
    const T* rv = running_var.value().data();
    std::vector<T> istd(static_cast<size_t>(feat));
    for (int64_t j = 0; j < feat; ++j)
      istd[j] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[j]) + eps));
    for (int64_t r = 0; r < batch; ++r)
      for (int64_t j = 0; j < feat; ++j)
        v[r * feat + j] = gv[j] * (xv[r * feat + j] - rm[j]) * istd[j] + ov[j];
    return detail::make_op<T>({batch, feat}, std::move(v), {x, gain, offset},
                              [batch, feat, istd = std::move(istd),
                               rm_node = running_mean.node()](Node<T>& n) {
      const T* gv = n.parents[1]->value.data();
      const T* xv = n.parents[0]->value.data();
      const T* rm = rm_node->value.data();
      const T* dy = n.grad.data();
      if (n.parents[0]->requires_grad) {
        auto& gx = n.parents[0]->ensure_grad();
        for (int64_t r = 0; r < batch; ++r)
          for (int64_t j = 0; j < feat; ++j)
            gx[r * feat + j] += dy[r * feat + j] * gv[j] * istd[j];
      }
      if (n.parents[1]->requires_grad) {
        auto& gg = n.parents[1]->ensure_grad();
        for (int64_t r = 0; r < batch; ++r)
          for (int64_t j = 0; j < feat; ++j)
            gg[j] += dy[r * feat + j] * (xv[r * feat + j] - rm[j]) * istd[j];
      }
      if (n.parents[2]->requires_grad) {
        auto& go = n.parents[2]->ensure_grad();
        for (int64_t r = 0; r < batch; ++r)
          for (int64_t j = 0; j < feat; ++j) go[j] += dy[r * feat + j];
      }
    });
  }

  if (batch < 2) {
    throw DimensionError(detail::str("batch_norm: train mode needs batch >= 2, got ", batch));
  }
  std::vector<T> xhat(v.size());
  std::vector<T> inv_std(static_cast<size_t>(feat));
  auto& rm = running_mean.values_mut();
  auto& rv = running_var.values_mut();
  for (int64_t j = 0; j < feat; ++j) {
    double mean = 0;
    for (int64_t r = 0; r < batch; ++r) mean += xv[r * feat + j];
    mean /= static_cast<double>(batch);
    double var = 0;
    for (int64_t r = 0; r < batch; ++r) {
      const double d = xv[r * feat + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(batch);
    const T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    inv_std[j] = istd;
    rm[j] = (T(1) - momentum) * rm[j] + momentum * static_cast<T>(mean);
    rv[j] = (T(1) - momentum) * rv[j] + momentum * static_cast<T>(var);
    for (int64_t r = 0; r < batch; ++r) {
      const T xh = (xv[r * feat + j] - static_cast<T>(mean)) * istd;
      xhat[r * feat + j] = xh;
      v[r * feat + j] = gv[j] * xh + ov[j];
    }
  }
  return detail::make_op<T>({batch, feat}, std::move(v), {x, gain, offset},
                            [batch, feat, xhat = std::move(xhat),
                             inv_std = std::move(inv_std)](Node<T>& n) {
    const T* gv = n.parents[1]->value.data();
    const T* dy = n.grad.data();
    if (n.parents[0]->requires_grad) {
      auto& gx = n.parents[0]->ensure_grad();
      for (int64_t j = 0; j < feat; ++j) {
        double sum_dyh = 0, sum_dyh_xhat = 0;
        for (int64_t r = 0; r < batch; ++r) {
          const double dyh = static_cast<double>(dy[r * feat + j]) * gv[j];
          sum_dyh += dyh;
          sum_dyh_xhat += dyh * xhat[r * feat + j];
        }
        const double m1 = sum_dyh / batch, m2 = sum_dyh_xhat / batch;
        for (int64_t r = 0; r < batch; ++r) {
          const double dyh = static_cast<double>(dy[r * feat + j]) * gv[j];
          gx[r * feat + j] += static_cast<T>(inv_std[j] * (dyh - m1 - xhat[r * feat + j] * m2));
        }
      }
    }
    if (n.parents[1]->requires_grad) {
      auto& gg = n.parents[1]->ensure_grad();
      for (int64_t r = 0; r < batch; ++r)
        for (int64_t j = 0; j < feat; ++j) gg[j] += dy[r * feat + j] * xhat[r * feat + j];
    }
    if (n.parents[2]->requires_grad) {
      auto& go = n.parents[2]->ensure_grad();
      for (int64_t r = 0; r < batch; ++r)
        for (int64_t j = 0; j < feat; ++j) go[j] += dy[r * feat + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions. Accumulation runs in double regardless of T.
// ---------------------------------------------------------------------------

enum class Reduce { kSum, kMean, kLogSumExp };

template <typename T>
Tensor<T> reduce_all(const Tensor<T>& x, Reduce kind) {
  const int64_t n = x.numel();
  if (n == 0) throw DimensionError("reduce: empty input");
  const auto& xv = x.value();
  double out;
  std::vector<T> weights;  // logsumexp backward
  switch (kind) {
    case Reduce::kSum:
    case Reduce::kMean: {
      double acc = 0;
      for (int64_t i = 0; i < n; ++i) acc += xv[i];
      out = kind == Reduce::kMean ? acc / static_cast<double>(n) : acc;
      break;
    }
    case Reduce::kLogSumExp: {
      // Max-shift keeps exp() in range for arbitrarily large inputs.
      double m = xv[0];
      for (int64_t i = 1; i < n; ++i) m = std::max(m, static_cast<double>(xv[i]));
      double acc = 0;
      weights.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) {
        const double e = std::exp(static_cast<double>(xv[i]) - m);
        weights[i] = static_cast<T>(e);
        acc += e;
      }
      out = m + std::log(acc);
      for (auto& w : weights) w = static_cast<T>(w / acc);
      break;
    }
  }
  return detail::make_op<T>(Shape{}, std::vector<T>{static_cast<T>(out)}, {x},
                            [kind, n, weights = std::move(weights)](Node<T>& n_) {
    if (!n_.parents[0]->requires_grad) return;
    auto& g = n_.parents[0]->ensure_grad();
    const T up = n_.grad[0];
    switch (kind) {
      case Reduce::kSum:
        for (auto& gi : g) gi += up;
        break;
      case Reduce::kMean:
        for (auto& gi : g) gi += up / static_cast<T>(n);
        break;
      case Reduce::kLogSumExp:
        for (size_t i = 0; i < g.size(); ++i) g[i] += up * weights[i];
        break;
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  return reduce_all(x, Reduce::kSum);
}
template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return reduce_all(x, Reduce::kMean);
}
template <typename T>
Tensor<T> logsumexp(const Tensor<T>& x) {
  return reduce_all(x, Reduce::kLogSumExp);
}

template <typename T>
Tensor<T> reduce_axis(const Tensor<T>& x, Reduce kind, int64_t axis) {
  if (axis < 0 || axis >= x.rank()) {
    throw DimensionError(detail::str("reduce: axis ", axis, " out of range for rank ",
                                     x.rank()));
  }
  const int64_t k = x.size(axis);
  if (k == 0) throw DimensionError(detail::str("reduce: empty axis ", axis));
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= x.size(i);
  for (int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.size(i);
  Shape out_shape;
  for (int64_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.size(i));
  const auto& xv = x.value();
  std::vector<T> v(static_cast<size_t>(outer * inner));
  std::vector<T> weights;
  if (kind == Reduce::kLogSumExp) weights.resize(static_cast<size_t>(x.numel()));
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      const auto at = [&](int64_t j) { return xv[(o * k + j) * inner + i]; };
      double out;
      switch (kind) {
        case Reduce::kSum:
        case Reduce::kMean: {
          double acc = 0;
          for (int64_t j = 0; j < k; ++j) acc += at(j);
          out = kind == Reduce::kMean ? acc / static_cast<double>(k) : acc;
          break;
        }
        case Reduce::kLogSumExp: {
          double m = at(0);
          for (int64_t j = 1; j < k; ++j) m = std::max(m, static_cast<double>(at(j)));
          double acc = 0;
          for (int64_t j = 0; j < k; ++j) {
            const double e = std::exp(static_cast<double>(at(j)) - m);
            weights[(o * k + j) * inner + i] = static_cast<T>(e);
            acc += e;
          }
          for (int64_t j = 0; j < k; ++j) {
            auto& w = weights[(o * k + j) * inner + i];
            w = static_cast<T>(w / acc);
          }
          out = m + std::log(acc);
          break;
        }
      }
      v[o * inner + i] = static_cast<T>(out);
    }
  }
  return detail::make_op<T>(std::move(out_shape), std::move(v), {x},
                            [kind, k, outer, inner, weights = std::move(weights)](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& g = n.parents[0]->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        const T up = n.grad[o * inner + i];
        for (int64_t j = 0; j < k; ++j) {
          const int64_t idx = (o * k + j) * inner + i;
          switch (kind) {
            case Reduce::kSum:
              g[idx] += up;
              break;
            case Reduce::kMean:
              g[idx] += up / static_cast<T>(k);
              break;
            case Reduce::kLogSumExp:
              g[idx] += up * weights[idx];
              break;
          }
        }
      }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, int64_t axis) {
  return reduce_axis(x, Reduce::kSum, axis);
}
template <typename T>
Tensor<T> mean(const Tensor<T>& x, int64_t axis) {
  return reduce_axis(x, Reduce::kMean, axis);
}
template <typename T>
Tensor<T> logsumexp(const Tensor<T>& x, int64_t axis) {
  return reduce_axis(x, Reduce::kLogSumExp, axis);
}

}  // namespace lim
