#pragma once

// Differentiable free functions over BasicTensor. Every op computes its value
// eagerly and, when recording, attaches a closure that pushes the node's
// gradient into its inputs.

#include "aunet/tensor.hpp"

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace aunet {

namespace detail {

template <typename Scalar>
Node<Scalar>& in(Node<Scalar>& self, std::size_t i) {
  return *self.inputs[i];
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  require(a == b, std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

// Splits a shape around `axis` into (outer, axis extent, inner) element counts.
struct AxisSplit {
  Index outer = 1;
  Index extent = 1;
  Index inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Batched image view: (batch, channels, height, width) of a rank-3 or rank-4 shape.
struct ImageDims {
  Index n, c, h, w;
  bool batched;
};

inline ImageDims image_dims(const Shape& s, const char* op) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + shape_string(s));
}

// Shape with the last two axes replaced.
inline Shape with_spatial(const Shape& s, Index h, Index w) {
  Shape out = s;
  out[out.size() - 2] = h;
  out[out.size() - 1] = w;
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
BasicTensor<Scalar> add(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  return BasicTensor<Scalar>::make_result(a.shape(), a.value() + b.value(), "add", {a, b},
                                          [](Node<Scalar>& self) {
                                            detail::in(self, 0).accumulate(self.grad);
                                            detail::in(self, 1).accumulate(self.grad);
                                          });
}

template <typename Scalar>
BasicTensor<Scalar> sub(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  return BasicTensor<Scalar>::make_result(a.shape(), a.value() - b.value(), "sub", {a, b},
                                          [](Node<Scalar>& self) {
                                            detail::in(self, 0).accumulate(self.grad);
                                            detail::in(self, 1).accumulate(-self.grad);
                                          });
}

template <typename Scalar>
BasicTensor<Scalar> mul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  return BasicTensor<Scalar>::make_result(a.shape(), a.value() * b.value(), "mul", {a, b},
                                          [](Node<Scalar>& self) {
                                            auto& x = detail::in(self, 0);
                                            auto& y = detail::in(self, 1);
                                            x.accumulate(self.grad * y.value);
                                            y.accumulate(self.grad * x.value);
                                          });
}

template <typename Scalar>
BasicTensor<Scalar> scale(const BasicTensor<Scalar>& a, Scalar factor) {
  return BasicTensor<Scalar>::make_result(a.shape(), a.value() * factor, "scale", {a},
                                          [factor](Node<Scalar>& self) {
                                            detail::in(self, 0).accumulate(self.grad * factor);
                                          });
}

template <typename Scalar>
BasicTensor<Scalar> relu(const BasicTensor<Scalar>& a) {
  if (detail::branch_trace().active) {
    for (Index i = 0; i < a.size(); ++i) detail::trace_branch(a.value()[i] > Scalar(0) ? 1u : 2u);
  }
  return BasicTensor<Scalar>::make_result(a.shape(), a.value().max(Scalar(0)), "relu", {a},
                                          [](Node<Scalar>& self) {
                                            auto& x = detail::in(self, 0);
                                            x.accumulate((x.value > Scalar(0)).select(self.grad, Scalar(0)));
                                          });
}

template <typename Scalar>
BasicTensor<Scalar> sigmoid(const BasicTensor<Scalar>& a) {
  typename BasicTensor<Scalar>::Array y = Scalar(1) / (Scalar(1) + (-a.value()).exp());
  return BasicTensor<Scalar>::make_result(a.shape(), y, "sigmoid", {a}, [](Node<Scalar>& self) {
    detail::in(self, 0).accumulate(self.grad * self.value * (Scalar(1) - self.value));
  });
}

template <typename Scalar>
BasicTensor<Scalar> tanh(const BasicTensor<Scalar>& a) {
  return BasicTensor<Scalar>::make_result(a.shape(), a.value().tanh(), "tanh", {a}, [](Node<Scalar>& self) {
    detail::in(self, 0).accumulate(self.grad * (Scalar(1) - self.value.square()));
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
BasicTensor<Scalar> sum(const BasicTensor<Scalar>& a) {
  typename BasicTensor<Scalar>::Array v(1);
  v[0] = a.value().sum();
  return BasicTensor<Scalar>::make_result({1}, std::move(v), "sum", {a}, [](Node<Scalar>& self) {
    auto& x = detail::in(self, 0);
    x.accumulate(Node<Scalar>::Array::Constant(x.value.size(), self.grad[0]));
  });
}

template <typename Scalar>
BasicTensor<Scalar> mean(const BasicTensor<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.size()));
}

// Mean over the last two axes: [..., H, W] -> [...].
template <typename Scalar>
BasicTensor<Scalar> spatial_mean(const BasicTensor<Scalar>& a) {
  detail::require(a.rank() >= 3, "spatial_mean: rank must be >= 3, got " + shape_string(a.shape()));
  const Index plane = a.dim(a.rank() - 2) * a.dim(a.rank() - 1);
  const Index planes = a.size() / plane;
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  typename BasicTensor<Scalar>::Array v(planes);
  for (Index p = 0; p < planes; ++p) v[p] = a.value().segment(p * plane, plane).mean();
  return BasicTensor<Scalar>::make_result(out_shape, std::move(v), "spatial_mean", {a},
                                          [plane, planes](Node<Scalar>& self) {
                                            auto& x = detail::in(self, 0);
                                            if (!x.requires_grad) return;
                                            auto& g = x.grad_buffer();
                                            const Scalar inv = Scalar(1) / static_cast<Scalar>(plane);
                                            for (Index p = 0; p < planes; ++p)
                                              g.segment(p * plane, plane) += self.grad[p] * inv;
                                          });
}

// ---------------------------------------------------------------------------
// Linear algebra

// [m,k] x [k,n] -> [m,n]
template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  using T = BasicTensor<Scalar>;
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: incompatible shapes " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  typename T::Array out(m * n);
  typename T::MatrixMap(out.data(), m, n).noalias() = a.as_matrix(m, k) * b.as_matrix(k, n);
  return T::make_result({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](Node<Scalar>& self) {
    auto& x = detail::in(self, 0);
    auto& y = detail::in(self, 1);
    typename T::ConstMatrixMap g(self.grad.data(), m, n);
    if (x.requires_grad) {
      typename T::MatrixMap(x.grad_buffer().data(), m, k).noalias() +=
          g * typename T::ConstMatrixMap(y.value.data(), k, n).transpose();
    }
    if (y.requires_grad) {
      typename T::MatrixMap(y.grad_buffer().data(), k, n).noalias() +=
          typename T::ConstMatrixMap(x.value.data(), m, k).transpose() * g;
    }
  });
}

// Fully connected layer: x [B,in], weight [out,in], bias [out] -> x·weightᵀ + bias.
template <typename Scalar>
BasicTensor<Scalar> linear(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& weight,
                           const BasicTensor<Scalar>& bias) {
  using T = BasicTensor<Scalar>;
  detail::require(x.rank() == 2 && weight.rank() == 2 && x.dim(1) == weight.dim(1),
                  "linear: input " + shape_string(x.shape()) + " does not match weight " +
                      shape_string(weight.shape()));
  detail::require(bias.rank() == 1 && bias.dim(0) == weight.dim(0),
                  "linear: bias " + shape_string(bias.shape()) + " does not match weight " +
                      shape_string(weight.shape()));
  const Index b = x.dim(0), in = x.dim(1), out = weight.dim(0);
  typename T::Array y(b * out);
  typename T::MatrixMap ym(y.data(), b, out);
  ym.noalias() = x.as_matrix(b, in) * weight.as_matrix(out, in).transpose();
  ym.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.data(), out);
  return T::make_result({b, out}, std::move(y), "linear", {x, weight, bias},
                        [b, in, out](Node<Scalar>& self) {
                          auto& xn = detail::in(self, 0);
                          auto& wn = detail::in(self, 1);
                          auto& bn = detail::in(self, 2);
                          typename T::ConstMatrixMap g(self.grad.data(), b, out);
                          if (xn.requires_grad) {
                            typename T::MatrixMap(xn.grad_buffer().data(), b, in).noalias() +=
                                g * typename T::ConstMatrixMap(wn.value.data(), out, in);
                          }
                          if (wn.requires_grad) {
                            typename T::MatrixMap(wn.grad_buffer().data(), out, in).noalias() +=
                                g.transpose() * typename T::ConstMatrixMap(xn.value.data(), b, in);
                          }
                          if (bn.requires_grad) {
                            Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bn.grad_buffer().data(), out) +=
                                g.colwise().sum();
                          }
                        });
}

// Per-channel bias for [C,H,W] or [N,C,H,W] maps.
template <typename Scalar>
BasicTensor<Scalar> add_channel_bias(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& bias) {
  const auto d = detail::image_dims(x.shape(), "add_channel_bias");
  detail::require(bias.rank() == 1 && bias.dim(0) == d.c,
                  "add_channel_bias: bias " + shape_string(bias.shape()) + " for " + std::to_string(d.c) +
                      " channels");
  const Index plane = d.h * d.w;
  typename BasicTensor<Scalar>::Array y = x.value();
  for (Index n = 0; n < d.n; ++n)
    for (Index c = 0; c < d.c; ++c) y.segment((n * d.c + c) * plane, plane) += bias[c];
  return BasicTensor<Scalar>::make_result(x.shape(), std::move(y), "add_channel_bias", {x, bias},
                                          [d, plane](Node<Scalar>& self) {
                                            detail::in(self, 0).accumulate(self.grad);
                                            auto& bn = detail::in(self, 1);
                                            if (!bn.requires_grad) return;
                                            auto& g = bn.grad_buffer();
                                            for (Index n = 0; n < d.n; ++n)
                                              for (Index c = 0; c < d.c; ++c)
                                                g[c] += self.grad.segment((n * d.c + c) * plane, plane).sum();
                                          });
}

// ---------------------------------------------------------------------------
// Structural

template <typename Scalar>
BasicTensor<Scalar> reshape(const BasicTensor<Scalar>& x, const Shape& shape) {
  detail::require(shape_size(shape) == x.size(),
                  "reshape: " + shape_string(x.shape()) + " cannot become " + shape_string(shape));
  return BasicTensor<Scalar>::make_result(shape, x.value(), "reshape", {x}, [](Node<Scalar>& self) {
    detail::in(self, 0).accumulate(self.grad);
  });
}

template <typename Scalar>
BasicTensor<Scalar> concat(std::span<const BasicTensor<Scalar>> parts, std::size_t axis) {
  detail::require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts[0].shape();
  detail::require(axis < first.size(), "concat: axis " + std::to_string(axis) + " out of range for " +
                                           shape_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<Index> extents;
  for (const auto& p : parts) {
    Shape s = p.shape();
    detail::require(s.size() == first.size(), "concat: rank mismatch");
    const Index e = s[axis];
    s[axis] = first[axis];
    detail::require(s == first, "concat: shapes " + shape_string(first) + " and " + shape_string(p.shape()) +
                                    " differ off the concat axis");
    extents.push_back(e);
    out_shape[axis] += e;
  }
  const auto split = detail::split_at(out_shape, axis);
  typename BasicTensor<Scalar>::Array y(shape_size(out_shape));
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Index block = extents[k] * split.inner;
    for (Index o = 0; o < split.outer; ++o)
      y.segment(o * split.extent * split.inner + offset, block) = parts[k].value().segment(o * block, block);
    offset += block;
  }
  std::vector<BasicTensor<Scalar>> inputs(parts.begin(), parts.end());
  return BasicTensor<Scalar>::make_result(
      out_shape, std::move(y), "concat", std::move(inputs), [extents, split](Node<Scalar>& self) {
        Index offset = 0;
        for (std::size_t k = 0; k < extents.size(); ++k) {
          const Index block = extents[k] * split.inner;
          auto& xn = detail::in(self, k);
          if (xn.requires_grad) {
            auto& g = xn.grad_buffer();
            for (Index o = 0; o < split.outer; ++o)
              g.segment(o * block, block) += self.grad.segment(o * split.extent * split.inner + offset, block);
          }
          offset += block;
        }
      });
}

template <typename Scalar>
BasicTensor<Scalar> concat(const std::vector<BasicTensor<Scalar>>& parts, std::size_t axis) {
  return concat(std::span<const BasicTensor<Scalar>>(parts), axis);
}

// Contiguous range [start, start+length) along `axis`.
template <typename Scalar>
BasicTensor<Scalar> slice(const BasicTensor<Scalar>& x, std::size_t axis, Index start, Index length) {
  detail::require(axis < x.rank(), "slice: axis out of range");
  detail::require(start >= 0 && length > 0 && start + length <= x.dim(axis),
                  "slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                      ") outside axis of extent " + std::to_string(x.dim(axis)));
  const auto split = detail::split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const Index block = length * split.inner;
  typename BasicTensor<Scalar>::Array y(split.outer * block);
  for (Index o = 0; o < split.outer; ++o)
    y.segment(o * block, block) = x.value().segment((o * split.extent + start) * split.inner, block);
  return BasicTensor<Scalar>::make_result(out_shape, std::move(y), "slice", {x},
                                          [split, start, block](Node<Scalar>& self) {
                                            auto& xn = detail::in(self, 0);
                                            if (!xn.requires_grad) return;
                                            auto& g = xn.grad_buffer();
                                            for (Index o = 0; o < split.outer; ++o)
                                              g.segment((o * split.extent + start) * split.inner, block) +=
                                                  self.grad.segment(o * block, block);
                                          });
}

// Rectangular crop of the last two axes.
template <typename Scalar>
BasicTensor<Scalar> crop2d(const BasicTensor<Scalar>& x, Index row0, Index col0, Index height, Index width) {
  detail::require(x.rank() >= 2, "crop2d: rank must be >= 2");
  const Index H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  detail::require(row0 >= 0 && col0 >= 0 && height > 0 && width > 0 && row0 + height <= H && col0 + width <= W,
                  "crop2d: window outside " + shape_string(x.shape()));
  const Index planes = x.size() / (H * W);
  typename BasicTensor<Scalar>::Array y(planes * height * width);
  for (Index p = 0; p < planes; ++p)
    for (Index r = 0; r < height; ++r)
      y.segment((p * height + r) * width, width) = x.value().segment((p * H + row0 + r) * W + col0, width);
  return BasicTensor<Scalar>::make_result(
      detail::with_spatial(x.shape(), height, width), std::move(y), "crop2d", {x},
      [=](Node<Scalar>& self) {
        auto& xn = detail::in(self, 0);
        if (!xn.requires_grad) return;
        auto& g = xn.grad_buffer();
        for (Index p = 0; p < planes; ++p)
          for (Index r = 0; r < height; ++r)
            g.segment((p * H + row0 + r) * W + col0, width) += self.grad.segment((p * height + r) * width, width);
      });
}

// Per-sample crop of an [N,C,H,W] batch: sample n is cropped at origins[n].
template <typename Scalar>
BasicTensor<Scalar> gather_windows(const BasicTensor<Scalar>& x, std::span<const std::pair<Index, Index>> origins,
                                   Index height, Index width) {
  detail::require(x.rank() == 4, "gather_windows: expected [N,C,H,W], got " + shape_string(x.shape()));
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::require(static_cast<Index>(origins.size()) == N, "gather_windows: one origin per sample required");
  for (const auto& [r, c] : origins)
    detail::require(r >= 0 && c >= 0 && r + height <= H && c + width <= W, "gather_windows: window outside grid");
  std::vector<std::pair<Index, Index>> org(origins.begin(), origins.end());
  typename BasicTensor<Scalar>::Array y(N * C * height * width);
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      for (Index r = 0; r < height; ++r)
        y.segment(((n * C + c) * height + r) * width, width) =
            x.value().segment(((n * C + c) * H + org[n].first + r) * W + org[n].second, width);
  return BasicTensor<Scalar>::make_result({N, C, height, width}, std::move(y), "gather_windows", {x},
                                          [=](Node<Scalar>& self) {
                                            auto& xn = detail::in(self, 0);
                                            if (!xn.requires_grad) return;
                                            auto& g = xn.grad_buffer();
                                            for (Index n = 0; n < N; ++n)
                                              for (Index c = 0; c < C; ++c)
                                                for (Index r = 0; r < height; ++r)
                                                  g.segment(((n * C + c) * H + org[n].first + r) * W + org[n].second,
                                                            width) +=
                                                      self.grad.segment(((n * C + c) * height + r) * width, width);
                                          });
}

// Nearest-neighbour upsampling of the last two axes by an integer factor.
template <typename Scalar>
BasicTensor<Scalar> upsample_nearest(const BasicTensor<Scalar>& x, Index factor) {
  if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1, got " + std::to_string(factor));
  detail::require(x.rank() >= 2, "upsample_nearest: rank must be >= 2");
  const Index H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  const Index Ho = H * factor, Wo = W * factor;
  const Index planes = x.size() / (H * W);
  typename BasicTensor<Scalar>::Array y(planes * Ho * Wo);
  for (Index p = 0; p < planes; ++p)
    for (Index r = 0; r < Ho; ++r)
      for (Index c = 0; c < Wo; ++c) y[(p * Ho + r) * Wo + c] = x.value()[(p * H + r / factor) * W + c / factor];
  return BasicTensor<Scalar>::make_result(detail::with_spatial(x.shape(), Ho, Wo), std::move(y), "upsample_nearest",
                                          {x}, [=](Node<Scalar>& self) {
                                            auto& xn = detail::in(self, 0);
                                            if (!xn.requires_grad) return;
                                            auto& g = xn.grad_buffer();
                                            for (Index p = 0; p < planes; ++p)
                                              for (Index r = 0; r < Ho; ++r)
                                                for (Index c = 0; c < Wo; ++c)
                                                  g[(p * H + r / factor) * W + c / factor] +=
                                                      self.grad[(p * Ho + r) * Wo + c];
                                          });
}

// Max pooling over the last two axes; ties resolve to the first maximum in
// row-major order.
template <typename Scalar>
BasicTensor<Scalar> max_pool2d(const BasicTensor<Scalar>& x, Index kernel, Index stride) {
  detail::require(kernel >= 1 && stride >= 1, "max_pool2d: kernel and stride must be >= 1");
  detail::require(x.rank() >= 2, "max_pool2d: rank must be >= 2");
  const Index H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  detail::require(kernel <= H && kernel <= W, "max_pool2d: kernel larger than input " + shape_string(x.shape()));
  const Index Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
  const Index planes = x.size() / (H * W);
  typename BasicTensor<Scalar>::Array y(planes * Ho * Wo);
  std::vector<Index> argmax(static_cast<std::size_t>(y.size()));
  const auto& v = x.value();
  for (Index p = 0; p < planes; ++p)
    for (Index r = 0; r < Ho; ++r)
      for (Index c = 0; c < Wo; ++c) {
        Index best = (p * H + r * stride) * W + c * stride;
        for (Index i = 0; i < kernel; ++i)
          for (Index j = 0; j < kernel; ++j) {
            const Index idx = (p * H + r * stride + i) * W + c * stride + j;
            if (v[idx] > v[best]) best = idx;
          }
        const Index o = (p * Ho + r) * Wo + c;
        y[o] = v[best];
        argmax[static_cast<std::size_t>(o)] = best;
        if (detail::branch_trace().active) detail::trace_branch(static_cast<std::uint64_t>(best));
      }
  return BasicTensor<Scalar>::make_result(detail::with_spatial(x.shape(), Ho, Wo), std::move(y), "max_pool2d", {x},
                                          [argmax = std::move(argmax)](Node<Scalar>& self) {
                                            auto& xn = detail::in(self, 0);
                                            if (!xn.requires_grad) return;
                                            auto& g = xn.grad_buffer();
                                            for (std::size_t o = 0; o < argmax.size(); ++o)
                                              g[argmax[o]] += self.grad[static_cast<Index>(o)];
                                          });
}

// 2-D convolution (cross-correlation) via im2col.
// input [C,H,W] or [N,C,H,W]; filters [O,C,kH,kW].
template <typename Scalar>
BasicTensor<Scalar> conv2d(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& filters, Index stride = 1,
                           Index padding = 0) {
  using T = BasicTensor<Scalar>;
  using Mat = typename T::RowMatrix;
  const auto d = detail::image_dims(input.shape(), "conv2d");
  detail::require(filters.rank() == 4, "conv2d: filters must be [O,C,kH,kW], got " + shape_string(filters.shape()));
  const Index O = filters.dim(0), kh = filters.dim(2), kw = filters.dim(3);
  detail::require(filters.dim(1) == d.c, "conv2d: input has " + std::to_string(d.c) + " channels but filters expect " +
                                             std::to_string(filters.dim(1)));
  detail::require(stride >= 1, "conv2d: stride must be >= 1");
  detail::require(padding >= 0, "conv2d: padding must be >= 0");
  detail::require(kh <= d.h + 2 * padding && kw <= d.w + 2 * padding,
                  "conv2d: kernel does not fit the padded input " + shape_string(input.shape()));
  const Index Ho = (d.h + 2 * padding - kh) / stride + 1;
  const Index Wo = (d.w + 2 * padding - kw) / stride + 1;
  const Index P = Ho * Wo;
  const Index K = d.c * kh * kw;

  // cols[k, n*P + p] = padded input value under kernel tap k at output p of sample n.
  auto cols = std::make_shared<Mat>(Mat::Zero(K, d.n * P));
  const auto& xv = input.value();
  for (Index n = 0; n < d.n; ++n)
    for (Index c = 0; c < d.c; ++c)
      for (Index i = 0; i < kh; ++i)
        for (Index j = 0; j < kw; ++j) {
          const Index k = (c * kh + i) * kw + j;
          for (Index r = 0; r < Ho; ++r) {
            const Index y = r * stride + i - padding;
            if (y < 0 || y >= d.h) continue;
            for (Index q = 0; q < Wo; ++q) {
              const Index x = q * stride + j - padding;
              if (x < 0 || x >= d.w) continue;
              (*cols)(k, n * P + r * Wo + q) = xv[((n * d.c + c) * d.h + y) * d.w + x];
            }
          }
        }

  Mat prod = filters.as_matrix(O, K) * (*cols);  // [O, N*P]
  typename T::Array out(d.n * O * P);
  for (Index n = 0; n < d.n; ++n)
    for (Index o = 0; o < O; ++o)
      Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(out.data() + (n * O + o) * P, P) = prod.block(o, n * P, 1, P);

  Shape out_shape = d.batched ? Shape{d.n, O, Ho, Wo} : Shape{O, Ho, Wo};
  return T::make_result(out_shape, std::move(out), "conv2d", {input, filters},
                        [=](Node<Scalar>& self) {
                          auto& xn = detail::in(self, 0);
                          auto& fn = detail::in(self, 1);
                          Mat g(O, d.n * P);
                          for (Index n = 0; n < d.n; ++n)
                            for (Index o = 0; o < O; ++o)
                              g.block(o, n * P, 1, P) =
                                  Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(
                                      self.grad.data() + (n * O + o) * P, P);
                          if (fn.requires_grad) {
                            typename T::MatrixMap(fn.grad_buffer().data(), O, K).noalias() += g * cols->transpose();
                          }
                          if (!xn.requires_grad) return;
                          Mat dcols = typename T::ConstMatrixMap(fn.value.data(), O, K).transpose() * g;
                          auto& gx = xn.grad_buffer();
                          for (Index n = 0; n < d.n; ++n)
                            for (Index c = 0; c < d.c; ++c)
                              for (Index i = 0; i < kh; ++i)
                                for (Index j = 0; j < kw; ++j) {
                                  const Index k = (c * kh + i) * kw + j;
                                  for (Index r = 0; r < Ho; ++r) {
                                    const Index y = r * stride + i - padding;
                                    if (y < 0 || y >= d.h) continue;
                                    for (Index q = 0; q < Wo; ++q) {
                                      const Index x = q * stride + j - padding;
                                      if (x < 0 || x >= d.w) continue;
                                      gx[((n * d.c + c) * d.h + y) * d.w + x] += dcols(k, n * P + r * Wo + q);
                                    }
                                  }
                                }
                        });
}

}  // namespace aunet
