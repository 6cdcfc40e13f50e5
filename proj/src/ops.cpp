#include "apaseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace apaseg {
namespace {

using Acc = double;

// ---------------------------------------------------------------------------
// Convolution core on raw buffers. All 2D/3D (transpose) convolutions reduce
// to these three loops over an (N, C, H, W, D) layout.

struct ConvDims {
  Index batch = 1;
  Index in_channels = 1;
  Index out_channels = 1;
  Index groups = 1;
  Triple in{1, 1, 1};
  Triple out{1, 1, 1};
  Triple kernel{1, 1, 1};
  Triple stride{1, 1, 1};
  Triple pad{0, 0, 0};

  Index in_volume() const { return in[0] * in[1] * in[2]; }
  Index out_volume() const { return out[0] * out[1] * out[2]; }
  Index kernel_volume() const { return kernel[0] * kernel[1] * kernel[2]; }
};

struct Range {
  Index lo = 0;
  Index hi = -1;  // inclusive
};

Index floor_div(Index a, Index b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
Index ceil_div(Index a, Index b) { return -floor_div(-a, b); }

// Output positions o with 0 <= o*stride - pad + k <= in-1.
Range valid_range(Index in, Index out, Index k, Index stride, Index pad) {
  Range r;
  r.lo = std::max<Index>(0, ceil_div(pad - k, stride));
  r.hi = std::min<Index>(out - 1, floor_div(in - 1 + pad - k, stride));
  return r;
}

// Visits every (output row, input row, weight) triple for one channel pair.
template <typename F>
void for_each_tap(const ConvDims& d, F&& body) {
  for (Index kh = 0; kh < d.kernel[0]; ++kh) {
    const Range rh = valid_range(d.in[0], d.out[0], kh, d.stride[0], d.pad[0]);
    for (Index kw = 0; kw < d.kernel[1]; ++kw) {
      const Range rw = valid_range(d.in[1], d.out[1], kw, d.stride[1], d.pad[1]);
      for (Index kd = 0; kd < d.kernel[2]; ++kd) {
        const Range rd = valid_range(d.in[2], d.out[2], kd, d.stride[2], d.pad[2]);
        if (rd.lo > rd.hi) continue;
        const Index widx = (kh * d.kernel[1] + kw) * d.kernel[2] + kd;
        for (Index oh = rh.lo; oh <= rh.hi; ++oh) {
          const Index ih = oh * d.stride[0] - d.pad[0] + kh;
          for (Index ow = rw.lo; ow <= rw.hi; ++ow) {
            const Index iw = ow * d.stride[1] - d.pad[1] + kw;
            const Index out_row = (oh * d.out[1] + ow) * d.out[2];
            // input offset of output column od is in_row + od * stride_d
            const Index in_row = (ih * d.in[1] + iw) * d.in[2] - d.pad[2] + kd;
            body(widx, out_row, in_row, rd);
          }
        }
      }
    }
  }
}

template <typename T, typename F>
void for_each_channel_pair(const ConvDims& d, F&& body) {
  const Index cig = d.in_channels / d.groups;
  const Index cog = d.out_channels / d.groups;
  for (Index n = 0; n < d.batch; ++n) {
    for (Index g = 0; g < d.groups; ++g) {
      for (Index col = 0; col < cog; ++col) {
        const Index co = g * cog + col;
        for (Index cil = 0; cil < cig; ++cil) {
          const Index ci = g * cig + cil;
          body((n * d.out_channels + co) * d.out_volume(), (n * d.in_channels + ci) * d.in_volume(),
               (co * cig + cil) * d.kernel_volume());
        }
      }
    }
  }
}

template <typename T>
void conv_forward(const T* x, const T* w, T* y, const ConvDims& d) {
  const Index sd = d.stride[2];
  for_each_channel_pair<T>(d, [&](Index yoff, Index xoff, Index woff) {
    T* yc = y + yoff;
    const T* xc = x + xoff;
    const T* wk = w + woff;
    for_each_tap(d, [&](Index widx, Index out_row, Index in_row, Range rd) {
      const T wv = wk[widx];
      T* yr = yc + out_row;
      const T* xr = xc + in_row;
      if (sd == 1) {
        for (Index od = rd.lo; od <= rd.hi; ++od) yr[od] += wv * xr[od];
      } else {
        for (Index od = rd.lo; od <= rd.hi; ++od) yr[od] += wv * xr[od * sd];
      }
    });
  });
}

template <typename T>
void conv_backward_input(const T* gy, const T* w, T* gx, const ConvDims& d) {
  const Index sd = d.stride[2];
  for_each_channel_pair<T>(d, [&](Index yoff, Index xoff, Index woff) {
    const T* gyc = gy + yoff;
    T* gxc = gx + xoff;
    const T* wk = w + woff;
    for_each_tap(d, [&](Index widx, Index out_row, Index in_row, Range rd) {
      const T wv = wk[widx];
      const T* gr = gyc + out_row;
      T* xr = gxc + in_row;
      if (sd == 1) {
        for (Index od = rd.lo; od <= rd.hi; ++od) xr[od] += wv * gr[od];
      } else {
        for (Index od = rd.lo; od <= rd.hi; ++od) xr[od * sd] += wv * gr[od];
      }
    });
  });
}

template <typename T>
void conv_backward_weight(const T* x, const T* gy, T* gw, const ConvDims& d) {
  const Index sd = d.stride[2];
  for_each_channel_pair<T>(d, [&](Index yoff, Index xoff, Index woff) {
    const T* gyc = gy + yoff;
    const T* xc = x + xoff;
    T* gk = gw + woff;
    for_each_tap(d, [&](Index widx, Index out_row, Index in_row, Range rd) {
      const T* gr = gyc + out_row;
      const T* xr = xc + in_row;
      T acc{0};
      if (sd == 1) {
        for (Index od = rd.lo; od <= rd.hi; ++od) acc += gr[od] * xr[od];
      } else {
        for (Index od = rd.lo; od <= rd.hi; ++od) acc += gr[od] * xr[od * sd];
      }
      gk[widx] += acc;
    });
  });
}

template <typename T>
void add_bias(T* y, const T* b, Index batch, Index channels, Index volume) {
  for (Index n = 0; n < batch; ++n) {
    for (Index c = 0; c < channels; ++c) {
      T* yc = y + (n * channels + c) * volume;
      const T bv = b[c];
      for (Index i = 0; i < volume; ++i) yc[i] += bv;
    }
  }
}

template <typename T>
void bias_grad(const T* gy, T* gb, Index batch, Index channels, Index volume) {
  for (Index n = 0; n < batch; ++n) {
    for (Index c = 0; c < channels; ++c) {
      const T* gc = gy + (n * channels + c) * volume;
      Acc acc = 0;
      for (Index i = 0; i < volume; ++i) acc += gc[i];
      gb[c] += static_cast<T>(acc);
    }
  }
}

void check_conv_common(const Shape& xs, const Shape& ws, const Conv3dOptions& opt,
                       const char* what) {
  require_rank(xs, 5, what);
  require_rank(ws, 5, what);
  if (opt.groups < 1) throw ContractError(std::string(what) + ": groups must be >= 1");
  for (int i = 0; i < 3; ++i) {
    if (opt.stride[i] < 1 || opt.padding[i] < 0 || opt.output_padding[i] < 0) {
      throw ContractError(std::string(what) + ": stride must be >= 1 and padding >= 0");
    }
  }
}

template <typename T>
void check_bias(const Var<T>& bias, Index channels, const char* what) {
  if (!bias.defined()) return;
  if (bias.shape() != Shape{channels}) {
    throw ContractError(std::string(what) + ": bias shape " + shape_str(bias.shape()) +
                        " does not match " + std::to_string(channels) + " output channels");
  }
}

// Strides of a rank-5 padded view; broadcast dims get stride 0.
std::array<Index, 5> padded5(const Shape& s) {
  std::array<Index, 5> out{1, 1, 1, 1, 1};
  const std::size_t off = 5 - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) out[off + i] = s[i];
  return out;
}

std::array<Index, 5> broadcast_strides(const std::array<Index, 5>& full,
                                       const std::array<Index, 5>& small) {
  std::array<Index, 5> st{};
  Index acc = 1;
  for (int i = 4; i >= 0; --i) {
    st[i] = (small[i] == 1 && full[i] != 1) ? 0 : acc;
    acc *= small[i];
  }
  return st;
}

void check_broadcastable(const Shape& full, const Shape& small, const char* what) {
  if (full.size() != small.size()) {
    throw ContractError(std::string(what) + ": rank mismatch " + shape_str(full) + " vs " +
                        shape_str(small));
  }
  for (std::size_t i = 0; i < full.size(); ++i) {
    if (small[i] != full[i] && small[i] != 1) {
      throw ContractError(std::string(what) + ": cannot broadcast " + shape_str(small) + " to " +
                          shape_str(full));
    }
  }
}

// Calls body(full_index, small_index) for every element of the full shape.
template <typename F>
void for_each_broadcast(const Shape& full, const Shape& small, F&& body) {
  const auto f = padded5(full);
  const auto st = broadcast_strides(f, padded5(small));
  Index i = 0;
  for (Index a = 0; a < f[0]; ++a)
    for (Index b = 0; b < f[1]; ++b)
      for (Index c = 0; c < f[2]; ++c)
        for (Index d = 0; d < f[3]; ++d) {
          const Index base = a * st[0] + b * st[1] + c * st[2] + d * st[3];
          for (Index e = 0; e < f[4]; ++e) body(i++, base + e * st[4]);
        }
}

// (outer, extent, inner) decomposition around one tensor dim.
struct AxisView {
  Index outer = 1;
  Index extent = 1;
  Index inner = 1;
};

AxisView axis_view(const Shape& s, int dim) {
  AxisView v;
  for (int i = 0; i < dim; ++i) v.outer *= s[i];
  v.extent = s[dim];
  for (std::size_t i = dim + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> out(logits.size());
  if (logits.empty()) return out;
  const T mx = *std::max_element(logits.begin(), logits.end());
  T sum{0};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

namespace ops {

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              const Conv3dOptions& opt) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  check_conv_common(xs, ws, opt, "conv3d");
  ConvDims d;
  d.batch = xs[0];
  d.in_channels = xs[1];
  d.out_channels = ws[0];
  d.groups = opt.groups;
  if (d.in_channels % d.groups != 0 || d.out_channels % d.groups != 0) {
    throw ContractError("conv3d: channels " + std::to_string(d.in_channels) + "->" +
                        std::to_string(d.out_channels) + " not divisible by groups " +
                        std::to_string(d.groups));
  }
  if (ws[1] != d.in_channels / d.groups) {
    throw ContractError("conv3d: weight " + shape_str(ws) + " does not match input channels of " +
                        shape_str(xs));
  }
  for (int i = 0; i < 3; ++i) {
    d.in[i] = xs[2 + i];
    d.kernel[i] = ws[2 + i];
    d.stride[i] = opt.stride[i];
    d.pad[i] = opt.padding[i];
    const Index span = d.in[i] + 2 * d.pad[i] - d.kernel[i];
    if (span < 0) throw ContractError("conv3d: kernel larger than padded input");
    d.out[i] = span / d.stride[i] + 1;
  }
  check_bias(bias, d.out_channels, "conv3d");

  Tensor<T> y({d.batch, d.out_channels, d.out[0], d.out[1], d.out[2]}, T{0});
  if (bias.defined()) add_bias(y.ptr(), bias.value().ptr(), d.batch, d.out_channels, d.out_volume());
  conv_forward(x.value().ptr(), weight.value().ptr(), y.ptr(), d);

  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(y), std::move(inputs), [d](Node<T>& self) {
    const T* gy = self.grad.ptr();
    auto& xn = *self.inputs[0];
    auto& wn = *self.inputs[1];
    if (xn.requires_grad) conv_backward_input(gy, wn.value.ptr(), xn.grad_buffer().ptr(), d);
    if (wn.requires_grad) conv_backward_weight(xn.value.ptr(), gy, wn.grad_buffer().ptr(), d);
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      bias_grad(gy, self.inputs[2]->grad_buffer().ptr(), d.batch, d.out_channels, d.out_volume());
    }
  });
}

// A transpose convolution is the input-gradient of the convolution that maps
// its output back onto its input; the weight layout is shared.
template <typename T>
Var<T> transpose_conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                        const Conv3dOptions& opt) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  check_conv_common(xs, ws, opt, "transpose_conv3d");
  ConvDims d;  // dims of the forward conv: output of the transpose is its input
  d.batch = xs[0];
  d.out_channels = xs[1];
  d.groups = opt.groups;
  if (ws[0] != d.out_channels) {
    throw ContractError("transpose_conv3d: weight " + shape_str(ws) +
                        " does not match input channels of " + shape_str(xs));
  }
  if (d.out_channels % d.groups != 0) {
    throw ContractError("transpose_conv3d: input channels not divisible by groups");
  }
  d.in_channels = ws[1] * d.groups;
  for (int i = 0; i < 3; ++i) {
    if (opt.output_padding[i] >= opt.stride[i]) {
      throw ContractError("transpose_conv3d: output_padding " +
                          std::to_string(opt.output_padding[i]) + " must be smaller than stride " +
                          std::to_string(opt.stride[i]));
    }
    d.out[i] = xs[2 + i];
    d.kernel[i] = ws[2 + i];
    d.stride[i] = opt.stride[i];
    d.pad[i] = opt.padding[i];
    d.in[i] = (d.out[i] - 1) * d.stride[i] - 2 * d.pad[i] + d.kernel[i] + opt.output_padding[i];
    if (d.in[i] < 1) throw ContractError("transpose_conv3d: non-positive output extent");
  }
  check_bias(bias, d.in_channels, "transpose_conv3d");

  Tensor<T> y({d.batch, d.in_channels, d.in[0], d.in[1], d.in[2]}, T{0});
  if (bias.defined()) add_bias(y.ptr(), bias.value().ptr(), d.batch, d.in_channels, d.in_volume());
  conv_backward_input(x.value().ptr(), weight.value().ptr(), y.ptr(), d);

  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(y), std::move(inputs), [d](Node<T>& self) {
    const T* gy = self.grad.ptr();
    auto& xn = *self.inputs[0];
    auto& wn = *self.inputs[1];
    if (xn.requires_grad) conv_forward(gy, wn.value.ptr(), xn.grad_buffer().ptr(), d);
    if (wn.requires_grad) conv_backward_weight(gy, xn.value.ptr(), wn.grad_buffer().ptr(), d);
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      bias_grad(gy, self.inputs[2]->grad_buffer().ptr(), d.batch, d.in_channels, d.in_volume());
    }
  });
}

namespace {
Conv3dOptions lift(const Conv2dOptions& o) {
  Conv3dOptions r;
  r.stride = {o.stride[0], o.stride[1], 1};
  r.padding = {o.padding[0], o.padding[1], 0};
  r.output_padding = {o.output_padding[0], o.output_padding[1], 0};
  r.groups = o.groups;
  return r;
}

Shape append_unit(const Shape& s) {
  Shape r = s;
  r.push_back(1);
  return r;
}
}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              const Conv2dOptions& opt) {
  require_rank(x.shape(), 4, "conv2d");
  require_rank(weight.shape(), 4, "conv2d");
  auto y = conv3d(reshape(x, append_unit(x.shape())), reshape(weight, append_unit(weight.shape())),
                  bias, lift(opt));
  const Shape& s = y.shape();
  return reshape(y, Shape{s[0], s[1], s[2], s[3]});
}

template <typename T>
Var<T> transpose_conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                        const Conv2dOptions& opt) {
  require_rank(x.shape(), 4, "transpose_conv2d");
  require_rank(weight.shape(), 4, "transpose_conv2d");
  auto y = transpose_conv3d(reshape(x, append_unit(x.shape())),
                            reshape(weight, append_unit(weight.shape())), bias, lift(opt));
  const Shape& s = y.shape();
  return reshape(y, Shape{s[0], s[1], s[2], s[3]});
}

template <typename T>
Var<T> axis_pool_keepdim(const Var<T>& x, SpatialAxis axis, PoolMode mode) {
  require_rank(x.shape(), 5, "axis_pool");
  const int dim = tensor_dim(axis);
  const AxisView v = axis_view(x.shape(), dim);
  Shape out_shape = x.shape();
  out_shape[dim] = 1;
  Tensor<T> y(out_shape, T{0});
  const T* xp = x.value().ptr();
  T* yp = y.ptr();

  if (mode == PoolMode::Mean) {
    const T inv = T{1} / static_cast<T>(v.extent);
    for (Index o = 0; o < v.outer; ++o) {
      for (Index k = 0; k < v.extent; ++k) {
        const T* xr = xp + (o * v.extent + k) * v.inner;
        T* yr = yp + o * v.inner;
        for (Index i = 0; i < v.inner; ++i) yr[i] += xr[i];
      }
      T* yr = yp + o * v.inner;
      for (Index i = 0; i < v.inner; ++i) yr[i] *= inv;
    }
    return make_result<T>(std::move(y), {x}, [v, inv](Node<T>& self) {
      T* gx = self.inputs[0]->grad_buffer().ptr();
      const T* gy = self.grad.ptr();
      for (Index o = 0; o < v.outer; ++o)
        for (Index k = 0; k < v.extent; ++k) {
          T* gr = gx + (o * v.extent + k) * v.inner;
          const T* g = gy + o * v.inner;
          for (Index i = 0; i < v.inner; ++i) gr[i] += g[i] * inv;
        }
    });
  }

  // Max: the first maximal element in scan order receives the gradient.
  std::vector<Index> arg(static_cast<std::size_t>(v.outer * v.inner), 0);
  for (Index o = 0; o < v.outer; ++o) {
    for (Index i = 0; i < v.inner; ++i) {
      const T* xr = xp + o * v.extent * v.inner + i;
      Index best = 0;
      T bv = xr[0];
      for (Index k = 1; k < v.extent; ++k) {
        if (xr[k * v.inner] > bv) {
          bv = xr[k * v.inner];
          best = k;
        }
      }
      yp[o * v.inner + i] = bv;
      arg[o * v.inner + i] = best;
    }
  }
  return make_result<T>(std::move(y), {x}, [v, arg = std::move(arg)](Node<T>& self) {
    T* gx = self.inputs[0]->grad_buffer().ptr();
    const T* gy = self.grad.ptr();
    for (Index o = 0; o < v.outer; ++o)
      for (Index i = 0; i < v.inner; ++i) {
        const Index j = o * v.inner + i;
        gx[(o * v.extent + arg[j]) * v.inner + i] += gy[j];
      }
  });
}

template <typename T>
Var<T> axis_pool(const Var<T>& x, SpatialAxis axis, PoolMode mode) {
  auto y = axis_pool_keepdim(x, axis, mode);
  Shape s = y.shape();
  s.erase(s.begin() + tensor_dim(axis));
  return reshape(y, s);
}

template <typename T>
Var<T> avg_pool3d(const Var<T>& x) {
  require_rank(x.shape(), 5, "avg_pool3d");
  const Shape& s = x.shape();
  for (int i = 2; i < 5; ++i) {
    if (s[i] % 2 != 0) {
      throw ContractError("avg_pool3d: spatial extents must be even, got " + shape_str(s));
    }
  }
  const Index nc = s[0] * s[1];
  const Index H = s[2], W = s[3], D = s[4];
  const Index h2 = H / 2, w2 = W / 2, d2 = D / 2;
  Tensor<T> y({s[0], s[1], h2, w2, d2}, T{0});
  const T* xp = x.value().ptr();
  T* yp = y.ptr();
  const T eighth = T{1} / T{8};
  for (Index c = 0; c < nc; ++c) {
    const T* xc = xp + c * H * W * D;
    T* yc = yp + c * h2 * w2 * d2;
    for (Index h = 0; h < H; ++h)
      for (Index w = 0; w < W; ++w) {
        const T* xr = xc + (h * W + w) * D;
        T* yr = yc + ((h / 2) * w2 + w / 2) * d2;
        for (Index d = 0; d < D; ++d) yr[d / 2] += xr[d];
      }
    for (Index i = 0; i < h2 * w2 * d2; ++i) yc[i] *= eighth;
  }
  return make_result<T>(std::move(y), {x}, [=](Node<T>& self) {
    T* gx = self.inputs[0]->grad_buffer().ptr();
    const T* gy = self.grad.ptr();
    for (Index c = 0; c < nc; ++c) {
      T* xc = gx + c * H * W * D;
      const T* yc = gy + c * h2 * w2 * d2;
      for (Index h = 0; h < H; ++h)
        for (Index w = 0; w < W; ++w) {
          T* xr = xc + (h * W + w) * D;
          const T* yr = yc + ((h / 2) * w2 + w / 2) * d2;
          for (Index d = 0; d < D; ++d) xr[d] += yr[d / 2] * eighth;
        }
    }
  });
}

template <typename T>
Var<T> spatial_mean(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() < 3) throw ContractError("spatial_mean: rank must be >= 3");
  const Index nc = s[0] * s[1];
  const Index vol = x.value().numel() / nc;
  Shape out = s;
  for (std::size_t i = 2; i < out.size(); ++i) out[i] = 1;
  Tensor<T> y(out, T{0});
  const T* xp = x.value().ptr();
  for (Index c = 0; c < nc; ++c) {
    Acc acc = 0;
    for (Index i = 0; i < vol; ++i) acc += xp[c * vol + i];
    y[c] = static_cast<T>(acc / static_cast<Acc>(vol));
  }
  return make_result<T>(std::move(y), {x}, [nc, vol](Node<T>& self) {
    T* gx = self.inputs[0]->grad_buffer().ptr();
    for (Index c = 0; c < nc; ++c) {
      const T g = self.grad[c] / static_cast<T>(vol);
      for (Index i = 0; i < vol; ++i) gx[c * vol + i] += g;
    }
  });
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, double eps) {
  const Shape& s = x.shape();
  if (s.size() < 3) throw ContractError("instance_norm: rank must be >= 3");
  const Index nc = s[0] * s[1];
  const Index vol = x.value().numel() / nc;
  Tensor<T> y(s, T{0});
  const T* xp = x.value().ptr();
  // Single-element slices have no statistics; they pass through unchanged.
  if (vol < 2) {
    std::copy(xp, xp + x.value().numel(), y.ptr());
    return make_result<T>(std::move(y), {x}, [](Node<T>& self) {
      T* gx = self.inputs[0]->grad_buffer().ptr();
      for (Index i = 0; i < self.grad.numel(); ++i) gx[i] += self.grad[i];
    });
  }
  std::vector<T> inv_std(static_cast<std::size_t>(nc));
  for (Index c = 0; c < nc; ++c) {
    const T* xc = xp + c * vol;
    Acc mean = 0;
    for (Index i = 0; i < vol; ++i) mean += xc[i];
    mean /= static_cast<Acc>(vol);
    Acc var = 0;
    for (Index i = 0; i < vol; ++i) {
      const Acc dv = xc[i] - mean;
      var += dv * dv;
    }
    var /= static_cast<Acc>(vol);
    const Acc is = 1.0 / std::sqrt(var + eps);
    inv_std[c] = static_cast<T>(is);
    T* yc = y.ptr() + c * vol;
    for (Index i = 0; i < vol; ++i) yc[i] = static_cast<T>((xc[i] - mean) * is);
  }
  // The output itself is the normalized input used by the backward pass.
  return make_result<T>(std::move(y), {x},
                        [nc, vol, inv_std = std::move(inv_std)](Node<T>& self) {
                          T* gx = self.inputs[0]->grad_buffer().ptr();
                          const T* gy = self.grad.ptr();
                          for (Index c = 0; c < nc; ++c) {
                            const T* g = gy + c * vol;
                            const T* xh = self.value.ptr() + c * vol;
                            Acc mg = 0, mgx = 0;
                            for (Index i = 0; i < vol; ++i) {
                              mg += g[i];
                              mgx += static_cast<Acc>(g[i]) * xh[i];
                            }
                            mg /= static_cast<Acc>(vol);
                            mgx /= static_cast<Acc>(vol);
                            const Acc is = inv_std[c];
                            T* out = gx + c * vol;
                            for (Index i = 0; i < vol; ++i) {
                              out[i] += static_cast<T>(is * (g[i] - mg - xh[i] * mgx));
                            }
                          }
                        });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> y = x.value();
  for (auto& v : y.data()) v = v > T{0} ? v : T{0};
  return make_result<T>(std::move(y), {x}, [](Node<T>& self) {
    T* gx = self.inputs[0]->grad_buffer().ptr();
    const T* yv = self.value.ptr();
    for (Index i = 0; i < self.grad.numel(); ++i) {
      if (yv[i] > T{0}) gx[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> norm_act(const Var<T>& x) {
  return relu(instance_norm(x));
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y = a.value();
  const T* bp = b.value().ptr();
  for (Index i = 0; i < y.numel(); ++i) y[i] += bp[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      T* g = in->grad_buffer().ptr();
      for (Index i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T alpha) {
  Tensor<T> y = x.value();
  for (auto& v : y.data()) v *= alpha;
  return make_result<T>(std::move(y), {x}, [alpha](Node<T>& self) {
    T* g = self.inputs[0]->grad_buffer().ptr();
    for (Index i = 0; i < self.grad.numel(); ++i) g[i] += alpha * self.grad[i];
  });
}

template <typename T>
Var<T> mul_broadcast(const Var<T>& a, const Var<T>& b) {
  check_broadcastable(a.shape(), b.shape(), "mul_broadcast");
  Tensor<T> y(a.shape(), T{0});
  const T* ap = a.value().ptr();
  const T* bp = b.value().ptr();
  T* yp = y.ptr();
  for_each_broadcast(a.shape(), b.shape(), [&](Index i, Index j) { yp[i] = ap[i] * bp[j]; });
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    const T* g = self.grad.ptr();
    if (an.requires_grad) {
      T* ga = an.grad_buffer().ptr();
      const T* bp = bn.value.ptr();
      for_each_broadcast(an.value.shape(), bn.value.shape(),
                         [&](Index i, Index j) { ga[i] += g[i] * bp[j]; });
    }
    if (bn.requires_grad) {
      T* gb = bn.grad_buffer().ptr();
      const T* ap = an.value.ptr();
      for_each_broadcast(an.value.shape(), bn.value.shape(),
                         [&](Index i, Index j) { gb[j] += g[i] * ap[i]; });
    }
  });
}

template <typename T>
Var<T> broadcast_to(const Var<T>& x, const Shape& shape) {
  check_broadcastable(shape, x.shape(), "broadcast_to");
  Tensor<T> y(shape, T{0});
  const T* xp = x.value().ptr();
  T* yp = y.ptr();
  for_each_broadcast(shape, x.shape(), [&](Index i, Index j) { yp[i] = xp[j]; });
  return make_result<T>(std::move(y), {x}, [](Node<T>& self) {
    auto& xn = *self.inputs[0];
    T* gx = xn.grad_buffer().ptr();
    const T* g = self.grad.ptr();
    for_each_broadcast(self.value.shape(), xn.value.shape(),
                       [&](Index i, Index j) { gx[j] += g[i]; });
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || as.size() != bs.size() || as[0] != bs[0] ||
      !std::equal(as.begin() + 2, as.end(), bs.begin() + 2)) {
    throw ContractError("concat_channels: incompatible shapes " + shape_str(as) + " and " +
                        shape_str(bs));
  }
  const Index n = as[0];
  const Index ca = as[1], cb = bs[1];
  const Index vol = a.value().numel() / (n * ca);
  Shape out = as;
  out[1] = ca + cb;
  Tensor<T> y(out, T{0});
  for (Index i = 0; i < n; ++i) {
    std::copy_n(a.value().ptr() + i * ca * vol, ca * vol, y.ptr() + i * (ca + cb) * vol);
    std::copy_n(b.value().ptr() + i * cb * vol, cb * vol, y.ptr() + (i * (ca + cb) + ca) * vol);
  }
  return make_result<T>(std::move(y), {a, b}, [=](Node<T>& self) {
    const T* g = self.grad.ptr();
    for (int k = 0; k < 2; ++k) {
      auto& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      const Index c = k == 0 ? ca : cb;
      const Index off = k == 0 ? 0 : ca;
      T* gi = in.grad_buffer().ptr();
      for (Index i = 0; i < n; ++i) {
        const T* src = g + (i * (ca + cb) + off) * vol;
        T* dst = gi + i * c * vol;
        for (Index j = 0; j < c * vol; ++j) dst[j] += src[j];
      }
    }
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, Index begin, Index count) {
  const Shape& s = x.shape();
  if (s.size() < 2 || begin < 0 || count < 1 || begin + count > s[1]) {
    throw ContractError("slice_channels: range [" + std::to_string(begin) + ", " +
                        std::to_string(begin + count) + ") outside " + shape_str(s));
  }
  const Index n = s[0], c = s[1];
  const Index vol = x.value().numel() / (n * c);
  Shape out = s;
  out[1] = count;
  Tensor<T> y(out, T{0});
  for (Index i = 0; i < n; ++i) {
    std::copy_n(x.value().ptr() + (i * c + begin) * vol, count * vol, y.ptr() + i * count * vol);
  }
  return make_result<T>(std::move(y), {x}, [=](Node<T>& self) {
    T* gx = self.inputs[0]->grad_buffer().ptr();
    const T* g = self.grad.ptr();
    for (Index i = 0; i < n; ++i) {
      T* dst = gx + (i * c + begin) * vol;
      const T* src = g + i * count * vol;
      for (Index j = 0; j < count * vol; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> y = x.value().reshaped(std::move(shape));
  return make_result<T>(std::move(y), {x}, [](Node<T>& self) {
    T* gx = self.inputs[0]->grad_buffer().ptr();
    for (Index i = 0; i < self.grad.numel(); ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Var<T> softmax_channels(const Var<T>& x, Index groups) {
  const Shape& s = x.shape();
  if (s.size() < 2 || groups < 1 || s[1] % groups != 0) {
    throw ContractError("softmax_channels: channels of " + shape_str(s) +
                        " not divisible into " + std::to_string(groups) + " groups");
  }
  const Index n = s[0];
  const Index m = s[1] / groups;
  const Index vol = x.value().numel() / (n * s[1]);
  Tensor<T> y(s, T{0});
  const T* xp = x.value().ptr();
  T* yp = y.ptr();
  for (Index i = 0; i < n; ++i)
    for (Index c = 0; c < m; ++c)
      for (Index v = 0; v < vol; ++v) {
        auto at = [&](Index j) { return ((i * s[1]) + j * m + c) * vol + v; };
        T mx = xp[at(0)];
        for (Index j = 1; j < groups; ++j) mx = std::max(mx, xp[at(j)]);
        T sum{0};
        for (Index j = 0; j < groups; ++j) {
          yp[at(j)] = std::exp(xp[at(j)] - mx);
          sum += yp[at(j)];
        }
        for (Index j = 0; j < groups; ++j) yp[at(j)] /= sum;
      }
  const Index channels = s[1];
  return make_result<T>(std::move(y), {x}, [=](Node<T>& self) {
    T* gx = self.inputs[0]->grad_buffer().ptr();
    const T* g = self.grad.ptr();
    const T* yv = self.value.ptr();
    for (Index i = 0; i < n; ++i)
      for (Index c = 0; c < m; ++c)
        for (Index v = 0; v < vol; ++v) {
          auto at = [&](Index j) { return ((i * channels) + j * m + c) * vol + v; };
          T dotp{0};
          for (Index j = 0; j < groups; ++j) dotp += g[at(j)] * yv[at(j)];
          for (Index j = 0; j < groups; ++j) gx[at(j)] += yv[at(j)] * (g[at(j)] - dotp);
        }
  });
}

template <typename T>
Var<T> softmax_mix(const std::vector<Var<T>>& branches, const Var<T>& logits) {
  if (branches.empty()) throw ContractError("softmax_mix: no branches");
  const Index k = static_cast<Index>(branches.size());
  if (logits.shape() != Shape{k}) {
    throw ContractError("softmax_mix: logits shape " + shape_str(logits.shape()) + " for " +
                        std::to_string(k) + " branches");
  }
  for (const auto& b : branches) require_same_shape(branches[0].shape(), b.shape(), "softmax_mix");
  const std::vector<T> w = softmax<T>(logits.value().data());
  Tensor<T> y(branches[0].shape(), T{0});
  for (Index j = 0; j < k; ++j) {
    const T* bp = branches[j].value().ptr();
    for (Index i = 0; i < y.numel(); ++i) y[i] += w[j] * bp[i];
  }
  std::vector<Var<T>> inputs(branches.begin(), branches.end());
  inputs.push_back(logits);
  return make_result<T>(std::move(y), std::move(inputs), [k, w](Node<T>& self) {
    const T* g = self.grad.ptr();
    const Index count = self.grad.numel();
    std::vector<T> gw(static_cast<std::size_t>(k), T{0});
    for (Index j = 0; j < k; ++j) {
      auto& bn = *self.inputs[j];
      const T* bp = bn.value.ptr();
      Acc acc = 0;
      for (Index i = 0; i < count; ++i) acc += static_cast<Acc>(g[i]) * bp[i];
      gw[j] = static_cast<T>(acc);
      if (bn.requires_grad) {
        T* gb = bn.grad_buffer().ptr();
        for (Index i = 0; i < count; ++i) gb[i] += w[j] * g[i];
      }
    }
    auto& ln = *self.inputs[k];
    if (ln.requires_grad) {
      T dotp{0};
      for (Index j = 0; j < k; ++j) dotp += w[j] * gw[j];
      T* gl = ln.grad_buffer().ptr();
      for (Index j = 0; j < k; ++j) gl[j] += w[j] * (gw[j] - dotp);
    }
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  Acc acc = 0;
  for (T v : x.value().data()) acc += v;
  Tensor<T> y(Shape{1}, static_cast<T>(acc));
  return make_result<T>(std::move(y), {x}, [](Node<T>& self) {
    T* gx = self.inputs[0]->grad_buffer().ptr();
    const T g = self.grad[0];
    for (Index i = 0; i < self.inputs[0]->value.numel(); ++i) gx[i] += g;
  });
}

template <typename T>
Var<T> dot(const Var<T>& x, const Tensor<T>& weights) {
  require_same_shape(x.shape(), weights.shape(), "dot");
  Acc acc = 0;
  for (Index i = 0; i < weights.numel(); ++i) acc += static_cast<Acc>(x.value()[i]) * weights[i];
  Tensor<T> y(Shape{1}, static_cast<T>(acc));
  return make_result<T>(std::move(y), {x}, [weights](Node<T>& self) {
    T* gx = self.inputs[0]->grad_buffer().ptr();
    const T g = self.grad[0];
    for (Index i = 0; i < weights.numel(); ++i) gx[i] += g * weights[i];
  });
}

#define APASEG_INSTANTIATE_OPS(T)                                                               \
  template Var<T> conv3d(const Var<T>&, const Var<T>&, const Var<T>&, const Conv3dOptions&);    \
  template Var<T> transpose_conv3d(const Var<T>&, const Var<T>&, const Var<T>&,                 \
                                   const Conv3dOptions&);                                       \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, const Conv2dOptions&);    \
  template Var<T> transpose_conv2d(const Var<T>&, const Var<T>&, const Var<T>&,                 \
                                   const Conv2dOptions&);                                       \
  template Var<T> axis_pool_keepdim(const Var<T>&, SpatialAxis, PoolMode);                      \
  template Var<T> axis_pool(const Var<T>&, SpatialAxis, PoolMode);                              \
  template Var<T> avg_pool3d(const Var<T>&);                                                    \
  template Var<T> spatial_mean(const Var<T>&);                                                  \
  template Var<T> instance_norm(const Var<T>&, double);                                         \
  template Var<T> relu(const Var<T>&);                                                          \
  template Var<T> norm_act(const Var<T>&);                                                      \
  template Var<T> add(const Var<T>&, const Var<T>&);                                            \
  template Var<T> scale(const Var<T>&, T);                                                      \
  template Var<T> mul_broadcast(const Var<T>&, const Var<T>&);                                  \
  template Var<T> broadcast_to(const Var<T>&, const Shape&);                                    \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                                \
  template Var<T> slice_channels(const Var<T>&, Index, Index);                                  \
  template Var<T> reshape(const Var<T>&, Shape);                                                \
  template Var<T> softmax_channels(const Var<T>&, Index);                                       \
  template Var<T> softmax_mix(const std::vector<Var<T>>&, const Var<T>&);                       \
  template Var<T> sum_all(const Var<T>&);                                                       \
  template Var<T> dot(const Var<T>&, const Tensor<T>&);

APASEG_INSTANTIATE_OPS(float)
APASEG_INSTANTIATE_OPS(double)

#undef APASEG_INSTANTIATE_OPS

}  // namespace ops

template std::vector<float> softmax<float>(std::span<const float>);
template std::vector<double> softmax<double>(std::span<const double>);

}  // namespace apaseg
