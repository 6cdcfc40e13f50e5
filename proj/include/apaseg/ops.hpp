#pragma once

#include <array>
#include <vector>

#include "apaseg/autograd.hpp"

namespace apaseg {

/// Spatial dimension of an (N, C, H, W, D) tensor.
enum class SpatialAxis { H = 0, W = 1, D = 2 };

constexpr int tensor_dim(SpatialAxis a) { return 2 + static_cast<int>(a); }

enum class PoolMode { Mean, Max };

using Triple = std::array<Index, 3>;
using Pair = std::array<Index, 2>;

struct Conv3dOptions {
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};
  Triple output_padding{0, 0, 0};  // transpose convolutions only
  Index groups = 1;
};

struct Conv2dOptions {
  Pair stride{1, 1};
  Pair padding{0, 0};
  Pair output_padding{0, 0};
  Index groups = 1;
};

/// Instance-norm epsilon used by norm_act.
inline constexpr double kNormEps = 1e-5;

namespace ops {

// Convolutions implement cross-correlation. `bias` may be an undefined Var.
// Weight layouts: conv (C_out, C_in/groups, k...), transpose (C_in, C_out/groups, k...).
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              const Conv3dOptions& opt = {});
template <typename T>
Var<T> transpose_conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                        const Conv3dOptions& opt = {});
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              const Conv2dOptions& opt = {});
template <typename T>
Var<T> transpose_conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                        const Conv2dOptions& opt = {});

/// Reduces one spatial axis to extent 1, keeping rank 5.
template <typename T>
Var<T> axis_pool_keepdim(const Var<T>& x, SpatialAxis axis, PoolMode mode);
/// Reduces one spatial axis and drops it: (N,C,H,W,D) -> (N,C,A,B).
template <typename T>
Var<T> axis_pool(const Var<T>& x, SpatialAxis axis, PoolMode mode);

/// 2x2x2 average pooling with stride 2.
template <typename T>
Var<T> avg_pool3d(const Var<T>& x);

/// Mean over every spatial position: (N,C,...) -> (N,C,1,...).
template <typename T>
Var<T> spatial_mean(const Var<T>& x);

template <typename T>
Var<T> instance_norm(const Var<T>& x, double eps = kNormEps);
template <typename T>
Var<T> relu(const Var<T>& x);
/// Instance normalization followed by rectification.
template <typename T>
Var<T> norm_act(const Var<T>& x);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& x, T alpha);
/// Elementwise a * b where every dim of b equals a's or is 1.
template <typename T>
Var<T> mul_broadcast(const Var<T>& a, const Var<T>& b);
/// Repeats size-1 dims of x up to `shape`.
template <typename T>
Var<T> broadcast_to(const Var<T>& x, const Shape& shape);

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> slice_channels(const Var<T>& x, Index begin, Index count);
template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);

/// Softmax across `groups` channel blocks: channel j*m + c competes with the
/// same c in every other block (m = C / groups). groups == C gives the usual
/// per-voxel class softmax.
template <typename T>
Var<T> softmax_channels(const Var<T>& x, Index groups);

/// sum_k softmax(logits)_k * branches[k]. logits has shape (K).
template <typename T>
Var<T> softmax_mix(const std::vector<Var<T>>& branches, const Var<T>& logits);

template <typename T>
Var<T> sum_all(const Var<T>& x);
/// Scalar <x, weights>.
template <typename T>
Var<T> dot(const Var<T>& x, const Tensor<T>& weights);

}  // namespace ops

/// softmax of a small vector, shifted by its max.
template <typename T>
std::vector<T> softmax(std::span<const T> logits);

}  // namespace apaseg
