#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "apaseg/init.hpp"
#include "apaseg/ops.hpp"

namespace apaseg {

/// Anatomical viewing planes. Each is named by the axis it projects away:
/// sagittal removes H, axial removes W, coronal removes D.
enum class AxisId { Sagittal = 0, Axial = 1, Coronal = 2 };

inline constexpr std::array<AxisId, 3> kAllAxes{AxisId::Sagittal, AxisId::Axial,
                                                AxisId::Coronal};

constexpr SpatialAxis spatial_axis(AxisId a) {
  switch (a) {
    case AxisId::Sagittal:
      return SpatialAxis::H;
    case AxisId::Axial:
      return SpatialAxis::W;
    case AxisId::Coronal:
      return SpatialAxis::D;
  }
  return SpatialAxis::H;
}

std::string_view axis_name(AxisId a);

enum class BlockVariant { APA, CoT2D, CoT3D };
enum class ProjectionOp { AvgPlusMax, Avg, Max, DepthwiseConv };

std::string_view to_string(BlockVariant v);
std::string_view to_string(ProjectionOp p);
BlockVariant parse_block_variant(std::string_view s);
ProjectionOp parse_projection_op(std::string_view s);

/// Channels per group in the key convolutions.
inline constexpr Index kGroupSize = 4;
/// Channel reduction of the selective-kernel squeeze.
inline constexpr Index kSkReduction = 4;

template <typename T>
struct SKFusionParams {
  Var<T> squeeze_w, squeeze_b;  // (C/r, C, 1, 1, 1)
  Var<T> select_w, select_b;    // (2C, C/r, 1, 1, 1): C logits for h, then C for x

  static SKFusionParams init(Index channels, UniformInit& init);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Weights of one internal encoder block. Plane variants (APA, CoT2D) keep
/// 2D kernels (C_out, C_in/g, kA, kB); they are oriented onto the block's
/// projection plane at call time. CoT3D keeps 3D kernels.
template <typename T>
struct IEBlockParams {
  BlockVariant variant = BlockVariant::APA;
  ProjectionOp projection = ProjectionOp::AvgPlusMax;
  Index channels = 0;
  Var<T> proj_kernel;           // DepthwiseConv only: (C, 1, axis extent)
  Var<T> value_w, value_b;      // 1x1x1 (CoT2D: 1x1 on the plane)
  Var<T> key_w, key_b;          // 3x3 group conv, group size 4
  Var<T> attn_a_w, attn_a_b;    // 1x1, 2C -> C
  Var<T> attn_b_w, attn_b_b;    // 1x1, C -> C
  SKFusionParams<T> sk;

  /// `axis_extent` is only used by the DepthwiseConv projection.
  static IEBlockParams init(Index channels, BlockVariant variant, ProjectionOp projection,
                            Index axis_extent, UniformInit& init);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Weights of one internal decoder block at output width C. The keys come
/// from the 2C-channel low-resolution input and are upsampled by a stride-2
/// group transpose conv; values by a stride-2 transpose conv 2C -> C.
template <typename T>
struct IDBlockParams {
  BlockVariant variant = BlockVariant::APA;
  ProjectionOp projection = ProjectionOp::AvgPlusMax;
  Index channels = 0;
  Var<T> proj_kernel_high;      // DepthwiseConv only: (C, 1, extent)
  Var<T> proj_kernel_low;       // DepthwiseConv only: (2C, 1, extent / 2)
  Var<T> key_up_w, key_up_b;    // (2C, 2, 3, 3[, 3]) groups 2C/4
  Var<T> value_up_w, value_up_b;  // (2C, C, 2, 2[, 2])
  Var<T> attn_a_w, attn_a_b;
  Var<T> attn_b_w, attn_b_b;
  SKFusionParams<T> sk;

  /// `high_extent` is the full-resolution extent of the projected axis.
  static IDBlockParams init(Index channels, BlockVariant variant, ProjectionOp projection,
                            Index high_extent, UniformInit& init);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Per-stage axis importance: softmax over three logits.
template <typename T>
struct FusionWeights {
  Var<T> logits;  // (3); trainable only in learned mode
  bool learned = true;

  static FusionWeights init(bool learned);
  std::array<double, 3> weights() const;
};

/// Intermediate tensors of one block. Plane variants report K, Q, L as
/// (N, C, A, B); G keeps rank 5 with a unit extent on the projected axis so
/// it broadcasts against V.
template <typename T>
struct AttentionTrace {
  Tensor<T> K, Q, L, G, H;
};

/// Projects x onto the plane orthogonal to `axis`: (N,C,H,W,D) -> (N,C,A,B).
template <typename T>
Var<T> project(const Var<T>& x, AxisId axis, ProjectionOp op, const Var<T>& kernel = {});

/// As `project`, keeping the removed axis with extent 1.
template <typename T>
Var<T> project_keepdim(const Var<T>& x, AxisId axis, ProjectionOp op,
                       const Var<T>& kernel = {});

/// Selective fusion of two same-shape branches: per-channel two-way softmax
/// gates driven by the global average of (h + x).
template <typename T>
Var<T> sk_fuse(const Var<T>& h, const Var<T>& x, const SKFusionParams<T>& p);

/// The (N, 2C, 1, 1, 1) gate values used by sk_fuse: channel c weights h,
/// channel C + c weights x.
template <typename T>
Tensor<T> sk_branch_weights(const Var<T>& h, const Var<T>& x, const SKFusionParams<T>& p);

/// APA internal encoder block. Output shape equals input shape.
template <typename T>
Var<T> ie_block(const Var<T>& x, AxisId axis, const IEBlockParams<T>& p,
                AttentionTrace<T>* trace = nullptr);

/// Encoder block for any variant; APA delegates to ie_block.
template <typename T>
Var<T> cot_variant_block(const Var<T>& x, AxisId axis, const IEBlockParams<T>& p,
                         AttentionTrace<T>* trace = nullptr);

/// Internal decoder block. x_low is (N,2C,H/2,W/2,D/2), x_high (N,C,H,W,D).
template <typename T>
Var<T> id_block(const Var<T>& x_low, const Var<T>& x_high, AxisId axis,
                const IDBlockParams<T>& p, AttentionTrace<T>* trace = nullptr);

/// Weighted sum of the three per-axis branches.
template <typename T>
Var<T> fuse_axes(const std::array<Var<T>, 3>& branches, const FusionWeights<T>& fw);

}  // namespace apaseg
