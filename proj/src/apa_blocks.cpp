#include "apaseg/apa_blocks.hpp"

#include <algorithm>

namespace apaseg {

std::string_view axis_name(AxisId a) {
  switch (a) {
    case AxisId::Sagittal:
      return "sagittal";
    case AxisId::Axial:
      return "axial";
    case AxisId::Coronal:
      return "coronal";
  }
  return "?";
}

std::string_view to_string(BlockVariant v) {
  switch (v) {
    case BlockVariant::APA:
      return "APA";
    case BlockVariant::CoT2D:
      return "CoT2D";
    case BlockVariant::CoT3D:
      return "CoT3D";
  }
  return "?";
}

std::string_view to_string(ProjectionOp p) {
  switch (p) {
    case ProjectionOp::AvgPlusMax:
      return "AvgPlusMax";
    case ProjectionOp::Avg:
      return "Avg";
    case ProjectionOp::Max:
      return "Max";
    case ProjectionOp::DepthwiseConv:
      return "DepthwiseConv";
  }
  return "?";
}

BlockVariant parse_block_variant(std::string_view s) {
  for (auto v : {BlockVariant::APA, BlockVariant::CoT2D, BlockVariant::CoT3D}) {
    if (s == to_string(v)) return v;
  }
  throw ConfigError("unknown block variant '" + std::string(s) + "' (APA|CoT2D|CoT3D)");
}

ProjectionOp parse_projection_op(std::string_view s) {
  for (auto p : {ProjectionOp::AvgPlusMax, ProjectionOp::Avg, ProjectionOp::Max,
                 ProjectionOp::DepthwiseConv}) {
    if (s == to_string(p)) return p;
  }
  throw ConfigError("unknown projection op '" + std::string(s) +
                    "' (AvgPlusMax|Avg|Max|DepthwiseConv)");
}

namespace {

bool is_plane(BlockVariant v) { return v != BlockVariant::CoT3D; }

int axis_dim(AxisId a) { return tensor_dim(spatial_axis(a)); }

// (C_out, C_in, kA, kB) -> rank 5 with a unit extent on the projected axis.
template <typename T>
Var<T> plane_kernel(const Var<T>& w, AxisId axis) {
  Shape s = w.shape();
  s.insert(s.begin() + axis_dim(axis), 1);
  return ops::reshape(w, std::move(s));
}

template <typename T>
Var<T> oriented(const Var<T>& w, AxisId axis, BlockVariant v) {
  return is_plane(v) ? plane_kernel(w, axis) : w;
}

// Conv options that act on the two in-plane dims only (or all three for 3D).
Conv3dOptions plane_options(AxisId axis, BlockVariant v, Index stride, Index pad, Index out_pad,
                            Index groups) {
  Conv3dOptions o;
  o.groups = groups;
  for (int i = 0; i < 3; ++i) {
    const bool active = !is_plane(v) || 2 + i != axis_dim(axis);
    o.stride[i] = active ? stride : 1;
    o.padding[i] = active ? pad : 0;
    o.output_padding[i] = active ? out_pad : 0;
  }
  return o;
}

Shape kernel_shape(Index out, Index in, Index k, BlockVariant v) {
  return is_plane(v) ? Shape{out, in, k, k} : Shape{out, in, k, k, k};
}

Index kernel_volume(Index k, BlockVariant v) { return is_plane(v) ? k * k : k * k * k; }

template <typename T>
Tensor<T> drop_axis(const Tensor<T>& t, AxisId axis) {
  Shape s = t.shape();
  s.erase(s.begin() + axis_dim(axis));
  return t.reshaped(std::move(s));
}

template <typename T>
void add_param(ParamList<T>& out, const std::string& name, const Var<T>& v) {
  if (v.defined()) out.push_back({name, v});
}

void require_block_width(Index channels, const char* what) {
  if (channels < kGroupSize || channels % kGroupSize != 0) {
    throw ContractError(std::string(what) + ": width " + std::to_string(channels) +
                        " must be a positive multiple of " + std::to_string(kGroupSize));
  }
}

// G = conv_b(h(conv_a([L, Q]))).
template <typename T>
Var<T> attention_map(const Var<T>& L, const Var<T>& Q, AxisId axis, BlockVariant v,
                     const Var<T>& a_w, const Var<T>& a_b, const Var<T>& b_w,
                     const Var<T>& b_b) {
  auto lq = ops::concat_channels(L, Q);
  auto hidden = ops::norm_act(ops::conv3d(lq, oriented(a_w, axis, v), a_b));
  return ops::conv3d(hidden, oriented(b_w, axis, v), b_b);
}

template <typename T>
void record(AttentionTrace<T>* trace, AxisId axis, BlockVariant v, const Var<T>& K,
            const Var<T>& Q, const Var<T>& L, const Var<T>& G, const Var<T>& H) {
  if (!trace) return;
  if (is_plane(v)) {
    trace->K = drop_axis(K.value(), axis);
    trace->Q = drop_axis(Q.value(), axis);
    trace->L = drop_axis(L.value(), axis);
  } else {
    trace->K = K.value();
    trace->Q = Q.value();
    trace->L = L.value();
  }
  trace->G = G.value();
  trace->H = H.value();
}

}  // namespace

template <typename T>
SKFusionParams<T> SKFusionParams<T>::init(Index channels, UniformInit& init) {
  const Index hidden = std::max<Index>(1, channels / kSkReduction);
  SKFusionParams p;
  p.squeeze_w = init.param<T>({hidden, channels, 1, 1, 1}, channels);
  p.squeeze_b = init.param<T>({hidden}, channels);
  p.select_w = init.param<T>({2 * channels, hidden, 1, 1, 1}, hidden);
  p.select_b = init.param<T>({2 * channels}, hidden);
  return p;
}

template <typename T>
void SKFusionParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  add_param(out, prefix + "squeeze.weight", squeeze_w);
  add_param(out, prefix + "squeeze.bias", squeeze_b);
  add_param(out, prefix + "select.weight", select_w);
  add_param(out, prefix + "select.bias", select_b);
}

template <typename T>
IEBlockParams<T> IEBlockParams<T>::init(Index channels, BlockVariant variant,
                                        ProjectionOp projection, Index axis_extent,
                                        UniformInit& init) {
  require_block_width(channels, "IEBlockParams");
  const Index C = channels;
  IEBlockParams p;
  p.variant = variant;
  p.projection = projection;
  p.channels = C;
  if (is_plane(variant) && projection == ProjectionOp::DepthwiseConv) {
    p.proj_kernel = init.param<T>({C, 1, axis_extent}, axis_extent);
  }
  const bool plane_value = variant == BlockVariant::CoT2D;
  p.value_w = init.param<T>(plane_value ? Shape{C, C, 1, 1} : Shape{C, C, 1, 1, 1}, C);
  p.value_b = init.param<T>({C}, C);
  p.key_w = init.param<T>(kernel_shape(C, kGroupSize, 3, variant),
                          kGroupSize * kernel_volume(3, variant));
  p.key_b = init.param<T>({C}, kGroupSize * kernel_volume(3, variant));
  p.attn_a_w = init.param<T>(kernel_shape(C, 2 * C, 1, variant), 2 * C);
  p.attn_a_b = init.param<T>({C}, 2 * C);
  p.attn_b_w = init.param<T>(kernel_shape(C, C, 1, variant), C);
  p.attn_b_b = init.param<T>({C}, C);
  p.sk = SKFusionParams<T>::init(C, init);
  return p;
}

template <typename T>
void IEBlockParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  add_param(out, prefix + "proj.kernel", proj_kernel);
  add_param(out, prefix + "value.weight", value_w);
  add_param(out, prefix + "value.bias", value_b);
  add_param(out, prefix + "key.weight", key_w);
  add_param(out, prefix + "key.bias", key_b);
  add_param(out, prefix + "attn_a.weight", attn_a_w);
  add_param(out, prefix + "attn_a.bias", attn_a_b);
  add_param(out, prefix + "attn_b.weight", attn_b_w);
  add_param(out, prefix + "attn_b.bias", attn_b_b);
  sk.collect(prefix + "sk.", out);
}

template <typename T>
IDBlockParams<T> IDBlockParams<T>::init(Index channels, BlockVariant variant,
                                        ProjectionOp projection, Index high_extent,
                                        UniformInit& init) {
  require_block_width(channels, "IDBlockParams");
  const Index C = channels;
  IDBlockParams p;
  p.variant = variant;
  p.projection = projection;
  p.channels = C;
  if (is_plane(variant) && projection == ProjectionOp::DepthwiseConv) {
    p.proj_kernel_high = init.param<T>({C, 1, high_extent}, high_extent);
    p.proj_kernel_low = init.param<T>({2 * C, 1, high_extent / 2}, high_extent / 2);
  }
  // Transpose-conv fan-in follows the (C_out / groups) * kernel volume convention.
  const Index key_out_per_group = C / (2 * C / kGroupSize);
  p.key_up_w = init.param<T>(kernel_shape(2 * C, key_out_per_group, 3, variant),
                             key_out_per_group * kernel_volume(3, variant));
  p.key_up_b = init.param<T>({C}, key_out_per_group * kernel_volume(3, variant));
  const bool plane_value = variant == BlockVariant::CoT2D;
  const Shape value_shape = plane_value ? Shape{2 * C, C, 2, 2} : Shape{2 * C, C, 2, 2, 2};
  const Index value_fan = C * (plane_value ? 4 : 8);
  p.value_up_w = init.param<T>(value_shape, value_fan);
  p.value_up_b = init.param<T>({C}, value_fan);
  p.attn_a_w = init.param<T>(kernel_shape(C, 2 * C, 1, variant), 2 * C);
  p.attn_a_b = init.param<T>({C}, 2 * C);
  p.attn_b_w = init.param<T>(kernel_shape(C, C, 1, variant), C);
  p.attn_b_b = init.param<T>({C}, C);
  p.sk = SKFusionParams<T>::init(C, init);
  return p;
}

template <typename T>
void IDBlockParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  add_param(out, prefix + "proj_high.kernel", proj_kernel_high);
  add_param(out, prefix + "proj_low.kernel", proj_kernel_low);
  add_param(out, prefix + "key_up.weight", key_up_w);
  add_param(out, prefix + "key_up.bias", key_up_b);
  add_param(out, prefix + "value_up.weight", value_up_w);
  add_param(out, prefix + "value_up.bias", value_up_b);
  add_param(out, prefix + "attn_a.weight", attn_a_w);
  add_param(out, prefix + "attn_a.bias", attn_a_b);
  add_param(out, prefix + "attn_b.weight", attn_b_w);
  add_param(out, prefix + "attn_b.bias", attn_b_b);
  sk.collect(prefix + "sk.", out);
}

template <typename T>
FusionWeights<T> FusionWeights<T>::init(bool learned) {
  FusionWeights fw;
  fw.learned = learned;
  fw.logits = Var<T>(Tensor<T>({3}, T{0}), learned);
  return fw;
}

template <typename T>
std::array<double, 3> FusionWeights<T>::weights() const {
  const Tensor<double> wide = logits.value().template cast<double>();
  const auto w = softmax<double>(wide.data());
  return {w[0], w[1], w[2]};
}

template <typename T>
Var<T> project_keepdim(const Var<T>& x, AxisId axis, ProjectionOp op, const Var<T>& kernel) {
  require_rank(x.shape(), 5, "project");
  const SpatialAxis sa = spatial_axis(axis);
  switch (op) {
    case ProjectionOp::AvgPlusMax:
      return ops::add(ops::axis_pool_keepdim(x, sa, PoolMode::Mean),
                      ops::axis_pool_keepdim(x, sa, PoolMode::Max));
    case ProjectionOp::Avg:
      return ops::axis_pool_keepdim(x, sa, PoolMode::Mean);
    case ProjectionOp::Max:
      return ops::axis_pool_keepdim(x, sa, PoolMode::Max);
    case ProjectionOp::DepthwiseConv: {
      const Index C = x.shape()[1];
      const Index extent = x.shape()[axis_dim(axis)];
      if (!kernel.defined() || kernel.shape() != Shape{C, 1, extent}) {
        throw ContractError("project: depthwise kernel must have shape " +
                            shape_str({C, 1, extent}) + " for input " + shape_str(x.shape()));
      }
      Shape ks{C, 1, 1, 1, 1};
      ks[axis_dim(axis)] = extent;
      Conv3dOptions opt;
      opt.groups = C;
      return ops::conv3d(x, ops::reshape(kernel, ks), Var<T>(), opt);
    }
  }
  throw ContractError("project: unknown projection op");
}

template <typename T>
Var<T> project(const Var<T>& x, AxisId axis, ProjectionOp op, const Var<T>& kernel) {
  auto y = project_keepdim(x, axis, op, kernel);
  Shape s = y.shape();
  s.erase(s.begin() + axis_dim(axis));
  return ops::reshape(y, std::move(s));
}

namespace {
template <typename T>
Var<T> sk_weights(const Var<T>& h, const Var<T>& x, const SKFusionParams<T>& p) {
  require_same_shape(h.shape(), x.shape(), "sk_fuse");
  auto descriptor = ops::spatial_mean(ops::add(h, x));
  auto squeezed = ops::conv3d(descriptor, p.squeeze_w, p.squeeze_b);
  auto logits = ops::conv3d(squeezed, p.select_w, p.select_b);
  return ops::softmax_channels(logits, 2);
}
}  // namespace

template <typename T>
Tensor<T> sk_branch_weights(const Var<T>& h, const Var<T>& x, const SKFusionParams<T>& p) {
  NoGradGuard guard;
  return sk_weights(h, x, p).value();
}

template <typename T>
Var<T> sk_fuse(const Var<T>& h, const Var<T>& x, const SKFusionParams<T>& p) {
  const Index C = x.shape()[1];
  auto w = sk_weights(h, x, p);
  // w_h * h + w_x * x with w_x = 1 - w_h, written so that h == x returns x exactly.
  auto w_h = ops::slice_channels(w, 0, C);
  return ops::add(x, ops::mul_broadcast(ops::add(h, ops::scale(x, T{-1})), w_h));
}

template <typename T>
Var<T> ie_block(const Var<T>& x, AxisId axis, const IEBlockParams<T>& p,
                AttentionTrace<T>* trace) {
  require_rank(x.shape(), 5, "ie_block");
  if (x.shape()[1] != p.channels) {
    throw ContractError("ie_block: input " + shape_str(x.shape()) + " does not match width " +
                        std::to_string(p.channels));
  }
  if (p.variant != BlockVariant::APA) {
    throw ContractError("ie_block: parameters were built for a CoT variant");
  }
  const BlockVariant v = BlockVariant::APA;
  const Index C = p.channels;
  auto K = project_keepdim(x, axis, p.projection, p.proj_kernel);
  const auto& Q = K;
  auto L = ops::norm_act(ops::conv3d(K, plane_kernel(p.key_w, axis), p.key_b,
                                     plane_options(axis, v, 1, 1, 0, C / kGroupSize)));
  auto G = attention_map(L, Q, axis, v, p.attn_a_w, p.attn_a_b, p.attn_b_w, p.attn_b_b);
  auto V = ops::conv3d(x, p.value_w, p.value_b);
  auto H = ops::mul_broadcast(V, G);
  record(trace, axis, v, K, Q, L, G, H);
  return sk_fuse(H, x, p.sk);
}

template <typename T>
Var<T> cot_variant_block(const Var<T>& x, AxisId axis, const IEBlockParams<T>& p,
                         AttentionTrace<T>* trace) {
  if (p.variant == BlockVariant::APA) return ie_block(x, axis, p, trace);
  require_rank(x.shape(), 5, "cot_variant_block");
  if (x.shape()[1] != p.channels) {
    throw ContractError("cot_variant_block: input " + shape_str(x.shape()) +
                        " does not match width " + std::to_string(p.channels));
  }
  const BlockVariant v = p.variant;
  const Index C = p.channels;
  if (v == BlockVariant::CoT3D) {
    const auto& K = x;
    const auto& Q = x;
    auto L = ops::norm_act(
        ops::conv3d(K, p.key_w, p.key_b, plane_options(axis, v, 1, 1, 0, C / kGroupSize)));
    auto G = attention_map(L, Q, axis, v, p.attn_a_w, p.attn_a_b, p.attn_b_w, p.attn_b_b);
    auto V = ops::conv3d(x, p.value_w, p.value_b);
    auto H = ops::mul_broadcast(V, G);
    record(trace, axis, v, K, Q, L, G, H);
    return sk_fuse(H, x, p.sk);
  }
  // CoT2D: keys, queries and values all live on the plane.
  auto K = project_keepdim(x, axis, p.projection, p.proj_kernel);
  const auto& Q = K;
  auto L = ops::norm_act(ops::conv3d(K, plane_kernel(p.key_w, axis), p.key_b,
                                     plane_options(axis, v, 1, 1, 0, C / kGroupSize)));
  auto G = attention_map(L, Q, axis, v, p.attn_a_w, p.attn_a_b, p.attn_b_w, p.attn_b_b);
  auto V = ops::conv3d(K, plane_kernel(p.value_w, axis), p.value_b);
  auto H = ops::broadcast_to(ops::mul_broadcast(V, G), x.shape());
  record(trace, axis, v, K, Q, L, G, H);
  return sk_fuse(H, x, p.sk);
}

template <typename T>
Var<T> id_block(const Var<T>& x_low, const Var<T>& x_high, AxisId axis,
                const IDBlockParams<T>& p, AttentionTrace<T>* trace) {
  require_rank(x_low.shape(), 5, "id_block");
  require_rank(x_high.shape(), 5, "id_block");
  const Shape& lo = x_low.shape();
  const Shape& hi = x_high.shape();
  const Index C = p.channels;
  bool ok = hi[1] == C && lo[1] == 2 * C && lo[0] == hi[0];
  for (int i = 2; i < 5; ++i) ok = ok && hi[i] == 2 * lo[i];
  if (!ok) {
    throw ContractError("id_block: low-resolution input " + shape_str(lo) +
                        " must be exactly (N, 2C, H/2, W/2, D/2) of high-resolution input " +
                        shape_str(hi) + " with C = " + std::to_string(C));
  }
  const BlockVariant v = p.variant;
  const Index key_groups = 2 * C / kGroupSize;

  if (v == BlockVariant::CoT3D) {
    const auto& Q = x_high;
    auto L = ops::norm_act(ops::transpose_conv3d(x_low, p.key_up_w, p.key_up_b,
                                                 plane_options(axis, v, 2, 1, 1, key_groups)));
    auto G = attention_map(L, Q, axis, v, p.attn_a_w, p.attn_a_b, p.attn_b_w, p.attn_b_b);
    auto V = ops::transpose_conv3d(x_low, p.value_up_w, p.value_up_b,
                                   plane_options(axis, v, 2, 0, 0, 1));
    auto H = ops::mul_broadcast(V, G);
    record(trace, axis, v, x_low, Q, L, G, H);
    return sk_fuse(H, x_high, p.sk);
  }

  auto Q = project_keepdim(x_high, axis, p.projection, p.proj_kernel_high);
  auto K = project_keepdim(x_low, axis, p.projection, p.proj_kernel_low);
  auto L = ops::norm_act(ops::transpose_conv3d(K, plane_kernel(p.key_up_w, axis), p.key_up_b,
                                               plane_options(axis, v, 2, 1, 1, key_groups)));
  auto G = attention_map(L, Q, axis, v, p.attn_a_w, p.attn_a_b, p.attn_b_w, p.attn_b_b);
  Var<T> H;
  if (v == BlockVariant::CoT2D) {
    auto V = ops::transpose_conv3d(K, plane_kernel(p.value_up_w, axis), p.value_up_b,
                                   plane_options(axis, v, 2, 0, 0, 1));
    H = ops::broadcast_to(ops::mul_broadcast(V, G), hi);
  } else {
    auto V = ops::transpose_conv3d(x_low, p.value_up_w, p.value_up_b, Conv3dOptions{{2, 2, 2}});
    H = ops::mul_broadcast(V, G);
  }
  record(trace, axis, v, K, Q, L, G, H);
  return sk_fuse(H, x_high, p.sk);
}

template <typename T>
Var<T> fuse_axes(const std::array<Var<T>, 3>& branches, const FusionWeights<T>& fw) {
  return ops::softmax_mix(std::vector<Var<T>>(branches.begin(), branches.end()), fw.logits);
}

#define APASEG_INSTANTIATE_BLOCKS(T)                                                            \
  template struct SKFusionParams<T>;                                                            \
  template struct IEBlockParams<T>;                                                             \
  template struct IDBlockParams<T>;                                                             \
  template struct FusionWeights<T>;                                                             \
  template Var<T> project(const Var<T>&, AxisId, ProjectionOp, const Var<T>&);                  \
  template Var<T> project_keepdim(const Var<T>&, AxisId, ProjectionOp, const Var<T>&);          \
  template Var<T> sk_fuse(const Var<T>&, const Var<T>&, const SKFusionParams<T>&);              \
  template Tensor<T> sk_branch_weights(const Var<T>&, const Var<T>&, const SKFusionParams<T>&); \
  template Var<T> ie_block(const Var<T>&, AxisId, const IEBlockParams<T>&, AttentionTrace<T>*); \
  template Var<T> cot_variant_block(const Var<T>&, AxisId, const IEBlockParams<T>&,             \
                                    AttentionTrace<T>*);                                        \
  template Var<T> id_block(const Var<T>&, const Var<T>&, AxisId, const IDBlockParams<T>&,       \
                           AttentionTrace<T>*);                                                 \
  template Var<T> fuse_axes(const std::array<Var<T>, 3>&, const FusionWeights<T>&);

APASEG_INSTANTIATE_BLOCKS(float)
APASEG_INSTANTIATE_BLOCKS(double)

#undef APASEG_INSTANTIATE_BLOCKS

}  // namespace apaseg
