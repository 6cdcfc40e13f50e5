#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "apaseg/gradcheck.hpp"
#include "apaseg/ops.hpp"
#include "test_util.hpp"

using namespace apaseg;
using apaseg::testing::random_var;

namespace {

using VarD = Var<double>;

// Direct grouped cross-correlation, written independently of the kernel code.
Tensor<double> conv3d_oracle(const Tensor<double>& x, const Tensor<double>& w,
                             const Tensor<double>& b, Triple stride, Triple pad, Index groups) {
  const Index N = x.dim(0), Ci = x.dim(1), Co = w.dim(0);
  const Index kh = w.dim(2), kw = w.dim(3), kd = w.dim(4);
  const Index Ho = (x.dim(2) + 2 * pad[0] - kh) / stride[0] + 1;
  const Index Wo = (x.dim(3) + 2 * pad[1] - kw) / stride[1] + 1;
  const Index Do = (x.dim(4) + 2 * pad[2] - kd) / stride[2] + 1;
  const Index cig = Ci / groups, cog = Co / groups;
  Tensor<double> y({N, Co, Ho, Wo, Do}, 0.0);
  for (Index n = 0; n < N; ++n)
    for (Index co = 0; co < Co; ++co)
      for (Index oh = 0; oh < Ho; ++oh)
        for (Index ow = 0; ow < Wo; ++ow)
          for (Index od = 0; od < Do; ++od) {
            double s = b.empty() ? 0.0 : b[co];
            const Index g = co / cog;
            for (Index c = 0; c < cig; ++c)
              for (Index a = 0; a < kh; ++a)
                for (Index e = 0; e < kw; ++e)
                  for (Index f = 0; f < kd; ++f) {
                    const Index ih = oh * stride[0] - pad[0] + a;
                    const Index iw = ow * stride[1] - pad[1] + e;
                    const Index id = od * stride[2] - pad[2] + f;
                    if (ih < 0 || iw < 0 || id < 0 || ih >= x.dim(2) || iw >= x.dim(3) ||
                        id >= x.dim(4))
                      continue;
                    s += w.at(co, c, a, e, f) * x.at(n, g * cig + c, ih, iw, id);
                  }
            y.at(n, co, oh, ow, od) = s;
          }
  return y;
}

}  // namespace

TEST(Conv3d, IdentityKernelReproducesInput) {
  std::mt19937_64 rng(1);
  auto x = random_var({1, 3, 4, 3, 2}, rng, false);
  Tensor<double> w({3, 3, 1, 1, 1}, 0.0);
  for (Index c = 0; c < 3; ++c) w.at(c, c, 0, 0, 0) = 1.0;
  auto y = ops::conv3d(x, VarD(w), VarD(Tensor<double>({3}, 0.0)));
  EXPECT_EQ(y.value(), x.value());
}

TEST(Conv3d, ZeroInputGivesBias) {
  VarD x(Tensor<double>({1, 2, 3, 3, 3}, 0.0));
  std::mt19937_64 rng(2);
  auto w = random_var({2, 2, 3, 3, 3}, rng, false);
  VarD b(Tensor<double>({2}, std::vector<double>{0.5, -1.25}));
  auto y = ops::conv3d(x, w, b, {.padding = {1, 1, 1}});
  for (Index c = 0; c < 2; ++c)
    for (Index i = 0; i < 27; ++i) EXPECT_EQ(y.value()[c * 27 + i], b.value()[c]);
}

TEST(Conv3d, MatchesNestedLoopOracle) {
  std::mt19937_64 rng(3);
  auto x = random_var({1, 2, 3, 3, 3}, rng, false);
  auto w = random_var({1, 2, 3, 3, 3}, rng, false);
  auto b = random_var({1}, rng, false);
  auto y = ops::conv3d(x, w, b);
  auto ref = conv3d_oracle(x.value(), w.value(), b.value(), {1, 1, 1}, {0, 0, 0}, 1);
  ASSERT_EQ(y.shape(), ref.shape());
  EXPECT_LT(apaseg::testing::max_abs_diff(y.value(), ref), 1e-12);

  // Strided, padded, grouped.
  auto x2 = random_var({2, 4, 5, 4, 3}, rng, false);
  auto w2 = random_var({6, 2, 3, 2, 3}, rng, false);
  auto b2 = random_var({6}, rng, false);
  Conv3dOptions opt{.stride = {2, 1, 2}, .padding = {1, 0, 1}, .groups = 2};
  auto y2 = ops::conv3d(x2, w2, b2, opt);
  auto ref2 = conv3d_oracle(x2.value(), w2.value(), b2.value(), opt.stride, opt.padding, 2);
  ASSERT_EQ(y2.shape(), ref2.shape());
  EXPECT_LT(apaseg::testing::max_abs_diff(y2.value(), ref2), 1e-12);
}

TEST(Conv3d, ChannelMismatchThrows) {
  std::mt19937_64 rng(4);
  auto x = random_var({1, 3, 2, 2, 2}, rng, false);
  auto w = random_var({2, 2, 1, 1, 1}, rng, false);
  EXPECT_THROW(ops::conv3d(x, w, VarD()), ContractError);
  EXPECT_THROW(ops::conv3d(x, random_var({4, 1, 1, 1, 1}, rng, false), VarD(), {.groups = 2}),
               ContractError);
}

TEST(TransposeConv, StrideTwoDoublesExtent) {
  std::mt19937_64 rng(5);
  auto x = random_var({1, 4, 8, 8}, rng, false);
  auto w = random_var({4, 2, 3, 3}, rng, false);
  auto y = ops::transpose_conv2d(x, w, VarD(),
                                 {.stride = {2, 2}, .padding = {1, 1}, .output_padding = {1, 1}});
  EXPECT_EQ(y.shape(), (Shape{1, 2, 16, 16}));

  auto x3 = random_var({1, 4, 3, 2, 4}, rng, false);
  auto w3 = random_var({4, 2, 2, 2, 2}, rng, false);
  auto y3 = ops::transpose_conv3d(x3, w3, VarD(), {.stride = {2, 2, 2}});
  EXPECT_EQ(y3.shape(), (Shape{1, 2, 6, 4, 8}));
}

TEST(TransposeConv, ZeroWeightsGiveBias) {
  std::mt19937_64 rng(6);
  auto x = random_var({1, 4, 3, 3}, rng, false);
  VarD w(Tensor<double>({4, 3, 3, 3}, 0.0));
  VarD b(Tensor<double>({3}, 0.75));
  auto y = ops::transpose_conv2d(x, w, b, {.stride = {2, 2}, .padding = {1, 1}});
  for (double v : y.value().data()) EXPECT_EQ(v, 0.75);
}

TEST(TransposeConv, InconsistentOutputPaddingThrows) {
  std::mt19937_64 rng(7);
  auto x = random_var({1, 2, 3, 3}, rng, false);
  auto w = random_var({2, 2, 3, 3}, rng, false);
  EXPECT_THROW(ops::transpose_conv2d(x, w, VarD(), {.stride = {2, 2}, .output_padding = {2, 0}}),
               ContractError);
  EXPECT_THROW(ops::transpose_conv2d(x, w, VarD(), {.output_padding = {1, 1}}), ContractError);
}

// <conv(x), y> == <x, conv^T(y)> for the same weights.
TEST(TransposeConv, AdjointOfConvolution) {
  std::mt19937_64 rng(8);
  struct Case {
    Shape x;
    Shape w;
    Conv3dOptions opt;
  };
  const std::vector<Case> cases = {
      {{2, 4, 5, 6, 4}, {6, 2, 3, 3, 3}, {.stride = {2, 2, 1}, .padding = {1, 1, 1}, .groups = 2}},
      {{1, 3, 4, 4, 4}, {2, 3, 2, 2, 2}, {.stride = {2, 2, 2}}},
      {{1, 8, 1, 6, 5}, {8, 2, 1, 3, 3}, {.stride = {1, 2, 2}, .padding = {0, 1, 1}, .groups = 4}},
  };
  for (const auto& c : cases) {
    auto x = random_var(c.x, rng, false);
    auto w = random_var(c.w, rng, false);
    auto cx = ops::conv3d(x, w, VarD(), c.opt);
    auto y = random_var(cx.shape(), rng, false);
    // choose output_padding so the transpose reproduces x's extent
    Conv3dOptions topt = c.opt;
    for (int i = 0; i < 3; ++i) {
      topt.output_padding[i] = c.x[2 + i] - ((cx.shape()[2 + i] - 1) * c.opt.stride[i] -
                                             2 * c.opt.padding[i] + c.w[2 + i]);
    }
    auto ty = ops::transpose_conv3d(y, w, VarD(), topt);
    ASSERT_EQ(ty.shape(), x.shape());
    const double lhs = apaseg::testing::inner(cx.value(), y.value());
    const double rhs = apaseg::testing::inner(x.value(), ty.value());
    EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST(AxisPool, ConstantVolume) {
  VarD x(Tensor<double>({1, 2, 3, 4, 5}, 2.5));
  for (auto axis : {SpatialAxis::H, SpatialAxis::W, SpatialAxis::D}) {
    for (auto mode : {PoolMode::Mean, PoolMode::Max}) {
      auto y = ops::axis_pool(x, axis, mode);
      EXPECT_EQ(y.shape().size(), 4u);
      for (double v : y.value().data()) EXPECT_NEAR(v, 2.5, 1e-15);
    }
  }
  EXPECT_EQ(ops::axis_pool(x, SpatialAxis::H, PoolMode::Mean).shape(), (Shape{1, 2, 4, 5}));
  EXPECT_EQ(ops::axis_pool(x, SpatialAxis::W, PoolMode::Mean).shape(), (Shape{1, 2, 3, 5}));
  EXPECT_EQ(ops::axis_pool(x, SpatialAxis::D, PoolMode::Mean).shape(), (Shape{1, 2, 3, 4}));
}

TEST(AxisPool, MatchesLoopOracleAlongH) {
  std::mt19937_64 rng(9);
  auto x = random_var({1, 1, 2, 2, 2}, rng, false);
  auto mean = ops::axis_pool(x, SpatialAxis::H, PoolMode::Mean);
  auto mx = ops::axis_pool(x, SpatialAxis::H, PoolMode::Max);
  for (Index w = 0; w < 2; ++w)
    for (Index d = 0; d < 2; ++d) {
      const double a = x.value().at(0, 0, 0, w, d);
      const double b = x.value().at(0, 0, 1, w, d);
      EXPECT_NEAR(mean.value().at(0, 0, w, d), 0.5 * (a + b), 1e-15);
      EXPECT_EQ(mx.value().at(0, 0, w, d), std::max(a, b));
    }
}

TEST(AxisPool, MaxTieRoutesGradientToFirstIndex) {
  VarD x(Tensor<double>({1, 1, 3, 1, 1}, 1.0), true);
  auto y = ops::axis_pool(x, SpatialAxis::H, PoolMode::Max);
  backward(ops::sum_all(y));
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 0.0);
}

TEST(AxisPool, MeanCommutesWithScaling) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_var({1, 2, 3, 4, 2}, rng, false);
    const double alpha = std::uniform_real_distribution<double>(-3.0, 3.0)(rng);
    for (auto axis : {SpatialAxis::H, SpatialAxis::W, SpatialAxis::D}) {
      auto lhs = ops::axis_pool(ops::scale(x, alpha), axis, PoolMode::Mean);
      auto rhs = ops::scale(ops::axis_pool(x, axis, PoolMode::Mean), alpha);
      EXPECT_LT(apaseg::testing::max_abs_diff(lhs.value(), rhs.value()), 1e-14);
    }
  }
}

TEST(AvgPool3d, Basics) {
  VarD c(Tensor<double>({1, 2, 4, 4, 4}, -1.5));
  auto pooled = ops::avg_pool3d(c);
  for (double v : pooled.value().data()) EXPECT_EQ(v, -1.5);

  Tensor<double> seq({1, 1, 2, 2, 2}, 0.0);
  for (Index i = 0; i < 8; ++i) seq[i] = static_cast<double>(i);
  auto y = ops::avg_pool3d(VarD(seq));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1, 1}));
  EXPECT_EQ(y.value()[0], 3.5);

  EXPECT_EQ(ops::avg_pool3d(VarD(Tensor<double>({1, 3, 8, 8, 8}, 0.0))).shape(),
            (Shape{1, 3, 4, 4, 4}));
  EXPECT_THROW(ops::avg_pool3d(VarD(Tensor<double>({1, 1, 4, 3, 4}, 0.0))), ContractError);
}

TEST(NormAct, ConstantSliceIsZero) {
  VarD x(Tensor<double>({1, 2, 2, 2, 2}, 3.0));
  auto normed = ops::instance_norm(x);
  auto activated = ops::norm_act(x);
  for (double v : normed.value().data()) EXPECT_EQ(v, 0.0);
  for (double v : activated.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(NormAct, PlusMinusOneSlice) {
  VarD x(Tensor<double>({1, 1, 2, 1, 1}, std::vector<double>{-1.0, 1.0}));
  auto n = ops::instance_norm(x);
  EXPECT_NEAR(n.value()[0], -1.0, 1e-5);
  EXPECT_NEAR(n.value()[1], 1.0, 1e-5);
  auto a = ops::norm_act(x);
  EXPECT_EQ(a.value()[0], 0.0);
  EXPECT_NEAR(a.value()[1], 1.0, 1e-5);
}

TEST(NormAct, NonNegativeAndZeroMean) {
  std::mt19937_64 rng(11);
  auto x = random_var({2, 3, 4, 3, 2}, rng, false, -5.0, 7.0);
  auto n = ops::instance_norm(x);
  for (Index s = 0; s < 6; ++s) {
    double m = 0.0;
    for (Index i = 0; i < 24; ++i) m += n.value()[s * 24 + i];
    EXPECT_NEAR(m / 24.0, 0.0, 1e-12);
  }
  auto activated = ops::norm_act(x);
  for (double v : activated.value().data()) EXPECT_GE(v, 0.0);
}

TEST(NormAct, SingleElementSliceFallsBackToActivation) {
  VarD x(Tensor<double>({1, 2, 1, 1, 1}, std::vector<double>{-2.0, 3.0}));
  auto y = ops::norm_act(x);
  EXPECT_EQ(y.value()[0], 0.0);
  EXPECT_EQ(y.value()[1], 3.0);
}

TEST(GradCheck, LinearFunctionIsExact) {
  std::mt19937_64 rng(12);
  auto x = random_var({2, 3, 2}, rng);
  auto r = grad_check([&] { return ops::scale(ops::sum_all(x), 3.0); }, {x});
  EXPECT_TRUE(r.finite);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheck, Conv3d) {
  std::mt19937_64 rng(13);
  auto x = random_var({1, 2, 3, 3, 3}, rng);
  auto w = random_var({2, 2, 3, 3, 3}, rng);
  auto b = random_var({2}, rng);
  auto probe = apaseg::testing::random_tensor({1, 2, 3, 3, 3}, rng);
  auto r = grad_check(
      [&] { return ops::dot(ops::conv3d(x, w, b, {.padding = {1, 1, 1}}), probe); }, {x, w, b});
  EXPECT_TRUE(r.finite);
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst_location;
}

TEST(GradCheck, NormActAwayFromKink) {
  std::mt19937_64 rng(14);
  auto x = random_var({1, 2, 3, 3, 2}, rng);
  auto probe = apaseg::testing::random_tensor({1, 2, 3, 3, 2}, rng);
  // Offsetting the normalized output by +1 keeps the rectifier mostly away
  // from its kink; only slices with values below -1 sigma still hit zero.
  auto r = grad_check(
      [&] {
        auto n = ops::instance_norm(x);
        auto shifted = ops::add(n, VarD(Tensor<double>(n.shape(), 1.0)));
        return ops::dot(ops::relu(shifted), probe);
      },
      {x});
  EXPECT_TRUE(r.finite);
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst_location;
}

TEST(GradCheck, EveryPrimitive) {
  std::mt19937_64 rng(15);
  auto x = random_var({2, 4, 3, 4, 2}, rng);
  auto check = [&](const char* name, const std::function<VarD()>& f,
                   std::vector<VarD> inputs) {
    auto out = f();
    auto r = grad_check(f, std::move(inputs));
    EXPECT_TRUE(r.finite) << name;
    EXPECT_LT(r.max_rel_error, 1e-4) << name << " at " << r.worst_location;
  };
  auto probe_for = [&](const VarD& y) { return apaseg::testing::random_tensor(y.shape(), rng); };

  {
    auto w = random_var({4, 2, 3, 1, 3}, rng);
    auto b = random_var({4}, rng);
    Conv3dOptions opt{.stride = {2, 1, 2}, .padding = {1, 0, 1}, .output_padding = {1, 0, 0},
                      .groups = 2};
    auto p = probe_for(ops::transpose_conv3d(x, w, b, opt));
    check("transpose_conv3d", [&] { return ops::dot(ops::transpose_conv3d(x, w, b, opt), p); },
          {x, w, b});
  }
  {
    auto x4 = random_var({1, 4, 3, 4}, rng);
    auto w = random_var({2, 2, 3, 3}, rng);
    auto b = random_var({2}, rng);
    Conv2dOptions opt{.padding = {1, 1}, .groups = 2};
    auto p = probe_for(ops::conv2d(x4, w, b, opt));
    check("conv2d", [&] { return ops::dot(ops::conv2d(x4, w, b, opt), p); }, {x4, w, b});
    Conv2dOptions topt{.stride = {2, 2}, .padding = {1, 1}, .output_padding = {1, 1}, .groups = 2};
    auto wt = random_var({4, 1, 3, 3}, rng);
    auto p2 = probe_for(ops::transpose_conv2d(x4, wt, b, topt));
    check("transpose_conv2d", [&] { return ops::dot(ops::transpose_conv2d(x4, wt, b, topt), p2); },
          {x4, wt, b});
  }
  for (auto axis : {SpatialAxis::H, SpatialAxis::W, SpatialAxis::D}) {
    for (auto mode : {PoolMode::Mean, PoolMode::Max}) {
      auto p = probe_for(ops::axis_pool(x, axis, mode));
      check("axis_pool", [&] { return ops::dot(ops::axis_pool(x, axis, mode), p); }, {x});
    }
  }
  {
    auto xe = random_var({1, 2, 4, 2, 4}, rng);
    auto p = probe_for(ops::avg_pool3d(xe));
    check("avg_pool3d", [&] { return ops::dot(ops::avg_pool3d(xe), p); }, {xe});
  }
  {
    auto g = random_var({2, 4, 1, 4, 2}, rng);
    auto p = probe_for(x);
    check("mul_broadcast", [&] { return ops::dot(ops::mul_broadcast(x, g), p); }, {x, g});
    check("broadcast_to", [&] { return ops::dot(ops::broadcast_to(g, x.shape()), p); }, {g});
  }
  {
    auto p = probe_for(ops::spatial_mean(x));
    check("spatial_mean", [&] { return ops::dot(ops::spatial_mean(x), p); }, {x});
    auto p2 = probe_for(x);
    check("softmax_channels",
          [&] { return ops::dot(ops::softmax_channels(x, 2), p2); }, {x});
    check("softmax_channels(classes)",
          [&] { return ops::dot(ops::softmax_channels(x, 4), p2); }, {x});
  }
  {
    auto a = random_var({2, 3, 2, 2, 2}, rng);
    auto b = random_var({2, 1, 2, 2, 2}, rng);
    auto p = probe_for(ops::concat_channels(a, b));
    check("concat_channels", [&] { return ops::dot(ops::concat_channels(a, b), p); }, {a, b});
    auto p2 = probe_for(ops::slice_channels(a, 1, 2));
    check("slice_channels", [&] { return ops::dot(ops::slice_channels(a, 1, 2), p2); }, {a});
  }
  {
    auto b0 = random_var({1, 2, 2, 2, 2}, rng);
    auto b1 = random_var({1, 2, 2, 2, 2}, rng);
    auto b2 = random_var({1, 2, 2, 2, 2}, rng);
    auto logits = random_var({3}, rng);
    auto p = probe_for(b0);
    check("softmax_mix",
          [&] { return ops::dot(ops::softmax_mix<double>({b0, b1, b2}, logits), p); },
          {b0, b1, b2, logits});
  }
}

TEST(Kernels, ComposedOpsStayFinite) {
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_var({1, 4, 4, 4, 4}, rng, false, -100.0, 100.0);
    auto w = random_var({4, 4, 3, 3, 3}, rng, false);
    auto y = ops::conv3d(x, w, VarD(), {.padding = {1, 1, 1}});
    y = ops::norm_act(y);
    auto p = ops::axis_pool_keepdim(y, SpatialAxis::W, PoolMode::Max);
    y = ops::mul_broadcast(y, ops::softmax_channels(p, 4));
    y = ops::avg_pool3d(y);
    EXPECT_TRUE(apaseg::testing::all_finite(y.value()));
  }
}
