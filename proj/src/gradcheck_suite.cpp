#include "apaseg/gradcheck_suite.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "apaseg/apa_blocks.hpp"
#include "apaseg/losses.hpp"
#include "apaseg/ops.hpp"

namespace apaseg {

namespace {

using VarD = Var<double>;
using Clock = std::chrono::steady_clock;

class Suite {
 public:
  Suite(double tol, const std::function<void(const GradCheckCase&)>& cb) : cb_(cb) {
    report_.tolerance = tol;
  }

  Tensor<double> tensor(const Shape& s, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<double> t(s);
    for (auto& v : t.data()) v = u(rng_);
    return t;
  }
  VarD var(const Shape& s, double lo = -1.0, double hi = 1.0) { return VarD(tensor(s, lo, hi), true); }

  /// Checks <f(inputs), probe> for a random probe shaped like f's output.
  void check(const std::string& name, const std::function<VarD()>& f, std::vector<VarD> inputs) {
    Tensor<double> probe;
    {
      NoGradGuard no_grad;
      probe = tensor(f().shape());
    }
    check_scalar(name, [&] { return ops::dot(f(), probe); }, std::move(inputs));
  }

  void check_scalar(const std::string& name, const std::function<VarD()>& f, std::vector<VarD> inputs) {
    const auto t0 = Clock::now();
    GradCheckCase c{name, grad_check(f, std::move(inputs)), 0.0};
    c.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    if (cb_) cb_(c);
    report_.cases.push_back(std::move(c));
  }

  std::mt19937_64& rng() { return rng_; }
  GradCheckReport take() { return std::move(report_); }

 private:
  std::mt19937_64 rng_{20240601};
  const std::function<void(const GradCheckCase&)>& cb_;
  GradCheckReport report_;
};

std::vector<VarD> vars_of(const ParamList<double>& params) {
  std::vector<VarD> out;
  for (const auto& p : params) out.push_back(p.var);
  return out;
}

template <typename P>
std::vector<VarD> block_inputs(const P& p, std::initializer_list<VarD> extra) {
  ParamList<double> params;
  p.collect("", params);
  auto v = vars_of(params);
  v.insert(v.end(), extra.begin(), extra.end());
  return v;
}

const char* pool_name(PoolMode m) { return m == PoolMode::Mean ? "mean" : "max"; }
const char* axis_letter(SpatialAxis a) { return a == SpatialAxis::H ? "H" : a == SpatialAxis::W ? "W" : "D"; }

// Input whose instance-normalised values all stay at least `margin` away
// from zero, so the rectifier kink is never inside a finite-difference step.
Tensor<double> kink_free_input(Suite& s, const Shape& shape, double margin) {
  for (;;) {
    Tensor<double> t = s.tensor(shape);
    NoGradGuard no_grad;
    const VarD n = ops::instance_norm(VarD(t, false));
    bool ok = true;
    for (double v : n.value().data()) ok = ok && std::abs(v) > margin;
    if (ok) return t;
  }
}

void kernel_cases(Suite& s) {
  const auto x = s.var({2, 4, 3, 4, 2});
  {
    auto w = s.var({4, 2, 3, 3, 3}), b = s.var({4});
    const Conv3dOptions opt{.stride = {1, 2, 1}, .padding = {1, 1, 1}, .groups = 2};
    s.check("conv3d", [&] { return ops::conv3d(x, w, b, opt); }, {x, w, b});
    auto wt = s.var({4, 2, 3, 1, 3}), bt = s.var({4});
    const Conv3dOptions topt{.stride = {2, 1, 2}, .padding = {1, 0, 1}, .output_padding = {1, 0, 0}, .groups = 2};
    s.check("transpose_conv3d", [&] { return ops::transpose_conv3d(x, wt, bt, topt); }, {x, wt, bt});
  }
  {
    auto x4 = s.var({1, 4, 3, 4}), w = s.var({2, 2, 3, 3}), b = s.var({2});
    const Conv2dOptions opt{.padding = {1, 1}, .groups = 2};
    s.check("conv2d", [&] { return ops::conv2d(x4, w, b, opt); }, {x4, w, b});
    auto wt = s.var({4, 1, 3, 3});
    const Conv2dOptions topt{.stride = {2, 2}, .padding = {1, 1}, .output_padding = {1, 1}, .groups = 2};
    s.check("transpose_conv2d", [&] { return ops::transpose_conv2d(x4, wt, b, topt); }, {x4, wt, b});
  }
  for (auto axis : {SpatialAxis::H, SpatialAxis::W, SpatialAxis::D}) {
    for (auto mode : {PoolMode::Mean, PoolMode::Max}) {
      const std::string tag = std::string("(") + axis_letter(axis) + "," + pool_name(mode) + ")";
      s.check("axis_pool" + tag, [&] { return ops::axis_pool(x, axis, mode); }, {x});
      s.check("axis_pool_keepdim" + tag, [&] { return ops::axis_pool_keepdim(x, axis, mode); }, {x});
    }
  }
  {
    auto xe = s.var({1, 2, 4, 2, 4});
    s.check("avg_pool3d", [&] { return ops::avg_pool3d(xe); }, {xe});
  }
  s.check("spatial_mean", [&] { return ops::spatial_mean(x); }, {x});
  s.check("instance_norm", [&] { return ops::instance_norm(x); }, {x});
  {
    auto away = VarD(s.tensor({2, 4, 3, 4, 2}, 0.05, 1.0), true);
    std::uniform_int_distribution<int> coin(0, 1);
    for (auto& v : away.mutable_value().data()) v = coin(s.rng()) ? v : -v;
    s.check("relu", [&] { return ops::relu(away); }, {away});
    auto n = VarD(kink_free_input(s, {1, 2, 3, 3, 2}, 0.05), true);
    s.check("norm_act", [&] { return ops::norm_act(n); }, {n});
  }
  {
    auto y = s.var({2, 4, 3, 4, 2});
    s.check("add", [&] { return ops::add(x, y); }, {x, y});
    s.check("scale", [&] { return ops::scale(x, 0.75); }, {x});
    auto g = s.var({2, 4, 1, 4, 2});
    s.check("mul_broadcast", [&] { return ops::mul_broadcast(x, g); }, {x, g});
    s.check("broadcast_to", [&] { return ops::broadcast_to(g, x.shape()); }, {g});
  }
  {
    auto a = s.var({2, 3, 2, 2, 2}), b = s.var({2, 1, 2, 2, 2});
    s.check("concat_channels", [&] { return ops::concat_channels(a, b); }, {a, b});
    s.check("slice_channels", [&] { return ops::slice_channels(a, 1, 2); }, {a});
    s.check("reshape", [&] { return ops::reshape(a, {2, 3, 4, 2}); }, {a});
  }
  s.check("softmax_channels(grouped)", [&] { return ops::softmax_channels(x, 2); }, {x});
  s.check("softmax_channels(classes)", [&] { return ops::softmax_channels(x, 4); }, {x});
  {
    auto b0 = s.var({1, 2, 2, 2, 2}), b1 = s.var({1, 2, 2, 2, 2}), b2 = s.var({1, 2, 2, 2, 2});
    auto logits = s.var({3});
    s.check("softmax_mix", [&] { return ops::softmax_mix<double>({b0, b1, b2}, logits); },
            {b0, b1, b2, logits});
  }
  s.check_scalar("sum_all", [&] { return ops::sum_all(x); }, {x});
}

void block_cases(Suite& s) {
  const Index C = 4;
  const auto x = s.var({1, C, 3, 4, 2});
  for (AxisId axis : kAllAxes) {
    const Index extent = x.shape()[tensor_dim(spatial_axis(axis))];
    for (auto op : {ProjectionOp::AvgPlusMax, ProjectionOp::Avg, ProjectionOp::Max, ProjectionOp::DepthwiseConv}) {
      const std::string tag = std::string(to_string(op)) + "/" + std::string(axis_name(axis));
      if (op == ProjectionOp::DepthwiseConv) {
        auto kernel = s.var({C, 1, extent});
        s.check("project(" + tag + ")", [&] { return project(x, axis, op, kernel); }, {x, kernel});
      } else {
        s.check("project(" + tag + ")", [&] { return project(x, axis, op); }, {x});
      }
    }
  }
  {
    UniformInit init(3);
    const auto sk = SKFusionParams<double>::init(C, init);
    auto h = s.var({1, C, 3, 3, 2});
    auto xs = s.var({1, C, 3, 3, 2});
    ParamList<double> params;
    sk.collect("", params);
    auto inputs = vars_of(params);
    inputs.push_back(h);
    inputs.push_back(xs);
    s.check("sk_fuse", [&] { return sk_fuse(h, xs, sk); }, inputs);
  }

  const auto cube = s.var({1, C, 3, 3, 3});
  for (auto variant : {BlockVariant::APA, BlockVariant::CoT2D, BlockVariant::CoT3D}) {
    for (auto op : {ProjectionOp::AvgPlusMax, ProjectionOp::Avg, ProjectionOp::Max, ProjectionOp::DepthwiseConv}) {
      if (variant == BlockVariant::CoT3D && op != ProjectionOp::AvgPlusMax) continue;  // no projection
      for (AxisId axis : kAllAxes) {
        UniformInit init(7);
        const auto p = IEBlockParams<double>::init(C, variant, op, 3, init);
        const std::string name = "encoder_block(" + std::string(to_string(variant)) + "/" +
                                 std::string(to_string(op)) + "/" + std::string(axis_name(axis)) + ")";
        s.check(name, [&] { return cot_variant_block(cube, axis, p); }, block_inputs(p, {cube}));
      }
    }
  }

  const auto low = s.var({1, 2 * C, 2, 2, 2});
  const auto high = s.var({1, C, 4, 4, 4});
  for (auto variant : {BlockVariant::APA, BlockVariant::CoT2D, BlockVariant::CoT3D}) {
    for (auto op : {ProjectionOp::AvgPlusMax, ProjectionOp::Avg, ProjectionOp::Max, ProjectionOp::DepthwiseConv}) {
      if (variant == BlockVariant::CoT3D && op != ProjectionOp::AvgPlusMax) continue;
      for (AxisId axis : kAllAxes) {
        UniformInit init(9);
        const auto p = IDBlockParams<double>::init(C, variant, op, 4, init);
        const std::string name = "decoder_block(" + std::string(to_string(variant)) + "/" +
                                 std::string(to_string(op)) + "/" + std::string(axis_name(axis)) + ")";
        s.check(name, [&] { return id_block(low, high, axis, p); }, block_inputs(p, {low, high}));
      }
    }
  }

  {
    auto fw = FusionWeights<double>::init(true);
    fw.logits.mutable_value() = s.tensor({3});
    auto a = s.var({1, 2, 2, 2, 2}), b = s.var({1, 2, 2, 2, 2}), c = s.var({1, 2, 2, 2, 2});
    s.check("fuse_axes", [&] { return fuse_axes<double>({a, b, c}, fw); }, {a, b, c, fw.logits});
  }
}

void loss_cases(Suite& s) {
  const auto logits = s.var({2, 3, 3, 2, 2}, -2.0, 2.0);
  Tensor<std::uint8_t> labels({2, 3, 2, 2});
  std::uniform_int_distribution<int> k(0, 2);
  for (auto& v : labels.data()) v = static_cast<std::uint8_t>(k(s.rng()));
  const auto onehot = one_hot<double>(labels, 3);
  s.check("class_probabilities", [&] { return class_probabilities(logits); }, {logits});
  s.check_scalar("dice_loss", [&] { return dice_loss(class_probabilities(logits), onehot); }, {logits});
  s.check_scalar("dice_loss(with background)",
                 [&] { return dice_loss(class_probabilities(logits), onehot, {true, kDiceEps}); }, {logits});
  s.check_scalar("ce_loss", [&] { return ce_loss(class_probabilities(logits), onehot); }, {logits});
  s.check_scalar("total_loss", [&] { return total_loss(class_probabilities(logits), onehot); }, {logits});
}

}  // namespace

bool GradCheckReport::passed() const { return failures() == 0 && !cases.empty(); }

std::size_t GradCheckReport::failures() const {
  std::size_t n = 0;
  for (const auto& c : cases) n += c.result.passed(tolerance) ? 0 : 1;
  return n;
}

GradCheckReport run_gradcheck_suite(double tolerance,
                                    const std::function<void(const GradCheckCase&)>& on_case) {
  const auto t0 = Clock::now();
  Suite s(tolerance, on_case);
  kernel_cases(s);
  block_cases(s);
  loss_cases(s);
  GradCheckReport r = s.take();
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return r;
}

std::string format_case(const GradCheckCase& c, double tolerance) {
  std::ostringstream os;
  os << (c.result.passed(tolerance) ? "PASS " : "FAIL ") << std::left << std::setw(48) << c.name
     << " max_rel_err=" << std::scientific << std::setprecision(3) << c.result.max_rel_error
     << " n=" << c.result.elements_checked;
  if (!c.result.finite) os << " (non-finite)";
  if (!c.result.passed(tolerance)) os << " worst=" << c.result.worst_location;
  return os.str();
}

}  // namespace apaseg
