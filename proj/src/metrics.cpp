#include "apaseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "apaseg/errors.hpp"

namespace apaseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_volume(const LabelVolume& a, const LabelVolume& b, const char* what) {
  require_rank(a.shape(), 3, what);
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()) + " differ");
  }
}

// Squared distance transform of one line (lower envelope of parabolas),
// sample q sits at q * step. Infinite entries carry no parabola.
void squared_dt_line(std::vector<double>& f, double step, std::vector<double>& out,
                     std::vector<Index>& v, std::vector<double>& z) {
  const Index n = static_cast<Index>(f.size());
  Index k = -1;
  for (Index q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    const double xq = static_cast<double>(q) * step;
    while (k >= 0) {
      const double xv = static_cast<double>(v[k]) * step;
      const double s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    if (k == 0) {
      v[0] = q;
      z[0] = -kInf;
    } else {
      const double xv = static_cast<double>(v[k - 1]) * step;
      v[k] = q;
      z[k] = ((f[q] + xq * xq) - (f[v[k - 1]] + xv * xv)) / (2.0 * (xq - xv));
    }
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(out.begin(), out.end(), kInf);
    return;
  }
  Index j = 0;
  for (Index q = 0; q < n; ++q) {
    const double xq = static_cast<double>(q) * step;
    while (z[j + 1] < xq) ++j;
    const double d = xq - static_cast<double>(v[j]) * step;
    out[q] = d * d + f[v[j]];
  }
}

}  // namespace

double dice_score(const LabelVolume& pred, const LabelVolume& gt, int class_id) {
  require_same_volume(pred, gt, "dice_score");
  Index a = 0, b = 0, both = 0;
  for (Index i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i] == class_id, g = gt[i] == class_id;
    a += p;
    b += g;
    both += p && g;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

std::vector<std::array<Index, 3>> boundary_voxels(const LabelVolume& labels, int class_id) {
  require_rank(labels.shape(), 3, "boundary_voxels");
  const Index H = labels.dim(0), W = labels.dim(1), D = labels.dim(2);
  auto inside = [&](Index h, Index w, Index d) { return labels[(h * W + w) * D + d] == class_id; };
  std::vector<std::array<Index, 3>> out;
  for (Index h = 0; h < H; ++h)
    for (Index w = 0; w < W; ++w)
      for (Index d = 0; d < D; ++d) {
        if (!inside(h, w, d)) continue;
        const bool border = h == 0 || w == 0 || d == 0 || h == H - 1 || w == W - 1 || d == D - 1;
        if (border || !inside(h - 1, w, d) || !inside(h + 1, w, d) || !inside(h, w - 1, d) ||
            !inside(h, w + 1, d) || !inside(h, w, d - 1) || !inside(h, w, d + 1)) {
          out.push_back({h, w, d});
        }
      }
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ContractError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

std::vector<double> distance_to_seeds(const std::array<Index, 3>& shape,
                                      const std::vector<std::array<Index, 3>>& seeds,
                                      const Spacing& spacing) {
  const Index H = shape[0], W = shape[1], D = shape[2];
  std::vector<double> g(static_cast<std::size_t>(H * W * D), kInf);
  for (const auto& s : seeds) g[(s[0] * W + s[1]) * D + s[2]] = 0.0;
  if (seeds.empty()) return g;

  const std::array<Index, 3> stride{W * D, D, 1};
  const Index longest = std::max({H, W, D});
  std::vector<double> line, out;
  std::vector<Index> v(longest);
  std::vector<double> z(longest + 1);
  for (int axis = 0; axis < 3; ++axis) {
    const Index n = shape[axis];
    line.resize(n);
    out.resize(n);
    for (Index base = 0; base < H * W * D; ++base) {
      // Visit each line once, from the voxel whose coordinate on `axis` is 0.
      if ((base / stride[axis]) % n != 0) continue;
      for (Index q = 0; q < n; ++q) line[q] = g[base + q * stride[axis]];
      squared_dt_line(line, spacing[axis], out, v, z);
      for (Index q = 0; q < n; ++q) g[base + q * stride[axis]] = out[q];
    }
  }
  for (auto& d : g) d = std::sqrt(d);
  return g;
}

std::optional<double> hd95(const LabelVolume& pred, const LabelVolume& gt, int class_id,
                           const Spacing& spacing) {
  require_same_volume(pred, gt, "hd95");
  const auto a = boundary_voxels(pred, class_id);
  const auto b = boundary_voxels(gt, class_id);
  if (a.empty() || b.empty()) return std::nullopt;
  const std::array<Index, 3> shape{pred.dim(0), pred.dim(1), pred.dim(2)};
  auto directed = [&](const std::vector<std::array<Index, 3>>& from,
                      const std::vector<std::array<Index, 3>>& to) {
    const auto dist = distance_to_seeds(shape, to, spacing);
    std::vector<double> d;
    d.reserve(from.size());
    for (const auto& p : from) d.push_back(dist[(p[0] * shape[1] + p[1]) * shape[2] + p[2]]);
    return percentile(std::move(d), 95.0);
  };
  return std::max(directed(a, b), directed(b, a));
}

std::size_t SizeBins::bin_of(double fraction) const {
  if (edges.size() != labels.size() + 1 || edges.size() < 2) {
    throw ConfigError("size bins need one more edge than labels");
  }
  if (!(fraction >= edges.front() && fraction <= edges.back())) {
    throw ContractError("target fraction " + std::to_string(fraction) + " outside bin range");
  }
  for (std::size_t i = 0; i + 1 < labels.size(); ++i) {
    if (fraction < edges[i + 1]) return i;
  }
  return labels.size() - 1;
}

std::vector<MetricsRow> case_metrics(const std::string& case_id, const LabelVolume& pred,
                                     const LabelVolume& gt, int num_classes,
                                     const Spacing& spacing, const SizeBins& bins) {
  require_same_volume(pred, gt, "case_metrics");
  std::vector<MetricsRow> rows;
  for (int k = 1; k < num_classes; ++k) {
    MetricsRow r;
    r.case_id = case_id;
    r.class_id = k;
    r.dsc = dice_score(pred, gt, k);
    r.hd95 = hd95(pred, gt, k, spacing);
    const auto count = std::count(gt.data().begin(), gt.data().end(), k);
    r.target_fraction = static_cast<double>(count) / static_cast<double>(gt.numel());
    r.size_bin = bins.label_of(r.target_fraction);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<BinSummary> size_report(const std::vector<MetricsRow>& rows, const SizeBins& bins) {
  std::map<std::pair<int, std::size_t>, std::pair<double, std::size_t>> acc;
  for (const auto& r : rows) {
    auto& [sum, n] = acc[{r.class_id, bins.bin_of(r.target_fraction)}];
    sum += r.dsc;
    ++n;
  }
  std::vector<BinSummary> out;
  for (const auto& [key, value] : acc) {
    out.push_back({key.first, bins.labels[key.second], value.first / static_cast<double>(value.second),
                   value.second});
  }
  return out;
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  os << "case_id,class,dsc,hd95,target_fraction,size_bin\n";
  const auto old_precision = os.precision(10);
  for (const auto& r : rows) {
    os << r.case_id << ',' << r.class_id << ',' << r.dsc << ',';
    if (r.hd95) {
      os << *r.hd95;
    } else {
      os << "undefined";
    }
    os << ',' << r.target_fraction << ',' << r.size_bin << '\n';
  }
  os.precision(old_precision);
}

nlohmann::json metrics_summary(const std::vector<MetricsRow>& rows, const SizeBins& bins) {
  struct Acc {
    double dsc = 0.0, hd = 0.0;
    std::size_t n = 0, hd_n = 0;
  };
  std::map<int, Acc> per_class;
  for (const auto& r : rows) {
    auto& a = per_class[r.class_id];
    a.dsc += r.dsc;
    ++a.n;
    if (r.hd95) {
      a.hd += *r.hd95;
      ++a.hd_n;
    }
  }
  nlohmann::json classes = nlohmann::json::object();
  for (const auto& [k, a] : per_class) {
    classes[std::to_string(k)] = {
        {"mean_dsc", a.dsc / static_cast<double>(a.n)},
        {"mean_hd95", a.hd_n ? nlohmann::json(a.hd / static_cast<double>(a.hd_n)) : nlohmann::json()},
        {"cases", a.n},
        {"hd95_undefined", a.n - a.hd_n}};
  }
  nlohmann::json by_size = nlohmann::json::array();
  for (const auto& s : size_report(rows, bins)) {
    by_size.push_back({{"class", s.class_id}, {"bin", s.bin}, {"mean_dsc", s.mean_dsc}, {"cases", s.cases}});
  }
  return {{"classes", classes}, {"size_bins", bins.labels}, {"by_size", by_size}};
}

}  // namespace apaseg
