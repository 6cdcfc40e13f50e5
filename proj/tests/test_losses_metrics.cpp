#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "apaseg/errors.hpp"
#include "apaseg/gradcheck.hpp"
#include "apaseg/losses.hpp"
#include "apaseg/metrics.hpp"
#include "apaseg/ops.hpp"
#include "test_util.hpp"

using namespace apaseg;
using apaseg::testing::random_tensor;
using apaseg::testing::random_var;

namespace {

using Point = std::array<Index, 3>;

LabelVolume random_mask(std::mt19937_64& rng, Index n, double density, int classes = 2) {
  std::bernoulli_distribution fg(density);
  std::uniform_int_distribution<int> cls(1, classes - 1);
  LabelVolume m({n, n, n}, 0);
  for (auto& v : m.data()) v = fg(rng) ? static_cast<std::uint8_t>(cls(rng)) : 0;
  return m;
}

// Boundary by definition: in-class voxel with an out-of-class or missing face neighbour.
std::vector<Point> boundary_oracle(const LabelVolume& m, int k) {
  const Index H = m.dim(0), W = m.dim(1), D = m.dim(2);
  auto at = [&](Index h, Index w, Index d) -> bool {
    if (h < 0 || w < 0 || d < 0 || h >= H || w >= W || d >= D) return false;
    return m[(h * W + w) * D + d] == k;
  };
  std::vector<Point> out;
  const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (Index h = 0; h < H; ++h)
    for (Index w = 0; w < W; ++w)
      for (Index d = 0; d < D; ++d) {
        if (!at(h, w, d)) continue;
        bool edge = false;
        for (const auto& o : off) edge = edge || !at(h + o[0], w + o[1], d + o[2]);
        if (edge) out.push_back({h, w, d});
      }
  return out;
}

double p95_oracle(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double rank = 0.95 * static_cast<double>(v.size() - 1);
  const std::size_t i = static_cast<std::size_t>(rank);
  if (i + 1 >= v.size()) return v.back();
  return v[i] + (rank - static_cast<double>(i)) * (v[i + 1] - v[i]);
}

double hd95_all_pairs(const LabelVolume& a, const LabelVolume& b, int k, const Spacing& s) {
  const auto ba = boundary_oracle(a, k), bb = boundary_oracle(b, k);
  auto directed = [&](const std::vector<Point>& from, const std::vector<Point>& to) {
    std::vector<double> d;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        double s2 = 0.0;
        for (int i = 0; i < 3; ++i) {
          const double diff = static_cast<double>(p[i] - q[i]) * s[i];
          s2 += diff * diff;
        }
        best = std::min(best, std::sqrt(s2));
      }
      d.push_back(best);
    }
    return p95_oracle(d);
  };
  return std::max(directed(ba, bb), directed(bb, ba));
}

Tensor<double> hard_probs(const Tensor<double>& onehot) { return onehot; }

}  // namespace

// ---- losses ------------------------------------------------------------------

TEST(OneHot, EncodesAndRejectsOutOfRange) {
  LabelVolume labels({2, 1, 1}, std::vector<std::uint8_t>{0, 2});
  auto oh = one_hot<double>(labels, 3);
  EXPECT_EQ(oh.shape(), (Shape{1, 3, 2, 1, 1}));
  EXPECT_EQ(oh[0], 1.0);
  EXPECT_EQ(oh[5], 1.0);
  EXPECT_EQ(std::accumulate(oh.data().begin(), oh.data().end(), 0.0), 2.0);
  EXPECT_THROW(one_hot<double>(labels, 2), ContractError);
}

TEST(DiceLoss, PerfectPredictionIsNearZero) {
  std::mt19937_64 rng(1);
  auto labels = random_mask(rng, 4, 0.4, 3);
  auto oh = one_hot<double>(labels, 3);
  EXPECT_LE(dice_loss(Var<double>(hard_probs(oh)), oh).value()[0], 1e-4);
}

TEST(DiceLoss, HalfOverlapSingleClass) {
  // Four voxels: prediction covers {0,1}, target covers {1,2}.
  Tensor<double> pred({1, 1, 4, 1, 1}, std::vector<double>{1, 1, 0, 0});
  Tensor<double> target({1, 1, 4, 1, 1}, std::vector<double>{0, 1, 1, 0});
  DiceOptions opt;
  opt.include_background = true;
  EXPECT_NEAR(dice_loss(Var<double>(pred), target, opt).value()[0], 0.5, 1e-6);
}

TEST(DiceLoss, DisjointMasksGiveOne) {
  Tensor<double> pred({1, 1, 4, 1, 1}, std::vector<double>{1, 1, 0, 0});
  Tensor<double> target({1, 1, 4, 1, 1}, std::vector<double>{0, 0, 1, 1});
  DiceOptions opt;
  opt.include_background = true;
  EXPECT_NEAR(dice_loss(Var<double>(pred), target, opt).value()[0], 1.0, 1e-12);
}

TEST(DiceLoss, ForegroundOnlyByDefault) {
  // Background perfect, foreground disjoint: default loss 1, with background 0.5.
  Tensor<double> pred({1, 2, 2, 1, 1}, std::vector<double>{1, 0, 0, 1});
  Tensor<double> target({1, 2, 2, 1, 1}, std::vector<double>{1, 0, 1, 0});
  pred = Tensor<double>({1, 2, 3, 1, 1}, std::vector<double>{1, 0, 0, 0, 1, 0});
  target = Tensor<double>({1, 2, 3, 1, 1}, std::vector<double>{1, 0, 0, 0, 0, 1});
  EXPECT_NEAR(dice_loss(Var<double>(pred), target).value()[0], 1.0, 1e-9);
  DiceOptions all;
  all.include_background = true;
  const double bg = 2.0 * 1.0 / (1.0 + 1.0 + kDiceEps);
  EXPECT_NEAR(dice_loss(Var<double>(pred), target, all).value()[0], 1.0 - bg / 2.0, 1e-12);
}

TEST(DiceLoss, PermutationInvariant) {
  std::mt19937_64 rng(2);
  auto probs = random_tensor({1, 2, 4, 4, 4}, rng, 0.0, 1.0);
  auto target = one_hot<double>(random_mask(rng, 4, 0.3), 2);
  std::vector<Index> perm(64);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto p2 = probs, t2 = target;
  for (Index c = 0; c < 2; ++c)
    for (Index v = 0; v < 64; ++v) {
      p2[c * 64 + v] = probs[c * 64 + perm[v]];
      t2[c * 64 + v] = target[c * 64 + perm[v]];
    }
  EXPECT_NEAR(dice_loss(Var<double>(probs), target).value()[0],
              dice_loss(Var<double>(p2), t2).value()[0], 1e-12);
}

TEST(DiceLoss, HardPredictionMatchesDiceScore) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_mask(rng, 6, 0.3), b = random_mask(rng, 6, 0.3);
    DiceOptions opt;
    opt.eps = 0.0;
    const double loss = dice_loss(Var<double>(one_hot<double>(a, 2)), one_hot<double>(b, 2), opt).value()[0];
    EXPECT_NEAR(1.0 - loss, dice_score(a, b, 1), 1e-4);
  }
}

TEST(DiceLoss, ShapeMismatchThrows) {
  EXPECT_THROW(dice_loss(Var<double>(Tensor<double>({1, 2, 2, 2, 2}, 0.5)),
                         Tensor<double>({1, 2, 2, 2, 1}, 0.0)),
               ContractError);
  EXPECT_THROW(ce_loss(Var<double>(Tensor<double>({1, 2, 2, 2, 2}, 0.5)),
                       Tensor<double>({1, 3, 2, 2, 2}, 0.0)),
               ContractError);
}

TEST(CELoss, AnalyticValues) {
  // Perfect.
  auto oh = one_hot<double>(LabelVolume({2, 1, 1}, std::vector<std::uint8_t>{0, 1}), 2);
  EXPECT_LE(ce_loss(Var<double>(oh), oh).value()[0], 1e-6);
  // Uniform over C classes.
  for (Index C : {2, 3, 5}) {
    LabelVolume labels({3, 2, 1}, std::vector<std::uint8_t>{0, 1, 1, 0, 1, 0});
    auto t = one_hot<double>(labels, C);
    auto u = Tensor<double>(t.shape(), 1.0 / static_cast<double>(C));
    EXPECT_NEAR(ce_loss(Var<double>(u), t).value()[0], std::log(static_cast<double>(C)), 1e-9);
  }
  // Two voxels with 0.8 and 0.2 on their true classes.
  Tensor<double> p({1, 2, 2, 1, 1}, std::vector<double>{0.8, 0.8, 0.2, 0.2});
  Tensor<double> y({1, 2, 2, 1, 1}, std::vector<double>{1, 0, 0, 1});
  EXPECT_NEAR(ce_loss(Var<double>(p), y).value()[0], -(std::log(0.8) + std::log(0.2)) / 2.0, 1e-12);
}

TEST(CELoss, NonNegativeAndClamped) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto logits = random_var({1, 3, 3, 3, 3}, rng, false, -5.0, 5.0);
    auto probs = class_probabilities(logits);
    auto t = one_hot<double>(random_mask(rng, 3, 0.5, 3), 3);
    EXPECT_GE(ce_loss(probs, t).value()[0], 0.0);
  }
  Tensor<double> zero({1, 2, 1, 1, 1}, std::vector<double>{0.0, 1.0});
  Tensor<double> y({1, 2, 1, 1, 1}, std::vector<double>{1.0, 0.0});
  EXPECT_NEAR(ce_loss(Var<double>(zero), y).value()[0], -std::log(kProbFloor), 1e-9);
}

TEST(TotalLoss, SumOfComponentsAndPerfectPrediction) {
  std::mt19937_64 rng(5);
  auto probs = class_probabilities(random_var({2, 3, 2, 2, 2}, rng, false));
  auto t = one_hot<double>(LabelVolume({2, 2, 2, 2}, std::vector<std::uint8_t>(16, 1)), 3);
  const double total = total_loss(probs, t).value()[0];
  EXPECT_EQ(total, dice_loss(probs, t).value()[0] + ce_loss(probs, t).value()[0]);
  auto perfect = one_hot<double>(random_mask(rng, 4, 0.4, 3), 3);
  EXPECT_LE(total_loss(Var<double>(perfect), perfect).value()[0], 1e-4);
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  for (bool background : {false, true}) {
    auto logits = random_var({1, 3, 2, 2, 2}, rng, true, -2.0, 2.0);
    auto t = one_hot<double>(random_mask(rng, 2, 0.5, 3), 3);
    DiceOptions opt;
    opt.include_background = background;
    auto r = grad_check([&] { return total_loss(class_probabilities(logits), t, opt); }, {logits});
    EXPECT_TRUE(r.finite);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_location;
  }
}

TEST(ClassProbabilities, SumToOne) {
  std::mt19937_64 rng(7);
  auto p = class_probabilities(random_var({2, 4, 2, 3, 2}, rng, false, -10, 10));
  for (Index n = 0; n < 2; ++n)
    for (Index v = 0; v < 12; ++v) {
      double s = 0.0;
      for (Index k = 0; k < 4; ++k) {
        const double x = p.value()[(n * 4 + k) * 12 + v];
        EXPECT_GE(x, 0.0);
        EXPECT_LE(x, 1.0);
        s += x;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

// ---- metrics -----------------------------------------------------------------

TEST(DiceScore, ConventionsAndCountingOracle) {
  LabelVolume empty({4, 4, 4}, 0);
  LabelVolume full({4, 4, 4}, 1);
  EXPECT_EQ(dice_score(empty, empty, 1), 1.0);
  EXPECT_EQ(dice_score(full, empty, 1), 0.0);
  EXPECT_EQ(dice_score(full, full, 1), 1.0);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = random_mask(rng, 8, 0.2), b = random_mask(rng, 8, 0.2);
    int na = 0, nb = 0, both = 0;
    for (Index i = 0; i < 512; ++i) {
      na += a[i] == 1;
      nb += b[i] == 1;
      both += a[i] == 1 && b[i] == 1;
    }
    EXPECT_EQ(dice_score(a, b, 1), 2.0 * both / (na + nb));
    EXPECT_EQ(dice_score(a, b, 1), dice_score(b, a, 1));
  }
  EXPECT_THROW(dice_score(empty, LabelVolume({4, 4, 3}, 0), 1), ContractError);
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_EQ(percentile({3.0}, 95.0), 3.0);
  EXPECT_NEAR(percentile({0.0, 10.0}, 95.0), 9.5, 1e-12);
  EXPECT_NEAR(percentile({4.0, 1.0, 2.0, 3.0, 0.0}, 50.0), 2.0, 1e-12);
  EXPECT_NEAR(percentile({0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 95.0), 9.5, 1e-12);
  EXPECT_THROW(percentile({}, 50.0), ContractError);
}

TEST(DistanceTransform, MatchesBruteForceWithSpacing) {
  std::mt19937_64 rng(9);
  const Spacing s{0.7, 1.3, 2.1};
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Point> seeds;
    std::uniform_int_distribution<Index> coord(0, 5);
    for (int i = 0; i < 1 + trial; ++i) seeds.push_back({coord(rng), coord(rng), coord(rng)});
    const auto d = distance_to_seeds({6, 6, 6}, seeds, s);
    for (Index h = 0; h < 6; ++h)
      for (Index w = 0; w < 6; ++w)
        for (Index z = 0; z < 6; ++z) {
          double best = 1e300;
          for (const auto& p : seeds) {
            const double a = (h - p[0]) * s[0], b = (w - p[1]) * s[1], c = (z - p[2]) * s[2];
            best = std::min(best, std::sqrt(a * a + b * b + c * c));
          }
          EXPECT_NEAR(d[(h * 6 + w) * 6 + z], best, 1e-9);
        }
  }
}

TEST(Boundary, SolidCubeInteriorExcluded) {
  LabelVolume m({6, 6, 6}, 0);
  for (Index h = 1; h < 5; ++h)
    for (Index w = 1; w < 5; ++w)
      for (Index d = 1; d < 5; ++d) m[(h * 6 + w) * 6 + d] = 1;
  EXPECT_EQ(boundary_voxels(m, 1).size(), 64u - 8u);
  LabelVolume full({3, 3, 3}, 1);
  EXPECT_EQ(boundary_voxels(full, 1).size(), 26u);
}

TEST(HD95, AnalyticCases) {
  LabelVolume a({10, 10, 10}, 0), b({10, 10, 10}, 0);
  a[(1 * 10 + 1) * 10 + 1] = 1;
  b[(4 * 10 + 5) * 10 + 1] = 1;
  ASSERT_TRUE(hd95(a, b, 1).has_value());
  EXPECT_NEAR(*hd95(a, b, 1), 5.0, 1e-12);
  EXPECT_EQ(*hd95(a, a, 1), 0.0);
  EXPECT_NEAR(*hd95(a, b, 1, {2.0, 1.0, 1.0}), std::sqrt(36.0 + 16.0), 1e-12);
  LabelVolume empty({10, 10, 10}, 0);
  EXPECT_FALSE(hd95(a, empty, 1).has_value());
  EXPECT_FALSE(hd95(empty, a, 1).has_value());
}

TEST(HD95, MatchesAllPairsOracleOnRandomMasks) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 40; ++trial) {
    auto a = random_mask(rng, 8, 0.15 + 0.01 * (trial % 10));
    auto b = random_mask(rng, 8, 0.15);
    const Spacing s = trial % 2 ? Spacing{1.0, 1.0, 1.0} : Spacing{0.8, 1.0, 2.5};
    auto got = hd95(a, b, 1, s);
    ASSERT_TRUE(got.has_value());
    EXPECT_NEAR(*got, hd95_all_pairs(a, b, 1, s), 1e-9);
    EXPECT_EQ(*got, *hd95(b, a, 1, s));
  }
}

TEST(SizeBins, DefaultEdges) {
  SizeBins bins;
  EXPECT_EQ(bins.label_of(0.0), "0-0.1%");
  EXPECT_EQ(bins.label_of(0.0005), "0-0.1%");
  EXPECT_EQ(bins.label_of(0.001), "0.1-0.3%");
  EXPECT_EQ(bins.label_of(0.0029), "0.1-0.3%");
  EXPECT_EQ(bins.label_of(0.004), "0.3-0.6%");
  EXPECT_EQ(bins.label_of(0.006), ">0.6%");
  EXPECT_EQ(bins.label_of(1.0), ">0.6%");
  EXPECT_THROW(bins.bin_of(-0.1), ContractError);
}

TEST(SizeReport, MeansPerBinAndEmptyInput) {
  EXPECT_TRUE(size_report({}).empty());
  std::vector<MetricsRow> rows(3);
  rows[0] = {"a", 1, 0.4, 1.0, 0.002, "0.1-0.3%"};
  rows[1] = {"b", 1, 0.6, 2.0, 0.0025, "0.1-0.3%"};
  rows[2] = {"c", 1, 0.9, 3.0, 0.0005, "0-0.1%"};
  const auto rep = size_report(rows);
  ASSERT_EQ(rep.size(), 2u);
  EXPECT_EQ(rep[0].bin, "0-0.1%");
  EXPECT_EQ(rep[1].bin, "0.1-0.3%");
  EXPECT_NEAR(rep[1].mean_dsc, 0.5, 1e-15);
  EXPECT_EQ(rep[1].cases, 2u);
}

TEST(CaseMetrics, RowsCsvAndSummary) {
  LabelVolume gt({10, 10, 10}, 0);
  gt[0] = 1;
  for (Index i = 100; i < 104; ++i) gt[i] = 2;
  LabelVolume pred = gt;
  auto rows = case_metrics("case_0", pred, gt, 3, {1, 1, 1});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].class_id, 1);
  EXPECT_EQ(rows[0].dsc, 1.0);
  EXPECT_EQ(*rows[0].hd95, 0.0);
  EXPECT_NEAR(rows[0].target_fraction, 0.001, 1e-15);
  EXPECT_EQ(rows[0].size_bin, "0.1-0.3%");
  EXPECT_NEAR(rows[1].target_fraction, 0.004, 1e-15);
  EXPECT_EQ(rows[1].size_bin, "0.3-0.6%");

  LabelVolume none({10, 10, 10}, 0);
  auto missed = case_metrics("case_1", none, gt, 3, {1, 1, 1});
  EXPECT_EQ(missed[0].dsc, 0.0);
  EXPECT_FALSE(missed[0].hd95.has_value());
  rows.insert(rows.end(), missed.begin(), missed.end());

  std::ostringstream csv;
  write_metrics_csv(csv, rows);
  const auto text = csv.str();
  EXPECT_EQ(text.rfind("case_id,class,dsc,hd95,target_fraction,size_bin\n", 0), 0u);
  EXPECT_NE(text.find("case_1,1,0,undefined,0.001,0.1-0.3%"), std::string::npos);

  const auto summary = metrics_summary(rows);
  EXPECT_NEAR(summary["classes"]["1"]["mean_dsc"].get<double>(), 0.5, 1e-15);
  EXPECT_EQ(summary["classes"]["1"]["hd95_undefined"].get<int>(), 1);
  EXPECT_EQ(summary["size_bins"].size(), 4u);
}
