#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "apaseg/errors.hpp"
#include "apaseg/volume.hpp"
#include "test_util.hpp"

using namespace apaseg;
using apaseg::testing::TempDir;

namespace {

VolumeRecord random_record(std::mt19937_64& rng, Extent3 s) {
  VolumeRecord r;
  const Shape shape{s[0], s[1], s[2]};
  r.image = Tensor<float>(shape, 0.0f);
  r.label = LabelVolume(shape, 0);
  std::normal_distribution<float> g(0.0f, 3.0f);
  std::uniform_int_distribution<int> k(0, 2);
  for (auto& v : r.image.data()) v = g(rng);
  for (auto& v : r.label.data()) v = static_cast<std::uint8_t>(k(rng));
  r.spacing = {0.5, 1.25, 3.0};
  r.case_id = "rand";
  r.meta = {{"note", "x"}};
  return r;
}

Index count_label(const LabelVolume& l, int k) {
  return std::count(l.data().begin(), l.data().end(), static_cast<std::uint8_t>(k));
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Sparse dataset: one small foreground cube per case in a large volume.
std::vector<VolumeRecord> sparse_dataset(int cases) {
  std::vector<VolumeRecord> out;
  for (int c = 0; c < cases; ++c) {
    VolumeRecord r;
    r.image = Tensor<float>({40, 40, 40}, 1.0f);
    r.label = LabelVolume({40, 40, 40}, 0);
    const Index base = 3 + 10 * c;
    for (Index h = base; h < base + 2; ++h)
      for (Index w = 30; w < 32; ++w)
        for (Index d = 5; d < 7; ++d) r.label[(h * 40 + w) * 40 + d] = 2;
    r.case_id = "s" + std::to_string(c);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

TEST(VolumeIO, RoundTripIsBitwise) {
  TempDir dir;
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    std::uniform_int_distribution<Index> e(1, 9);
    auto r = random_record(rng, {e(rng), e(rng), e(rng)});
    save_volume(dir / "v.vol", r);
    auto back = load_volume(dir / "v.vol");
    EXPECT_EQ(back.image, r.image);
    EXPECT_EQ(back.label, r.label);
    EXPECT_EQ(back.spacing, r.spacing);
    EXPECT_EQ(back.case_id, r.case_id);
    EXPECT_EQ(back.meta, r.meta);
  }
}

TEST(VolumeIO, PayloadSizeArithmetic) {
  TempDir dir;
  std::mt19937_64 rng(2);
  save_volume(dir / "v.vol", random_record(rng, {4, 4, 4}));
  const auto bytes = read_bytes(dir / "v.vol");
  const auto header_end = bytes.find('\n');
  ASSERT_NE(header_end, std::string::npos);
  EXPECT_EQ(bytes.size() - header_end - 1, 64u * 4u + 64u);
}

TEST(VolumeIO, CorruptionIsReportedWithOffset) {
  TempDir dir;
  std::mt19937_64 rng(3);
  save_volume(dir / "v.vol", random_record(rng, {4, 4, 4}));
  const auto bytes = read_bytes(dir / "v.vol");
  const auto payload_at = bytes.find('\n') + 1;

  write_bytes(dir / "cut.vol", bytes.substr(0, payload_at + 100));
  try {
    load_volume(dir / "cut.vol");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), payload_at + 100);
  }

  write_bytes(dir / "long.vol", bytes + "xx");
  try {
    load_volume(dir / "long.vol");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), bytes.size());
  }

  std::string tagged = bytes;
  tagged.replace(tagged.find("f32le"), 5, "f64le");
  write_bytes(dir / "tag.vol", tagged);
  EXPECT_THROW(load_volume(dir / "tag.vol"), FormatError);

  write_bytes(dir / "junk.vol", "{\"format\": 3\n");
  EXPECT_THROW(load_volume(dir / "junk.vol"), FormatError);
}

TEST(VolumeRecord, ValidateRejectsMismatch) {
  std::mt19937_64 rng(4);
  auto r = random_record(rng, {3, 3, 3});
  EXPECT_NO_THROW(r.validate(3));
  EXPECT_THROW(r.validate(2), ContractError);
  r.label = LabelVolume({3, 3, 2}, 0);
  EXPECT_THROW(r.validate(), ContractError);
}

TEST(Synthesis, DeterministicAndWithinFractionBound) {
  SyntheticSpec spec;
  const auto a = synthesize_case(spec, 42, "a");
  const auto b = synthesize_case(spec, 42, "a");
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.label, b.label);
  EXPECT_EQ(a.meta, b.meta);
  for (std::uint64_t i = 0; i < 12; ++i) {
    const auto r = synthesize_case(spec, case_seed(7, i));
    const Index tumour = count_label(r.label, 2);
    EXPECT_GT(tumour, 0);
    const double fraction = static_cast<double>(tumour) / static_cast<double>(r.label.numel());
    EXPECT_LE(fraction, spec.max_tumour_fraction);
    EXPECT_DOUBLE_EQ(r.meta["tumour_fraction"].get<double>(), fraction);
  }
}

TEST(Synthesis, LabelsAreNestedClasses) {
  SyntheticSpec spec;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto r = synthesize_case(spec, seed);
    const auto s = r.shape();
    std::set<int> classes(r.label.data().begin(), r.label.data().end());
    EXPECT_EQ(classes, (std::set<int>{0, 1, 2}));
    // Every tumour voxel's face neighbours are organ or tumour.
    for (Index h = 0; h < s[0]; ++h)
      for (Index w = 0; w < s[1]; ++w)
        for (Index d = 0; d < s[2]; ++d) {
          if (r.label[(h * s[1] + w) * s[2] + d] != 2) continue;
          const Index nb[6][3] = {{h - 1, w, d}, {h + 1, w, d}, {h, w - 1, d},
                                  {h, w + 1, d}, {h, w, d - 1}, {h, w, d + 1}};
          for (const auto& q : nb) {
            ASSERT_TRUE(q[0] >= 0 && q[1] >= 0 && q[2] >= 0 && q[0] < s[0] && q[1] < s[1] && q[2] < s[2]);
            EXPECT_NE(r.label[(q[0] * s[1] + q[1]) * s[2] + q[2]], 0);
          }
        }
  }
}

TEST(Synthesis, SingleTumourMatchesSphereVolume) {
  for (double radius : {3.0, 4.0, 5.0}) {
    SyntheticSpec spec;
    spec.shape = {40, 40, 40};
    spec.organ_radius = {14.0, 16.0};
    spec.tumour_count = {1, 1};
    spec.tumour_radius = {radius, radius};
    spec.max_tumour_fraction = 1.0;
    const auto r = synthesize_case(spec, 5);
    const double expected = 4.0 / 3.0 * std::numbers::pi * radius * radius * radius;
    const double got = static_cast<double>(count_label(r.label, 2));
    EXPECT_NEAR(got, expected, 0.15 * expected) << "radius " << radius;
  }
}

TEST(Synthesis, ImpossiblePlacementRaises) {
  SyntheticSpec spec;
  spec.shape = {16, 16, 16};
  spec.organ_radius = {3.0, 3.0};
  spec.tumour_radius = {5.0, 5.0};
  spec.max_attempts = 5;
  EXPECT_THROW(synthesize_case(spec, 1), GenerationError);
  spec.tumour_count = {3, 1};
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(Synthesis, SpecJsonRoundTrip) {
  SyntheticSpec spec;
  spec.shape = {24, 32, 40};
  spec.tumour_count = {2, 3};
  const auto back = synthetic_spec_from_json(to_json(spec));
  EXPECT_EQ(to_json(back), to_json(spec));
  EXPECT_THROW(synthetic_spec_from_json({{"shapes", {1, 2, 3}}}), ConfigError);
}

TEST(Dataset, SynthesizeAndLoadBySplit) {
  TempDir dir;
  SyntheticSpec spec;
  spec.shape = {24, 24, 24};
  spec.organ_radius = {6, 9};
  spec.tumour_radius = {1.5, 2.0};
  const auto index = synthesize_dataset(spec, 4, 9, dir.path(), 1);
  const auto entries = read_dataset_index(index);
  ASSERT_EQ(entries.size(), 4u);
  EXPECT_EQ(entries[3].split, "val");
  EXPECT_EQ(load_dataset(index, "train").size(), 3u);
  const auto val = load_dataset(index, "val");
  ASSERT_EQ(val.size(), 1u);
  EXPECT_EQ(val[0].case_id, "case_003");
  EXPECT_EQ(load_dataset(index, "").size(), 4u);
  EXPECT_EQ(val[0].label, synthesize_case(spec, case_seed(9, 3)).label);
}

TEST(Sampler, PatchesStayInsideAndForcedSlotsHaveForeground) {
  const auto data = sparse_dataset(3);
  PatchSampler sampler(data, {{16, 16, 16}, 0.5});
  std::mt19937_64 rng(10);
  for (int b = 0; b < 500; ++b) {
    const auto batch = sampler.sample_batch(3, rng);
    ASSERT_EQ(batch.size(), 3u);
    EXPECT_EQ(sampler.forced_slots(3), 2);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& p = batch[i];
      for (int a = 0; a < 3; ++a) {
        EXPECT_GE(p.origin[a], 0);
        EXPECT_LE(p.origin[a] + 16, 40);
      }
      if (i < 2) {
        EXPECT_TRUE(p.forced);
        EXPECT_GT(p.label.numel() - count_label(p.label, 0), 0);
      }
    }
  }
  EXPECT_EQ(sampler.fallback_count(), 0u);
}

TEST(Sampler, OversamplingStatistics) {
  const auto data = sparse_dataset(2);
  PatchSampler sampler(data, {{16, 16, 16}, 0.5});
  std::mt19937_64 rng(11);
  int with_fg = 0, total = 0, batches_without = 0;
  for (int b = 0; b < 10000; ++b) {
    const auto batch = sampler.sample_batch(2, rng);
    bool any = false;
    for (const auto& p : batch) {
      const bool fg = count_label(p.label, 0) < p.label.numel();
      with_fg += fg;
      any = any || fg;
      ++total;
    }
    batches_without += !any;
  }
  EXPECT_EQ(batches_without, 0);
  EXPECT_GE(static_cast<double>(with_fg) / total, 0.5);
}

TEST(Sampler, FallsBackWithoutForeground) {
  std::vector<VolumeRecord> data(1);
  data[0].image = Tensor<float>({8, 8, 8}, 1.0f);
  data[0].label = LabelVolume({8, 8, 8}, 0);
  PatchSampler sampler(data, {{4, 4, 4}, 0.5});
  std::mt19937_64 rng(12);
  const auto batch = sampler.sample_batch(4, rng);
  EXPECT_EQ(batch.size(), 4u);
  EXPECT_EQ(sampler.fallback_count(), 2u);
}

TEST(Sampler, RejectsSmallVolumes) {
  std::vector<VolumeRecord> data(1);
  data[0].image = Tensor<float>({8, 8, 4}, 1.0f);
  data[0].label = LabelVolume({8, 8, 4}, 0);
  EXPECT_THROW(PatchSampler(data, {{8, 8, 8}, 0.5}), ContractError);
  EXPECT_THROW(PatchSampler(data, {{4, 4, 4}, 1.5}), ConfigError);
}

TEST(Flip, InvolutionAndCountPreserving) {
  std::mt19937_64 rng(13);
  auto r = random_record(rng, {3, 4, 5});
  for (unsigned mask = 0; mask < 8; ++mask) {
    auto img = r.image;
    auto lbl = r.label;
    flip_axes(img, lbl, mask);
    EXPECT_EQ(count_label(lbl, 1), count_label(r.label, 1));
    if (mask != 0) EXPECT_NE(img, r.image);
    flip_axes(img, lbl, mask);
    EXPECT_EQ(img, r.image);
    EXPECT_EQ(lbl, r.label);
  }
  auto img = r.image;
  auto lbl = r.label;
  flip_axes(img, lbl, 0b010);
  EXPECT_EQ(img[(1 * 4 + 0) * 5 + 2], r.image[(1 * 4 + 3) * 5 + 2]);
}

TEST(Flip, ImageAndLabelFlipTogetherAndMasksReproduce) {
  std::mt19937_64 rng(14);
  auto r = random_record(rng, {4, 4, 4});
  for (Index i = 0; i < 64; ++i) r.image[i] = static_cast<float>(r.label[i]);
  std::mt19937_64 a(99), b(99);
  std::vector<unsigned> masks;
  for (int i = 0; i < 32; ++i) {
    auto img = r.image;
    auto lbl = r.label;
    masks.push_back(random_flip(img, lbl, a));
    for (Index v = 0; v < 64; ++v) EXPECT_EQ(img[v], static_cast<float>(lbl[v]));
  }
  for (int i = 0; i < 32; ++i) {
    auto img = r.image;
    auto lbl = r.label;
    EXPECT_EQ(random_flip(img, lbl, b), masks[static_cast<std::size_t>(i)]);
  }
  EXPECT_GT(std::set<unsigned>(masks.begin(), masks.end()).size(), 4u);
}

TEST(StackPatches, LayoutAndOrder) {
  std::mt19937_64 rng(15);
  auto r = random_record(rng, {4, 4, 4});
  std::vector<Patch> ps{extract_patch(r, {0, 0, 0}, {2, 2, 2}), extract_patch(r, {2, 2, 2}, {2, 2, 2})};
  const auto b = stack_patches(ps);
  EXPECT_EQ(b.images.shape(), (Shape{2, 1, 2, 2, 2}));
  EXPECT_EQ(b.labels.shape(), (Shape{2, 2, 2, 2}));
  EXPECT_EQ(b.images[8], r.image[(2 * 4 + 2) * 4 + 2]);
  EXPECT_EQ(b.labels[15], r.label[63]);
  EXPECT_THROW(extract_patch(r, {3, 0, 0}, {2, 2, 2}), ContractError);
}

TEST(Preprocess, TightVolumeKeepsGeometryAndNormalises) {
  std::mt19937_64 rng(16);
  VolumeRecord r;
  r.image = Tensor<float>({5, 6, 7}, 0.0f);
  std::uniform_real_distribution<float> u(1.0f, 5.0f);
  for (auto& v : r.image.data()) v = u(rng);
  r.label = LabelVolume({5, 6, 7}, 1);
  auto out = preprocess(r, r.spacing);
  EXPECT_EQ(out.image.shape(), r.image.shape());
  EXPECT_EQ(out.label, r.label);
  double sum = 0.0, sq = 0.0;
  for (float v : out.image.data()) {
    sum += v;
    sq += static_cast<double>(v) * v;
  }
  EXPECT_NEAR(sum / 210.0, 0.0, 1e-5);
  EXPECT_NEAR(sq / 210.0, 1.0, 1e-4);
}

TEST(Preprocess, CropsToNonzeroBoundingBox) {
  VolumeRecord r;
  r.image = Tensor<float>({10, 10, 10}, 0.0f);
  r.label = LabelVolume({10, 10, 10}, 0);
  r.image[(2 * 10 + 3) * 10 + 4] = 2.0f;
  r.image[(5 * 10 + 3) * 10 + 6] = 4.0f;
  r.label[(5 * 10 + 3) * 10 + 6] = 1;
  auto out = preprocess(r);
  EXPECT_EQ(out.image.shape(), (Shape{4, 1, 3}));
  EXPECT_EQ(out.label[(3 * 1 + 0) * 3 + 2], 1);
  EXPECT_FLOAT_EQ(out.image[0], -1.0f);
  EXPECT_FLOAT_EQ(out.image[11], 1.0f);
  r.image.fill(0.0f);
  EXPECT_THROW(preprocess(r), ContractError);
}

TEST(Preprocess, ResampleAnisotropicSpacing) {
  std::mt19937_64 rng(17);
  VolumeRecord r;
  r.image = Tensor<float>({8, 8, 8}, 1.0f);
  r.label = LabelVolume({8, 8, 8}, 0);
  std::uniform_int_distribution<int> k(0, 2);
  for (auto& v : r.label.data()) v = static_cast<std::uint8_t>(k(rng));
  r.spacing = {1.0, 1.0, 2.0};
  auto out = preprocess(r, Spacing{1.0, 1.0, 1.0});
  EXPECT_EQ(out.image.shape(), (Shape{8, 8, 16}));
  EXPECT_EQ(out.spacing, (Spacing{1.0, 1.0, 1.0}));
  for (auto v : out.label.data()) EXPECT_LE(v, 2);
  // Nearest-neighbour: every output label value occurs in the source column.
  for (Index h = 0; h < 8; ++h)
    for (Index w = 0; w < 8; ++w)
      for (Index d = 0; d < 16; ++d) {
        EXPECT_EQ(out.label[(h * 8 + w) * 16 + d], r.label[(h * 8 + w) * 8 + d / 2]);
      }
  EXPECT_EQ(resampled_shape({8, 8, 8}, {1, 1, 2}, {1, 1, 1}), (Extent3{8, 8, 16}));
}

TEST(Preprocess, SphereVolumeConservedUnderResampling) {
  const Index n = 40;
  const double radius = 8.0;
  VolumeRecord r;
  r.image = Tensor<float>({n, n, n}, 1.0f);
  r.label = LabelVolume({n, n, n}, 0);
  for (Index h = 0; h < n; ++h)
    for (Index w = 0; w < n; ++w)
      for (Index d = 0; d < n; ++d) {
        const double a = h - 19.5, b = w - 19.5, c = d - 19.5;
        if (a * a + b * b + c * c <= radius * radius) {
          r.image[(h * n + w) * n + d] = 3.0f;
          r.label[(h * n + w) * n + d] = 1;
        }
      }
  r.spacing = {1.0, 1.0, 1.0};
  const double before = static_cast<double>(count_label(r.label, 1));
  for (const Spacing& to : {Spacing{1.5, 1.5, 1.5}, Spacing{0.8, 1.0, 2.0}}) {
    auto out = preprocess(r, to);
    const double voxel = to[0] * to[1] * to[2];
    const double after = static_cast<double>(count_label(out.label, 1)) * voxel;
    EXPECT_NEAR(after, before, 0.1 * before);
    // Image: count voxels above the midpoint between the two constant levels.
    double lo = 1e9, hi = -1e9;
    for (float v : out.image.data()) {
      lo = std::min<double>(lo, v);
      hi = std::max<double>(hi, v);
    }
    Index bright = 0;
    for (float v : out.image.data()) bright += v > 0.5 * (lo + hi);
    EXPECT_NEAR(static_cast<double>(bright) * voxel, before, 0.1 * before);
  }
}
