#include "apaseg/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <spdlog/spdlog.h>

#include "apaseg/errors.hpp"

namespace apaseg {

static_assert(std::endian::native == std::endian::little,
              "volume IO assumes a little-endian host");

namespace {

constexpr const char* kVolumeFormat = "apaseg-volume";
constexpr int kVolumeVersion = 1;

Index flat(const Extent3& s, Index h, Index w, Index d) { return (h * s[1] + w) * s[2] + d; }

// Portable draws: fixed bit-to-double mapping and Box-Muller, so phantoms do
// not depend on the standard library's distribution implementations.
class PhantomRng {
 public:
  explicit PhantomRng(std::uint64_t seed) : engine_(seed) {}
  double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }
  int integer(int lo, int hi) {
    return lo + static_cast<int>(unit() * static_cast<double>(hi - lo + 1));
  }
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - unit();  // (0, 1]
    const double u2 = unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace

void VolumeRecord::validate(int num_classes) const {
  require_rank(image.shape(), 3, "VolumeRecord image");
  if (label.shape() != image.shape()) {
    throw ContractError("VolumeRecord '" + case_id + "': label shape " + shape_str(label.shape()) +
                        " differs from image shape " + shape_str(image.shape()));
  }
  for (double s : spacing) {
    if (!(s > 0.0)) throw ContractError("VolumeRecord '" + case_id + "': spacing must be positive");
  }
  for (std::uint8_t v : label.data()) {
    if (v >= num_classes) {
      throw ContractError("VolumeRecord '" + case_id + "': label " + std::to_string(v) +
                          " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

void save_volume(const std::filesystem::path& path, const VolumeRecord& record) {
  record.validate();
  const auto s = record.shape();
  nlohmann::json header = {{"format", kVolumeFormat},
                           {"version", kVolumeVersion},
                           {"shape", s},
                           {"spacing", record.spacing},
                           {"image_dtype", "f32le"},
                           {"label_dtype", "u8"},
                           {"case_id", record.case_id},
                           {"meta", record.meta}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(record.image.ptr()),
            static_cast<std::streamsize>(record.image.numel() * sizeof(float)));
  out.write(reinterpret_cast<const char*>(record.label.ptr()),
            static_cast<std::streamsize>(record.label.numel()));
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

VolumeRecord load_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open volume '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || in.eof()) throw FormatError("missing volume header line", 0);
  const std::uint64_t payload_at = line.size() + 1;

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("malformed volume header: ") + e.what(), e.byte);
  }

  VolumeRecord r;
  Extent3 shape{};
  try {
    if (header.at("format") != kVolumeFormat) throw FormatError("not a volume file", 0);
    if (header.at("version").get<int>() != kVolumeVersion) {
      throw FormatError("unsupported volume version " + header.at("version").dump(), 0);
    }
    if (header.at("image_dtype") != "f32le") {
      throw FormatError("unknown image dtype tag " + header.at("image_dtype").dump(), 0);
    }
    if (header.at("label_dtype") != "u8") {
      throw FormatError("unknown label dtype tag " + header.at("label_dtype").dump(), 0);
    }
    shape = header.at("shape").get<Extent3>();
    r.spacing = header.at("spacing").get<Spacing>();
    r.case_id = header.at("case_id").get<std::string>();
    if (header.contains("meta")) r.meta = header.at("meta");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("incomplete volume header: ") + e.what(), 0);
  }
  for (Index e : shape) {
    if (e < 1) throw FormatError("volume shape must be positive", 0);
  }

  const Index n = shape[0] * shape[1] * shape[2];
  const auto image_bytes = static_cast<std::uint64_t>(n) * sizeof(float);
  const auto expected = image_bytes + static_cast<std::uint64_t>(n);
  std::vector<float> image(static_cast<std::size_t>(n));
  std::vector<std::uint8_t> label(static_cast<std::size_t>(n));
  in.read(reinterpret_cast<char*>(image.data()), static_cast<std::streamsize>(image_bytes));
  std::uint64_t got = static_cast<std::uint64_t>(in.gcount());
  if (got == image_bytes) {
    in.read(reinterpret_cast<char*>(label.data()), static_cast<std::streamsize>(n));
    got += static_cast<std::uint64_t>(in.gcount());
  }
  if (got != expected) {
    throw FormatError("volume payload truncated: header promises " + std::to_string(expected) +
                          " bytes, found " + std::to_string(got),
                      payload_at + got);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("volume payload longer than the header promises", payload_at + expected);
  }
  const Shape s{shape[0], shape[1], shape[2]};
  r.image = Tensor<float>(s, std::move(image));
  r.label = LabelVolume(s, std::move(label));
  return r;
}

// ---- synthetic phantoms --------------------------------------------------------

void SyntheticSpec::validate() const {
  for (Index e : shape) {
    if (e < 8) throw ConfigError("synthetic volume extents must be >= 8");
  }
  if (!(organ_radius[0] > 0 && organ_radius[0] <= organ_radius[1])) {
    throw ConfigError("organ_radius must be an increasing positive range");
  }
  if (!(tumour_radius[0] > 0 && tumour_radius[0] <= tumour_radius[1])) {
    throw ConfigError("tumour_radius must be an increasing positive range");
  }
  if (tumour_count[0] < 1 || tumour_count[0] > tumour_count[1]) {
    throw ConfigError("tumour_count must be an increasing range starting at >= 1");
  }
  if (!(max_tumour_fraction > 0 && max_tumour_fraction <= 1)) {
    throw ConfigError("max_tumour_fraction must lie in (0, 1]");
  }
  for (double s : class_sigma) {
    if (s < 0) throw ConfigError("class_sigma must be non-negative");
  }
  for (double s : spacing) {
    if (!(s > 0)) throw ConfigError("spacing must be positive");
  }
  if (max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
}

nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"shape", s.shape},
          {"spacing", s.spacing},
          {"organ_radius", s.organ_radius},
          {"tumour_count", s.tumour_count},
          {"tumour_radius", s.tumour_radius},
          {"max_tumour_fraction", s.max_tumour_fraction},
          {"class_mean", s.class_mean},
          {"class_sigma", s.class_sigma},
          {"max_attempts", s.max_attempts}};
}

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("synthetic spec must be a JSON object");
  SyntheticSpec s;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "shape") {
        s.shape = value.get<Extent3>();
      } else if (key == "spacing") {
        s.spacing = value.get<Spacing>();
      } else if (key == "organ_radius") {
        s.organ_radius = value.get<std::array<double, 2>>();
      } else if (key == "tumour_count") {
        s.tumour_count = value.get<std::array<int, 2>>();
      } else if (key == "tumour_radius") {
        s.tumour_radius = value.get<std::array<double, 2>>();
      } else if (key == "max_tumour_fraction") {
        s.max_tumour_fraction = value.get<double>();
      } else if (key == "class_mean") {
        s.class_mean = value.get<std::array<double, 3>>();
      } else if (key == "class_sigma") {
        s.class_sigma = value.get<std::array<double, 3>>();
      } else if (key == "max_attempts") {
        s.max_attempts = value.get<int>();
      } else {
        throw ConfigError("unknown synthetic spec key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::uint64_t case_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finaliser over the combined value
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

struct Ellipsoid {
  std::array<double, 3> centre, radii;
  double level(double h, double w, double d) const {
    const double a = (h - centre[0]) / radii[0];
    const double b = (w - centre[1]) / radii[1];
    const double c = (d - centre[2]) / radii[2];
    return a * a + b * b + c * c;
  }
};

struct Sphere {
  std::array<double, 3> centre;
  double radius;
};

std::optional<Ellipsoid> place_organ(const SyntheticSpec& spec, PhantomRng& rng) {
  Ellipsoid e{};
  for (int i = 0; i < 3; ++i) {
    const double extent = static_cast<double>(spec.shape[i]);
    const double r = std::min(rng.uniform(spec.organ_radius[0], spec.organ_radius[1]), extent / 2.0 - 1.5);
    if (r < 1.0) return std::nullopt;
    e.radii[i] = r;
    e.centre[i] = rng.uniform(r + 0.5, extent - 1.5 - r);
  }
  return e;
}

// A sphere fits when a one-voxel shell around it stays inside the organ.
bool sphere_inside(const Ellipsoid& organ, const Sphere& s) {
  const double reach = s.radius + 1.0;
  for (double h = std::floor(s.centre[0] - reach); h <= s.centre[0] + reach; h += 1.0)
    for (double w = std::floor(s.centre[1] - reach); w <= s.centre[1] + reach; w += 1.0)
      for (double d = std::floor(s.centre[2] - reach); d <= s.centre[2] + reach; d += 1.0) {
        const double dh = h - s.centre[0], dw = w - s.centre[1], dd = d - s.centre[2];
        if (dh * dh + dw * dw + dd * dd <= reach * reach && organ.level(h, w, d) > 1.0) return false;
      }
  return true;
}

}  // namespace

VolumeRecord synthesize_case(const SyntheticSpec& spec, std::uint64_t seed, const std::string& case_id) {
  spec.validate();
  PhantomRng rng(seed);
  const Extent3& S = spec.shape;
  const Index total = S[0] * S[1] * S[2];

  for (int attempt = 0; attempt < spec.max_attempts; ++attempt) {
    const auto organ = place_organ(spec, rng);
    if (!organ) continue;
    const int count = rng.integer(spec.tumour_count[0], spec.tumour_count[1]);
    std::vector<Sphere> tumours;
    for (int t = 0; t < count; ++t) {
      bool placed = false;
      for (int tries = 0; tries < 50 && !placed; ++tries) {
        Sphere s{};
        s.radius = rng.uniform(spec.tumour_radius[0], spec.tumour_radius[1]);
        for (int i = 0; i < 3; ++i) {
          s.centre[i] = rng.uniform(organ->centre[i] - organ->radii[i], organ->centre[i] + organ->radii[i]);
        }
        if (sphere_inside(*organ, s)) {
          tumours.push_back(s);
          placed = true;
        }
      }
      if (!placed) break;
    }
    if (static_cast<int>(tumours.size()) != count) continue;

    LabelVolume label(Shape{S[0], S[1], S[2]}, 0);
    Index organ_voxels = 0, tumour_voxels = 0;
    for (Index h = 0; h < S[0]; ++h)
      for (Index w = 0; w < S[1]; ++w)
        for (Index d = 0; d < S[2]; ++d) {
          const double ph = static_cast<double>(h), pw = static_cast<double>(w), pd = static_cast<double>(d);
          if (organ->level(ph, pw, pd) > 1.0) continue;
          std::uint8_t k = 1;
          for (const auto& s : tumours) {
            const double a = ph - s.centre[0], b = pw - s.centre[1], c = pd - s.centre[2];
            if (a * a + b * b + c * c <= s.radius * s.radius) k = 2;
          }
          label[flat(S, h, w, d)] = k;
          (k == 2 ? tumour_voxels : organ_voxels) += 1;
        }
    const double fraction = static_cast<double>(tumour_voxels) / static_cast<double>(total);
    if (tumour_voxels == 0 || fraction > spec.max_tumour_fraction) continue;

    Tensor<float> image(Shape{S[0], S[1], S[2]}, 0.0f);
    for (Index i = 0; i < total; ++i) {
      const int k = label[i];
      image[i] = static_cast<float>(spec.class_mean[k] + spec.class_sigma[k] * rng.normal());
    }

    VolumeRecord r;
    r.image = std::move(image);
    r.label = std::move(label);
    r.spacing = spec.spacing;
    r.case_id = case_id;
    nlohmann::json spheres = nlohmann::json::array();
    for (const auto& s : tumours) spheres.push_back({{"centre", s.centre}, {"radius", s.radius}});
    r.meta = {{"seed", seed},
              {"tumour_fraction", fraction},
              {"organ_fraction", static_cast<double>(organ_voxels) / static_cast<double>(total)},
              {"organ", {{"centre", organ->centre}, {"radii", organ->radii}}},
              {"tumours", spheres}};
    return r;
  }
  throw GenerationError("could not place organ and tumours within " +
                        std::to_string(spec.max_attempts) + " attempts (seed " + std::to_string(seed) +
                        ")");
}

// ---- dataset index ---------------------------------------------------------------

void write_dataset_index(const std::filesystem::path& path, const std::vector<DatasetEntry>& entries) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& e : entries) cases.push_back({{"case_id", e.case_id}, {"path", e.path}, {"split", e.split}});
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset index '" + path.string() + "'");
  out << nlohmann::json{{"cases", cases}}.dump(2) << '\n';
}

std::vector<DatasetEntry> read_dataset_index(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset index '" + path.string() + "'");
  std::vector<DatasetEntry> out;
  try {
    const auto j = nlohmann::json::parse(in);
    for (const auto& c : j.at("cases")) {
      DatasetEntry e;
      e.case_id = c.at("case_id").get<std::string>();
      e.path = c.at("path").get<std::string>();
      e.split = c.value("split", "train");
      out.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid dataset index '" + path.string() + "': " + e.what());
  }
  return out;
}

std::vector<VolumeRecord> load_dataset(const std::filesystem::path& index_path, const std::string& split) {
  std::vector<VolumeRecord> out;
  const auto root = index_path.parent_path();
  for (const auto& e : read_dataset_index(index_path)) {
    if (!split.empty() && e.split != split) continue;
    auto r = load_volume(root / e.path);
    if (r.case_id.empty()) r.case_id = e.case_id;
    out.push_back(std::move(r));
  }
  return out;
}

std::filesystem::path synthesize_dataset(const SyntheticSpec& spec, int count, std::uint64_t seed,
                                         const std::filesystem::path& out_dir, int val_count) {
  if (count < 1) throw ConfigError("count must be >= 1");
  if (val_count < 0 || val_count > count) throw ConfigError("val_count must lie in [0, count]");
  std::filesystem::create_directories(out_dir);
  std::vector<DatasetEntry> entries;
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "case_%03d", i);
    const auto record = synthesize_case(spec, case_seed(seed, static_cast<std::uint64_t>(i)), name);
    const std::string file = std::string(name) + ".vol";
    save_volume(out_dir / file, record);
    entries.push_back({name, file, i >= count - val_count ? "val" : "train"});
  }
  const auto index = out_dir / "dataset.json";
  write_dataset_index(index, entries);
  return index;
}

// ---- patches -------------------------------------------------------------------

void PatchSpec::validate() const {
  for (Index e : shape) {
    if (e < 1) throw ConfigError("patch extents must be positive");
  }
  if (!(oversample_ratio >= 0.0 && oversample_ratio <= 1.0)) {
    throw ConfigError("oversample_ratio must lie in [0, 1]");
  }
}

Patch extract_patch(const VolumeRecord& record, const Extent3& origin, const Extent3& extent) {
  const auto s = record.shape();
  for (int i = 0; i < 3; ++i) {
    if (origin[i] < 0 || origin[i] + extent[i] > s[i]) {
      throw ContractError("patch window exceeds volume '" + record.case_id + "'");
    }
  }
  Patch p;
  p.origin = origin;
  const Shape ps{extent[0], extent[1], extent[2]};
  p.image = Tensor<float>(ps, 0.0f);
  p.label = LabelVolume(ps, 0);
  for (Index h = 0; h < extent[0]; ++h)
    for (Index w = 0; w < extent[1]; ++w) {
      const Index src = flat(s, origin[0] + h, origin[1] + w, origin[2]);
      const Index dst = flat(extent, h, w, 0);
      std::copy_n(record.image.ptr() + src, extent[2], p.image.ptr() + dst);
      std::copy_n(record.label.ptr() + src, extent[2], p.label.ptr() + dst);
    }
  return p;
}

PatchSampler::PatchSampler(const std::vector<VolumeRecord>& dataset, PatchSpec spec)
    : dataset_(dataset), spec_(spec) {
  spec_.validate();
  if (dataset_.empty()) throw ContractError("PatchSampler: empty dataset");
  for (std::size_t c = 0; c < dataset_.size(); ++c) {
    const auto& r = dataset_[c];
    const auto s = r.shape();
    for (int i = 0; i < 3; ++i) {
      if (s[i] < spec_.shape[i]) {
        throw ContractError("volume '" + r.case_id + "' of shape " + shape_str(r.image.shape()) +
                            " is smaller than the patch");
      }
    }
    std::vector<Index> fg;
    for (Index i = 0; i < r.label.numel(); ++i) {
      if (r.label[i] != 0) fg.push_back(i);
    }
    if (!fg.empty()) cases_with_foreground_.push_back(c);
    foreground_.push_back(std::move(fg));
  }
}

Index PatchSampler::forced_slots(Index batch_size) const {
  return static_cast<Index>(std::ceil(static_cast<double>(batch_size) * spec_.oversample_ratio - 1e-12));
}

Patch PatchSampler::uniform_patch(std::mt19937_64& rng) const {
  std::uniform_int_distribution<std::size_t> pick(0, dataset_.size() - 1);
  const std::size_t c = pick(rng);
  const auto s = dataset_[c].shape();
  Extent3 origin{};
  for (int i = 0; i < 3; ++i) {
    std::uniform_int_distribution<Index> o(0, s[i] - spec_.shape[i]);
    origin[i] = o(rng);
  }
  Patch p = extract_patch(dataset_[c], origin, spec_.shape);
  p.case_index = c;
  return p;
}

std::vector<Patch> PatchSampler::sample_batch(Index batch_size, std::mt19937_64& rng) {
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  const Index forced = forced_slots(batch_size);
  std::vector<Patch> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  for (Index slot = 0; slot < batch_size; ++slot) {
    if (slot >= forced) {
      out.push_back(uniform_patch(rng));
      continue;
    }
    if (cases_with_foreground_.empty()) {
      ++fallbacks_;
      spdlog::warn("no foreground voxels in the dataset; forced patch slot falls back to uniform sampling");
      out.push_back(uniform_patch(rng));
      continue;
    }
    std::uniform_int_distribution<std::size_t> pick_case(0, cases_with_foreground_.size() - 1);
    const std::size_t c = cases_with_foreground_[pick_case(rng)];
    const auto& fg = foreground_[c];
    std::uniform_int_distribution<std::size_t> pick_voxel(0, fg.size() - 1);
    const Index v = fg[pick_voxel(rng)];
    const auto s = dataset_[c].shape();
    const Extent3 pos{v / (s[1] * s[2]), (v / s[2]) % s[1], v % s[2]};
    Extent3 origin{};
    for (int i = 0; i < 3; ++i) {
      origin[i] = std::clamp<Index>(pos[i] - spec_.shape[i] / 2, 0, s[i] - spec_.shape[i]);
    }
    Patch p = extract_patch(dataset_[c], origin, spec_.shape);
    p.case_index = c;
    p.forced = true;
    out.push_back(std::move(p));
  }
  return out;
}

template <typename T>
void flip_volume(Tensor<T>& volume, unsigned mask) {
  require_rank(volume.shape(), 3, "flip_volume");
  const Extent3 s{volume.dim(0), volume.dim(1), volume.dim(2)};
  for (int axis = 0; axis < 3; ++axis) {
    if (!(mask & (1u << axis))) continue;
    for (Index h = 0; h < s[0]; ++h)
      for (Index w = 0; w < s[1]; ++w)
        for (Index d = 0; d < s[2]; ++d) {
          Extent3 p{h, w, d};
          Extent3 q = p;
          q[axis] = s[axis] - 1 - p[axis];
          if (q[axis] <= p[axis]) continue;  // swap each pair once
          std::swap(volume[flat(s, p[0], p[1], p[2])], volume[flat(s, q[0], q[1], q[2])]);
        }
  }
}

void flip_axes(Tensor<float>& image, LabelVolume& label, unsigned mask) {
  require_same_shape(image.shape(), label.shape(), "flip_axes");
  flip_volume(image, mask);
  flip_volume(label, mask);
}

unsigned random_flip(Tensor<float>& image, LabelVolume& label, std::mt19937_64& rng) {
  const unsigned mask = static_cast<unsigned>(rng() >> 61);  // three fair bits
  flip_axes(image, label, mask);
  return mask;
}

Batch stack_patches(const std::vector<Patch>& patches) {
  if (patches.empty()) throw ContractError("stack_patches: no patches");
  const Shape& s = patches.front().image.shape();
  const Index N = static_cast<Index>(patches.size()), vol = numel_of(s);
  Batch b{Tensor<float>({N, 1, s[0], s[1], s[2]}, 0.0f), Tensor<std::uint8_t>({N, s[0], s[1], s[2]}, 0)};
  for (Index n = 0; n < N; ++n) {
    const auto& p = patches[static_cast<std::size_t>(n)];
    require_same_shape(p.image.shape(), s, "stack_patches");
    std::copy_n(p.image.ptr(), vol, b.images.ptr() + n * vol);
    std::copy_n(p.label.ptr(), vol, b.labels.ptr() + n * vol);
  }
  return b;
}

// ---- preprocessing -------------------------------------------------------------

Extent3 resampled_shape(const Extent3& shape, const Spacing& from, const Spacing& to) {
  Extent3 out{};
  for (int i = 0; i < 3; ++i) {
    if (!(from[i] > 0 && to[i] > 0)) throw ContractError("spacing must be positive");
    out[i] = std::max<Index>(1, std::llround(static_cast<double>(shape[i]) * from[i] / to[i]));
  }
  return out;
}

namespace {

// Physical centre of output voxel i, in input voxel coordinates. Both grids
// start at the same corner; `ratio` is target / source spacing.
double source_coord(Index i, double ratio) { return (static_cast<double>(i) + 0.5) * ratio - 0.5; }

VolumeRecord resample(const VolumeRecord& r, const Spacing& to) {
  const auto in = r.shape();
  const auto out = resampled_shape(in, r.spacing, to);
  VolumeRecord o;
  o.case_id = r.case_id;
  o.meta = r.meta;
  o.spacing = to;
  const Shape os{out[0], out[1], out[2]};
  o.image = Tensor<float>(os, 0.0f);
  o.label = LabelVolume(os, 0);

  std::array<std::vector<Index>, 3> lo, hi, nearest;
  std::array<std::vector<double>, 3> frac;
  for (int a = 0; a < 3; ++a) {
    for (Index i = 0; i < out[a]; ++i) {
      const double x = std::clamp(source_coord(i, to[a] / r.spacing[a]), 0.0, static_cast<double>(in[a] - 1));
      const auto l = static_cast<Index>(std::floor(x));
      lo[a].push_back(l);
      hi[a].push_back(std::min(l + 1, in[a] - 1));
      frac[a].push_back(x - static_cast<double>(l));
      nearest[a].push_back(std::min<Index>(in[a] - 1, static_cast<Index>(std::floor(x + 0.5))));
    }
  }
  for (Index h = 0; h < out[0]; ++h)
    for (Index w = 0; w < out[1]; ++w)
      for (Index d = 0; d < out[2]; ++d) {
        double acc = 0.0;
        for (int corner = 0; corner < 8; ++corner) {
          const bool bh = corner & 4, bw = corner & 2, bd = corner & 1;
          const double wt = (bh ? frac[0][h] : 1 - frac[0][h]) * (bw ? frac[1][w] : 1 - frac[1][w]) *
                            (bd ? frac[2][d] : 1 - frac[2][d]);
          if (wt == 0.0) continue;
          acc += wt * r.image[flat(in, bh ? hi[0][h] : lo[0][h], bw ? hi[1][w] : lo[1][w],
                                   bd ? hi[2][d] : lo[2][d])];
        }
        o.image[flat(out, h, w, d)] = static_cast<float>(acc);
        o.label[flat(out, h, w, d)] = r.label[flat(in, nearest[0][h], nearest[1][w], nearest[2][d])];
      }
  return o;
}

}  // namespace

VolumeRecord preprocess(const VolumeRecord& record, const std::optional<Spacing>& target_spacing) {
  record.validate();
  const auto s = record.shape();
  Extent3 lo{s[0], s[1], s[2]}, hi{-1, -1, -1};
  for (Index h = 0; h < s[0]; ++h)
    for (Index w = 0; w < s[1]; ++w)
      for (Index d = 0; d < s[2]; ++d) {
        if (record.image[flat(s, h, w, d)] == 0.0f) continue;
        const Extent3 p{h, w, d};
        for (int i = 0; i < 3; ++i) {
          lo[i] = std::min(lo[i], p[i]);
          hi[i] = std::max(hi[i], p[i]);
        }
      }
  if (hi[0] < 0) throw ContractError("preprocess: image of '" + record.case_id + "' is all zero");

  Patch crop = extract_patch(record, lo, {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1});
  VolumeRecord out;
  out.image = std::move(crop.image);
  out.label = std::move(crop.label);
  out.spacing = record.spacing;
  out.case_id = record.case_id;
  out.meta = record.meta;
  out.meta["crop_origin"] = lo;
  if (target_spacing && *target_spacing != record.spacing) out = resample(out, *target_spacing);

  double sum = 0.0, sq = 0.0;
  Index n = 0;
  for (float v : out.image.data()) {
    if (v == 0.0f) continue;
    sum += v;
    sq += static_cast<double>(v) * v;
    ++n;
  }
  if (n == 0) throw ContractError("preprocess: resampled image of '" + record.case_id + "' is all zero");
  const double mean = sum / static_cast<double>(n);
  const double sd = std::sqrt(std::max(0.0, sq / static_cast<double>(n) - mean * mean));
  const double inv = 1.0 / std::max(sd, 1e-8);
  for (auto& v : out.image.data()) {
    if (v != 0.0f) v = static_cast<float>((v - mean) * inv);
  }
  return out;
}

template void flip_volume(Tensor<float>&, unsigned);
template void flip_volume(Tensor<std::uint8_t>&, unsigned);

}  // namespace apaseg
