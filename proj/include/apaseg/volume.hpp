#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apaseg/metrics.hpp"
#include "apaseg/tensor.hpp"

namespace apaseg {

using Extent3 = std::array<Index, 3>;

/// One case: image and label share the (H, W, D) shape.
struct VolumeRecord {
  Tensor<float> image;
  LabelVolume label;
  Spacing spacing{1.0, 1.0, 1.0};
  std::string case_id;
  nlohmann::json meta = nlohmann::json::object();

  Extent3 shape() const { return {image.dim(0), image.dim(1), image.dim(2)}; }
  /// Throws ContractError when shapes differ, labels reach num_classes or spacing is not positive.
  void validate(int num_classes = 256) const;
};

/// Container: one JSON header line, '\n', f32le image voxels, u8 label voxels.
void save_volume(const std::filesystem::path& path, const VolumeRecord& record);
/// Throws FormatError (with byte offset) on truncation, size mismatch or unknown dtype tags.
VolumeRecord load_volume(const std::filesystem::path& path);

// ---- synthetic phantoms --------------------------------------------------------

struct SyntheticSpec {
  Extent3 shape{48, 48, 48};
  Spacing spacing{1.0, 1.0, 1.0};
  std::array<double, 2> organ_radius{10.0, 16.0};  // ellipsoid semi-axes, voxels
  std::array<int, 2> tumour_count{1, 2};
  std::array<double, 2> tumour_radius{2.5, 4.0};   // voxels
  double max_tumour_fraction = 0.006;
  std::array<double, 3> class_mean{0.0, 1.0, 2.0};  // background, organ, tumour
  std::array<double, 3> class_sigma{0.2, 0.2, 0.2};
  int max_attempts = 200;

  void validate() const;
};

nlohmann::json to_json(const SyntheticSpec& s);
/// Missing keys keep defaults; unknown keys are rejected.
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

/// Labels: 0 background, 1 organ ellipsoid, 2 tumour spheres inside the organ.
/// meta records "tumour_fraction", "organ_fraction" and "tumours".
/// Throws GenerationError when placement fails within max_attempts.
VolumeRecord synthesize_case(const SyntheticSpec& spec, std::uint64_t seed,
                             const std::string& case_id = "");

/// Seed of case `index` in a dataset generated from `seed`.
std::uint64_t case_seed(std::uint64_t seed, std::uint64_t index);

// ---- dataset index ---------------------------------------------------------------

struct DatasetEntry {
  std::string case_id;
  std::string path;  // relative to the index file's directory
  std::string split = "train";
};

void write_dataset_index(const std::filesystem::path& path, const std::vector<DatasetEntry>& entries);
std::vector<DatasetEntry> read_dataset_index(const std::filesystem::path& path);

/// Loads every case of `split` ("" loads all) listed in the index.
std::vector<VolumeRecord> load_dataset(const std::filesystem::path& index_path,
                                       const std::string& split = "train");

/// Writes `count` phantoms and a dataset.json into `out_dir`; the last
/// `val_count` cases get split "val". Returns the index path.
std::filesystem::path synthesize_dataset(const SyntheticSpec& spec, int count, std::uint64_t seed,
                                         const std::filesystem::path& out_dir, int val_count = 0);

// ---- patches -------------------------------------------------------------------

struct PatchSpec {
  Extent3 shape{32, 32, 32};
  double oversample_ratio = 0.5;

  void validate() const;
};

struct Patch {
  Tensor<float> image;  // (H, W, D)
  LabelVolume label;
  std::size_t case_index = 0;
  Extent3 origin{0, 0, 0};
  bool forced = false;  // drawn by a foreground-forced slot
};

/// Copies the window [origin, origin + extent) of a record.
Patch extract_patch(const VolumeRecord& record, const Extent3& origin, const Extent3& extent);

/// Draws training patches with foreground oversampling. The first
/// ceil(batch_size * ratio) slots centre on a uniformly chosen foreground
/// voxel (clamped to the volume); the rest are uniform.
class PatchSampler {
 public:
  PatchSampler(const std::vector<VolumeRecord>& dataset, PatchSpec spec);

  std::vector<Patch> sample_batch(Index batch_size, std::mt19937_64& rng);

  /// Forced slots that fell back to uniform sampling for lack of foreground.
  std::size_t fallback_count() const { return fallbacks_; }
  Index forced_slots(Index batch_size) const;

 private:
  Patch uniform_patch(std::mt19937_64& rng) const;

  const std::vector<VolumeRecord>& dataset_;
  PatchSpec spec_;
  std::vector<std::vector<Index>> foreground_;  // flat voxel indices per case
  std::vector<std::size_t> cases_with_foreground_;
  std::size_t fallbacks_ = 0;
};

/// Flips image and label along the axes set in `mask` (bit 0 = H, 1 = W, 2 = D).
void flip_axes(Tensor<float>& image, LabelVolume& label, unsigned mask);
template <typename T>
void flip_volume(Tensor<T>& volume, unsigned mask);

/// Flips each axis with probability 1/2; returns the mask used.
unsigned random_flip(Tensor<float>& image, LabelVolume& label, std::mt19937_64& rng);

/// Stacks patches into (N, 1, H, W, D) images and (N, H, W, D) labels.
struct Batch {
  Tensor<float> images;
  Tensor<std::uint8_t> labels;
};
Batch stack_patches(const std::vector<Patch>& patches);

// ---- preprocessing -------------------------------------------------------------

/// Crops to the bounding box of nonzero image voxels, optionally resamples
/// (trilinear image, nearest-neighbour labels) and z-scores the nonzero region.
/// Throws ContractError for an all-zero image.
VolumeRecord preprocess(const VolumeRecord& record, const std::optional<Spacing>& target_spacing = {});

/// Output shape for resampling `shape` from `from` to `to` spacing.
Extent3 resampled_shape(const Extent3& shape, const Spacing& from, const Spacing& to);

}  // namespace apaseg
