#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apaseg/tensor.hpp"

namespace apaseg {

using LabelVolume = Tensor<std::uint8_t>;  // (H, W, D)
using Spacing = std::array<double, 3>;     // mm per voxel along H, W, D

/// 2|A & B| / (|A| + |B|) for one class; 1 when both masks are empty.
double dice_score(const LabelVolume& pred, const LabelVolume& gt, int class_id);

/// Foreground voxels with a background face neighbour or on the volume border.
std::vector<std::array<Index, 3>> boundary_voxels(const LabelVolume& labels, int class_id);

/// Linear-interpolation percentile (q in [0, 100]) of unsorted values.
double percentile(std::vector<double> values, double q);

/// Symmetric 95th-percentile boundary distance in mm. Empty when either
/// mask has no voxels of the class.
std::optional<double> hd95(const LabelVolume& pred, const LabelVolume& gt, int class_id,
                           const Spacing& spacing = {1.0, 1.0, 1.0});

/// Exact Euclidean distance (mm) from every voxel to the nearest seed voxel.
/// All distances are +inf when there are no seeds.
std::vector<double> distance_to_seeds(const std::array<Index, 3>& shape,
                                      const std::vector<std::array<Index, 3>>& seeds,
                                      const Spacing& spacing);

/// Target-size bins: [edges[i], edges[i+1]); the last bin includes its top edge.
struct SizeBins {
  std::vector<double> edges{0.0, 0.001, 0.003, 0.006, 1.0};
  std::vector<std::string> labels{"0-0.1%", "0.1-0.3%", "0.3-0.6%", ">0.6%"};

  std::size_t bin_of(double fraction) const;
  const std::string& label_of(double fraction) const { return labels[bin_of(fraction)]; }
};

struct MetricsRow {
  std::string case_id;
  int class_id = 0;
  double dsc = 0.0;
  std::optional<double> hd95;
  double target_fraction = 0.0;
  std::string size_bin;
};

/// Rows for every foreground class of one case.
std::vector<MetricsRow> case_metrics(const std::string& case_id, const LabelVolume& pred,
                                     const LabelVolume& gt, int num_classes,
                                     const Spacing& spacing, const SizeBins& bins = {});

struct BinSummary {
  int class_id = 0;
  std::string bin;
  double mean_dsc = 0.0;
  std::size_t cases = 0;
};

/// Mean DSC per (class, bin). Bins without cases are omitted.
std::vector<BinSummary> size_report(const std::vector<MetricsRow>& rows, const SizeBins& bins = {});

/// case_id,class,dsc,hd95,target_fraction,size_bin; undefined HD95 is written as "undefined".
void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows);

/// Per-class means and the size-stratified table.
nlohmann::json metrics_summary(const std::vector<MetricsRow>& rows, const SizeBins& bins = {});

}  // namespace apaseg
