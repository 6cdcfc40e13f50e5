#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apaseg/train.hpp"

namespace apaseg {

/// Grid of block variant x projection op x fusion mode. Without `train`
/// every cell is only built and run forward on one random patch.
struct AblationMatrix {
  std::vector<BlockVariant> variants{BlockVariant::APA, BlockVariant::CoT2D, BlockVariant::CoT3D};
  std::vector<ProjectionOp> projections{ProjectionOp::AvgPlusMax, ProjectionOp::Avg, ProjectionOp::Max,
                                        ProjectionOp::DepthwiseConv};
  std::vector<FusionMode> fusion_modes{FusionMode::Learned, FusionMode::Mean};
  NetworkConfig net;  // variant, projection and fusion are set per cell

  std::optional<TrainConfig> train;  // its net section is replaced by `net`
  std::optional<std::filesystem::path> dataset;  // dataset.json; phantoms are generated otherwise
  SyntheticSpec phantoms;
  int phantom_cases = 4;
  std::uint64_t data_seed = 0;
  double overlap = 0.5;
  std::filesystem::path out_dir = "ablation";
};

/// Relative paths resolve against `base_dir`. Unknown keys are rejected.
AblationMatrix ablation_matrix_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

struct AblationResult {
  BlockVariant variant{};
  ProjectionOp projection{};
  FusionMode fusion{};
  Index params = 0;
  Shape output_shape;
  bool shape_ok = false;
  /// Key and query elements per channel of the top-level encoder blocks.
  Index key_elements = 0;
  Index query_elements = 0;
  std::optional<double> final_loss;
  std::vector<double> mean_dsc;  // per foreground class; empty without training
  std::vector<AxisWeightRow> axis_weights;
  double seconds = 0.0;
  std::string error;  // non-empty when the cell failed

  std::string label() const;
};

std::vector<AblationResult> run_ablation(const AblationMatrix& m,
                                         const std::function<void(const AblationResult&)>& on_cell = {});

/// Comparison table followed by the learned axis weights of every trained
/// learned-fusion cell.
std::string format_ablation_report(const std::vector<AblationResult>& results);
nlohmann::json ablation_json(const std::vector<AblationResult>& results);

}  // namespace apaseg
