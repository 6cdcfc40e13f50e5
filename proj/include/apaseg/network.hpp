#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apaseg/apa_blocks.hpp"

namespace apaseg {

enum class FusionMode { Mean, Learned };

std::string_view to_string(FusionMode m);
FusionMode parse_fusion_mode(std::string_view s);

struct NetworkConfig {
  int levels = 5;
  Index base_channels = 8;
  Index in_channels = 1;
  Index num_classes = 3;
  BlockVariant variant = BlockVariant::APA;
  ProjectionOp projection = ProjectionOp::AvgPlusMax;
  FusionMode fusion = FusionMode::Learned;
  std::uint64_t seed = 0;
  // Training patch extents. DepthwiseConv projections are sized from them.
  std::array<Index, 3> patch_shape{32, 32, 32};

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;
  Index stage_channels(int level) const { return base_channels << level; }
};

nlohmann::json to_json(const NetworkConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
NetworkConfig network_config_from_json(const nlohmann::json& j);

template <typename T>
struct EncoderStage {
  std::array<IEBlockParams<T>, 3> blocks;  // indexed by AxisId
  FusionWeights<T> fusion;
  Var<T> down_w, down_b;  // C -> 2C, undefined at the bottleneck
};

template <typename T>
struct DecoderStage {
  std::array<IDBlockParams<T>, 3> blocks;
  FusionWeights<T> fusion;
};

/// Shapes seen during one forward pass.
struct ForwardTrace {
  std::vector<Shape> encoder_outputs;  // fused skip of each level, before downsampling
  std::vector<Shape> decoder_outputs;  // by level, deepest first
  // Key and query shapes of each encoder level's blocks, indexed by AxisId.
  std::vector<std::array<Shape, 3>> encoder_keys, encoder_queries;
};

template <typename T>
class Network {
 public:
  static Network build(const NetworkConfig& config);

  Var<T> forward(const Var<T>& x, ForwardTrace* trace = nullptr) const;

  /// Trainable parameters in a stable order with dotted names.
  ParamList<T> parameters() const;
  Index param_count() const { return count_scalars(parameters()); }

  const NetworkConfig& config() const { return config_; }
  const std::vector<EncoderStage<T>>& encoder() const { return encoder_; }
  const std::vector<DecoderStage<T>>& decoder() const { return decoder_; }
  std::vector<EncoderStage<T>>& encoder() { return encoder_; }
  std::vector<DecoderStage<T>>& decoder() { return decoder_; }

  /// Converts every parameter to precision U; the graph is not shared.
  template <typename U>
  Network<U> cast() const;

 private:
  template <typename>
  friend class Network;

  NetworkConfig config_;
  Var<T> stem_w_, stem_b_;
  std::vector<EncoderStage<T>> encoder_;
  std::vector<DecoderStage<T>> decoder_;
  Var<T> head_w_, head_b_;
};

/// One row per fused stage: encoder levels first, then decoder levels.
struct AxisWeightRow {
  std::string stage;  // "Encoder-1", ..., "Decoder-1", ...
  std::array<double, 3> weights;
};

template <typename T>
std::vector<AxisWeightRow> axis_weight_table(const Network<T>& net);

/// Fixed-width text rendering of the axis weight table.
std::string format_axis_weight_table(const std::vector<AxisWeightRow>& rows);

// ---- checkpoint container ----------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

/// A JSON manifest line followed by the concatenated little-endian float32
/// tensors. The manifest carries the network config, tensor names and shapes,
/// the payload size and its zlib CRC-32.
struct CheckpointData {
  NetworkConfig config;
  std::vector<NamedTensor> tensors;
  nlohmann::json extra = nlohmann::json::object();
};

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
/// Throws FormatError on truncation, size mismatch or checksum failure.
CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Network parameters as named float tensors, in parameter order.
template <typename T>
std::vector<NamedTensor> export_parameters(const Network<T>& net);

/// Copies tensors into the network by name; every parameter must be present
/// with a matching shape.
template <typename T>
void import_parameters(Network<T>& net, const std::vector<NamedTensor>& tensors);

void save_network(const std::filesystem::path& path, const Network<float>& net);
Network<float> load_network(const std::filesystem::path& path);

}  // namespace apaseg
