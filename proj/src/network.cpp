#include "apaseg/network.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "apaseg/errors.hpp"

namespace apaseg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

std::string_view to_string(FusionMode m) { return m == FusionMode::Mean ? "mean" : "learned"; }

FusionMode parse_fusion_mode(std::string_view s) {
  if (s == "mean") return FusionMode::Mean;
  if (s == "learned") return FusionMode::Learned;
  throw ConfigError("unknown fusion_mode '" + std::string(s) + "' (expected mean|learned)");
}

void NetworkConfig::validate() const {
  if (levels < 2) throw ConfigError("levels must be >= 2, got " + std::to_string(levels));
  if (levels > 8) throw ConfigError("levels must be <= 8, got " + std::to_string(levels));
  if (base_channels < kGroupSize || base_channels % kGroupSize != 0) {
    throw ConfigError("base_channels must be a positive multiple of 4, got " +
                      std::to_string(base_channels));
  }
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  const Index factor = Index{1} << (levels - 1);
  for (Index e : patch_shape) {
    if (e < 1 || e % factor != 0) {
      throw ConfigError("patch extent " + std::to_string(e) + " is not divisible by 2^(levels-1) = " +
                        std::to_string(factor));
    }
  }
}

nlohmann::json to_json(const NetworkConfig& c) {
  return {{"levels", c.levels},
          {"base_channels", c.base_channels},
          {"in_channels", c.in_channels},
          {"num_classes", c.num_classes},
          {"variant", std::string(to_string(c.variant))},
          {"projection_op", std::string(to_string(c.projection))},
          {"fusion_mode", std::string(to_string(c.fusion))},
          {"seed", c.seed},
          {"patch_shape", c.patch_shape}};
}

NetworkConfig network_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("network config must be a JSON object");
  NetworkConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "levels") {
        c.levels = value.get<int>();
      } else if (key == "base_channels") {
        c.base_channels = value.get<Index>();
      } else if (key == "in_channels") {
        c.in_channels = value.get<Index>();
      } else if (key == "num_classes") {
        c.num_classes = value.get<Index>();
      } else if (key == "variant") {
        c.variant = parse_block_variant(value.get<std::string>());
      } else if (key == "projection_op") {
        c.projection = parse_projection_op(value.get<std::string>());
      } else if (key == "fusion_mode") {
        c.fusion = parse_fusion_mode(value.get<std::string>());
      } else if (key == "seed") {
        c.seed = value.get<std::uint64_t>();
      } else if (key == "patch_shape") {
        c.patch_shape = value.get<std::array<Index, 3>>();
      } else {
        throw ConfigError("unknown network config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid network config: ") + e.what());
  }
  return c;
}

namespace {

Index axis_extent(const NetworkConfig& c, AxisId axis, int level) {
  return c.patch_shape[static_cast<int>(spatial_axis(axis))] >> level;
}

template <typename T>
void add(ParamList<T>& out, const std::string& name, const Var<T>& v) {
  if (v.defined() && v.requires_grad()) out.push_back({name, v});
}

template <typename T>
std::array<Var<T>, 3> run_axes(const auto& fn) {
  return {fn(AxisId::Sagittal), fn(AxisId::Axial), fn(AxisId::Coronal)};
}

}  // namespace

template <typename T>
Network<T> Network<T>::build(const NetworkConfig& config) {
  config.validate();
  Network net;
  net.config_ = config;
  UniformInit init(config.seed);
  const Index base = config.base_channels;
  const bool learned = config.fusion == FusionMode::Learned;

  net.stem_w_ = init.param<T>({base, config.in_channels, 1, 1, 1}, config.in_channels);
  net.stem_b_ = init.param<T>({base}, config.in_channels);
  for (int i = 0; i < config.levels; ++i) {
    const Index C = config.stage_channels(i);
    EncoderStage<T> s;
    for (AxisId a : kAllAxes) {
      s.blocks[static_cast<int>(a)] = IEBlockParams<T>::init(
          C, config.variant, config.projection, axis_extent(config, a, i), init);
    }
    s.fusion = FusionWeights<T>::init(learned);
    if (i + 1 < config.levels) {
      s.down_w = init.param<T>({2 * C, C, 1, 1, 1}, C);
      s.down_b = init.param<T>({2 * C}, C);
    }
    net.encoder_.push_back(std::move(s));
  }
  for (int i = 0; i + 1 < config.levels; ++i) {
    const Index C = config.stage_channels(i);
    DecoderStage<T> s;
    for (AxisId a : kAllAxes) {
      s.blocks[static_cast<int>(a)] = IDBlockParams<T>::init(
          C, config.variant, config.projection, axis_extent(config, a, i), init);
    }
    s.fusion = FusionWeights<T>::init(learned);
    net.decoder_.push_back(std::move(s));
  }
  net.head_w_ = init.param<T>({config.num_classes, base, 1, 1, 1}, base);
  net.head_b_ = init.param<T>({config.num_classes}, base);
  return net;
}

template <typename T>
Var<T> Network<T>::forward(const Var<T>& x, ForwardTrace* trace) const {
  require_rank(x.shape(), 5, "Network::forward");
  if (x.shape()[1] != config_.in_channels) {
    throw ContractError("Network::forward: expected " + std::to_string(config_.in_channels) +
                        " input channels, got shape " + shape_str(x.shape()));
  }
  const Index factor = Index{1} << (config_.levels - 1);
  for (int d = 2; d < 5; ++d) {
    if (x.shape()[d] % factor != 0) {
      throw ContractError("Network::forward: spatial extents of " + shape_str(x.shape()) +
                          " are not divisible by " + std::to_string(factor));
    }
  }
  if (trace) *trace = {};

  Var<T> h = ops::conv3d(x, stem_w_, stem_b_);
  std::vector<Var<T>> skips;
  for (const auto& stage : encoder_) {
    std::array<AttentionTrace<T>, 3> block_traces;
    auto branches = run_axes<T>([&](AxisId a) {
      const int i = static_cast<int>(a);
      return cot_variant_block(h, a, stage.blocks[i], trace ? &block_traces[i] : nullptr);
    });
    Var<T> y = fuse_axes(branches, stage.fusion);
    if (trace) {
      trace->encoder_outputs.push_back(y.shape());
      std::array<Shape, 3> keys, queries;
      for (int i = 0; i < 3; ++i) {
        keys[i] = block_traces[i].K.shape();
        queries[i] = block_traces[i].Q.shape();
      }
      trace->encoder_keys.push_back(keys);
      trace->encoder_queries.push_back(queries);
    }
    skips.push_back(y);
    h = stage.down_w.defined() ? ops::avg_pool3d(ops::conv3d(y, stage.down_w, stage.down_b)) : y;
  }
  for (int i = static_cast<int>(decoder_.size()) - 1; i >= 0; --i) {
    const auto& stage = decoder_[i];
    const Var<T>& high = skips[i];
    auto branches = run_axes<T>(
        [&](AxisId a) { return id_block(h, high, a, stage.blocks[static_cast<int>(a)]); });
    h = fuse_axes(branches, stage.fusion);
    if (trace) trace->decoder_outputs.push_back(h.shape());
  }
  return ops::conv3d(h, head_w_, head_b_);
}

template <typename T>
ParamList<T> Network<T>::parameters() const {
  ParamList<T> out;
  add(out, "stem.weight", stem_w_);
  add(out, "stem.bias", stem_b_);
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    const auto& s = encoder_[i];
    const std::string prefix = "enc" + std::to_string(i) + ".";
    for (AxisId a : kAllAxes) {
      s.blocks[static_cast<int>(a)].collect(prefix + "ie_" + std::string(axis_name(a)) + ".", out);
    }
    add(out, prefix + "fusion.logits", s.fusion.logits);
    add(out, prefix + "down.weight", s.down_w);
    add(out, prefix + "down.bias", s.down_b);
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const auto& s = decoder_[i];
    const std::string prefix = "dec" + std::to_string(i) + ".";
    for (AxisId a : kAllAxes) {
      s.blocks[static_cast<int>(a)].collect(prefix + "id_" + std::string(axis_name(a)) + ".", out);
    }
    add(out, prefix + "fusion.logits", s.fusion.logits);
  }
  add(out, "head.weight", head_w_);
  add(out, "head.bias", head_b_);
  return out;
}

template <typename T>
template <typename U>
Network<U> Network<T>::cast() const {
  Network<U> out = Network<U>::build(config_);
  auto src = parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i].var.mutable_value() = src[i].var.value().template cast<U>();
  }
  return out;
}

template <typename T>
std::vector<AxisWeightRow> axis_weight_table(const Network<T>& net) {
  std::vector<AxisWeightRow> rows;
  for (std::size_t i = 0; i < net.encoder().size(); ++i) {
    rows.push_back({"Encoder-" + std::to_string(i + 1), net.encoder()[i].fusion.weights()});
  }
  for (std::size_t i = 0; i < net.decoder().size(); ++i) {
    rows.push_back({"Decoder-" + std::to_string(i + 1), net.decoder()[i].fusion.weights()});
  }
  return rows;
}

std::string format_axis_weight_table(const std::vector<AxisWeightRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "Stage" << std::right << std::setw(10) << "Sagittal"
     << std::setw(10) << "Axial" << std::setw(10) << "Coronal" << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << std::left << std::setw(12) << r.stage << std::right;
    for (double w : r.weights) os << std::setw(10) << w;
    os << '\n';
  }
  return os.str();
}

// ---- checkpoint container ----------------------------------------------------

namespace {

constexpr const char* kCheckpointFormat = "apaseg-checkpoint";
constexpr int kCheckpointVersion = 1;

std::uint32_t crc32_of(const std::string& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + done), chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  std::string payload;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : data.tensors) {
    const auto bytes = static_cast<std::size_t>(t.value.numel()) * sizeof(float);
    tensors.push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", payload.size()}});
    payload.append(reinterpret_cast<const char*>(t.value.ptr()), bytes);
  }
  nlohmann::json manifest = {{"format", kCheckpointFormat},
                             {"version", kCheckpointVersion},
                             {"dtype", "f32le"},
                             {"config", to_json(data.config)},
                             {"tensors", tensors},
                             {"payload_bytes", payload.size()},
                             {"crc32", crc32_of(payload)},
                             {"extra", data.extra}};

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    out << manifest.dump() << '\n';
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw std::runtime_error("failed writing '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  std::string header;
  if (!std::getline(in, header)) throw FormatError("missing checkpoint manifest line", 0);
  const auto payload_offset = static_cast<std::uint64_t>(header.size() + 1);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(header);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + e.what(), e.byte);
  }

  CheckpointData data;
  std::size_t payload_bytes = 0;
  std::uint32_t expected_crc = 0;
  try {
    if (manifest.at("format") != kCheckpointFormat) throw FormatError("not a checkpoint file", 0);
    if (manifest.at("version").get<int>() != kCheckpointVersion) {
      throw FormatError("unsupported checkpoint version", 0);
    }
    if (manifest.at("dtype") != "f32le") {
      throw FormatError("unknown dtype tag " + manifest.at("dtype").dump(), 0);
    }
    data.config = network_config_from_json(manifest.at("config"));
    payload_bytes = manifest.at("payload_bytes").get<std::size_t>();
    expected_crc = manifest.at("crc32").get<std::uint32_t>();
    if (manifest.contains("extra")) data.extra = manifest.at("extra");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("incomplete checkpoint manifest: ") + e.what(), 0);
  }

  std::string payload(payload_bytes, '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload_bytes));
  const auto got = static_cast<std::uint64_t>(in.gcount());
  if (got != payload_bytes) {
    throw FormatError("checkpoint payload truncated: expected " + std::to_string(payload_bytes) +
                          " bytes, found " + std::to_string(got),
                      payload_offset + got);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes after checkpoint payload", payload_offset + payload_bytes);
  }
  if (crc32_of(payload) != expected_crc) {
    throw FormatError("checkpoint checksum mismatch", payload_offset);
  }

  for (const auto& t : manifest.at("tensors")) {
    const auto shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::size_t>();
    const auto n = static_cast<std::size_t>(numel_of(shape));
    if (offset + n * sizeof(float) > payload_bytes) {
      throw FormatError("tensor '" + t.at("name").get<std::string>() + "' exceeds payload",
                        payload_offset + offset);
    }
    std::vector<float> values(n);
    std::memcpy(values.data(), payload.data() + offset, n * sizeof(float));
    data.tensors.push_back({t.at("name").get<std::string>(), Tensor<float>(shape, std::move(values))});
  }
  return data;
}

template <typename T>
std::vector<NamedTensor> export_parameters(const Network<T>& net) {
  std::vector<NamedTensor> out;
  for (const auto& p : net.parameters()) out.push_back({p.name, p.var.value().template cast<float>()});
  return out;
}

template <typename T>
void import_parameters(Network<T>& net, const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.value;
  for (auto& p : net.parameters()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks parameter '" + p.name + "'", 0);
    if (it->second->shape() != p.var.shape()) {
      throw FormatError("parameter '" + p.name + "' has shape " + shape_str(it->second->shape()) +
                            ", expected " + shape_str(p.var.shape()),
                        0);
    }
    p.var.mutable_value() = it->second->template cast<T>();
  }
}

void save_network(const std::filesystem::path& path, const Network<float>& net) {
  write_checkpoint(path, {net.config(), export_parameters(net), nlohmann::json::object()});
}

Network<float> load_network(const std::filesystem::path& path) {
  const auto data = read_checkpoint(path);
  auto net = Network<float>::build(data.config);
  import_parameters(net, data.tensors);
  return net;
}

template class Network<float>;
template class Network<double>;
template Network<double> Network<float>::cast<double>() const;
template Network<float> Network<double>::cast<float>() const;
template std::vector<AxisWeightRow> axis_weight_table(const Network<float>&);
template std::vector<AxisWeightRow> axis_weight_table(const Network<double>&);
template std::vector<NamedTensor> export_parameters(const Network<float>&);
template std::vector<NamedTensor> export_parameters(const Network<double>&);
template void import_parameters(Network<float>&, const std::vector<NamedTensor>&);
template void import_parameters(Network<double>&, const std::vector<NamedTensor>&);

}  // namespace apaseg
