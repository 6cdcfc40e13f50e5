#include "apaseg/ablation.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include <spdlog/spdlog.h>

#include "apaseg/errors.hpp"

namespace apaseg {

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

template <typename E, typename Parse>
std::vector<E> parse_list(const nlohmann::json& j, Parse parse) {
  std::vector<E> out;
  for (const auto& v : j) out.push_back(parse(v.get<std::string>()));
  return out;
}

Index per_channel(const Shape& s) {
  if (s.size() < 2 || s[0] == 0 || s[1] == 0) return 0;
  return numel_of(s) / (s[0] * s[1]);
}

}  // namespace

AblationMatrix ablation_matrix_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ConfigError("ablation matrix must be a JSON object");
  AblationMatrix m;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "variants") {
        m.variants = parse_list<BlockVariant>(value, parse_block_variant);
      } else if (key == "projection_ops") {
        m.projections = parse_list<ProjectionOp>(value, parse_projection_op);
      } else if (key == "fusion_modes") {
        m.fusion_modes = parse_list<FusionMode>(value, parse_fusion_mode);
      } else if (key == "net") {
        m.net = network_config_from_json(value);
      } else if (key == "train") {
        m.train = value.is_null() ? std::nullopt : std::optional(train_config_from_json(value));
      } else if (key == "dataset") {
        m.dataset = resolve(base_dir, value.get<std::string>());
      } else if (key == "phantoms") {
        m.phantoms = synthetic_spec_from_json(value);
      } else if (key == "phantom_cases") {
        m.phantom_cases = value.get<int>();
      } else if (key == "data_seed") {
        m.data_seed = value.get<std::uint64_t>();
      } else if (key == "overlap") {
        m.overlap = value.get<double>();
      } else if (key == "out") {
        m.out_dir = resolve(base_dir, value.get<std::string>());
      } else {
        throw ConfigError("unknown ablation matrix key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid ablation matrix: ") + e.what());
  }
  if (m.variants.empty() || m.projections.empty() || m.fusion_modes.empty()) {
    throw ConfigError("ablation matrix needs at least one variant, projection op and fusion mode");
  }
  const bool net_patch_given = j.contains("net") && j["net"].contains("patch_shape");
  if (m.train && !net_patch_given) m.net.patch_shape = m.train->patch.shape;
  if (m.train) m.train->validate();
  m.net.validate();
  return m;
}

std::string AblationResult::label() const {
  return std::string(to_string(variant)) + "/" + std::string(to_string(projection)) + "/" +
         std::string(to_string(fusion));
}

std::vector<AblationResult> run_ablation(const AblationMatrix& m,
                                         const std::function<void(const AblationResult&)>& on_cell) {
  std::vector<VolumeRecord> data;
  if (m.train) {
    if (m.dataset) {
      data = load_dataset(*m.dataset, "train");
    } else {
      for (int i = 0; i < m.phantom_cases; ++i) {
        data.push_back(synthesize_case(m.phantoms, case_seed(m.data_seed, static_cast<std::uint64_t>(i)),
                                       "case_" + std::to_string(i)));
      }
    }
  }

  std::vector<AblationResult> results;
  for (auto variant : m.variants) {
    for (auto projection : m.projections) {
      for (auto fusion : m.fusion_modes) {
        const auto t0 = std::chrono::steady_clock::now();
        AblationResult r;
        r.variant = variant;
        r.projection = projection;
        r.fusion = fusion;
        NetworkConfig nc = m.net;
        nc.variant = variant;
        nc.projection = projection;
        nc.fusion = fusion;
        try {
          Network<float> net = Network<float>::build(nc);
          r.params = net.param_count();
          {
            NoGradGuard no_grad;
            const auto& ps = nc.patch_shape;
            Tensor<float> x({1, nc.in_channels, ps[0], ps[1], ps[2]});
            std::mt19937_64 rng(nc.seed);
            std::normal_distribution<float> g;
            for (auto& v : x.data()) v = g(rng);
            ForwardTrace trace;
            const Var<float> y = net.forward(Var<float>(x, false), &trace);
            r.output_shape = y.shape();
            r.shape_ok = r.output_shape == Shape{1, nc.num_classes, ps[0], ps[1], ps[2]} &&
                         trace.encoder_outputs.size() == static_cast<std::size_t>(nc.levels);
            for (int i = 0; r.shape_ok && i < nc.levels; ++i) {
              const Shape want{1, nc.stage_channels(i), ps[0] >> i, ps[1] >> i, ps[2] >> i};
              r.shape_ok = trace.encoder_outputs[i] == want;
            }
            r.key_elements = per_channel(trace.encoder_keys.at(0)[0]);
            r.query_elements = per_channel(trace.encoder_queries.at(0)[0]);
          }
          if (m.train) {
            TrainConfig tc = *m.train;
            tc.net = nc;
            const auto cell_dir = m.out_dir / (std::string(to_string(variant)) + "_" +
                                               std::string(to_string(projection)) + "_" +
                                               std::string(to_string(fusion)));
            const Trainer t = train(tc, data, {cell_dir, std::nullopt, std::nullopt});
            r.final_loss = t.log().back().loss;
            r.mean_dsc.assign(static_cast<std::size_t>(nc.num_classes - 1), 0.0);
            for (const auto& rec : data) {
              const auto pred = sliding_window_infer(t.network(), rec, tc.patch.shape, m.overlap);
              for (Index k = 1; k < nc.num_classes; ++k) {
                r.mean_dsc[k - 1] += dice_score(pred, rec.label, static_cast<int>(k)) / data.size();
              }
            }
            r.axis_weights = axis_weight_table(t.network());
          } else {
            r.axis_weights = axis_weight_table(net);
          }
        } catch (const std::exception& e) {
          r.error = e.what();
          spdlog::error("ablation cell {} failed: {}", r.label(), r.error);
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (on_cell) on_cell(r);
        results.push_back(std::move(r));
      }
    }
  }
  return results;
}

std::string format_ablation_report(const std::vector<AblationResult>& results) {
  std::ostringstream os;
  os << std::left << std::setw(8) << "variant" << std::setw(14) << "projection" << std::setw(9) << "fusion"
     << std::right << std::setw(9) << "params" << std::setw(8) << "K/ch" << std::setw(8) << "Q/ch"
     << std::setw(7) << "shape" << std::setw(11) << "loss";
  std::size_t classes = 0;
  for (const auto& r : results) classes = std::max(classes, r.mean_dsc.size());
  for (std::size_t k = 0; k < classes; ++k) os << std::setw(10) << ("DSC-" + std::to_string(k + 1));
  os << '\n';
  for (const auto& r : results) {
    os << std::left << std::setw(8) << to_string(r.variant) << std::setw(14) << to_string(r.projection)
       << std::setw(9) << to_string(r.fusion) << std::right;
    if (!r.error.empty()) {
      os << "  error: " << r.error << '\n';
      continue;
    }
    os << std::setw(9) << r.params << std::setw(8) << r.key_elements << std::setw(8) << r.query_elements
       << std::setw(7) << (r.shape_ok ? "ok" : "BAD");
    os << std::setw(11);
    if (r.final_loss) {
      os << std::fixed << std::setprecision(5) << *r.final_loss;
    } else {
      os << "-";
    }
    for (std::size_t k = 0; k < classes; ++k) {
      os << std::setw(10);
      if (k < r.mean_dsc.size()) {
        os << std::fixed << std::setprecision(4) << r.mean_dsc[k];
      } else {
        os << "-";
      }
    }
    os << std::defaultfloat << '\n';
  }
  for (const auto& r : results) {
    if (!r.error.empty() || r.fusion != FusionMode::Learned || !r.final_loss) continue;
    os << "\nLearned axis weights, " << r.label() << '\n' << format_axis_weight_table(r.axis_weights);
  }
  return os.str();
}

nlohmann::json ablation_json(const std::vector<AblationResult>& results) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json j = {{"variant", std::string(to_string(r.variant))},
                        {"projection_op", std::string(to_string(r.projection))},
                        {"fusion_mode", std::string(to_string(r.fusion))},
                        {"params", r.params},
                        {"output_shape", r.output_shape},
                        {"shape_ok", r.shape_ok},
                        {"key_elements_per_channel", r.key_elements},
                        {"query_elements_per_channel", r.query_elements},
                        {"mean_dsc", r.mean_dsc},
                        {"axis_weights", axis_weights_json(r.axis_weights)},
                        {"seconds", r.seconds}};
    j["final_loss"] = r.final_loss ? nlohmann::json(*r.final_loss) : nlohmann::json(nullptr);
    if (!r.error.empty()) j["error"] = r.error;
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace apaseg
