#include "apaseg/train.hpp"

#include <cmath>
#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>

#include <spdlog/spdlog.h>

#include "apaseg/errors.hpp"

namespace apaseg {

namespace {

nlohmann::json patch_to_json(const PatchSpec& p) {
  return {{"shape", p.shape}, {"oversample_ratio", p.oversample_ratio}};
}

PatchSpec patch_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("patch must be a JSON object");
  PatchSpec p;
  for (const auto& [key, value] : j.items()) {
    if (key == "shape") {
      p.shape = value.get<Extent3>();
    } else if (key == "oversample_ratio") {
      p.oversample_ratio = value.get<double>();
    } else {
      throw ConfigError("unknown patch key '" + key + "'");
    }
  }
  return p;
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

std::string fixed(double v, int digits = 6) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) {
    throw ConfigError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (steps_per_epoch < 0) throw ConfigError("steps_per_epoch must be >= 0");
  if (!(dice_eps > 0.0)) throw ConfigError("dice_eps must be positive");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  patch.validate();
  net.validate();
  if (net.patch_shape != patch.shape) {
    throw ConfigError("net.patch_shape must equal patch.shape");
  }
}

Index TrainConfig::resolved_steps(std::size_t cases) const {
  if (steps_per_epoch > 0) return steps_per_epoch;
  return std::max<Index>(1, (static_cast<Index>(cases) + batch_size - 1) / batch_size);
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"warmup_epochs", c.warmup_epochs},
          {"batch_size", c.batch_size},
          {"lr0", c.lr0},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"steps_per_epoch", c.steps_per_epoch},
          {"seed", c.seed},
          {"patch", patch_to_json(c.patch)},
          {"net", to_json(c.net)},
          {"dice_eps", c.dice_eps},
          {"checkpoint_every", c.checkpoint_every},
          {"flip", c.flip}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  bool net_patch_given = false;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "epochs") {
        c.epochs = value.get<int>();
      } else if (key == "warmup_epochs") {
        c.warmup_epochs = value.get<int>();
      } else if (key == "batch_size") {
        c.batch_size = value.get<Index>();
      } else if (key == "lr0") {
        c.lr0 = value.get<double>();
      } else if (key == "momentum") {
        c.momentum = value.get<double>();
      } else if (key == "weight_decay") {
        c.weight_decay = value.get<double>();
      } else if (key == "steps_per_epoch") {
        c.steps_per_epoch = value.get<Index>();
      } else if (key == "seed") {
        c.seed = value.get<std::uint64_t>();
      } else if (key == "patch") {
        c.patch = patch_from_json(value);
      } else if (key == "net") {
        c.net = network_config_from_json(value);
        net_patch_given = value.contains("patch_shape");
      } else if (key == "dice_eps") {
        c.dice_eps = value.get<double>();
      } else if (key == "checkpoint_every") {
        c.checkpoint_every = value.get<int>();
      } else if (key == "flip") {
        c.flip = value.get<bool>();
      } else {
        throw ConfigError("unknown train config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid train config: ") + e.what());
  }
  if (!net_patch_given) c.net.patch_shape = c.patch.shape;
  return c;
}

double cosine_lr(double epoch, const TrainConfig& cfg) {
  const double total = cfg.epochs;
  const double warm = cfg.warmup_epochs;
  const double e = std::clamp(epoch, 0.0, total);
  if (e < warm) return cfg.lr0 * e / warm;
  return cfg.lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * (e - warm) / (total - warm)));
}

// ---- optimiser -------------------------------------------------------------------

template <typename T>
Sgd<T>::Sgd(const ParamList<T>& params) {
  buffers_.reserve(params.size());
  for (const auto& p : params) buffers_.emplace_back(p.var.shape());
}

template <typename T>
void Sgd<T>::step(const ParamList<T>& params, double lr, double momentum, double weight_decay) {
  if (params.size() != buffers_.size()) {
    throw ContractError("Sgd::step: parameter list changed size");
  }
  const T lr_t = static_cast<T>(lr);
  const T mom = static_cast<T>(momentum);
  const T wd = static_cast<T>(weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var<T> v = params[i].var;
    auto p = v.mutable_value().data();
    auto buf = buffers_[i].data();
    if (v.has_grad()) {
      auto g = v.grad().data();
      for (std::size_t k = 0; k < p.size(); ++k) buf[k] = mom * buf[k] + (g[k] + wd * p[k]);
    } else {
      for (std::size_t k = 0; k < p.size(); ++k) buf[k] = mom * buf[k] + wd * p[k];
    }
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr_t * buf[k];
  }
}

template class Sgd<float>;
template class Sgd<double>;

// ---- trainer -----------------------------------------------------------------------

nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"loss", r.loss}, {"dice", r.dice}, {"ce", r.ce}, {"lr", r.lr}};
}

EpochRecord epoch_record_from_json(const nlohmann::json& j) {
  return {j.at("epoch").get<int>(), j.at("loss").get<double>(), j.at("dice").get<double>(),
          j.at("ce").get<double>(), j.at("lr").get<double>()};
}

namespace {

NetworkConfig seeded(NetworkConfig net, std::uint64_t seed) {
  net.seed = seed;
  return net;
}

}  // namespace

Trainer::Trainer(TrainConfig cfg, std::vector<VolumeRecord> dataset)
    : cfg_((cfg.validate(), std::move(cfg))),
      dataset_(std::make_shared<const std::vector<VolumeRecord>>(std::move(dataset))),
      net_(Network<float>::build(seeded(cfg_.net, cfg_.seed))),
      opt_(net_.parameters()),
      rng_(cfg_.seed) {
  if (dataset_->empty()) throw ContractError("Trainer: dataset is empty");
  for (const auto& r : *dataset_) r.validate(static_cast<int>(cfg_.net.num_classes));
  sampler_ = std::make_unique<PatchSampler>(*dataset_, cfg_.patch);
  steps_per_epoch_ = cfg_.resolved_steps(dataset_->size());
}

StepStats Trainer::step() {
  const double position = epoch_ + (static_cast<double>(step_in_epoch_) + 0.5) / steps_per_epoch_;
  const double lr = cosine_lr(position, cfg_);

  auto patches = sampler_->sample_batch(cfg_.batch_size, rng_);
  if (cfg_.flip) {
    for (auto& p : patches) random_flip(p.image, p.label, rng_);
  }
  const Batch batch = stack_patches(patches);
  const Tensor<float> onehot = one_hot<float>(batch.labels, cfg_.net.num_classes);

  auto params = net_.parameters();
  zero_grads(params);
  const Var<float> probs = class_probabilities(net_.forward(Var<float>(batch.images, false)));
  const DiceOptions dice_opt{false, cfg_.dice_eps};
  const Var<float> dice = dice_loss(probs, onehot, dice_opt);
  const Var<float> ce = ce_loss(probs, onehot);
  const Var<float> loss = ops::add(dice, ce);

  StepStats s{loss.value()[0], dice.value()[0], ce.value()[0], lr};
  if (!std::isfinite(s.loss)) {
    throw TrainingError("non-finite loss at step " + std::to_string(global_step_) + " (epoch " +
                        std::to_string(epoch_ + 1) + "): lr=" + fixed(lr, 17) +
                        " dice=" + fixed(s.dice, 17) + " ce=" + fixed(s.ce, 17));
  }
  backward(loss);
  opt_.step(params, lr, cfg_.momentum, cfg_.weight_decay);

  ++global_step_;
  ++step_in_epoch_;
  epoch_sums_.loss += s.loss;
  epoch_sums_.dice += s.dice;
  epoch_sums_.ce += s.ce;
  epoch_sums_.lr = lr;
  return s;
}

EpochRecord Trainer::run_epoch() {
  while (step_in_epoch_ < steps_per_epoch_) step();
  const double n = static_cast<double>(steps_per_epoch_);
  EpochRecord r{epoch_ + 1, epoch_sums_.loss / n, epoch_sums_.dice / n, epoch_sums_.ce / n,
                epoch_sums_.lr};
  log_.push_back(r);
  ++epoch_;
  step_in_epoch_ = 0;
  epoch_sums_ = {};
  return r;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  CheckpointData data{net_.config(), export_parameters(net_), nlohmann::json::object()};
  const auto params = net_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    data.tensors.push_back({"momentum/" + params[i].name, opt_.buffers()[i]});
  }
  nlohmann::json log = nlohmann::json::array();
  for (const auto& r : log_) log.push_back(to_json(r));
  data.extra = {{"train_config", to_json(cfg_)},
                {"epoch", epoch_},
                {"step_in_epoch", step_in_epoch_},
                {"global_step", global_step_},
                {"epoch_sums", {epoch_sums_.loss, epoch_sums_.dice, epoch_sums_.ce, epoch_sums_.lr}},
                {"rng", rng_state(rng_)},
                {"log", log}};
  write_checkpoint(path, data);
}

Trainer Trainer::resume(const std::filesystem::path& checkpoint, std::vector<VolumeRecord> dataset) {
  const CheckpointData data = read_checkpoint(checkpoint);
  const auto& extra = data.extra;
  if (!extra.contains("train_config")) {
    throw FormatError("checkpoint " + checkpoint.string() + " carries no training state", 0);
  }
  try {
    Trainer t(train_config_from_json(extra.at("train_config")), std::move(dataset));
    import_parameters(t.net_, data.tensors);
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& nt : data.tensors) by_name[nt.name] = &nt.value;
    const auto params = t.net_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto it = by_name.find("momentum/" + params[i].name);
      if (it == by_name.end() || it->second->shape() != params[i].var.shape()) {
        throw FormatError("checkpoint lacks momentum buffer for '" + params[i].name + "'", 0);
      }
      t.opt_.buffers()[i] = *it->second;
    }
    t.epoch_ = extra.at("epoch").get<int>();
    t.step_in_epoch_ = extra.at("step_in_epoch").get<Index>();
    t.global_step_ = extra.at("global_step").get<std::uint64_t>();
    const auto sums = extra.at("epoch_sums").get<std::array<double, 4>>();
    t.epoch_sums_ = {sums[0], sums[1], sums[2], sums[3]};
    std::istringstream is(extra.at("rng").get<std::string>());
    is >> t.rng_;
    if (!is) throw FormatError("checkpoint rng state is malformed", 0);
    for (const auto& r : extra.at("log")) t.log_.push_back(epoch_record_from_json(r));
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint training state is malformed: ") + e.what(), 0);
  }
}

void write_train_log_csv(std::ostream& os, const std::vector<EpochRecord>& log) {
  os << "epoch,loss,dice,ce,lr\n";
  os << std::setprecision(17);
  for (const auto& r : log) {
    os << r.epoch << ',' << r.loss << ',' << r.dice << ',' << r.ce << ',' << r.lr << '\n';
  }
}

nlohmann::json axis_weights_json(const std::vector<AxisWeightRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"stage", r.stage},
                   {"sagittal", r.weights[0]},
                   {"axial", r.weights[1]},
                   {"coronal", r.weights[2]}});
  }
  return out;
}

Trainer train(const TrainConfig& cfg, std::vector<VolumeRecord> dataset, const TrainOutputs& out) {
  std::filesystem::create_directories(out.out_dir);
  Trainer t = out.resume_from ? Trainer::resume(*out.resume_from, std::move(dataset))
                              : Trainer(cfg, std::move(dataset));
  if (out.resume_from && to_json(t.config()) != to_json(cfg)) {
    spdlog::warn("resuming with the configuration stored in {}", out.resume_from->string());
  }
  const auto& c = t.config();
  spdlog::info("training {} parameters, {} steps per epoch, epochs {}..{}", t.network().param_count(),
               t.steps_per_epoch(), t.epoch() + 1, c.epochs);

  std::ofstream text(out.out_dir / "train.log", out.resume_from ? std::ios::app : std::ios::trunc);
  auto epoch_line = [](const EpochRecord& r, int total) {
    std::ostringstream os;
    os << "epoch " << r.epoch << "/" << total << " loss=" << fixed(r.loss) << " dice=" << fixed(r.dice)
       << " ce=" << fixed(r.ce) << " lr=" << fixed(r.lr);
    return os.str();
  };
  while (t.epoch() < c.epochs && (!out.stop_epoch || t.epoch() < *out.stop_epoch)) {
    const EpochRecord r = t.run_epoch();
    const std::string line = epoch_line(r, c.epochs);
    spdlog::info("{}", line);
    text << line << '\n' << std::flush;
    if (c.checkpoint_every > 0 && r.epoch % c.checkpoint_every == 0) {
      std::ostringstream name;
      name << "epoch_" << std::setw(4) << std::setfill('0') << r.epoch << ".ckpt";
      t.save_checkpoint(out.out_dir / name.str());
    }
  }
  t.save_checkpoint(out.out_dir / "final.ckpt");

  std::ofstream csv(out.out_dir / "train_log.csv");
  write_train_log_csv(csv, t.log());
  const auto rows = axis_weight_table(t.network());
  const std::string table = format_axis_weight_table(rows);
  text << "\nLearned axis weights\n" << table;
  spdlog::info("learned axis weights\n{}", table);
  std::ofstream(out.out_dir / "axis_weights.json") << axis_weights_json(rows).dump(2) << '\n';
  return t;
}

}  // namespace apaseg
