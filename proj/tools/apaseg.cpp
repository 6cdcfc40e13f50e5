// apaseg: command-line front end for phantom synthesis, training, inference,
// evaluation, ablation grids and the gradient-check suite.
//
// Every subcommand accepts --config <file.json>. Flags are written over the
// matching config keys before the config is parsed, and APASEG_SEED (when
// set) replaces the config seed but loses to an explicit --seed.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "apaseg/ablation.hpp"
#include "apaseg/errors.hpp"
#include "apaseg/gradcheck_suite.hpp"
#include "apaseg/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace apaseg;

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

std::optional<std::uint64_t> env_seed() {
  const char* raw = std::getenv("APASEG_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(raw, &used);
    if (used != std::string(raw).size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string("APASEG_SEED must be a non-negative integer, got '") + raw + "'");
  }
}

/// A config document being assembled from file, environment and flags.
class Layered {
 public:
  explicit Layered(const std::optional<std::string>& config_path) {
    if (config_path) {
      doc_ = read_json_file(*config_path);
      if (!doc_.is_object()) throw ConfigError("config file must hold a JSON object");
      base_ = fs::path(*config_path).parent_path();
    }
  }

  template <typename T>
  void set(const std::string& pointer, const std::optional<T>& v) {
    if (v) doc_[json::json_pointer(pointer)] = *v;
  }

  void seed(const std::string& pointer, const std::optional<std::uint64_t>& flag) {
    set(pointer, env_seed());
    set(pointer, flag);
  }

  /// Removes and returns a string key; relative paths resolve against the config file.
  std::optional<fs::path> take_path(const std::string& key) {
    if (!doc_.contains(key)) return std::nullopt;
    const fs::path p(doc_[key].get<std::string>());
    doc_.erase(key);
    return p.is_absolute() || base_.empty() ? p : base_ / p;
  }

  template <typename T>
  std::optional<T> take(const std::string& key) {
    if (!doc_.contains(key)) return std::nullopt;
    T v = doc_[key].get<T>();
    doc_.erase(key);
    return v;
  }

  json& doc() { return doc_; }
  const fs::path& base() const { return base_; }

 private:
  json doc_ = json::object();
  fs::path base_;
};

fs::path require_path(const std::optional<fs::path>& p, const char* what) {
  if (!p) throw ConfigError(std::string("missing ") + what);
  return *p;
}


// ---- synth ---------------------------------------------------------------------------

struct SynthArgs {
  std::optional<std::string> config, out;
  std::optional<int> cases, val_cases;
  std::optional<std::uint64_t> seed;
  std::optional<std::vector<Index>> shape;
};

int run_synth(const SynthArgs& a) {
  Layered cfg(a.config);
  cfg.set("/out", a.out);
  cfg.set("/cases", a.cases);
  cfg.set("/val_cases", a.val_cases);
  cfg.seed("/seed", a.seed);
  cfg.set("/phantom/shape", a.shape);
  const fs::path out = require_path(cfg.take_path("out"), "--out");
  const int cases = cfg.take<int>("cases").value_or(8);
  const int val = cfg.take<int>("val_cases").value_or(0);
  const auto seed = cfg.take<std::uint64_t>("seed").value_or(0);
  const SyntheticSpec spec = synthetic_spec_from_json(cfg.take<json>("phantom").value_or(json::object()));
  if (!cfg.doc().empty()) throw ConfigError("unknown synth config key '" + cfg.doc().begin().key() + "'");
  if (cases < 1 || val < 0 || val > cases) throw ConfigError("need cases >= 1 and 0 <= val_cases <= cases");
  const auto index = synthesize_dataset(spec, cases, seed, out, val);
  spdlog::info("wrote {} phantom cases to {}", cases, index.string());
  std::cout << index.string() << '\n';
  return 0;
}

// ---- train ---------------------------------------------------------------------------

struct TrainArgs {
  std::optional<std::string> config, out, data, split, resume, variant, projection, fusion;
  std::optional<int> epochs, warmup, checkpoint_every, stop_epoch, levels;
  std::optional<Index> batch_size, steps_per_epoch, base_channels;
  std::optional<double> lr0, momentum, weight_decay, oversample;
  std::optional<std::uint64_t> seed;
  std::optional<std::vector<Index>> patch;
  bool eval_train = false;
};

int run_train(const TrainArgs& a) {
  Layered cfg(a.config);
  cfg.set("/out", a.out);
  cfg.set("/data", a.data);
  cfg.set("/split", a.split);
  cfg.set("/epochs", a.epochs);
  cfg.set("/warmup_epochs", a.warmup);
  cfg.set("/batch_size", a.batch_size);
  cfg.set("/lr0", a.lr0);
  cfg.set("/momentum", a.momentum);
  cfg.set("/weight_decay", a.weight_decay);
  cfg.set("/steps_per_epoch", a.steps_per_epoch);
  cfg.set("/checkpoint_every", a.checkpoint_every);
  cfg.seed("/seed", a.seed);
  cfg.set("/net/levels", a.levels);
  cfg.set("/net/base_channels", a.base_channels);
  cfg.set("/net/variant", a.variant);
  cfg.set("/net/projection_op", a.projection);
  cfg.set("/net/fusion_mode", a.fusion);
  cfg.set("/patch/oversample_ratio", a.oversample);
  if (a.patch) {
    cfg.set("/patch/shape", a.patch);
    if (cfg.doc().contains("net")) cfg.doc()["net"].erase("patch_shape");
  }
  const fs::path out = require_path(cfg.take_path("out"), "--out");
  const fs::path data = require_path(cfg.take_path("data"), "--data (dataset.json)");
  const std::string split = cfg.take<std::string>("split").value_or("train");
  const TrainConfig tc = train_config_from_json(cfg.doc());
  tc.validate();

  auto dataset = load_dataset(data, split);
  if (dataset.empty()) throw ConfigError("split '" + split + "' of " + data.string() + " is empty");
  fs::create_directories(out);
  std::ofstream(out / "config.json") << to_json(tc).dump(2) << '\n';

  TrainOutputs outputs{out, std::nullopt, a.stop_epoch};
  if (a.resume) outputs.resume_from = fs::path(*a.resume);
  const Trainer t = train(tc, dataset, outputs);
  std::cout << "final checkpoint: " << (out / "final.ckpt").string() << '\n';

  if (a.eval_train) {
    std::vector<VolumeRecord> preds;
    for (const auto& rec : dataset) {
      VolumeRecord p = rec;
      p.label = sliding_window_infer(t.network(), rec, tc.patch.shape, 0.5);
      preds.push_back(std::move(p));
    }
    const EvalReport report = evaluate(preds, dataset, static_cast<int>(tc.net.num_classes));
    write_eval_report(out / "train_eval.json", report);
    std::cout << "training-set metrics:\n" << report.summary["classes"].dump(2) << '\n';
  }
  return 0;
}

// ---- infer ---------------------------------------------------------------------------

struct InferArgs {
  std::optional<std::string> config, ckpt, in, out;
  std::optional<double> overlap;
  std::optional<std::vector<Index>> patch;
};

int run_infer(const InferArgs& a) {
  Layered cfg(a.config);
  cfg.set("/ckpt", a.ckpt);
  cfg.set("/in", a.in);
  cfg.set("/out", a.out);
  cfg.set("/overlap", a.overlap);
  cfg.set("/patch", a.patch);
  const fs::path ckpt = require_path(cfg.take_path("ckpt"), "--ckpt");
  const fs::path in = require_path(cfg.take_path("in"), "--in");
  const fs::path out = require_path(cfg.take_path("out"), "--out");
  const double overlap = cfg.take<double>("overlap").value_or(0.5);
  const auto patch_override = cfg.take<Extent3>("patch");
  if (!cfg.doc().empty()) throw ConfigError("unknown infer config key '" + cfg.doc().begin().key() + "'");

  const Network<float> net = load_network(ckpt);
  const Extent3 patch = patch_override.value_or(net.config().patch_shape);
  fs::create_directories(out);
  const auto volumes = load_volumes(in);
  for (const auto& rec : volumes) {
    VolumeRecord pred = rec;
    pred.label = sliding_window_infer(net, rec, patch, overlap);
    pred.meta = {{"prediction_of", rec.case_id}, {"checkpoint", ckpt.string()}, {"overlap", overlap}};
    save_volume(out / (rec.case_id + ".vol"), pred);
    spdlog::info("predicted {}", rec.case_id);
  }
  std::cout << volumes.size() << " predictions written to " << out.string() << '\n';
  return 0;
}

// ---- eval ----------------------------------------------------------------------------

struct EvalArgs {
  std::optional<std::string> config, pred, gt, report;
  std::optional<int> num_classes;
};

int run_eval(const EvalArgs& a) {
  Layered cfg(a.config);
  cfg.set("/pred", a.pred);
  cfg.set("/gt", a.gt);
  cfg.set("/report", a.report);
  cfg.set("/num_classes", a.num_classes);
  const fs::path pred = require_path(cfg.take_path("pred"), "--pred");
  const fs::path gt = require_path(cfg.take_path("gt"), "--gt");
  const fs::path report = require_path(cfg.take_path("report"), "--report");
  const int classes = cfg.take<int>("num_classes").value_or(3);
  if (!cfg.doc().empty()) throw ConfigError("unknown eval config key '" + cfg.doc().begin().key() + "'");

  const EvalReport r = evaluate(load_volumes(pred), load_volumes(gt), classes);
  write_eval_report(report, r);
  for (const auto& u : r.unmatched) spdlog::warn("unmatched case {}: {}", u.case_id, u.reason);
  std::cout << r.summary.dump(2) << '\n';
  return 0;
}

// ---- ablate --------------------------------------------------------------------------

struct AblateArgs {
  std::optional<std::string> matrix, out;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  bool forward_only = false;
};

int run_ablate(const AblateArgs& a) {
  Layered cfg(a.matrix);
  cfg.set("/out", a.out);
  if (a.forward_only) cfg.doc().erase("train");
  if (cfg.doc().contains("train")) {
    cfg.set("/train/epochs", a.epochs);
    cfg.seed("/train/seed", a.seed);
  } else if (a.epochs) {
    throw ConfigError("--epochs needs a 'train' section in the matrix");
  }
  cfg.seed("/net/seed", a.seed);
  const AblationMatrix m = ablation_matrix_from_json(cfg.doc(), cfg.base());
  fs::create_directories(m.out_dir);
  const auto results = run_ablation(m, [](const AblationResult& r) {
    spdlog::info("{}: {} params, K/ch {}, {:.1f}s{}", r.label(), r.params, r.key_elements, r.seconds,
                 r.error.empty() ? "" : " (failed)");
  });
  const std::string report = format_ablation_report(results);
  std::ofstream(m.out_dir / "ablation.txt") << report;
  std::ofstream(m.out_dir / "ablation.json") << ablation_json(results).dump(2) << '\n';
  std::cout << report;
  bool ok = true;
  for (const auto& r : results) ok = ok && r.error.empty() && r.shape_ok;
  return ok ? 0 : 1;
}

// ---- gradcheck -----------------------------------------------------------------------

int run_gradcheck(double tolerance, bool quiet) {
  const GradCheckReport r = run_gradcheck_suite(tolerance, [&](const GradCheckCase& c) {
    if (!quiet || !c.result.passed(tolerance)) std::cout << format_case(c, tolerance) << '\n';
  });
  std::cout << r.cases.size() - r.failures() << "/" << r.cases.size() << " gradient checks passed (tolerance "
            << tolerance << ", " << r.seconds << " s)\n";
  return r.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D segmentation with axis-projected attention blocks"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off")->capture_default_str();

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic phantom dataset");
  synth->add_option("--config", sa.config, "JSON config (out, cases, val_cases, seed, phantom)");
  synth->add_option("--out", sa.out, "Output directory");
  synth->add_option("--cases", sa.cases, "Number of cases");
  synth->add_option("--val-cases", sa.val_cases, "Cases assigned to the val split");
  synth->add_option("--seed", sa.seed, "Dataset seed");
  synth->add_option("--shape", sa.shape, "Volume shape H W D")->expected(3);

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a network on a dataset");
  tr->add_option("--config", ta.config, "JSON training config");
  tr->add_option("--out", ta.out, "Output directory");
  tr->add_option("--data", ta.data, "dataset.json");
  tr->add_option("--split", ta.split, "Dataset split to train on");
  tr->add_option("--epochs", ta.epochs);
  tr->add_option("--warmup-epochs", ta.warmup);
  tr->add_option("--batch-size", ta.batch_size);
  tr->add_option("--lr0", ta.lr0);
  tr->add_option("--momentum", ta.momentum);
  tr->add_option("--weight-decay", ta.weight_decay);
  tr->add_option("--steps-per-epoch", ta.steps_per_epoch);
  tr->add_option("--checkpoint-every", ta.checkpoint_every);
  tr->add_option("--seed", ta.seed);
  tr->add_option("--levels", ta.levels);
  tr->add_option("--base-channels", ta.base_channels);
  tr->add_option("--variant", ta.variant, "APA|CoT2D|CoT3D");
  tr->add_option("--projection-op", ta.projection, "AvgPlusMax|Avg|Max|DepthwiseConv");
  tr->add_option("--fusion-mode", ta.fusion, "learned|mean");
  tr->add_option("--oversample-ratio", ta.oversample);
  tr->add_option("--patch", ta.patch, "Patch shape H W D")->expected(3);
  tr->add_option("--resume", ta.resume, "Checkpoint to resume from");
  tr->add_option("--stop-epoch", ta.stop_epoch, "Stop after this many completed epochs");
  tr->add_flag("--eval-train", ta.eval_train, "Evaluate on the training cases afterwards");

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "Sliding-window inference over a directory of volumes");
  inf->add_option("--config", ia.config);
  inf->add_option("--ckpt", ia.ckpt, "Checkpoint");
  inf->add_option("--in", ia.in, "Directory of .vol files or a dataset.json");
  inf->add_option("--out", ia.out, "Output directory for predictions");
  inf->add_option("--overlap", ia.overlap, "Window overlap in [0, 1), default 0.5");
  inf->add_option("--patch", ia.patch, "Window shape H W D")->expected(3);

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Score predictions against ground truth");
  ev->add_option("--config", ea.config);
  ev->add_option("--pred", ea.pred, "Prediction directory");
  ev->add_option("--gt", ea.gt, "Ground-truth directory or dataset.json");
  ev->add_option("--report", ea.report, "Report path (.json); a .csv is written next to it");
  ev->add_option("--num-classes", ea.num_classes);

  AblateArgs aa;
  auto* ab = app.add_subcommand("ablate", "Run a variant x projection x fusion grid");
  ab->add_option("--matrix", aa.matrix, "Ablation matrix JSON")->required();
  ab->add_option("--out", aa.out);
  ab->add_option("--epochs", aa.epochs);
  ab->add_option("--seed", aa.seed);
  ab->add_flag("--forward-only", aa.forward_only, "Skip training; build and run forward only");

  double tolerance = 1e-4;
  bool quiet = false;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--tolerance", tolerance)->capture_default_str();
  gc->add_flag("--quiet", quiet, "Only print failures and the summary");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*synth) return run_synth(sa);
    if (*tr) return run_train(ta);
    if (*inf) return run_infer(ia);
    if (*ev) return run_eval(ea);
    if (*ab) return run_ablate(aa);
    if (*gc) return run_gradcheck(tolerance, quiet);
  } catch (const ConfigError& e) {
    spdlog::error("configuration error: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
