#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "apaseg/errors.hpp"
#include "apaseg/train.hpp"

namespace apaseg {

namespace {

std::vector<Index> axis_positions(Index extent, Index patch, Index stride) {
  std::vector<Index> out;
  for (Index p = 0; p + patch < extent; p += stride) out.push_back(p);
  out.push_back(extent - patch);
  return out;
}

void check_fits(const Extent3& volume, const Extent3& patch, const char* where) {
  for (int a = 0; a < 3; ++a) {
    if (patch[a] < 1 || volume[a] < patch[a]) {
      throw ContractError(std::string(where) + ": volume " + shape_str({volume[0], volume[1], volume[2]}) +
                          " is smaller than patch " + shape_str({patch[0], patch[1], patch[2]}));
    }
  }
}

}  // namespace

std::vector<Extent3> window_origins(const Extent3& volume, const Extent3& patch, double overlap) {
  if (!(overlap >= 0.0 && overlap < 1.0)) {
    throw ContractError("window_origins: overlap must be in [0, 1)");
  }
  check_fits(volume, patch, "window_origins");
  std::array<std::vector<Index>, 3> pos;
  for (int a = 0; a < 3; ++a) {
    const Index stride =
        std::max<Index>(1, static_cast<Index>(std::floor(static_cast<double>(patch[a]) * (1.0 - overlap))));
    pos[a] = axis_positions(volume[a], patch[a], stride);
  }
  std::vector<Extent3> out;
  for (Index h : pos[0])
    for (Index w : pos[1])
      for (Index d : pos[2]) out.push_back({h, w, d});
  return out;
}

Tensor<std::int32_t> window_coverage(const Extent3& volume, const Extent3& patch,
                                     const std::vector<Extent3>& origins) {
  Tensor<std::int32_t> cov({volume[0], volume[1], volume[2]});
  for (const auto& o : origins) {
    for (Index h = o[0]; h < o[0] + patch[0]; ++h)
      for (Index w = o[1]; w < o[1] + patch[1]; ++w)
        for (Index d = o[2]; d < o[2] + patch[2]; ++d) ++cov[(h * volume[1] + w) * volume[2] + d];
  }
  return cov;
}

Tensor<float> sliding_window_probabilities(const Network<float>& net, const Tensor<float>& image,
                                           const Extent3& patch, const std::vector<Extent3>& origins) {
  require_rank(image.shape(), 3, "sliding_window_probabilities");
  const Extent3 vol{image.dim(0), image.dim(1), image.dim(2)};
  check_fits(vol, patch, "sliding_window_probabilities");
  if (origins.empty()) throw ContractError("sliding_window_probabilities: no windows");
  for (const auto& o : origins) {
    for (int a = 0; a < 3; ++a) {
      if (o[a] < 0 || o[a] + patch[a] > vol[a]) {
        throw ContractError("sliding_window_probabilities: window outside the volume");
      }
    }
  }
  // Accumulating in a canonical window order keeps the float sums independent
  // of how the caller enumerated the windows.
  std::vector<Extent3> ordered = origins;
  std::sort(ordered.begin(), ordered.end());

  const Index K = net.config().num_classes;
  const Index HW = vol[1] * vol[2];
  const Index P = patch[0] * patch[1] * patch[2];
  Tensor<float> sum({K, vol[0], vol[1], vol[2]});
  const auto coverage = window_coverage(vol, patch, ordered);

  NoGradGuard no_grad;
  for (const auto& o : ordered) {
    Tensor<float> window({1, 1, patch[0], patch[1], patch[2]});
    Index i = 0;
    for (Index h = 0; h < patch[0]; ++h)
      for (Index w = 0; w < patch[1]; ++w)
        for (Index d = 0; d < patch[2]; ++d)
          window[i++] = image[(o[0] + h) * HW + (o[1] + w) * vol[2] + o[2] + d];
    const Var<float> probs = class_probabilities(net.forward(Var<float>(std::move(window), false)));
    const Tensor<float>& p = probs.value();
    for (Index k = 0; k < K; ++k) {
      Index j = k * P;
      float* dst = sum.ptr() + k * vol[0] * HW;
      for (Index h = 0; h < patch[0]; ++h)
        for (Index w = 0; w < patch[1]; ++w)
          for (Index d = 0; d < patch[2]; ++d) dst[(o[0] + h) * HW + (o[1] + w) * vol[2] + o[2] + d] += p[j++];
    }
  }
  const Index V = vol[0] * HW;
  for (Index k = 0; k < K; ++k) {
    for (Index v = 0; v < V; ++v) sum[k * V + v] /= static_cast<float>(coverage[v]);
  }
  return sum;
}

LabelVolume argmax_labels(const Tensor<float>& probs) {
  require_rank(probs.shape(), 4, "argmax_labels");
  const Index K = probs.dim(0);
  if (K > 256) throw ContractError("argmax_labels: more than 256 classes");
  LabelVolume out({probs.dim(1), probs.dim(2), probs.dim(3)});
  const Index V = out.numel();
  for (Index v = 0; v < V; ++v) {
    Index best = 0;
    for (Index k = 1; k < K; ++k) {
      if (probs[k * V + v] > probs[best * V + v]) best = k;
    }
    out[v] = static_cast<std::uint8_t>(best);
  }
  return out;
}

LabelVolume sliding_window_infer(const Network<float>& net, const VolumeRecord& volume,
                                 const Extent3& patch, double overlap) {
  const auto origins = window_origins(volume.shape(), patch, overlap);
  return argmax_labels(sliding_window_probabilities(net, volume.image, patch, origins));
}

// ---- evaluation ------------------------------------------------------------------

EvalReport evaluate(const std::vector<VolumeRecord>& predictions,
                    const std::vector<VolumeRecord>& ground_truth, int num_classes,
                    const SizeBins& bins) {
  EvalReport r;
  std::map<std::string, const VolumeRecord*> preds;
  for (const auto& p : predictions) preds[p.case_id] = &p;
  std::set<std::string> seen;
  std::size_t evaluated = 0;
  for (const auto& gt : ground_truth) {
    seen.insert(gt.case_id);
    auto it = preds.find(gt.case_id);
    if (it == preds.end()) {
      r.unmatched.push_back({gt.case_id, "no prediction"});
      continue;
    }
    if (it->second->label.shape() != gt.label.shape()) {
      r.unmatched.push_back({gt.case_id, "prediction shape " + shape_str(it->second->label.shape()) +
                                             " differs from ground truth " + shape_str(gt.label.shape())});
      continue;
    }
    auto rows = case_metrics(gt.case_id, it->second->label, gt.label, num_classes, gt.spacing, bins);
    r.rows.insert(r.rows.end(), rows.begin(), rows.end());
    ++evaluated;
  }
  for (const auto& [id, p] : preds) {
    if (!seen.contains(id)) r.unmatched.push_back({id, "no ground truth"});
  }
  r.summary = metrics_summary(r.rows, bins);
  nlohmann::json errors = nlohmann::json::array();
  for (const auto& u : r.unmatched) errors.push_back({{"case_id", u.case_id}, {"reason", u.reason}});
  r.summary["unmatched"] = errors;
  r.summary["cases_evaluated"] = evaluated;
  return r;
}

std::vector<VolumeRecord> load_volumes(const std::filesystem::path& dir_or_index) {
  namespace fs = std::filesystem;
  if (fs::is_regular_file(dir_or_index)) return load_dataset(dir_or_index, "");
  if (!fs::is_directory(dir_or_index)) {
    throw ContractError("no such directory or dataset index: " + dir_or_index.string());
  }
  if (fs::exists(dir_or_index / "dataset.json")) return load_dataset(dir_or_index / "dataset.json", "");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir_or_index)) {
    if (e.is_regular_file() && e.path().extension() == ".vol") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<VolumeRecord> out;
  for (const auto& f : files) {
    out.push_back(load_volume(f));
    if (out.back().case_id.empty()) out.back().case_id = f.stem().string();
  }
  return out;
}

void write_eval_report(const std::filesystem::path& report, const EvalReport& r) {
  if (report.has_parent_path()) std::filesystem::create_directories(report.parent_path());
  auto csv_path = report;
  csv_path.replace_extension(".csv");
  auto json_path = report;
  if (json_path == csv_path) json_path.replace_extension(".json");
  std::ofstream(json_path) << r.summary.dump(2) << '\n';
  std::ofstream csv(csv_path);
  write_metrics_csv(csv, r.rows);
}

}  // namespace apaseg
