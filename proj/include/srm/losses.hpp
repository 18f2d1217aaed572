#pragma once

// Auxiliary training losses (sync, emotion, action units, attribute/action
// captions), the plain noise-prediction loss, and a weighted total with a
// per-component report. Each loss has a differentiable Tensor form and a
// scalar form over the plain domain types.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "srm/emotion.hpp"
#include "srm/serialize.hpp"
#include "srm/tensor.hpp"

namespace srm::losses {

/// Temporal offset magnitude and misalignment location, both in seconds.
struct SyncEstimate {
  double offset_s = 0.0;
  double timestamp_s = 0.0;
};

/// [T x N] action-unit intensities with column identifiers.
struct AUMatrix {
  Tensor values;
  std::vector<std::string> ids;

  std::size_t frames() const { return values.dim(0); }
  std::size_t units() const { return values.dim(1); }
};

struct CaptionEmbedding {
  Tensor vector;  // [D]
  double norm() const { return std::sqrt(dot(vector, vector).item()); }
};

// ---------------------------------------------------------------------------
// Tensor forms

/// pred, gt: [2] = (offset, timestamp).
inline Tensor sync_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.numel() != 2 || gt.numel() != 2) throw std::invalid_argument("sync_loss: expected (offset, timestamp) pairs");
  return sum(square(sub(reshape(pred, {2}), reshape(gt, {2}))));
}

/// pred, gt: [K, 2] rows of (valence, arousal).
inline Tensor emo_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.rank() != 2 || pred.dim(1) != 2 || gt.rank() != 2 || gt.dim(1) != 2)
    throw std::invalid_argument("emo_loss: expected [K, 2] tensors");
  if (pred.dim(0) != gt.dim(0))
    throw std::invalid_argument("emo_loss: segment count mismatch (" + std::to_string(pred.dim(0)) + " vs " +
                                std::to_string(gt.dim(0)) + "); resample first");
  if (pred.dim(0) == 0) throw std::invalid_argument("emo_loss: empty sequence");
  return scale(sum(square(sub(pred, gt))), 1.0 / static_cast<double>(pred.dim(0)));
}

inline Tensor au_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.rank() != 2 || pred.shape() != gt.shape())
    throw std::invalid_argument("au_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  if (pred.numel() == 0) throw std::invalid_argument("au_loss: empty matrix");
  return mse(pred, gt);
}

inline Tensor attr_action_loss(const Tensor& e_p, const Tensor& e_gt) {
  if (e_p.shape() != e_gt.shape()) throw std::invalid_argument("attr_action_loss: dimension mismatch");
  const Tensor np = dot(e_p, e_p), ng = dot(e_gt, e_gt);
  if (!(np.item() > 0.0) || !(ng.item() > 0.0)) throw std::invalid_argument("attr_action_loss: zero-norm embedding");
  const Tensor cos = div(dot(e_p, e_gt), sqrt(mul(np, ng)));
  return add_scalar(neg(cos), 1.0);
}

inline Tensor simple_loss(const Tensor& eps_pred, const Tensor& eps) {
  if (eps_pred.shape() != eps.shape())
    throw std::invalid_argument("simple_loss: shape mismatch " + shape_str(eps_pred.shape()) + " vs " +
                                shape_str(eps.shape()));
  return mse(eps_pred, eps);
}

// ---------------------------------------------------------------------------
// Scalar forms

inline double sync_loss(const SyncEstimate& pred, const SyncEstimate& gt) {
  const double a = pred.offset_s - gt.offset_s, b = pred.timestamp_s - gt.timestamp_s;
  return a * a + b * b;
}

inline Tensor va_tensor(const emotion::VASequence& s) {
  std::vector<double> v;
  for (const auto& p : s.pairs) {
    v.push_back(p.valence);
    v.push_back(p.arousal);
  }
  return Tensor({s.size(), 2}, std::move(v));
}

inline double emo_loss(const emotion::VASequence& pred, const emotion::VASequence& gt) {
  return emo_loss(va_tensor(pred), va_tensor(gt)).item();
}

inline double au_loss(const AUMatrix& pred, const AUMatrix& gt) {
  if (pred.ids != gt.ids) throw std::invalid_argument("au_loss: action-unit ids differ");
  return au_loss(pred.values, gt.values).item();
}

inline double attr_action_loss(const CaptionEmbedding& e_p, const CaptionEmbedding& e_gt) {
  return attr_action_loss(e_p.vector, e_gt.vector).item();
}

// ---------------------------------------------------------------------------
// Weighted total

struct Weights {
  double simple = 1.0;
  double sync = 0.1;
  double emo = 0.1;
  double au = 0.1;
  double attr = 0.05;

  double get(const std::string& component) const {
    if (component == "simple") return simple;
    if (component == "sync") return sync;
    if (component == "emo") return emo;
    if (component == "au") return au;
    if (component == "attr") return attr;
    throw std::invalid_argument("unknown loss component '" + component + "'");
  }
  bool any_aux() const { return sync > 0.0 || emo > 0.0 || au > 0.0 || attr > 0.0; }
};

struct Component {
  std::string name;
  Tensor raw;
  double weight = 1.0;
};

struct ReportLine {
  std::string component;
  double raw = 0.0;
  double weight = 0.0;
  double weighted = 0.0;
};

struct Total {
  Tensor value;
  std::vector<ReportLine> report;
};

inline Total total_loss(const std::vector<Component>& components) {
  Total out;
  out.value = Tensor({1}, 0.0);
  for (const auto& c : components) {
    if (!(c.weight >= 0.0)) throw std::invalid_argument("total_loss: negative weight for '" + c.name + "'");
    const double raw = c.raw.item();
    if (!std::isfinite(raw)) throw std::runtime_error("loss component '" + c.name + "' is not finite");
    out.value = add(out.value, scale(reshape(c.raw, {1}), c.weight));
    out.report.push_back({c.name, raw, c.weight, c.weight * raw});
  }
  return out;
}

inline Total total_loss(const std::vector<Component>& components, const Weights& w) {
  std::vector<Component> weighted = components;
  for (auto& c : weighted) c.weight = w.get(c.name);
  return total_loss(weighted);
}

inline json report_json(long step, const ReportLine& l) {
  return {{"step", step}, {"component", l.component}, {"raw", l.raw}, {"weight", l.weight}, {"weighted", l.weighted}};
}

/// Appends one JSON line per component.
class ReportWriter {
 public:
  ReportWriter() = default;
  explicit ReportWriter(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw IoError(path.string() + ": cannot open for writing");
  }
  void write(long step, const std::vector<ReportLine>& lines) {
    if (!out_.is_open()) return;
    for (const auto& l : lines) out_ << report_json(step, l).dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

}  // namespace srm::losses
