#pragma once

// Evaluation metrics: PSNR, SSIM, CCC, micro F1 over action units, Frechet
// distance on feature statistics (and E-FID on expression features), and a
// pluggable sync-confidence score.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "srm/losses.hpp"
#include "srm/predictors.hpp"
#include "srm/serialize.hpp"
#include "srm/tensor.hpp"

namespace srm::metrics {

/// Returned by psnr() for identical images.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

inline double psnr(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("psnr: shape mismatch");
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  const double m = se / static_cast<double>(a.numel());
  if (m == 0.0) return kPsnrIdentical;
  return 10.0 * std::log10(1.0 / m);
}

struct SsimOptions {
  std::size_t window = 8;
  double c1 = 1e-4;  // (0.01)^2
  double c2 = 9e-4;  // (0.03)^2
  bool gaussian = false;  // 11x11, sigma 1.5 when set
};

namespace detail {
inline std::vector<double> ssim_weights(const SsimOptions& o) {
  const std::size_t w = o.gaussian ? 11 : o.window;
  std::vector<double> k(w * w, 1.0);
  if (o.gaussian) {
    const double c = static_cast<double>(w - 1) / 2.0;
    for (std::size_t y = 0; y < w; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - c, dx = static_cast<double>(x) - c;
        k[y * w + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
      }
  }
  double s = 0.0;
  for (double v : k) s += v;
  for (auto& v : k) v /= s;
  return k;
}
}  // namespace detail

/// Mean local SSIM over all valid window positions and channels of [C, H, W]
/// (or [H, W]) images in [0, 1].
inline double ssim(const Tensor& a, const Tensor& b, const SsimOptions& o = {}) {
  if (a.shape() != b.shape()) throw std::invalid_argument("ssim: shape mismatch");
  if (a.rank() < 2) throw std::invalid_argument("ssim: need at least [H, W]");
  const std::size_t H = a.dim(a.rank() - 2), W = a.dim(a.rank() - 1), C = a.numel() / (H * W);
  const std::size_t w = o.gaussian ? 11 : o.window;
  if (H < w || W < w) throw std::invalid_argument("ssim: image smaller than window");
  const auto k = detail::ssim_weights(o);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y0 = 0; y0 + w <= H; ++y0)
      for (std::size_t x0 = 0; x0 + w <= W; ++x0) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t y = 0; y < w; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const double kw = k[y * w + x];
            const std::size_t i = (c * H + y0 + y) * W + x0 + x;
            ma += kw * a[i];
            mb += kw * b[i];
            saa += kw * a[i] * a[i];
            sbb += kw * b[i] * b[i];
            sab += kw * a[i] * b[i];
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + o.c1) * (2 * cov + o.c2)) / ((ma * ma + mb * mb + o.c1) * (va + vb + o.c2));
        ++count;
      }
  return total / static_cast<double>(count);
}

/// Concordance correlation coefficient with population moments. Two equal
/// constant sequences (zero denominator) give 0.
inline double ccc(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("ccc: length mismatch");
  if (x.size() < 2) throw std::invalid_argument("ccc: need at least 2 values");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double vx = 0, vy = 0, cxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
    cxy += (x[i] - mx) * (y[i] - my);
  }
  vx /= n;
  vy /= n;
  cxy /= n;
  const double den = vx + vy + (mx - my) * (mx - my);
  if (den == 0.0) return 0.0;
  return 2.0 * cxy / den;
}

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline Confusion au_confusion(const Tensor& pred, const Tensor& gt, double threshold = 0.5) {
  if (pred.shape() != gt.shape()) throw std::invalid_argument("f1_au: shape mismatch");
  Confusion c;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i] >= threshold, g = gt[i] >= threshold;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

inline double f1_from(const Confusion& c) {
  const double den = 2.0 * static_cast<double>(c.tp) + static_cast<double>(c.fp + c.fn);
  return den == 0.0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / den;
}

/// Micro-averaged F1 over all binarized cells; 0 when neither side has positives.
inline double f1_au(const Tensor& pred, const Tensor& gt, double threshold = 0.5) {
  return f1_from(au_confusion(pred, gt, threshold));
}

inline double f1_au(const losses::AUMatrix& pred, const losses::AUMatrix& gt, double threshold = 0.5) {
  if (pred.ids != gt.ids) throw std::invalid_argument("f1_au: action-unit ids differ");
  return f1_au(pred.values, gt.values, threshold);
}

// ---------------------------------------------------------------------------
// Feature statistics

/// Running mean / population covariance; partial stats merge exactly.
struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // population covariance
  std::size_t n = 0;

  FeatureStats() = default;
  explicit FeatureStats(std::size_t dim)
      : mean(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim))),
        cov(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim))) {}

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }

  void add(const std::vector<double>& x) {
    if (x.size() != dim()) throw std::invalid_argument("FeatureStats: dimension mismatch");
    FeatureStats one(dim());
    for (std::size_t i = 0; i < x.size(); ++i) one.mean[static_cast<Eigen::Index>(i)] = x[i];
    one.n = 1;
    merge(one);
  }

  /// Chan et al. pairwise update on population moments.
  void merge(const FeatureStats& o) {
    if (o.n == 0) return;
    if (n == 0) {
      *this = o;
      return;
    }
    if (o.dim() != dim()) throw std::invalid_argument("FeatureStats: dimension mismatch");
    const double na = static_cast<double>(n), nb = static_cast<double>(o.n), nt = na + nb;
    const Eigen::VectorXd delta = o.mean - mean;
    cov = (na * cov + nb * o.cov + (na * nb / nt) * delta * delta.transpose()) / nt;
    mean += delta * (nb / nt);
    n += o.n;
  }

  /// Rows of [N, D].
  static FeatureStats from_rows(const Tensor& rows) {
    if (rows.rank() != 2 || rows.dim(0) == 0) throw std::invalid_argument("FeatureStats: expected non-empty [N, D]");
    const std::size_t N = rows.dim(0), D = rows.dim(1);
    FeatureStats s(D);
    for (std::size_t r = 0; r < N; ++r)
      for (std::size_t d = 0; d < D; ++d) s.mean[static_cast<Eigen::Index>(d)] += rows[r * D + d];
    s.mean /= static_cast<double>(N);
    for (std::size_t r = 0; r < N; ++r) {
      Eigen::VectorXd x(static_cast<Eigen::Index>(D));
      for (std::size_t d = 0; d < D; ++d) x[static_cast<Eigen::Index>(d)] = rows[r * D + d] - s.mean[static_cast<Eigen::Index>(d)];
      s.cov.noalias() += x * x.transpose();
    }
    s.cov /= static_cast<double>(N);
    s.n = N;
    return s;
  }
};

inline constexpr double kCovShrinkage = 1e-6;

namespace detail {
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) ev[i] = std::sqrt(std::max(ev[i], 0.0));
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}
}  // namespace detail

/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), with eps*I added to both
/// covariances. The cross term is Tr sqrt(sqrt(S1) S2 sqrt(S1)), which is
/// symmetric and shares its trace with (S1 S2)^{1/2}.
inline double frechet_distance(const FeatureStats& a, const FeatureStats& b, double shrinkage = kCovShrinkage) {
  if (a.dim() != b.dim()) throw std::invalid_argument("frechet_distance: dimension mismatch");
  const auto D = static_cast<Eigen::Index>(a.dim());
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(D, D);
  const Eigen::MatrixXd s1 = a.cov + shrinkage * I, s2 = b.cov + shrinkage * I;
  const Eigen::MatrixXd r1 = detail::psd_sqrt(s1);
  const double cross = detail::psd_sqrt(r1 * s2 * r1).trace();
  const double d = (a.mean - b.mean).squaredNorm() + s1.trace() + s2.trace() - 2.0 * cross;
  return std::max(d, 0.0);
}

using ExpressionExtractor = std::function<Tensor(const Tensor& frames)>;  // [F, 3, R, R] -> [F, D]

/// Stats of per-frame expression parameters over a set of videos.
inline FeatureStats expression_stats(const std::vector<Tensor>& videos, const ExpressionExtractor& extractor) {
  if (videos.empty()) throw std::invalid_argument("e_fid: empty video set");
  FeatureStats total;
  NoGradGuard no_grad;
  for (const auto& v : videos) total.merge(FeatureStats::from_rows(extractor(v)));
  return total;
}

inline double e_fid(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt, const ExpressionExtractor& extractor) {
  return frechet_distance(expression_stats(pred, extractor), expression_stats(gt, extractor));
}

/// Frechet distance over flattened frame pixels pooled to 8x8 grey, an
/// image-statistics stand-in for learned-backbone FID.
inline Tensor pooled_frame_features(const Tensor& frames) {
  const std::size_t F = frames.dim(0), R = frames.dim(2), G = 8, cell = R / G;
  std::vector<double> out(F * G * G, 0.0);
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < R; ++y)
        for (std::size_t x = 0; x < R; ++x)
          out[f * G * G + (y / cell) * G + x / cell] += frames[((f * 3 + c) * R + y) * R + x] / static_cast<double>(3 * cell * cell);
  return Tensor({F, G * G}, std::move(out));
}

/// Scorer output for one clip; the synthetic scorer is in predictors.
inline double sync_confidence(const Tensor& frames, const AudioClip& audio, const predictors::SyncScorer& scorer) {
  if (!scorer) throw std::invalid_argument("sync_confidence: no scorer");
  return scorer(frames, audio);
}

// ---------------------------------------------------------------------------
// Report

struct MetricReport {
  std::map<std::string, double> values;
  std::map<std::string, std::string> versions;  // metric -> extractor/scorer version
  std::vector<std::string> clip_ids;
  std::string config_hash;

  void set(const std::string& name, double v, const std::string& version) {
    values[name] = v;
    versions[name] = version;
  }

  json to_json() const {
    json j;
    json v = json::object();
    for (const auto& [k, x] : values) {
      if (std::isinf(x)) v[k] = x > 0 ? "inf" : "-inf";
      else v[k] = x;
    }
    j["metrics"] = v;
    j["versions"] = versions;
    j["clip_ids"] = clip_ids;
    j["config_hash"] = config_hash;
    return j;
  }
};

}  // namespace srm::metrics
