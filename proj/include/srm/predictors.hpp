#pragma once

// Deterministic stand-ins for the external predictors used by the auxiliary
// losses and the metrics: a lip-sync estimator, a valence/arousal predictor, an
// action-unit detector and a caption embedder. All operate on decoded frames
// [F, 3, R, R] and are differentiable in the frames.

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "srm/audio.hpp"
#include "srm/emotion.hpp"
#include "srm/losses.hpp"
#include "srm/random.hpp"
#include "srm/synth.hpp"
#include "srm/tensor.hpp"

namespace srm::predictors {

using Box = std::array<double, 4>;

/// Constant [3*R*R, 1] averaging mask over a normalized box, all channels.
inline Tensor region_mask(std::size_t res, const Box& box) {
  std::vector<double> m(3 * res * res, 0.0);
  std::size_t count = 0;
  const double r = static_cast<double>(res);
  for (std::size_t y = 0; y < res; ++y)
    for (std::size_t x = 0; x < res; ++x) {
      const double cx = (static_cast<double>(x) + 0.5) / r, cy = (static_cast<double>(y) + 0.5) / r;
      if (cx >= box[0] && cx < box[2] && cy >= box[1] && cy < box[3]) {
        for (std::size_t c = 0; c < 3; ++c) m[(c * res + y) * res + x] = 1.0;
        ++count;
      }
    }
  if (count == 0) throw std::invalid_argument("region_mask: box covers no pixels");
  for (auto& v : m) v /= static_cast<double>(3 * count);
  return Tensor({3 * res * res, 1}, std::move(m));
}

/// Per-frame mean intensity inside a box: [F].
inline Tensor region_mean(const Tensor& frames, const Box& box) {
  if (frames.rank() != 4 || frames.dim(1) != 3 || frames.dim(2) != frames.dim(3))
    throw std::invalid_argument("region_mean: expected [F, 3, R, R], got " + shape_str(frames.shape()));
  const std::size_t F = frames.dim(0), R = frames.dim(2);
  return reshape(linear(reshape(frames, {F, 3 * R * R}), region_mask(R, box)), {F});
}

/// Mouth openness track: darkness of the mouth box, [F].
inline Tensor mouth_track(const Tensor& frames) {
  return add_scalar(neg(region_mean(frames, synth::FaceLayout::kMouthBox)), 1.0);
}

/// Zero-mean, unit-variance copy (all zeros for a constant track).
inline Tensor standardize(const Tensor& x) {
  const Tensor c = center_lastdim(reshape(x, {x.numel()}));
  const Tensor sd = sqrt(add_scalar(mean(square(c)), 1e-8));
  return mul_scalar(c, div(Tensor({1}, 1.0), sd));
}

/// Mean product of a[f] and b[f + lag] over the overlap.
inline Tensor lagged_correlation(const Tensor& a, const Tensor& b, long lag) {
  const auto n = static_cast<long>(a.numel());
  const long len = n - std::abs(lag);
  if (len <= 0) return Tensor({1}, 0.0);
  const auto sa = static_cast<std::size_t>(lag >= 0 ? 0 : -lag), sb = static_cast<std::size_t>(lag >= 0 ? lag : 0);
  return mean(mul(slice(a, 0, sa, static_cast<std::size_t>(len)), slice(b, 0, sb, static_cast<std::size_t>(len))));
}

struct SyncOptions {
  long max_lag = 3;           // frames
  double temperature = 0.05;  // soft-argmax over lag correlations
  double fps = kVideoFps;
};

/// Differentiable sync estimate: [2] = (|offset| s, timestamp s).
///
/// The offset is a soft argmax over lagged correlations between the standardized
/// audio envelope and mouth track. The timestamp is the mismatch-weighted mean
/// frame time, or the clip midpoint when the tracks agree everywhere.
inline Tensor estimate_sync(const Tensor& frames, const std::vector<double>& envelope, const SyncOptions& opt = {}) {
  const std::size_t F = frames.dim(0);
  if (envelope.size() != F)
    throw std::invalid_argument("estimate_sync: envelope has " + std::to_string(envelope.size()) + " frames, video " +
                                std::to_string(F));
  const Tensor v = standardize(mouth_track(frames));
  const Tensor a = standardize(Tensor({F}, envelope));
  std::vector<Tensor> corr;
  std::vector<double> lags;
  for (long k = -opt.max_lag; k <= opt.max_lag; ++k) {
    corr.push_back(lagged_correlation(a, v, k));
    lags.push_back(static_cast<double>(k));
  }
  const Tensor w = softmax_lastdim(scale(concat(corr, 0), 1.0 / opt.temperature));
  const Tensor lag = dot(w, Tensor({lags.size()}, lags));
  const Tensor offset = scale(smooth_abs(lag, 1e-6), 1.0 / opt.fps);

  const double mid = static_cast<double>(F) / opt.fps / 2.0;
  const Tensor mismatch = square(sub(v, a));
  const double total = sum(mismatch).item();
  Tensor timestamp;
  if (total < 1e-12) {
    timestamp = Tensor({1}, mid);
  } else {
    std::vector<double> times(F);
    for (std::size_t f = 0; f < F; ++f) times[f] = (static_cast<double>(f) + 0.5) / opt.fps;
    timestamp = div(dot(mismatch, Tensor({F}, times)), add_scalar(sum(mismatch), 1e-12));
  }
  return concat({reshape(offset, {1}), reshape(timestamp, {1})}, 0);
}

inline losses::SyncEstimate to_sync_estimate(const Tensor& t) { return {t[0], t[1]}; }

/// Valence/arousal per overlapping segment of the mouth track, read as a
/// 25 Hz signal and passed through the same (mean, rms) functional as the
/// synthetic audio extractor. [K, 2].
inline Tensor predict_va(const Tensor& frames, const emotion::EmbeddingConfig& seg = {}, double fps = kVideoFps) {
  const Tensor track = mouth_track(frames);
  AudioClip grid;
  grid.sample_rate = fps;
  grid.samples.assign(track.numel(), 0.0);
  const auto segments = emotion::segment_audio(grid, seg.window_s, seg.overlap);
  std::vector<Tensor> rows;
  for (const auto& s : segments) {
    const auto a = static_cast<std::size_t>(std::llround(s.start_s * fps));
    const Tensor part = slice(track, 0, a, s.clip.samples.size());
    const Tensor valence = clamp(mean(part), -1.0, 1.0);
    const Tensor arousal = clamp(sqrt(add_scalar(mean(square(part)), 1e-12)), -1.0, 1.0);
    rows.push_back(concat({valence, arousal}, 0));
  }
  return reshape(concat(rows, 0), {segments.size(), 2});
}

inline const std::vector<std::string>& au_ids() {
  static const std::vector<std::string> ids = {"AU01", "AU02", "AU04", "AU06", "AU12", "AU25"};
  return ids;
}

/// Fixed sigmoid probes over face-region colour means. [F, 6] in [0, 1].
class AUDetector {
 public:
  explicit AUDetector(std::uint64_t seed = 0xa0de7ec7) {
    Rng rng(seed);
    const std::size_t in = 3 * kRegions.size(), out = au_ids().size();
    w_ = Tensor({in, out}, rng.normal_vec(in * out));
    w_ = scale(w_, 6.0);
    b_ = Tensor({out}, 0.0);
    auto bv = b_.mutable_values();
    for (std::size_t j = 0; j < out; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < in; ++i) s += w_[i * out + j] * 0.5;
      bv[j] = -s;
    }
  }

  Tensor operator()(const Tensor& frames) const { return sigmoid(linear(features(frames), w_, b_)); }

  losses::AUMatrix matrix(const Tensor& frames) const { return {(*this)(frames), au_ids()}; }

  static Tensor features(const Tensor& frames) {
    const std::size_t F = frames.dim(0), R = frames.dim(2);
    std::vector<Tensor> cols;
    for (const auto& box : kRegions)
      for (std::size_t c = 0; c < 3; ++c) {
        const Tensor ch = slice(frames, 1, c, 1);  // [F, 1, R, R]
        std::vector<double> m(R * R, 0.0);
        std::size_t count = 0;
        for (std::size_t y = 0; y < R; ++y)
          for (std::size_t x = 0; x < R; ++x) {
            const double cx = (static_cast<double>(x) + 0.5) / static_cast<double>(R);
            const double cy = (static_cast<double>(y) + 0.5) / static_cast<double>(R);
            if (cx >= box[0] && cx < box[2] && cy >= box[1] && cy < box[3]) {
              m[y * R + x] = 1.0;
              ++count;
            }
          }
        for (auto& v : m) v /= static_cast<double>(count);
        cols.push_back(linear(reshape(ch, {F, R * R}), Tensor({R * R, 1}, std::move(m))));
      }
    return concat(cols, 1);  // [F, 3 * regions]
  }

 private:
  static constexpr std::array<Box, 4> kRegions = {synth::FaceLayout::kMouthBox, synth::FaceLayout::kEyeBox,
                                                  synth::FaceLayout::kCheekBox, synth::FaceLayout::kBrowBox};
  Tensor w_, b_;
};

/// Bag of frame statistics with a constant entry, so the norm never vanishes:
/// [1, channel means (3), channel stds (3), mouth mean, eye mean, motion energy].
inline Tensor caption_embedding(const Tensor& frames) {
  if (frames.rank() != 4 || frames.dim(1) != 3) throw std::invalid_argument("caption_embedding: expected [F, 3, R, R]");
  const std::size_t F = frames.dim(0), R = frames.dim(2);
  std::vector<Tensor> parts = {Tensor({1}, 1.0)};
  std::vector<Tensor> stds;
  for (std::size_t c = 0; c < 3; ++c) {
    const Tensor ch = reshape(slice(frames, 1, c, 1), {F * R * R});
    parts.push_back(mean(ch));
    stds.push_back(sqrt(add_scalar(mean(square(center_lastdim(ch))), 1e-12)));
  }
  parts.insert(parts.end(), stds.begin(), stds.end());
  parts.push_back(mean(region_mean(frames, synth::FaceLayout::kMouthBox)));
  parts.push_back(mean(region_mean(frames, synth::FaceLayout::kEyeBox)));
  if (F > 1) {
    const Tensor d = sub(slice(frames, 0, 1, F - 1), slice(frames, 0, 0, F - 1));
    parts.push_back(sqrt(add_scalar(mean(square(d)), 1e-12)));
  } else {
    parts.push_back(Tensor({1}, 0.0));
  }
  return concat(parts, 0);
}

/// Pluggable suite; the defaults are the synthetic predictors above.
struct PredictorSuite {
  std::function<Tensor(const Tensor&, const std::vector<double>&)> sync;
  std::function<Tensor(const Tensor&)> va;
  std::function<Tensor(const Tensor&)> au;
  std::function<Tensor(const Tensor&)> caption;
  std::string version = "custom";
};

inline PredictorSuite synthetic_predictors() {
  PredictorSuite s;
  s.sync = [](const Tensor& frames, const std::vector<double>& env) { return estimate_sync(frames, env); };
  s.va = [](const Tensor& frames) { return predict_va(frames); };
  s.au = [det = AUDetector()](const Tensor& frames) { return det(frames); };
  s.caption = [](const Tensor& frames) { return caption_embedding(frames); };
  s.version = "synthetic-predictors-v1";
  return s;
}

// ---------------------------------------------------------------------------
// Sync confidence scorer

/// Pearson correlation of a[f] with b[f + lag] over the overlap (0 if degenerate).
inline double lagged_pearson(const std::vector<double>& a, const std::vector<double>& b, long lag) {
  const auto n = static_cast<long>(std::min(a.size(), b.size()));
  const long len = n - std::abs(lag);
  if (len < 2) return 0.0;
  const long sa = lag >= 0 ? 0 : -lag, sb = lag >= 0 ? lag : 0;
  double ma = 0.0, mb = 0.0;
  for (long i = 0; i < len; ++i) {
    ma += a[static_cast<std::size_t>(sa + i)];
    mb += b[static_cast<std::size_t>(sb + i)];
  }
  ma /= static_cast<double>(len);
  mb /= static_cast<double>(len);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (long i = 0; i < len; ++i) {
    const double x = a[static_cast<std::size_t>(sa + i)] - ma, y = b[static_cast<std::size_t>(sb + i)] - mb;
    sab += x * y;
    saa += x * x;
    sbb += y * y;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

/// 10 * max(0, best Pearson correlation over lags in [-max_lag, max_lag]).
inline double sync_score(const std::vector<double>& mouth, const std::vector<double>& envelope, long max_lag = 3) {
  double best = 0.0;
  for (long k = -max_lag; k <= max_lag; ++k) best = std::max(best, lagged_pearson(envelope, mouth, k));
  return 10.0 * best;
}

using SyncScorer = std::function<double(const Tensor& frames, const AudioClip& audio)>;

inline SyncScorer synthetic_sync_scorer(long max_lag = 3) {
  return [max_lag](const Tensor& frames, const AudioClip& audio) {
    const Tensor track = mouth_track(frames);
    return sync_score(track.vec(), frame_envelope(audio, frames.dim(0)), max_lag);
  };
}

}  // namespace srm::predictors
