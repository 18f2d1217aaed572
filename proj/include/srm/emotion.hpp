#pragma once

// Multi-modal emotion embedding: transcript sentiment, speech emotion
// recognition and a segmented valence/arousal track, concatenated in that
// order into one fixed-size vector.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "srm/audio.hpp"
#include "srm/random.hpp"
#include "srm/serialize.hpp"

namespace srm::emotion {

struct Segment {
  AudioClip clip;
  double start_s = 0.0;
  double end_s = 0.0;
};

struct VAPair {
  double valence = 0.0;
  double arousal = 0.0;
  bool operator==(const VAPair&) const = default;
};

struct VASequence {
  std::vector<VAPair> pairs;
  std::vector<std::pair<double, double>> spans;  // (start_s, end_s) per pair

  std::size_t size() const { return pairs.size(); }

  void validate() const {
    if (pairs.empty()) throw std::invalid_argument("VASequence: empty");
    if (pairs.size() != spans.size()) throw std::invalid_argument("VASequence: pairs/spans length mismatch");
    for (const auto& p : pairs)
      if (!(p.valence >= -1.0 && p.valence <= 1.0 && p.arousal >= -1.0 && p.arousal <= 1.0))
        throw std::invalid_argument("VASequence: valence/arousal outside [-1, 1]");
  }
};

/// Pluggable extractors. All must be deterministic for a fixed clip.
struct ExtractorSuite {
  std::function<std::vector<double>(const AudioClip&)> text;  // transcription + sentiment
  std::function<std::vector<double>(const AudioClip&)> ser;   // class distribution
  std::function<VAPair(const AudioClip&)> va;
  /// Applied before every extractor; identity when empty (music removal hook).
  std::function<AudioClip(const AudioClip&)> prefilter;
  bool reentrant = true;
  std::string version = "custom";

  AudioClip filtered(const AudioClip& clip) const { return prefilter ? prefilter(clip) : clip; }
};

struct EmbeddingConfig {
  std::size_t dim_text = 7;
  std::size_t dim_ser = 8;
  std::size_t k_fixed = 6;
  double window_s = 2.0;
  double overlap = 0.5;

  std::size_t dim_total() const { return dim_text + dim_ser + 2 * k_fixed; }

  std::string canonical() const {
    std::ostringstream os;
    os << "dim_text=" << dim_text << ";dim_ser=" << dim_ser << ";k_fixed=" << k_fixed << ";window_s=" << window_s
       << ";overlap=" << overlap;
    return os.str();
  }
  std::string hash() const { return sha256_hex(canonical()).substr(0, 16); }
};

struct EmotionEmbedding {
  std::vector<double> e_text;
  std::vector<double> e_ser;
  std::vector<double> e_va;
  std::vector<double> e_full;
};

/// Splits a clip into windows of `window_s` advancing by window*(1-overlap).
///
/// Positions are computed on the sample grid. A tail shorter than one window
/// gets a final window anchored at the clip end; a clip no longer than the
/// window yields one whole-clip segment.
inline std::vector<Segment> segment_audio(const AudioClip& clip, double window_s, double overlap) {
  if (!(window_s > 0.0)) throw std::invalid_argument("segment_audio: window must be positive");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw std::invalid_argument("segment_audio: overlap must be in [0, 1)");
  if (clip.empty()) throw std::invalid_argument("segment_audio: empty clip");
  const double sr = clip.sample_rate;
  const std::size_t n = clip.samples.size();
  const auto win = static_cast<std::size_t>(std::llround(window_s * sr));
  const auto hop = static_cast<std::size_t>(std::llround(window_s * (1.0 - overlap) * sr));
  if (win == 0 || hop == 0) throw std::invalid_argument("segment_audio: window shorter than one sample");

  auto make = [&](std::size_t a, std::size_t b) {
    return Segment{{std::vector<double>(clip.samples.begin() + a, clip.samples.begin() + b), sr},
                   static_cast<double>(a) / sr, static_cast<double>(b) / sr};
  };
  std::vector<Segment> out;
  if (n <= win) {
    out.push_back(make(0, n));
    return out;
  }
  std::size_t last_end = 0;
  for (std::size_t start = 0; start + win <= n; start += hop) {
    out.push_back(make(start, start + win));
    last_end = start + win;
  }
  if (last_end < n) out.push_back(make(n - win, n));
  return out;
}

inline VASequence extract_va_sequence(const AudioClip& clip, const ExtractorSuite& suite, double window_s,
                                      double overlap = 0.5) {
  clip.validate();
  if (!suite.va) throw std::invalid_argument("extract_va_sequence: suite has no va extractor");
  const AudioClip filtered = suite.filtered(clip);
  VASequence seq;
  const auto segments = segment_audio(filtered, window_s, overlap);
  for (std::size_t k = 0; k < segments.size(); ++k) {
    try {
      seq.pairs.push_back(suite.va(segments[k].clip));
    } catch (const std::exception& e) {
      throw std::runtime_error("va extractor failed on segment " + std::to_string(k) + ": " + e.what());
    }
    seq.spans.emplace_back(segments[k].start_s, segments[k].end_s);
  }
  return seq;
}

/// Flattens to (v0, a0, v1, a1, ...) of length 2*k_fixed, linearly
/// interpolating both tracks over normalized time when K != k_fixed.
inline std::vector<double> resample_va_to_fixed(const VASequence& seq, std::size_t k_fixed) {
  if (k_fixed < 1) throw std::invalid_argument("resample_va_to_fixed: k_fixed must be >= 1");
  if (seq.pairs.empty()) throw std::invalid_argument("resample_va_to_fixed: empty sequence");
  const std::size_t K = seq.pairs.size();
  std::vector<double> out;
  out.reserve(2 * k_fixed);
  if (K == k_fixed) {
    for (const auto& p : seq.pairs) {
      out.push_back(p.valence);
      out.push_back(p.arousal);
    }
    return out;
  }
  for (std::size_t j = 0; j < k_fixed; ++j) {
    const double t = k_fixed == 1 ? 0.0 : static_cast<double>(j) / static_cast<double>(k_fixed - 1);
    const double pos = t * static_cast<double>(K - 1);
    const auto i = std::min(static_cast<std::size_t>(pos), K - 1);
    const std::size_t i1 = std::min(i + 1, K - 1);
    const double f = pos - static_cast<double>(i);
    out.push_back((1.0 - f) * seq.pairs[i].valence + f * seq.pairs[i1].valence);
    out.push_back((1.0 - f) * seq.pairs[i].arousal + f * seq.pairs[i1].arousal);
  }
  return out;
}

inline EmotionEmbedding build_emotion_embedding(const AudioClip& clip, const ExtractorSuite& suite,
                                                const EmbeddingConfig& config) {
  clip.validate();
  if (!suite.text || !suite.ser) throw std::invalid_argument("build_emotion_embedding: incomplete extractor suite");
  const AudioClip filtered = suite.filtered(clip);
  EmotionEmbedding e;
  e.e_text = suite.text(filtered);
  if (e.e_text.size() != config.dim_text)
    throw std::invalid_argument("text extractor returned " + std::to_string(e.e_text.size()) + " values, expected " +
                                std::to_string(config.dim_text));
  e.e_ser = suite.ser(filtered);
  if (e.e_ser.size() != config.dim_ser)
    throw std::invalid_argument("ser extractor returned " + std::to_string(e.e_ser.size()) + " values, expected " +
                                std::to_string(config.dim_ser));
  // The prefilter already ran; keep the va path from filtering twice.
  ExtractorSuite va_only = suite;
  va_only.prefilter = nullptr;
  e.e_va = resample_va_to_fixed(extract_va_sequence(filtered, va_only, config.window_s, config.overlap), config.k_fixed);
  e.e_full = e.e_text;
  e.e_full.insert(e.e_full.end(), e.e_ser.begin(), e.e_ser.end());
  e.e_full.insert(e.e_full.end(), e.e_va.begin(), e.e_va.end());
  for (double v : e.e_full)
    if (!std::isfinite(v)) throw std::runtime_error("build_emotion_embedding: non-finite entry");
  return e;
}

// ---------------------------------------------------------------------------
// Synthetic extractors: softmaxes of fixed linear functionals of clip
// statistics (sentiment, SER) and (mean amplitude, RMS) clipped to [-1, 1] for
// valence/arousal.

struct ClipStats {
  double mean = 0.0;
  double rms = 0.0;
  double peak = 0.0;
  double zero_cross_rate = 0.0;
  double abs_mean = 0.0;

  std::array<double, 5> as_array() const { return {mean, rms, peak, zero_cross_rate, abs_mean}; }
};

inline ClipStats clip_stats(const AudioClip& clip) {
  ClipStats s;
  const std::size_t n = clip.samples.size();
  if (n == 0) return s;
  std::size_t crossings = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = clip.samples[i];
    s.mean += v;
    s.rms += v * v;
    s.abs_mean += std::abs(v);
    s.peak = std::max(s.peak, std::abs(v));
    if (i > 0 && ((v >= 0.0) != (clip.samples[i - 1] >= 0.0)) && (v != 0.0 || clip.samples[i - 1] != 0.0)) ++crossings;
  }
  s.mean /= static_cast<double>(n);
  s.rms = std::sqrt(s.rms / static_cast<double>(n));
  s.abs_mean /= static_cast<double>(n);
  s.zero_cross_rate = n > 1 ? static_cast<double>(crossings) / static_cast<double>(n - 1) : 0.0;
  return s;
}

inline std::vector<double> softmax(const std::vector<double>& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

/// Fixed [classes x 5] functional drawn from a seed; never changes for a seed.
inline std::vector<double> linear_functional_softmax(const ClipStats& s, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  const auto x = s.as_array();
  std::vector<double> logits(classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c)
    for (double xi : x) logits[c] += rng.uniform(-4.0, 4.0) * xi;
  return softmax(logits);
}

inline ExtractorSuite synthetic_suite(const EmbeddingConfig& config = {}) {
  ExtractorSuite suite;
  const std::size_t dt = config.dim_text, ds = config.dim_ser;
  suite.text = [dt](const AudioClip& c) { return linear_functional_softmax(clip_stats(c), dt, 0x5e171e47); };
  suite.ser = [ds](const AudioClip& c) { return linear_functional_softmax(clip_stats(c), ds, 0x5e7c1a55); };
  suite.va = [](const AudioClip& c) {
    const auto s = clip_stats(c);
    return VAPair{std::clamp(s.mean, -1.0, 1.0), std::clamp(s.rms, -1.0, 1.0)};
  };
  suite.version = "synthetic-emotion-v1";
  return suite;
}

inline void save_embedding(const std::filesystem::path& path, const EmotionEmbedding& e, const std::string& source_clip,
                           const std::string& config_hash) {
  json extra;
  extra["source_clip"] = source_clip;
  extra["config_hash"] = config_hash;
  extra["parts"] = {{"text", e.e_text.size()}, {"ser", e.e_ser.size()}, {"va", e.e_va.size()}};
  save_tensor(path, Tensor(Shape{e.e_full.size()}, e.e_full), extra);
}

}  // namespace srm::emotion
