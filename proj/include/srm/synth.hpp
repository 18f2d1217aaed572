#pragma once

// Parametric toy talking-face clips. A soft-edged face with eyes and an
// elliptical mouth whose aperture follows the audio envelope frame by frame;
// an "emotion" scalar in [-1, 1] tints the skin and shifts the voice pitch.
// Everything is an analytic function of the seed, so the clips carry exact
// ground truth for sync and emotion checks.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "srm/audio.hpp"
#include "srm/image_io.hpp"
#include "srm/random.hpp"
#include "srm/serialize.hpp"
#include "srm/tensor.hpp"

namespace srm::synth {

/// Normalized face layout shared with the synthetic predictors.
struct FaceLayout {
  static constexpr double kMouthY = 0.70;
  static constexpr double kMouthHalfWidth = 0.13;
  static constexpr double kMouthMinHalfHeight = 0.015;
  static constexpr double kMouthApertureGain = 0.09;
  static constexpr double kEyeY = 0.40;
  static constexpr double kEyeDx = 0.14;
  // Mouth analysis box (normalized x0, y0, x1, y1).
  static constexpr std::array<double, 4> kMouthBox = {0.34, 0.58, 0.66, 0.84};
  static constexpr std::array<double, 4> kEyeBox = {0.24, 0.30, 0.76, 0.50};
  static constexpr std::array<double, 4> kCheekBox = {0.22, 0.50, 0.78, 0.62};
  static constexpr std::array<double, 4> kBrowBox = {0.24, 0.22, 0.76, 0.34};
};

struct FaceParams {
  std::array<double, 3> background{};
  std::array<double, 3> skin{};
  std::array<double, 3> mouth{};
  double cx = 0.5, cy = 0.55, rx = 0.33, ry = 0.42;
  double eye_r = 0.045;
  double emotion = 0.0;
};

struct Clip {
  Tensor frames;  // [N, 3, R, R]
  AudioClip audio;
  std::vector<double> aperture;  // per frame, in [0, 1]
  std::string caption;
  double emotion = 0.0;
  double fps = kVideoFps;
};

struct Options {
  std::size_t resolution = 32;
  double duration_s = 3.0;
  double fps = kVideoFps;
  double sample_rate = kCanonicalSampleRate;
};

inline FaceParams random_face(Rng& rng, double emotion) {
  FaceParams p;
  p.emotion = emotion;
  for (auto& c : p.background) c = rng.uniform(0.15, 0.45);
  p.background[2] += 0.2;
  const double base = rng.uniform(0.55, 0.75);
  p.skin = {std::clamp(base + 0.15 * emotion + 0.1, 0.0, 1.0), std::clamp(base - 0.05 * emotion, 0.0, 1.0),
            std::clamp(base - 0.15 - 0.1 * emotion, 0.0, 1.0)};
  p.mouth = {0.35, 0.05, 0.08};
  p.cx = 0.5 + rng.uniform(-0.015, 0.015);
  p.cy = 0.55 + rng.uniform(-0.015, 0.015);
  p.rx = rng.uniform(0.31, 0.35);
  p.ry = rng.uniform(0.40, 0.44);
  return p;
}

namespace detail {
inline double coverage(double x, double y, double cx, double cy, double rx, double ry, double res) {
  const double d = std::sqrt(((x - cx) / rx) * ((x - cx) / rx) + ((y - cy) / ry) * ((y - cy) / ry));
  const double edge_px = (d - 1.0) * std::min(rx, ry) * res;  // signed distance in pixels (approx.)
  return 1.0 / (1.0 + std::exp(edge_px / 0.6));
}
}  // namespace detail

/// Renders one frame [3, R, R] for a mouth aperture in [0, 1].
inline Tensor render_face(const FaceParams& p, double aperture, std::size_t res) {
  std::vector<double> img(3 * res * res);
  const double r = static_cast<double>(res);
  const double mouth_h = FaceLayout::kMouthMinHalfHeight + FaceLayout::kMouthApertureGain * std::clamp(aperture, 0.0, 1.0);
  const double mouth_y = p.cy + (FaceLayout::kMouthY - 0.55);
  const double eye_y = p.cy + (FaceLayout::kEyeY - 0.55);
  for (std::size_t yi = 0; yi < res; ++yi)
    for (std::size_t xi = 0; xi < res; ++xi) {
      const double x = (static_cast<double>(xi) + 0.5) / r, y = (static_cast<double>(yi) + 0.5) / r;
      std::array<double, 3> c = p.background;
      auto blend = [&c](const std::array<double, 3>& col, double a) {
        for (int k = 0; k < 3; ++k) c[k] = (1.0 - a) * c[k] + a * col[k];
      };
      blend(p.skin, detail::coverage(x, y, p.cx, p.cy, p.rx, p.ry, r));
      const std::array<double, 3> eye = {0.08, 0.08, 0.1};
      blend(eye, detail::coverage(x, y, p.cx - FaceLayout::kEyeDx, eye_y, p.eye_r, p.eye_r, r));
      blend(eye, detail::coverage(x, y, p.cx + FaceLayout::kEyeDx, eye_y, p.eye_r, p.eye_r, r));
      blend(p.mouth, detail::coverage(x, y, p.cx, mouth_y, FaceLayout::kMouthHalfWidth, mouth_h, r));
      for (int k = 0; k < 3; ++k) img[(k * res + yi) * res + xi] = c[k];
    }
  return Tensor({3, res, res}, std::move(img));
}

/// Smooth syllable-like envelope in [0.08, 1].
struct Envelope {
  std::array<double, 3> freq{}, phase{}, amp{};

  explicit Envelope(Rng& rng) {
    for (int k = 0; k < 3; ++k) {
      freq[k] = rng.uniform(1.2, 3.5);
      phase[k] = rng.uniform(0.0, 6.283185307179586);
      amp[k] = rng.uniform(0.25, 0.5);
    }
  }

  double operator()(double t) const {
    double v = 0.0;
    for (int k = 0; k < 3; ++k) v += amp[k] * std::sin(6.283185307179586 * freq[k] * t + phase[k]);
    return std::clamp(0.5 + 0.6 * v, 0.08, 1.0);
  }
};

inline std::string describe(const FaceParams& p) {
  std::ostringstream os;
  os << "a person with " << (p.emotion > 0.3 ? "warm flushed" : p.emotion < -0.3 ? "pale cool" : "neutral")
     << " skin tone talking to the camera, head still, "
     << (p.background[2] > 0.5 ? "blue" : "grey") << " background";
  return os.str();
}

inline Clip make_clip(std::uint64_t seed, const Options& opt = {}) {
  Rng rng(mix_seed(seed, "synth-clip"));
  const double emotion = rng.uniform(-1.0, 1.0);
  const FaceParams face = random_face(rng, emotion);
  const Envelope env(rng);
  const double f0 = 160.0 * std::pow(2.0, 0.5 * (emotion + 1.0));

  Clip clip;
  clip.emotion = emotion;
  clip.fps = opt.fps;
  const auto n_frames = static_cast<std::size_t>(std::llround(opt.duration_s * opt.fps));
  const std::size_t R = opt.resolution;
  std::vector<double> frames;
  frames.reserve(n_frames * 3 * R * R);
  for (std::size_t f = 0; f < n_frames; ++f) {
    const double a = env((static_cast<double>(f) + 0.5) / opt.fps);
    clip.aperture.push_back(a);
    const Tensor img = render_face(face, a, R);
    frames.insert(frames.end(), img.values().begin(), img.values().end());
  }
  clip.frames = Tensor({n_frames, 3, R, R}, std::move(frames));

  const auto n_samples = static_cast<std::size_t>(std::llround(opt.duration_s * opt.sample_rate));
  clip.audio.sample_rate = opt.sample_rate;
  clip.audio.samples.resize(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const double t = static_cast<double>(i) / opt.sample_rate;
    const double w = 6.283185307179586 * f0 * t;
    clip.audio.samples[i] = 0.9 * env(t) * (0.65 * std::sin(w) + 0.3 * std::sin(2.0 * w + 0.5));
  }
  clip.caption = describe(face);
  return clip;
}

/// Writes the raw-clip layout consumed by ingest:
/// dir/frames/NNNNNN.png, dir/audio.wav, dir/caption.txt, dir/clip.json.
inline void write_raw_clip(const std::filesystem::path& dir, const Clip& clip, const std::string& id) {
  write_frame_dir(dir / "frames", clip.frames);
  write_wav(dir / "audio.wav", clip.audio);
  write_file(dir / "caption.txt", clip.caption + "\n");
  json meta;
  meta["id"] = id;
  meta["fps"] = clip.fps;
  meta["single_speaker"] = true;
  meta["landmark_ok"] = true;
  meta["emotion"] = clip.emotion;
  write_json(dir / "clip.json", meta);
}

}  // namespace srm::synth
