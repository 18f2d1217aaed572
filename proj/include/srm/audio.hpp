#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "srm/serialize.hpp"

namespace srm {

inline constexpr double kCanonicalSampleRate = 16000.0;
inline constexpr double kVideoFps = 25.0;

struct AudioClip {
  std::vector<double> samples;  // mono, nominally in [-1, 1]
  double sample_rate = kCanonicalSampleRate;

  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
  bool empty() const { return samples.empty(); }

  void validate() const {
    if (!(sample_rate > 0.0)) throw std::invalid_argument("AudioClip: sample_rate must be positive");
    for (double s : samples)
      if (!std::isfinite(s)) throw std::invalid_argument("AudioClip: non-finite sample");
  }

  /// Samples in [start_s, end_s), clamped to the clip.
  AudioClip span(double start_s, double end_s) const {
    const auto n = samples.size();
    const auto a = std::min(n, static_cast<std::size_t>(std::llround(std::max(0.0, start_s) * sample_rate)));
    const auto b = std::clamp(static_cast<std::size_t>(std::llround(end_s * sample_rate)), a, n);
    return {std::vector<double>(samples.begin() + a, samples.begin() + b), sample_rate};
  }
};

/// Number of 25 fps video frames covering the clip: ceil(duration * 25).
/// Durations are snapped to the sample grid first so 1.0 s gives exactly 25.
inline std::size_t video_frame_count(const AudioClip& clip, double fps = kVideoFps) {
  const double frames = static_cast<double>(clip.samples.size()) * fps / clip.sample_rate;
  return static_cast<std::size_t>(std::ceil(frames - 1e-9));
}

/// Linear-interpolation resampler; output length round(n * out/in).
inline AudioClip resample_linear(const AudioClip& clip, double out_rate) {
  if (!(out_rate > 0.0)) throw std::invalid_argument("resample_linear: rate must be positive");
  if (clip.sample_rate == out_rate || clip.samples.empty()) return {clip.samples, out_rate};
  const std::size_t n_in = clip.samples.size();
  const auto n_out = static_cast<std::size_t>(std::llround(static_cast<double>(n_in) * out_rate / clip.sample_rate));
  std::vector<double> out(n_out);
  const double step = clip.sample_rate / out_rate;
  for (std::size_t i = 0; i < n_out; ++i) {
    const double pos = static_cast<double>(i) * step;
    const auto k = static_cast<std::size_t>(pos);
    if (k + 1 >= n_in) {
      out[i] = clip.samples[n_in - 1];
    } else {
      const double f = pos - static_cast<double>(k);
      out[i] = (1.0 - f) * clip.samples[k] + f * clip.samples[k + 1];
    }
  }
  return {std::move(out), out_rate};
}

/// Scales so max |s| == 1; silent clips are returned unchanged.
inline AudioClip peak_normalize(const AudioClip& clip) {
  double peak = 0.0;
  for (double s : clip.samples) peak = std::max(peak, std::abs(s));
  if (peak == 0.0) return clip;
  AudioClip out = clip;
  for (auto& s : out.samples) s /= peak;
  return out;
}

/// Per-video-frame RMS envelope (one value per 1/fps window).
inline std::vector<double> frame_envelope(const AudioClip& clip, std::size_t frames, double fps = kVideoFps) {
  std::vector<double> env(frames, 0.0);
  const double hop = clip.sample_rate / fps;
  for (std::size_t f = 0; f < frames; ++f) {
    const auto a = static_cast<std::size_t>(std::llround(static_cast<double>(f) * hop));
    const auto b = std::min(clip.samples.size(), static_cast<std::size_t>(std::llround(static_cast<double>(f + 1) * hop)));
    if (a >= b) continue;
    double acc = 0.0;
    for (std::size_t i = a; i < b; ++i) acc += clip.samples[i] * clip.samples[i];
    env[f] = std::sqrt(acc / static_cast<double>(b - a));
  }
  return env;
}

// ---------------------------------------------------------------------------
// WAV (RIFF) reading and writing. Reads PCM16 / PCM32 / float32, any channel
// count (downmixed to mono). Writes mono float32.

namespace detail {
inline std::uint32_t le32(const std::string& b, std::size_t o) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(b[o])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[o + 1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[o + 2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[o + 3])) << 24;
}
inline std::uint16_t le16(const std::string& b, std::size_t o) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(b[o]) | static_cast<unsigned char>(b[o + 1]) << 8);
}
inline void put32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline void put16(std::string& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xffu));
  b.push_back(static_cast<char>(v >> 8));
}
}  // namespace detail

inline AudioClip read_wav(const std::filesystem::path& path) {
  const std::string b = read_file(path);
  if (b.size() < 12 || b.compare(0, 4, "RIFF") != 0 || b.compare(8, 4, "WAVE") != 0)
    throw IoError(path.string() + ": not a RIFF/WAVE file");
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= b.size()) {
    const std::string id = b.substr(pos, 4);
    const std::uint32_t size = detail::le32(b, pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > b.size()) throw IoError(path.string() + ": truncated chunk " + id);
    if (id == "fmt ") {
      format = detail::le16(b, body);
      channels = detail::le16(b, body + 2);
      rate = detail::le32(b, body + 4);
      bits = detail::le16(b, body + 14);
      if (format == 0xFFFE && size >= 26) format = detail::le16(b, body + 24);  // WAVE_FORMAT_EXTENSIBLE
    } else if (id == "data") {
      if (channels == 0 || rate == 0) throw IoError(path.string() + ": data before fmt chunk");
      const bool pcm16 = format == 1 && bits == 16, pcm32 = format == 1 && bits == 32, f32 = format == 3 && bits == 32;
      if (!pcm16 && !pcm32 && !f32) throw IoError(path.string() + ": unsupported sample format");
      const std::size_t width = bits / 8, frames = size / (width * channels);
      AudioClip clip;
      clip.sample_rate = rate;
      clip.samples.resize(frames);
      for (std::size_t f = 0; f < frames; ++f) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
          const std::size_t o = body + (f * channels + c) * width;
          if (pcm16) {
            acc += static_cast<std::int16_t>(detail::le16(b, o)) / 32768.0;
          } else if (pcm32) {
            acc += static_cast<std::int32_t>(detail::le32(b, o)) / 2147483648.0;
          } else {
            acc += std::bit_cast<float>(detail::le32(b, o));
          }
        }
        clip.samples[f] = acc / channels;
      }
      return clip;
    }
    pos = body + size + (size & 1u);
  }
  throw IoError(path.string() + ": no data chunk");
}

inline void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  std::string b;
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 4);
  const auto rate = static_cast<std::uint32_t>(std::llround(clip.sample_rate));
  b += "RIFF";
  detail::put32(b, 36 + data_bytes);
  b += "WAVEfmt ";
  detail::put32(b, 16);
  detail::put16(b, 3);  // IEEE float
  detail::put16(b, 1);
  detail::put32(b, rate);
  detail::put32(b, rate * 4);
  detail::put16(b, 4);
  detail::put16(b, 32);
  b += "data";
  detail::put32(b, data_bytes);
  for (double s : clip.samples) detail::put32(b, std::bit_cast<std::uint32_t>(static_cast<float>(s)));
  write_file(path, b);
}

/// Writes 16-bit PCM; used for interchange with tools that expect integer WAV.
inline void write_wav_pcm16(const std::filesystem::path& path, const AudioClip& clip) {
  std::string b;
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  const auto rate = static_cast<std::uint32_t>(std::llround(clip.sample_rate));
  b += "RIFF";
  detail::put32(b, 36 + data_bytes);
  b += "WAVEfmt ";
  detail::put32(b, 16);
  detail::put16(b, 1);
  detail::put16(b, 1);
  detail::put32(b, rate);
  detail::put32(b, rate * 2);
  detail::put16(b, 2);
  detail::put16(b, 16);
  b += "data";
  detail::put32(b, data_bytes);
  for (double s : clip.samples) {
    const auto q = static_cast<std::int16_t>(std::lround(std::clamp(s, -1.0, 32767.0 / 32768.0) * 32768.0));
    detail::put16(b, static_cast<std::uint16_t>(q));
  }
  write_file(path, b);
}

}  // namespace srm
