#pragma once

// Audio-to-Motion: a conditional VAE whose Gaussian latent passes through a
// volume-preserving coupling flow before decoding into per-frame motion
// latents aligned to 25 fps audio features.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "srm/audio.hpp"
#include "srm/nn.hpp"
#include "srm/random.hpp"
#include "srm/serialize.hpp"
#include "srm/tensor.hpp"

namespace srm::a2m {

struct AudioFeatureSequence {
  Tensor features;  // [F, D_a]
  double fps = kVideoFps;
  double source_duration_s = 0.0;

  std::size_t frames() const { return features.dim(0); }
  std::size_t dim() const { return features.dim(1); }

  /// Rows for frames [start, start+count); indices past the end clamp to the last row.
  AudioFeatureSequence window(std::size_t start, std::size_t count) const {
    std::vector<std::size_t> rows(count);
    for (std::size_t i = 0; i < count; ++i) rows[i] = std::min(start + i, frames() - 1);
    return {gather_rows(features, rows), fps, static_cast<double>(count) / fps};
  }
};

/// Audio front end. The synthetic stand-in computes, per video frame,
/// log(1 + 10 * rms), six Goertzel band magnitudes on the same log scale and
/// the zero-crossing rate; all rows are exactly zero for silence.
struct FeatureExtractor {
  std::size_t dim = 8;
  std::function<AudioFeatureSequence(const AudioClip&)> fn;
  std::string version = "custom";

  AudioFeatureSequence operator()(const AudioClip& clip) const { return fn(clip); }
};

inline std::vector<double> synthetic_frame_features(std::span<const double> w, double sample_rate) {
  static constexpr std::array<double, 6> kBands = {100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0};
  std::vector<double> f(8, 0.0);
  if (w.empty()) return f;
  const double n = static_cast<double>(w.size());
  double energy = 0.0;
  std::size_t crossings = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    energy += w[i] * w[i];
    if (i > 0 && ((w[i] >= 0.0) != (w[i - 1] >= 0.0)) && (w[i] != 0.0 || w[i - 1] != 0.0)) ++crossings;
  }
  f[0] = std::log1p(10.0 * std::sqrt(energy / n));
  for (std::size_t b = 0; b < kBands.size(); ++b) {
    const double coeff = 2.0 * std::cos(2.0 * M_PI * kBands[b] / sample_rate);
    double s1 = 0.0, s2 = 0.0;
    for (double x : w) {
      const double s0 = x + coeff * s1 - s2;
      s2 = s1;
      s1 = s0;
    }
    const double power = std::max(0.0, s1 * s1 + s2 * s2 - coeff * s1 * s2);
    f[1 + b] = std::log1p(10.0 * 2.0 * std::sqrt(power) / n);
  }
  f[7] = w.size() > 1 ? static_cast<double>(crossings) / (n - 1.0) : 0.0;
  return f;
}

inline FeatureExtractor synthetic_feature_extractor() {
  FeatureExtractor ex;
  ex.dim = 8;
  ex.version = "synthetic-audio-features-v1";
  ex.fn = [](const AudioClip& clip) {
    clip.validate();
    if (clip.empty()) throw std::invalid_argument("encode_audio_features: zero-length clip");
    const std::size_t F = video_frame_count(clip);
    const double hop = clip.sample_rate / kVideoFps;
    std::vector<double> data;
    data.reserve(F * 8);
    for (std::size_t t = 0; t < F; ++t) {
      const auto a = std::min(clip.samples.size(), static_cast<std::size_t>(std::llround(static_cast<double>(t) * hop)));
      const auto b = std::min(clip.samples.size(), static_cast<std::size_t>(std::llround(static_cast<double>(t + 1) * hop)));
      auto row = synthetic_frame_features(std::span<const double>(clip.samples).subspan(a, b - a), clip.sample_rate);
      data.insert(data.end(), row.begin(), row.end());
    }
    return AudioFeatureSequence{Tensor({F, 8}, std::move(data)), kVideoFps, clip.duration_s()};
  };
  return ex;
}

inline AudioFeatureSequence encode_audio_features(const AudioClip& clip, const FeatureExtractor& extractor) {
  clip.validate();
  if (clip.empty()) throw std::invalid_argument("encode_audio_features: zero-length clip");
  AudioFeatureSequence seq = extractor(clip);
  if (seq.frames() != video_frame_count(clip))
    throw std::runtime_error("feature extractor returned " + std::to_string(seq.frames()) + " frames, expected " +
                             std::to_string(video_frame_count(clip)));
  if (!all_finite(seq.features)) throw std::runtime_error("feature extractor produced non-finite values");
  return seq;
}

struct Config {
  std::size_t latent_dim = 32;
  std::size_t flow_depth = 4;
  std::size_t flow_hidden = 64;
  std::size_t audio_dim = 8;
  std::size_t motion_channels = 4;
  std::size_t motion_height = 8;
  std::size_t motion_width = 8;
  std::size_t ref_code_dim = 16;
  std::size_t encoder_hidden = 64;
  std::size_t decoder_hidden = 128;
  double beta = 1e-2;
  double beta_anneal_fraction = 0.1;
  double scale_clamp = 20.0;

  std::size_t motion_numel() const { return motion_channels * motion_height * motion_width; }
  std::size_t flow_cond_dim() const { return audio_dim + ref_code_dim; }
};

struct GaussianLatent {
  Tensor mu;         // [L]
  Tensor log_sigma;  // [L]
};

struct FlowState {
  Tensor z;
  Tensor log_det;  // [1]
};

/// Affine coupling whose conditioner is a residual MLP. The output layer is
/// zero-initialized, so a fresh layer is the identity.
struct CouplingLayer {
  nn::Linear in, res, out;
  std::size_t half = 0;

  CouplingLayer() = default;
  CouplingLayer(std::size_t latent, std::size_t cond, std::size_t hidden, Rng& rng)
      : in(latent / 2 + cond, hidden, rng), res(hidden, hidden, rng), out(hidden, latent, rng, /*zero_init=*/true),
        half(latent / 2) {}

  /// Returns (shift, centered log-scale), each [B, half].
  std::pair<Tensor, Tensor> conditioner(const Tensor& frozen, const Tensor& cond, double clamp_at) const {
    Tensor h = silu(in(concat({frozen, cond}, 1)));
    h = add(h, tanh(res(h)));
    Tensor o = out(h);
    Tensor shift = slice(o, 1, 0, half);
    Tensor raw = clamp(slice(o, 1, half, half), -clamp_at, clamp_at);
    return {shift, center_lastdim(raw)};
  }

  nn::ParamList params(const std::string& p) const {
    nn::ParamList l;
    nn::append(l, in.params(p + ".in"));
    nn::append(l, res.params(p + ".res"));
    nn::append(l, out.params(p + ".out"));
    return l;
  }
};

class VPFlow {
 public:
  VPFlow() = default;
  VPFlow(const Config& cfg, Rng& rng) : latent_(cfg.latent_dim), clamp_(cfg.scale_clamp) {
    if (cfg.latent_dim % 2 != 0) throw std::invalid_argument("VPFlow: latent dimension must be even");
    for (std::size_t i = 0; i < cfg.flow_depth; ++i)
      layers_.emplace_back(cfg.latent_dim, cfg.flow_cond_dim(), cfg.flow_hidden, rng);
    flip_.resize(latent_);
    for (std::size_t i = 0; i < latent_; ++i) flip_[i] = latent_ - 1 - i;
  }

  std::size_t latent_dim() const { return latent_; }
  std::size_t depth() const { return layers_.size(); }
  std::vector<CouplingLayer>& layers() { return layers_; }

  /// Fills every conditioner output layer with U(-amplitude, amplitude);
  /// fresh flows are the identity, tests need non-trivial ones.
  void randomize_outputs(Rng& rng, double amplitude) {
    for (auto& layer : layers_) {
      for (auto& w : layer.out.weight.mutable_values()) w = rng.uniform(-amplitude, amplitude);
      for (auto& b : layer.out.bias.mutable_values()) b = rng.uniform(-amplitude, amplitude);
    }
  }

  /// z: [L] or [B, L]; cond: [C] or [B, C].
  FlowState forward(const Tensor& z, const Tensor& cond) const {
    auto [x, c, batched] = prepare(z, cond);
    Tensor log_det(Shape{x.dim(0)}, 0.0);
    for (const auto& layer : layers_) {
      Tensor xa = slice(x, 1, 0, layer.half);
      Tensor xb = slice(x, 1, layer.half, layer.half);
      auto [shift, s] = layer.conditioner(xa, c, clamp_);
      xb = add(mul(xb, exp(s)), shift);
      log_det = add(log_det, sum_axis(s, 1));
      x = take_lastdim(concat({xa, xb}, 1), flip_);
    }
    if (!batched) return {reshape(x, {latent_}), log_det};
    return {x, log_det};
  }

  Tensor inverse(const Tensor& z, const Tensor& cond) const {
    auto [x, c, batched] = prepare(z, cond);
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      x = take_lastdim(x, flip_);
      Tensor xa = slice(x, 1, 0, it->half);
      Tensor yb = slice(x, 1, it->half, it->half);
      auto [shift, s] = it->conditioner(xa, c, clamp_);
      x = concat({xa, mul(sub(yb, shift), exp(neg(s)))}, 1);
    }
    return batched ? x : reshape(x, {latent_});
  }

  nn::ParamList params(const std::string& p) const {
    nn::ParamList l;
    for (std::size_t i = 0; i < layers_.size(); ++i) nn::append(l, layers_[i].params(p + ".coupling" + std::to_string(i)));
    return l;
  }

 private:
  std::tuple<Tensor, Tensor, bool> prepare(const Tensor& z, const Tensor& cond) const {
    if (z.shape().back() % 2 != 0) throw std::invalid_argument("VPFlow: odd latent dimension");
    if (z.shape().back() != latent_)
      throw std::invalid_argument("VPFlow: latent has " + std::to_string(z.shape().back()) + " entries, flow expects " +
                                  std::to_string(latent_));
    const bool batched = z.rank() == 2;
    Tensor x = batched ? z : reshape(z, {1, latent_});
    Tensor c = cond.rank() == 2 ? cond : reshape(cond, {1, cond.numel()});
    if (c.dim(0) != x.dim(0)) throw std::invalid_argument("VPFlow: condition batch mismatch");
    return {x, c, batched};
  }

  std::size_t latent_ = 0;
  double clamp_ = 20.0;
  std::vector<CouplingLayer> layers_;
  std::vector<std::size_t> flip_;
};

/// Motion frames are [F, C_m, H_m, W_m]; the VAE works on flattened rows.
class MotionVAE {
 public:
  MotionVAE() = default;
  MotionVAE(const Config& cfg, Rng& rng, bool zero_init = false)
      : cfg_(cfg),
        ref_proj_(cfg.motion_numel(), cfg.ref_code_dim, rng, zero_init),
        enc_in_(cfg.motion_numel() + cfg.audio_dim, cfg.encoder_hidden, rng, zero_init),
        enc_mu_(cfg.encoder_hidden, cfg.latent_dim, rng, zero_init),
        enc_log_sigma_(cfg.encoder_hidden, cfg.latent_dim, rng, zero_init),
        dec_in_(cfg.latent_dim + cfg.audio_dim + cfg.ref_code_dim, cfg.decoder_hidden, rng, zero_init),
        dec_hidden_(cfg.decoder_hidden, cfg.decoder_hidden, rng, zero_init),
        dec_out_(cfg.decoder_hidden, cfg.motion_numel(), rng, zero_init) {}

  const Config& config() const { return cfg_; }

  GaussianLatent encode(const Tensor& motion, const AudioFeatureSequence& audio) const {
    if (motion.dim(0) != audio.frames())
      throw std::invalid_argument("vae_encode: " + std::to_string(motion.dim(0)) + " motion frames vs " +
                                  std::to_string(audio.frames()) + " audio frames");
    const std::size_t F = motion.dim(0);
    Tensor rows = concat({reshape(motion, {F, cfg_.motion_numel()}), audio.features}, 1);
    Tensor pooled = mean_axis(silu(enc_in_(rows)), 0);
    Tensor p2 = reshape(pooled, {1, cfg_.encoder_hidden});
    return {reshape(enc_mu_(p2), {cfg_.latent_dim}), reshape(enc_log_sigma_(p2), {cfg_.latent_dim})};
  }

  /// Flattened reference latent -> [ref_code_dim] code.
  Tensor ref_code(const Tensor& ref_latent) const {
    return reshape(ref_proj_(reshape(ref_latent, {1, cfg_.motion_numel()})), {cfg_.ref_code_dim});
  }

  Tensor decode(const Tensor& z_p, const AudioFeatureSequence& audio, const Tensor& ref_code) const {
    if (z_p.numel() != cfg_.latent_dim) throw std::invalid_argument("vae_decode: latent size mismatch");
    const std::size_t F = audio.frames();
    Tensor rows = concat({expand_leading(reshape(z_p, {cfg_.latent_dim}), F), audio.features,
                          expand_leading(reshape(ref_code, {cfg_.ref_code_dim}), F)},
                         1);
    Tensor h = silu(dec_in_(rows));
    h = silu(dec_hidden_(h));
    return reshape(dec_out_(h), {F, cfg_.motion_channels, cfg_.motion_height, cfg_.motion_width});
  }

  nn::ParamList params(const std::string& p) const {
    nn::ParamList l;
    nn::append(l, ref_proj_.params(p + ".ref_proj"));
    nn::append(l, enc_in_.params(p + ".enc_in"));
    nn::append(l, enc_mu_.params(p + ".enc_mu"));
    nn::append(l, enc_log_sigma_.params(p + ".enc_log_sigma"));
    nn::append(l, dec_in_.params(p + ".dec_in"));
    nn::append(l, dec_hidden_.params(p + ".dec_hidden"));
    nn::append(l, dec_out_.params(p + ".dec_out"));
    return l;
  }

 private:
  Config cfg_;
  nn::Linear ref_proj_, enc_in_, enc_mu_, enc_log_sigma_, dec_in_, dec_hidden_, dec_out_;
};

inline constexpr double kMinSigma = 1e-6;

/// z_q = mu + sigma * eps with sigma = max(exp(log_sigma), 1e-6).
inline Tensor sample_latent(const GaussianLatent& g, std::uint64_t seed) {
  if (g.mu.shape() != g.log_sigma.shape()) throw std::invalid_argument("sample_latent: mu/log_sigma shape mismatch");
  if (!all_finite(g.mu)) throw std::invalid_argument("sample_latent: non-finite mu");
  for (double v : g.log_sigma.values())
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
      throw std::invalid_argument("sample_latent: invalid log_sigma");
  Rng rng(seed);
  Tensor eps = rng.normal_tensor(g.mu.shape());
  Tensor sigma = exp(clamp(g.log_sigma, std::log(kMinSigma), 50.0));
  return add(g.mu, mul(sigma, eps));
}

/// Sum over latent dims of 0.5 (mu^2 + sigma^2 - 1 - log sigma^2).
inline Tensor kl_standard_normal(const GaussianLatent& g) {
  Tensor ls = clamp(g.log_sigma, std::log(kMinSigma), 50.0);
  Tensor terms = sub(add(square(g.mu), exp(scale(ls, 2.0))), add_scalar(scale(ls, 2.0), 1.0));
  return scale(sum(terms), 0.5);
}

struct MotionBatchItem {
  Tensor motion;  // [F, C_m, H_m, W_m]
  AudioFeatureSequence audio;
  Tensor ref_latent;  // [C_m, H_m, W_m]
};

/// Full A2M model: extractor-independent flow + VAE pair.
class A2M {
 public:
  A2M() = default;
  A2M(const Config& cfg, std::uint64_t seed)
      : cfg_(cfg), rng_seed_(seed) {
    Rng rng(mix_seed(seed, "a2m"));
    flow_ = VPFlow(cfg, rng);
    vae_ = MotionVAE(cfg, rng);
  }

  const Config& config() const { return cfg_; }
  VPFlow& flow() { return flow_; }
  const VPFlow& flow() const { return flow_; }
  MotionVAE& vae() { return vae_; }
  const MotionVAE& vae() const { return vae_; }

  /// Flow condition = [mean-pooled audio features || reference code].
  Tensor flow_condition(const AudioFeatureSequence& audio, const Tensor& ref_code) const {
    return concat({mean_axis(audio.features, 0), reshape(ref_code, {cfg_.ref_code_dim})}, 0);
  }

  Tensor generate(const Tensor& ref_latent, const AudioFeatureSequence& audio, std::uint64_t seed) const {
    Tensor code = vae_.ref_code(ref_latent);
    Rng rng(seed);
    Tensor z_q = rng.normal_tensor({cfg_.latent_dim});
    FlowState st = flow_.forward(z_q, flow_condition(audio, code));
    return vae_.decode(st.z, audio, code);
  }

  /// Posterior-mean reconstruction (no sampling noise).
  Tensor reconstruct(const MotionBatchItem& item) const {
    Tensor code = vae_.ref_code(item.ref_latent);
    GaussianLatent g = vae_.encode(item.motion, item.audio);
    return vae_.decode(flow_.forward(g.mu, flow_condition(item.audio, code)).z, item.audio, code);
  }

  struct LossParts {
    Tensor total;
    double reconstruction = 0.0;
    double kl = 0.0;
  };

  /// Mean over the batch of MSE(recon, motion) + beta * KL.
  LossParts loss(const std::vector<MotionBatchItem>& batch, double beta, std::uint64_t seed) const {
    if (batch.empty()) throw std::invalid_argument("a2m loss: empty batch");
    Tensor total;
    LossParts parts;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& item = batch[i];
      Tensor code = vae_.ref_code(item.ref_latent);
      GaussianLatent g = vae_.encode(item.motion, item.audio);
      Tensor z_q = sample_latent(g, mix_seed(seed, "sample" + std::to_string(i)));
      FlowState st = flow_.forward(z_q, flow_condition(item.audio, code));
      Tensor recon = mse(vae_.decode(st.z, item.audio, code), item.motion);
      Tensor kl = kl_standard_normal(g);
      Tensor li = add(recon, scale(kl, beta));
      total = total.defined() ? add(total, li) : li;
      parts.reconstruction += recon.item() / static_cast<double>(batch.size());
      parts.kl += kl.item() / static_cast<double>(batch.size());
    }
    parts.total = scale(total, 1.0 / static_cast<double>(batch.size()));
    return parts;
  }

  nn::ParamList params() const {
    nn::ParamList l = flow_.params("a2m.flow");
    nn::append(l, vae_.params("a2m.vae"));
    return l;
  }

 private:
  Config cfg_;
  std::uint64_t rng_seed_ = 0;
  VPFlow flow_;
  MotionVAE vae_;
};

/// Optimizer wrapper implementing the annealed-beta training step.
class Trainer {
 public:
  Trainer(A2M& model, nn::AdamOptions opts, long total_steps)
      : model_(model), adam_(model.params(), opts), total_steps_(std::max(1L, total_steps)) {}

  double beta_at(long step) const {
    const double ramp = model_.config().beta_anneal_fraction * static_cast<double>(total_steps_);
    if (ramp <= 0.0) return model_.config().beta;
    return model_.config().beta * std::min(1.0, static_cast<double>(step) / ramp);
  }

  A2M::LossParts step(const std::vector<MotionBatchItem>& batch, std::uint64_t seed) {
    const double beta = beta_at(adam_.steps());
    adam_.zero_grad();
    A2M::LossParts parts = model_.loss(batch, beta, seed);
    if (!std::isfinite(parts.total.item())) {
      throw std::runtime_error("a2m_train_step: non-finite loss at step " + std::to_string(adam_.steps()) +
                               " (reconstruction=" + std::to_string(parts.reconstruction) +
                               ", kl=" + std::to_string(parts.kl) + ")");
    }
    parts.total.backward();
    adam_.step();
    return parts;
  }

  long steps() const { return adam_.steps(); }

 private:
  A2M& model_;
  nn::Adam adam_;
  long total_steps_;
};

inline void save_motion_frames(const std::filesystem::path& path, const Tensor& frames, const std::string& config_hash) {
  save_tensor(path, frames, {{"fps", kVideoFps}, {"config_hash", config_hash}, {"kind", "motion_frames"}});
}

}  // namespace srm::a2m
