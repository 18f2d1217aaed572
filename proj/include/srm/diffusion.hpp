#pragma once

// Toy latent video diffusion: a noise schedule, a denoising network whose
// transformer blocks run spatial -> audio -> cross -> temporal attention,
// its ReferenceNet twin, and a deterministic DDIM sampler.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "srm/a2m.hpp"
#include "srm/nn.hpp"
#include "srm/random.hpp"
#include "srm/tensor.hpp"

namespace srm::diffusion {

// ---------------------------------------------------------------------------
// Schedule

class Schedule {
 public:
  Schedule() = default;
  Schedule(std::vector<double> betas) : betas_(std::move(betas)) {
    double prod = 1.0;
    for (double b : betas_) {
      prod *= 1.0 - b;
      alphas_bar_.push_back(prod);
    }
  }

  std::size_t steps() const { return betas_.size(); }
  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas_bar() const { return alphas_bar_; }

  /// Cumulative product at timestep t in [0, T]; t = 0 is the clean signal.
  double alpha_bar(std::size_t t) const {
    if (t == 0) return 1.0;
    if (t > steps()) throw std::invalid_argument("alpha_bar: t=" + std::to_string(t) + " beyond T=" + std::to_string(steps()));
    return alphas_bar_[t - 1];
  }

 private:
  std::vector<double> betas_;
  std::vector<double> alphas_bar_;
};

/// Linear betas from beta_start to beta_end over T steps.
inline Schedule make_schedule(std::size_t T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  if (T > 1 && !(beta_start < beta_end))
    throw std::invalid_argument("make_schedule: betas must increase when T > 1");
  std::vector<double> betas(T);
  for (std::size_t i = 0; i < T; ++i)
    betas[i] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(T - 1);
  return Schedule(std::move(betas));
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
inline Tensor add_noise(const Tensor& x0, std::size_t t, const Tensor& eps, const Schedule& schedule) {
  if (x0.shape() != eps.shape())
    throw std::invalid_argument("add_noise: shape mismatch " + shape_str(x0.shape()) + " vs " + shape_str(eps.shape()));
  const double ab = schedule.alpha_bar(t);
  if (t == 0) return x0;
  return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

/// Clean-signal estimate implied by an eps prediction.
inline Tensor predict_x0(const Tensor& x_t, std::size_t t, const Tensor& eps, const Schedule& schedule) {
  const double ab = schedule.alpha_bar(t);
  return scale(sub(x_t, scale(eps, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
}

// ---------------------------------------------------------------------------
// Networks

struct Config {
  std::size_t latent_channels = 4;
  std::size_t latent_size = 8;
  std::size_t width = 32;
  std::size_t heads = 2;
  std::size_t blocks = 3;
  std::size_t time_dim = 32;
  std::size_t text_dim = 16;
  std::size_t text_tokens = 8;
  std::size_t audio_dim = 8;
  std::size_t audio_radius = 0;
  std::size_t emotion_dim = 27;
  std::size_t ff_mult = 2;

  /// Token-grid side length at block b (halves toward the middle block).
  std::size_t block_size(std::size_t b) const {
    const std::size_t depth = std::min(b, blocks - 1 - b);
    return latent_size >> depth;
  }
};

/// Which conditioning paths are active. Stage-1 training turns off audio,
/// emotion and motion frames.
struct Switches {
  bool audio = true;
  bool emotion = true;
  bool text = true;
  bool temporal = true;
  bool motion = true;
};

struct Conditioning {
  std::vector<Tensor> ref_features;  // per block [width, s_b, s_b]
  Tensor text;                       // [N_t, D_txt]
  a2m::AudioFeatureSequence audio;   // rows aligned to the target frames
  Tensor emotion;                    // [D_e]
  std::optional<Tensor> motion;      // [M, C, H, W] context frames
};

enum class Role { kDenoiser, kReference };

struct Block {
  nn::LayerNorm norm_spatial, norm_audio, norm_cross, norm_temporal, norm_ff;
  nn::Attention spatial, audio, cross, temporal;
  nn::Linear time_proj, ff_in, ff_out;
};

class Network {
 public:
  Network() = default;
  Network(const Config& cfg, Role role, std::uint64_t seed) : cfg_(cfg), role_(role) {
    if (cfg.blocks % 2 == 0) throw std::invalid_argument("Network: block count must be odd");
    if ((cfg.latent_size >> (cfg.blocks / 2)) == 0 || cfg.latent_size % (1u << (cfg.blocks / 2)) != 0)
      throw std::invalid_argument("Network: latent size too small for block count");
    Rng rng(mix_seed(seed, role == Role::kDenoiser ? "denoiser" : "referencenet"));
    const std::size_t C = cfg.width;
    in_proj_ = nn::Linear(cfg.latent_channels, C, rng);
    pos_emb_ = nn::make_param({cfg.latent_size * cfg.latent_size, C},
                              rng.uniform_tensor({cfg.latent_size * cfg.latent_size * C}, -0.1, 0.1).vec());
    text_proj_ = nn::Linear(cfg.text_dim, C, rng);
    if (role == Role::kDenoiser) {
      time_in_ = nn::Linear(cfg.time_dim, C, rng);
      time_out_ = nn::Linear(C, C, rng);
      emotion_proj_ = nn::Linear(cfg.emotion_dim, C, rng);
    }
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      Block blk;
      blk.norm_spatial = nn::LayerNorm(C);
      blk.spatial = nn::Attention(C, C, cfg.heads, rng);
      blk.norm_cross = nn::LayerNorm(C);
      blk.cross = nn::Attention(C, C, cfg.heads, rng);
      blk.norm_ff = nn::LayerNorm(C);
      blk.ff_in = nn::Linear(C, cfg.ff_mult * C, rng);
      blk.ff_out = nn::Linear(cfg.ff_mult * C, C, rng);
      if (role == Role::kDenoiser) {
        blk.norm_audio = nn::LayerNorm(C);
        blk.audio = nn::Attention(C, cfg.audio_dim, cfg.heads, rng);
        blk.norm_temporal = nn::LayerNorm(C);
        blk.temporal = nn::Attention(C, C, cfg.heads, rng);
        blk.time_proj = nn::Linear(C, C, rng);
      }
      blocks_.push_back(std::move(blk));
    }
    if (role == Role::kDenoiser) {
      out_norm_ = nn::LayerNorm(C);
      out_proj_ = nn::Linear(C, cfg.latent_channels, rng);
    }
  }

  const Config& config() const { return cfg_; }
  Role role() const { return role_; }

  /// ReferenceNet pass: one [width, s_b, s_b] map per block, taken after the
  /// block's spatial attention. Text enters through cross attention.
  std::vector<Tensor> reference_features(const Tensor& ref_latent, const Tensor& text, bool use_text = true) const {
    if (role_ != Role::kReference) throw std::logic_error("reference_features on a denoiser network");
    check_latent(ref_latent, 3);
    const std::size_t C = cfg_.width;
    Tensor h = embed_latents(reshape(ref_latent, {1, cfg_.latent_channels, cfg_.latent_size, cfg_.latent_size}));
    Tensor ctx = use_text ? expand_leading(text_proj_(checked_text(text)), 1) : Tensor();
    std::vector<Tensor> feats;
    std::vector<Tensor> skips;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::size_t s = cfg_.block_size(b);
      h = enter_level(h, b, skips);
      const Block& blk = blocks_[b];
      Tensor n = blk.norm_spatial(h);
      h = add(h, blk.spatial(n, n));
      feats.push_back(reshape(permute(h, {0, 2, 1}), {C, s, s}));
      if (ctx.defined()) h = add(h, blk.cross(blk.norm_cross(h), ctx));
      h = add(h, feed_forward(blk, h));
      if (b < blocks_.size() / 2) skips.push_back(h);
    }
    return feats;
  }

  /// Predicts the noise in x_t [F, C, H, W]; output has the same shape.
  Tensor denoise(const Tensor& x_t, std::size_t t, const Conditioning& cond, const Switches& sw = {}) const {
    if (role_ != Role::kDenoiser) throw std::logic_error("denoise on a reference network");
    check_latent(x_t, 4);
    const std::size_t F = x_t.dim(0), C = cfg_.width;
    if (cond.ref_features.size() != blocks_.size())
      throw std::invalid_argument("denoise: " + std::to_string(cond.ref_features.size()) + " reference maps for " +
                                  std::to_string(blocks_.size()) + " blocks");
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::size_t s = cfg_.block_size(b);
      if (cond.ref_features[b].shape() != Shape{C, s, s})
        throw std::invalid_argument("denoise: reference map for block " + std::to_string(b) + " has shape " +
                                    shape_str(cond.ref_features[b].shape()) + ", expected " + shape_str({C, s, s}));
    }

    Tensor temb = time_embedding(t);
    Tensor h = add_trailing(embed_latents(x_t), temb);

    Tensor motion_tokens;
    if (sw.motion && cond.motion) {
      check_latent(*cond.motion, 4);
      motion_tokens = embed_latents(*cond.motion);
    }
    Tensor audio_ctx;
    if (sw.audio) audio_ctx = audio_context(cond.audio, F);
    Tensor cross_ctx = cross_context(cond, sw, F);

    std::vector<Tensor> skips;
    Tensor ctx_tokens = motion_tokens;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::size_t s = cfg_.block_size(b);
      const std::size_t prev = b == 0 ? cfg_.latent_size : cfg_.block_size(b - 1);
      h = enter_level(h, b, skips);
      if (ctx_tokens.defined() && s < prev) ctx_tokens = avg_pool_tokens(ctx_tokens, prev, prev);
      if (ctx_tokens.defined() && s > prev) ctx_tokens = upsample_tokens(ctx_tokens, prev, prev);
      const Block& blk = blocks_[b];
      h = add_trailing(h, blk.time_proj(temb));

      // (1) spatial: per-frame self attention with reference tokens appended to keys/values.
      Tensor n = blk.norm_spatial(h);
      Tensor ref = blk.norm_spatial(reshape(permute(cond.ref_features[b], {1, 2, 0}), {s * s, C}));
      h = add(h, blk.spatial(n, concat({n, expand_leading(ref, F)}, 1)));
      // (2) audio: frame tokens attend to that frame's audio rows.
      if (audio_ctx.defined()) h = add(h, blk.audio(blk.norm_audio(h), audio_ctx));
      // (3) cross: text tokens followed by the emotion token.
      if (cross_ctx.defined()) h = add(h, blk.cross(blk.norm_cross(h), cross_ctx));
      // (4) temporal: per location across frames; motion frames are extra keys/values only.
      if (sw.temporal) h = add(h, temporal_attention(blk, h, ctx_tokens));
      h = add(h, feed_forward(blk, h));
      if (b < blocks_.size() / 2) skips.push_back(h);
    }
    Tensor out = out_proj_(out_norm_(h));  // [F, HW, C_lat]
    return reshape(permute(out, {0, 2, 1}), {F, cfg_.latent_channels, cfg_.latent_size, cfg_.latent_size});
  }

  nn::ParamList params(const std::string& p) const {
    nn::ParamList l;
    nn::append(l, in_proj_.params(p + ".in_proj"));
    l.push_back({p + ".pos_emb", pos_emb_});
    nn::append(l, text_proj_.params(p + ".text_proj"));
    if (role_ == Role::kDenoiser) {
      nn::append(l, time_in_.params(p + ".time_in"));
      nn::append(l, time_out_.params(p + ".time_out"));
      nn::append(l, emotion_proj_.params(p + ".emotion_proj"));
    }
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::string q = p + ".block" + std::to_string(b);
      const Block& blk = blocks_[b];
      nn::append(l, blk.norm_spatial.params(q + ".norm_spatial"));
      nn::append(l, blk.spatial.params(q + ".spatial"));
      nn::append(l, blk.norm_cross.params(q + ".norm_cross"));
      nn::append(l, blk.cross.params(q + ".cross"));
      nn::append(l, blk.norm_ff.params(q + ".norm_ff"));
      nn::append(l, blk.ff_in.params(q + ".ff_in"));
      nn::append(l, blk.ff_out.params(q + ".ff_out"));
      if (role_ == Role::kDenoiser) {
        nn::append(l, blk.norm_audio.params(q + ".norm_audio"));
        nn::append(l, blk.audio.params(q + ".audio"));
        nn::append(l, blk.norm_temporal.params(q + ".norm_temporal"));
        nn::append(l, blk.temporal.params(q + ".temporal"));
        nn::append(l, blk.time_proj.params(q + ".time_proj"));
      }
    }
    if (role_ == Role::kDenoiser) {
      nn::append(l, out_norm_.params(p + ".out_norm"));
      nn::append(l, out_proj_.params(p + ".out_proj"));
    }
    return l;
  }

 private:
  void check_latent(const Tensor& x, std::size_t rank) const {
    const bool ok = x.rank() == rank && x.dim(rank - 3) == cfg_.latent_channels && x.dim(rank - 2) == cfg_.latent_size &&
                    x.dim(rank - 1) == cfg_.latent_size;
    if (!ok) throw std::invalid_argument("latent has shape " + shape_str(x.shape()));
  }

  Tensor checked_text(const Tensor& text) const {
    if (text.rank() != 2 || text.dim(1) != cfg_.text_dim)
      throw std::invalid_argument("text embedding has shape " + shape_str(text.shape()));
    return text;
  }

  /// [N, C_lat, H, W] -> [N, HW, width] tokens with positional embedding.
  Tensor embed_latents(const Tensor& x) const {
    const std::size_t N = x.dim(0), HW = cfg_.latent_size * cfg_.latent_size;
    Tensor tokens = permute(reshape(x, {N, cfg_.latent_channels, HW}), {0, 2, 1});
    return add_trailing(in_proj_(tokens), pos_emb_);
  }

  Tensor time_embedding(std::size_t t) const {
    Tensor e({1, cfg_.time_dim}, nn::sinusoidal_embedding(static_cast<double>(t), cfg_.time_dim));
    return reshape(time_out_(silu(time_in_(e))), {cfg_.width});
  }

  /// Pools on the way down, upsamples and adds the matching skip on the way up.
  Tensor enter_level(Tensor h, std::size_t b, std::vector<Tensor>& skips) const {
    if (b == 0) return h;
    const std::size_t prev = cfg_.block_size(b - 1), s = cfg_.block_size(b);
    if (s < prev) return avg_pool_tokens(h, prev, prev);
    h = upsample_tokens(h, prev, prev);
    h = add(h, skips.back());
    skips.pop_back();
    return h;
  }

  Tensor feed_forward(const Block& blk, const Tensor& h) const {
    return blk.ff_out(gelu(blk.ff_in(blk.norm_ff(h))));
  }

  Tensor audio_context(const a2m::AudioFeatureSequence& audio, std::size_t F) const {
    if (!audio.features.defined() || audio.frames() < F)
      throw std::invalid_argument("denoise: audio has fewer rows than target frames");
    if (audio.dim() != cfg_.audio_dim) throw std::invalid_argument("denoise: audio feature dim mismatch");
    const std::size_t r = cfg_.audio_radius, win = 2 * r + 1;
    std::vector<std::size_t> rows;
    rows.reserve(F * win);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t k = 0; k < win; ++k) {
        const long idx = static_cast<long>(f + k) - static_cast<long>(r);
        rows.push_back(static_cast<std::size_t>(std::clamp(idx, 0L, static_cast<long>(audio.frames()) - 1)));
      }
    return reshape(gather_rows(audio.features, rows), {F, win, cfg_.audio_dim});
  }

  Tensor cross_context(const Conditioning& cond, const Switches& sw, std::size_t F) const {
    std::vector<Tensor> tokens;
    if (sw.text && cond.text.defined()) tokens.push_back(text_proj_(checked_text(cond.text)));
    if (sw.emotion && cond.emotion.defined()) {
      if (cond.emotion.numel() != cfg_.emotion_dim)
        throw std::invalid_argument("denoise: emotion embedding has " + std::to_string(cond.emotion.numel()) +
                                    " entries, expected " + std::to_string(cfg_.emotion_dim));
      tokens.push_back(emotion_proj_(reshape(cond.emotion, {1, cfg_.emotion_dim})));
    }
    if (tokens.empty()) return {};
    return expand_leading(concat(tokens, 0), F);
  }

  static Tensor temporal_attention(const Block& blk, const Tensor& h, const Tensor& ctx) {
    Tensor q = permute(blk.norm_temporal(h), {1, 0, 2});  // [HW, F, C]
    Tensor kv = q;
    if (ctx.defined()) kv = concat({permute(blk.norm_temporal(ctx), {1, 0, 2}), q}, 1);
    return permute(blk.temporal(q, kv), {1, 0, 2});
  }

  Config cfg_;
  Role role_ = Role::kDenoiser;
  nn::Linear in_proj_, text_proj_, time_in_, time_out_, emotion_proj_, out_proj_;
  nn::LayerNorm out_norm_;
  Tensor pos_emb_;
  std::vector<Block> blocks_;
};

/// Denoiser + ReferenceNet pair.
struct Model {
  Config config;
  Network unet;
  Network reference;

  Model() = default;
  Model(const Config& cfg, std::uint64_t seed)
      : config(cfg), unet(cfg, Role::kDenoiser, seed), reference(cfg, Role::kReference, seed) {}

  nn::ParamList params() const {
    nn::ParamList l = reference.params("referencenet");
    nn::append(l, unet.params("unet"));
    return l;
  }
};

// ---------------------------------------------------------------------------
// DDIM (eta = 0)

/// Evenly spaced timesteps 1 <= tau_1 < ... < tau_S = T.
inline std::vector<std::size_t> ddim_timesteps(std::size_t T, std::size_t steps) {
  if (steps < 1 || steps > T)
    throw std::invalid_argument("ddim: steps=" + std::to_string(steps) + " must be in [1, T=" + std::to_string(T) + "]");
  std::vector<std::size_t> ts(steps);
  for (std::size_t i = 1; i <= steps; ++i)
    ts[i - 1] = static_cast<std::size_t>(std::llround(static_cast<double>(i) * static_cast<double>(T) / static_cast<double>(steps)));
  return ts;
}

using EpsModel = std::function<Tensor(const Tensor& x_t, std::size_t t)>;

/// Runs the deterministic trajectory from x at timestep `t_start` down to 0,
/// visiting the ddim_timesteps(t_start, steps) grid.
inline Tensor ddim_denoise(Tensor x, std::size_t t_start, const EpsModel& model, const Schedule& schedule,
                           std::size_t steps) {
  NoGradGuard no_grad;
  const auto ts = ddim_timesteps(t_start, steps);
  for (std::size_t i = ts.size(); i-- > 0;) {
    const std::size_t t = ts[i], prev = i == 0 ? 0 : ts[i - 1];
    Tensor eps = model(x, t);
    Tensor x0 = predict_x0(x, t, eps, schedule);
    if (prev == 0) {
      x = x0;
    } else {
      const double ab = schedule.alpha_bar(prev);
      x = add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
    }
  }
  return x;
}

/// Samples from seeded Gaussian noise at t = T.
inline Tensor ddim_sample(const Shape& shape, const EpsModel& model, const Schedule& schedule, std::size_t steps,
                          std::uint64_t seed) {
  if (steps > schedule.steps())
    throw std::invalid_argument("ddim_sample: " + std::to_string(steps) + " steps exceed T=" + std::to_string(schedule.steps()));
  Rng rng(seed);
  return ddim_denoise(rng.normal_tensor(shape), schedule.steps(), model, schedule, steps);
}

}  // namespace srm::diffusion
