#pragma once

// End-to-end glue: ingest and standardization, two-stage training, windowed
// inference with motion-frame chaining, and evaluation.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "srm/a2m.hpp"
#include "srm/audio.hpp"
#include "srm/codec.hpp"
#include "srm/config.hpp"
#include "srm/diffusion.hpp"
#include "srm/emotion.hpp"
#include "srm/image_io.hpp"
#include "srm/losses.hpp"
#include "srm/metrics.hpp"
#include "srm/predictors.hpp"
#include "srm/random.hpp"
#include "srm/serialize.hpp"
#include "srm/tensor.hpp"

namespace srm::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Text encoder

/// Frozen caption encoder: lower-cased word tokens mapped to fixed seeded
/// vectors plus a positional sinusoid, padded or truncated to `tokens` rows.
class TextEncoder {
 public:
  explicit TextEncoder(std::size_t tokens = 8, std::size_t dim = 16) : tokens_(tokens), dim_(dim) {}

  static std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
      if (std::isalnum(static_cast<unsigned char>(ch))) {
        cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
      } else if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
  }

  Tensor operator()(const std::string& caption) const {
    auto words = tokenize(caption);
    words.resize(tokens_, "<pad>");
    std::vector<double> v;
    v.reserve(tokens_ * dim_);
    for (std::size_t i = 0; i < tokens_; ++i) {
      Rng rng(mix_seed(fnv1a(words[i]), "text-token"));
      const auto pos = nn::sinusoidal_embedding(static_cast<double>(i), dim_);
      for (std::size_t d = 0; d < dim_; ++d) v.push_back(rng.normal() + 0.5 * pos[d]);
    }
    return Tensor({tokens_, dim_}, std::move(v));
  }

  static std::string version() { return "hashed-token-text-v1"; }

 private:
  std::size_t tokens_, dim_;
};

// ---------------------------------------------------------------------------
// Ingest

struct IngestOptions {
  double fps = kVideoFps;
  double sample_rate = kCanonicalSampleRate;
  double min_duration_s = 3.0;
  double max_duration_s = 20.0;
  std::size_t resolution = 32;
};

struct ClipRecord {
  std::string id;
  fs::path frames_path;
  fs::path audio_path;
  std::string caption;
  double duration_s = 0.0;
  double fps = kVideoFps;
  double sample_rate = kCanonicalSampleRate;
  std::size_t frames = 0;
  bool landmark_ok = true;
  bool single_speaker = true;

  json to_json() const {
    return {{"id", id},
            {"frames_path", frames_path.filename().string()},
            {"audio_path", audio_path.filename().string()},
            {"caption", caption},
            {"duration_s", duration_s},
            {"fps", fps},
            {"sample_rate", sample_rate},
            {"frames", frames},
            {"landmark_ok", landmark_ok},
            {"single_speaker", single_speaker}};
  }
};

struct IngestOutcome {
  bool accepted = false;
  std::string reason;  // empty when accepted
  std::string detail;
  ClipRecord record;
};

/// Source index for each output frame under nearest-frame selection.
inline std::vector<std::size_t> nearest_frame_indices(std::size_t n_in, double fps_in, double fps_out) {
  if (n_in == 0) return {};
  const auto n_out = static_cast<std::size_t>(std::llround(static_cast<double>(n_in) * fps_out / fps_in));
  std::vector<std::size_t> idx(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    const auto src = static_cast<std::size_t>(std::llround(static_cast<double>(i) * fps_in / fps_out));
    idx[i] = std::min(src, n_in - 1);
  }
  return idx;
}

inline Tensor resample_frames(const Tensor& frames, double fps_in, double fps_out) {
  const auto idx = nearest_frame_indices(frames.dim(0), fps_in, fps_out);
  if (idx.empty()) throw std::invalid_argument("resample_frames: no frames");
  return gather_rows(frames, idx);
}

/// Nearest-neighbour resize of [N, 3, H, W] to [N, 3, R, R].
inline Tensor resize_frames(const Tensor& frames, std::size_t R) {
  const std::size_t N = frames.dim(0), H = frames.dim(2), W = frames.dim(3);
  if (H == R && W == R) return frames;
  std::vector<double> out(N * 3 * R * R);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < R; ++y)
        for (std::size_t x = 0; x < R; ++x) {
          const std::size_t sy = std::min(H - 1, (2 * y + 1) * H / (2 * R));
          const std::size_t sx = std::min(W - 1, (2 * x + 1) * W / (2 * R));
          out[((n * 3 + c) * R + y) * R + x] = frames[((n * 3 + c) * H + sy) * W + sx];
        }
  return Tensor({N, 3, R, R}, std::move(out));
}

/// Resampled to the canonical rate and peak-normalized.
inline AudioClip standardize_audio(const AudioClip& clip, double sample_rate = kCanonicalSampleRate) {
  return peak_normalize(resample_linear(clip, sample_rate));
}

/// Reads raw_dir/{frames/, audio.wav, caption.txt, clip.json} and, if it passes
/// the filters, writes the standardized clip to out_dir/<id>/.
inline IngestOutcome ingest_clip(const fs::path& raw_dir, const fs::path& out_root, const IngestOptions& opt) {
  IngestOutcome res;
  ClipRecord& rec = res.record;
  rec.id = raw_dir.filename().string();
  auto reject = [&](const std::string& reason, const std::string& detail) {
    res.accepted = false;
    res.reason = reason;
    res.detail = detail;
    return res;
  };

  json meta = json::object();
  if (fs::exists(raw_dir / "clip.json")) {
    try {
      meta = read_json(raw_dir / "clip.json");
    } catch (const std::exception& e) {
      return reject("unreadable_metadata", e.what());
    }
  }
  const double fps_in = meta.value("fps", opt.fps);
  rec.landmark_ok = meta.value("landmark_ok", true);
  rec.single_speaker = meta.value("single_speaker", true);

  Tensor frames;
  try {
    frames = read_frame_dir(raw_dir / "frames");
  } catch (const std::exception& e) {
    if (fs::is_directory(raw_dir / "frames") && fs::is_empty(raw_dir / "frames")) return reject("zero_frames", e.what());
    return reject("unreadable_frames", e.what());
  }
  if (frames.dim(0) == 0) return reject("zero_frames", "no frames");
  AudioClip audio;
  try {
    audio = read_wav(raw_dir / "audio.wav");
    audio.validate();
  } catch (const std::exception& e) {
    return reject("unreadable_audio", e.what());
  }
  if (audio.empty()) return reject("unreadable_audio", "empty audio stream");
  if (!fs::exists(raw_dir / "caption.txt")) return reject("missing_caption", "caption.txt not found");
  rec.caption = read_file(raw_dir / "caption.txt");
  while (!rec.caption.empty() && std::isspace(static_cast<unsigned char>(rec.caption.back()))) rec.caption.pop_back();

  rec.duration_s = static_cast<double>(frames.dim(0)) / fps_in;
  if (rec.duration_s < opt.min_duration_s - 1e-9 || rec.duration_s > opt.max_duration_s + 1e-9)
    return reject("duration_out_of_range", "duration " + std::to_string(rec.duration_s) + " s");
  if (!rec.landmark_ok) return reject("landmark_filter", "side-profile or missing landmarks");
  if (!rec.single_speaker) return reject("multiple_speakers", "more than one speaker");

  frames = resize_frames(resample_frames(frames, fps_in, opt.fps), opt.resolution);
  audio = standardize_audio(audio, opt.sample_rate);

  const fs::path dir = out_root / rec.id;
  fs::create_directories(dir);
  write_frame_dir(dir / "frames", frames);
  write_wav(dir / "audio.wav", audio);
  write_file(dir / "caption.txt", rec.caption + "\n");
  rec.frames_path = dir / "frames";
  rec.audio_path = dir / "audio.wav";
  rec.frames = frames.dim(0);
  rec.fps = opt.fps;
  rec.sample_rate = opt.sample_rate;
  write_json(dir / "record.json", rec.to_json());
  res.accepted = true;
  return res;
}

/// Ingests every subdirectory of in_root (sorted) and writes out_root/manifest.json.
inline json ingest_dataset(const fs::path& in_root, const fs::path& out_root, const IngestOptions& opt) {
  if (!fs::is_directory(in_root)) throw IoError(in_root.string() + ": not a directory");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(in_root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  fs::create_directories(out_root);
  json accepted = json::array(), rejected = json::array();
  for (const auto& d : dirs) {
    const IngestOutcome o = ingest_clip(d, out_root, opt);
    if (o.accepted) accepted.push_back(o.record.id);
    else rejected.push_back({{"id", o.record.id}, {"reason", o.reason}, {"detail", o.detail}});
  }
  json manifest = {{"accepted", accepted},
                   {"rejected", rejected},
                   {"options",
                    {{"fps", opt.fps},
                     {"sample_rate", opt.sample_rate},
                     {"min_duration_s", opt.min_duration_s},
                     {"max_duration_s", opt.max_duration_s},
                     {"resolution", opt.resolution}}}};
  write_json(out_root / "manifest.json", manifest);
  return manifest;
}

// ---------------------------------------------------------------------------
// Dataset

struct ClipData {
  std::string id;
  Tensor frames;  // [N, 3, R, R]
  AudioClip audio;
  std::string caption;
};

inline ClipData load_clip(const fs::path& dir) {
  ClipData c;
  c.id = dir.filename().string();
  c.frames = read_frame_dir(dir / "frames");
  c.audio = read_wav(dir / "audio.wav");
  c.caption = read_file(dir / "caption.txt");
  while (!c.caption.empty() && std::isspace(static_cast<unsigned char>(c.caption.back()))) c.caption.pop_back();
  return c;
}

inline std::vector<ClipData> load_dataset(const fs::path& root) {
  const json manifest = read_json(root / "manifest.json");
  std::vector<ClipData> out;
  for (const auto& id : manifest.at("accepted")) out.push_back(load_clip(root / id.get<std::string>()));
  if (out.empty()) throw std::invalid_argument(root.string() + ": dataset has no accepted clips");
  return out;
}

// ---------------------------------------------------------------------------
// Window sampling

struct WindowSample {
  std::size_t reference = 0;
  std::size_t start = 0;
  std::size_t frames = 0;
  std::vector<long> context;  // source frame per motion slot, -1 = zero padding
  bool padded = false;
};

/// Context slots for a window starting at `start`: the M preceding frames,
/// zero-padded (and flagged) where they fall before the sequence start.
inline WindowSample window_at(std::size_t start, std::size_t F, std::size_t M) {
  WindowSample w;
  w.start = start;
  w.frames = F;
  for (std::size_t k = 0; k < M; ++k) {
    const long src = static_cast<long>(start) - static_cast<long>(M) + static_cast<long>(k);
    w.context.push_back(src < 0 ? -1 : src);
    if (src < 0) w.padded = true;
  }
  return w;
}

/// Reference drawn uniformly over all frames; window start uniform over the
/// placements that have M real preceding frames.
inline WindowSample sample_training_clip(std::size_t n_frames, std::size_t F, std::size_t M, Rng& rng) {
  if (n_frames < F + M)
    throw std::invalid_argument("sample_training_clip: " + std::to_string(n_frames) + " frames, need at least " +
                                std::to_string(F + M));
  const std::size_t start = M + rng.index(n_frames - F - M + 1);
  WindowSample w = window_at(start, F, M);
  w.reference = rng.index(n_frames);
  return w;
}

/// [M, C, H, W] context latents (zeros for padded slots).
inline Tensor gather_context(const Tensor& latents, const WindowSample& w) {
  const std::size_t per = latents.numel() / latents.dim(0);
  std::vector<double> v(w.context.size() * per, 0.0);
  for (std::size_t k = 0; k < w.context.size(); ++k)
    if (w.context[k] >= 0)
      std::copy_n(latents.values().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(w.context[k]) * per), per,
                  v.begin() + static_cast<std::ptrdiff_t>(k * per));
  Shape s = latents.shape();
  s[0] = w.context.size();
  return Tensor(s, std::move(v));
}

// ---------------------------------------------------------------------------
// Models and checkpoints

struct Models {
  TrainConfig config;
  FrameCodec codec;
  diffusion::Model net;
  a2m::A2M a2m;
  bool has_a2m = false;
  int stage = 0;
  long steps_done = 0;

  static Models create(const TrainConfig& cfg) {
    Models m;
    m.config = cfg;
    m.codec = FrameCodec(cfg.resolution, cfg.latent_channels);
    m.net = diffusion::Model(cfg.diffusion_config(), mix_seed(cfg.seed, "diffusion-init"));
    m.a2m = a2m::A2M(cfg.a2m_config(), mix_seed(cfg.seed, "a2m-init"));
    return m;
  }

  diffusion::Schedule schedule() const {
    return diffusion::make_schedule(config.diffusion_steps, config.beta_start, config.beta_end);
  }
};

inline std::string codec_digest(const FrameCodec& codec) { return param_digest(codec.params("codec")); }

/// Rounds the codec to float32 so a checkpoint reload reproduces it exactly.
inline void round_codec_to_float(FrameCodec& codec) {
  for (auto& p : codec.params("codec"))
    for (double& v : p.tensor.mutable_values()) v = static_cast<double>(static_cast<float>(v));
}

inline void save_models(const fs::path& path, const Models& m, const nn::Adam* adam) {
  Checkpoint ck;
  store_params(ck, m.codec.params("codec"));
  store_params(ck, m.net.params());
  if (m.has_a2m) store_params(ck, m.a2m.params());
  if (adam) store_params(ck, adam->state("adam"));
  ck.meta = {{"stage", m.stage},
             {"steps_done", m.steps_done},
             {"adam_steps", adam ? adam->steps() : 0},
             {"has_a2m", m.has_a2m},
             {"config_hash", m.config.hash()},
             {"config", m.config.canonical()},
             {"codec_digest", codec_digest(m.codec)}};
  save_checkpoint(path, ck);
}

inline Models load_models(const fs::path& path, Checkpoint* raw = nullptr) {
  if (!fs::exists(path)) throw IoError(path.string() + ": checkpoint not found");
  Checkpoint ck = load_checkpoint(path);
  Models m = Models::create(TrainConfig::parse(ck.meta.at("config").get<std::string>()));
  nn::ParamList codec = m.codec.params("codec");
  restore_params(ck, codec);
  m.codec.mark_fitted();
  nn::ParamList net = m.net.params();
  restore_params(ck, net);
  m.has_a2m = ck.meta.value("has_a2m", false);
  if (m.has_a2m) {
    nn::ParamList a = m.a2m.params();
    restore_params(ck, a);
  }
  m.stage = ck.meta.value("stage", 0);
  m.steps_done = ck.meta.value("steps_done", 0L);
  if (raw) *raw = std::move(ck);
  return m;
}

inline void restore_adam(const Checkpoint& ck, nn::Adam& adam) {
  std::vector<std::vector<double>> mv, vv;
  for (const auto& p : adam.params()) {
    auto m = ck.tensors.find("adam.m." + p.name), v = ck.tensors.find("adam.v." + p.name);
    if (m == ck.tensors.end() || v == ck.tensors.end()) throw IoError("checkpoint has no optimizer state for " + p.name);
    mv.push_back(m->second.vec());
    vv.push_back(v->second.vec());
  }
  adam.load_state(mv, vv, ck.meta.value("adam_steps", 0L));
}

// ---------------------------------------------------------------------------
// Prepared training data

struct PreparedClip {
  std::string id;
  Tensor frames;   // [N, 3, R, R]
  Tensor latents;  // [N, C, 8, 8]
  AudioClip audio;
  a2m::AudioFeatureSequence features;
  Tensor emotion;  // [D_e]
  Tensor text;     // [N_t, D_txt]
  std::vector<double> envelope;
};

inline PreparedClip prepare_clip(const ClipData& c, const FrameCodec& codec, const TrainConfig& cfg) {
  PreparedClip p;
  p.id = c.id;
  p.frames = c.frames;
  p.latents = codec.encode(c.frames);
  p.audio = c.audio;
  const std::size_t N = c.frames.dim(0);
  a2m::AudioFeatureSequence feats = a2m::encode_audio_features(c.audio, a2m::synthetic_feature_extractor());
  p.features = feats.window(0, N);
  const auto e = emotion::build_emotion_embedding(c.audio, emotion::synthetic_suite(), emotion::EmbeddingConfig{});
  p.emotion = Tensor({e.e_full.size()}, e.e_full);
  p.text = TextEncoder(cfg.diffusion_config().text_tokens, cfg.diffusion_config().text_dim)(c.caption);
  p.envelope = frame_envelope(c.audio, N);
  return p;
}

/// Everything the training loop needs for one window.
struct WindowBatch {
  Tensor x0;  // [F, C, H, W]
  Tensor ref_latent;
  diffusion::Conditioning cond;
  Tensor gt_frames;
  std::vector<double> envelope;
};

inline WindowBatch make_window(const PreparedClip& p, const WindowSample& w, bool with_motion) {
  WindowBatch b;
  b.x0 = slice(p.latents, 0, w.start, w.frames);
  b.ref_latent = reshape(slice(p.latents, 0, w.reference, 1),
                         {p.latents.dim(1), p.latents.dim(2), p.latents.dim(3)});
  b.cond.text = p.text;
  b.cond.audio = p.features.window(w.start, w.frames);
  b.cond.emotion = p.emotion;
  if (with_motion && !w.context.empty()) b.cond.motion = gather_context(p.latents, w);
  b.gt_frames = slice(p.frames, 0, w.start, w.frames);
  b.envelope.assign(p.envelope.begin() + static_cast<std::ptrdiff_t>(w.start),
                    p.envelope.begin() + static_cast<std::ptrdiff_t>(w.start + w.frames));
  return b;
}

inline diffusion::Switches stage_switches(int stage) {
  diffusion::Switches s;
  if (stage == 1) {
    s.audio = false;
    s.emotion = false;
    s.motion = false;
  }
  return s;
}

/// Stage-1 samples are single target frames with a separate reference frame;
/// stage-2 samples are clip_frames windows with motion context.
inline WindowSample draw_sample(const PreparedClip& p, const TrainConfig& cfg, int stage, Rng& rng) {
  const std::size_t N = p.frames.dim(0);
  if (stage == 1) {
    WindowSample w;
    w.reference = rng.index(N);
    w.start = N > 1 ? (w.reference + 1 + rng.index(N - 1)) % N : 0;
    w.frames = 1;
    return w;
  }
  return sample_training_clip(N, cfg.clip_frames, cfg.motion_frames, rng);
}

// ---------------------------------------------------------------------------
// Diffusion training step

struct StepResult {
  double total = 0.0;
  std::vector<losses::ReportLine> report;
};

/// Simple loss plus weighted auxiliary losses on the decoded single-step x0
/// estimate, averaged over the batch.
inline losses::Total diffusion_loss(const Models& m, const std::vector<const PreparedClip*>& clips,
                                    const std::vector<WindowSample>& samples, int stage, std::uint64_t seed,
                                    const predictors::PredictorSuite& suite) {
  const diffusion::Schedule sched = m.schedule();
  const diffusion::Switches sw = stage_switches(stage);
  const losses::Weights& w = m.config.weights;
  const bool aux = stage == 2 && w.any_aux();
  std::map<std::string, Tensor> sums;
  const std::vector<std::string> order = {"simple", "sync", "emo", "au", "attr"};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Rng rng(mix_seed(seed, "item" + std::to_string(i)));
    WindowBatch b = make_window(*clips[i], samples[i], sw.motion);
    const std::size_t t = 1 + rng.index(sched.steps());
    const Tensor eps = rng.normal_tensor(b.x0.shape());
    const Tensor x_t = diffusion::add_noise(b.x0, t, eps, sched);
    b.cond.ref_features = m.net.reference.reference_features(b.ref_latent, b.cond.text, sw.text);
    const Tensor eps_pred = m.net.unet.denoise(x_t, t, b.cond, sw);
    std::map<std::string, Tensor> parts;
    parts["simple"] = losses::simple_loss(eps_pred, eps);
    if (aux) {
      const Tensor frames = m.codec.decode(diffusion::predict_x0(x_t, t, eps_pred, sched));
      Tensor gt_sync, gt_va, gt_au, gt_cap;
      {
        NoGradGuard no_grad;
        gt_sync = suite.sync(b.gt_frames, b.envelope);
        gt_va = suite.va(b.gt_frames);
        gt_au = suite.au(b.gt_frames);
        gt_cap = suite.caption(b.gt_frames);
      }
      if (w.sync > 0) parts["sync"] = losses::sync_loss(suite.sync(frames, b.envelope), gt_sync);
      if (w.emo > 0) parts["emo"] = losses::emo_loss(suite.va(frames), gt_va);
      if (w.au > 0) parts["au"] = losses::au_loss(suite.au(frames), gt_au);
      if (w.attr > 0) parts["attr"] = losses::attr_action_loss(suite.caption(frames), gt_cap);
    }
    for (auto& [k, v] : parts) sums[k] = sums.count(k) ? add(sums[k], v) : v;
  }
  std::vector<losses::Component> comps;
  for (const auto& name : order)
    if (sums.count(name))
      comps.push_back({name, scale(sums[name], 1.0 / static_cast<double>(samples.size())), w.get(name)});
  return losses::total_loss(comps);
}

/// Fixed-seed estimate of the stage objective's simple loss (no gradients).
inline double probe_simple_loss(const Models& m, const std::vector<PreparedClip>& data, int stage, std::size_t n = 16) {
  NoGradGuard no_grad;
  Models probe = m;
  probe.config.weights = {1.0, 0.0, 0.0, 0.0, 0.0};
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    Rng rng(mix_seed(m.config.seed, "probe" + std::to_string(k)));
    const PreparedClip& p = data[k % data.size()];
    const WindowSample w = draw_sample(p, m.config, stage, rng);
    total += diffusion_loss(probe, {&p}, {w}, stage, mix_seed(m.config.seed, "probe-noise" + std::to_string(k)), {})
                 .value.item();
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Training drivers

struct TrainOptions {
  fs::path checkpoint_out;
  fs::path loss_log;            // JSON lines; empty = no log
  std::optional<fs::path> resume;
  std::size_t probe_samples = 16;
  std::function<void(long step, double total)> on_step;
};

struct TrainResult {
  Models models;
  double probe_initial = 0.0;
  double probe_final = 0.0;
  std::string codec_digest_before, codec_digest_after;
  std::vector<double> totals;
  std::vector<double> a2m_losses;
};

namespace detail {

inline void run_diffusion_stage(Models& m, const std::vector<PreparedClip>& data, int stage, const TrainOptions& opt,
                                TrainResult& res) {
  nn::Adam adam(m.net.params(), {m.config.learning_rate});
  long start_step = 0;
  if (opt.resume) {
    Checkpoint ck;
    Models r = load_models(*opt.resume, &ck);
    if (r.stage != stage) throw std::invalid_argument("resume checkpoint is from stage " + std::to_string(r.stage));
    if (r.config.hash() != m.config.hash()) throw std::invalid_argument("resume checkpoint has a different config");
    m = r;
    adam = nn::Adam(m.net.params(), {m.config.learning_rate});
    restore_adam(ck, adam);
    start_step = m.steps_done;
  }
  losses::ReportWriter log;
  if (!opt.loss_log.empty()) log = losses::ReportWriter(opt.loss_log);
  const auto suite = predictors::synthetic_predictors();
  res.probe_initial = probe_simple_loss(m, data, stage, opt.probe_samples);
  for (long step = start_step; step < m.config.steps; ++step) {
    Rng rng(mix_seed(m.config.seed, "stage" + std::to_string(stage) + "-step" + std::to_string(step)));
    std::vector<const PreparedClip*> clips;
    std::vector<WindowSample> samples;
    for (std::size_t b = 0; b < m.config.batch_size; ++b) {
      const PreparedClip& p = data[rng.index(data.size())];
      clips.push_back(&p);
      samples.push_back(draw_sample(p, m.config, stage, rng));
    }
    adam.zero_grad();
    losses::Total total;
    try {
      total = diffusion_loss(m, clips, samples, stage, rng.next_u64(), suite);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("stage " + std::to_string(stage) + " step " + std::to_string(step + 1) + ": " + e.what());
    }
    if (!std::isfinite(total.value.item()))
      throw std::runtime_error("stage " + std::to_string(stage) + " step " + std::to_string(step + 1) +
                               ": non-finite total loss");
    total.value.backward();
    adam.step();
    log.write(step + 1, total.report);
    res.totals.push_back(total.value.item());
    if (opt.on_step) opt.on_step(step + 1, total.value.item());
  }
  m.steps_done = m.config.steps;
  m.stage = stage;
  res.probe_final = probe_simple_loss(m, data, stage, opt.probe_samples);
  if (!opt.checkpoint_out.empty()) save_models(opt.checkpoint_out, m, &adam);
}

inline void train_a2m(Models& m, const std::vector<PreparedClip>& data, TrainResult& res) {
  a2m::Trainer trainer(m.a2m, {m.config.a2m_learning_rate}, m.config.a2m_steps);
  const std::size_t F = m.config.clip_frames;
  for (long step = 0; step < m.config.a2m_steps; ++step) {
    Rng rng(mix_seed(m.config.seed, "a2m-step" + std::to_string(step)));
    std::vector<a2m::MotionBatchItem> batch;
    for (std::size_t b = 0; b < m.config.batch_size; ++b) {
      const PreparedClip& p = data[rng.index(data.size())];
      const std::size_t N = p.latents.dim(0), len = std::min(F, N);
      const std::size_t start = rng.index(N - len + 1);
      a2m::MotionBatchItem item;
      item.motion = slice(p.latents, 0, start, len);
      item.audio = p.features.window(start, len);
      item.ref_latent = reshape(slice(p.latents, 0, rng.index(N), 1), {p.latents.dim(1), p.latents.dim(2), p.latents.dim(3)});
      batch.push_back(std::move(item));
    }
    res.a2m_losses.push_back(trainer.step(batch, rng.next_u64()).total.item());
  }
  m.has_a2m = true;
}

}  // namespace detail

inline std::vector<PreparedClip> prepare_dataset(const std::vector<ClipData>& data, const Models& m) {
  std::vector<PreparedClip> out;
  for (const auto& c : data) {
    if (c.frames.dim(2) != m.config.resolution)
      throw std::invalid_argument("clip " + c.id + " has resolution " + std::to_string(c.frames.dim(2)) +
                                  ", config expects " + std::to_string(m.config.resolution));
    out.push_back(prepare_clip(c, m.codec, m.config));
  }
  return out;
}

/// Fits and freezes the codec, then optimizes ReferenceNet + UNet on
/// reference/target frame pairs.
inline TrainResult train_stage1(const std::vector<ClipData>& dataset, const TrainConfig& cfg,
                                const TrainOptions& opt = {}) {
  if (cfg.stage != 1) throw std::invalid_argument("train_stage1: config stage is " + std::to_string(cfg.stage));
  if (dataset.empty()) throw std::invalid_argument("train_stage1: empty dataset");
  TrainResult res;
  res.models = Models::create(cfg);
  std::vector<Tensor> frames;
  for (const auto& c : dataset) frames.push_back(c.frames);
  res.models.codec.fit(concat(frames, 0));
  round_codec_to_float(res.models.codec);
  res.codec_digest_before = codec_digest(res.models.codec);
  const auto data = prepare_dataset(dataset, res.models);
  detail::run_diffusion_stage(res.models, data, 1, opt, res);
  res.codec_digest_after = codec_digest(res.models.codec);
  if (res.codec_digest_after != res.codec_digest_before)
    throw std::logic_error("train_stage1: frozen codec parameters changed");
  return res;
}

/// Continues from a stage-1 checkpoint with audio, emotion, motion frames and
/// auxiliary losses enabled; the A2M model is trained alongside on the same clips.
inline TrainResult train_stage2(const std::vector<ClipData>& dataset, const TrainConfig& cfg,
                                const fs::path& stage1_checkpoint, const TrainOptions& opt = {}) {
  if (cfg.stage != 2) throw std::invalid_argument("train_stage2: config stage is " + std::to_string(cfg.stage));
  if (dataset.empty()) throw std::invalid_argument("train_stage2: empty dataset");
  if (stage1_checkpoint.empty() || !fs::exists(stage1_checkpoint))
    throw IoError("train_stage2: stage-1 checkpoint '" + stage1_checkpoint.string() + "' not found");
  Models s1 = load_models(stage1_checkpoint);
  if (s1.stage != 1) throw std::invalid_argument("train_stage2: checkpoint is from stage " + std::to_string(s1.stage));
  TrainResult res;
  res.models = Models::create(cfg);
  res.models.codec = s1.codec;
  nn::ParamList dst = res.models.net.params();
  nn::copy_values(s1.net.params(), dst);
  res.codec_digest_before = codec_digest(res.models.codec);
  const auto data = prepare_dataset(dataset, res.models);
  detail::run_diffusion_stage(res.models, data, 2, opt, res);
  if (!opt.resume || !res.models.has_a2m) {
    detail::train_a2m(res.models, data, res);
    if (!opt.checkpoint_out.empty()) {
      // Rewrite with the A2M weights included; optimizer state stays diffusion-only.
      Checkpoint ck = load_checkpoint(opt.checkpoint_out);
      store_params(ck, res.models.a2m.params());
      ck.meta["has_a2m"] = true;
      save_checkpoint(opt.checkpoint_out, ck);
    }
  }
  res.codec_digest_after = codec_digest(res.models.codec);
  if (res.codec_digest_after != res.codec_digest_before)
    throw std::logic_error("train_stage2: frozen codec parameters changed");
  return res;
}

// ---------------------------------------------------------------------------
// Inference

struct InferenceRequest {
  Tensor reference_image;  // [3, H, W]
  std::string caption;
  AudioClip audio;
  std::uint64_t seed = 0;
  std::size_t ddim_steps = 40;
};

struct InferOptions {
  diffusion::Switches switches;
  bool zero_emotion = false;
  std::optional<emotion::ExtractorSuite> emotion_suite;  // synthetic suite when absent
};

struct InferenceResult {
  Tensor frames;   // [N, 3, R, R] in [0, 1]
  Tensor latents;  // [N, C, 8, 8]
  Tensor a2m_motion;
  std::vector<Tensor> window_context;  // motion context fed to each window
  emotion::EmotionEmbedding emotion;
  std::size_t windows = 0;
};

inline InferenceResult infer(const InferenceRequest& req, const Models& m, const InferOptions& opt = {}) {
  if (req.audio.empty()) throw std::invalid_argument("infer: empty audio");
  if (req.reference_image.rank() != 3 || req.reference_image.dim(0) != 3)
    throw std::invalid_argument("infer: reference image must be [3, H, W]");
  NoGradGuard no_grad;
  const TrainConfig& cfg = m.config;
  const diffusion::Schedule sched = m.schedule();
  InferenceResult out;

  const AudioClip audio = standardize_audio(req.audio);
  const std::size_t N = video_frame_count(audio);
  const a2m::AudioFeatureSequence feats = [&] {
    try {
      return a2m::encode_audio_features(audio, a2m::synthetic_feature_extractor()).window(0, N);
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("[audio-features] ") + e.what());
    }
  }();
  try {
    out.emotion = emotion::build_emotion_embedding(audio, opt.emotion_suite ? *opt.emotion_suite : emotion::synthetic_suite(),
                                                   emotion::EmbeddingConfig{});
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("[emotion] ") + e.what());
  }
  Tensor emo({out.emotion.e_full.size()}, out.emotion.e_full);
  if (opt.zero_emotion) emo = Tensor(emo.shape(), 0.0);

  const Tensor ref_img = resize_frames(reshape(req.reference_image, {1, 3, req.reference_image.dim(1), req.reference_image.dim(2)}),
                                       cfg.resolution);
  const Tensor ref_latent = reshape(m.codec.encode(ref_img), {cfg.latent_channels, 8, 8});
  const Tensor text = TextEncoder(cfg.diffusion_config().text_tokens, cfg.diffusion_config().text_dim)(req.caption);

  diffusion::Conditioning cond;
  cond.text = text;
  cond.emotion = emo;
  try {
    cond.ref_features = m.net.reference.reference_features(ref_latent, text, opt.switches.text);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("[referencenet] ") + e.what());
  }
  if (m.has_a2m) {
    try {
      out.a2m_motion = m.a2m.generate(ref_latent, feats, mix_seed(req.seed, "a2m"));
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("[a2m] ") + e.what());
    }
  }

  const std::size_t F = cfg.clip_frames, M = cfg.motion_frames;
  std::vector<Tensor> generated;
  Tensor context;
  if (M > 0 && out.a2m_motion.defined()) context = slice(out.a2m_motion, 0, 0, std::min(M, N));
  for (std::size_t start = 0; start < N; start += F) {
    const std::size_t len = std::min(F, N - start);
    diffusion::Conditioning wc = cond;
    wc.audio = feats.window(start, len);
    if (opt.switches.motion && context.defined()) wc.motion = context;
    out.window_context.push_back(wc.motion ? *wc.motion : Tensor());
    const diffusion::EpsModel model = [&](const Tensor& x, std::size_t t) {
      return m.net.unet.denoise(x, t, wc, opt.switches);
    };
    Tensor x;
    try {
      x = diffusion::ddim_sample({len, cfg.latent_channels, 8, 8}, model, sched, req.ddim_steps,
                                 mix_seed(req.seed, "window" + std::to_string(out.windows)));
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("[ddim] ") + e.what());
    }
    generated.push_back(x);
    // Chain: the last M generated frames condition the next window.
    Tensor all = concat(generated, 0);
    if (M > 0) {
      const std::size_t have = all.dim(0), take = std::min(M, have);
      context = slice(all, 0, have - take, take);
    }
    ++out.windows;
  }
  out.latents = concat(generated, 0);
  out.frames = clamp(m.codec.decode(out.latents), 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalPair {
  std::string id;
  Tensor pred;  // [N, 3, R, R]
  Tensor gt;
  AudioClip audio;
};

inline metrics::MetricReport evaluate(const std::vector<EvalPair>& pairs, const std::string& config_hash,
                                      const predictors::PredictorSuite& suite = predictors::synthetic_predictors(),
                                      const predictors::SyncScorer& scorer = predictors::synthetic_sync_scorer()) {
  if (pairs.empty()) throw std::invalid_argument("evaluate: no clip pairs");
  NoGradGuard no_grad;
  metrics::MetricReport r;
  r.config_hash = config_hash;
  double psnr_sum = 0.0, ssim_sum = 0.0, sync_sum = 0.0, sync_gt_sum = 0.0;
  std::size_t frames = 0;
  std::vector<double> v_pred, v_gt, a_pred, a_gt;
  metrics::Confusion conf;
  std::vector<Tensor> pred_videos, gt_videos;
  metrics::FeatureStats fid_p, fid_g, fvd_p, fvd_g;
  for (const auto& p : pairs) {
    if (p.pred.shape() != p.gt.shape())
      throw std::invalid_argument("evaluate: clip " + p.id + " has " + shape_str(p.pred.shape()) + " generated vs " +
                                  shape_str(p.gt.shape()) + " ground truth");
    r.clip_ids.push_back(p.id);
    const std::size_t N = p.pred.dim(0), R = p.pred.dim(2);
    for (std::size_t f = 0; f < N; ++f) {
      const Tensor a = reshape(slice(p.pred, 0, f, 1), {3, R, R}), b = reshape(slice(p.gt, 0, f, 1), {3, R, R});
      psnr_sum += metrics::psnr(a, b);
      ssim_sum += metrics::ssim(a, b);
    }
    frames += N;
    const Tensor vp = suite.va(p.pred), vg = suite.va(p.gt);
    for (std::size_t k = 0; k < vp.dim(0); ++k) {
      v_pred.push_back(vp[2 * k]);
      a_pred.push_back(vp[2 * k + 1]);
      v_gt.push_back(vg[2 * k]);
      a_gt.push_back(vg[2 * k + 1]);
    }
    const metrics::Confusion c = metrics::au_confusion(suite.au(p.pred), suite.au(p.gt));
    conf.tp += c.tp;
    conf.fp += c.fp;
    conf.fn += c.fn;
    conf.tn += c.tn;
    pred_videos.push_back(p.pred);
    gt_videos.push_back(p.gt);
    fid_p.merge(metrics::FeatureStats::from_rows(metrics::pooled_frame_features(p.pred)));
    fid_g.merge(metrics::FeatureStats::from_rows(metrics::pooled_frame_features(p.gt)));
    if (N > 1) {
      const Tensor fp = metrics::pooled_frame_features(p.pred), fg = metrics::pooled_frame_features(p.gt);
      fvd_p.merge(metrics::FeatureStats::from_rows(sub(slice(fp, 0, 1, N - 1), slice(fp, 0, 0, N - 1))));
      fvd_g.merge(metrics::FeatureStats::from_rows(sub(slice(fg, 0, 1, N - 1), slice(fg, 0, 0, N - 1))));
    }
    if (!p.audio.empty()) {
      sync_sum += metrics::sync_confidence(p.pred, p.audio, scorer);
      sync_gt_sum += metrics::sync_confidence(p.gt, p.audio, scorer);
    }
  }
  const double n = static_cast<double>(pairs.size());
  r.set("PSNR", psnr_sum / static_cast<double>(frames), "psnr-unit-range");
  r.set("SSIM", ssim_sum / static_cast<double>(frames), "ssim-8x8-uniform");
  r.set("FID", metrics::frechet_distance(fid_p, fid_g), "pooled-8x8-grey-frechet");
  if (fvd_p.n > 0) r.set("FVD", metrics::frechet_distance(fvd_p, fvd_g), "pooled-frame-difference-frechet");
  r.set("E-FID", metrics::e_fid(pred_videos, gt_videos, suite.au), suite.version + "/au");
  r.set("F1", metrics::f1_from(conf), suite.version + "/au@0.5-micro");
  r.set("Sync", sync_sum / n, "synthetic-sync-scorer-v1");
  r.set("Sync_GT", sync_gt_sum / n, "synthetic-sync-scorer-v1");
  if (v_pred.size() >= 2) {
    r.set("CCC_V", metrics::ccc(v_pred, v_gt), suite.version + "/va");
    r.set("CCC_A", metrics::ccc(a_pred, a_gt), suite.version + "/va");
  }
  return r;
}

}  // namespace srm::pipeline
