#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "srm/a2m.hpp"
#include "test_support.hpp"

using namespace srm;
using namespace srm::a2m;

namespace {

AudioClip tone(double seconds, double amp = 0.5, double sr = 16000.0) {
  AudioClip c;
  c.sample_rate = sr;
  c.samples.resize(static_cast<std::size_t>(std::llround(seconds * sr)));
  for (std::size_t i = 0; i < c.samples.size(); ++i)
    c.samples[i] = amp * std::sin(2.0 * M_PI * 220.0 * static_cast<double>(i) / sr) *
                   (0.5 + 0.5 * std::sin(2.0 * M_PI * 3.0 * static_cast<double>(i) / sr));
  return c;
}

AudioFeatureSequence random_audio(Rng& rng, std::size_t F, std::size_t D = 8) {
  return {rng.normal_tensor({F, D}), kVideoFps, static_cast<double>(F) / kVideoFps};
}

Config small_config() {
  Config c;
  c.latent_dim = 8;
  c.flow_depth = 2;
  c.flow_hidden = 12;
  c.encoder_hidden = 12;
  c.decoder_hidden = 12;
  c.ref_code_dim = 4;
  c.motion_channels = 2;
  c.motion_height = 2;
  c.motion_width = 2;
  return c;
}

}  // namespace

TEST(AudioFeatures, FrameCountFollowsCeilRule) {
  const auto ex = synthetic_feature_extractor();
  EXPECT_EQ(encode_audio_features(tone(1.0), ex).frames(), 25u);
  EXPECT_EQ(encode_audio_features(tone(1.02), ex).frames(), 26u);
  EXPECT_EQ(encode_audio_features(tone(2.0), ex).frames(), 50u);
}

TEST(AudioFeatures, SilenceGivesZeroRows) {
  const auto seq = encode_audio_features(tone(1.0, 0.0), synthetic_feature_extractor());
  for (double v : seq.features.values()) EXPECT_EQ(v, 0.0);
}

TEST(AudioFeatures, RejectsEmptyClip) {
  AudioClip empty;
  empty.sample_rate = 16000.0;
  EXPECT_THROW(encode_audio_features(empty, synthetic_feature_extractor()), std::invalid_argument);
}

TEST(AudioFeatures, WindowClampsPastEnd) {
  const auto seq = encode_audio_features(tone(0.4), synthetic_feature_extractor());
  const auto w = seq.window(8, 4);
  ASSERT_EQ(w.frames(), 4u);
  for (std::size_t d = 0; d < 8; ++d) EXPECT_EQ(w.features[3 * 8 + d], seq.features[9 * 8 + d]);
}

TEST(VAE, ZeroInitEncoderGivesStandardPosterior) {
  Config cfg;
  Rng rng(1);
  MotionVAE vae(cfg, rng, /*zero_init=*/true);
  const auto g = vae.encode(Tensor({5, 4, 8, 8}, 0.0), random_audio(rng, 5));
  for (double v : g.mu.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.log_sigma.values()) EXPECT_EQ(v, 0.0);
}

TEST(VAE, ZeroInitDecoderGivesZeroFrames) {
  Config cfg;
  Rng rng(2);
  MotionVAE vae(cfg, rng, /*zero_init=*/true);
  const Tensor out = vae.decode(rng.normal_tensor({cfg.latent_dim}), random_audio(rng, 25), rng.normal_tensor({16}));
  EXPECT_EQ(out.shape(), (Shape{25, 4, 8, 8}));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(VAE, EncodeIsDeterministicAndChecksFrames) {
  Config cfg;
  Rng rng(3);
  MotionVAE vae(cfg, rng);
  const Tensor motion = rng.normal_tensor({6, 4, 8, 8});
  const auto audio = random_audio(rng, 6);
  const auto a = vae.encode(motion, audio), b = vae.encode(motion, audio);
  EXPECT_EQ(a.mu.vec(), b.mu.vec());
  EXPECT_EQ(a.log_sigma.vec(), b.log_sigma.vec());
  EXPECT_THROW(vae.encode(motion, random_audio(rng, 5)), std::invalid_argument);
}

TEST(VAE, EncoderGradientMatchesFiniteDifferences) {
  const Config cfg = small_config();
  Rng rng(4);
  MotionVAE vae(cfg, rng);
  const Tensor motion = rng.normal_tensor({3, 2, 2, 2});
  const auto audio = random_audio(rng, 3);
  const Tensor proj = check::projection_like(Tensor({cfg.latent_dim}), 9);
  auto f = [&] { return dot(vae.encode(motion, audio).mu, proj); };
  const auto r = check::grad_check(f, motion, 10, 17, 1e-4);
  EXPECT_LT(r.worst_rel, 1e-4) << r.detail;
  for (const auto& p : vae.params("vae")) {
    if (p.name.find("enc") == std::string::npos) continue;
    auto g = [&] {
      const auto lat = vae.encode(motion, audio);
      return add(dot(lat.mu, proj), dot(lat.log_sigma, proj));
    };
    const auto rp = check::grad_check(g, p.tensor, 10, 23, 1e-4);
    EXPECT_LT(rp.worst_rel, 1e-4) << p.name << " " << rp.detail;
  }
}

TEST(VAE, DecoderGradientMatchesFiniteDifferences) {
  const Config cfg = small_config();
  Rng rng(5);
  MotionVAE vae(cfg, rng);
  const Tensor z = rng.normal_tensor({cfg.latent_dim});
  const auto audio = random_audio(rng, 3);
  const Tensor code = rng.normal_tensor({cfg.ref_code_dim});
  const Tensor proj = check::projection_like(Tensor({3, 2, 2, 2}), 10);
  auto f = [&] { return dot(vae.decode(z, audio, code), proj); };
  const auto r = check::grad_check(f, z, 8, 29, 1e-4);
  EXPECT_LT(r.worst_rel, 1e-4) << r.detail;
  for (const auto& p : vae.params("vae")) {
    if (p.name.find("dec") == std::string::npos) continue;
    const auto rp = check::grad_check(f, p.tensor, 10, 31, 1e-4);
    EXPECT_LT(rp.worst_rel, 1e-4) << p.name << " " << rp.detail;
  }
}

TEST(SampleLatent, ZeroVarianceLimitReturnsMu) {
  GaussianLatent g{Tensor({3}, std::vector<double>{1, 2, 3}),
                   Tensor({3}, -std::numeric_limits<double>::infinity())};
  const Tensor z = sample_latent(g, 7);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(z[i], g.mu[i], 1e-5);
}

TEST(SampleLatent, StandardPosteriorReproducesEpsStream) {
  GaussianLatent g{Tensor({6}, 0.0), Tensor({6}, 0.0)};
  const Tensor z = sample_latent(g, 42);
  Rng rng(42);
  const Tensor eps = rng.normal_tensor({6});
  EXPECT_EQ(z.vec(), eps.vec());
}

TEST(SampleLatent, MonteCarloMeanWithinThreeStandardErrors) {
  GaussianLatent g{Tensor({2}, std::vector<double>{1.0, -1.0}),
                   Tensor({2}, std::vector<double>{std::log(0.5), std::log(2.0)})};
  const std::size_t n = 100000;
  double m0 = 0.0, m1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor z = sample_latent(g, i);
    m0 += z[0];
    m1 += z[1];
  }
  m0 /= static_cast<double>(n);
  m1 /= static_cast<double>(n);
  EXPECT_LT(std::abs(m0 - 1.0), 3.0 * 0.5 / std::sqrt(static_cast<double>(n)));
  EXPECT_LT(std::abs(m1 + 1.0), 3.0 * 2.0 / std::sqrt(static_cast<double>(n)));
}

TEST(SampleLatent, GradientFlowsToParameters) {
  GaussianLatent g{Tensor({2}, std::vector<double>{0.3, -0.2}, true), Tensor({2}, std::vector<double>{0.1, -0.4}, true)};
  sum(sample_latent(g, 3)).backward();
  Rng rng(3);
  const Tensor eps = rng.normal_tensor({2});
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_DOUBLE_EQ(g.mu.grad()[i], 1.0);
    EXPECT_NEAR(g.log_sigma.grad()[i], std::exp(g.log_sigma[i]) * eps[i], 1e-12);
  }
}

TEST(VPFlow, FreshFlowIsComposedFlips) {
  Config cfg;
  Rng rng(6);
  VPFlow flow(cfg, rng);
  const Tensor z = rng.normal_tensor({32});
  const auto st = flow.forward(z, rng.normal_tensor({cfg.flow_cond_dim()}));
  // An even number of reversals is the identity.
  for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(st.z[i], z[i]);
  EXPECT_EQ(st.log_det.item(), 0.0);

  cfg.flow_depth = 3;
  VPFlow odd(cfg, rng);
  const auto st3 = odd.forward(z, rng.normal_tensor({cfg.flow_cond_dim()}));
  for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(st3.z[i], z[31 - i]);
  const Tensor back = odd.inverse(st3.z, rng.normal_tensor({cfg.flow_cond_dim()}));
  for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(back[i], z[i]);
}

TEST(VPFlow, RoundTripAndVolumePreservationOverRandomDraws) {
  const Config cfg;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(1000 + s);
    VPFlow flow(cfg, rng);
    flow.randomize_outputs(rng, 1.0 / std::sqrt(static_cast<double>(cfg.flow_hidden)));
    const Tensor z = rng.normal_tensor({32});
    const Tensor c = rng.normal_tensor({cfg.flow_cond_dim()});
    const auto st = flow.forward(z, c);
    EXPECT_LE(std::abs(st.log_det.item()), 1e-5);
    EXPECT_LE(max_abs_diff(flow.inverse(st.z, c), z), 1e-5);
    EXPECT_LE(max_abs_diff(flow.forward(flow.inverse(z, c), c).z, z), 1e-5);
  }
}

TEST(VPFlow, RejectsOddLatent) {
  Config cfg;
  cfg.latent_dim = 7;
  Rng rng(7);
  EXPECT_THROW(VPFlow(cfg, rng), std::invalid_argument);
  VPFlow ok(Config{}, rng);
  EXPECT_THROW(ok.forward(Tensor({7}, 0.0), Tensor({24}, 0.0)), std::invalid_argument);
  EXPECT_THROW(ok.inverse(Tensor({7}, 0.0), Tensor({24}, 0.0)), std::invalid_argument);
}

TEST(VPFlow, ClampedScalesStillInvert) {
  const Config cfg;
  for (const double raw : {20.0, 50.0}) {
    Rng rng(8);
    VPFlow flow(cfg, rng);
    for (auto& layer : flow.layers()) {
      for (auto& w : layer.out.weight.mutable_values()) w = 0.0;
      auto b = layer.out.bias.mutable_values();
      for (std::size_t i = 0; i < layer.half; ++i) b[i] = 0.0;
      for (std::size_t i = 0; i < layer.half; ++i) b[layer.half + i] = i % 2 ? raw : -raw;
    }
    const Tensor z = rng.normal_tensor({32});
    const Tensor c = rng.normal_tensor({cfg.flow_cond_dim()});
    const auto st = flow.forward(z, c);
    EXPECT_LE(std::abs(st.log_det.item()), 1e-5);
    const Tensor back = flow.inverse(st.z, c);
    for (std::size_t i = 0; i < 32; ++i) EXPECT_NEAR(back[i], z[i], 1e-4 * std::max(1.0, std::abs(z[i])));
  }
}

TEST(VPFlow, GradientMatchesFiniteDifferences) {
  const Config cfg = small_config();
  Rng rng(9);
  VPFlow flow(cfg, rng);
  flow.randomize_outputs(rng, 0.3);
  const Tensor z = rng.normal_tensor({cfg.latent_dim});
  const Tensor c = rng.normal_tensor({cfg.flow_cond_dim()});
  const Tensor proj = check::projection_like(z, 11);
  auto f = [&] { return dot(flow.forward(z, c).z, proj); };
  EXPECT_LT(check::grad_check(f, z, 8, 37, 1e-4).worst_rel, 1e-4);
  EXPECT_LT(check::grad_check(f, c, 8, 41, 1e-4).worst_rel, 1e-4);
  for (const auto& p : flow.params("flow")) {
    const auto r = check::grad_check(f, p.tensor, 10, 43, 1e-4);
    EXPECT_LT(r.worst_rel, 1e-4) << p.name << " " << r.detail;
  }
}

TEST(A2MModel, GenerateIsDeterministicAndFrameAligned) {
  A2M model(Config{}, 5);
  Rng rng(10);
  const auto audio = encode_audio_features(tone(2.0), synthetic_feature_extractor());
  const Tensor ref = rng.normal_tensor({4, 8, 8});
  const Tensor a = model.generate(ref, audio, 77), b = model.generate(ref, audio, 77);
  EXPECT_EQ(a.shape(), (Shape{50, 4, 8, 8}));
  EXPECT_EQ(a.vec(), b.vec());
  EXPECT_NE(a.vec(), model.generate(ref, audio, 78).vec());
}

TEST(A2MModel, KlClosedForms) {
  EXPECT_EQ(kl_standard_normal({Tensor({4}, 0.0), Tensor({4}, 0.0)}).item(), 0.0);
  EXPECT_DOUBLE_EQ(kl_standard_normal({Tensor({1}, 1.0), Tensor({1}, 0.0)}).item(), 0.5);
  // sigma = e: 0.5 (0 + e^2 - 1 - 2)
  EXPECT_NEAR(kl_standard_normal({Tensor({1}, 0.0), Tensor({1}, 1.0)}).item(), 0.5 * (std::exp(2.0) - 3.0), 1e-12);
}

TEST(A2MModel, ZeroBetaLossIsPlainMse) {
  A2M model(Config{}, 6);
  Rng rng(11);
  MotionBatchItem item{rng.normal_tensor({5, 4, 8, 8}), random_audio(rng, 5), rng.normal_tensor({4, 8, 8})};
  const auto parts = model.loss({item}, 0.0, 99);
  const Tensor code = model.vae().ref_code(item.ref_latent);
  const auto g = model.vae().encode(item.motion, item.audio);
  const Tensor z = sample_latent(g, mix_seed(99, "sample0"));
  const Tensor recon = model.vae().decode(model.flow().forward(z, model.flow_condition(item.audio, code)).z, item.audio, code);
  EXPECT_DOUBLE_EQ(parts.total.item(), mse(recon, item.motion).item());
}

TEST(A2MModel, OverfitsOnePairWithinBudget) {
  Config cfg;
  A2M model(cfg, 12);
  Rng rng(12);
  MotionBatchItem item{rng.normal_tensor({10, 4, 8, 8}), random_audio(rng, 10), rng.normal_tensor({4, 8, 8})};
  Trainer trainer(model, {1e-3}, 2000);
  double var = 0.0;
  for (double v : item.motion.values()) var += v * v;
  var /= static_cast<double>(item.motion.numel());
  double recon = 0.0;
  for (long s = 0; s < 2000; ++s) {
    trainer.step({item}, static_cast<std::uint64_t>(s));
    if (s % 100 == 99) {
      NoGradGuard ng;
      recon = mse(model.reconstruct(item), item.motion).item();
      if (recon < 0.01 * var) break;
    }
  }
  EXPECT_LT(recon, 0.01 * var);
}

TEST(A2MModel, TrainerAnnealsBeta) {
  Config cfg;
  cfg.beta = 0.02;
  A2M model(cfg, 13);
  Trainer trainer(model, {}, 100);
  EXPECT_EQ(trainer.beta_at(0), 0.0);
  EXPECT_NEAR(trainer.beta_at(5), 0.01, 1e-15);
  EXPECT_EQ(trainer.beta_at(10), 0.02);
  EXPECT_EQ(trainer.beta_at(90), 0.02);
}

TEST(A2MModel, NonFiniteLossAbortsWithDiagnostics) {
  A2M model(Config{}, 14);
  Rng rng(14);
  Tensor motion = rng.normal_tensor({3, 4, 8, 8});
  motion.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
  Trainer trainer(model, {}, 10);
  try {
    trainer.step({{motion, random_audio(rng, 3), rng.normal_tensor({4, 8, 8})}}, 1);
    FAIL();
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos) << e.what();
  }
}

TEST(A2MModel, MotionExportCarriesSidecar) {
  Rng rng(15);
  const Tensor frames = rng.normal_tensor({3, 4, 8, 8});
  const auto path = std::filesystem::temp_directory_path() / "srm_motion_test.f32";
  save_motion_frames(path, frames, "abc");
  const Tensor back = load_tensor(path);
  EXPECT_EQ(back.shape(), frames.shape());
  EXPECT_EQ(read_json(path.string() + ".json").at("config_hash"), "abc");
}
