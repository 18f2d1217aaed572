#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "srm/losses.hpp"
#include "srm/predictors.hpp"
#include "srm/synth.hpp"
#include "test_support.hpp"

using namespace srm;
using namespace srm::losses;

namespace {

emotion::VASequence va_seq(const std::vector<std::pair<double, double>>& v) {
  emotion::VASequence s;
  double t = 0.0;
  for (const auto& [a, b] : v) {
    s.pairs.push_back({a, b});
    s.spans.push_back({t, t + 2.0});
    t += 1.0;
  }
  return s;
}

AUMatrix au_matrix(std::size_t T, std::size_t N, const std::vector<double>& v) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < N; ++i) ids.push_back("AU" + std::to_string(i));
  return {Tensor({T, N}, v), ids};
}

CaptionEmbedding emb(const std::vector<double>& v) { return {Tensor({v.size()}, v)}; }

double loop_mse(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.numel());
}

}  // namespace

// ---------------------------------------------------------------------------
// Worked examples

TEST(SyncLoss, Examples) {
  EXPECT_EQ(sync_loss(SyncEstimate{0.4, 1.2}, SyncEstimate{0.4, 1.2}), 0.0);
  EXPECT_NEAR(sync_loss(SyncEstimate{0.5, 1.0}, SyncEstimate{0.0, 1.0}), 0.25, 1e-12);
  EXPECT_NEAR(sync_loss(SyncEstimate{0.3, 2.0}, SyncEstimate{0.1, 1.5}), 0.29, 1e-12);
  EXPECT_NEAR(sync_loss(Tensor({2}, {0.3, 2.0}), Tensor({2}, {0.1, 1.5})).item(), 0.29, 1e-12);
}

TEST(SyncLoss, RejectsWrongArity) {
  EXPECT_THROW(sync_loss(Tensor({3}, 0.0), Tensor({2}, 0.0)), std::invalid_argument);
}

TEST(EmoLoss, Examples) {
  const auto a = va_seq({{0.2, 0.3}, {0.1, -0.4}});
  EXPECT_EQ(emo_loss(a, a), 0.0);
  EXPECT_NEAR(emo_loss(va_seq({{1, 0}}), va_seq({{0, 0}})), 1.0, 1e-12);
  EXPECT_NEAR(emo_loss(va_seq({{1, 0}, {0, 1}}), va_seq({{0, 0}, {0, 0}})), 1.0, 1e-12);
}

TEST(EmoLoss, SegmentCountMismatchRejected) {
  try {
    emo_loss(va_seq({{1, 0}, {0, 1}}), va_seq({{0, 0}}));
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("resample"), std::string::npos);
  }
}

TEST(AuLoss, Examples) {
  const auto a = au_matrix(2, 2, {0.1, 0.2, 0.3, 0.4});
  EXPECT_EQ(au_loss(a, a), 0.0);
  EXPECT_NEAR(au_loss(au_matrix(2, 2, {1, 1, 1, 1}), au_matrix(2, 2, {0, 0, 0, 0})), 1.0, 1e-12);
  EXPECT_NEAR(au_loss(au_matrix(1, 3, {0.5, 0.0, 1.0}), au_matrix(1, 3, {0, 0, 0})), 1.25 / 3.0, 1e-12);
  EXPECT_NEAR(au_loss(au_matrix(1, 3, {0.5, 0.0, 1.0}), au_matrix(1, 3, {0, 0, 0})), 0.41667, 1e-5);
}

TEST(AuLoss, ShapeAndIdMismatchRejected) {
  EXPECT_THROW(au_loss(au_matrix(1, 3, {0, 0, 0}), au_matrix(3, 1, {0, 0, 0})), std::invalid_argument);
  auto b = au_matrix(1, 2, {0, 0});
  b.ids[1] = "AU99";
  EXPECT_THROW(au_loss(au_matrix(1, 2, {0, 0}), b), std::invalid_argument);
}

TEST(AttrActionLoss, Examples) {
  EXPECT_NEAR(attr_action_loss(emb({0.3, -2.0, 1.0}), emb({0.3, -2.0, 1.0})), 0.0, 1e-12);
  EXPECT_NEAR(attr_action_loss(emb({1, 0}), emb({0, 1})), 1.0, 1e-12);
  EXPECT_NEAR(attr_action_loss(emb({1, 0}), emb({-1, 0})), 2.0, 1e-12);
  const double r = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(attr_action_loss(emb({1, 0}), emb({r, r})), 1.0 - r, 1e-12);
  EXPECT_NEAR(attr_action_loss(emb({1, 0}), emb({r, r})), 0.29289, 1e-5);
}

TEST(AttrActionLoss, ZeroNormRejected) {
  EXPECT_THROW(attr_action_loss(emb({0, 0}), emb({1, 0})), std::invalid_argument);
  EXPECT_THROW(attr_action_loss(emb({1, 0}), emb({0, 0})), std::invalid_argument);
}

TEST(SimpleLoss, Examples) {
  Rng rng(3);
  const Tensor e = rng.normal_tensor({4, 8});
  EXPECT_EQ(simple_loss(e, e).item(), 0.0);
  EXPECT_NEAR(simple_loss(Tensor({3, 5}, 0.0), Tensor({3, 5}, 1.0)).item(), 1.0, 1e-12);
  EXPECT_THROW(simple_loss(Tensor({3, 5}, 0.0), Tensor({5, 3}, 0.0)), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Properties

TEST(LossProperties, MatchesLoopOracleOnRandomInputs) {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t K = 1 + rng.index(6), T = 1 + rng.index(5), N = 1 + rng.index(7), D = 2 + rng.index(9);

    const Tensor sp = rng.normal_tensor({2}), sg = rng.normal_tensor({2});
    const double sync_ref = (sp[0] - sg[0]) * (sp[0] - sg[0]) + (sp[1] - sg[1]) * (sp[1] - sg[1]);
    ASSERT_NEAR(sync_loss(sp, sg).item(), sync_ref, 1e-7);

    const Tensor vp = rng.normal_tensor({K, 2}), vg = rng.normal_tensor({K, 2});
    double emo_ref = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double dv = vp[2 * k] - vg[2 * k], da = vp[2 * k + 1] - vg[2 * k + 1];
      emo_ref += dv * dv + da * da;
    }
    ASSERT_NEAR(emo_loss(vp, vg).item(), emo_ref / static_cast<double>(K), 1e-7);

    const Tensor ap = rng.uniform_tensor({T, N}, 0.0, 1.0), ag = rng.uniform_tensor({T, N}, 0.0, 1.0);
    double au_ref = 0.0;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < N; ++i) au_ref += (ap[t * N + i] - ag[t * N + i]) * (ap[t * N + i] - ag[t * N + i]);
    ASSERT_NEAR(au_loss(ap, ag).item(), au_ref / static_cast<double>(T * N), 1e-7);

    const Tensor ep = rng.normal_tensor({D}), eg = rng.normal_tensor({D});
    double d = 0.0, np = 0.0, ng = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      d += ep[i] * eg[i];
      np += ep[i] * ep[i];
      ng += eg[i] * eg[i];
    }
    ASSERT_NEAR(attr_action_loss(ep, eg).item(), 1.0 - d / std::sqrt(np * ng), 1e-7);

    const Tensor xp = rng.normal_tensor({T, N, 3}), xg = rng.normal_tensor({T, N, 3});
    ASSERT_NEAR(simple_loss(xp, xg).item(), loop_mse(xp, xg), 1e-7);
  }
}

TEST(LossProperties, NonNegativeAndSymmetric) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor sp = rng.normal_tensor({2}), sg = rng.normal_tensor({2});
    const Tensor vp = rng.normal_tensor({3, 2}), vg = rng.normal_tensor({3, 2});
    const Tensor ap = rng.normal_tensor({2, 4}), ag = rng.normal_tensor({2, 4});
    const Tensor ep = rng.normal_tensor({5}), eg = rng.normal_tensor({5});
    EXPECT_GE(sync_loss(sp, sg).item(), 0.0);
    EXPECT_GE(emo_loss(vp, vg).item(), 0.0);
    EXPECT_GE(au_loss(ap, ag).item(), 0.0);
    const double attr = attr_action_loss(ep, eg).item();
    EXPECT_GE(attr, 0.0);
    EXPECT_LE(attr, 2.0);
    EXPECT_DOUBLE_EQ(sync_loss(sp, sg).item(), sync_loss(sg, sp).item());
    EXPECT_DOUBLE_EQ(emo_loss(vp, vg).item(), emo_loss(vg, vp).item());
    EXPECT_DOUBLE_EQ(au_loss(ap, ag).item(), au_loss(ag, ap).item());
    EXPECT_NEAR(attr, attr_action_loss(eg, ep).item(), 1e-15);
  }
}

TEST(LossProperties, CosineScaleInvariance) {
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor ep = rng.normal_tensor({6}), eg = rng.normal_tensor({6});
    const double base = attr_action_loss(ep, eg).item();
    const double s = std::exp(rng.uniform(-5.0, 5.0));
    EXPECT_NEAR(attr_action_loss(scale(ep, s), eg).item(), base, 1e-12);
    EXPECT_NEAR(attr_action_loss(ep, scale(eg, s)).item(), base, 1e-12);
  }
}

TEST(LossProperties, GradientsMatchFiniteDifferences) {
  Rng rng(14);
  const Tensor sg = rng.normal_tensor({2}), vg = rng.normal_tensor({4, 2}), ag = rng.uniform_tensor({3, 6}, 0.0, 1.0);
  const Tensor eg = rng.normal_tensor({9}), xg = rng.normal_tensor({2, 5});
  Tensor sp = rng.normal_tensor({2}), vp = rng.normal_tensor({4, 2}), ap = rng.uniform_tensor({3, 6}, 0.0, 1.0);
  Tensor ep = rng.normal_tensor({9}), xp = rng.normal_tensor({2, 5});

  const auto check = [](const char* name, const std::function<Tensor()>& f, const Tensor& p) {
    const auto r = check::grad_check(f, p, p.numel(), 99, 1e-5, 1e-9);
    EXPECT_LT(r.worst_rel, 1e-5) << name << ": " << r.detail;
  };
  check("sync", [&] { return sync_loss(sp, sg); }, sp);
  check("emo", [&] { return emo_loss(vp, vg); }, vp);
  check("au", [&] { return au_loss(ap, ag); }, ap);
  check("attr", [&] { return attr_action_loss(ep, eg); }, ep);
  check("simple", [&] { return simple_loss(xp, xg); }, xp);
}

// ---------------------------------------------------------------------------
// Weighted total and report

TEST(TotalLoss, OnlySimpleWeightEqualsSimpleLoss) {
  Rng rng(15);
  const Tensor a = rng.normal_tensor({3, 4}), b = rng.normal_tensor({3, 4});
  const Tensor simple = simple_loss(a, b);
  const std::vector<Component> comps = {{"simple", simple, 0.0},
                                        {"sync", Tensor({1}, 0.7), 0.0},
                                        {"emo", Tensor({1}, 0.2), 0.0},
                                        {"au", Tensor({1}, 0.3), 0.0},
                                        {"attr", Tensor({1}, 0.9), 0.0}};
  const Total t = total_loss(comps, Weights{1.0, 0.0, 0.0, 0.0, 0.0});
  EXPECT_EQ(t.value.item(), simple.item());
  ASSERT_EQ(t.report.size(), 5u);
  EXPECT_EQ(t.report[1].weighted, 0.0);
  EXPECT_EQ(t.report[1].raw, 0.7);
}

TEST(TotalLoss, UnitWeightsSumByHand) {
  const std::vector<Component> comps = {{"simple", Tensor({1}, 0.5), 1.0},
                                        {"sync", Tensor({1}, 0.25), 1.0},
                                        {"emo", Tensor({1}, 1.0), 1.0},
                                        {"au", Tensor({1}, 0.125), 1.0},
                                        {"attr", Tensor({1}, 2.0), 1.0}};
  EXPECT_DOUBLE_EQ(total_loss(comps).value.item(), 3.875);
  const Total t = total_loss(comps, Weights{});
  EXPECT_NEAR(t.value.item(), 0.5 + 0.1 * (0.25 + 1.0 + 0.125) + 0.05 * 2.0, 1e-15);
  EXPECT_DOUBLE_EQ(t.report[4].weight, 0.05);
  EXPECT_DOUBLE_EQ(t.report[4].weighted, 0.1);
}

TEST(TotalLoss, EmptyIsZero) {
  const Total t = total_loss({});
  EXPECT_EQ(t.value.item(), 0.0);
  EXPECT_TRUE(t.report.empty());
}

TEST(TotalLoss, NegativeWeightRejected) {
  try {
    total_loss({{"au", Tensor({1}, 1.0), -0.1}});
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("au"), std::string::npos);
  }
  Weights w;
  w.emo = -1.0;
  EXPECT_THROW(total_loss({{"emo", Tensor({1}, 1.0), 1.0}}, w), std::invalid_argument);
}

TEST(TotalLoss, NonFiniteComponentNamed) {
  try {
    total_loss({{"simple", Tensor({1}, 1.0), 1.0}, {"sync", Tensor({1}, std::nan("")), 0.1}});
    FAIL() << "expected rejection";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("sync"), std::string::npos);
  }
}

TEST(TotalLoss, UnknownComponentRejected) {
  EXPECT_THROW(total_loss({{"lpips", Tensor({1}, 1.0), 1.0}}, Weights{}), std::invalid_argument);
}

TEST(TotalLoss, GradientFlowsThroughWeights) {
  Tensor p({2}, {0.5, 0.5});
  p.set_requires_grad(true);
  const Total t = total_loss({{"sync", sync_loss(p, Tensor({2}, 0.0)), 0.1}});
  t.value.backward();
  EXPECT_NEAR(p.grad()[0], 0.1 * 2.0 * 0.5, 1e-12);
}

TEST(ReportWriter, WritesOneJsonLinePerComponent) {
  const auto path = std::filesystem::temp_directory_path() / "srm_test_loss_report.jsonl";
  {
    ReportWriter w(path);
    const Total t = total_loss({{"simple", Tensor({1}, 0.5), 1.0}, {"au", Tensor({1}, 0.2), 0.1}});
    w.write(7, t.report);
    w.write(8, t.report);
  }
  std::ifstream in(path);
  std::string line;
  std::vector<json> rows;
  while (std::getline(in, line)) rows.push_back(json::parse(line));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0]["step"], 7);
  EXPECT_EQ(rows[1]["component"], "au");
  EXPECT_DOUBLE_EQ(rows[1]["raw"].get<double>(), 0.2);
  EXPECT_DOUBLE_EQ(rows[1]["weight"].get<double>(), 0.1);
  EXPECT_NEAR(rows[1]["weighted"].get<double>(), 0.02, 1e-15);
  EXPECT_EQ(rows[3]["step"], 8);
  for (const auto& r : rows) EXPECT_EQ(r.size(), 5u);
  std::filesystem::remove(path);
}

// ---------------------------------------------------------------------------
// Synthetic predictors

TEST(Predictors, DeterministicAndInRange) {
  const auto clip = synth::make_clip(21);
  const auto env = frame_envelope(clip.audio, clip.frames.dim(0));
  const auto a = predictors::synthetic_predictors(), b = predictors::synthetic_predictors();
  EXPECT_EQ(a.version, "synthetic-predictors-v1");
  EXPECT_EQ(a.sync(clip.frames, env).vec(), b.sync(clip.frames, env).vec());
  EXPECT_EQ(a.va(clip.frames).vec(), b.va(clip.frames).vec());
  EXPECT_EQ(a.au(clip.frames).vec(), b.au(clip.frames).vec());
  EXPECT_EQ(a.caption(clip.frames).vec(), b.caption(clip.frames).vec());

  const Tensor au = a.au(clip.frames);
  EXPECT_EQ(au.shape(), (Shape{clip.frames.dim(0), 6}));
  for (double v : au.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  const Tensor va = a.va(clip.frames);
  EXPECT_EQ(va.dim(1), 2u);
  for (double v : va.values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  const Tensor sync = a.sync(clip.frames, env);
  EXPECT_GE(sync[0], 0.0);
  EXPECT_GE(sync[1], 0.0);
  EXPECT_LE(sync[1], static_cast<double>(clip.frames.dim(0)) / kVideoFps);
  EXPECT_GT(dot(a.caption(clip.frames), a.caption(clip.frames)).item(), 0.0);
}

TEST(Predictors, VaSegmentsMatchAudioSegmentation) {
  const auto clip = synth::make_clip(22);
  const auto segs = emotion::segment_audio(clip.audio, 2.0, 0.5);
  EXPECT_EQ(predictors::predict_va(clip.frames).dim(0), segs.size());
}

TEST(Predictors, AlignedClipHasSmallOffsetAndShiftedClipLarger) {
  const auto clip = synth::make_clip(23);
  const std::size_t F = clip.frames.dim(0);
  const auto env = frame_envelope(clip.audio, F);
  const double aligned = predictors::estimate_sync(clip.frames, env)[0];
  std::vector<double> shifted(F);
  for (std::size_t f = 0; f < F; ++f) shifted[f] = env[std::min(F - 1, f + 3)];
  const double off = predictors::estimate_sync(clip.frames, shifted)[0];
  EXPECT_LT(aligned, 1.5 / kVideoFps);
  EXPECT_GT(off, aligned);

  const double good = predictors::sync_score(predictors::mouth_track(clip.frames).vec(), env);
  EXPECT_GT(good, 5.0);
}

TEST(Predictors, IdenticalTracksGiveMidpointTimestamp) {
  // Mouth darkness proportional to the envelope gives zero standardized mismatch.
  const std::size_t F = 10, R = 8;
  std::vector<double> env(F), px;
  for (std::size_t f = 0; f < F; ++f) env[f] = 0.5 + 0.4 * std::sin(0.9 * static_cast<double>(f));
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t i = 0; i < 3 * R * R; ++i) px.push_back(1.0 - env[f]);
  const Tensor frames({F, 3, R, R}, px);
  const Tensor s = predictors::estimate_sync(frames, env);
  EXPECT_NEAR(s[0], 0.0, 1e-3);
  EXPECT_NEAR(s[1], static_cast<double>(F) / kVideoFps / 2.0, 1e-9);
}

TEST(Predictors, LossesDifferentiableThroughFrames) {
  const auto clip = synth::make_clip(24, {8, 1.0});
  const Tensor gt_frames = synth::make_clip(25, {8, 1.0}).frames;
  const auto suite = predictors::synthetic_predictors();
  Tensor frames = clip.frames;
  const Tensor au_gt = suite.au(gt_frames), cap_gt = suite.caption(gt_frames), va_gt = suite.va(gt_frames);
  const auto f = [&] {
    return add(add(au_loss(suite.au(frames), au_gt), attr_action_loss(suite.caption(frames), cap_gt)),
               emo_loss(suite.va(frames), va_gt));
  };
  const auto r = check::grad_check(f, frames, 40, 5, 1e-5, 1e-8);
  EXPECT_LT(r.worst_rel, 1e-4) << r.detail;
}
