#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "srm/metrics.hpp"
#include "srm/synth.hpp"

using namespace srm;
using namespace srm::metrics;

namespace {

double ssim_oracle(const Tensor& a, const Tensor& b, std::size_t w) {
  const std::size_t C = a.dim(0), H = a.dim(1), W = a.dim(2);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03, n = static_cast<double>(w * w);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y0 = 0; y0 + w <= H; ++y0)
      for (std::size_t x0 = 0; x0 + w <= W; ++x0) {
        std::vector<double> pa, pb;
        for (std::size_t y = y0; y < y0 + w; ++y)
          for (std::size_t x = x0; x < x0 + w; ++x) {
            pa.push_back(a[(c * H + y) * W + x]);
            pb.push_back(b[(c * H + y) * W + x]);
          }
        const double ma = std::accumulate(pa.begin(), pa.end(), 0.0) / n;
        const double mb = std::accumulate(pb.begin(), pb.end(), 0.0) / n;
        double va = 0, vb = 0, cov = 0;
        for (std::size_t i = 0; i < pa.size(); ++i) {
          va += (pa[i] - ma) * (pa[i] - ma);
          vb += (pb[i] - mb) * (pb[i] - mb);
          cov += (pa[i] - ma) * (pb[i] - mb);
        }
        va /= n;
        vb /= n;
        cov /= n;
        total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / static_cast<double>(count);
}

FeatureStats diag_stats(const std::vector<double>& mean, const std::vector<double>& var) {
  FeatureStats s(mean.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    s.mean[static_cast<Eigen::Index>(i)] = mean[i];
    s.cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = var[i];
  }
  s.n = 100;
  return s;
}

FeatureStats random_stats(Rng& rng, std::size_t D, std::size_t N) {
  return FeatureStats::from_rows(rng.normal_tensor({N, D}));
}

/// Tr (S1 S2)^{1/2} for 2x2 PSD matrices: sqrt(tr(S1 S2) + 2 sqrt(det S1 det S2)).
double frechet_2d_oracle(const FeatureStats& a, const FeatureStats& b) {
  const Eigen::Matrix2d s1 = a.cov, s2 = b.cov;
  const double cross = std::sqrt((s1 * s2).trace() + 2.0 * std::sqrt(s1.determinant() * s2.determinant()));
  return (a.mean - b.mean).squaredNorm() + s1.trace() + s2.trace() - 2.0 * cross;
}

}  // namespace

// ---------------------------------------------------------------------------
// PSNR

TEST(Psnr, Examples) {
  Rng rng(1);
  const Tensor a = rng.uniform_tensor({3, 8, 8}, 0.0, 1.0);
  EXPECT_EQ(psnr(a, a), kPsnrIdentical);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  EXPECT_NEAR(psnr(Tensor({3, 8, 8}, 0.5), Tensor({3, 8, 8}, 0.6)), 20.0, 1e-9);
  EXPECT_NEAR(psnr(Tensor({3, 8, 8}, 0.0), Tensor({3, 8, 8}, 1.0)), 0.0, 1e-12);
  EXPECT_THROW(psnr(Tensor({3, 8, 8}, 0.0), Tensor({3, 8, 4}, 0.0)), std::invalid_argument);
}

TEST(Psnr, SymmetricAndMatchesOracle) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const Tensor a = rng.uniform_tensor({3, 6, 5}, 0.0, 1.0), b = rng.uniform_tensor({3, 6, 5}, 0.0, 1.0);
    double se = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) se += std::pow(a[i] - b[i], 2);
    EXPECT_NEAR(psnr(a, b), -10.0 * std::log10(se / static_cast<double>(a.numel())), 1e-6);
    EXPECT_EQ(psnr(a, b), psnr(b, a));
  }
}

// ---------------------------------------------------------------------------
// SSIM

TEST(Ssim, Examples) {
  Rng rng(3);
  const Tensor a = rng.uniform_tensor({3, 16, 16}, 0.0, 1.0);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  const double c1 = 1e-4;
  EXPECT_NEAR(ssim(Tensor({3, 16, 16}, 0.0), Tensor({3, 16, 16}, 1.0)), c1 / (1.0 + c1), 1e-12);
  EXPECT_NEAR(ssim(Tensor({3, 16, 16}, 0.0), Tensor({3, 16, 16}, 1.0)), 9.999e-5, 1e-8);
}

TEST(Ssim, SmallerThanWindowRejected) {
  EXPECT_THROW(ssim(Tensor({3, 7, 16}, 0.0), Tensor({3, 7, 16}, 0.0)), std::invalid_argument);
  SsimOptions g;
  g.gaussian = true;
  EXPECT_THROW(ssim(Tensor({1, 10, 10}, 0.0), Tensor({1, 10, 10}, 0.0), g), std::invalid_argument);
  EXPECT_NO_THROW(ssim(Tensor({1, 11, 11}, 0.2), Tensor({1, 11, 11}, 0.3), g));
}

TEST(Ssim, MatchesSlidingWindowOracleAndIsSymmetric) {
  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    const Tensor a = rng.uniform_tensor({3, 12, 10}, 0.0, 1.0);
    const Tensor b = rng.uniform_tensor({3, 12, 10}, 0.0, 1.0);
    const double s = ssim(a, b);
    EXPECT_NEAR(s, ssim_oracle(a, b, 8), 1e-6);
    EXPECT_NEAR(s, ssim(b, a), 1e-15);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
  }
}

// ---------------------------------------------------------------------------
// CCC

TEST(Ccc, Examples) {
  EXPECT_NEAR(ccc({0.1, 0.5, -0.3, 0.9}, {0.1, 0.5, -0.3, 0.9}), 1.0, 1e-12);
  EXPECT_EQ(ccc({0.1, 0.5, -0.3}, {2.0, 2.0, 2.0}), 0.0);
  // Population moments: cov 4/3, var_x 2/3, var_y 8/3, mean gap 1.
  EXPECT_NEAR(ccc({0, 1, 2}, {0, 2, 4}), 2.0 * (4.0 / 3.0) / (2.0 / 3.0 + 8.0 / 3.0 + 1.0), 1e-12);
  EXPECT_NEAR(ccc({0, 1, 2}, {0, 2, 4}), 8.0 / 13.0, 1e-12);
  EXPECT_THROW(ccc({1.0}, {1.0}), std::invalid_argument);
  EXPECT_THROW(ccc({1.0, 2.0}, {1.0}), std::invalid_argument);
}

TEST(Ccc, RangeMeanShiftPenaltyAndOracle) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.index(10);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = 0.5 * x[i] + rng.normal();
    }
    const double r = ccc(x, y);
    EXPECT_GE(r, -1.0);
    EXPECT_LE(r, 1.0);

    // Oracle: raw-moment form E[xy] - E[x]E[y].
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sxy += x[i] * y[i];
      sxx += x[i] * x[i];
      syy += y[i] * y[i];
    }
    const double nn = static_cast<double>(n);
    const double cov = sxy / nn - mx * my, vx = sxx / nn - mx * mx, vy = syy / nn - my * my;
    EXPECT_NEAR(r, 2 * cov / (vx + vy + (mx - my) * (mx - my)), 1e-6);

    std::vector<double> shifted = x;
    for (auto& v : shifted) v += 0.3;
    EXPECT_LT(ccc(x, shifted), 1.0);
  }
}

// ---------------------------------------------------------------------------
// F1

TEST(F1Au, Examples) {
  const Tensor gt({2, 3}, {0.9, 0.1, 0.8, 0.2, 0.7, 0.0});
  EXPECT_EQ(f1_au(gt, gt), 1.0);
  EXPECT_EQ(f1_au(Tensor({2, 3}, 0.0), gt), 0.0);
  EXPECT_EQ(f1_au(Tensor({2, 3}, 0.0), Tensor({2, 3}, 0.1)), 0.0);
  // TP=2, FP=1, FN=1.
  const Tensor pred({2, 3}, {0.9, 0.6, 0.8, 0.2, 0.1, 0.0});
  const auto c = au_confusion(pred, gt);
  EXPECT_EQ(c.tp, 2u);
  EXPECT_EQ(c.fp, 1u);
  EXPECT_EQ(c.fn, 1u);
  EXPECT_NEAR(f1_au(pred, gt), 2.0 / 3.0, 1e-12);
  EXPECT_THROW(f1_au(Tensor({3, 2}, 0.0), gt), std::invalid_argument);
}

TEST(F1Au, ColumnPermutationInvariantAndOracle) {
  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    const std::size_t T = 1 + rng.index(6), N = 1 + rng.index(6);
    const Tensor p = rng.uniform_tensor({T, N}, 0.0, 1.0), g = rng.uniform_tensor({T, N}, 0.0, 1.0);
    std::vector<std::size_t> perm(N);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = N; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
    std::vector<double> pp(T * N), gp(T * N);
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t r = 0; r < T; ++r)
      for (std::size_t i = 0; i < N; ++i) {
        pp[r * N + i] = p[r * N + perm[i]];
        gp[r * N + i] = g[r * N + perm[i]];
        const bool a = p[r * N + i] >= 0.5, b = g[r * N + i] >= 0.5;
        tp += a && b;
        fp += a && !b;
        fn += !a && b;
      }
    const double f = f1_au(p, g);
    EXPECT_EQ(f, f1_au(Tensor({T, N}, pp), Tensor({T, N}, gp)));
    const double prec = tp + fp > 0 ? tp / (tp + fp) : 0.0, rec = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    EXPECT_NEAR(f, prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0, 1e-6);
  }
}

// ---------------------------------------------------------------------------
// Frechet distance

TEST(Frechet, Examples) {
  Rng rng(7);
  const auto s = random_stats(rng, 4, 50);
  EXPECT_NEAR(frechet_distance(s, s), 0.0, 1e-8);
  EXPECT_NEAR(frechet_distance(diag_stats({0, 0, 0}, {1, 1, 1}), diag_stats({0, 1, 0}, {1, 1, 1})), 1.0, 1e-8);
  EXPECT_NEAR(frechet_distance(diag_stats({0, 0}, {1, 4}), diag_stats({0, 0}, {1, 1}), 0.0), 1.0, 1e-12);
  EXPECT_NEAR(frechet_distance(diag_stats({0, 0}, {1, 4}), diag_stats({0, 0}, {1, 1})), 1.0, 1e-6);
  EXPECT_THROW(frechet_distance(diag_stats({0}, {1}), diag_stats({0, 0}, {1, 1})), std::invalid_argument);
}

TEST(Frechet, MatchesTwoByTwoClosedForm) {
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const auto a = random_stats(rng, 2, 5 + rng.index(20)), b = random_stats(rng, 2, 5 + rng.index(20));
    EXPECT_NEAR(frechet_distance(a, b, 0.0), frechet_2d_oracle(a, b), 1e-6);
  }
}

TEST(Frechet, NonNegativeAndRotationInvariant) {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    const std::size_t D = 2 + rng.index(5);
    auto a = random_stats(rng, D, 30), b = random_stats(rng, D, 30);
    b.mean.array() += 0.5;
    const double d = frechet_distance(a, b);
    EXPECT_GE(d, 0.0);
    Eigen::MatrixXd g(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(D));
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
    const Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    for (auto* s : {&a, &b}) {
      s->mean = Q * s->mean;
      s->cov = Q * s->cov * Q.transpose();
    }
    EXPECT_NEAR(frechet_distance(a, b), d, 1e-6);
  }
}

TEST(Frechet, RankDeficientStatsStayFinite) {
  // Two samples in 5 dimensions: covariance of rank 1.
  Rng rng(10);
  const auto a = random_stats(rng, 5, 2), b = random_stats(rng, 5, 2);
  const double d = frechet_distance(a, b);
  EXPECT_TRUE(std::isfinite(d));
  EXPECT_GE(d, 0.0);
}

TEST(FeatureStats, MatchesMomentOracleAndMergesExactly) {
  Rng rng(11);
  const Tensor rows = rng.normal_tensor({37, 4});
  const auto s = FeatureStats::from_rows(rows);
  for (std::size_t i = 0; i < 4; ++i) {
    double m = 0;
    for (std::size_t r = 0; r < 37; ++r) m += rows[r * 4 + i];
    m /= 37.0;
    EXPECT_NEAR(s.mean[static_cast<Eigen::Index>(i)], m, 1e-12);
    for (std::size_t j = 0; j < 4; ++j) {
      double mj = 0, c = 0;
      for (std::size_t r = 0; r < 37; ++r) mj += rows[r * 4 + j];
      mj /= 37.0;
      for (std::size_t r = 0; r < 37; ++r) c += (rows[r * 4 + i] - m) * (rows[r * 4 + j] - mj);
      EXPECT_NEAR(s.cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), c / 37.0, 1e-12);
    }
  }
  EXPECT_LT((s.cov - s.cov.transpose()).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_GE(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(s.cov).eigenvalues().minCoeff(), -1e-8);

  FeatureStats merged, streamed(4);
  merged.merge(FeatureStats::from_rows(slice(rows, 0, 0, 10)));
  merged.merge(FeatureStats::from_rows(slice(rows, 0, 10, 27)));
  for (std::size_t r = 0; r < 37; ++r) streamed.add(slice(rows, 0, r, 1).vec());
  EXPECT_EQ(merged.n, 37u);
  EXPECT_EQ(streamed.n, 37u);
  EXPECT_LT((merged.mean - s.mean).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((merged.cov - s.cov).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((streamed.cov - s.cov).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(streamed.add({1.0, 2.0}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// E-FID

TEST(EFid, Examples) {
  Rng rng(12);
  const std::size_t D = 5;
  const ExpressionExtractor identity = [](const Tensor& v) { return reshape(v, {v.dim(0), v.numel() / v.dim(0)}); };
  std::vector<Tensor> gt, shifted;
  const double c = 0.3;
  for (int i = 0; i < 4; ++i) {
    gt.push_back(rng.normal_tensor({20, D, 1, 1}));
    shifted.push_back(add_scalar(gt.back(), c));
  }
  EXPECT_NEAR(e_fid(gt, gt, identity), 0.0, 1e-6);
  EXPECT_NEAR(e_fid(shifted, gt, identity), static_cast<double>(D) * c * c, 1e-6);
  EXPECT_THROW(e_fid({}, gt, identity), std::invalid_argument);
}

TEST(EFid, SyntheticExtractorStatsMatchMomentOracle) {
  const auto clip = synth::make_clip(13);
  const predictors::AUDetector det;
  const ExpressionExtractor ex = [&](const Tensor& v) { return det(v); };
  const auto s = expression_stats({clip.frames}, ex);
  const Tensor rows = det(clip.frames);
  const std::size_t N = rows.dim(0), D = rows.dim(1);
  for (std::size_t i = 0; i < D; ++i) {
    double m = 0, v = 0;
    for (std::size_t r = 0; r < N; ++r) m += rows[r * D + i];
    m /= static_cast<double>(N);
    for (std::size_t r = 0; r < N; ++r) v += std::pow(rows[r * D + i] - m, 2);
    EXPECT_NEAR(s.mean[static_cast<Eigen::Index>(i)], m, 1e-7);
    EXPECT_NEAR(s.cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)), v / static_cast<double>(N), 1e-7);
  }
}

// ---------------------------------------------------------------------------
// Sync confidence

namespace {

/// Frames whose mouth darkness equals `track` and are flat elsewhere.
Tensor frames_from_track(const std::vector<double>& track, std::size_t R = 16) {
  const std::size_t F = track.size();
  const auto box = synth::FaceLayout::kMouthBox;
  std::vector<double> px(F * 3 * R * R, 0.5);
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < R; ++y)
        for (std::size_t x = 0; x < R; ++x) {
          const double cx = (static_cast<double>(x) + 0.5) / static_cast<double>(R);
          const double cy = (static_cast<double>(y) + 0.5) / static_cast<double>(R);
          if (cx >= box[0] && cx < box[2] && cy >= box[1] && cy < box[3])
            px[((f * 3 + c) * R + y) * R + x] = 1.0 - track[f];
        }
  return Tensor({F, 3, R, R}, std::move(px));
}

}  // namespace

TEST(SyncConfidence, PerfectTrackScoresTen) {
  const auto clip = synth::make_clip(14, {16, 4.0});
  const auto env = frame_envelope(clip.audio, 100);
  const Tensor frames = frames_from_track(env);
  EXPECT_NEAR(sync_confidence(frames, clip.audio, predictors::synthetic_sync_scorer()), 10.0, 1e-9);
  EXPECT_THROW(sync_confidence(frames, clip.audio, nullptr), std::invalid_argument);
}

TEST(SyncConfidence, UncorrelatedNoiseScoresLow) {
  const auto clip = synth::make_clip(15, {16, 10.0});
  const auto env = frame_envelope(clip.audio, 250);
  const auto scorer = predictors::synthetic_sync_scorer();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(mix_seed(seed, "noise-track"));
    std::vector<double> noise(env.size());
    for (auto& v : noise) v = rng.uniform(0.0, 1.0);
    EXPECT_LT(sync_confidence(frames_from_track(noise), clip.audio, scorer), 2.0) << "seed " << seed;
  }
}

TEST(SyncConfidence, ZeroLagScoreDecaysWithShift) {
  const auto clip = synth::make_clip(16, {16, 4.0});
  const auto env = frame_envelope(clip.audio, 100);
  const auto zero_lag = predictors::synthetic_sync_scorer(0);
  double prev = sync_confidence(frames_from_track(env), clip.audio, zero_lag);
  for (std::size_t k = 1; k <= 3; ++k) {
    std::vector<double> shifted(env.size());
    for (std::size_t f = 0; f < env.size(); ++f) shifted[f] = env[f >= k ? f - k : 0];
    const double s = sync_confidence(frames_from_track(shifted), clip.audio, zero_lag);
    EXPECT_LT(s, prev) << "shift " << k;
    prev = s;
  }
}

// ---------------------------------------------------------------------------
// Report

TEST(MetricReport, SerializesWithVersionsAndInfinitySentinel) {
  MetricReport r;
  r.set("PSNR", kPsnrIdentical, "psnr-v1");
  r.set("SSIM", 0.75, "ssim-uniform8-v1");
  r.clip_ids = {"a", "b"};
  r.config_hash = "abc";
  const json j = r.to_json();
  EXPECT_EQ(j["metrics"]["PSNR"], "inf");
  EXPECT_DOUBLE_EQ(j["metrics"]["SSIM"].get<double>(), 0.75);
  EXPECT_EQ(j["versions"]["SSIM"], "ssim-uniform8-v1");
  EXPECT_EQ(j["clip_ids"].size(), 2u);
  EXPECT_EQ(j["config_hash"], "abc");
  for (const auto& [k, v] : r.values) EXPECT_TRUE(r.versions.count(k)) << k;
}
