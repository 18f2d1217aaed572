#pragma once

// Frozen frame <-> latent codec standing in for the image VAE.
//
// A locally connected linear patch codec: the frame is cut into an 8x8 grid
// of patches, and every grid position owns a mean patch plus an orthonormal
// basis of `channels` principal directions fitted once on training frames.
// Encoding projects, decoding reconstructs; both are linear, so decoding is
// differentiable for auxiliary losses.

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "srm/nn.hpp"
#include "srm/tensor.hpp"

namespace srm {

class FrameCodec {
 public:
  static constexpr std::size_t kGrid = 8;
  static constexpr std::size_t kImageChannels = 3;

  FrameCodec() = default;
  FrameCodec(std::size_t resolution, std::size_t latent_channels) : res_(resolution), channels_(latent_channels) {
    if (resolution % kGrid != 0) throw std::invalid_argument("FrameCodec: resolution must be a multiple of 8");
    patch_ = resolution / kGrid;
    if (channels_ > patch_dim()) throw std::invalid_argument("FrameCodec: more channels than patch entries");
    mean_ = Tensor({kGrid * kGrid, patch_dim()}, 0.0);
    basis_ = Tensor({kGrid * kGrid, patch_dim(), channels_}, 0.0);
    scale_ = Tensor({1}, 1.0);
  }

  std::size_t resolution() const { return res_; }
  std::size_t latent_channels() const { return channels_; }
  std::size_t patch_dim() const { return kImageChannels * patch_ * patch_; }
  bool fitted() const { return fitted_; }

  /// Fits per-position PCA on frames [N, 3, R, R].
  void fit(const Tensor& frames) {
    check_frames(frames);
    const std::size_t N = frames.dim(0), D = patch_dim(), P = kGrid * kGrid;
    std::vector<double> patches = extract_patches(frames);  // [N, P, D]
    auto mean = mean_.mutable_values();
    auto basis = basis_.mutable_values();
    for (std::size_t p = 0; p < P; ++p) {
      Eigen::VectorXd mu = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(D));
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t d = 0; d < D; ++d) mu[d] += patches[(n * P + p) * D + d];
      mu /= static_cast<double>(N);
      Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(D));
      for (std::size_t n = 0; n < N; ++n) {
        Eigen::VectorXd x(static_cast<Eigen::Index>(D));
        for (std::size_t d = 0; d < D; ++d) x[d] = patches[(n * P + p) * D + d] - mu[d];
        cov.noalias() += x * x.transpose();
      }
      cov /= static_cast<double>(N);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
      for (std::size_t d = 0; d < D; ++d) mean[p * D + d] = mu[d];
      for (std::size_t k = 0; k < channels_; ++k) {
        // Eigen sorts ascending; take the largest.
        Eigen::VectorXd u = es.eigenvectors().col(static_cast<Eigen::Index>(D - 1 - k));
        Eigen::Index arg = 0;
        u.cwiseAbs().maxCoeff(&arg);
        if (u[arg] < 0) u = -u;
        for (std::size_t d = 0; d < D; ++d) basis[(p * D + d) * channels_ + k] = u[d];
      }
    }
    scale_.mutable_values()[0] = 1.0;
    fitted_ = true;
    const Tensor z = encode(frames);
    double ms = 0.0;
    for (double v : z.values()) ms += v * v;
    ms /= static_cast<double>(z.numel());
    scale_.mutable_values()[0] = ms > 0.0 ? 1.0 / std::sqrt(ms) : 1.0;
  }

  /// frames [N, 3, R, R] -> latents [N, C, 8, 8]. Not differentiable.
  Tensor encode(const Tensor& frames) const {
    check_frames(frames);
    const std::size_t N = frames.dim(0), D = patch_dim(), P = kGrid * kGrid, C = channels_;
    const std::vector<double> patches = extract_patches(frames);
    const double s = scale_[0];
    std::vector<double> z(N * C * P, 0.0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t d = 0; d < D; ++d) {
          const double x = patches[(n * P + p) * D + d] - mean_[p * D + d];
          for (std::size_t k = 0; k < C; ++k) z[(n * C + k) * P + p] += s * basis_[(p * D + d) * C + k] * x;
        }
    return Tensor({N, C, kGrid, kGrid}, std::move(z));
  }

  /// latents [N, C, 8, 8] -> frames [N, 3, R, R]; differentiable in the latents.
  Tensor decode(const Tensor& latents) const {
    if (latents.rank() != 4 || latents.dim(1) != channels_ || latents.dim(2) != kGrid || latents.dim(3) != kGrid)
      throw std::invalid_argument("FrameCodec::decode: bad latent shape " + shape_str(latents.shape()));
    const std::size_t N = latents.dim(0), P = kGrid * kGrid;
    Tensor zt = reshape(permute(reshape(latents, {N, channels_, P}), {2, 0, 1}), {P, N, channels_});
    Tensor basis_t = permute(basis_, {0, 2, 1});  // [P, C, D]
    Tensor patches = scale(bmm(zt, basis_t), 1.0 / scale_[0]);                   // [P, N, D]
    patches = add_trailing(permute(patches, {1, 0, 2}), mean_);                  // [N, P, D]
    Tensor img = reshape(patches, {N, kGrid, kGrid, kImageChannels, patch_, patch_});
    img = permute(img, {0, 3, 1, 4, 2, 5});
    return reshape(img, {N, kImageChannels, res_, res_});
  }

  nn::ParamList params(const std::string& p = "codec") const {
    return {{p + ".mean", mean_}, {p + ".basis", basis_}, {p + ".scale", scale_}};
  }
  void mark_fitted() { fitted_ = true; }

 private:
  void check_frames(const Tensor& frames) const {
    if (frames.rank() != 4 || frames.dim(1) != kImageChannels || frames.dim(2) != res_ || frames.dim(3) != res_)
      throw std::invalid_argument("FrameCodec: expected [N, 3, " + std::to_string(res_) + ", " + std::to_string(res_) +
                                  "], got " + shape_str(frames.shape()));
  }

  std::vector<double> extract_patches(const Tensor& frames) const {
    const std::size_t N = frames.dim(0), D = patch_dim(), P = kGrid * kGrid;
    std::vector<double> out(N * P * D);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t gy = 0; gy < kGrid; ++gy)
        for (std::size_t gx = 0; gx < kGrid; ++gx) {
          const std::size_t p = gy * kGrid + gx;
          std::size_t d = 0;
          for (std::size_t c = 0; c < kImageChannels; ++c)
            for (std::size_t py = 0; py < patch_; ++py)
              for (std::size_t px = 0; px < patch_; ++px)
                out[(n * P + p) * D + d++] =
                    frames[((n * kImageChannels + c) * res_ + gy * patch_ + py) * res_ + gx * patch_ + px];
        }
    return out;
  }

  std::size_t res_ = 32;
  std::size_t channels_ = 4;
  std::size_t patch_ = 4;
  bool fitted_ = false;
  Tensor mean_, basis_, scale_;
};

}  // namespace srm
