#pragma once

// Small building blocks shared by the A2M VAE and the diffusion networks.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "srm/random.hpp"
#include "srm/tensor.hpp"

namespace srm::nn {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

inline void append(ParamList& out, const ParamList& more) { out.insert(out.end(), more.begin(), more.end()); }

inline Tensor make_param(Shape shape, std::vector<double> values) {
  return Tensor(std::move(shape), std::move(values), /*requires_grad=*/true);
}

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init = false) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(in * out, 0.0);
    if (!zero_init)
      for (auto& v : w) v = rng.uniform(-bound, bound);
    weight = make_param({in, out}, std::move(w));
    bias = make_param({out}, std::vector<double>(out, 0.0));
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  ParamList params(const std::string& prefix) const { return {{prefix + ".weight", weight}, {prefix + ".bias", bias}}; }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t n)
      : gain(make_param({n}, std::vector<double>(n, 1.0))), bias(make_param({n}, std::vector<double>(n, 0.0))) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }

  ParamList params(const std::string& prefix) const { return {{prefix + ".gain", gain}, {prefix + ".bias", bias}}; }
};

/// Multi-head attention. Queries [B, Tq, C]; keys/values come from [B, Tk, C_kv].
struct Attention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  Attention() = default;
  Attention(std::size_t channels, std::size_t kv_channels, std::size_t n_heads, Rng& rng)
      : q(channels, channels, rng),
        k(kv_channels, channels, rng),
        v(kv_channels, channels, rng),
        o(channels, channels, rng),
        heads(n_heads) {
    if (channels % n_heads != 0) throw std::invalid_argument("Attention: channels not divisible by heads");
  }

  Tensor operator()(const Tensor& query, const Tensor& context) const {
    const std::size_t B = query.dim(0), Tq = query.dim(1), C = q.out_features();
    const std::size_t Tk = context.dim(1), d = C / heads;
    if (context.dim(0) != B) throw std::invalid_argument("Attention: batch mismatch");
    auto split = [&](const Tensor& t, std::size_t T) {
      return reshape(permute(reshape(t, {B, T, heads, d}), {0, 2, 1, 3}), {B * heads, T, d});
    };
    Tensor qh = split(q(query), Tq);
    Tensor kh = split(k(context), Tk);
    Tensor vh = split(v(context), Tk);
    Tensor attn = softmax_lastdim(scale(bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(d))));
    Tensor out = reshape(permute(reshape(bmm(attn, vh), {B, heads, Tq, d}), {0, 2, 1, 3}), {B, Tq, C});
    return o(out);
  }

  ParamList params(const std::string& prefix) const {
    ParamList p;
    append(p, q.params(prefix + ".q"));
    append(p, k.params(prefix + ".k"));
    append(p, v.params(prefix + ".v"));
    append(p, o.params(prefix + ".o"));
    return p;
  }
};

/// Sinusoidal embedding of a scalar position (diffusion timestep).
inline std::vector<double> sinusoidal_embedding(double pos, std::size_t dim) {
  std::vector<double> e(dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e[i] = std::sin(pos * freq);
    e[half + i] = std::cos(pos * freq);
  }
  return e;
}

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed parameter list. The list order defines the state layout.
class Adam {
 public:
  Adam(ParamList params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto w = params_[i].tensor.mutable_values();
      auto g = params_[i].tensor.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * g[j];
        v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * g[j] * g[j];
        w[j] -= opts_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opts_.eps);
      }
    }
  }

  void set_lr(double lr) { opts_.lr = lr; }
  long steps() const { return t_; }
  const ParamList& params() const { return params_; }

  /// Moment buffers as tensors named "<prefix>.m.<param>" / "<prefix>.v.<param>".
  ParamList state(const std::string& prefix) const {
    ParamList out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.push_back({prefix + ".m." + params_[i].name, Tensor(params_[i].tensor.shape(), m_[i])});
      out.push_back({prefix + ".v." + params_[i].name, Tensor(params_[i].tensor.shape(), v_[i])});
    }
    return out;
  }

  void load_state(const std::vector<std::vector<double>>& m, const std::vector<std::vector<double>>& v, long t) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw std::invalid_argument("Adam: state layout mismatch");
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i].size() != m_[i].size() || v[i].size() != v_[i].size())
        throw std::invalid_argument("Adam: state size mismatch at " + params_[i].name);
    m_ = m;
    v_ = v;
    t_ = t;
  }

 private:
  ParamList params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

inline std::size_t count_params(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

/// Copies values between identically laid out parameter lists.
inline void copy_values(const ParamList& from, ParamList& to) {
  if (from.size() != to.size()) throw std::invalid_argument("copy_values: parameter count mismatch");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].tensor.shape() != to[i].tensor.shape())
      throw std::invalid_argument("copy_values: shape mismatch at " + from[i].name);
    auto dst = to[i].tensor.mutable_values();
    std::copy(from[i].tensor.values().begin(), from[i].tensor.values().end(), dst.begin());
  }
}

}  // namespace srm::nn
