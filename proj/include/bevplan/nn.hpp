// Parameter containers, initialization, and the Adam optimizer.
//
// Weights start uniform in +/- sqrt(6 / (fan_in + fan_out)), biases at zero.
// Adam clips the global gradient norm before every update and applies
// decoupled weight decay.

#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bevplan/autodiff.hpp"
#include "bevplan/conv.hpp"
#include "bevplan/rng.hpp"

namespace bevplan {

template <typename S>
struct NamedParam {
  std::string name;
  Var<S> var;
};

template <typename S>
using ParamList = std::vector<NamedParam<S>>;

template <typename S>
Tensor<S> glorot_uniform(Rng& rng, Shape shape, int fan_in, int fan_out) {
  Tensor<S> t(std::move(shape));
  S bound = static_cast<S>(std::sqrt(6.0 / (fan_in + fan_out)));
  rng.fill_uniform(t, -bound, bound);
  return t;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename S>
struct Linear {
  Var<S> weight;  // (in, out)
  Var<S> bias;    // (out)

  Linear() = default;
  Linear(Rng& rng, int in, int out)
      : weight(glorot_uniform<S>(rng, {in, out}, in, out), true),
        bias(Tensor<S>({out}), true) {}

  Var<S> operator()(const Var<S>& x) const { return add_rowvec(matmul(x, weight), bias); }

  void params(ParamList<S>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename S>
struct Conv2d {
  Var<S> weight;  // (F, C, kh, kw)
  Var<S> bias;    // (F)
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(Rng& rng, int in_ch, int out_ch, int kernel, int stride_, int pad_)
      : weight(glorot_uniform<S>(rng, {out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel,
                                 out_ch * kernel * kernel),
               true),
        bias(Tensor<S>({out_ch}), true),
        stride(stride_),
        pad(pad_) {}

  Var<S> operator()(const Var<S>& x) const { return conv2d(x, weight, bias, stride, pad); }

  void params(ParamList<S>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename S>
struct ConvTranspose2d {
  Var<S> weight;  // (C, F, kh, kw)
  Var<S> bias;    // (F)
  int stride = 1;
  int pad = 0;

  ConvTranspose2d() = default;
  ConvTranspose2d(Rng& rng, int in_ch, int out_ch, int kernel, int stride_, int pad_)
      : weight(glorot_uniform<S>(rng, {in_ch, out_ch, kernel, kernel}, in_ch * kernel * kernel,
                                 out_ch * kernel * kernel),
               true),
        bias(Tensor<S>({out_ch}), true),
        stride(stride_),
        pad(pad_) {}

  Var<S> operator()(const Var<S>& x) const {
    return conv2d_transpose(x, weight, bias, stride, pad);
  }

  void params(ParamList<S>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename S>
struct LayerNorm {
  Var<S> gamma;
  Var<S> beta;

  LayerNorm() = default;
  explicit LayerNorm(int dim) : gamma(Tensor<S>::full({dim}, S(1)), true),
                                beta(Tensor<S>({dim}), true) {}

  Var<S> operator()(const Var<S>& x) const { return layer_norm(x, gamma, beta); }

  void params(ParamList<S>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

template <typename S>
struct EmbeddingTable {
  Var<S> table;  // (V, E)

  EmbeddingTable() = default;
  EmbeddingTable(Rng& rng, int vocab, int dim)
      : table(glorot_uniform<S>(rng, {vocab, dim}, vocab, dim), true) {}

  Var<S> operator()(const std::vector<int>& ids) const { return embedding(table, ids); }

  void params(ParamList<S>& out, const std::string& prefix) const {
    out.push_back({prefix + ".table", table});
  }
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <typename S>
struct AdamConfig {
  S lr = S(1e-3);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  S weight_decay = S(0);
  S clip_norm = S(1);  // global gradient-norm cap applied before every step
};

template <typename S>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Var<S>> params, AdamConfig<S> cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      if (!p.requires_grad())
        throw AutodiffError("Adam: parameter without gradient storage");
      m_.emplace_back(p.value().shape());
      v_.emplace_back(p.value().shape());
    }
  }

  static Adam from_named(const ParamList<S>& named, AdamConfig<S> cfg) {
    std::vector<Var<S>> vs;
    vs.reserve(named.size());
    for (const auto& np : named) vs.push_back(np.var);
    return Adam(std::move(vs), cfg);
  }

  int64_t step_count() const { return step_; }
  const AdamConfig<S>& config() const { return cfg_; }
  void set_lr(S lr) { cfg_.lr = lr; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // Returns the pre-clip global gradient norm.
  S step() {
    double sq = 0;
    for (const auto& p : params_) {
      const auto& g = p.grad();
      for (int64_t i = 0; i < g.size(); ++i) sq += static_cast<double>(g[i]) * g[i];
    }
    S gnorm = static_cast<S>(std::sqrt(sq));
    S scale_g = S(1);
    if (cfg_.clip_norm > S(0) && gnorm > cfg_.clip_norm) scale_g = cfg_.clip_norm / gnorm;

    ++step_;
    S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(cfg_.beta1), step_));
    S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(cfg_.beta2), step_));
    for (size_t k = 0; k < params_.size(); ++k) {
      Tensor<S>& w = params_[k].value_mut();
      const Tensor<S>& g = params_[k].grad();
      Tensor<S>& m = m_[k];
      Tensor<S>& v = v_[k];
      for (int64_t i = 0; i < w.size(); ++i) {
        S gi = g[i] * scale_g;
        m[i] = cfg_.beta1 * m[i] + (S(1) - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (S(1) - cfg_.beta2) * gi * gi;
        S mhat = m[i] / bc1;
        S vhat = v[i] / bc2;
        if (cfg_.weight_decay > S(0)) w[i] -= cfg_.lr * cfg_.weight_decay * w[i];
        w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
    return gnorm;
  }

 private:
  std::vector<Var<S>> params_;
  std::vector<Tensor<S>> m_, v_;
  int64_t step_ = 0;
  AdamConfig<S> cfg_;
};

// ---------------------------------------------------------------------------
// Parameter bookkeeping
// ---------------------------------------------------------------------------

// FNV-1a over the raw little-endian bytes of every tensor in order.
template <typename S>
uint64_t params_checksum(const ParamList<S>& params) {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const unsigned char* p, size_t n) {
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& np : params) {
    const auto& t = np.var.value();
    mix(reinterpret_cast<const unsigned char*>(t.data()), sizeof(S) * t.size());
  }
  return h;
}

inline uint64_t bytes_checksum(const void* data, size_t n) {
  uint64_t h = 0xcbf29ce484222325ULL;
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace bevplan
