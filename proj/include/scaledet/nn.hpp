#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "scaledet/graph.hpp"

namespace scaledet {

/// Ordered registry of trainable parameters and non-trainable buffers
/// (running statistics). Registration order is the construction order, which
/// is deterministic for a given configuration, so a seed fully determines
/// initialization and optimizer state.
class ParamStore {
 public:
  Var add(std::string name, Tensor init) {
    Var v = leaf(std::move(init));
    params_.emplace_back(std::move(name), v);
    return v;
  }

  std::shared_ptr<Tensor> add_buffer(std::string name, Tensor init) {
    auto b = std::make_shared<Tensor>(std::move(init));
    buffers_.emplace_back(std::move(name), b);
    return b;
  }

  const std::vector<std::pair<std::string, Var>>& params() const { return params_; }
  const std::vector<std::pair<std::string, std::shared_ptr<Tensor>>>& buffers() const {
    return buffers_;
  }

  void zero_grad() {
    for (auto& [name, p] : params_) {
      p->ensure_grad();
      p->grad.fill(0.0);
    }
  }

  int scalar_count() const {
    int n = 0;
    for (const auto& [name, p] : params_) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Var>> params_;
  std::vector<std::pair<std::string, std::shared_ptr<Tensor>>> buffers_;
};

inline Tensor xavier_uniform(std::vector<int> shape, int fan_in, int fan_out,
                             std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  return Tensor::uniform(std::move(shape), rng, -limit, limit);
}

/// Affine map y = x W + b with W stored [in, out].
struct Linear {
  Var weight, bias;

  Linear() = default;
  Linear(ParamStore& store, const std::string& name, int in, int out, std::mt19937_64& rng) {
    weight = store.add(name + ".weight", xavier_uniform({in, out}, in, out, rng));
    bias = store.add(name + ".bias", Tensor::zeros({out}));
  }

  Var forward(const Var& x) const { return add_rowvec(matmul(x, weight), bias); }
};

/// Two-layer perceptron with ReLU, the detection-head workhorse.
struct Mlp {
  Linear fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore& store, const std::string& name, int in, int hidden, int out,
      std::mt19937_64& rng)
      : fc1(store, name + ".fc1", in, hidden, rng), fc2(store, name + ".fc2", hidden, out, rng) {}

  Var forward(const Var& x) const { return fc2.forward(relu(fc1.forward(x))); }
};

struct LayerNorm {
  Var gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, int dim) {
    gamma = store.add(name + ".gamma", Tensor::full({dim}, 1.0));
    beta = store.add(name + ".beta", Tensor::zeros({dim}));
  }

  Var forward(const Var& x) const { return layer_norm_rows(x, gamma, beta); }
};

/// Batch normalization over the row axis of an [N, C] matrix. Rows are the
/// batch (queries); statistics are per channel. A batch of one row falls back
/// to the running statistics even in training mode.
struct BatchNorm {
  Var gamma, beta;
  std::shared_ptr<Tensor> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm() = default;
  BatchNorm(ParamStore& store, const std::string& name, int dim) {
    gamma = store.add(name + ".gamma", Tensor::full({dim}, 1.0));
    beta = store.add(name + ".beta", Tensor::zeros({dim}));
    running_mean = store.add_buffer(name + ".running_mean", Tensor::zeros({dim}));
    running_var = store.add_buffer(name + ".running_var", Tensor::full({dim}, 1.0));
  }

  Var forward(const Var& x, bool training) const {
    const int n = x->value.dim(0), c = x->value.dim(1);
    if (training && n > 1) {
      Var mean = scale(sum_rows(x), 1.0 / n);                       // [C]
      Var centered = add_rowvec(x, neg(mean));                      // [N, C]
      Var var = scale(sum_rows(mul(centered, centered)), 1.0 / n);  // biased, [C]
      Var inv_std = div(constant(Tensor::full({c}, 1.0)), sqrt_op(add_scalar(var, eps)));
      // Running stats track the unbiased variance.
      for (int j = 0; j < c; ++j) {
        (*running_mean)[j] = (1.0 - momentum) * (*running_mean)[j] + momentum * mean->value[j];
        const double unbiased = var->value[j] * n / (n - 1);
        (*running_var)[j] = (1.0 - momentum) * (*running_var)[j] + momentum * unbiased;
      }
      return add_rowvec(mul_rowvec(mul_rowvec(centered, inv_std), gamma), beta);
    }
    Tensor inv_std({c});
    for (int j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt((*running_var)[j] + eps);
    Var centered = add_rowvec(x, constant([&] {
                                Tensor t({c});
                                for (int j = 0; j < c; ++j) t[j] = -(*running_mean)[j];
                                return t;
                              }()));
    return add_rowvec(mul_rowvec(mul_rowvec(centered, constant(inv_std)), gamma), beta);
  }
};

/// Standard multi-head attention over row-major token matrices.
struct MultiHeadAttention {
  int heads = 1;
  int dim = 0;
  Linear q_proj, k_proj, v_proj, out_proj;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& name, int model_dim, int num_heads,
                     std::mt19937_64& rng)
      : heads(num_heads),
        dim(model_dim),
        q_proj(store, name + ".q", model_dim, model_dim, rng),
        k_proj(store, name + ".k", model_dim, model_dim, rng),
        v_proj(store, name + ".v", model_dim, model_dim, rng),
        out_proj(store, name + ".out", model_dim, model_dim, rng) {
    if (model_dim % num_heads != 0)
      throw std::invalid_argument("MultiHeadAttention: dim not divisible by heads");
  }

  /// q_in/k_in may carry positional terms; v_in is the raw content stream.
  Var forward(const Var& q_in, const Var& k_in, const Var& v_in) const {
    const int d = dim / heads;
    Var q = q_proj.forward(q_in);
    Var k = k_proj.forward(k_in);
    Var v = v_proj.forward(v_in);
    std::vector<Var> outs;
    outs.reserve(heads);
    const double scale_f = 1.0 / std::sqrt(static_cast<double>(d));
    for (int h = 0; h < heads; ++h) {
      Var qh = slice_cols(q, h * d, (h + 1) * d);
      Var kh = slice_cols(k, h * d, (h + 1) * d);
      Var vh = slice_cols(v, h * d, (h + 1) * d);
      Var attn = softmax_rows(scale(matmul(qh, transpose(kh)), scale_f));
      outs.push_back(matmul(attn, vh));
    }
    return out_proj.forward(concat_cols(outs));
  }
};

/// Two-dimensional sinusoidal positional encoding for an H x W grid,
/// flattened row-major to [H*W, C]. Half the channels encode y, half x.
inline Tensor sinusoidal_position_encoding(int h, int w, int channels) {
  if (channels % 4 != 0)
    throw std::invalid_argument("sinusoidal_position_encoding: channels must be divisible by 4");
  Tensor pe({h * w, channels});
  const int quarter = channels / 4;
  const double temperature = 10000.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int row = y * w + x;
      for (int k = 0; k < quarter; ++k) {
        const double freq = std::pow(temperature, 2.0 * k / (channels / 2.0));
        pe.at(row, 2 * k) = std::sin(y / freq);
        pe.at(row, 2 * k + 1) = std::cos(y / freq);
        pe.at(row, channels / 2 + 2 * k) = std::sin(x / freq);
        pe.at(row, channels / 2 + 2 * k + 1) = std::cos(x / freq);
      }
    }
  }
  return pe;
}

/// Adam with decoupled weight decay. Moment buffers are keyed by registry
/// order, so optimizer state is reproducible per seed.
class AdamOptimizer {
 public:
  AdamOptimizer(double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& store) {
    const auto& params = store.params();
    if (m_.size() != params.size()) {
      m_.clear();
      v_.clear();
      for (const auto& [name, p] : params) {
        m_.push_back(Tensor::zeros(p->value.shape()));
        v_.push_back(Tensor::zeros(p->value.shape()));
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Var p = params[i].second;
      p->ensure_grad();
      for (int j = 0; j < p->value.size(); ++j) {
        const double g = p->grad[j];
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        p->value[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * p->value[j]);
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, weight_decay_, beta1_, beta2_, eps_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

}  // namespace scaledet
