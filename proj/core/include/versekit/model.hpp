#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "versekit/errors.hpp"
#include "versekit/matrix.hpp"
#include "versekit/rng.hpp"

namespace versekit {

inline constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
  int d_model = 512;
  int n_layers = 6;
  int n_heads = 8;
  int ffn_hidden = 0;  // 0 means the default expansion 4 * d_model
  int vocab_size = 0;
  int context_len = 256;
  double dropout = 0.1;
  bool tied_embeddings = false;

  int resolved_ffn() const { return ffn_hidden > 0 ? ffn_hidden : 4 * d_model; }

  void validate() const {
    if (d_model < 2 || d_model % 2 != 0) {
      throw ValidationError("d_model must be positive and even");
    }
    if (n_layers < 1) throw ValidationError("n_layers must be >= 1");
    if (n_heads < 1) throw ValidationError("n_heads must be >= 1");
    if (d_model % n_heads != 0) {
      throw ValidationError("d_model must be divisible by n_heads");
    }
    if (resolved_ffn() < 1) throw ValidationError("ffn_hidden must be >= 1");
    if (vocab_size < 5) {
      throw ValidationError("vocab_size must cover specials plus content");
    }
    if (context_len < 2) throw ValidationError("context_len must be >= 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) {
      throw ValidationError("dropout must be in [0, 1)");
    }
  }
};

template <class S>
struct LayerParams {
  Matrix<S> wq, wk, wv, wo;          // d x d
  Matrix<S> w1, w2;                  // d x ffn, ffn x d
  Matrix<S> b1, b2;                  // 1 x ffn, 1 x d
  Matrix<S> ln1_g, ln1_b;            // 1 x d
  Matrix<S> ln2_g, ln2_b;            // 1 x d
};

template <class S>
struct ModelParams {
  ModelConfig config;
  Matrix<S> embedding;               // vocab x d
  std::vector<LayerParams<S>> layers;
  Matrix<S> w_out;                   // d x vocab; empty when tied
};

// Every trainable tensor by name, in a fixed order shared by the optimizer,
// the checkpoint format and the gradient checker.
template <class S>
std::vector<std::pair<std::string, Matrix<S>*>> tensor_registry(
    ModelParams<S>& p) {
  std::vector<std::pair<std::string, Matrix<S>*>> refs;
  refs.emplace_back("embedding", &p.embedding);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string base = "layers." + std::to_string(l) + ".";
    LayerParams<S>& lp = p.layers[l];
    refs.emplace_back(base + "wq", &lp.wq);
    refs.emplace_back(base + "wk", &lp.wk);
    refs.emplace_back(base + "wv", &lp.wv);
    refs.emplace_back(base + "wo", &lp.wo);
    refs.emplace_back(base + "ln1_g", &lp.ln1_g);
    refs.emplace_back(base + "ln1_b", &lp.ln1_b);
    refs.emplace_back(base + "w1", &lp.w1);
    refs.emplace_back(base + "b1", &lp.b1);
    refs.emplace_back(base + "w2", &lp.w2);
    refs.emplace_back(base + "b2", &lp.b2);
    refs.emplace_back(base + "ln2_g", &lp.ln2_g);
    refs.emplace_back(base + "ln2_b", &lp.ln2_b);
  }
  if (!p.config.tied_embeddings) {
    refs.emplace_back("w_out", &p.w_out);
  }
  return refs;
}

inline std::uint64_t param_count(const ModelConfig& cfg) {
  const std::uint64_t d = static_cast<std::uint64_t>(cfg.d_model);
  const std::uint64_t f = static_cast<std::uint64_t>(cfg.resolved_ffn());
  const std::uint64_t v = static_cast<std::uint64_t>(cfg.vocab_size);
  const std::uint64_t n = static_cast<std::uint64_t>(cfg.n_layers);
  const std::uint64_t per_layer = 4 * d * d + d * f + f + f * d + d + 4 * d;
  std::uint64_t total = v * d + n * per_layer;
  if (!cfg.tied_embeddings) total += d * v;
  return total;
}

struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<int> tokens;  // row-major batch_size x seq_len

  int at(std::size_t b, std::size_t t) const {
    return tokens[b * seq_len + t];
  }
};

namespace detail {

template <class S>
void glorot_init(Matrix<S>& m, std::size_t fan_in, std::size_t fan_out,
                 Rng& rng) {
  const double limit =
      std::sqrt(6.0 / (static_cast<double>(fan_in) + static_cast<double>(fan_out)));
  for (S& v : m.data) {
    v = static_cast<S>(rng.next_uniform(-limit, limit));
  }
}

// pe[t, 2i] = sin(t / 10000^(2i/d)), pe[t, 2i+1] = cos of the same angle.
template <class S>
Matrix<S> positional_encoding(std::size_t t_len, std::size_t d) {
  Matrix<S> pe(t_len, d);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t i = 0; i + 1 < d; i += 2) {
      const double freq =
          std::exp(-std::log(10000.0) * static_cast<double>(i) /
                   static_cast<double>(d));
      const double angle = static_cast<double>(t) * freq;
      pe.at(t, i) = static_cast<S>(std::sin(angle));
      pe.at(t, i + 1) = static_cast<S>(std::cos(angle));
    }
  }
  return pe;
}

}  // namespace detail

template <class S>
ModelParams<S> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t f = static_cast<std::size_t>(cfg.resolved_ffn());
  const std::size_t v = static_cast<std::size_t>(cfg.vocab_size);

  ModelParams<S> p;
  p.config = cfg;
  Rng rng(seed);

  p.embedding.resize(v, d);
  for (S& x : p.embedding.data) {
    x = static_cast<S>(0.02 * rng.next_normal());
  }

  p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (LayerParams<S>& lp : p.layers) {
    lp.wq.resize(d, d);
    lp.wk.resize(d, d);
    lp.wv.resize(d, d);
    lp.wo.resize(d, d);
    detail::glorot_init(lp.wq, d, d, rng);
    detail::glorot_init(lp.wk, d, d, rng);
    detail::glorot_init(lp.wv, d, d, rng);
    detail::glorot_init(lp.wo, d, d, rng);
    lp.w1.resize(d, f);
    detail::glorot_init(lp.w1, d, f, rng);
    lp.b1.resize(1, f);
    lp.w2.resize(f, d);
    detail::glorot_init(lp.w2, f, d, rng);
    lp.b2.resize(1, d);
    lp.ln1_g.resize(1, d);
    lp.ln1_g.fill(S(1));
    lp.ln1_b.resize(1, d);
    lp.ln2_g.resize(1, d);
    lp.ln2_g.fill(S(1));
    lp.ln2_b.resize(1, d);
  }

  if (!cfg.tied_embeddings) {
    p.w_out.resize(d, v);
    detail::glorot_init(p.w_out, d, v, rng);
  }
  return p;
}

// Allocates a gradient accumulator with the same shapes, all zero.
template <class S>
ModelParams<S> zeros_like(const ModelParams<S>& p) {
  ModelParams<S> g;
  g.config = p.config;
  g.embedding.resize(p.embedding.rows, p.embedding.cols);
  g.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const LayerParams<S>& a = p.layers[l];
    LayerParams<S>& b = g.layers[l];
    b.wq.resize(a.wq.rows, a.wq.cols);
    b.wk.resize(a.wk.rows, a.wk.cols);
    b.wv.resize(a.wv.rows, a.wv.cols);
    b.wo.resize(a.wo.rows, a.wo.cols);
    b.w1.resize(a.w1.rows, a.w1.cols);
    b.b1.resize(a.b1.rows, a.b1.cols);
    b.w2.resize(a.w2.rows, a.w2.cols);
    b.b2.resize(a.b2.rows, a.b2.cols);
    b.ln1_g.resize(a.ln1_g.rows, a.ln1_g.cols);
    b.ln1_b.resize(a.ln1_b.rows, a.ln1_b.cols);
    b.ln2_g.resize(a.ln2_g.rows, a.ln2_g.cols);
    b.ln2_b.resize(a.ln2_b.rows, a.ln2_b.cols);
  }
  if (!p.config.tied_embeddings) {
    g.w_out.resize(p.w_out.rows, p.w_out.cols);
  }
  return g;
}

template <class S>
struct LayerCache {
  Matrix<S> x_in;                 // layer input
  Matrix<S> q, k, v;              // projections
  std::vector<Matrix<S>> att;     // per (b, head): T x T attention rows
  Matrix<S> ctx;                  // concatenated head outputs
  Matrix<S> attn_proj;            // ctx @ wo
  std::vector<S> drop1;           // dropout mask (scaled), empty if off
  Matrix<S> res1;                 // x_in + dropped attn
  Matrix<S> ln1_xhat;
  std::vector<S> ln1_rstd;
  Matrix<S> x_mid;                // LN1 output
  Matrix<S> h_act;                // post-ReLU hidden
  Matrix<S> ffn_out;              // h_act @ w2 + b2
  std::vector<S> drop2;
  Matrix<S> res2;
  Matrix<S> ln2_xhat;
  std::vector<S> ln2_rstd;
  Matrix<S> x_out;
};

template <class S>
struct ForwardCache {
  Matrix<S> x0;                   // scaled embedding + positions
  std::vector<LayerCache<S>> layers;
};

namespace detail {

template <class S>
void layer_norm_forward(const Matrix<S>& in, const Matrix<S>& gain,
                        const Matrix<S>& bias, Matrix<S>& out,
                        Matrix<S>& xhat, std::vector<S>& rstd) {
  const std::size_t d = in.cols;
  out.resize(in.rows, d);
  xhat.resize(in.rows, d);
  rstd.assign(in.rows, S(0));
  for (std::size_t r = 0; r < in.rows; ++r) {
    const S* x = in.row(r);
    S mean = S(0);
    for (std::size_t j = 0; j < d; ++j) mean += x[j];
    mean /= static_cast<S>(d);
    S var = S(0);
    for (std::size_t j = 0; j < d; ++j) {
      const S c = x[j] - mean;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S r_std = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    rstd[r] = r_std;
    S* xh = xhat.row(r);
    S* o = out.row(r);
    for (std::size_t j = 0; j < d; ++j) {
      xh[j] = (x[j] - mean) * r_std;
      o[j] = gain.data[j] * xh[j] + bias.data[j];
    }
  }
}

template <class S>
void layer_norm_backward(const Matrix<S>& dy, const Matrix<S>& xhat,
                         const std::vector<S>& rstd, const Matrix<S>& gain,
                         Matrix<S>& dx, Matrix<S>& dgain, Matrix<S>& dbias) {
  const std::size_t d = dy.cols;
  dx.resize(dy.rows, d);
  std::vector<S> dxhat(d);
  for (std::size_t r = 0; r < dy.rows; ++r) {
    const S* dyr = dy.row(r);
    const S* xh = xhat.row(r);
    S m1 = S(0), m2 = S(0);
    for (std::size_t j = 0; j < d; ++j) {
      dxhat[j] = dyr[j] * gain.data[j];
      m1 += dxhat[j];
      m2 += dxhat[j] * xh[j];
      dgain.data[j] += dyr[j] * xh[j];
      dbias.data[j] += dyr[j];
    }
    m1 /= static_cast<S>(d);
    m2 /= static_cast<S>(d);
    S* dxr = dx.row(r);
    for (std::size_t j = 0; j < d; ++j) {
      dxr[j] = rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
    }
  }
}

// Bernoulli keep mask with inverted scaling; identity when p == 0.
template <class S>
void make_dropout_mask(std::vector<S>& mask, std::size_t n, double p,
                       Rng& rng) {
  mask.resize(n);
  const S scale = static_cast<S>(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = rng.next_double() < p ? S(0) : scale;
  }
}

template <class S>
void layer_forward(const LayerParams<S>& lp, const ModelConfig& cfg,
                   std::size_t b_size, std::size_t t_len, const Matrix<S>& x,
                   bool train_mode, Rng* rng, LayerCache<S>& cache) {
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t n_heads = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t dh = d / n_heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  cache.x_in = x;
  matmul(x, lp.wq, cache.q);
  matmul(x, lp.wk, cache.k);
  matmul(x, lp.wv, cache.v);

  cache.att.assign(b_size * n_heads, Matrix<S>());
  cache.ctx.resize(b_size * t_len, d);
  for (std::size_t b = 0; b < b_size; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      Matrix<S>& att = cache.att[b * n_heads + h];
      att.resize(t_len, t_len);
      const std::size_t off = h * dh;
      for (std::size_t t = 0; t < t_len; ++t) {
        const S* qr = cache.q.row(b * t_len + t) + off;
        S max_score = std::numeric_limits<S>::lowest();
        std::vector<S> scores(t + 1);
        for (std::size_t s = 0; s <= t; ++s) {
          const S* kr = cache.k.row(b * t_len + s) + off;
          S dot = S(0);
          for (std::size_t j = 0; j < dh; ++j) dot += qr[j] * kr[j];
          scores[s] = dot * scale;
          if (scores[s] > max_score) max_score = scores[s];
        }
        S denom = S(0);
        for (std::size_t s = 0; s <= t; ++s) {
          scores[s] = std::exp(scores[s] - max_score);
          denom += scores[s];
        }
        S* ar = att.row(t);
        for (std::size_t s = 0; s <= t; ++s) ar[s] = scores[s] / denom;

        S* cr = cache.ctx.row(b * t_len + t) + off;
        for (std::size_t j = 0; j < dh; ++j) cr[j] = S(0);
        for (std::size_t s = 0; s <= t; ++s) {
          const S a = ar[s];
          const S* vr = cache.v.row(b * t_len + s) + off;
          for (std::size_t j = 0; j < dh; ++j) cr[j] += a * vr[j];
        }
      }
    }
  }

  matmul(cache.ctx, lp.wo, cache.attn_proj);

  const bool use_dropout = train_mode && cfg.dropout > 0.0 && rng != nullptr;
  cache.res1.resize(b_size * t_len, d);
  if (use_dropout) {
    make_dropout_mask(cache.drop1, cache.attn_proj.size(), cfg.dropout, *rng);
    for (std::size_t i = 0; i < cache.attn_proj.data.size(); ++i) {
      cache.res1.data[i] =
          cache.x_in.data[i] + cache.attn_proj.data[i] * cache.drop1[i];
    }
  } else {
    cache.drop1.clear();
    for (std::size_t i = 0; i < cache.attn_proj.data.size(); ++i) {
      cache.res1.data[i] = cache.x_in.data[i] + cache.attn_proj.data[i];
    }
  }

  layer_norm_forward(cache.res1, lp.ln1_g, lp.ln1_b, cache.x_mid,
                     cache.ln1_xhat, cache.ln1_rstd);

  Matrix<S> h_pre;
  matmul(cache.x_mid, lp.w1, h_pre);
  cache.h_act.resize(h_pre.rows, h_pre.cols);
  for (std::size_t r = 0; r < h_pre.rows; ++r) {
    S* hp = h_pre.row(r);
    S* ha = cache.h_act.row(r);
    for (std::size_t j = 0; j < h_pre.cols; ++j) {
      const S z = hp[j] + lp.b1.data[j];
      ha[j] = z > S(0) ? z : S(0);
    }
  }
  matmul(cache.h_act, lp.w2, cache.ffn_out);
  for (std::size_t r = 0; r < cache.ffn_out.rows; ++r) {
    S* fr = cache.ffn_out.row(r);
    for (std::size_t j = 0; j < cache.ffn_out.cols; ++j) {
      fr[j] += lp.b2.data[j];
    }
  }

  cache.res2.resize(b_size * t_len, d);
  if (use_dropout) {
    make_dropout_mask(cache.drop2, cache.ffn_out.size(), cfg.dropout, *rng);
    for (std::size_t i = 0; i < cache.ffn_out.data.size(); ++i) {
      cache.res2.data[i] =
          cache.x_mid.data[i] + cache.ffn_out.data[i] * cache.drop2[i];
    }
  } else {
    cache.drop2.clear();
    for (std::size_t i = 0; i < cache.ffn_out.data.size(); ++i) {
      cache.res2.data[i] = cache.x_mid.data[i] + cache.ffn_out.data[i];
    }
  }

  layer_norm_forward(cache.res2, lp.ln2_g, lp.ln2_b, cache.x_out,
                     cache.ln2_xhat, cache.ln2_rstd);
}

template <class S>
void layer_backward(const LayerParams<S>& lp, const ModelConfig& cfg,
                    std::size_t b_size, std::size_t t_len,
                    const LayerCache<S>& cache, const Matrix<S>& dout,
                    LayerParams<S>& grad, Matrix<S>& dx_in) {
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t n_heads = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t dh = d / n_heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  Matrix<S> dres2;
  layer_norm_backward(dout, cache.ln2_xhat, cache.ln2_rstd, lp.ln2_g, dres2,
                      grad.ln2_g, grad.ln2_b);

  // res2 = x_mid + dropout(ffn_out)
  Matrix<S> dffn(dres2.rows, dres2.cols);
  if (!cache.drop2.empty()) {
    for (std::size_t i = 0; i < dres2.data.size(); ++i) {
      dffn.data[i] = dres2.data[i] * cache.drop2[i];
    }
  } else {
    dffn.data = dres2.data;
  }
  Matrix<S> dx_mid = dres2;  // skip-connection path

  // ffn_out = relu(x_mid @ w1 + b1) @ w2 + b2
  for (std::size_t r = 0; r < dffn.rows; ++r) {
    const S* fr = dffn.row(r);
    for (std::size_t j = 0; j < dffn.cols; ++j) {
      grad.b2.data[j] += fr[j];
    }
  }
  matmul_tn_acc(cache.h_act, dffn, grad.w2);
  Matrix<S> dh_act;
  matmul_nt(dffn, lp.w2, dh_act);
  for (std::size_t i = 0; i < dh_act.data.size(); ++i) {
    if (cache.h_act.data[i] <= S(0)) dh_act.data[i] = S(0);
  }
  for (std::size_t r = 0; r < dh_act.rows; ++r) {
    const S* hr = dh_act.row(r);
    for (std::size_t j = 0; j < dh_act.cols; ++j) {
      grad.b1.data[j] += hr[j];
    }
  }
  matmul_tn_acc(cache.x_mid, dh_act, grad.w1);
  Matrix<S> dx_mid_ffn;
  matmul_nt(dh_act, lp.w1, dx_mid_ffn);
  add_inplace(dx_mid, dx_mid_ffn);

  Matrix<S> dres1;
  layer_norm_backward(dx_mid, cache.ln1_xhat, cache.ln1_rstd, lp.ln1_g, dres1,
                      grad.ln1_g, grad.ln1_b);

  // res1 = x_in + dropout(ctx @ wo)
  Matrix<S> dattn_proj(dres1.rows, dres1.cols);
  if (!cache.drop1.empty()) {
    for (std::size_t i = 0; i < dres1.data.size(); ++i) {
      dattn_proj.data[i] = dres1.data[i] * cache.drop1[i];
    }
  } else {
    dattn_proj.data = dres1.data;
  }
  dx_in = dres1;  // skip-connection path

  matmul_tn_acc(cache.ctx, dattn_proj, grad.wo);
  Matrix<S> dctx;
  matmul_nt(dattn_proj, lp.wo, dctx);

  Matrix<S> dq(b_size * t_len, d), dk(b_size * t_len, d), dv(b_size * t_len, d);
  std::vector<S> datt_row;
  for (std::size_t b = 0; b < b_size; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const Matrix<S>& att = cache.att[b * n_heads + h];
      const std::size_t off = h * dh;
      for (std::size_t t = 0; t < t_len; ++t) {
        const S* dcr = dctx.row(b * t_len + t) + off;
        const S* ar = att.row(t);
        datt_row.assign(t + 1, S(0));
        // dV and datt from ctx_t = sum_s att[t,s] * v_s
        for (std::size_t s = 0; s <= t; ++s) {
          const S* vr = cache.v.row(b * t_len + s) + off;
          S acc = S(0);
          for (std::size_t j = 0; j < dh; ++j) acc += dcr[j] * vr[j];
          datt_row[s] = acc;
          S* dvr = dv.row(b * t_len + s) + off;
          const S a = ar[s];
          for (std::size_t j = 0; j < dh; ++j) dvr[j] += a * dcr[j];
        }
        // softmax backward on the causal row
        S rowdot = S(0);
        for (std::size_t s = 0; s <= t; ++s) rowdot += datt_row[s] * ar[s];
        const S* qr = cache.q.row(b * t_len + t) + off;
        S* dqr = dq.row(b * t_len + t) + off;
        for (std::size_t s = 0; s <= t; ++s) {
          const S dscore = ar[s] * (datt_row[s] - rowdot) * scale;
          const S* kr = cache.k.row(b * t_len + s) + off;
          S* dkr = dk.row(b * t_len + s) + off;
          for (std::size_t j = 0; j < dh; ++j) {
            dqr[j] += dscore * kr[j];
            dkr[j] += dscore * qr[j];
          }
        }
      }
    }
  }

  matmul_tn_acc(cache.x_in, dq, grad.wq);
  matmul_tn_acc(cache.x_in, dk, grad.wk);
  matmul_tn_acc(cache.x_in, dv, grad.wv);
  Matrix<S> tmp;
  matmul_nt(dq, lp.wq, tmp);
  add_inplace(dx_in, tmp);
  matmul_nt(dk, lp.wk, tmp);
  add_inplace(dx_in, tmp);
  matmul_nt(dv, lp.wv, tmp);
  add_inplace(dx_in, tmp);
}

template <class S>
void validate_batch(const ModelParams<S>& p, const Batch& batch) {
  if (batch.batch_size == 0 || batch.seq_len == 0) {
    throw ValidationError("empty batch");
  }
  if (batch.seq_len > static_cast<std::size_t>(p.config.context_len)) {
    throw ValidationError("sequence length exceeds context_len");
  }
  if (batch.tokens.size() != batch.batch_size * batch.seq_len) {
    throw ValidationError("batch token buffer has wrong size");
  }
  for (int id : batch.tokens) {
    if (id < 0 || id >= p.config.vocab_size) {
      throw ValidationError("token id out of range: " + std::to_string(id));
    }
  }
}

}  // namespace detail

// Logits for every position, shape (batch*seq_len) x vocab. When cache is
// given, intermediates are kept for the backward pass.
template <class S>
Matrix<S> forward(const ModelParams<S>& p, const Batch& batch, bool train_mode,
                  Rng* rng = nullptr, ForwardCache<S>* cache = nullptr) {
  detail::validate_batch(p, batch);
  const std::size_t d = static_cast<std::size_t>(p.config.d_model);
  const std::size_t b_size = batch.batch_size;
  const std::size_t t_len = batch.seq_len;

  const Matrix<S> pe = detail::positional_encoding<S>(t_len, d);
  const S embed_scale = static_cast<S>(std::sqrt(static_cast<double>(d)));

  Matrix<S> x(b_size * t_len, d);
  for (std::size_t b = 0; b < b_size; ++b) {
    for (std::size_t t = 0; t < t_len; ++t) {
      const S* erow = p.embedding.row(static_cast<std::size_t>(batch.at(b, t)));
      const S* perow = pe.row(t);
      S* xr = x.row(b * t_len + t);
      for (std::size_t j = 0; j < d; ++j) {
        xr[j] = embed_scale * erow[j] + perow[j];
      }
    }
  }

  ForwardCache<S> local;
  ForwardCache<S>* fc = cache != nullptr ? cache : &local;
  fc->x0 = x;
  fc->layers.assign(static_cast<std::size_t>(p.config.n_layers),
                    LayerCache<S>());

  const Matrix<S>* cur = &fc->x0;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    detail::layer_forward(p.layers[l], p.config, b_size, t_len, *cur,
                          train_mode, rng, fc->layers[l]);
    cur = &fc->layers[l].x_out;
  }

  Matrix<S> logits;
  if (p.config.tied_embeddings) {
    matmul_nt(*cur, p.embedding, logits);
  } else {
    matmul(*cur, p.w_out, logits);
  }
  return logits;
}

struct LossStats {
  double loss = 0.0;
  std::size_t positions = 0;  // non-PAD target positions in the mean
};

// Cross-entropy against q = (1-eps) * one-hot + eps/|V|, pooled over target
// positions whose target is not PAD. pad_id < 0 disables target masking.
template <class S>
LossStats loss_from_logits(const Matrix<S>& logits, const Batch& batch,
                           double smoothing, int pad_id,
                           Matrix<S>* dlogits = nullptr) {
  const std::size_t v = logits.cols;
  const std::size_t b_size = batch.batch_size;
  const std::size_t t_len = batch.seq_len;

  std::vector<std::size_t> rows;
  rows.reserve(b_size * (t_len - 1));
  for (std::size_t b = 0; b < b_size; ++b) {
    for (std::size_t t = 0; t + 1 < t_len; ++t) {
      const int target = batch.at(b, t + 1);
      if (pad_id >= 0 && target == pad_id) continue;
      rows.push_back(b * t_len + t);
    }
  }
  if (rows.empty()) {
    throw ValidationError("batch has no scorable positions");
  }
  if (dlogits != nullptr) {
    dlogits->resize(logits.rows, v);
  }

  const double eps_unif = smoothing / static_cast<double>(v);
  double total = 0.0;
  for (const std::size_t r : rows) {
    const std::size_t b = r / t_len;
    const std::size_t t = r % t_len;
    const int target = batch.at(b, t + 1);
    const S* u = logits.row(r);

    double max_u = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) {
      max_u = std::max(max_u, static_cast<double>(u[j]));
    }
    double denom = 0.0, sum_u = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      denom += std::exp(static_cast<double>(u[j]) - max_u);
      sum_u += static_cast<double>(u[j]);
    }
    const double lse = max_u + std::log(denom);
    const double row_loss =
        lse - (1.0 - smoothing) * static_cast<double>(u[target]) -
        eps_unif * sum_u;
    total += row_loss;

    if (dlogits != nullptr) {
      S* g = dlogits->row(r);
      const double inv_m = 1.0;  // scaled by 1/M afterwards
      for (std::size_t j = 0; j < v; ++j) {
        const double p_j = std::exp(static_cast<double>(u[j]) - lse);
        g[j] = static_cast<S>((p_j - eps_unif) * inv_m);
      }
      g[target] -= static_cast<S>(1.0 - smoothing);
    }
  }

  const double m = static_cast<double>(rows.size());
  if (dlogits != nullptr) {
    const S inv = static_cast<S>(1.0 / m);
    for (S& g : dlogits->data) g *= inv;
  }
  LossStats out;
  out.loss = total / m;
  out.positions = rows.size();
  return out;
}

// Full forward + hand-derived backward. Gradients land in `grads` (zeroed
// first). Returns the pooled loss.
template <class S>
LossStats loss_and_grads(const ModelParams<S>& p, const Batch& batch,
                         double smoothing, int pad_id, ModelParams<S>& grads,
                         bool train_mode = false, Rng* rng = nullptr) {
  ForwardCache<S> cache;
  const Matrix<S> logits = forward(p, batch, train_mode, rng, &cache);

  auto refs = tensor_registry(grads);
  for (auto& [name, tensor] : refs) tensor->fill(S(0));

  Matrix<S> dlogits;
  const LossStats stats =
      loss_from_logits(logits, batch, smoothing, pad_id, &dlogits);

  const std::size_t d = static_cast<std::size_t>(p.config.d_model);
  const std::size_t b_size = batch.batch_size;
  const std::size_t t_len = batch.seq_len;
  const Matrix<S>& x_final =
      p.layers.empty() ? cache.x0 : cache.layers.back().x_out;

  Matrix<S> dx;
  if (p.config.tied_embeddings) {
    // logits = x @ E^T: dx = dlogits @ E, dE += dlogits^T @ x
    matmul(dlogits, p.embedding, dx);
    matmul_tn_acc(dlogits, x_final, grads.embedding);
  } else {
    matmul_nt(dlogits, p.w_out, dx);
    matmul_tn_acc(x_final, dlogits, grads.w_out);
  }

  for (std::size_t l = p.layers.size(); l > 0; --l) {
    Matrix<S> dx_in;
    detail::layer_backward(p.layers[l - 1], p.config, b_size, t_len,
                           cache.layers[l - 1], dx, grads.layers[l - 1],
                           dx_in);
    dx = std::move(dx_in);
  }

  const S embed_scale = static_cast<S>(std::sqrt(static_cast<double>(d)));
  for (std::size_t b = 0; b < b_size; ++b) {
    for (std::size_t t = 0; t < t_len; ++t) {
      const std::size_t id = static_cast<std::size_t>(batch.at(b, t));
      const S* dxr = dx.row(b * t_len + t);
      S* ger = grads.embedding.row(id);
      for (std::size_t j = 0; j < d; ++j) {
        ger[j] += embed_scale * dxr[j];
      }
    }
  }
  return stats;
}

// Loss with dropout off, no gradients.
template <class S>
LossStats compute_loss(const ModelParams<S>& p, const Batch& batch,
                       double smoothing, int pad_id) {
  const Matrix<S> logits = forward<S>(p, batch, false, nullptr, nullptr);
  return loss_from_logits<S>(logits, batch, smoothing, pad_id, nullptr);
}

struct GradCheckEntry {
  std::string tensor;
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  bool passed = false;
};

// Central finite differences (h = 1e-5) on a random subsample of at least 20
// coordinates per tensor, against caller-supplied analytic gradients.
inline GradCheckReport gradient_check_against(ModelParams<double>& params,
                                              const Batch& batch,
                                              double smoothing, int pad_id,
                                              double tolerance,
                                              std::uint64_t seed,
                                              ModelParams<double>& analytic) {
  const double h = 1e-5;
  Rng rng(seed);
  GradCheckReport report;
  report.tolerance = tolerance;
  report.passed = true;

  auto p_refs = tensor_registry(params);
  auto g_refs = tensor_registry(analytic);
  for (std::size_t ti = 0; ti < p_refs.size(); ++ti) {
    Matrix<double>* tensor = p_refs[ti].second;
    Matrix<double>* grad = g_refs[ti].second;
    const std::size_t n = tensor->size();

    std::vector<std::size_t> coords;
    if (n <= 20) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      // Distinct draws via partial Fisher-Yates over an index vector.
      std::vector<std::size_t> idx(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = i;
      for (std::size_t i = 0; i < 20; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(
                                      rng.next_below(n - i));
        std::swap(idx[i], idx[j]);
        coords.push_back(idx[i]);
      }
    }

    GradCheckEntry entry;
    entry.tensor = p_refs[ti].first;
    entry.coords_checked = coords.size();
    for (const std::size_t c : coords) {
      const double saved = tensor->data[c];
      tensor->data[c] = saved + h;
      const double up = compute_loss(params, batch, smoothing, pad_id).loss;
      tensor->data[c] = saved - h;
      const double down = compute_loss(params, batch, smoothing, pad_id).loss;
      tensor->data[c] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw RunError("non-finite loss during gradient check at " +
                       entry.tensor);
      }
      const double numeric = (up - down) / (2.0 * h);
      const double a = grad->data[c];
      const double rel =
          std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric),
                                           1e-12);
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    if (entry.max_rel_err >= tolerance) report.passed = false;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

inline GradCheckReport gradient_check(ModelParams<double>& params,
                                      const Batch& batch, double smoothing,
                                      int pad_id, double tolerance,
                                      std::uint64_t seed) {
  ModelParams<double> grads = zeros_like(params);
  const LossStats stats =
      loss_and_grads(params, batch, smoothing, pad_id, grads);
  if (!std::isfinite(stats.loss)) {
    throw RunError("non-finite loss during gradient check");
  }
  return gradient_check_against(params, batch, smoothing, pad_id, tolerance,
                                seed, grads);
}

}  // namespace versekit
