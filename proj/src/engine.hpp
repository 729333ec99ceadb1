#pragma once

// Dense forward/backward for the decoder stack, templated on the scalar so the
// same code serves f32 inference and training and the f64 gradient check.
// Internal to the library; the public surface is model.hpp / trainer.hpp.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tars/errors.hpp"
#include "tars/model.hpp"

namespace tars::engine {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Row = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using Col = Eigen::Matrix<T, Eigen::Dynamic, 1>;

inline constexpr double kNormEps = 1e-5;

template <typename T>
struct LayerParams {
  Row<T> norm_attn;
  Mat<T> q, k, v, o;
  Row<T> norm_ffn;
  Mat<T> gate, up, down;
};

template <typename T>
struct Params {
  ModelConfig config;
  Mat<T> embed, pos;
  std::vector<LayerParams<T>> layers;
  Row<T> norm_final;
  Mat<T> head;
  Row<T> head_bias;  // empty when the config has no head bias
};

// Calls fn(name, pointer, element_count) for every tensor in canonical order.
template <typename P, typename Fn>
void visit(P& p, Fn&& fn) {
  fn(std::string("embed.tokens"), p.embed.data(), static_cast<std::size_t>(p.embed.size()));
  fn(std::string("embed.positions"), p.pos.data(), static_cast<std::size_t>(p.pos.size()));
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    fn(pre + "norm.attn", l.norm_attn.data(), static_cast<std::size_t>(l.norm_attn.size()));
    fn(pre + "attn.q", l.q.data(), static_cast<std::size_t>(l.q.size()));
    fn(pre + "attn.k", l.k.data(), static_cast<std::size_t>(l.k.size()));
    fn(pre + "attn.v", l.v.data(), static_cast<std::size_t>(l.v.size()));
    fn(pre + "attn.o", l.o.data(), static_cast<std::size_t>(l.o.size()));
    fn(pre + "norm.ffn", l.norm_ffn.data(), static_cast<std::size_t>(l.norm_ffn.size()));
    fn(pre + "ffn.gate", l.gate.data(), static_cast<std::size_t>(l.gate.size()));
    fn(pre + "ffn.up", l.up.data(), static_cast<std::size_t>(l.up.size()));
    fn(pre + "ffn.down", l.down.data(), static_cast<std::size_t>(l.down.size()));
  }
  fn(std::string("norm.final"), p.norm_final.data(),
     static_cast<std::size_t>(p.norm_final.size()));
  fn(std::string("head.weight"), p.head.data(), static_cast<std::size_t>(p.head.size()));
  if (p.head_bias.size() > 0) {
    fn(std::string("head.bias"), p.head_bias.data(), static_cast<std::size_t>(p.head_bias.size()));
  }
}

template <typename T>
Params<T> zeros_like(const ModelConfig& c) {
  Params<T> p;
  p.config = c;
  const int d = c.d_model;
  p.embed = Mat<T>::Zero(c.vocab_size, d);
  p.pos = Mat<T>::Zero(c.max_seq_len, d);
  p.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& l : p.layers) {
    l.norm_attn = Row<T>::Zero(d);
    l.q = Mat<T>::Zero(d, d);
    l.k = Mat<T>::Zero(d, d);
    l.v = Mat<T>::Zero(d, d);
    l.o = Mat<T>::Zero(d, d);
    l.norm_ffn = Row<T>::Zero(d);
    l.gate = Mat<T>::Zero(c.d_ff, d);
    l.up = Mat<T>::Zero(c.d_ff, d);
    l.down = Mat<T>::Zero(d, c.d_ff);
  }
  p.norm_final = Row<T>::Zero(d);
  p.head = Mat<T>::Zero(c.vocab_size, d);
  if (c.lm_head_bias) p.head_bias = Row<T>::Zero(c.vocab_size);
  return p;
}

template <typename T>
Params<T> from_weights(const ModelWeights& w) {
  Params<T> p = zeros_like<T>(w.config);
  const auto src = tensors(w);
  std::size_t idx = 0;
  visit(p, [&](const std::string& name, T* data, std::size_t n) {
    const auto& t = src.at(idx++);
    if (t.name != name || t.data.size() != n) {
      throw DimensionError("engine: tensor layout mismatch at " + name);
    }
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<T>(t.data[i]);
  });
  return p;
}

inline void store(const Params<float>& p, ModelWeights& w) {
  auto dst = tensors(w);
  std::size_t idx = 0;
  visit(const_cast<Params<float>&>(p), [&](const std::string&, float* data, std::size_t n) {
    auto& t = dst.at(idx++);
    std::copy(data, data + n, t.data.begin());
  });
}

template <typename T>
T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

template <typename T>
T silu(T z) {
  return z * sigmoid(z);
}

template <typename T>
T silu_grad(T z) {
  const T s = sigmoid(z);
  return s * (T(1) + z * (T(1) - s));
}

// y = x * inv_rms(x) * g, row-wise.
template <typename T>
void rms_norm(const Mat<T>& x, const Row<T>& g, Mat<T>& y, Col<T>& inv) {
  const auto d = static_cast<T>(x.cols());
  inv = ((x.array().square().rowwise().sum() / d) + T(kNormEps)).rsqrt();
  y = (x.array().colwise() * inv.array()).rowwise() * g.array();
}

// Accumulates dg and returns dx for the row-wise RMS norm.
template <typename T>
Mat<T> rms_norm_backward(const Mat<T>& x, const Col<T>& inv, const Row<T>& g, const Mat<T>& dy,
                         Row<T>& dg) {
  const auto d = static_cast<T>(x.cols());
  dg += (dy.array() * (x.array().colwise() * inv.array())).colwise().sum().matrix();
  const Mat<T> dyg = dy.array().rowwise() * g.array();
  const Col<T> proj = (dyg.array() * x.array()).rowwise().sum();
  const Col<T> coef = proj.array() * inv.array().cube() / d;
  Mat<T> dx = (dyg.array().colwise() * inv.array()) - (x.array().colwise() * coef.array());
  return dx;
}

template <typename T>
struct LayerCache {
  Mat<T> x_in, a, q, k, v, ctx, x_mid, b, gpre, upre, act;
  Col<T> inv_a, inv_b;
  std::vector<Mat<T>> att;  // per head, seq x seq, zero above the diagonal
};

template <typename T>
struct Cache {
  std::vector<LayerCache<T>> layers;
  Mat<T> x_final, hidden, logits;
  Col<T> inv_final;
};

// Runs the stack on `tokens`, filling `cache`. When `wide_head` is set the LM
// head product is accumulated in f64 so logits agree with lm_head_probe.
template <typename T>
void forward(const Params<T>& p, std::span<const TokenId> tokens, Cache<T>& cache,
             bool wide_head = false) {
  const auto& c = p.config;
  const int n = static_cast<int>(tokens.size());
  const int d = c.d_model;
  const int hd = c.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  Mat<T> x(n, d);
  for (int i = 0; i < n; ++i) x.row(i) = p.embed.row(tokens[i]) + p.pos.row(i);

  cache.layers.resize(p.layers.size());
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& L = p.layers[li];
    auto& lc = cache.layers[li];
    lc.x_in = x;
    rms_norm(lc.x_in, L.norm_attn, lc.a, lc.inv_a);
    lc.q.noalias() = lc.a * L.q.transpose();
    lc.k.noalias() = lc.a * L.k.transpose();
    lc.v.noalias() = lc.a * L.v.transpose();
    lc.ctx.setZero(n, d);
    lc.att.resize(static_cast<std::size_t>(c.n_heads));
    for (int h = 0; h < c.n_heads; ++h) {
      auto qh = lc.q.middleCols(h * hd, hd);
      auto kh = lc.k.middleCols(h * hd, hd);
      auto vh = lc.v.middleCols(h * hd, hd);
      Mat<T>& att = lc.att[static_cast<std::size_t>(h)];
      att.noalias() = (qh * kh.transpose()) * scale;
      for (int i = 0; i < n; ++i) {
        const T m = att.row(i).head(i + 1).maxCoeff();
        T sum = 0;
        for (int j = 0; j <= i; ++j) {
          att(i, j) = std::exp(att(i, j) - m);
          sum += att(i, j);
        }
        for (int j = 0; j <= i; ++j) att(i, j) /= sum;
        for (int j = i + 1; j < n; ++j) att(i, j) = 0;
      }
      lc.ctx.middleCols(h * hd, hd).noalias() = att * vh;
    }
    lc.x_mid = lc.x_in;
    lc.x_mid.noalias() += lc.ctx * L.o.transpose();
    rms_norm(lc.x_mid, L.norm_ffn, lc.b, lc.inv_b);
    lc.gpre.noalias() = lc.b * L.gate.transpose();
    lc.upre.noalias() = lc.b * L.up.transpose();
    lc.act = lc.gpre.unaryExpr([](T z) { return silu(z); }).cwiseProduct(lc.upre);
    x = lc.x_mid;
    x.noalias() += lc.act * L.down.transpose();
  }

  cache.x_final = x;
  rms_norm(cache.x_final, p.norm_final, cache.hidden, cache.inv_final);
  if (wide_head) {
    cache.logits = (cache.hidden.template cast<double>() *
                    p.head.template cast<double>().transpose())
                       .template cast<T>();
  } else {
    cache.logits.noalias() = cache.hidden * p.head.transpose();
  }
  if (p.head_bias.size() > 0) cache.logits.rowwise() += p.head_bias;
}

// Cross-entropy of next-token prediction over one document, optionally with
// label smoothing. Input positions are tokens[0..n-2], targets tokens[1..n-1].
// Returns the summed (not averaged) loss. If `grad` is non-null, accumulates
// weight * d(loss)/d(params) into it.
template <typename T>
T document_loss(const Params<T>& p, std::span<const TokenId> doc, Params<T>* grad, T weight,
                T label_smoothing, Cache<T>& cache) {
  const auto inputs = doc.first(doc.size() - 1);
  forward(p, inputs, cache);
  const int n = static_cast<int>(inputs.size());
  const int V = p.config.vocab_size;
  const int d = p.config.d_model;
  const int hd = p.config.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const T off = label_smoothing / static_cast<T>(V);
  const T on = T(1) - label_smoothing + off;

  T loss = 0;
  Mat<T> dlogits(n, V);
  for (int i = 0; i < n; ++i) {
    auto row = cache.logits.row(i);
    const T m = row.maxCoeff();
    const T lse = m + std::log((row.array() - m).exp().sum());
    const int target = doc[static_cast<std::size_t>(i) + 1];
    if (label_smoothing > 0) {
      loss += -(on - off) * (row(target) - lse) - off * (row.array() - lse).sum();
    } else {
      loss += lse - row(target);
    }
    if (grad) {
      dlogits.row(i) = (row.array() - lse).exp().matrix() * weight;
      dlogits.row(i).array() -= off * weight;
      dlogits(i, target) -= (on - off) * weight;
    }
  }
  if (!grad) return loss;

  auto& g = *grad;
  g.head.noalias() += dlogits.transpose() * cache.hidden;
  if (g.head_bias.size() > 0) g.head_bias += dlogits.colwise().sum();
  Mat<T> dhidden = dlogits * p.head;
  Mat<T> dx = rms_norm_backward(cache.x_final, cache.inv_final, p.norm_final, dhidden,
                                g.norm_final);

  for (int li = static_cast<int>(p.layers.size()) - 1; li >= 0; --li) {
    const auto& L = p.layers[static_cast<std::size_t>(li)];
    auto& G = g.layers[static_cast<std::size_t>(li)];
    const auto& lc = cache.layers[static_cast<std::size_t>(li)];

    // Feed-forward block.
    G.down.noalias() += dx.transpose() * lc.act;
    const Mat<T> dact = dx * L.down;
    const Mat<T> dgpre = dact.cwiseProduct(lc.upre).cwiseProduct(
        lc.gpre.unaryExpr([](T z) { return silu_grad(z); }));
    const Mat<T> dupre = dact.cwiseProduct(lc.gpre.unaryExpr([](T z) { return silu(z); }));
    G.gate.noalias() += dgpre.transpose() * lc.b;
    G.up.noalias() += dupre.transpose() * lc.b;
    Mat<T> db = dgpre * L.gate;
    db.noalias() += dupre * L.up;
    Mat<T> dmid = dx + rms_norm_backward(lc.x_mid, lc.inv_b, L.norm_ffn, db, G.norm_ffn);

    // Attention block.
    G.o.noalias() += dmid.transpose() * lc.ctx;
    const Mat<T> dctx = dmid * L.o;
    Mat<T> dq(n, d), dk(n, d), dv(n, d);
    for (int h = 0; h < p.config.n_heads; ++h) {
      const Mat<T>& att = lc.att[static_cast<std::size_t>(h)];
      const auto dctx_h = dctx.middleCols(h * hd, hd);
      const Mat<T> datt = dctx_h * lc.v.middleCols(h * hd, hd).transpose();
      dv.middleCols(h * hd, hd).noalias() = att.transpose() * dctx_h;
      const Col<T> rowdot = datt.cwiseProduct(att).rowwise().sum();
      const Mat<T> dscore = (att.array() * (datt.array().colwise() - rowdot.array())) * scale;
      dq.middleCols(h * hd, hd).noalias() = dscore * lc.k.middleCols(h * hd, hd);
      dk.middleCols(h * hd, hd).noalias() = dscore.transpose() * lc.q.middleCols(h * hd, hd);
    }
    G.q.noalias() += dq.transpose() * lc.a;
    G.k.noalias() += dk.transpose() * lc.a;
    G.v.noalias() += dv.transpose() * lc.a;
    Mat<T> da = dq * L.q;
    da.noalias() += dk * L.k;
    da.noalias() += dv * L.v;
    dx = dmid + rms_norm_backward(lc.x_in, lc.inv_a, L.norm_attn, da, G.norm_attn);
  }

  for (int i = 0; i < n; ++i) {
    g.embed.row(inputs[static_cast<std::size_t>(i)]) += dx.row(i);
    g.pos.row(i) += dx.row(i);
  }
  return loss;
}

}  // namespace tars::engine
