#pragma once

#include "kivi/core.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace kivi {

/// Named parameter tensor with its gradient accumulator.
template <typename S>
struct Param {
  std::string name;
  MatX<S> w;
  MatX<S> g;

  void setup(const std::string& n, int rows, int cols) {
    name = n;
    w.setZero(rows, cols);
    g.setZero(rows, cols);
  }
  int64_t size() const { return w.size(); }
};

template <typename S>
using ParamList = std::vector<Param<S>*>;

// ---------------------------------------------------------------------------
// Initialization

/// Orthogonal rows/columns from the QR of a Gaussian draw, sign-fixed so the
/// result is unique, scaled by `gain`.
template <typename S>
void init_orthogonal(MatX<S>& W, Rng& rng, double gain) {
  const int rows = static_cast<int>(W.rows()), cols = static_cast<int>(W.cols());
  const bool tall = rows >= cols;
  Mat G(tall ? rows : cols, tall ? cols : rows);
  for (int j = 0; j < G.cols(); ++j)
    for (int i = 0; i < G.rows(); ++i) G(i, j) = rng.normal();
  Eigen::HouseholderQR<Mat> qr(G);
  Mat Q = qr.householderQ() * Mat::Identity(G.rows(), G.cols());
  const Mat R = qr.matrixQR().topRows(G.cols()).template triangularView<Eigen::Upper>();
  for (int j = 0; j < Q.cols(); ++j)
    if (R(j, j) < 0.0) Q.col(j) = -Q.col(j);
  Mat M = tall ? Q : Mat(Q.transpose());
  W = (gain * M).cast<S>();
}

template <typename S>
void init_uniform_fan_in(MatX<S>& W, Rng& rng, int fan_in) {
  const double limit = std::sqrt(1.0 / fan_in);
  for (int j = 0; j < W.cols(); ++j)
    for (int i = 0; i < W.rows(); ++i)
      W(i, j) = static_cast<S>(rng.uniform(-limit, limit));
}

template <typename S>
void init_normal(MatX<S>& W, Rng& rng, double stddev) {
  for (int j = 0; j < W.cols(); ++j)
    for (int i = 0; i < W.rows(); ++i) W(i, j) = static_cast<S>(stddev * rng.normal());
}

// ---------------------------------------------------------------------------
// Activations

enum class Act { Identity, Elu };

template <typename S>
void act_forward(Act act, MatX<S>& x) {
  if (act == Act::Identity) return;
  for (int j = 0; j < x.cols(); ++j)
    for (int i = 0; i < x.rows(); ++i) {
      const S v = x(i, j);
      if (v < S(0)) x(i, j) = std::exp(v) - S(1);
    }
}

/// In-place dy *= act'(pre).
template <typename S>
void act_backward(Act act, const MatX<S>& pre, MatX<S>& dy) {
  if (act == Act::Identity) return;
  for (int j = 0; j < dy.cols(); ++j)
    for (int i = 0; i < dy.rows(); ++i) {
      const S v = pre(i, j);
      if (v < S(0)) dy(i, j) *= std::exp(v);
    }
}

// ---------------------------------------------------------------------------
// Dense layer. Batch rows are samples: y = act(x W^T + b^T).

template <typename S>
struct DenseCache {
  MatX<S> x;
  MatX<S> pre;
};

template <typename S>
struct Dense {
  Param<S> W, b;
  Act act = Act::Identity;

  void setup(const std::string& prefix, int in, int out, Act a, Rng& rng, double gain) {
    W.setup(prefix + "/W", out, in);
    b.setup(prefix + "/b", out, 1);
    act = a;
    init_orthogonal(W.w, rng, gain);
  }

  int in_dim() const { return static_cast<int>(W.w.cols()); }
  int out_dim() const { return static_cast<int>(W.w.rows()); }

  void collect(ParamList<S>& out) {
    out.push_back(&W);
    out.push_back(&b);
  }

  MatX<S> forward(const MatX<S>& x, DenseCache<S>* cache) const {
    if (x.cols() != W.w.cols()) throw std::invalid_argument("Dense: input width mismatch");
    MatX<S> pre = x * W.w.transpose();
    pre.rowwise() += b.w.col(0).transpose();
    if (cache) {
      cache->x = x;
      cache->pre = pre;
    }
    act_forward(act, pre);
    return pre;
  }

  MatX<S> backward(const MatX<S>& dy, const DenseCache<S>& cache) {
    MatX<S> dpre = dy;
    act_backward(act, cache.pre, dpre);
    W.g.noalias() += dpre.transpose() * cache.x;
    b.g.col(0).noalias() += dpre.colwise().sum().transpose();
    return dpre * W.w;
  }
};

// ---------------------------------------------------------------------------
// Dense stack: elu hidden layers, identity output.

struct DenseStackSpec {
  std::vector<int> widths;  // input, hidden..., output

  void validate() const {
    if (widths.size() < 2) throw std::invalid_argument("DenseStackSpec: need >= 1 layer");
    for (int w : widths)
      if (w <= 0) throw std::invalid_argument("DenseStackSpec: widths must be > 0");
  }
};

template <typename S>
struct MlpCache {
  std::vector<DenseCache<S>> layers;
};

template <typename S>
struct Mlp {
  std::vector<Dense<S>> layers;

  void setup(const std::string& prefix, const DenseStackSpec& spec, Rng& rng,
             double out_gain = 1.0) {
    spec.validate();
    layers.resize(spec.widths.size() - 1);
    for (size_t i = 0; i < layers.size(); ++i) {
      const bool last = i + 1 == layers.size();
      layers[i].setup(prefix + "/" + std::to_string(i), spec.widths[i], spec.widths[i + 1],
                      last ? Act::Identity : Act::Elu, rng,
                      last ? out_gain : std::sqrt(2.0));
    }
  }

  int in_dim() const { return layers.front().in_dim(); }
  int out_dim() const { return layers.back().out_dim(); }

  void collect(ParamList<S>& out) {
    for (auto& l : layers) l.collect(out);
  }

  MatX<S> forward(const MatX<S>& x, MlpCache<S>* cache) const {
    if (cache) cache->layers.resize(layers.size());
    MatX<S> h = x;
    for (size_t i = 0; i < layers.size(); ++i)
      h = layers[i].forward(h, cache ? &cache->layers[i] : nullptr);
    return h;
  }

  MatX<S> backward(const MatX<S>& dy, const MlpCache<S>& cache) {
    MatX<S> d = dy;
    for (size_t i = layers.size(); i-- > 0;) d = layers[i].backward(d, cache.layers[i]);
    return d;
  }
};

// ---------------------------------------------------------------------------
// Convolution stack on 2x64x64 depth pairs. Data is row-major CHW per batch
// row. Four stride-2 convolutions land on a 4x4 map = 16 tokens.

struct ConvLayerSpec {
  int channels, kernel, stride;
};

struct ConvStackSpec {
  int in_channels = 2;
  int in_h = 64, in_w = 64;
  std::vector<ConvLayerSpec> layers{{8, 3, 2}, {16, 3, 2}, {32, 3, 2}, {64, 3, 2}};

  /// Final spatial size; must be 4x4 so the stack emits exactly 16 tokens.
  void validate() const {
    int h = in_h, w = in_w;
    for (const auto& l : layers) {
      h = (h + 2 * (l.kernel / 2) - l.kernel) / l.stride + 1;
      w = (w + 2 * (l.kernel / 2) - l.kernel) / l.stride + 1;
    }
    if (h != 4 || w != 4)
      throw std::invalid_argument("ConvStackSpec: output map must be 4x4 (16 tokens)");
  }

  int token_dim() const { return layers.back().channels; }
};

template <typename S>
struct ConvCache {
  std::vector<MatX<S>> cols;  // per layer: stacked im2col, (n*OHW) columns layout below
  std::vector<MatX<S>> pre;   // per layer pre-activation, n x (C*OH*OW)
};

template <typename S>
struct Conv2d {
  Param<S> W;  // out_ch x (in_ch * k * k)
  Param<S> b;  // out_ch x 1
  int in_ch = 0, out_ch = 0, k = 3, stride = 2, pad = 1;
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;

  void setup(const std::string& prefix, int in_channels, const ConvLayerSpec& spec,
             int ih, int iw, Rng& rng) {
    in_ch = in_channels;
    out_ch = spec.channels;
    k = spec.kernel;
    stride = spec.stride;
    pad = spec.kernel / 2;
    in_h = ih;
    in_w = iw;
    out_h = (ih + 2 * pad - k) / stride + 1;
    out_w = (iw + 2 * pad - k) / stride + 1;
    W.setup(prefix + "/W", out_ch, in_ch * k * k);
    b.setup(prefix + "/b", out_ch, 1);
    init_uniform_fan_in(W.w, rng, in_ch * k * k);
  }

  void collect(ParamList<S>& out) {
    out.push_back(&W);
    out.push_back(&b);
  }

  /// im2col for one item: (in_ch*k*k) x (out_h*out_w).
  void im2col(const S* x, MatX<S>& col) const {
    col.setZero(in_ch * k * k, out_h * out_w);
    for (int c = 0; c < in_ch; ++c) {
      const S* plane = x + c * in_h * in_w;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const int row = (c * k + ky) * k + kx;
          for (int oy = 0; oy < out_h; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= in_h) continue;
            for (int ox = 0; ox < out_w; ++ox) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= in_w) continue;
              col(row, oy * out_w + ox) = plane[iy * in_w + ix];
            }
          }
        }
      }
    }
  }

  void col2im(const MatX<S>& dcol, S* dx) const {
    for (int c = 0; c < in_ch; ++c) {
      S* plane = dx + c * in_h * in_w;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const int row = (c * k + ky) * k + kx;
          for (int oy = 0; oy < out_h; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= in_h) continue;
            for (int ox = 0; ox < out_w; ++ox) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= in_w) continue;
              plane[iy * in_w + ix] += dcol(row, oy * out_w + ox);
            }
          }
        }
      }
    }
  }

  /// x: n x (in_ch*in_h*in_w) -> n x (out_ch*out_h*out_w), elu applied.
  MatX<S> forward(const MatX<S>& x, MatX<S>* col_cache, MatX<S>* pre_cache) const {
    const int n = static_cast<int>(x.rows());
    const int ohw = out_h * out_w;
    MatX<S> y(n, out_ch * ohw);
    MatX<S> cols;
    if (col_cache) col_cache->resize(in_ch * k * k, static_cast<Eigen::Index>(n) * ohw);
    MatX<S> col;
    for (int i = 0; i < n; ++i) {
      im2col(x.row(i).data(), col);
      if (col_cache) col_cache->middleCols(static_cast<Eigen::Index>(i) * ohw, ohw) = col;
      MatX<S> yi = W.w * col;  // out_ch x ohw
      yi.colwise() += b.w.col(0);
      for (int c = 0; c < out_ch; ++c)
        y.row(i).segment(c * ohw, ohw) = yi.row(c);
    }
    if (pre_cache) *pre_cache = y;
    act_forward(Act::Elu, y);
    return y;
  }

  MatX<S> backward(const MatX<S>& dy_in, const MatX<S>& cols, const MatX<S>& pre) {
    const int n = static_cast<int>(dy_in.rows());
    const int ohw = out_h * out_w;
    MatX<S> dy = dy_in;
    act_backward(Act::Elu, pre, dy);
    MatX<S> dx(n, in_ch * in_h * in_w);
    dx.setZero();
    MatX<S> dyi(out_ch, ohw), dcol;
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < out_ch; ++c) dyi.row(c) = dy.row(i).segment(c * ohw, ohw);
      const auto col = cols.middleCols(static_cast<Eigen::Index>(i) * ohw, ohw);
      W.g.noalias() += dyi * col.transpose();
      b.g.col(0).noalias() += dyi.rowwise().sum();
      dcol.noalias() = W.w.transpose() * dyi;
      col2im(dcol, dx.row(i).data());
    }
    return dx;
  }
};

template <typename S>
struct ConvStack {
  ConvStackSpec spec;
  std::vector<Conv2d<S>> layers;

  void setup(const std::string& prefix, const ConvStackSpec& sp, Rng& rng) {
    sp.validate();
    spec = sp;
    layers.resize(sp.layers.size());
    int ch = sp.in_channels, h = sp.in_h, w = sp.in_w;
    for (size_t i = 0; i < layers.size(); ++i) {
      layers[i].setup(prefix + "/" + std::to_string(i), ch, sp.layers[i], h, w, rng);
      ch = layers[i].out_ch;
      h = layers[i].out_h;
      w = layers[i].out_w;
    }
  }

  void collect(ParamList<S>& out) {
    for (auto& l : layers) l.collect(out);
  }

  /// x: n x (2*64*64) -> stacked tokens (n*16) x d, tokens row-major over the
  /// 4x4 grid.
  MatX<S> forward(const MatX<S>& x, ConvCache<S>* cache) const {
    if (cache) {
      cache->cols.resize(layers.size());
      cache->pre.resize(layers.size());
    }
    MatX<S> h = x;
    for (size_t i = 0; i < layers.size(); ++i)
      h = layers[i].forward(h, cache ? &cache->cols[i] : nullptr,
                            cache ? &cache->pre[i] : nullptr);
    // h: n x (d*16) channel-major; transpose into tokens.
    const int n = static_cast<int>(h.rows());
    const int d = spec.token_dim();
    MatX<S> tokens(static_cast<Eigen::Index>(n) * 16, d);
    for (int i = 0; i < n; ++i)
      for (int t = 0; t < 16; ++t)
        for (int c = 0; c < d; ++c) tokens(i * 16 + t, c) = h(i, c * 16 + t);
    return tokens;
  }

  MatX<S> backward(const MatX<S>& dtokens, const ConvCache<S>& cache) {
    const int d = spec.token_dim();
    const int n = static_cast<int>(dtokens.rows()) / 16;
    MatX<S> dh(n, d * 16);
    for (int i = 0; i < n; ++i)
      for (int t = 0; t < 16; ++t)
        for (int c = 0; c < d; ++c) dh(i, c * 16 + t) = dtokens(i * 16 + t, c);
    MatX<S> dcur = dh;
    for (size_t i = layers.size(); i-- > 0;)
      dcur = layers[i].backward(dcur, cache.cols[i], cache.pre[i]);
    return dcur;
  }
};

// ---------------------------------------------------------------------------
// LayerNorm over token rows.

template <typename S>
struct LayerNormCache {
  MatX<S> xhat;
  VecX<S> inv_std;
};

template <typename S>
struct LayerNorm {
  Param<S> gamma, beta;
  static constexpr double kEps = 1e-5;

  void setup(const std::string& prefix, int d) {
    gamma.setup(prefix + "/gamma", d, 1);
    beta.setup(prefix + "/beta", d, 1);
    gamma.w.setOnes();
  }

  void collect(ParamList<S>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }

  MatX<S> forward(const MatX<S>& x, LayerNormCache<S>* cache) const {
    const int n = static_cast<int>(x.rows()), d = static_cast<int>(x.cols());
    MatX<S> y(n, d);
    if (cache) {
      cache->xhat.resize(n, d);
      cache->inv_std.resize(n);
    }
    for (int i = 0; i < n; ++i) {
      const S mu = x.row(i).mean();
      const S var = (x.row(i).array() - mu).square().mean();
      const S inv = S(1) / std::sqrt(var + S(kEps));
      for (int j = 0; j < d; ++j) {
        const S xhat = (x(i, j) - mu) * inv;
        if (cache) cache->xhat(i, j) = xhat;
        y(i, j) = xhat * gamma.w(j, 0) + beta.w(j, 0);
      }
      if (cache) cache->inv_std[i] = inv;
    }
    return y;
  }

  MatX<S> backward(const MatX<S>& dy, const LayerNormCache<S>& cache) {
    const int n = static_cast<int>(dy.rows()), d = static_cast<int>(dy.cols());
    MatX<S> dx(n, d);
    for (int i = 0; i < n; ++i) {
      VecX<S> dxhat(d);
      for (int j = 0; j < d; ++j) {
        gamma.g(j, 0) += dy(i, j) * cache.xhat(i, j);
        beta.g(j, 0) += dy(i, j);
        dxhat[j] = dy(i, j) * gamma.w(j, 0);
      }
      const S m1 = dxhat.mean();
      const S m2 = (dxhat.array() * cache.xhat.row(i).transpose().array()).mean();
      for (int j = 0; j < d; ++j)
        dx(i, j) = cache.inv_std[i] * (dxhat[j] - m1 - cache.xhat(i, j) * m2);
    }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Multi-head self-attention over per-item sequences of fixed length T.
// Batched input is stacked: row b*T + t is token t of item b.

struct AttentionSpec {
  int token_dim = 64;
  int heads = 4;
  int layers = 2;
  int ff_width = 128;

  void validate() const {
    if (token_dim % heads != 0)
      throw std::invalid_argument("AttentionSpec: token_dim must divide by heads");
  }
};

template <typename S>
struct MhaCache {
  MatX<S> x;                     // (B*T) x d
  MatX<S> qkv;                   // (B*T) x 3d
  std::vector<MatX<S>> attn;     // per (item, head): T x T softmax weights
};

template <typename S>
struct MultiHeadAttention {
  Param<S> Wqkv, bqkv;  // 3d x d, 3d x 1
  Param<S> Wo, bo;      // d x d, d x 1
  int d = 0, heads = 0;

  void setup(const std::string& prefix, int dim, int n_heads, Rng& rng) {
    d = dim;
    heads = n_heads;
    Wqkv.setup(prefix + "/Wqkv", 3 * d, d);
    bqkv.setup(prefix + "/bqkv", 3 * d, 1);
    Wo.setup(prefix + "/Wo", d, d);
    bo.setup(prefix + "/bo", d, 1);
    init_orthogonal(Wqkv.w, rng, 1.0);
    init_orthogonal(Wo.w, rng, 1.0);
  }

  void collect(ParamList<S>& out) {
    out.push_back(&Wqkv);
    out.push_back(&bqkv);
    out.push_back(&Wo);
    out.push_back(&bo);
  }

  MatX<S> forward(const MatX<S>& x, int batch, int T, MhaCache<S>* cache) const {
    const int dh = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    MatX<S> qkv = x * Wqkv.w.transpose();
    qkv.rowwise() += bqkv.w.col(0).transpose();
    MatX<S> concat(x.rows(), d);
    if (cache) {
      cache->x = x;
      cache->qkv = qkv;
      cache->attn.assign(static_cast<size_t>(batch) * heads, MatX<S>());
    }
    for (int b = 0; b < batch; ++b) {
      const auto Q = qkv.block(b * T, 0, T, d);
      const auto K = qkv.block(b * T, d, T, d);
      const auto V = qkv.block(b * T, 2 * d, T, d);
      for (int h = 0; h < heads; ++h) {
        MatX<S> scores = scale * Q.middleCols(h * dh, dh) *
                         K.middleCols(h * dh, dh).transpose();
        // softmax rows
        for (int i = 0; i < T; ++i) {
          const S mx = scores.row(i).maxCoeff();
          scores.row(i) = (scores.row(i).array() - mx).exp();
          scores.row(i) /= scores.row(i).sum();
        }
        concat.block(b * T, h * dh, T, dh).noalias() =
            scores * V.middleCols(h * dh, dh);
        if (cache) cache->attn[static_cast<size_t>(b) * heads + h] = std::move(scores);
      }
    }
    MatX<S> y = concat * Wo.w.transpose();
    y.rowwise() += bo.w.col(0).transpose();
    if (cache) cache->x = x;  // kept for dWqkv
    return y;
  }

  MatX<S> backward(const MatX<S>& dy, int batch, int T, const MhaCache<S>& cache) {
    const int dh = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    // Recompute concat = attn * V from cache to get dWo.
    MatX<S> concat(dy.rows(), d);
    for (int b = 0; b < batch; ++b) {
      const auto V = cache.qkv.block(b * T, 2 * d, T, d);
      for (int h = 0; h < heads; ++h)
        concat.block(b * T, h * dh, T, dh).noalias() =
            cache.attn[static_cast<size_t>(b) * heads + h] * V.middleCols(h * dh, dh);
    }
    Wo.g.noalias() += dy.transpose() * concat;
    bo.g.col(0).noalias() += dy.colwise().sum().transpose();
    MatX<S> dconcat = dy * Wo.w;

    MatX<S> dqkv(dy.rows(), 3 * d);
    dqkv.setZero();
    for (int b = 0; b < batch; ++b) {
      const auto Q = cache.qkv.block(b * T, 0, T, d);
      const auto K = cache.qkv.block(b * T, d, T, d);
      const auto V = cache.qkv.block(b * T, 2 * d, T, d);
      for (int h = 0; h < heads; ++h) {
        const MatX<S>& A = cache.attn[static_cast<size_t>(b) * heads + h];
        const auto dO = dconcat.block(b * T, h * dh, T, dh);
        MatX<S> dA = dO * V.middleCols(h * dh, dh).transpose();
        dqkv.block(b * T, 2 * d + h * dh, T, dh).noalias() += A.transpose() * dO;
        // softmax backward per row
        MatX<S> dS(T, T);
        for (int i = 0; i < T; ++i) {
          const S dot = dA.row(i).dot(A.row(i));
          dS.row(i) = A.row(i).array() * (dA.row(i).array() - dot);
        }
        dS *= scale;
        dqkv.block(b * T, h * dh, T, dh).noalias() += dS * K.middleCols(h * dh, dh);
        dqkv.block(b * T, d + h * dh, T, dh).noalias() +=
            dS.transpose() * Q.middleCols(h * dh, dh);
      }
    }
    Wqkv.g.noalias() += dqkv.transpose() * cache.x;
    bqkv.g.col(0).noalias() += dqkv.colwise().sum().transpose();
    return dqkv * Wqkv.w;
  }
};

// ---------------------------------------------------------------------------
// Post-LN transformer block: y = LN2(u + FF(u)), u = LN1(x + MHA(x)).

template <typename S>
struct BlockCache {
  MhaCache<S> mha;
  LayerNormCache<S> ln1, ln2;
  DenseCache<S> ff1, ff2;
  MatX<S> u;  // output of LN1
};

template <typename S>
struct TransformerBlock {
  MultiHeadAttention<S> mha;
  LayerNorm<S> ln1, ln2;
  Dense<S> ff1, ff2;

  void setup(const std::string& prefix, const AttentionSpec& spec, Rng& rng) {
    mha.setup(prefix + "/mha", spec.token_dim, spec.heads, rng);
    ln1.setup(prefix + "/ln1", spec.token_dim);
    ln2.setup(prefix + "/ln2", spec.token_dim);
    ff1.setup(prefix + "/ff1", spec.token_dim, spec.ff_width, Act::Elu, rng, std::sqrt(2.0));
    ff2.setup(prefix + "/ff2", spec.ff_width, spec.token_dim, Act::Identity, rng, 1.0);
  }

  void collect(ParamList<S>& out) {
    mha.collect(out);
    ln1.collect(out);
    ln2.collect(out);
    ff1.collect(out);
    ff2.collect(out);
  }

  MatX<S> forward(const MatX<S>& x, int batch, int T, BlockCache<S>* cache) const {
    MatX<S> a = mha.forward(x, batch, T, cache ? &cache->mha : nullptr);
    a += x;
    MatX<S> u = ln1.forward(a, cache ? &cache->ln1 : nullptr);
    MatX<S> f = ff2.forward(ff1.forward(u, cache ? &cache->ff1 : nullptr),
                            cache ? &cache->ff2 : nullptr);
    f += u;
    if (cache) cache->u = u;
    return ln2.forward(f, cache ? &cache->ln2 : nullptr);
  }

  MatX<S> backward(const MatX<S>& dy, int batch, int T, const BlockCache<S>& cache) {
    MatX<S> df = ln2.backward(dy, cache.ln2);
    MatX<S> du = df + ff1.backward(ff2.backward(df, cache.ff2), cache.ff1);
    MatX<S> da = ln1.backward(du, cache.ln1);
    return da + mha.backward(da, batch, T, cache.mha);
  }
};

// ---------------------------------------------------------------------------
// Memory-augmented transformer: memory tokens are prepended to the input
// sequence, full self-attention runs across all positions, and the outputs at
// the memory positions become the updated memory.

template <typename S>
struct MemTransformerCache {
  std::vector<BlockCache<S>> blocks;
  int batch = 0, T = 0;
};

template <typename S>
struct MemTransformer {
  AttentionSpec spec;
  std::vector<TransformerBlock<S>> blocks;
  int memory_tokens = 8;

  void setup(const std::string& prefix, const AttentionSpec& sp, int n_memory, Rng& rng) {
    sp.validate();
    spec = sp;
    memory_tokens = n_memory;
    blocks.resize(static_cast<size_t>(sp.layers));
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].setup(prefix + "/block" + std::to_string(i), sp, rng);
  }

  void collect(ParamList<S>& out) {
    for (auto& b : blocks) b.collect(out);
  }

  /// Stacked batched forward. seq: (batch*T) x d where the first
  /// `memory_tokens` rows of each item are its memory. Returns all outputs;
  /// callers slice memory/readout positions.
  MatX<S> forward_all(const MatX<S>& seq, int batch, int T,
                      MemTransformerCache<S>* cache) const {
    if (cache) {
      cache->blocks.resize(blocks.size());
      cache->batch = batch;
      cache->T = T;
    }
    MatX<S> h = seq;
    for (size_t i = 0; i < blocks.size(); ++i)
      h = blocks[i].forward(h, batch, T, cache ? &cache->blocks[i] : nullptr);
    return h;
  }

  MatX<S> backward_all(const MatX<S>& dy, const MemTransformerCache<S>& cache) {
    MatX<S> d = dy;
    for (size_t i = blocks.size(); i-- > 0;)
      d = blocks[i].backward(d, cache.batch, cache.T, cache.blocks[i]);
    return d;
  }

  /// Single-sequence convenience: (output tokens, updated memory tokens).
  std::pair<MatX<S>, MatX<S>> forward(const MatX<S>& tokens, const MatX<S>& memory) const {
    if (tokens.cols() != spec.token_dim || memory.cols() != spec.token_dim)
      throw std::invalid_argument("MemTransformer: token width mismatch");
    const int T = static_cast<int>(memory.rows() + tokens.rows());
    MatX<S> seq(T, spec.token_dim);
    seq.topRows(memory.rows()) = memory;
    seq.bottomRows(tokens.rows()) = tokens;
    MatX<S> out = forward_all(seq, 1, T, nullptr);
    return {out.bottomRows(tokens.rows()), out.topRows(memory.rows())};
  }
};

// ---------------------------------------------------------------------------
// Diagonal Gaussian utilities.

inline constexpr double kLogSigmaMin = -6.0;
inline constexpr double kLogSigmaMax = 2.0;

template <typename S>
struct DiagGaussian {
  VecX<S> mu;
  VecX<S> log_sigma;  // clamped to [kLogSigmaMin, kLogSigmaMax]

  VecX<S> sigma() const { return log_sigma.array().exp(); }
};

template <typename S>
VecX<S> reparameterize(const DiagGaussian<S>& g, const VecX<S>& eps) {
  if (eps.size() != g.mu.size()) throw std::invalid_argument("reparameterize: dim mismatch");
  return g.mu.array() + g.log_sigma.array().exp() * eps.array();
}

/// KL(N(mu, sigma^2) || N(0, I)) = 0.5 sum(mu^2 + sigma^2 - 1 - 2 log sigma).
template <typename S>
S kl_to_standard_normal(const DiagGaussian<S>& g) {
  const auto s2 = (S(2) * g.log_sigma.array()).exp();
  return S(0.5) * (g.mu.array().square() + s2 - S(1) - S(2) * g.log_sigma.array()).sum();
}

// ---------------------------------------------------------------------------
// Adam with optional global-norm gradient clipping.

template <typename S>
class Adam {
 public:
  explicit Adam(ParamList<S> params, double lr = 1e-3, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto* p : params_) {
      m_.push_back(MatX<S>::Zero(p->w.rows(), p->w.cols()));
      v_.push_back(MatX<S>::Zero(p->w.rows(), p->w.cols()));
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void zero_grad() {
    for (auto* p : params_) p->g.setZero();
  }

  double grad_norm() const {
    double sum = 0.0;
    for (const auto* p : params_) sum += static_cast<double>(p->g.squaredNorm());
    return std::sqrt(sum);
  }

  /// Scales all gradients so the global norm is at most max_norm; returns the
  /// pre-clip norm.
  double clip_grad_norm(double max_norm) {
    const double norm = grad_norm();
    if (norm > max_norm && norm > 0.0) {
      const S scale = static_cast<S>(max_norm / norm);
      for (auto* p : params_) p->g *= scale;
    }
    return norm;
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      m_[i] = static_cast<S>(beta1_) * m_[i] + static_cast<S>(1.0 - beta1_) * p->g;
      v_[i] = static_cast<S>(beta2_) * v_[i].array().matrix() +
              static_cast<S>(1.0 - beta2_) * p->g.cwiseProduct(p->g);
      const auto mhat = m_[i] / static_cast<S>(bc1);
      const auto vhat = v_[i] / static_cast<S>(bc2);
      p->w.array() -=
          static_cast<S>(lr_) * mhat.array() / (vhat.array().sqrt() + static_cast<S>(eps_));
    }
  }

  const ParamList<S>& params() const { return params_; }

 private:
  ParamList<S> params_;
  std::vector<MatX<S>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Parameter blob serialization: raw little-endian f32 buffers in list order.
// The surrounding checkpoint carries the manifest (names, shapes, dtypes).

template <typename S>
void write_param_data(std::ostream& os, const ParamList<S>& params) {
  for (const auto* p : params) {
    for (Eigen::Index j = 0; j < p->w.cols(); ++j)
      for (Eigen::Index i = 0; i < p->w.rows(); ++i)
        write_pod<float>(os, static_cast<float>(p->w(i, j)));
  }
}

template <typename S>
void read_param_data(std::istream& is, const ParamList<S>& params) {
  for (auto* p : params) {
    for (Eigen::Index j = 0; j < p->w.cols(); ++j)
      for (Eigen::Index i = 0; i < p->w.rows(); ++i)
        p->w(i, j) = static_cast<S>(read_pod<float>(is));
  }
}

// ---------------------------------------------------------------------------
// Running per-channel normalization, frozen into checkpoints.

class RunningNorm {
 public:
  explicit RunningNorm(int dim)
      : sum_(Vec::Zero(dim)), sumsq_(Vec::Zero(dim)), count_(0) {}

  void update(const Mat& rows) {
    sum_ += rows.colwise().sum().transpose();
    sumsq_ += rows.array().square().matrix().colwise().sum().transpose();
    count_ += static_cast<int64_t>(rows.rows());
  }

  Vec mean() const {
    return count_ > 0 ? Vec(sum_ / static_cast<double>(count_)) : Vec::Zero(sum_.size());
  }

  Vec var() const {
    if (count_ == 0) return Vec::Ones(sum_.size());
    const Vec m = mean();
    return (sumsq_ / static_cast<double>(count_) - m.cwiseProduct(m)).cwiseMax(1e-8);
  }

  int64_t count() const { return count_; }

  /// (x - mean) / sqrt(var), clipped to +-10.
  Vec normalize(const Vec& x) const {
    if (count_ == 0) return x;
    Vec y = (x - mean()).cwiseQuotient(var().cwiseSqrt());
    return y.cwiseMax(-10.0).cwiseMin(10.0);
  }

  void restore(const Vec& sum, const Vec& sumsq, int64_t count) {
    sum_ = sum;
    sumsq_ = sumsq;
    count_ = count;
  }

  const Vec& raw_sum() const { return sum_; }
  const Vec& raw_sumsq() const { return sumsq_; }

 private:
  Vec sum_, sumsq_;
  int64_t count_;
};

}  // namespace kivi
