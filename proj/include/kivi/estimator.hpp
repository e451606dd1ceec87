#pragma once

#include "kivi/core.hpp"
#include "kivi/netcore.hpp"
#include "kivi/obs.hpp"

#include <string>
#include <vector>

namespace kivi {

// Fixed estimator dimensions.
inline constexpr int kExplicitDim = 11;   // v (3) + contact forces (8)
inline constexpr int kLatentZDim = 20;
inline constexpr int kLatentSDim = 12;
inline constexpr int kLatentFDim = 8;
inline constexpr int kFootScanPoints = 9;  // 3x3 grid under each foot
inline constexpr int kFootScanDim = kNumFeet * kFootScanPoints;  // 36
inline constexpr int kKinPartitionDim = kExplicitDim + kLatentZDim;            // 31
inline constexpr int kVisPartitionDim = kLatentSDim + kLatentFDim;             // 20
inline constexpr int kLatentBundleDim = kKinPartitionDim + kVisPartitionDim;   // 51
inline constexpr int kVisualTokens = 16;

// Depth input normalization: maps [0.1, 3.0] m onto [-1, 1].
inline constexpr double kDepthNormCenter = 1.55;
inline constexpr double kDepthNormScale = 1.45;

struct EstimatorConfig {
  int kin_hidden1 = 256;
  int kin_hidden2 = 128;
  int decoder_hidden = 128;
  int proprio_token_hidden = 128;
  AttentionSpec attention;  // d = 64, 4 heads, 2 layers, ff 128
  int memory_tokens = 8;
  int readout_width = 128;
  // Per-term loss weights; the nominal objective is the unweighted sum.
  double w_kl = 1.0, w_e = 1.0, w_o = 1.0, w_s = 1.0, w_f = 1.0;
};

/// Values produced by the actor-facing estimator pass, one row per item.
template <typename S>
struct KinestheticOutput {
  MatX<S> e_hat;      // n x 11
  MatX<S> mu;         // n x 20
  MatX<S> log_sigma;  // n x 20, clamped
  MatX<S> z;          // n x 20
  MatX<S> o_next;     // n x 45
};

template <typename S>
struct VisuospatialOutput {
  MatX<S> s_hat;  // n x 187
  MatX<S> f_hat;  // n x 36
  MatX<S> z_s;    // n x 12
  MatX<S> z_f;    // n x 8
};

template <typename S>
struct KinestheticCache {
  MlpCache<S> trunk, decoder;
  DenseCache<S> head_e, head_mu, head_ls;
  MatX<S> trunk_out;
  MatX<S> clamp_mask;  // 1 where log_sigma stayed inside its bounds
  MatX<S> eps;         // empty in evaluation mode
};

/// Proprioceptive branch: history encoder with an explicit state head, a
/// variational latent, and a next-observation decoder fed by [z, encoding].
template <typename S>
struct KinestheticModule {
  Mlp<S> trunk;
  Dense<S> head_e, head_mu, head_ls;
  Mlp<S> decoder;

  void setup(const std::string& prefix, const EstimatorConfig& cfg, Rng& rng) {
    DenseStackSpec trunk_spec{{kHistoryDim, cfg.kin_hidden1, cfg.kin_hidden2}};
    trunk.setup(prefix + "/trunk", trunk_spec, rng);
    trunk.layers.back().act = Act::Elu;
    head_e.setup(prefix + "/head_e", cfg.kin_hidden2, kExplicitDim, Act::Identity, rng, 1.0);
    head_mu.setup(prefix + "/head_mu", cfg.kin_hidden2, kLatentZDim, Act::Identity, rng, 0.1);
    head_ls.setup(prefix + "/head_ls", cfg.kin_hidden2, kLatentZDim, Act::Identity, rng, 0.1);
    DenseStackSpec dec_spec{{kLatentZDim + cfg.kin_hidden2, cfg.decoder_hidden, kProprioDim}};
    decoder.setup(prefix + "/decoder", dec_spec, rng);
  }

  void collect(ParamList<S>& out) {
    trunk.collect(out);
    head_e.collect(out);
    head_mu.collect(out);
    head_ls.collect(out);
    decoder.collect(out);
  }

  /// history: n x 450 (normalized). eps: n x 20 for training-mode sampling,
  /// empty for evaluation (z = mu).
  KinestheticOutput<S> forward(const MatX<S>& history, const MatX<S>& eps,
                               KinestheticCache<S>* cache) const {
    const int n = static_cast<int>(history.rows());
    KinestheticOutput<S> out;
    MatX<S> h = trunk.forward(history, cache ? &cache->trunk : nullptr);
    out.e_hat = head_e.forward(h, cache ? &cache->head_e : nullptr);
    out.mu = head_mu.forward(h, cache ? &cache->head_mu : nullptr);
    MatX<S> ls = head_ls.forward(h, cache ? &cache->head_ls : nullptr);
    MatX<S> mask = MatX<S>::Ones(n, kLatentZDim);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < kLatentZDim; ++j) {
        if (ls(i, j) < S(kLogSigmaMin)) {
          ls(i, j) = S(kLogSigmaMin);
          mask(i, j) = S(0);
        } else if (ls(i, j) > S(kLogSigmaMax)) {
          ls(i, j) = S(kLogSigmaMax);
          mask(i, j) = S(0);
        }
      }
    out.log_sigma = ls;
    const bool training = eps.size() > 0;
    out.z = training
                ? MatX<S>(out.mu.array() + ls.array().exp() * eps.array())
                : out.mu;
    MatX<S> dec_in(n, kLatentZDim + h.cols());
    dec_in.leftCols(kLatentZDim) = out.z;
    dec_in.rightCols(h.cols()) = h;
    out.o_next = decoder.forward(dec_in, cache ? &cache->decoder : nullptr);
    if (cache) {
      cache->trunk_out = h;
      cache->clamp_mask = mask;
      cache->eps = eps;
    }
    return out;
  }

  /// Accumulates parameter gradients; d_mu/d_ls carry the KL contributions.
  MatX<S> backward(const KinestheticOutput<S>& out, const KinestheticCache<S>& cache,
                   const MatX<S>& d_e, const MatX<S>& d_mu_in, const MatX<S>& d_ls_in,
                   const MatX<S>& d_o_next) {
    MatX<S> d_dec_in = decoder.backward(d_o_next, cache.decoder);
    MatX<S> d_z = d_dec_in.leftCols(kLatentZDim);
    MatX<S> d_h = d_dec_in.rightCols(d_dec_in.cols() - kLatentZDim);

    MatX<S> d_mu = d_mu_in + d_z;
    MatX<S> d_ls = d_ls_in;
    if (cache.eps.size() > 0)
      d_ls.array() += d_z.array() * out.log_sigma.array().exp() * cache.eps.array();
    d_ls.array() *= cache.clamp_mask.array();

    d_h += head_e.backward(d_e, cache.head_e);
    d_h += head_mu.backward(d_mu, cache.head_mu);
    d_h += head_ls.backward(d_ls, cache.head_ls);
    return trunk.backward(d_h, cache.trunk);
  }
};

template <typename S>
struct VisuospatialCache {
  MlpCache<S> ptoken;
  ConvCache<S> conv;
  MemTransformerCache<S> mem;
  DenseCache<S> readout, head_s, head_f, head_zs, head_zf;
  MatX<S> seq_out;  // transformer outputs, (n*T) x d
  int n = 0;
};

/// Vision branch: depth tokens and a proprio token fused with memory tokens
/// through the memory transformer; heads read the terrain structure.
template <typename S>
struct VisuospatialModule {
  Mlp<S> proprio_token;
  ConvStack<S> conv;
  Param<S> pos_enc;   // 16 x d, learned, visual tokens only
  Param<S> mem_init;  // memory_tokens x d, learned episode-start memory
  MemTransformer<S> transformer;
  Dense<S> readout;
  Dense<S> head_s, head_f, head_zs, head_zf;
  int memory_tokens = 8;

  void setup(const std::string& prefix, const EstimatorConfig& cfg, Rng& rng) {
    const int d = cfg.attention.token_dim;
    DenseStackSpec pt_spec{{kHistoryDim, cfg.proprio_token_hidden, d}};
    proprio_token.setup(prefix + "/ptoken", pt_spec, rng);
    ConvStackSpec conv_spec;
    conv_spec.layers.back().channels = d;
    conv.setup(prefix + "/conv", conv_spec, rng);
    pos_enc.setup(prefix + "/pos_enc", kVisualTokens, d);
    mem_init.setup(prefix + "/mem_init", cfg.memory_tokens, d);
    init_normal(pos_enc.w, rng, 0.02);
    init_normal(mem_init.w, rng, 0.02);
    transformer.setup(prefix + "/xf", cfg.attention, cfg.memory_tokens, rng);
    memory_tokens = cfg.memory_tokens;
    readout.setup(prefix + "/readout", 2 * d, cfg.readout_width, Act::Elu, rng, std::sqrt(2.0));
    head_s.setup(prefix + "/head_s", cfg.readout_width, kScanSize, Act::Identity, rng, 1.0);
    head_f.setup(prefix + "/head_f", cfg.readout_width, kFootScanDim, Act::Identity, rng, 1.0);
    head_zs.setup(prefix + "/head_zs", cfg.readout_width, kLatentSDim, Act::Identity, rng, 1.0);
    head_zf.setup(prefix + "/head_zf", cfg.readout_width, kLatentFDim, Act::Identity, rng, 1.0);
  }

  void collect(ParamList<S>& out) {
    proprio_token.collect(out);
    conv.collect(out);
    out.push_back(&pos_enc);
    out.push_back(&mem_init);
    transformer.collect(out);
    readout.collect(out);
    head_s.collect(out);
    head_f.collect(out);
    head_zs.collect(out);
    head_zf.collect(out);
  }

  int token_dim() const { return transformer.spec.token_dim; }
  int seq_len() const { return memory_tokens + 1 + kVisualTokens; }

  /// history: n x 450 normalized; depth: n x 8192 normalized; memory_in:
  /// n x (memory_tokens * d). Returns outputs and the updated memory rows.
  VisuospatialOutput<S> forward(const MatX<S>& history, const MatX<S>& depth,
                                const MatX<S>& memory_in, MatX<S>& memory_out,
                                VisuospatialCache<S>* cache) const {
    const int n = static_cast<int>(history.rows());
    const int d = token_dim();
    const int T = seq_len();
    MatX<S> pt = proprio_token.forward(history, cache ? &cache->ptoken : nullptr);
    MatX<S> vt = conv.forward(depth, cache ? &cache->conv : nullptr);
    for (int i = 0; i < n; ++i)
      vt.middleRows(i * kVisualTokens, kVisualTokens) += pos_enc.w;

    MatX<S> seq(static_cast<Eigen::Index>(n) * T, d);
    for (int i = 0; i < n; ++i) {
      for (int m = 0; m < memory_tokens; ++m)
        seq.row(i * T + m) = memory_in.row(i).segment(m * d, d);
      seq.row(i * T + memory_tokens) = pt.row(i);
      seq.middleRows(i * T + memory_tokens + 1, kVisualTokens) =
          vt.middleRows(i * kVisualTokens, kVisualTokens);
    }
    MatX<S> out = transformer.forward_all(seq, n, T, cache ? &cache->mem : nullptr);

    memory_out.resize(n, memory_tokens * d);
    MatX<S> readout_in(n, 2 * d);
    for (int i = 0; i < n; ++i) {
      for (int m = 0; m < memory_tokens; ++m)
        memory_out.row(i).segment(m * d, d) = out.row(i * T + m);
      readout_in.row(i).head(d) = out.row(i * T + memory_tokens);
      readout_in.row(i).tail(d) =
          out.middleRows(i * T + memory_tokens + 1, kVisualTokens).colwise().mean();
    }
    MatX<S> r = readout.forward(readout_in, cache ? &cache->readout : nullptr);
    VisuospatialOutput<S> res;
    res.s_hat = head_s.forward(r, cache ? &cache->head_s : nullptr);
    res.f_hat = head_f.forward(r, cache ? &cache->head_f : nullptr);
    res.z_s = head_zs.forward(r, cache ? &cache->head_zs : nullptr);
    res.z_f = head_zf.forward(r, cache ? &cache->head_zf : nullptr);
    if (cache) {
      cache->seq_out = out;
      cache->n = n;
    }
    return res;
  }

  /// Memory gradients are truncated at the step boundary: memory enters as a
  /// constant input, so episode-start steps are the only path into mem_init.
  void backward(const VisuospatialCache<S>& cache, const MatX<S>& d_s, const MatX<S>& d_f,
                const MatX<S>& d_zs, const MatX<S>& d_zf,
                const std::vector<char>& memory_is_initial) {
    const int n = cache.n;
    const int d = token_dim();
    const int T = seq_len();
    MatX<S> d_r = head_s.backward(d_s, cache.head_s);
    d_r += head_f.backward(d_f, cache.head_f);
    d_r += head_zs.backward(d_zs, cache.head_zs);
    d_r += head_zf.backward(d_zf, cache.head_zf);
    MatX<S> d_readout_in = readout.backward(d_r, cache.readout);

    MatX<S> d_out = MatX<S>::Zero(static_cast<Eigen::Index>(n) * T, d);
    for (int i = 0; i < n; ++i) {
      d_out.row(i * T + memory_tokens) = d_readout_in.row(i).head(d);
      const auto mean_grad = d_readout_in.row(i).tail(d) / S(kVisualTokens);
      for (int t = 0; t < kVisualTokens; ++t)
        d_out.row(i * T + memory_tokens + 1 + t) = mean_grad;
    }
    MatX<S> d_seq = transformer.backward_all(d_out, cache.mem);

    MatX<S> d_pt(n, d);
    MatX<S> d_vt(static_cast<Eigen::Index>(n) * kVisualTokens, d);
    for (int i = 0; i < n; ++i) {
      if (!memory_is_initial.empty() && memory_is_initial[static_cast<size_t>(i)]) {
        for (int m = 0; m < memory_tokens; ++m)
          mem_init.g.row(m) += d_seq.row(i * T + m);
      }
      d_pt.row(i) = d_seq.row(i * T + memory_tokens);
      d_vt.middleRows(i * kVisualTokens, kVisualTokens) =
          d_seq.middleRows(i * T + memory_tokens + 1, kVisualTokens);
    }
    for (int i = 0; i < n; ++i)
      pos_enc.g += d_vt.middleRows(i * kVisualTokens, kVisualTokens);
    proprio_token.backward(d_pt, cache.ptoken);
    conv.backward(d_vt, cache.conv);
  }

  /// Learned episode-start memory, flattened to one row.
  VecX<S> initial_memory() const {
    VecX<S> m(memory_tokens * token_dim());
    for (int i = 0; i < memory_tokens; ++i)
      m.segment(i * token_dim(), token_dim()) = mem_init.w.row(i);
    return m;
  }
};

// ---------------------------------------------------------------------------
// Latent bundle handed to the actor.

template <typename S>
struct LatentBundle {
  MatX<S> values;  // n x 51: [e_hat | z | z_s | z_f]

  static LatentBundle assemble(const KinestheticOutput<S>& kin,
                               const VisuospatialOutput<S>& vis) {
    const int n = static_cast<int>(kin.e_hat.rows());
    LatentBundle b;
    b.values.resize(n, kLatentBundleDim);
    b.values.leftCols(kExplicitDim) = kin.e_hat;
    b.values.middleCols(kExplicitDim, kLatentZDim) = kin.z;
    b.values.middleCols(kKinPartitionDim, kLatentSDim) = vis.z_s;
    b.values.rightCols(kLatentFDim) = vis.z_f;
    return b;
  }
};

/// Gradient isolation point between estimator and policy. Values pass through
/// unchanged; because the bundle carries no computation graph, downstream
/// policy losses can never reach estimator parameters. Estimator parameters
/// are updated only through estimator_loss.
template <typename S>
LatentBundle<S> blocked_latents(const LatentBundle<S>& bundle) {
  return bundle;
}

// ---------------------------------------------------------------------------
// Estimator loss: KL + MSE(e) + MSE(o_next) + L1(s) + L1(F), all batch means.

struct EstimatorLossTerms {
  double kl = 0.0, mse_e = 0.0, mse_o = 0.0, l1_s = 0.0, l1_f = 0.0;
  double total = 0.0;
};

template <typename S>
struct EstimatorTargets {
  MatX<S> e;       // n x 11
  MatX<S> o_next;  // n x 45
  MatX<S> s;       // n x 187
  MatX<S> f;       // n x 36
};

/// Loss value only (no gradients); shapes must match the outputs.
template <typename S>
EstimatorLossTerms estimator_loss(const KinestheticOutput<S>& kin,
                                  const VisuospatialOutput<S>& vis,
                                  const EstimatorTargets<S>& t,
                                  const EstimatorConfig& cfg) {
  if (t.e.rows() != kin.e_hat.rows() || t.e.cols() != kin.e_hat.cols() ||
      t.o_next.cols() != kin.o_next.cols() || t.s.cols() != vis.s_hat.cols() ||
      t.f.cols() != vis.f_hat.cols())
    throw std::invalid_argument("estimator_loss: target shape mismatch");
  const double n = static_cast<double>(kin.e_hat.rows());
  EstimatorLossTerms out;
  const auto s2 = (S(2) * kin.log_sigma.array()).exp();
  out.kl = 0.5 *
           (kin.mu.array().square() + s2 - S(1) - S(2) * kin.log_sigma.array()).sum() / n;
  out.mse_e = (kin.e_hat - t.e).array().square().mean();
  out.mse_o = (kin.o_next - t.o_next).array().square().mean();
  out.l1_s = (vis.s_hat - t.s).array().abs().mean();
  out.l1_f = (vis.f_hat - t.f).array().abs().mean();
  out.total = cfg.w_kl * out.kl + cfg.w_e * out.mse_e + cfg.w_o * out.mse_o +
              cfg.w_s * out.l1_s + cfg.w_f * out.l1_f;
  return out;
}

/// Loss gradients with respect to the module outputs.
template <typename S>
struct EstimatorLossGrads {
  MatX<S> d_e, d_mu, d_ls, d_o, d_s, d_f;
};

template <typename S>
EstimatorLossGrads<S> estimator_loss_grads(const KinestheticOutput<S>& kin,
                                           const VisuospatialOutput<S>& vis,
                                           const EstimatorTargets<S>& t,
                                           const EstimatorConfig& cfg) {
  const double n = static_cast<double>(kin.e_hat.rows());
  EstimatorLossGrads<S> g;
  g.d_mu = static_cast<S>(cfg.w_kl / n) * kin.mu;
  g.d_ls = static_cast<S>(cfg.w_kl / n) *
           ((S(2) * kin.log_sigma.array()).exp() - S(1)).matrix();
  g.d_e = static_cast<S>(2.0 * cfg.w_e / (n * kin.e_hat.cols())) * (kin.e_hat - t.e);
  g.d_o = static_cast<S>(2.0 * cfg.w_o / (n * kin.o_next.cols())) * (kin.o_next - t.o_next);
  g.d_s = static_cast<S>(cfg.w_s / (n * vis.s_hat.cols())) *
          (vis.s_hat - t.s).array().sign().matrix();
  g.d_f = static_cast<S>(cfg.w_f / (n * vis.f_hat.cols())) *
          (vis.f_hat - t.f).array().sign().matrix();
  return g;
}

// ---------------------------------------------------------------------------
// Full estimator: both branches plus shared input normalization.

template <typename S>
class Estimator {
 public:
  Estimator(const EstimatorConfig& cfg, uint64_t seed)
      : cfg_(cfg), proprio_norm_(kProprioDim) {
    Rng rng(Rng::derive(seed, 0xe57));
    kin_.setup("est/kin", cfg, rng);
    vis_.setup("est/vis", cfg, rng);
    // Dimension contract, asserted at construction.
    if (kKinPartitionDim + kVisPartitionDim != kLatentBundleDim ||
        kExplicitDim + kLatentZDim != kKinPartitionDim)
      throw std::logic_error("estimator: latent partition mismatch");
  }

  const EstimatorConfig& config() const { return cfg_; }
  KinestheticModule<S>& kinesthetic() { return kin_; }
  VisuospatialModule<S>& visuospatial() { return vis_; }
  RunningNorm& proprio_norm() { return proprio_norm_; }
  const RunningNorm& proprio_norm() const { return proprio_norm_; }

  ParamList<S> params() {
    ParamList<S> out;
    kin_.collect(out);
    vis_.collect(out);
    return out;
  }

  /// Applies the running proprio stats to each history slot and casts.
  MatX<S> normalize_history(const Mat& raw) const {
    const Vec mean = proprio_norm_.mean();
    const Vec stddev = proprio_norm_.var().cwiseSqrt();
    MatX<S> out(raw.rows(), raw.cols());
    for (Eigen::Index i = 0; i < raw.rows(); ++i)
      for (int s = 0; s < kHistorySteps; ++s)
        for (int j = 0; j < kProprioDim; ++j) {
          const double v =
              clampd((raw(i, s * kProprioDim + j) - mean[j]) / stddev[j], -10.0, 10.0);
          out(i, s * kProprioDim + j) = static_cast<S>(v);
        }
    return out;
  }

  static S normalize_depth_value(double d) {
    return static_cast<S>((d - kDepthNormCenter) / kDepthNormScale);
  }

  VecX<S> initial_memory() const { return vis_.initial_memory(); }
  int memory_width() const { return vis_.memory_tokens * vis_.token_dim(); }

 private:
  EstimatorConfig cfg_;
  KinestheticModule<S> kin_;
  VisuospatialModule<S> vis_;
  RunningNorm proprio_norm_;
};

}  // namespace kivi
