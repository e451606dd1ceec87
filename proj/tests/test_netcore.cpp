#include "kivi/netcore.hpp"

#include <gtest/gtest.h>

#include <sstream>

#include "oracle_utils.hpp"

using namespace kivi;
using kivi::oracles::check_input_grads;
using kivi::oracles::check_param_grads;
using kivi::oracles::random_mat;
using kivi::oracles::snapshot_grads;

namespace {

/// Fixed random projection turning a matrix output into a scalar loss.
struct ScalarProbe {
  Mat weights;
  explicit ScalarProbe(Rng& rng, int rows, int cols) : weights(random_mat(rng, rows, cols)) {}
  double loss(const Mat& y) const { return (y.array() * weights.array()).sum(); }
  Mat grad() const { return weights; }
};

void zero_grads(const ParamList<double>& params) {
  for (auto* p : params) p->g.setZero();
}

}  // namespace

TEST(Dense, IdentityAndBiasCases) {
  Dense<double> layer;
  Rng rng(1);
  layer.setup("d", 4, 4, Act::Identity, rng, 1.0);
  layer.W.w.setIdentity();
  layer.b.w.setZero();
  const Mat x = random_mat(rng, 3, 4);
  EXPECT_LT((layer.forward(x, nullptr) - x).cwiseAbs().maxCoeff(), 1e-15);

  Dense<double> elu_layer;
  elu_layer.setup("e", 4, 2, Act::Elu, rng, 1.0);
  elu_layer.W.w.setZero();
  elu_layer.b.w << 1.0, -1.0;
  const Mat y = elu_layer.forward(x, nullptr);
  for (int i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(y(i, 0), 1.0);
    EXPECT_DOUBLE_EQ(y(i, 1), std::exp(-1.0) - 1.0);
  }
  EXPECT_THROW(elu_layer.forward(random_mat(rng, 2, 3), nullptr), std::invalid_argument);
}

TEST(Dense, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  Mlp<double> mlp;
  mlp.setup("mlp", DenseStackSpec{{5, 7, 3}}, rng);
  ScalarProbe probe(rng, 4, 3);
  Mat x = random_mat(rng, 4, 5);

  ParamList<double> params;
  mlp.collect(params);
  auto loss = [&]() { return probe.loss(mlp.forward(x, nullptr)); };

  zero_grads(params);
  MlpCache<double> cache;
  mlp.forward(x, &cache);
  const Mat dx = mlp.backward(probe.grad(), cache);

  const auto report = check_param_grads(params, snapshot_grads(params), loss);
  EXPECT_LT(report.max_rel_err, 1e-6) << report.worst_param;
  EXPECT_LT(check_input_grads(x, dx, loss), 1e-6);
}

TEST(DenseStackSpec, Validation) {
  EXPECT_THROW(DenseStackSpec{{5}}.validate(), std::invalid_argument);
  EXPECT_THROW((DenseStackSpec{{5, 0, 3}}).validate(), std::invalid_argument);
}

TEST(Conv, TokenCountAndZeroWeights) {
  Rng rng(3);
  ConvStackSpec spec;  // 2x64x64 -> 16 tokens
  ConvStack<double> conv;
  conv.setup("conv", spec, rng);
  for (auto& l : conv.layers) {
    l.W.w.setZero();
    l.b.w.setZero();
  }
  const Mat x = random_mat(rng, 2, 2 * 64 * 64);
  const Mat tokens = conv.forward(x, nullptr);
  EXPECT_EQ(tokens.rows(), 2 * 16);
  EXPECT_EQ(tokens.cols(), spec.token_dim());
  EXPECT_EQ(tokens.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Conv, SpecValidationRequires4x4Output) {
  ConvStackSpec bad;
  bad.layers.pop_back();  // 8x8 map
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Conv, GradientsMatchFiniteDifferences) {
  Rng rng(19);
  ConvStackSpec spec;
  spec.layers = {{2, 3, 2}, {3, 3, 2}, {3, 3, 2}, {4, 3, 2}};
  ConvStack<double> conv;
  conv.setup("conv", spec, rng);
  Mat x = random_mat(rng, 1, 2 * 64 * 64, 0.5);
  ScalarProbe probe(rng, 16, 4);

  ParamList<double> params;
  conv.collect(params);
  auto loss = [&]() { return probe.loss(conv.forward(x, nullptr)); };

  zero_grads(params);
  ConvCache<double> cache;
  conv.forward(x, &cache);
  conv.backward(probe.grad(), cache);

  const auto report = check_param_grads(params, snapshot_grads(params), loss);
  EXPECT_LT(report.max_rel_err, 1e-5) << report.worst_param;
}

TEST(Conv, ReceptiveFieldLocalizesPerturbations) {
  Rng rng(5);
  ConvStack<double> conv;
  conv.setup("conv", ConvStackSpec{}, rng);
  Mat a = random_mat(rng, 1, 2 * 64 * 64, 0.5);
  Mat b = a;
  // Perturb input rows 40..47 in both channels.
  for (int ch = 0; ch < 2; ++ch)
    for (int r = 40; r < 48; ++r)
      for (int c = 0; c < 64; ++c) b(0, ch * 64 * 64 + r * 64 + c) += 1.0;

  const Mat ta = conv.forward(a, nullptr);
  const Mat tb = conv.forward(b, nullptr);
  // Four stride-2 k3 layers: token row i sees input rows [16i-15, 16i+15].
  for (int token = 0; token < 16; ++token) {
    const int tr = token / 4;
    const bool intersects = (16 * tr - 15 <= 47) && (16 * tr + 15 >= 40);
    const double diff = (ta.row(token) - tb.row(token)).cwiseAbs().maxCoeff();
    if (intersects)
      EXPECT_GT(diff, 0.0) << "token " << token;
    else
      EXPECT_EQ(diff, 0.0) << "token " << token;
  }
}

TEST(Attention, SingleTokenIdentityValuePath) {
  MultiHeadAttention<double> mha;
  Rng rng(2);
  mha.setup("mha", 4, 1, rng);
  mha.Wqkv.w.setZero();
  mha.Wqkv.w.block(8, 0, 4, 4).setIdentity();  // V = x, Q = K = 0
  mha.bqkv.w.setZero();
  mha.Wo.w.setIdentity();
  mha.bo.w.setZero();
  const Mat token = random_mat(rng, 1, 4);
  const Mat y = mha.forward(token, 1, 1, nullptr);
  EXPECT_LT((y - token).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Attention, RowsSumToOne) {
  Rng rng(11);
  MultiHeadAttention<double> mha;
  mha.setup("mha", 8, 2, rng);
  const Mat x = random_mat(rng, 2 * 5, 8);
  MhaCache<double> cache;
  mha.forward(x, 2, 5, &cache);
  for (const auto& A : cache.attn) {
    ASSERT_EQ(A.rows(), 5);
    for (int i = 0; i < A.rows(); ++i) EXPECT_NEAR(A.row(i).sum(), 1.0, 1e-6);
  }
}

TEST(Attention, PermutationEquivariantWithoutPositionalOffsets) {
  Rng rng(13);
  AttentionSpec spec{8, 2, 2, 16};
  MemTransformer<double> xf;
  xf.setup("xf", spec, 3, rng);
  const Mat tokens = random_mat(rng, 5, 8);
  const Mat memory = random_mat(rng, 3, 8);
  const auto [out, mem_out] = xf.forward(tokens, memory);

  std::vector<int> perm{3, 0, 4, 1, 2};
  Mat tokens_p(5, 8);
  for (int i = 0; i < 5; ++i) tokens_p.row(i) = tokens.row(perm[i]);
  const auto [out_p, mem_out_p] = xf.forward(tokens_p, memory);

  for (int i = 0; i < 5; ++i)
    EXPECT_LT((out_p.row(i) - out.row(perm[i])).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((mem_out_p - mem_out).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Attention, BatchOrderInvariance) {
  Rng rng(17);
  AttentionSpec spec{8, 2, 2, 16};
  MemTransformer<double> xf;
  xf.setup("xf", spec, 2, rng);
  const int T = 6;
  Mat batch = random_mat(rng, 3 * T, 8);
  const Mat out = xf.forward_all(batch, 3, T, nullptr);

  Mat swapped(3 * T, 8);
  swapped.middleRows(0, T) = batch.middleRows(2 * T, T);
  swapped.middleRows(T, T) = batch.middleRows(T, T);
  swapped.middleRows(2 * T, T) = batch.middleRows(0, T);
  const Mat out_s = xf.forward_all(swapped, 3, T, nullptr);

  EXPECT_LT((out_s.middleRows(0, T) - out.middleRows(2 * T, T)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((out_s.middleRows(2 * T, T) - out.middleRows(0, T)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Attention, GradientsMatchFiniteDifferences) {
  Rng rng(23);
  AttentionSpec spec{8, 2, 2, 16};
  MemTransformer<double> xf;
  xf.setup("xf", spec, 2, rng);
  const int T = 6, B = 2;
  Mat x = random_mat(rng, B * T, 8, 0.5);
  ScalarProbe probe(rng, B * T, 8);

  ParamList<double> params;
  xf.collect(params);
  auto loss = [&]() { return probe.loss(xf.forward_all(x, B, T, nullptr)); };

  zero_grads(params);
  MemTransformerCache<double> cache;
  xf.forward_all(x, B, T, &cache);
  const Mat dx = xf.backward_all(probe.grad(), cache);

  const auto report = check_param_grads(params, snapshot_grads(params), loss);
  EXPECT_LT(report.max_rel_err, 1e-5) << report.worst_param;
  EXPECT_LT(check_input_grads(x, dx, loss), 1e-5);
}

TEST(DiagGaussianOps, ReparameterizeCases) {
  DiagGaussian<double> g;
  g.mu = Vec::Constant(4, 1.5);
  g.log_sigma = Vec::Constant(4, 0.3);

  EXPECT_EQ(reparameterize(g, Vec(Vec::Zero(4))), g.mu);

  g.log_sigma.setConstant(kLogSigmaMin);  // sigma -> 0 limit under the clamp
  const Vec z = reparameterize(g, Vec(Vec::Ones(4)));
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(z[i], g.mu[i], 3e-3);

  Vec bad = Vec::Zero(3);
  EXPECT_THROW(reparameterize(g, bad), std::invalid_argument);
}

TEST(DiagGaussianOps, ReparameterizeMonteCarloMean) {
  DiagGaussian<double> g;
  Rng rng(31);
  g.mu = random_mat(rng, 6, 1);
  g.log_sigma = Vec::Constant(6, -0.5);
  const int n = 100000;
  Vec mean = Vec::Zero(6);
  Vec eps(6);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 6; ++j) eps[j] = rng.normal();
    mean += reparameterize(g, eps);
  }
  mean /= n;
  const double tol = 3.0 * std::exp(-0.5) / std::sqrt(double(n));
  for (int j = 0; j < 6; ++j) EXPECT_NEAR(mean[j], g.mu[j], tol);
}

TEST(DiagGaussianOps, KlClosedFormCases) {
  DiagGaussian<double> g;
  g.mu = Vec::Zero(5);
  g.log_sigma = Vec::Zero(5);
  EXPECT_DOUBLE_EQ(kl_to_standard_normal(g), 0.0);

  g.mu = Vec::Constant(1, 1.0);
  g.log_sigma = Vec::Zero(1);
  EXPECT_DOUBLE_EQ(kl_to_standard_normal(g), 0.5);

  // Nonnegative on random gaussians, zero only at (0, 1).
  Rng rng(37);
  for (int trial = 0; trial < 200; ++trial) {
    DiagGaussian<double> r;
    r.mu = random_mat(rng, 4, 1);
    r.log_sigma = random_mat(rng, 4, 1, 0.5);
    EXPECT_GE(kl_to_standard_normal(r), 0.0);
  }
}

TEST(DiagGaussianOps, KlMatchesMonteCarlo) {
  Rng rng(41);
  for (int trial = 0; trial < 3; ++trial) {
    DiagGaussian<double> g;
    g.mu = random_mat(rng, 4, 1);
    g.mu.array() += 0.5;  // keep KL away from zero
    g.log_sigma = random_mat(rng, 4, 1, 0.3);
    const double closed = kl_to_standard_normal(g);

    const int n = 200000;
    double acc = 0.0;
    const Vec sigma = g.sigma();
    for (int i = 0; i < n; ++i) {
      double lq = 0.0, lp = 0.0;
      for (int j = 0; j < 4; ++j) {
        const double z = g.mu[j] + sigma[j] * rng.normal();
        lq += -0.5 * sq((z - g.mu[j]) / sigma[j]) - g.log_sigma[j];
        lp += -0.5 * sq(z);
      }
      acc += lq - lp;
    }
    const double mc = acc / n;
    EXPECT_NEAR(mc, closed, 0.02 * std::abs(closed));
  }
}

TEST(Adam, ZeroGradLeavesParamsBitUnchanged) {
  Rng rng(43);
  Mlp<float> mlp;
  mlp.setup("m", DenseStackSpec{{4, 8, 2}}, rng);
  ParamList<float> params;
  mlp.collect(params);
  std::vector<MatX<float>> before;
  for (auto* p : params) before.push_back(p->w);
  Adam<float> opt(params, 1e-3);
  opt.zero_grad();
  opt.step();
  for (size_t i = 0; i < params.size(); ++i)
    EXPECT_EQ(params[i]->w, before[i]) << params[i]->name;
}

TEST(Adam, GlobalNormClipScalesGradients) {
  Rng rng(47);
  Mlp<double> mlp;
  mlp.setup("m", DenseStackSpec{{3, 3}}, rng);
  ParamList<double> params;
  mlp.collect(params);
  Adam<double> opt(params, 1e-3);
  for (auto* p : params) p->g.setConstant(2.0);
  const double norm = opt.clip_grad_norm(1.0);
  EXPECT_GT(norm, 1.0);
  EXPECT_NEAR(opt.grad_norm(), 1.0, 1e-12);
}

TEST(Params, SerializationRoundTripBitExact) {
  Rng rng(53);
  Mlp<float> mlp;
  mlp.setup("m", DenseStackSpec{{6, 12, 4}}, rng);
  ParamList<float> params;
  mlp.collect(params);

  std::stringstream ss;
  write_param_data(ss, params);
  const std::string first = ss.str();

  Mlp<float> other;
  Rng rng2(99);
  other.setup("m", DenseStackSpec{{6, 12, 4}}, rng2);
  ParamList<float> params2;
  other.collect(params2);
  std::stringstream in(first);
  read_param_data(in, params2);

  for (size_t i = 0; i < params.size(); ++i)
    EXPECT_EQ(params[i]->w, params2[i]->w);

  std::stringstream ss2;
  write_param_data(ss2, params2);
  EXPECT_EQ(first, ss2.str());
}

TEST(Init, OrthogonalColumnsAreOrthonormal) {
  Rng rng(59);
  MatX<double> W(16, 8);
  init_orthogonal(W, rng, 1.0);
  const Mat gram = W.transpose() * W;
  EXPECT_LT((gram - Mat::Identity(8, 8)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(RunningNormStats, MeanVarAndClip) {
  RunningNorm norm(2);
  Mat rows(4, 2);
  rows << 1, 10, 2, 10, 3, 10, 4, 10;
  norm.update(rows);
  EXPECT_NEAR(norm.mean()[0], 2.5, 1e-12);
  EXPECT_NEAR(norm.var()[0], 1.25, 1e-12);
  EXPECT_NEAR(norm.var()[1], 1e-8, 1e-15);  // floored variance
  Vec x(2);
  x << 2.5, 10.0;
  EXPECT_NEAR(norm.normalize(x)[0], 0.0, 1e-12);
}
