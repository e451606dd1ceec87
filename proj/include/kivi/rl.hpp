#pragma once

#include "kivi/core.hpp"
#include "kivi/estimator.hpp"
#include "kivi/netcore.hpp"
#include "kivi/obs.hpp"

#include <map>
#include <string>

namespace kivi {

inline constexpr int kActionDim = 12;
inline constexpr int kActorInputDim = kProprioDim + kLatentBundleDim;  // 96

// ---------------------------------------------------------------------------
// Reward suite. Weights are per control step with dt pre-multiplied.

struct RewardWeights {
  double dt = 0.02;
  double tracking_xy = 3.0;
  double tracking_yaw = 1.5;
  double velocity_z = -0.1;
  double ang_vel_xy = -0.05;
  double joint_acc = -2.5e-7;
  double joint_power = -2e-5;
  double joint_torque = -1e-5;
  double power_dist = -2e-7;
  double collision = -1.0;
  double action_rate = -0.01;
  double smoothness = -0.01;
  double tracking_sigma = 0.25;  // phi(x) = exp(-|x|^2 / tracking_sigma)
};

struct RewardInputs {
  Eigen::Vector2d v_xy;      // body-frame planar velocity, m/s
  double v_z = 0.0;          // body-frame vertical velocity
  Eigen::Vector2d omega_xy;  // body-frame roll/pitch rates
  double omega_yaw = 0.0;
  Eigen::Vector2d cmd_xy;
  double cmd_yaw = 0.0;
  Vec action;        // a_t
  Vec prev_action;   // a_{t-1}
  Vec prev_prev_action;
  Vec tau;           // Nm
  Vec qd;            // rad/s
  Vec qdd;           // rad/s^2, finite-differenced across control steps
  int collisions = 0;
};

struct RewardTerms {
  double tracking_xy = 0.0, tracking_yaw = 0.0;
  double velocity_z = 0.0, ang_vel_xy = 0.0, joint_acc = 0.0, joint_power = 0.0;
  double joint_torque = 0.0, power_dist = 0.0, collision = 0.0;
  double action_rate = 0.0, smoothness = 0.0;
  double total = 0.0;

  std::map<std::string, double> as_map() const {
    return {{"tracking_xy", tracking_xy}, {"tracking_yaw", tracking_yaw},
            {"velocity_z", velocity_z},   {"ang_vel_xy", ang_vel_xy},
            {"joint_acc", joint_acc},     {"joint_power", joint_power},
            {"joint_torque", joint_torque}, {"power_dist", power_dist},
            {"collision", collision},     {"action_rate", action_rate},
            {"smoothness", smoothness},   {"total", total}};
  }
};

/// Population variance over the 12 joints of |tau_j * qd_j|.
inline double joint_power_variance(const Vec& tau, const Vec& qd) {
  const Vec p = tau.cwiseProduct(qd).cwiseAbs();
  const double mean = p.mean();
  return (p.array() - mean).square().mean();
}

inline RewardTerms compute_rewards(const RewardInputs& in, const RewardWeights& w) {
  RewardTerms r;
  const double dt = w.dt;
  const double err_xy = (in.v_xy - in.cmd_xy).squaredNorm();
  r.tracking_xy = w.tracking_xy * dt * std::exp(-err_xy / w.tracking_sigma);
  const double err_yaw = sq(in.omega_yaw - in.cmd_yaw);
  r.tracking_yaw = w.tracking_yaw * dt * std::exp(-err_yaw / w.tracking_sigma);
  r.velocity_z = w.velocity_z * dt * sq(in.v_z);
  r.ang_vel_xy = w.ang_vel_xy * dt * in.omega_xy.squaredNorm();
  r.joint_acc = w.joint_acc * dt * in.qdd.squaredNorm();
  r.joint_power = w.joint_power * dt * in.tau.cwiseAbs().dot(in.qd.cwiseAbs());
  r.joint_torque = w.joint_torque * dt * in.tau.squaredNorm();
  r.power_dist = w.power_dist * dt * joint_power_variance(in.tau, in.qd);
  r.collision = w.collision * dt * in.collisions;
  r.action_rate = w.action_rate * dt * (in.action - in.prev_action).squaredNorm();
  r.smoothness = w.smoothness * dt *
                 (in.action - 2.0 * in.prev_action + in.prev_prev_action).squaredNorm();
  r.total = r.tracking_xy + r.tracking_yaw + r.velocity_z + r.ang_vel_xy + r.joint_acc +
            r.joint_power + r.joint_torque + r.power_dist + r.collision + r.action_rate +
            r.smoothness;
  return r;
}

// ---------------------------------------------------------------------------
// Generalized advantage estimation. Arrays are T x N; dones gate both the
// value bootstrap and the advantage recursion.

struct GaeResult {
  Mat advantages;
  Mat returns;
};

inline GaeResult gae(const Mat& rewards, const Mat& values, const Mat& dones,
                     const Vec& bootstrap_value, double gamma, double lambda) {
  const Eigen::Index T = rewards.rows(), N = rewards.cols();
  if (values.rows() != T || values.cols() != N || dones.rows() != T || dones.cols() != N ||
      bootstrap_value.size() != N)
    throw std::invalid_argument("gae: shape mismatch");
  GaeResult out;
  out.advantages.setZero(T, N);
  for (Eigen::Index n = 0; n < N; ++n) {
    double adv = 0.0;
    for (Eigen::Index t = T - 1; t >= 0; --t) {
      const double not_done = 1.0 - dones(t, n);
      const double v_next = (t + 1 < T) ? values(t + 1, n) : bootstrap_value[n];
      const double delta = rewards(t, n) + gamma * v_next * not_done - values(t, n);
      adv = delta + gamma * lambda * not_done * adv;
      out.advantages(t, n) = adv;
    }
  }
  out.returns = out.advantages + values;
  return out;
}

// ---------------------------------------------------------------------------
// Actor and critic networks.

template <typename S>
class ActorPolicy {
 public:
  ActorPolicy(const std::vector<int>& hidden, uint64_t seed, double init_std = 1.0) {
    Rng rng(Rng::derive(seed, 0xac7));
    std::vector<int> widths{kActorInputDim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(kActionDim);
    mlp_.setup("actor/mlp", DenseStackSpec{widths}, rng, 0.01);
    log_std_.setup("actor/log_std", kActionDim, 1);
    log_std_.w.setConstant(static_cast<S>(std::log(init_std)));
  }

  ParamList<S> params() {
    ParamList<S> out;
    mlp_.collect(out);
    out.push_back(&log_std_);
    return out;
  }

  /// x: n x 96 -> action means n x 12.
  MatX<S> mean(const MatX<S>& x, MlpCache<S>* cache = nullptr) const {
    if (x.cols() != kActorInputDim)
      throw std::invalid_argument("actor: input width must be 96");
    return mlp_.forward(x, cache);
  }

  VecX<S> std_dev() const { return log_std_.w.col(0).array().exp(); }
  const VecX<S> log_std() const { return log_std_.w.col(0); }

  /// Deterministic flag returns the mean; otherwise a Gaussian sample using
  /// the provided stream.
  VecX<S> act(const VecX<S>& proprio, const VecX<S>& latents, bool deterministic,
              Rng* rng) const {
    if (proprio.size() != kProprioDim || latents.size() != kLatentBundleDim)
      throw std::invalid_argument("actor: observation/latent width mismatch");
    MatX<S> x(1, kActorInputDim);
    x.row(0).head(kProprioDim) = proprio;
    x.row(0).tail(kLatentBundleDim) = latents;
    VecX<S> a = mean(x).row(0);
    if (!deterministic) {
      const VecX<S> sd = std_dev();
      for (int i = 0; i < kActionDim; ++i)
        a[i] += sd[i] * static_cast<S>(rng->normal());
    }
    return a;
  }

  /// Row-wise log-density of actions under N(mean, diag(std^2)).
  VecX<S> log_prob(const MatX<S>& mean, const MatX<S>& actions) const {
    const VecX<S> ls = log_std_.w.col(0);
    const VecX<S> inv_var = (S(-2) * ls.array()).exp();
    VecX<S> out(mean.rows());
    const S c = static_cast<S>(-0.5 * kActionDim * std::log(2.0 * M_PI)) - ls.sum();
    for (Eigen::Index i = 0; i < mean.rows(); ++i) {
      const auto diff = (actions.row(i) - mean.row(i)).transpose().array();
      out[i] = c - S(0.5) * (diff.square() * inv_var.array()).sum();
    }
    return out;
  }

  S entropy() const {
    return log_std_.w.col(0).sum() +
           static_cast<S>(0.5 * kActionDim * std::log(2.0 * M_PI * std::exp(1.0)));
  }

  Mlp<S>& mlp() { return mlp_; }
  Param<S>& log_std_param() { return log_std_; }

 private:
  Mlp<S> mlp_;
  Param<S> log_std_;
};

template <typename S>
class CriticV {
 public:
  CriticV(const std::vector<int>& hidden, uint64_t seed) {
    Rng rng(Rng::derive(seed, 0xc21));
    std::vector<int> widths{kPrivilegedDim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(1);
    mlp_.setup("critic/mlp", DenseStackSpec{widths}, rng, 1.0);
  }

  ParamList<S> params() {
    ParamList<S> out;
    mlp_.collect(out);
    return out;
  }

  /// x: n x 243 -> values n.
  VecX<S> value(const MatX<S>& x, MlpCache<S>* cache = nullptr) const {
    if (x.cols() != kPrivilegedDim)
      throw std::invalid_argument("critic: input width must be 243");
    return mlp_.forward(x, cache).col(0);
  }

  Mlp<S>& mlp() { return mlp_; }

 private:
  Mlp<S> mlp_;
};

// ---------------------------------------------------------------------------
// PPO

struct PpoConfig {
  double clip = 0.2;
  double gamma = 0.99;
  double lambda = 0.95;
  int epochs = 5;
  int minibatches = 4;
  double lr = 1e-3;
  bool adaptive_lr = true;
  double kl_target = 0.01;
  double entropy_coef = 0.005;
  double max_grad_norm = 1.0;
  double lr_min = 1e-5, lr_max = 1e-2;

  void validate() const {
    if (clip <= 0.0) throw std::invalid_argument("ppo: clip must be > 0");
    if (gamma <= 0.0 || gamma > 1.0) throw std::invalid_argument("ppo: gamma outside (0, 1]");
    if (lambda <= 0.0 || lambda > 1.0) throw std::invalid_argument("ppo: lambda outside (0, 1]");
  }
};

/// Flattened on-policy batch; row k = step k/N, env k%N.
template <typename S>
struct PpoBatch {
  MatX<S> actor_in;   // n x 96, as seen at collection
  MatX<S> critic_in;  // n x 243
  MatX<S> actions;    // n x 12
  VecX<S> logp_old;
  VecX<S> values_old;
  VecX<S> advantages;  // normalized inside ppo_update
  VecX<S> returns;

  Eigen::Index size() const { return actor_in.rows(); }
};

struct PpoMetrics {
  double actor_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  bool aborted = false;
};

/// One PPO update: clipped surrogate on the actor, clipped value regression on
/// the critic, entropy bonus, global-norm gradient clipping, optional
/// KL-adaptive learning rate. Aborts without touching parameters if a loss
/// turns non-finite.
template <typename S>
PpoMetrics ppo_update(PpoBatch<S>& batch, ActorPolicy<S>& actor, CriticV<S>& critic,
                      Adam<S>& opt, PpoConfig& cfg, Rng& rng) {
  cfg.validate();
  const Eigen::Index n = batch.size();
  PpoMetrics metrics;

  // Advantage normalization over the whole batch.
  {
    const S mean = batch.advantages.mean();
    const S stddev = std::sqrt(
        (batch.advantages.array() - mean).square().sum() / static_cast<S>(n) + S(1e-8));
    batch.advantages = (batch.advantages.array() - mean) / stddev;
  }

  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  const Eigen::Index mb_size = (n + cfg.minibatches - 1) / cfg.minibatches;

  double kl_sum = 0.0, clip_sum = 0.0, aloss_sum = 0.0, vloss_sum = 0.0;
  int updates = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with the caller's stream keeps runs reproducible.
    for (Eigen::Index i = n - 1; i > 0; --i) {
      const Eigen::Index j = rng.uniform_int(0, static_cast<int>(i));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    for (Eigen::Index start = 0; start < n; start += mb_size) {
      const Eigen::Index count = std::min(mb_size, n - start);
      MatX<S> a_in(count, batch.actor_in.cols());
      MatX<S> c_in(count, batch.critic_in.cols());
      MatX<S> acts(count, kActionDim);
      VecX<S> logp_old(count), adv(count), ret(count), v_old(count);
      for (Eigen::Index i = 0; i < count; ++i) {
        const Eigen::Index k = order[static_cast<size_t>(start + i)];
        a_in.row(i) = batch.actor_in.row(k);
        c_in.row(i) = batch.critic_in.row(k);
        acts.row(i) = batch.actions.row(k);
        logp_old[i] = batch.logp_old[k];
        adv[i] = batch.advantages[k];
        ret[i] = batch.returns[k];
        v_old[i] = batch.values_old[k];
      }

      MlpCache<S> actor_cache, critic_cache;
      MatX<S> mean = actor.mean(a_in, &actor_cache);
      VecX<S> logp = actor.log_prob(mean, acts);
      VecX<S> values = critic.value(c_in, &critic_cache);

      VecX<S> ratio = (logp - logp_old).array().exp();
      double clip_count = 0.0;
      double actor_loss = 0.0;
      // d(loss)/d(logp), assembled per the min() branch actually taken.
      VecX<S> dlogp(count);
      for (Eigen::Index i = 0; i < count; ++i) {
        const S r = ratio[i];
        const S rc = clampd(r, 1.0 - cfg.clip, 1.0 + cfg.clip);
        const S s1 = r * adv[i];
        const S s2 = rc * adv[i];
        actor_loss -= std::min(s1, s2) / static_cast<S>(count);
        const bool use_unclipped = s1 <= s2;
        const bool inside = r >= S(1.0 - cfg.clip) && r <= S(1.0 + cfg.clip);
        const S dr = (use_unclipped || inside) ? -adv[i] / static_cast<S>(count) : S(0);
        dlogp[i] = dr * r;  // d ratio / d logp = ratio
        if (r < S(1.0 - cfg.clip) || r > S(1.0 + cfg.clip)) clip_count += 1.0;
      }
      const double entropy = static_cast<double>(actor.entropy());
      const double approx_kl = static_cast<double>((logp_old - logp).mean());

      VecX<S> verr = values - ret;
      VecX<S> vclip_err(count);
      double value_loss = 0.0;
      VecX<S> dvalues(count);
      for (Eigen::Index i = 0; i < count; ++i) {
        const S vclipped = v_old[i] + clampd(values[i] - v_old[i], -cfg.clip, cfg.clip);
        const S e1 = verr[i];
        const S e2 = vclipped - ret[i];
        if (e1 * e1 >= e2 * e2) {
          value_loss += 0.5 * e1 * e1 / static_cast<S>(count);
          dvalues[i] = e1 / static_cast<S>(count);
        } else {
          value_loss += 0.5 * e2 * e2 / static_cast<S>(count);
          const bool inside = std::abs(values[i] - v_old[i]) <= S(cfg.clip);
          dvalues[i] = inside ? e2 / static_cast<S>(count) : S(0);
        }
      }

      const double total =
          actor_loss + value_loss - cfg.entropy_coef * entropy;
      if (!std::isfinite(total)) {
        metrics.aborted = true;
        opt.zero_grad();
        metrics.lr = opt.lr();
        return metrics;
      }

      // Backward. d logp/d mean = (a - mean)/sigma^2; d logp/d log_std per
      // dim = (a - mean)^2/sigma^2 - 1.
      opt.zero_grad();
      const VecX<S> inv_var = (S(-2) * actor.log_std()).array().exp();
      MatX<S> dmean(count, kActionDim);
      VecX<S> dlogstd = VecX<S>::Zero(kActionDim);
      for (Eigen::Index i = 0; i < count; ++i) {
        const auto diff = (acts.row(i) - mean.row(i)).transpose().array();
        dmean.row(i) = (dlogp[i] * diff * inv_var.array()).matrix().transpose();
        dlogstd.array() += dlogp[i] * (diff.square() * inv_var.array() - S(1));
      }
      dlogstd.array() -= static_cast<S>(cfg.entropy_coef);  // entropy bonus
      actor.mlp().backward(dmean, actor_cache);
      actor.log_std_param().g.col(0) += dlogstd;

      MatX<S> dv(count, 1);
      dv.col(0) = dvalues;
      critic.mlp().backward(dv, critic_cache);

      metrics.grad_norm = opt.clip_grad_norm(cfg.max_grad_norm);
      opt.step();

      kl_sum += approx_kl;
      clip_sum += clip_count / static_cast<double>(count);
      aloss_sum += actor_loss;
      vloss_sum += value_loss;
      metrics.entropy = entropy;
      ++updates;

      if (cfg.adaptive_lr) {
        double lr = opt.lr();
        if (approx_kl > 2.0 * cfg.kl_target) lr = std::max(cfg.lr_min, lr / 1.5);
        else if (approx_kl >= 0.0 && approx_kl < cfg.kl_target / 2.0)
          lr = std::min(cfg.lr_max, lr * 1.5);
        opt.set_lr(lr);
      }
    }
  }

  metrics.actor_loss = aloss_sum / updates;
  metrics.value_loss = vloss_sum / updates;
  metrics.approx_kl = kl_sum / updates;
  metrics.clip_fraction = clip_sum / updates;
  metrics.lr = opt.lr();
  cfg.lr = opt.lr();
  return metrics;
}

}  // namespace kivi
