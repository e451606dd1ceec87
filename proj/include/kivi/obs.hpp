#pragma once

#include "kivi/core.hpp"
#include "kivi/simcore.hpp"

#include <deque>
#include <vector>

namespace kivi {

inline constexpr int kProprioDim = 45;     // [omega 3, g 3, cmd 3, q 12, qd 12, a_prev 12]
inline constexpr int kPrivilegedDim = 243; // [v 3, proprio 45, contact 8, scan 187]
inline constexpr int kHistorySteps = 10;   // most recent observations, current included
inline constexpr int kHistoryDim = kHistorySteps * kProprioDim;
inline constexpr int kDepthFrames = 2;     // current + previous, stacked as channels

/// Additive uniform noise half-widths per proprio channel group.
struct NoiseScales {
  double ang_vel = 0.2;    // rad/s
  double gravity = 0.05;
  double joint_pos = 0.01; // rad
  double joint_vel = 1.5;  // rad/s
};

/// 45-entry proprioceptive observation, in the fixed order
/// [omega, gravity direction, command, joint pos, joint vel, previous action].
/// Pass rng = nullptr for the noiseless variant (supervision targets).
inline Vec assemble_proprio(const RobotState& state, const Vec3& command,
                            const NoiseScales& noise, Rng* rng) {
  Vec o(kProprioDim);
  const Vec3 g_body = state.orient.toRotationMatrix().transpose() * Vec3(0.0, 0.0, -1.0);
  o.segment<3>(0) = state.ang_vel;
  o.segment<3>(3) = g_body;
  o.segment<3>(6) = command;
  o.segment<12>(9) = state.q;
  o.segment<12>(21) = state.qd;
  o.segment<12>(33) = state.prev_action;
  if (rng) {
    for (int i = 0; i < 3; ++i) o[i] += rng->uniform(-noise.ang_vel, noise.ang_vel);
    for (int i = 3; i < 6; ++i) o[i] += rng->uniform(-noise.gravity, noise.gravity);
    for (int i = 9; i < 21; ++i) o[i] += rng->uniform(-noise.joint_pos, noise.joint_pos);
    for (int i = 21; i < 33; ++i) o[i] += rng->uniform(-noise.joint_vel, noise.joint_vel);
  }
  return o;
}

/// 243-entry privileged observation
/// [body-frame base velocity, proprio, contact forces, height scan].
inline Vec assemble_privileged(const RobotState& state, const Vec& proprio,
                               const ContactState& contacts, const HeightField& field) {
  Vec s(kPrivilegedDim);
  const Eigen::Matrix3d R = state.orient.toRotationMatrix();
  const Vec3 v_body = R.transpose() * state.lin_vel;
  const double yaw = std::atan2(R(1, 0), R(0, 0));
  s.segment<3>(0) = v_body;
  s.segment<kProprioDim>(3) = proprio;
  s.segment<8>(3 + kProprioDim) = contacts.as_vector();
  s.segment<kScanSize>(3 + kProprioDim + 8) =
      sample_height_scan(field, state.pos.x(), state.pos.y(), state.pos.z(), yaw);
  return s;
}

// ---------------------------------------------------------------------------
// Domain randomization

struct Range {
  double lo = 0.0, hi = 0.0;
  double sample(Rng& rng) const { return rng.uniform(lo, hi); }
};

struct RandConfig {
  Range payload_kg{-1.0, 3.0};
  Range kp_factor{0.9, 1.1};
  Range kd_factor{0.9, 1.1};
  Range com_shift_mm{-50.0, 50.0};
  Range static_friction{0.5, 1.25};
  Range dynamic_friction{0.3, 1.1};
  Range init_joint_factor{0.5, 1.5};
  Range delay_ms{0.0, 20.0};
  Range camera_shake_deg{-2.0, 2.0};
  Range occlusion_ratio{0.0, 0.4};

  /// Ranges collapsed onto the unrandomized nominals.
  static RandConfig nominal() {
    RandConfig c;
    c.payload_kg = {0.0, 0.0};
    c.kp_factor = {1.0, 1.0};
    c.kd_factor = {1.0, 1.0};
    c.com_shift_mm = {0.0, 0.0};
    c.static_friction = {1.0, 1.0};
    c.dynamic_friction = {0.7, 0.7};
    c.init_joint_factor = {1.0, 1.0};
    c.delay_ms = {0.0, 0.0};
    c.camera_shake_deg = {0.0, 0.0};
    c.occlusion_ratio = {0.0, 0.0};
    return c;
  }
};

/// One uniform draw per parameter; called at every episode reset.
inline SampledDynamics sample_randomization(const RandConfig& cfg, Rng& rng) {
  SampledDynamics d;
  d.payload_kg = cfg.payload_kg.sample(rng);
  d.kp_factor = cfg.kp_factor.sample(rng);
  d.kd_factor = cfg.kd_factor.sample(rng);
  for (int i = 0; i < 3; ++i) d.com_shift[i] = cfg.com_shift_mm.sample(rng) * 1e-3;
  d.static_friction = cfg.static_friction.sample(rng);
  d.dynamic_friction = cfg.dynamic_friction.sample(rng);
  for (int j = 0; j < kNumJoints; ++j)
    d.init_joint_factor[j] = cfg.init_joint_factor.sample(rng);
  d.delay_ms = cfg.delay_ms.sample(rng);
  for (int i = 0; i < 3; ++i)
    d.camera_shake_rad[i] = cfg.camera_shake_deg.sample(rng) * M_PI / 180.0;
  d.occlusion_ratio = cfg.occlusion_ratio.sample(rng);
  return d;
}

// ---------------------------------------------------------------------------
// Camera disturbances

/// Replaces one axis-aligned rectangle covering `ratio` of the frame area
/// with max-range reads. The realized pixel count is within one row/column of
/// round(ratio * pixels).
inline void apply_occlusion(DepthFrame& frame, double ratio, Rng& rng) {
  if (ratio < 0.0 || ratio > 1.0) throw std::invalid_argument("occlusion ratio outside [0, 1]");
  if (ratio <= 0.0) return;
  if (ratio >= 1.0) {
    frame.d.setConstant(static_cast<float>(kDepthMax));
    return;
  }
  const double area = ratio * kDepthSize;
  const double aspect = rng.uniform(0.5, 2.0);
  int w = static_cast<int>(std::lround(std::sqrt(area * aspect)));
  w = std::clamp(w, 1, kDepthWidth);
  int h = static_cast<int>(std::lround(area / w));
  h = std::clamp(h, 1, kDepthHeight);
  const int c0 = rng.uniform_int(0, kDepthWidth - w);
  const int r0 = rng.uniform_int(0, kDepthHeight - h);
  for (int r = r0; r < r0 + h; ++r)
    for (int c = c0; c < c0 + w; ++c)
      frame.at(r, c) = static_cast<float>(kDepthMax);
}

/// Per-pixel additive Gaussian noise, re-clipped to the valid depth range.
inline void apply_gaussian_noise(DepthFrame& frame, double sigma, Rng& rng) {
  if (sigma < 0.0) throw std::invalid_argument("noise sigma must be >= 0");
  if (sigma == 0.0) return;
  for (int i = 0; i < kDepthSize; ++i) {
    frame.d[i] = static_cast<float>(
        clampd(frame.d[i] + sigma * rng.normal(), kDepthMin, kDepthMax));
  }
}

/// Random camera rotation offset with each axis within +-amplitude_rad,
/// applied to the mount pose before raycasting.
inline Vec3 sample_camera_shake(double amplitude_rad, Rng& rng) {
  return Vec3(rng.uniform(-amplitude_rad, amplitude_rad),
              rng.uniform(-amplitude_rad, amplitude_rad),
              rng.uniform(-amplitude_rad, amplitude_rad));
}

// ---------------------------------------------------------------------------
// History and actuation delay

/// Ring of the last `kHistorySteps` proprio observations (current included)
/// and the last two depth frames. Zero-filled until enough steps elapse;
/// cleared on episode reset.
class HistoryBuffer {
 public:
  HistoryBuffer() { reset(); }

  void reset() {
    history_.assign(kHistorySteps, Vec::Zero(kProprioDim));
    depth_current_ = DepthFrame();
    depth_previous_ = DepthFrame();
    depth_current_.d.setZero();
    depth_previous_.d.setZero();
    has_depth_ = false;
  }

  void push_proprio(const Vec& o) {
    history_.pop_front();
    history_.push_back(o);
  }

  void push_depth(const DepthFrame& f) {
    depth_previous_ = has_depth_ ? depth_current_ : f;
    depth_current_ = f;
    has_depth_ = true;
  }

  /// Flattened 10x45 history, oldest first.
  Vec flat_history() const {
    Vec h(kHistoryDim);
    for (int i = 0; i < kHistorySteps; ++i)
      h.segment<kProprioDim>(i * kProprioDim) = history_[static_cast<size_t>(i)];
    return h;
  }

  const DepthFrame& depth_current() const { return depth_current_; }
  const DepthFrame& depth_previous() const { return depth_previous_; }

 private:
  std::deque<Vec> history_;
  DepthFrame depth_current_, depth_previous_;
  bool has_depth_ = false;
};

/// Joint-target queue realizing the sampled system delay: a target reaches
/// the PD loop ceil(delay / physics_dt) physics steps after it was issued.
class DelayQueue {
 public:
  void reset(const Vec& initial_target, double delay_ms, double physics_dt) {
    lag_ = static_cast<int>(std::ceil(delay_ms * 1e-3 / physics_dt - 1e-12));
    queue_.assign(static_cast<size_t>(lag_) + 1, initial_target);
  }

  /// Pushes the newest target and returns the delayed one.
  const Vec& advance(const Vec& target) {
    queue_.push_back(target);
    queue_.pop_front();
    return queue_.front();
  }

  int lag_steps() const { return lag_; }

 private:
  std::deque<Vec> queue_;
  int lag_ = 0;
};

// ---------------------------------------------------------------------------
// Flat serialization for logs; layouts above are fixed.

inline void write_vec(std::ostream& os, const Vec& v) {
  write_pod<int32_t>(os, static_cast<int32_t>(v.size()));
  write_bytes(os, v.data(), static_cast<size_t>(v.size()) * sizeof(double));
}

inline Vec read_vec(std::istream& is) {
  const int32_t n = read_pod<int32_t>(is);
  if (n < 0 || n > (1 << 24)) throw std::runtime_error("bad vector size");
  Vec v(n);
  read_bytes(is, v.data(), static_cast<size_t>(n) * sizeof(double));
  return v;
}

}  // namespace kivi
