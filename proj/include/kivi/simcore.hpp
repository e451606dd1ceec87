#pragma once

#include "kivi/core.hpp"
#include "kivi/terrain.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <string>

namespace kivi {

struct PdGains {
  double kp = 30.0;  // Nm/rad
  double kd = 1.0;   // Nms/rad
};

struct SimConfig {
  double physics_dt = 0.005;   // s
  int control_decimation = 4;  // policy dt = 0.02 s
  int depth_decimation = 5;    // depth refresh every 5 policy steps (10 Hz)
  double torque_limit = 30.0;  // Nm
  PdGains gains;
  Vec theta_default = default_joint_posture();
  double action_scale = 0.25;  // rad per unit action

  static Vec default_joint_posture() {
    Vec q(kNumJoints);
    for (int l = 0; l < kNumFeet; ++l) {
      q[3 * l + 0] = 0.0;   // abduction
      q[3 * l + 1] = 0.8;   // hip pitch
      q[3 * l + 2] = -1.6;  // knee pitch
    }
    return q;
  }

  double control_dt() const { return physics_dt * control_decimation; }
};

// Decided rigid-body and leg constants (Lite3-class scale).
namespace robot {
inline constexpr double kBaseMass = 12.0;  // kg
inline const Vec3 kBaseInertia{0.15, 0.35, 0.40};
inline constexpr double kThighLen = 0.25;
inline constexpr double kShankLen = 0.25;
inline constexpr double kJointInertia = 0.06;   // kg m^2, reflected per joint
inline constexpr double kJointFriction = 0.1;   // Nm s/rad
inline constexpr double kJointVelLimit = 30.0;  // rad/s
inline constexpr double kGravity = 9.81;

// Contact law constants; friction coefficients come from SampledDynamics.
inline constexpr double kContactStiffness = 5000.0;  // N/m
inline constexpr double kContactDamping = 200.0;     // Ns/m
inline constexpr double kTangentStiffness = 2500.0;  // N/m
inline constexpr double kTangentDamping = 50.0;      // Ns/m

inline constexpr double kBaseCollisionRadius = 0.12;
inline constexpr double kKneeCollisionRadius = 0.04;

// Hip offsets in the base frame, feet ordered FL, FR, RL, RR.
inline const std::array<Vec3, 4> kHipOffsets = {
    Vec3{0.17, 0.12, 0.0}, Vec3{0.17, -0.12, 0.0},
    Vec3{-0.17, 0.12, 0.0}, Vec3{-0.17, -0.12, 0.0}};

// Per-joint limits (abduction, hip pitch, knee pitch).
inline const std::array<double, 3> kJointLower = {-0.8, -1.0, -2.6};
inline const std::array<double, 3> kJointUpper = {0.8, 2.6, -0.4};
}  // namespace robot

struct RobotState {
  Vec3 pos = Vec3::Zero();          // world
  Quat orient = Quat::Identity();   // body-to-world
  Vec3 lin_vel = Vec3::Zero();      // world frame
  Vec3 ang_vel = Vec3::Zero();      // body frame
  Vec q = SimConfig::default_joint_posture();
  Vec qd = Vec::Zero(kNumJoints);
  Vec prev_action = Vec::Zero(kNumJoints);
  Vec prev_prev_action = Vec::Zero(kNumJoints);

  bool finite() const {
    return pos.allFinite() && orient.coeffs().allFinite() && lin_vel.allFinite() &&
           ang_vel.allFinite() && q.allFinite() && qd.allFinite();
  }
};

struct FootContact {
  bool in_contact = false;
  double f_xy = 0.0;  // planar force magnitude, N
  double f_z = 0.0;   // normal force, N
};

struct ContactState {
  std::array<FootContact, kNumFeet> feet;

  /// [f_xy, f_z] per foot, feet in FL, FR, RL, RR order (8 entries).
  Vec as_vector() const {
    Vec v(2 * kNumFeet);
    for (int i = 0; i < kNumFeet; ++i) {
      v[2 * i] = feet[i].f_xy;
      v[2 * i + 1] = feet[i].f_z;
    }
    return v;
  }
};

/// Episode-wise physical parameters; defaults are the unrandomized nominals.
struct SampledDynamics {
  double payload_kg = 0.0;
  double kp_factor = 1.0;
  double kd_factor = 1.0;
  Vec3 com_shift = Vec3::Zero();  // m, base frame
  double static_friction = 1.0;
  double dynamic_friction = 0.7;
  Vec init_joint_factor = Vec::Ones(kNumJoints);
  double delay_ms = 0.0;
  Vec3 camera_shake_rad = Vec3::Zero();  // roll/pitch/yaw mount offset
  double occlusion_ratio = 0.0;
};

struct SimDivergence : std::runtime_error {
  SimDivergence() : std::runtime_error("simulation diverged to non-finite state") {}
};

// ---------------------------------------------------------------------------
// Control math

/// tau = Kp (theta_target - theta) - Kd thetad, clipped to +-torque_limit.
inline Vec pd_torques(const Vec& theta_target, const Vec& theta, const Vec& thetad,
                      const PdGains& gains, double torque_limit = 30.0) {
  Vec tau = gains.kp * (theta_target - theta) - gains.kd * thetad;
  return tau.cwiseMax(-torque_limit).cwiseMin(torque_limit);
}

/// theta_target = theta_default + scale * a, clipped to the joint limits.
inline Vec action_to_targets(const Vec& action, const Vec& theta_default, double scale) {
  Vec t = theta_default + scale * action;
  for (int j = 0; j < kNumJoints; ++j) {
    t[j] = clampd(t[j], robot::kJointLower[j % 3], robot::kJointUpper[j % 3]);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Leg kinematics

/// Foot position in the base frame for one leg.
inline Vec3 leg_forward_kinematics(int leg, double q_abd, double q_hip, double q_knee) {
  const double px = robot::kThighLen * std::sin(q_hip) +
                    robot::kShankLen * std::sin(q_hip + q_knee);
  const double pz = -(robot::kThighLen * std::cos(q_hip) +
                      robot::kShankLen * std::cos(q_hip + q_knee));
  const double c = std::cos(q_abd), s = std::sin(q_abd);
  return robot::kHipOffsets[static_cast<size_t>(leg)] + Vec3(px, -s * pz, c * pz);
}

/// 3x3 Jacobian d(foot position, base frame)/d(leg joints).
inline Eigen::Matrix3d leg_jacobian(double q_abd, double q_hip, double q_knee) {
  const double l1 = robot::kThighLen, l2 = robot::kShankLen;
  const double pz = -(l1 * std::cos(q_hip) + l2 * std::cos(q_hip + q_knee));
  const double c = std::cos(q_abd), s = std::sin(q_abd);
  const double dpx_dh = l1 * std::cos(q_hip) + l2 * std::cos(q_hip + q_knee);
  const double dpz_dh = l1 * std::sin(q_hip) + l2 * std::sin(q_hip + q_knee);
  const double dpx_dk = l2 * std::cos(q_hip + q_knee);
  const double dpz_dk = l2 * std::sin(q_hip + q_knee);
  Eigen::Matrix3d J;
  J.col(0) << 0.0, -c * pz, -s * pz;
  J.col(1) << dpx_dh, -s * dpz_dh, c * dpz_dh;
  J.col(2) << dpx_dk, -s * dpz_dk, c * dpz_dk;
  return J;
}

/// World positions of the four feet.
inline std::array<Vec3, 4> compute_foot_positions(const RobotState& state) {
  const Eigen::Matrix3d R = state.orient.toRotationMatrix();
  std::array<Vec3, 4> feet;
  for (int l = 0; l < kNumFeet; ++l) {
    const Vec3 p = leg_forward_kinematics(l, state.q[3 * l], state.q[3 * l + 1],
                                          state.q[3 * l + 2]);
    feet[static_cast<size_t>(l)] = state.pos + R * p;
  }
  return feet;
}

/// Knee world positions, used as collision proxies.
inline std::array<Vec3, 4> compute_knee_positions(const RobotState& state) {
  const Eigen::Matrix3d R = state.orient.toRotationMatrix();
  std::array<Vec3, 4> knees;
  for (int l = 0; l < kNumFeet; ++l) {
    const double q_abd = state.q[3 * l], q_hip = state.q[3 * l + 1];
    const double px = robot::kThighLen * std::sin(q_hip);
    const double pz = -robot::kThighLen * std::cos(q_hip);
    const double c = std::cos(q_abd), s = std::sin(q_abd);
    const Vec3 p = robot::kHipOffsets[static_cast<size_t>(l)] + Vec3(px, -s * pz, c * pz);
    knees[static_cast<size_t>(l)] = state.pos + R * p;
  }
  return knees;
}

// ---------------------------------------------------------------------------
// Dynamics step

/// Per-foot tangential contact anchors; owned by the environment and reset on
/// episode start.
struct ContactAnchors {
  std::array<Vec3, 4> anchor{};
  std::array<bool, 4> active{};

  void clear() { active = {false, false, false, false}; }
};

struct StepResult {
  RobotState state;
  ContactState contacts;
  int collision_count = 0;  // non-foot proxies touching terrain
};

/// Advances one physics substep. Base is a single rigid body, legs are
/// massless kinematic chains with reflected joint inertia, contacts are
/// one-sided spring-dampers with a Coulomb cone. Throws SimDivergence if the
/// state leaves the finite range.
inline StepResult step(const RobotState& state, const Vec& tau, const HeightField& field,
                       const SampledDynamics& dyn, ContactAnchors& anchors,
                       double dt = 0.005) {
  using namespace robot;
  StepResult out;
  RobotState s = state;
  const Eigen::Matrix3d R = s.orient.toRotationMatrix();
  const double mass = kBaseMass + dyn.payload_kg;

  // Contact forces at the feet.
  const std::array<Vec3, 4> feet = compute_foot_positions(s);
  Vec3 force_w(0.0, 0.0, -mass * kGravity);
  Vec3 torque_b = dyn.com_shift.cross(R.transpose() * Vec3(0.0, 0.0, -mass * kGravity));
  Vec tau_contact = Vec::Zero(kNumJoints);

  const Vec3 omega_w = R * s.ang_vel;
  for (int l = 0; l < kNumFeet; ++l) {
    auto& fc = out.contacts.feet[static_cast<size_t>(l)];
    const Vec3& p = feet[static_cast<size_t>(l)];
    const double ground = field.height_clamped(p.x(), p.y());
    const double pen = ground - p.z();
    if (pen <= 0.0) {
      anchors.active[static_cast<size_t>(l)] = false;
      continue;
    }
    const Eigen::Matrix3d J =
        leg_jacobian(s.q[3 * l], s.q[3 * l + 1], s.q[3 * l + 2]);
    const Vec3 v_foot = s.lin_vel + omega_w.cross(p - s.pos) +
                        R * (J * s.qd.segment<3>(3 * l));

    double fz = kContactStiffness * pen - kContactDamping * v_foot.z();
    if (fz < 0.0) fz = 0.0;

    Vec3 ft(0.0, 0.0, 0.0);
    if (fz > 0.0) {
      auto& anchor = anchors.anchor[static_cast<size_t>(l)];
      if (!anchors.active[static_cast<size_t>(l)]) {
        anchor = p;
        anchors.active[static_cast<size_t>(l)] = true;
      }
      Vec3 slip = p - anchor;
      slip.z() = 0.0;
      ft = -kTangentStiffness * slip -
           kTangentDamping * Vec3(v_foot.x(), v_foot.y(), 0.0);
      const double ft_norm = ft.norm();
      if (ft_norm > dyn.static_friction * fz && ft_norm > 1e-12) {
        ft *= dyn.dynamic_friction * fz / ft_norm;  // sliding
        anchor = p + ft / kTangentStiffness;        // anchor slips along the cone
        anchor.z() = p.z();
      }
    }

    const Vec3 f_w(ft.x(), ft.y(), fz);
    force_w += f_w;
    torque_b += (R.transpose() * (p - s.pos)).cross(R.transpose() * f_w);
    tau_contact.segment<3>(3 * l) += J.transpose() * (R.transpose() * f_w);

    fc.in_contact = true;
    fc.f_xy = std::hypot(ft.x(), ft.y());
    fc.f_z = fz;
  }

  // Collision proxies: base sphere and knee spheres against terrain.
  {
    const double base_ground = field.height_clamped(s.pos.x(), s.pos.y());
    if (s.pos.z() - kBaseCollisionRadius < base_ground) out.collision_count++;
    for (const Vec3& k : compute_knee_positions(s)) {
      const double g = field.height_clamped(k.x(), k.y());
      if (k.z() - kKneeCollisionRadius < g) out.collision_count++;
    }
  }

  // Semi-implicit Euler: velocities first, then positions.
  const Vec3 inertia = kBaseInertia;
  const Vec3 ang_acc =
      (torque_b - s.ang_vel.cross(inertia.cwiseProduct(s.ang_vel))).cwiseQuotient(inertia);
  s.lin_vel += dt * force_w / mass;
  s.ang_vel += dt * ang_acc;
  s.pos += dt * s.lin_vel;

  const double angle = s.ang_vel.norm() * dt;
  if (angle > 1e-12) {
    s.orient = s.orient * Quat(Eigen::AngleAxisd(angle, s.ang_vel.normalized()));
  }
  s.orient.normalize();

  Vec qdd = (tau + tau_contact - kJointFriction * s.qd) / kJointInertia;
  s.qd += dt * qdd;
  s.qd = s.qd.cwiseMax(-kJointVelLimit).cwiseMin(kJointVelLimit);
  s.q += dt * s.qd;
  for (int j = 0; j < kNumJoints; ++j) {
    const double lo = kJointLower[j % 3], hi = kJointUpper[j % 3];
    if (s.q[j] < lo) {
      s.q[j] = lo;
      if (s.qd[j] < 0.0) s.qd[j] = 0.0;
    } else if (s.q[j] > hi) {
      s.q[j] = hi;
      if (s.qd[j] > 0.0) s.qd[j] = 0.0;
    }
  }

  if (!s.finite()) throw SimDivergence();
  out.state = s;
  return out;
}

// ---------------------------------------------------------------------------
// Depth camera

inline constexpr int kDepthWidth = 64;
inline constexpr int kDepthHeight = 64;
inline constexpr int kDepthSize = kDepthWidth * kDepthHeight;
inline constexpr double kDepthMin = 0.1;  // m
inline constexpr double kDepthMax = 3.0;  // m

/// Row-major 64x64 depth image, meters in [0.1, 3.0]. Row 0 is the top.
struct DepthFrame {
  VecX<float> d = VecX<float>::Constant(kDepthSize, static_cast<float>(kDepthMax));

  float& at(int row, int col) { return d[row * kDepthWidth + col]; }
  float at(int row, int col) const { return d[row * kDepthWidth + col]; }
};

struct CameraModel {
  Vec3 mount_pos{0.28, 0.0, 0.08};  // base frame
  double mount_pitch = 0.52;        // rad, downward
  double fov_h = 1.518;             // rad
  double fov_v = 1.012;             // rad
  double min_range = kDepthMin;
  double max_range = kDepthMax;
};

/// Casts one ray per pixel from the (perturbed) camera pose against the
/// field. Distances are Euclidean along the ray, clipped to
/// [min_range, max_range]; misses read max_range.
inline DepthFrame render_depth(const RobotState& state, const HeightField& field,
                               const CameraModel& cam,
                               const Vec3& shake_rpy = Vec3::Zero()) {
  const Eigen::Matrix3d R_base = state.orient.toRotationMatrix();
  const Eigen::Matrix3d R_cam =
      R_base * Eigen::AngleAxisd(cam.mount_pitch, Vec3::UnitY()).toRotationMatrix() *
      (Eigen::AngleAxisd(shake_rpy.z(), Vec3::UnitZ()) *
       Eigen::AngleAxisd(shake_rpy.y(), Vec3::UnitY()) *
       Eigen::AngleAxisd(shake_rpy.x(), Vec3::UnitX()))
          .toRotationMatrix();
  const Vec3 origin = state.pos + R_base * cam.mount_pos;

  const double th = std::tan(cam.fov_h / 2.0);
  const double tv = std::tan(cam.fov_v / 2.0);
  DepthFrame frame;
  for (int r = 0; r < kDepthHeight; ++r) {
    const double vz = (0.5 - (r + 0.5) / kDepthHeight) * 2.0 * tv;
    for (int c = 0; c < kDepthWidth; ++c) {
      const double vy = (0.5 - (c + 0.5) / kDepthWidth) * 2.0 * th;
      Vec3 dir_cam(1.0, vy, vz);
      dir_cam.normalize();
      const Vec3 dir = R_cam * dir_cam;
      const auto hit = raycast(field, origin, dir, cam.max_range);
      const double depth = hit ? clampd(*hit, cam.min_range, cam.max_range) : cam.max_range;
      frame.at(r, c) = static_cast<float>(depth);
    }
  }
  return frame;
}

/// Debug export: linear depth-to-gray 8-bit PGM.
inline void write_pgm(const DepthFrame& frame, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "P5\n" << kDepthWidth << " " << kDepthHeight << "\n255\n";
  for (int i = 0; i < kDepthSize; ++i) {
    const double g = (frame.d[i] - kDepthMin) / (kDepthMax - kDepthMin);
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(clampd(g, 0.0, 1.0) * 255.0))));
  }
}

/// Tilt of the body z axis from world up, used for fall detection.
inline double body_tilt(const RobotState& state) {
  const Vec3 body_z = state.orient.toRotationMatrix().col(2);
  return std::acos(clampd(body_z.z(), -1.0, 1.0));
}

}  // namespace kivi
