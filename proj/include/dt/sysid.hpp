// System identification of sensor elastomer and contact parameters from
// marker + force trajectories: Adam on adjoint gradients, CMA-ES and random
// sampling baselines, sim2sim evaluation protocol.
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dt/adjoint.hpp"
#include "dt/sim.hpp"

namespace dt {

struct SysIdParams {
  real k_n = 55.33, k_d = 239.97, k_t = 94.35, mu_f = 4.90;
  real lame_mu = 1.294e3, lame_lambda = 9.201e3;

  std::array<real, 6> as_array() const;
  static SysIdParams from_array(const std::array<real, 6>& a);
  void apply(Scene& scene) const;
};

// Parameter box used for projection, random sampling and CMA-ES normalization.
struct SysIdBounds {
  std::array<real, 6> lo{10, 100, 50, 5, 800, 7000};
  std::array<real, 6> hi{100, 400, 150, 20, 1500, 10000};

  SysIdParams project(const SysIdParams& p) const;
  std::array<real, 6> normalize(const SysIdParams& p) const;    // -> [0,1]^6
  SysIdParams denormalize(const std::array<real, 6>& u) const;  // clamped
};

enum class TrajectoryKind { PressSlide, PressTwistZ, PressTwistX };

const char* trajectory_kind_name(TrajectoryKind kind);

// Desk-scale script: the full-length protocol (10 s press + 10 s motion at
// 1 mm/s / 2 deg/s) sits behind these knobs; defaults shorten the duration
// and raise the speeds to keep total displacement comparable. The apex starts
// slightly seated (negative start_gap) and the gel is light so base motion
// reaches the contact patch within the shortened horizon.
struct TrajectoryScript {
  int press_frames = 15;
  int motion_frames = 30;
  real press_speed = 0.2;   // units/s downward
  real slide_speed = 2.0;   // units/s along +x
  real twist_speed = 10.0;  // rad/s about z
  real tilt_speed = 6.0;    // rad/s about x
  real start_gap = -0.001;  // apex height above the plane at t = 0
  int sensor_resolution = 6;
  real sensor_density = 100;
  // heavy velocity damping keeps the shortened trajectory quasi-static; the
  // undamped gel rings for ~1 s, which would make the loss landscape chaotic
  real sensor_damping = 1000;
};

struct ContactTrajectory {
  TrajectoryKind kind = TrajectoryKind::PressSlide;
  real frame_dt = 1e-3;
  std::vector<real> t;
  std::vector<SensorPose> poses;  // commanded pose after each frame
  std::vector<std::vector<std::array<real, 2>>> markers;
  std::vector<Vec3> forces;  // sensor-frame net contact force

  int frame_count() const { return static_cast<int>(t.size()); }
};

// Dome pressed against the z = 0 plane, gravity off.
Scene make_sysid_scene(const SysIdParams& params, const TrajectoryScript& script);

std::vector<FrameAction> script_actions(TrajectoryKind kind, const TrajectoryScript& script);

ContactTrajectory simulate_trajectory(const SysIdParams& params, TrajectoryKind kind,
                                      const TrajectoryScript& script = {});

// 10 * mean squared marker distance (px^2) + 1 * squared force error (N^2),
// summed over frames. Throws SimError on shape mismatch.
real sysid_loss(const ContactTrajectory& simulated, const ContactTrajectory& reference);

struct SysIdOptions {
  int steps = 100;
  TrajectoryScript script;
  std::array<bool, 6> free_mask{true, true, true, true, true, true};
  SysIdBounds bounds;
  uint64_t seed = 0;
};

struct SysIdResult {
  SysIdParams params;  // best-loss iterate
  std::vector<real> loss_curve;
};

// Per-parameter Adam (beta1 0.9, beta2 0.999) with learning rates
// {20, 20, 5, 5, 50, 50}, projected to bounds each step. A non-finite loss
// rolls back to the last finite iterate and halts.
SysIdResult optimize_gradient(const ContactTrajectory& reference, const SysIdParams& init,
                              const SysIdOptions& options = {});

// CMA-ES over the normalized parameter box: population 20, sigma0 = 0.15.
SysIdResult optimize_cmaes(const ContactTrajectory& reference, const SysIdParams& init,
                           const SysIdOptions& options = {});

// Uniform draws in the bounds box; best draw by sysid_loss.
SysIdResult baseline_random(const ContactTrajectory& reference, int draws,
                            const SysIdOptions& options = {});

// Generic minimizer used by optimize_cmaes, exposed for sanity tests.
// Minimizes over the unit box [0,1]^dim.
std::vector<real> cmaes_minimize(int dim, const std::function<real(const std::vector<real>&)>& f,
                                 const std::vector<real>& x0, real sigma0, int population,
                                 int steps, uint64_t seed);

// Mean per-frame pixel MSE of markers between two trajectories.
real marker_mse(const ContactTrajectory& a, const ContactTrajectory& b);

struct EvalStats {
  real mean = 0, stddev = 0;
};
EvalStats eval_stats(const std::vector<real>& values);

// Trajectory CSV: header "t,px,py,pz,qw,qx,qy,qz,m0u,m0v,...,Fx,Fy,Fz",
// 17-significant-digit values. Identical schema for real and simulated data.
void save_trajectory_csv(const ContactTrajectory& traj, const std::string& path);
ContactTrajectory load_trajectory_csv(const std::string& path);

}  // namespace dt
