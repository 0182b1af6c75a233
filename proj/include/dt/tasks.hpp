// Manipulation tasks: scene builders, state/tactile losses, task metrics and
// trajectory optimizers (Adam on adjoint gradients, CMA-ES baseline).
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dt/adjoint.hpp"
#include "dt/sim.hpp"

namespace dt {

enum class TaskKind { GraspElastic, GraspPlastic, SurfaceFollow, CableStraighten, CaseOpen, ObjectRepose };

const char* task_kind_name(TaskKind kind);

struct TaskWeights {
  real alpha = 1, beta = 1;  // L_total = alpha * L_state + beta * L_tactile
};
TaskWeights task_weights(TaskKind kind);

// Per-variable learning rates (translation / orientation / gripper width);
// width is 0 for single-sensor tasks.
struct TaskLearningRates {
  real lr_p = 0, lr_o = 0, lr_w = 0;
};
TaskLearningRates task_learning_rates(TaskKind kind);

// --- scalar loss forms ----------------------------------------------------

real loss_pos(const Vec3& p, const Vec3& target);
real loss_force(const Vec3& f, const Vec3& target);
real loss_loc(const Vec3& l, const Vec3& target);
real loss_angle(real theta_deg, real target_deg);
real loss_cable(const std::vector<Vec3>& p, const std::vector<Vec3>& target);

// ||F_t|| / (mu ||F_n||); defined as 1 (the cone boundary) without contact.
real loss_slip(const Vec3& f_t, const Vec3& f_n, real mu);

// Mass distribution and signed-distance samples of one MPM body on a lattice
// in the body's rigid-aligned frame.
struct DeformGrids {
  int n = 32;
  Vec3 origin;     // lattice corner in the aligned frame
  real dx = 0;
  std::vector<real> mass;  // trilinear-rasterized particle mass, n^3
  std::vector<real> sdf;   // distance to nearest particle minus particle radius
};

DeformGrids rasterize_body(const MpmParticles& mpm, int body, int n = 32);

// gamma * dot(sdf, sdf_target) + eta * L1(mass, mass_target)
real loss_deform(const DeformGrids& current, const DeformGrids& target, real gamma = 0.1,
                 real eta = 0.1);

// --- task scenes ----------------------------------------------------------

struct TrajectoryPlan {
  std::vector<FrameAction> actions;

  int frames() const { return static_cast<int>(actions.size()); }
  static TrajectoryPlan constant(int frames, int sensors, const Twist& twist,
                                 real width_rate = 0);
};

struct TaskScene {
  TaskKind kind = TaskKind::SurfaceFollow;
  Scene scene;
  SceneState initial_state;  // scene as built; rollouts restore this
  int frames = 40;
  TaskWeights weights;
  TaskLearningRates rates;  // desk-scaled (see task_learning_rates for table values)

  // targets
  Vec3 pos_target;                 // Grasp: object center after lift
  Vec3 path_start, path_end;       // SurfaceFollow waypoints for the sensor
  real angle_target_deg = 90;
  Vec3 force_target;               // tactile force setpoint, sensor frame
  std::vector<Vec3> cable_target;  // straightened node positions
  DeformGrids deform_target;       // GraspPlastic: undeformed rasterization
  int object_body = 0;

  TrajectoryPlan initial_plan() const;
};

TaskScene build_task_scene(TaskKind kind, uint64_t seed = 0);

// State and tactile loss terms wired per task; combined weights applied inside
// (state scaled by alpha, tactile by beta; use_tactile=false drops tactile).
std::vector<LossTermPtr> task_losses(const TaskScene& task, bool use_tactile = true);

real combined_loss(real state_loss, real tactile_loss, const TaskWeights& w);

// --- rollout evaluation and metrics ---------------------------------------

struct TaskReport {
  real loss = 0;    // combined loss over the rollout
  real metric = 0;  // task metric (see task_metric)
  std::vector<real> frame_losses;
};

// Forward-only evaluation of a plan from the task's initial state.
TaskReport evaluate_plan(TaskScene& task, const TrajectoryPlan& plan, bool use_tactile = true);

// Replays the plan and reports the task metric:
// SurfaceFollow: in-contact travel distance (higher is better).
// CableStraighten: mean squared node distance from the straight target (lower).
// CaseOpen / ObjectRepose: final rotated angle of the target body in degrees.
// Grasp: accumulated in-contact slip of the object relative to the sensors.
real task_metric(TaskScene& task, const TrajectoryPlan& plan);

// --- optimizers -----------------------------------------------------------

struct TaskOptResult {
  TrajectoryPlan best_plan;
  std::vector<real> loss_curve;  // per accepted iteration
  int failures = 0;              // rollouts that threw or went non-finite
};

TaskOptResult optimize_trajectory_gradient(TaskScene& task, const TrajectoryPlan& init,
                                           int iterations = 100, bool use_tactile = true);

// Population 20, sigma 0.15 in action units, same initial plan.
TaskOptResult optimize_trajectory_cmaes(TaskScene& task, const TrajectoryPlan& init,
                                        int iterations = 100, bool use_tactile = true,
                                        uint64_t seed = 0);

// Flat observation for external RL: sensor poses, gripper width proxy, object
// center, net forces, and markers downsampled by 4x.
std::vector<real> export_observation(const Scene& scene, bool with_tactile = true);

}  // namespace dt
