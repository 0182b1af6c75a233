// Hand-written reverse-mode differentiation of the scene rollout:
// frame-granularity checkpoints, substep replay, analytic adjoints for every
// kernel. Non-smooth branches (contact on/off, friction saturation, yield,
// boundary activation) are frozen at their forward decisions.
#pragma once

#include <functional>
#include <memory>

#include "dt/sim.hpp"

namespace dt {

// ---- low-level adjoint kernels (exposed for finite-difference tests) ----

// d/dA of a function whose gradients w.r.t. U, sigma, V are given.
// Denominators sigma_j^2 - sigma_i^2 are clamped to +-1e-6.
Mat3 svd_adjoint(const Svd3& s, const Mat3& u_bar, const Vec3& sigma_bar,
                 const Mat3& v_bar);

// d/dA for R = polar_rotation(A).
Mat3 polar_adjoint(const Mat3& a, const Mat3& r_bar);

// Reverse of first_piola_stress; accumulates elastomer parameter gradients.
Mat3 first_piola_adjoint(const Mat3& f, const ElastomerMaterial& mat, const Mat3& p_bar,
                         real* mu_bar = nullptr, real* lambda_bar = nullptr);

// Reverse of particle_stress (tau = P F^T per material model).
Mat3 particle_stress_adjoint(const Mat3& f, const ObjectMaterial& mat, const Mat3& tau_bar);

// Reverse of von_mises_return_map (identity inside the yield surface).
Mat3 von_mises_adjoint(const Mat3& f_trial, real sigma_y, real mu, const Mat3& f_bar);

// Reverse of the closest-point geometry for one recorded pair region.
// d_bar is ignored by the caller when the penetration cap clamped d.
struct TriangleGeomGrads {
  Vec3 p, a, b, c;
};
TriangleGeomGrads point_triangle_adjoint(const Vec3& p, const Vec3& a, const Vec3& b,
                                         const Vec3& c, int region, real d_bar,
                                         const Vec3& n_bar, const Vec3& bary_bar);

// Reverse of compute_pair_force for a recorded pair (branches frozen).
// f_bar is the adjoint of the total force f_n + f_t on the counterpart.
struct PairForceGrads {
  real d_bar = 0;
  Vec3 n_bar;
  Vec3 v_tri_bar, v_cp_bar;
  real k_n = 0, k_d = 0, k_t = 0, mu = 0;
  real c_cap_bar = 0;  // nonzero only when the impulse cap was the active branch
};
PairForceGrads pair_force_adjoint(const ContactPair& pair, const ContactParams& params,
                                  const Vec3& f_bar);

// ---- state-level adjoint ----

struct AdjointState {
  struct SensorAdj {
    std::vector<Vec3> x, v;
    Vec3 pose_t;
    Mat3 pose_r = Mat3::zero();
  };
  std::vector<SensorAdj> sensors;
  std::vector<Vec3> mpm_x, mpm_v;
  std::vector<Mat3> mpm_f, mpm_c;
  std::vector<Vec3> cable_x, cable_v;

  static AdjointState zeros_like(const Scene& scene);
  void clear();
};

struct ActionGrad {
  std::vector<Twist> twists;
  real width_rate = 0;
};

struct ParamGrads {
  real k_n = 0, k_d = 0, k_t = 0, mu = 0;  // contact
  real lame_mu = 0, lame_lambda = 0;       // sensor elastomer
  std::vector<ActionGrad> actions;         // one per frame
};

// One term of the rollout loss. evaluate/accumulate are called with the scene
// at the post-frame state; accumulate adds d(evaluate)/d(state) into adj and
// d/d(params) into grads.
class LossTerm {
 public:
  virtual ~LossTerm() = default;
  virtual real evaluate(const Scene& scene, int frame) = 0;
  virtual void accumulate(const Scene& scene, int frame, AdjointState& adj,
                          ParamGrads& grads) = 0;
};

using LossTermPtr = std::shared_ptr<LossTerm>;

struct Rollout {
  std::vector<SceneState> checkpoints;  // state before frame k
  std::vector<FrameAction> actions;
  SceneState final_state;
  real loss = 0;
  std::vector<real> frame_losses;
};

// Steps the scene through `actions`, checkpointing before each frame and
// summing loss terms after each frame. The scene ends at the final state.
Rollout record_rollout(Scene& scene, const std::vector<FrameAction>& actions,
                       const std::vector<LossTermPtr>& losses);

// Reverse pass over a recorded rollout. Replays each frame substep-by-substep
// from its checkpoint; replay matches the forward pass bitwise.
ParamGrads backward(Scene& scene, const Rollout& rollout,
                    const std::vector<LossTermPtr>& losses);

// Adjoint of observe_sensor: pushes gradients w.r.t. the observation back into
// the state adjoint (and contact parameter gradients).
struct TactileObsBar {
  std::vector<std::array<real, 2>> marker_px;  // empty = zero
  Vec3 force;
  Vec3 contact_center;
};
void observe_sensor_adjoint(const Scene& scene, int sensor_index,
                            const TactileObsBar& obs_bar, AdjointState& adj,
                            ParamGrads& grads);

// Reverse of one substep: scene must hold the pre-substep state; adj holds the
// post-substep adjoint on entry and the pre-substep adjoint on exit.
// The scene is left at the pre-substep state.
void substep_backward(Scene& scene, AdjointState& adj, ParamGrads& grads);

// Reverse of Scene::begin_frame: scene must hold the pre-frame state and adj
// the post-begin_frame adjoint (with base-velocity adjoints accumulated).
void begin_frame_backward(Scene& scene, const FrameAction& action, AdjointState& adj,
                          ActionGrad& action_grad);

// Central-difference directional checks used by the gradient tests:
// perturbs theta by +-max(1e-4, 1e-3 |theta|).
real fd_step(real theta);

struct FdCheckResult {
  real adjoint_grad = 0, fd_grad = 0, rel_err = 0;
};

// Verifies one scalar parameter against a central difference of the rollout
// loss. `param` returns a mutable reference to the parameter (in the scene or
// the action list); `pick` reads the matching entry of the adjoint gradients.
// h <= 0 uses fd_step. The scene must be at the rollout's initial state and is
// left there.
FdCheckResult fd_check(Scene& scene, std::vector<FrameAction>& actions,
                       const std::vector<LossTermPtr>& losses,
                       const std::function<real&(Scene&, std::vector<FrameAction>&)>& param,
                       const std::function<real(const ParamGrads&)>& pick, real h = 0);

}  // namespace dt
