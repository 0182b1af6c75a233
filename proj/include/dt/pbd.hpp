// Position-based dynamics cable: stretch, bending, self-collision constraints.
#pragma once

#include <vector>

#include "dt/math.hpp"

namespace dt {

struct CableState {
  int particle_count = 0;
  std::vector<Vec3> x, v, x_pred;
  std::vector<Vec3> external_forces;  // contact scatter target
  std::vector<real> inv_mass;         // 0 for fixed particles
  std::vector<uint8_t> fixed_mask;
  real rest_segment_length = 0;
  real radius = 0.004;
  real bend_stiffness = 0.1;
};

struct CableSpawn {
  Vec3 start, end;
  int particle_count = 50;
  real radius = 0.004;
  real mass_per_particle = 1e-3;
  bool fix_start = true;
  bool fix_end = false;
  real bend_stiffness = 0.1;
};

CableState spawn_cable(const CableSpawn& spawn);

// v += dt * (g + f_ext * inv_mass); x_pred = x + dt v; fixed particles pinned.
void pbd_predict(CableState& state, real dt, const Vec3& gravity);

// One executed distance projection with its input positions, for replay.
struct PbdProjection {
  int i, j;
  real target, stiffness;
  Vec3 pi, pj;  // x_pred going into the projection
};

// Gauss-Seidel passes over stretch, bending (distance i..i+2 toward 2*rest),
// and self-collision (non-adjacent pairs pushed to 2*radius). Projections
// that actually moved something are appended to `log` when given.
void pbd_solve_constraints(CableState& state, int iterations,
                           std::vector<PbdProjection>* log = nullptr);

// v = (x_pred - x)/dt; x = x_pred.
void pbd_finalize(CableState& state, real dt);

// Candidate non-adjacent pairs within 2*radius, via a spatial hash with cell
// size 4*radius. Deterministic ordering.
std::vector<std::pair<int, int>> cable_collision_pairs(const CableState& state);

}  // namespace dt
