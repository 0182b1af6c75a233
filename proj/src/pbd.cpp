#include "dt/pbd.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace dt {

CableState spawn_cable(const CableSpawn& spawn) {
  CableState s;
  s.particle_count = spawn.particle_count;
  s.radius = spawn.radius;
  s.bend_stiffness = spawn.bend_stiffness;
  s.rest_segment_length = norm(spawn.end - spawn.start) / (spawn.particle_count - 1);
  for (int i = 0; i < spawn.particle_count; i++) {
    real t = i / static_cast<real>(spawn.particle_count - 1);
    s.x.push_back(spawn.start + t * (spawn.end - spawn.start));
    s.v.push_back({});
    s.x_pred.push_back(s.x.back());
    s.external_forces.push_back({});
    bool fixed = (i == 0 && spawn.fix_start) || (i == spawn.particle_count - 1 && spawn.fix_end);
    s.fixed_mask.push_back(fixed);
    s.inv_mass.push_back(fixed ? 0.0 : 1.0 / spawn.mass_per_particle);
  }
  return s;
}

void pbd_predict(CableState& state, real dt, const Vec3& gravity) {
  for (int i = 0; i < state.particle_count; i++) {
    if (state.fixed_mask[i]) {
      state.v[i] = Vec3{};
      state.x_pred[i] = state.x[i];
      continue;
    }
    state.v[i] += dt * (gravity + state.inv_mass[i] * state.external_forces[i]);
    state.x_pred[i] = state.x[i] + dt * state.v[i];
  }
}

std::vector<std::pair<int, int>> cable_collision_pairs(const CableState& state) {
  const real cell = 4 * state.radius;
  std::map<std::array<int, 3>, std::vector<int>> hash;
  auto key_of = [&](const Vec3& p) {
    return std::array<int, 3>{static_cast<int>(std::floor(p.x / cell)),
                              static_cast<int>(std::floor(p.y / cell)),
                              static_cast<int>(std::floor(p.z / cell))};
  };
  for (int i = 0; i < state.particle_count; i++) hash[key_of(state.x_pred[i])].push_back(i);

  std::vector<std::pair<int, int>> pairs;
  const real r2 = (2.2 * state.radius) * (2.2 * state.radius);
  for (int i = 0; i < state.particle_count; i++) {
    auto k = key_of(state.x_pred[i]);
    for (int dz = -1; dz <= 1; dz++)
      for (int dy = -1; dy <= 1; dy++)
        for (int dx = -1; dx <= 1; dx++) {
          auto it = hash.find({k[0] + dx, k[1] + dy, k[2] + dz});
          if (it == hash.end()) continue;
          for (int j : it->second) {
            if (j <= i + 1) continue;  // self and chain neighbors
            if (norm_sq(state.x_pred[i] - state.x_pred[j]) < r2) pairs.push_back({i, j});
          }
        }
  }
  std::sort(pairs.begin(), pairs.end());
  return pairs;
}

namespace {

// Distance constraint projection with inverse-mass weighting and stiffness k.
inline void project_distance(CableState& s, int i, int j, real target, real k,
                             std::vector<PbdProjection>* log) {
  real wi = s.inv_mass[i], wj = s.inv_mass[j];
  real wsum = wi + wj;
  if (wsum <= 0) return;
  Vec3 d = s.x_pred[i] - s.x_pred[j];
  real len = norm(d);
  if (len < 1e-12) return;
  if (log) log->push_back({i, j, target, k, s.x_pred[i], s.x_pred[j]});
  Vec3 corr = ((len - target) / (len * wsum)) * d;
  s.x_pred[i] -= (k * wi) * corr;
  s.x_pred[j] += (k * wj) * corr;
}

}  // namespace

void pbd_solve_constraints(CableState& state, int iterations,
                           std::vector<PbdProjection>* log) {
  auto pairs = cable_collision_pairs(state);
  for (int it = 0; it < iterations; it++) {
    for (int i = 0; i + 1 < state.particle_count; i++)
      project_distance(state, i, i + 1, state.rest_segment_length, 1.0, log);
    for (int i = 0; i + 2 < state.particle_count; i++)
      project_distance(state, i, i + 2, 2 * state.rest_segment_length, state.bend_stiffness,
                       log);
    for (auto [i, j] : pairs) {
      // only push apart, never pull together
      if (norm(state.x_pred[i] - state.x_pred[j]) < 2 * state.radius)
        project_distance(state, i, j, 2 * state.radius, 1.0, log);
    }
  }
}

void pbd_finalize(CableState& state, real dt) {
  for (int i = 0; i < state.particle_count; i++) {
    state.v[i] = (state.x_pred[i] - state.x[i]) / dt;
    state.x[i] = state.x_pred[i];
  }
}

}  // namespace dt
