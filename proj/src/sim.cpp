#include "dt/sim.hpp"

#include <algorithm>
#include <numeric>

namespace dt {

int Scene::add_sensor(std::shared_ptr<const SensorMesh> mesh, const SensorPose& pose) {
  Sensor s;
  s.mesh = std::move(mesh);
  s.pose = pose;
  std::vector<Vec3> world(s.mesh->rest_positions.size());
  for (size_t i = 0; i < world.size(); i++)
    world[i] = pose.rotation * s.mesh->rest_positions[i] + pose.translation;
  s.fem = precompute_rest(s.mesh->topology, world, fem_density);
  s.surface_nodes = surface_node_list(s.mesh->topology);
  s.markers = build_marker_grid(*s.mesh, s.camera);
  s.elastic_forces.assign(s.mesh->topology.node_count, Vec3{});
  sensors.push_back(std::move(s));
  return static_cast<int>(sensors.size()) - 1;
}

void Scene::begin_frame(const FrameAction& action) {
  for (size_t s = 0; s < sensors.size(); s++) {
    Twist tw;
    if (s < action.twists.size()) tw = action.twists[s];
    tw.linear += (0.5 * action.width_rate) * sensors[s].width_dir;
    apply_base_control(sensors[s].mesh->topology, sensors[s].fem, sensors[s].pose, tw);
    sensors[s].pose.translation += frame_dt() * tw.linear;
    real ang = norm(tw.angular) * frame_dt();
    if (ang > 0)
      sensors[s].pose.rotation =
          axis_angle(normalized(tw.angular), ang) * sensors[s].pose.rotation;
  }
}

void Scene::substep(SubstepCache* cache) {
  if (cache) *cache = SubstepCache{};
  if (cache) cache->sensors.assign(sensors.size(), SensorContacts{});

  for (auto& s : sensors) {
    std::fill(s.fem.external_forces.begin(), s.fem.external_forces.end(), Vec3{});
    accumulate_elastic_forces(s.mesh->topology, s.fem, elastomer, s.elastic_forces);
  }
  if (has_cable())
    std::fill(cable.external_forces.begin(), cable.external_forces.end(), Vec3{});

  // Active grid nodes and their pre-update velocities double as the contact
  // counterpart set for the sensors.
  std::vector<int> grid_nodes;
  std::vector<Vec3> grid_node_positions, grid_vel_pre;
  if (has_mpm()) {
    grid.clear();
    p2g(mpm, grid, dt, gravity);
    for (int gi : grid.touched) {
      if (grid.mass[gi] <= 0) continue;
      grid_nodes.push_back(gi);
      grid_node_positions.push_back(grid.node_pos(gi));
      grid_vel_pre.push_back(grid.momentum[gi] / grid.mass[gi]);
    }
  }

  std::vector<int> iota_grid(grid_nodes.size()), iota_cable;
  std::iota(iota_grid.begin(), iota_grid.end(), 0);
  if (has_cable()) {
    iota_cable.resize(cable.particle_count);
    std::iota(iota_cable.begin(), iota_cable.end(), 0);
  }

  for (size_t si = 0; si < sensors.size(); si++) {
    Sensor& s = sensors[si];
    const TetMeshTopology& topo = s.mesh->topology;
    SurfaceSnapshot snapshot = extract_surface(topo, s.fem);
    s.hash.build(topo, s.fem.positions);
    real cap = contact_cap_scale * s.hash.mean_edge();

    std::vector<ContactPair> grid_pairs, cable_pairs;
    if (!grid_nodes.empty()) {
      // only nodes inside the surface bounding box can penetrate the gel
      Vec3 lo = s.fem.positions[s.surface_nodes[0]], hi = lo;
      for (int node : s.surface_nodes)
        for (int a = 0; a < 3; a++) {
          lo[a] = std::min(lo[a], s.fem.positions[node][a]);
          hi[a] = std::max(hi[a], s.fem.positions[node][a]);
        }
      real mass_floor = 0;
      if (contact_mass_frac > 0) {
        for (int gi : grid_nodes) mass_floor = std::max(mass_floor, grid.mass[gi]);
        mass_floor *= contact_mass_frac;
      }
      std::vector<int> near_nodes;
      for (int i : iota_grid) {
        const Vec3& p = grid_node_positions[i];
        if (grid.mass[grid_nodes[i]] < mass_floor) continue;
        if (p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z &&
            p.z <= hi.z)
          near_nodes.push_back(i);
      }
      grid_pairs = detect_pairs(topo, s.fem.positions, snapshot, s.hash,
                                grid_node_positions, near_nodes, cap);
    }
    for (auto& pair : grid_pairs) {
      const auto& tri = topo.surface_triangles[pair.triangle];
      Vec3 v_tri{};
      for (int k = 0; k < 3; k++) v_tri += pair.bary[k] * s.fem.velocities[tri.nodes[k]];
      compute_pair_force(pair, contact, v_tri, grid_vel_pre[pair.counterpart],
                         0.5 * grid.mass[grid_nodes[pair.counterpart]] / dt);
      scatter_pair_force(pair, topo, s.fem.external_forces,
                         grid.contact_force[grid_nodes[pair.counterpart]]);
    }

    if (has_cable()) {
      cable_pairs =
          detect_pairs(topo, s.fem.positions, snapshot, s.hash, cable.x, iota_cable, cap);
      for (auto& pair : cable_pairs) {
        const auto& tri = topo.surface_triangles[pair.triangle];
        Vec3 v_tri{};
        for (int k = 0; k < 3; k++) v_tri += pair.bary[k] * s.fem.velocities[tri.nodes[k]];
        real w = cable.inv_mass[pair.counterpart];
        compute_pair_force(pair, contact, v_tri, cable.v[pair.counterpart],
                           w > 0 ? 0.5 / (w * dt) : 1e30);
        scatter_pair_force(pair, topo, s.fem.external_forces,
                           cable.external_forces[pair.counterpart]);
      }
    }

    std::vector<std::vector<PlanePair>> plane_pairs;
    for (const auto& plane : planes) {
      auto pp = plane_contact(s.fem.positions, s.fem.velocities, s.surface_nodes, plane,
                              contact);
      for (const auto& p : pp) s.fem.external_forces[p.node] += p.f_n + p.f_t;
      plane_pairs.push_back(std::move(pp));
    }

    if (cache) {
      auto& sc = cache->sensors[si];
      sc.snapshot = std::move(snapshot);
      sc.grid_pairs = std::move(grid_pairs);
      sc.cable_pairs = std::move(cable_pairs);
      sc.plane_pairs = std::move(plane_pairs);
      sc.cap = cap;
    }
  }

  if (has_mpm()) {
    if (cache) {
      cache->grid_nodes = std::move(grid_nodes);
      cache->grid_node_positions = std::move(grid_node_positions);
      cache->grid_vel_pre = std::move(grid_vel_pre);
      cache->grid_mom_p2g.resize(cache->grid_nodes.size());
      for (size_t i = 0; i < cache->grid_nodes.size(); i++)
        cache->grid_mom_p2g[i] = grid.momentum[cache->grid_nodes[i]];
    }
    grid_update(grid, dt, boundary);
    std::vector<Vec3> x_prev;
    g2p_advect(mpm, grid, dt, &x_prev);
    if (cache) {
      cache->x_adv = mpm.x;
      cache->f_trial = mpm.F;
    }
    apply_material_projections(mpm, dt, x_prev);
    if (cache) cache->x_prev = std::move(x_prev);
  }

  for (auto& s : sensors)
    integrate_nodes(s.mesh->topology, s.fem, s.elastic_forces, dt, gravity, fem_damping);

  if (has_cable()) {
    pbd_predict(cable, dt, gravity);
    pbd_solve_constraints(cable, pbd_iterations, cache ? &cache->pbd_log : nullptr);
    pbd_finalize(cable, dt);
  }
}

void Scene::step_frame(const FrameAction& action) {
  begin_frame(action);
  for (int k = 0; k < substeps; k++) substep();
}

SceneState Scene::save() const {
  SceneState st;
  for (const auto& s : sensors)
    st.sensors.push_back({s.fem.positions, s.fem.velocities, s.pose});
  st.mpm_x = mpm.x;
  st.mpm_v = mpm.v;
  st.mpm_f = mpm.F;
  st.mpm_c = mpm.C;
  st.cable_x = cable.x;
  st.cable_v = cable.v;
  return st;
}

void Scene::restore(const SceneState& st) {
  if (st.sensors.size() != sensors.size()) throw SimError("snapshot sensor count mismatch");
  for (size_t i = 0; i < sensors.size(); i++) {
    sensors[i].fem.positions = st.sensors[i].x;
    sensors[i].fem.velocities = st.sensors[i].v;
    sensors[i].pose = st.sensors[i].pose;
  }
  mpm.x = st.mpm_x;
  mpm.v = st.mpm_v;
  mpm.F = st.mpm_f;
  mpm.C = st.mpm_c;
  cable.x = st.cable_x;
  cable.v = st.cable_v;
}

TactileObservation observe_sensor(const Scene& scene, int sensor_index) {
  const Sensor& s = scene.sensors[sensor_index];
  const TetMeshTopology& topo = s.mesh->topology;
  TactileObservation obs;
  obs.marker_px = observe_markers(topo, s.fem, s.pose, s.markers, s.camera);

  SurfaceSnapshot snapshot = extract_surface(topo, s.fem);
  TriangleHash hash;
  hash.build(topo, s.fem.positions);
  real cap = scene.contact_cap_scale * hash.mean_edge();

  Vec3 force{}, center{};
  int touches = 0;
  auto add_point_pairs = [&](const std::vector<Vec3>& pts, const std::vector<Vec3>& vels,
                             const std::vector<real>& masses) {
    std::vector<int> idx(pts.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto pairs = detect_pairs(topo, s.fem.positions, snapshot, hash, pts, idx, cap);
    for (auto& pair : pairs) {
      const auto& tri = topo.surface_triangles[pair.triangle];
      Vec3 v_tri{}, p_tri{};
      for (int k = 0; k < 3; k++) {
        v_tri += pair.bary[k] * s.fem.velocities[tri.nodes[k]];
        p_tri += pair.bary[k] * s.fem.positions[tri.nodes[k]];
      }
      compute_pair_force(pair, scene.contact, v_tri, vels[pair.counterpart],
                         0.5 * masses[pair.counterpart] / scene.dt);
      force -= pair.f_n + pair.f_t;  // reaction on the sensor
      center += p_tri;
      touches++;
    }
  };
  if (scene.has_mpm()) {
    // Same counterpart set the dynamics couples through: active grid nodes
    // from a mass/momentum transfer of the current particle state, with the
    // same bounding-box and fringe-mass filters as Scene::substep.
    MpmGrid g(scene.grid.n);
    p2g(scene.mpm, g, 0, Vec3{});
    Vec3 lo = s.fem.positions[s.surface_nodes[0]], hi = lo;
    for (int node : s.surface_nodes)
      for (int a = 0; a < 3; a++) {
        lo[a] = std::min(lo[a], s.fem.positions[node][a]);
        hi[a] = std::max(hi[a], s.fem.positions[node][a]);
      }
    real mass_floor = 0;
    if (scene.contact_mass_frac > 0) {
      for (int gi : g.touched) mass_floor = std::max(mass_floor, g.mass[gi]);
      mass_floor *= scene.contact_mass_frac;
    }
    std::vector<Vec3> pts, vels;
    std::vector<real> masses;
    for (int gi : g.touched) {
      if (g.mass[gi] <= 0 || g.mass[gi] < mass_floor) continue;
      Vec3 p = g.node_pos(gi);
      if (p.x < lo.x || p.x > hi.x || p.y < lo.y || p.y > hi.y || p.z < lo.z ||
          p.z > hi.z)
        continue;
      pts.push_back(p);
      vels.push_back(g.momentum[gi] / g.mass[gi]);
      masses.push_back(g.mass[gi]);
    }
    add_point_pairs(pts, vels, masses);
  }
  if (scene.has_cable()) {
    std::vector<real> masses(scene.cable.particle_count);
    for (int i = 0; i < scene.cable.particle_count; i++) {
      real w = scene.cable.inv_mass[i];
      masses[i] = w > 0 ? 1.0 / w : 1e30;
    }
    add_point_pairs(scene.cable.x, scene.cable.v, masses);
  }
  for (const auto& plane : scene.planes) {
    auto pp = plane_contact(s.fem.positions, s.fem.velocities, s.surface_nodes, plane,
                            scene.contact);
    for (const auto& p : pp) {
      force += p.f_n + p.f_t;
      center += s.fem.positions[p.node];
      touches++;
    }
  }

  Mat3 rt = transpose(s.pose.rotation);
  obs.force = rt * force;
  if (touches > 0) {
    obs.contact_valid = true;
    obs.contact_center = project_to_sensor_frame(s.pose, center / touches);
  }
  return obs;
}

Vec3 object_centroid(const MpmParticles& mpm, int body) {
  Vec3 c{};
  real m = 0;
  for (int p = 0; p < mpm.count; p++) {
    if (body >= 0 && mpm.body_id[p] != body) continue;
    c += mpm.mass[p] * mpm.x[p];
    m += mpm.mass[p];
  }
  return m > 0 ? c / m : c;
}

Mat3 object_rotation(const MpmParticles& mpm, int body) {
  Vec3 c{}, c0{};
  real m = 0;
  for (int p = 0; p < mpm.count; p++) {
    if (body >= 0 && mpm.body_id[p] != body) continue;
    c += mpm.mass[p] * mpm.x[p];
    c0 += mpm.mass[p] * mpm.rest_x[p];
    m += mpm.mass[p];
  }
  if (m <= 0) return Mat3::identity();
  c = c / m;
  c0 = c0 / m;
  Mat3 a = Mat3::zero();
  for (int p = 0; p < mpm.count; p++) {
    if (body >= 0 && mpm.body_id[p] != body) continue;
    a += mpm.mass[p] * Mat3::outer(mpm.x[p] - c, mpm.rest_x[p] - c0);
  }
  return polar_rotation(a);
}

}  // namespace dt
