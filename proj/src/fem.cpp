#include "dt/fem.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace dt {

FemState precompute_rest(const TetMeshTopology& topo, const std::vector<Vec3>& positions,
                         real density) {
  FemState s;
  s.positions = positions;
  s.velocities.assign(topo.node_count, Vec3{});
  s.external_forces.assign(topo.node_count, Vec3{});
  s.dm_inv.resize(topo.element_count());
  s.rest_volumes.resize(topo.element_count());
  s.node_masses.assign(topo.node_count, 0);
  for (int e = 0; e < topo.element_count(); e++) {
    const auto& el = topo.elements[e];
    Vec3 d1 = positions[el[1]] - positions[el[0]];
    Vec3 d2 = positions[el[2]] - positions[el[0]];
    Vec3 d3 = positions[el[3]] - positions[el[0]];
    Mat3 dm;
    dm.set_col(0, d1);
    dm.set_col(1, d2);
    dm.set_col(2, d3);
    real vol = det(dm) / 6.0;
    if (vol <= 0)
      throw FemError("element " + std::to_string(e) + " has non-positive rest volume");
    s.dm_inv[e] = inverse(dm);
    s.rest_volumes[e] = vol;
    for (int k = 0; k < 4; k++) s.node_masses[el[k]] += 0.25 * density * vol;
  }
  for (int i = 0; i < topo.node_count; i++)
    if (s.node_masses[i] <= 0)
      throw FemError("node " + std::to_string(i) + " has zero mass (unreferenced)");
  return s;
}

real neo_hookean_energy(const Mat3& f, const ElastomerMaterial& mat) {
  real j = det(f);
  if (j <= 0) throw FemError("neo_hookean_energy: element inversion (J <= 0)");
  real i1 = ddot(f, f);
  real lj = std::log(j);
  return 0.5 * mat.mu * (i1 - 3) - mat.mu * lj + 0.5 * mat.lambda * lj * lj;
}

Mat3 first_piola_stress(const Mat3& f, const ElastomerMaterial& mat) {
  real j = det(f);
  if (j <= 0) throw FemError("first_piola_stress: element inversion (J <= 0)");
  Mat3 finv_t = transpose(inverse(f));
  return mat.mu * (f - finv_t) + (mat.lambda * std::log(j)) * finv_t;
}

void accumulate_elastic_forces(const TetMeshTopology& topo, const FemState& state,
                               const ElastomerMaterial& mat, std::vector<Vec3>& forces) {
  forces.assign(topo.node_count, Vec3{});
  for (int e = 0; e < topo.element_count(); e++) {
    const auto& el = topo.elements[e];
    Mat3 ds;
    ds.set_col(0, state.positions[el[1]] - state.positions[el[0]]);
    ds.set_col(1, state.positions[el[2]] - state.positions[el[0]]);
    ds.set_col(2, state.positions[el[3]] - state.positions[el[0]]);
    Mat3 f = ds * state.dm_inv[e];
    if (det(f) <= 0)
      throw FemError("element " + std::to_string(e) + " inverted during step");
    Mat3 p = first_piola_stress(f, mat);
    Mat3 h = (-state.rest_volumes[e]) * (p * transpose(state.dm_inv[e]));
    Vec3 h1 = h.col(0), h2 = h.col(1), h3 = h.col(2);
    forces[el[1]] += h1;
    forces[el[2]] += h2;
    forces[el[3]] += h3;
    forces[el[0]] -= h1 + h2 + h3;
  }
}

void apply_base_control(const TetMeshTopology& topo, FemState& state,
                        const SensorPose& pose, const Twist& action) {
  for (int i = 0; i < topo.node_count; i++) {
    if (!topo.base_node_mask[i]) continue;
    state.velocities[i] =
        action.linear + cross(action.angular, state.positions[i] - pose.translation);
  }
}

void integrate_nodes(const TetMeshTopology& topo, FemState& state,
                     const std::vector<Vec3>& elastic_forces, real dt,
                     const Vec3& gravity, real damping) {
  for (int i = 0; i < topo.node_count; i++) {
    if (!topo.base_node_mask[i]) {
      Vec3 a = (elastic_forces[i] + state.external_forces[i]) / state.node_masses[i] + gravity;
      Vec3 v = state.velocities[i] + dt * a;
      v *= (1.0 - dt * damping);
      state.velocities[i] = v;
    }
    state.positions[i] += dt * state.velocities[i];
    if (!std::isfinite(state.positions[i].x) || !std::isfinite(state.positions[i].y) ||
        !std::isfinite(state.positions[i].z))
      throw FemError("NaN detected at node " + std::to_string(i));
  }
}

SurfaceSnapshot extract_surface(const TetMeshTopology& topo, const FemState& state) {
  SurfaceSnapshot snap;
  snap.tri_normals.resize(topo.surface_triangles.size());
  for (size_t t = 0; t < topo.surface_triangles.size(); t++) {
    const auto& tri = topo.surface_triangles[t];
    Vec3 a = state.positions[tri.nodes[0]];
    Vec3 b = state.positions[tri.nodes[1]];
    Vec3 c = state.positions[tri.nodes[2]];
    snap.tri_normals[t] = normalized(cross(b - a, c - a));
  }
  return snap;
}

Vec3 project_to_sensor_frame(const SensorPose& pose, const Vec3& world) {
  return transpose(pose.rotation) * (world - pose.translation);
}

std::array<real, 2> camera_project(const CameraModel& camera, const Vec3& local) {
  if (camera.kind == CameraModel::Kind::Orthographic) {
    return {camera.center_u + camera.pixels_per_unit * local.x,
            camera.center_v + camera.pixels_per_unit * local.y};
  }
  real depth = camera.camera_height - local.z;
  return {camera.center_u + camera.focal_px * local.x / depth,
          camera.center_v + camera.focal_px * local.y / depth};
}

std::vector<std::array<real, 2>> observe_markers(const TetMeshTopology& topo,
                                                 const FemState& state,
                                                 const SensorPose& pose,
                                                 const MarkerSet& markers,
                                                 const CameraModel& camera) {
  std::vector<std::array<real, 2>> px(markers.attachments.size());
  for (size_t m = 0; m < markers.attachments.size(); m++) {
    const auto& at = markers.attachments[m];
    const auto& tri = topo.surface_triangles[at.triangle];
    Vec3 world = at.weights.x * state.positions[tri.nodes[0]] +
                 at.weights.y * state.positions[tri.nodes[1]] +
                 at.weights.z * state.positions[tri.nodes[2]];
    px[m] = camera_project(camera, project_to_sensor_frame(pose, world));
  }
  return px;
}

namespace {

// 5-tet split of a unit cell; parity alternates to keep shared faces conforming.
void split_cell(int n[8], bool odd, std::vector<std::array<int, 4>>& out) {
  // corner order: n[i + 2j + 4k] for corner (i, j, k)
  const int v0 = n[0], v1 = n[1], v3 = n[2], v2 = n[3];
  const int v4 = n[4], v5 = n[5], v7 = n[6], v6 = n[7];
  if (!odd) {
    out.push_back({v0, v1, v2, v5});
    out.push_back({v0, v2, v3, v7});
    out.push_back({v4, v0, v5, v7});
    out.push_back({v2, v5, v6, v7});
    out.push_back({v0, v2, v5, v7});
  } else {
    out.push_back({v0, v1, v3, v4});
    out.push_back({v2, v1, v3, v6});
    out.push_back({v5, v1, v6, v4});
    out.push_back({v7, v3, v4, v6});
    out.push_back({v1, v3, v4, v6});
  }
}

}  // namespace

TetMeshTopology finalize_topology(std::vector<std::array<int, 4>>& elements,
                                  const std::vector<Vec3>& positions) {
  // Fix orientation so all rest volumes are positive.
  for (auto& el : elements) {
    Mat3 dm;
    dm.set_col(0, positions[el[1]] - positions[el[0]]);
    dm.set_col(1, positions[el[2]] - positions[el[0]]);
    dm.set_col(2, positions[el[3]] - positions[el[0]]);
    if (det(dm) < 0) std::swap(el[2], el[3]);
  }
  TetMeshTopology topo;
  topo.node_count = static_cast<int>(positions.size());
  topo.elements = elements;

  // Faces owned by exactly one tet form the surface.
  std::map<std::array<int, 3>, std::pair<int, int>> face_count;  // key -> (count, element)
  const int face_idx[4][3] = {{1, 2, 3}, {0, 3, 2}, {0, 1, 3}, {0, 2, 1}};
  for (int e = 0; e < topo.element_count(); e++) {
    for (const auto& fi : face_idx) {
      std::array<int, 3> key = {topo.elements[e][fi[0]], topo.elements[e][fi[1]],
                                topo.elements[e][fi[2]]};
      std::sort(key.begin(), key.end());
      auto it = face_count.find(key);
      if (it == face_count.end())
        face_count[key] = {1, e};
      else
        it->second.first++;
    }
  }
  for (int e = 0; e < topo.element_count(); e++) {
    const auto& el = topo.elements[e];
    for (int f = 0; f < 4; f++) {
      std::array<int, 3> tri = {el[face_idx[f][0]], el[face_idx[f][1]], el[face_idx[f][2]]};
      std::array<int, 3> key = tri;
      std::sort(key.begin(), key.end());
      if (face_count[key].first != 1 || face_count[key].second != e) continue;
      // wind outward: normal away from the opposite vertex
      Vec3 a = positions[tri[0]], b = positions[tri[1]], c = positions[tri[2]];
      Vec3 opp = positions[el[f]];
      if (dot(cross(b - a, c - a), opp - a) > 0) std::swap(tri[1], tri[2]);
      topo.surface_triangles.push_back({tri, e});
    }
  }
  topo.base_node_mask.assign(topo.node_count, 0);
  return topo;
}

SensorMesh build_dome_sensor(const DomeSpec& spec) {
  const real r_out = spec.outer_radius;
  const real r_in = spec.inner_radius;
  const int res = spec.resolution;
  const real h = 2 * r_out / res;  // cell size

  // Lattice over [-r_out, r_out]^2 x [-r_out, 0]; keep cells whose center lies
  // in the (shell or solid) dome below the base plane.
  const int nz = res / 2;
  auto node_id = [&](int i, int j, int k) { return (k * (res + 1) + j) * (res + 1) + i; };
  std::vector<int> remap((res + 1) * (res + 1) * (nz + 1), -1);
  std::vector<Vec3> positions;
  std::vector<std::array<int, 4>> elements;

  auto get_node = [&](int i, int j, int k) {
    int& id = remap[node_id(i, j, k)];
    if (id < 0) {
      id = static_cast<int>(positions.size());
      positions.push_back({-r_out + i * h, -r_out + j * h, -r_out + k * h});
    }
    return id;
  };

  for (int k = 0; k < nz; k++)
    for (int j = 0; j < res; j++)
      for (int i = 0; i < res; i++) {
        Vec3 c{-r_out + (i + 0.5) * h, -r_out + (j + 0.5) * h, -r_out + (k + 0.5) * h};
        real r = norm(c);
        if (r > r_out) continue;
        if (!spec.solid && r < r_in) continue;
        int n[8];
        for (int dk = 0; dk < 2; dk++)
          for (int dj = 0; dj < 2; dj++)
            for (int di = 0; di < 2; di++)
              n[di + 2 * dj + 4 * dk] = get_node(i + di, j + dj, k + dk);
        split_cell(n, (i + j + k) % 2 == 1, elements);
      }
  if (elements.empty()) throw FemError("dome voxelization produced no elements");

  SensorMesh mesh;
  mesh.rest_positions = positions;
  mesh.topology = finalize_topology(elements, positions);
  int base_nodes = 0;
  for (int i = 0; i < mesh.topology.node_count; i++) {
    if (positions[i].z > -0.5 * h) {
      mesh.topology.base_node_mask[i] = 1;
      base_nodes++;
    }
  }
  if (base_nodes == 0) throw FemError("dome mesh has no base nodes");
  return mesh;
}

MarkerSet build_marker_grid(const SensorMesh& mesh, const CameraModel& camera,
                            int rows, int cols, real footprint_scale) {
  const auto& topo = mesh.topology;
  const auto& x = mesh.rest_positions;
  real max_x = 0;
  for (const auto& p : x) max_x = std::max(max_x, std::abs(p.x));
  real s = footprint_scale * max_x;
  real sy = s * (rows - 1) / static_cast<real>(cols - 1);

  MarkerSet markers;
  for (int r = 0; r < rows; r++)
    for (int c = 0; c < cols; c++) {
      real px = -s + 2 * s * c / (cols - 1);
      real py = -sy + 2 * sy * r / (rows - 1);
      // pick the lowest downward-facing surface triangle containing (px, py)
      int best_tri = -1;
      Vec3 best_w;
      real best_z = 1e30;
      real best_dist = 1e30;
      int near_tri = -1;
      for (size_t t = 0; t < topo.surface_triangles.size(); t++) {
        const auto& tri = topo.surface_triangles[t];
        Vec3 a = x[tri.nodes[0]], b = x[tri.nodes[1]], cc = x[tri.nodes[2]];
        Vec3 n = normalized(cross(b - a, cc - a));
        if (n.z > -0.2) continue;
        Vec3 a2{a.x, a.y, 0}, b2{b.x, b.y, 0}, c2{cc.x, cc.y, 0};
        if (norm(cross(b2 - a2, c2 - a2)) < 1e-14) continue;
        Bary w = barycentric_weights({px, py, 0}, a2, b2, c2);
        if (!w.clamped) {
          real z = w.w0 * a.z + w.w1 * b.z + w.w2 * cc.z;
          if (z < best_z) {
            best_z = z;
            best_tri = static_cast<int>(t);
            best_w = {w.w0, w.w1, w.w2};
          }
        }
        Vec3 cen = (a2 + b2 + c2) / 3.0;
        real d2 = norm_sq(cen - Vec3{px, py, 0});
        if (d2 < best_dist) {
          best_dist = d2;
          near_tri = static_cast<int>(t);
        }
      }
      if (best_tri < 0) {
        best_tri = near_tri;
        best_w = {1.0 / 3, 1.0 / 3, 1.0 / 3};
      }
      if (best_tri < 0) throw FemError("marker grid: no downward-facing surface triangles");
      const auto& tri = topo.surface_triangles[best_tri];
      Vec3 world = best_w.x * x[tri.nodes[0]] + best_w.y * x[tri.nodes[1]] +
                   best_w.z * x[tri.nodes[2]];
      markers.attachments.push_back({best_tri, best_w});
      markers.initial_px.push_back(camera_project(camera, world));
    }
  return markers;
}

std::vector<std::array<real, 2>> load_marker_calibration(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FemError("marker calibration file not found: " + path);
  std::vector<std::array<real, 2>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    for (char& ch : line)
      if (ch == ',') ch = ' ';
    std::istringstream ss(line);
    real u, v;
    if (ss >> u >> v) out.push_back({u, v});
  }
  return out;
}

SensorMesh load_tet_mesh(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FemError("mesh file not found: " + path);
  std::string tok;
  int n = 0, m = 0;
  if (!(in >> tok >> n) || tok != "nodes") throw FemError("bad mesh header in " + path);
  SensorMesh mesh;
  mesh.rest_positions.resize(n);
  for (auto& p : mesh.rest_positions)
    if (!(in >> p.x >> p.y >> p.z)) throw FemError("truncated node list in " + path);
  if (!(in >> tok >> m) || tok != "elements") throw FemError("bad element header in " + path);
  std::vector<std::array<int, 4>> elements(m);
  for (auto& el : elements)
    for (int& i : el) {
      if (!(in >> i) || i < 0 || i >= n) throw FemError("bad element index in " + path);
    }
  mesh.topology = finalize_topology(elements, mesh.rest_positions);
  real zmax = -1e30;
  for (const auto& p : mesh.rest_positions) zmax = std::max(zmax, p.z);
  for (int i = 0; i < n; i++)
    if (mesh.rest_positions[i].z > zmax - 1e-9) mesh.topology.base_node_mask[i] = 1;
  return mesh;
}

}  // namespace dt
