#include <doctest.h>

#include <random>

#include "dt/fem.hpp"

using namespace dt;

namespace {

Mat3 random_deformation(std::mt19937& rng, real spread = 0.3) {
  std::uniform_real_distribution<real> u(-spread, spread);
  Mat3 f = Mat3::identity();
  for (int i = 0; i < 9; i++) f.m[i] += u(rng);
  if (det(f) < 0.2) return Mat3::identity();  // keep well away from inversion
  return f;
}

// Two-tet mesh sharing a face, for force checks.
struct SmallMesh {
  TetMeshTopology topo;
  std::vector<Vec3> rest;
};

SmallMesh make_small_mesh() {
  SmallMesh m;
  m.rest = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 1}};
  std::vector<std::array<int, 4>> elements = {{0, 1, 2, 3}, {1, 2, 3, 4}};
  m.topo = finalize_topology(elements, m.rest);
  return m;
}

real total_energy(const SmallMesh& m, const FemState& st, const ElastomerMaterial& mat) {
  real e = 0;
  for (int el = 0; el < m.topo.element_count(); el++) {
    const auto& t = m.topo.elements[el];
    Mat3 ds;
    for (int k = 0; k < 3; k++)
      ds.set_col(k, st.positions[t[k + 1]] - st.positions[t[0]]);
    Mat3 f = ds * st.dm_inv[el];
    e += st.rest_volumes[el] * neo_hookean_energy(f, mat);
  }
  return e;
}

}  // namespace

TEST_CASE("first_piola_stress matches finite differences of the energy") {
  ElastomerMaterial mat;
  std::mt19937 rng(17);
  for (int trial = 0; trial < 40; trial++) {
    Mat3 f = random_deformation(rng);
    Mat3 p = first_piola_stress(f, mat);
    const real h = 1e-6;
    for (int i = 0; i < 9; i++) {
      Mat3 fp = f, fm = f;
      fp.m[i] += h;
      fm.m[i] -= h;
      real fd = (neo_hookean_energy(fp, mat) - neo_hookean_energy(fm, mat)) / (2 * h);
      CHECK(p.m[i] == doctest::Approx(fd).epsilon(1e-5).scale(1e3));
    }
  }
}

TEST_CASE("energy is zero and stress-free at rest and under rotation") {
  ElastomerMaterial mat;
  CHECK(neo_hookean_energy(Mat3::identity(), mat) == doctest::Approx(0));
  Mat3 r = axis_angle(normalized(Vec3{1, 1, 0}), 0.6);
  CHECK(neo_hookean_energy(r, mat) == doctest::Approx(0).epsilon(1e-9));
  Mat3 p = first_piola_stress(r, mat);
  for (int i = 0; i < 9; i++) CHECK(std::abs(p.m[i]) < 1e-6);
}

TEST_CASE("elastic forces are minus the gradient of total energy") {
  SmallMesh m = make_small_mesh();
  FemState st = precompute_rest(m.topo, m.rest);
  ElastomerMaterial mat;
  std::mt19937 rng(23);
  std::uniform_real_distribution<real> u(-0.05, 0.05);
  for (auto& p : st.positions) p += Vec3{u(rng), u(rng), u(rng)};

  std::vector<Vec3> forces;
  accumulate_elastic_forces(m.topo, st, mat, forces);

  const real h = 1e-6;
  for (int i = 0; i < m.topo.node_count; i++)
    for (int a = 0; a < 3; a++) {
      FemState sp = st, sm = st;
      sp.positions[i][a] += h;
      sm.positions[i][a] -= h;
      real fd = -(total_energy(m, sp, mat) - total_energy(m, sm, mat)) / (2 * h);
      CHECK(forces[i][a] == doctest::Approx(fd).epsilon(1e-5).scale(1e2));
    }
}

TEST_CASE("elastic forces sum to zero (translation invariance)") {
  SmallMesh m = make_small_mesh();
  FemState st = precompute_rest(m.topo, m.rest);
  std::mt19937 rng(29);
  std::uniform_real_distribution<real> u(-0.1, 0.1);
  for (auto& p : st.positions) p += Vec3{u(rng), u(rng), u(rng)};
  std::vector<Vec3> forces;
  accumulate_elastic_forces(m.topo, st, ElastomerMaterial{}, forces);
  Vec3 sum{};
  for (const auto& f : forces) sum += f;
  CHECK(norm(sum) < 1e-8);
}

TEST_CASE("inverted element raises a FemError naming the element") {
  SmallMesh m = make_small_mesh();
  FemState st = precompute_rest(m.topo, m.rest);
  st.positions[4] = Vec3{-2, -2, -2};  // flips the second tet
  std::vector<Vec3> forces;
  CHECK_THROWS_AS(accumulate_elastic_forces(m.topo, st, ElastomerMaterial{}, forces),
                  FemError);
}

TEST_CASE("symplectic Euler free fall of unconstrained nodes") {
  SmallMesh m = make_small_mesh();
  FemState st = precompute_rest(m.topo, m.rest);
  std::vector<Vec3> zero(m.topo.node_count, Vec3{});
  Vec3 g{0, 0, -9.8};
  const real dt = 1e-3;
  for (int k = 0; k < 10; k++) integrate_nodes(m.topo, st, zero, dt, g);
  for (const auto& v : st.velocities) CHECK(v.z == doctest::Approx(10 * dt * g.z));
}

TEST_CASE("base control drives a rigid velocity field about the pose center") {
  SmallMesh m = make_small_mesh();
  m.topo.base_node_mask.assign(m.topo.node_count, 0);
  m.topo.base_node_mask[0] = m.topo.base_node_mask[1] = 1;
  FemState st = precompute_rest(m.topo, m.rest);
  SensorPose pose;
  pose.translation = {0.5, 0.5, 0};
  Twist tw;
  tw.angular = {0, 0, 2};
  tw.linear = {0.1, 0, 0};
  apply_base_control(m.topo, st, pose, tw);
  for (int i = 0; i < m.topo.node_count; i++) {
    Vec3 expect = m.topo.base_node_mask[i]
                      ? tw.linear + cross(tw.angular, st.positions[i] - pose.translation)
                      : Vec3{};
    CHECK(norm(st.velocities[i] - expect) < 1e-12);
  }
}

TEST_CASE("dome sensor mesh is sane") {
  DomeSpec spec;
  spec.resolution = 8;
  SensorMesh mesh = build_dome_sensor(spec);
  CHECK(mesh.topology.node_count > 50);
  CHECK(!mesh.topology.surface_triangles.empty());
  // all tets positively oriented
  for (const auto& t : mesh.topology.elements) {
    Mat3 ds;
    for (int k = 0; k < 3; k++)
      ds.set_col(k, mesh.rest_positions[t[k + 1]] - mesh.rest_positions[t[0]]);
    CHECK(det(ds) > 0);
  }
  // nodes live in the lower hemisphere shell, base mask near z = 0
  int base = 0;
  for (int i = 0; i < mesh.topology.node_count; i++) {
    CHECK(mesh.rest_positions[i].z <= 1e-9);
    CHECK(norm(mesh.rest_positions[i]) <= spec.outer_radius * 1.3);
    if (mesh.topology.base_node_mask[i]) {
      base++;
      CHECK(std::abs(mesh.rest_positions[i].z) < spec.outer_radius / 2);
    }
  }
  CHECK(base > 0);
  CHECK(base < mesh.topology.node_count);
  // surface normals point away from the mesh interior on average
  FemState st = precompute_rest(mesh.topology, mesh.rest_positions);
  SurfaceSnapshot snap = extract_surface(mesh.topology, st);
  for (const auto& n : snap.tri_normals) CHECK(norm(n) == doctest::Approx(1));
}

TEST_CASE("markers ride the surface and ignore rigid pose moves") {
  DomeSpec spec;
  spec.resolution = 8;
  auto mesh = build_dome_sensor(spec);
  CameraModel cam;
  MarkerSet markers = build_marker_grid(mesh, cam);
  CHECK(markers.attachments.size() == 136);

  SensorPose pose;
  FemState st = precompute_rest(mesh.topology, mesh.rest_positions);
  auto px0 = observe_markers(mesh.topology, st, pose, markers, cam);

  // translate sensor and pose together: pixels must not move
  Vec3 shift{0.01, -0.02, 0.005};
  FemState st2 = st;
  for (auto& p : st2.positions) p += shift;
  SensorPose pose2 = pose;
  pose2.translation += shift;
  auto px1 = observe_markers(mesh.topology, st2, pose2, markers, cam);
  for (size_t i = 0; i < px0.size(); i++) {
    CHECK(px0[i][0] == doctest::Approx(px1[i][0]).epsilon(1e-10));
    CHECK(px0[i][1] == doctest::Approx(px1[i][1]).epsilon(1e-10));
  }

  // deforming the gel does move pixels
  FemState st3 = st;
  for (auto& p : st3.positions) p.x += 0.3 * p.z;  // shear
  auto px2 = observe_markers(mesh.topology, st3, pose, markers, cam);
  real moved = 0;
  for (size_t i = 0; i < px0.size(); i++)
    moved = std::max(moved, std::abs(px2[i][0] - px0[i][0]));
  CHECK(moved > 0.5);
}
