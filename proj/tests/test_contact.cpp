#include <doctest.h>

#include <random>

#include "dt/contact.hpp"

using namespace dt;

namespace {

struct OneTet {
  TetMeshTopology topo;
  std::vector<Vec3> pos;
};

OneTet make_tet() {
  OneTet t;
  t.pos = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  std::vector<std::array<int, 4>> elements = {{0, 1, 2, 3}};
  t.topo = finalize_topology(elements, t.pos);
  return t;
}

SurfaceSnapshot snapshot_of(const OneTet& t) {
  FemState st;
  st.positions = t.pos;
  st.velocities.assign(4, Vec3{});
  return extract_surface(t.topo, st);
}

int bottom_triangle(const OneTet& t, const SurfaceSnapshot& snap) {
  for (size_t i = 0; i < snap.tri_normals.size(); i++)
    if (snap.tri_normals[i].z < -0.9) return static_cast<int>(i);
  return -1;
}

}  // namespace

TEST_CASE("detect_pairs finds a point under the bottom face") {
  OneTet t = make_tet();
  SurfaceSnapshot snap = snapshot_of(t);
  TriangleHash hash;
  hash.build(t.topo, t.pos);

  std::vector<Vec3> pts = {{0.2, 0.2, 0.01}, {0.2, 0.2, -0.5}, {2.0, 2.0, 0.0}};
  std::vector<int> idx = {0, 1, 2};
  auto pairs = detect_pairs(t.topo, t.pos, snap, hash, pts, idx, 0.1);

  // only the first point penetrates: it sits just above z=0 i.e. inside the tet,
  // behind the bottom face whose outward normal is -z
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].counterpart == 0);
  int bt = bottom_triangle(t, snap);
  CHECK(pairs[0].triangle == bt);
  CHECK(pairs[0].d == doctest::Approx(-0.01));
  CHECK(pairs[0].region == 0);
  Vec3 rec{};
  const auto& tri = t.topo.surface_triangles[pairs[0].triangle];
  for (int k = 0; k < 3; k++) rec += pairs[0].bary[k] * t.pos[tri.nodes[k]];
  CHECK(norm(rec - Vec3{0.2, 0.2, 0}) < 1e-12);
}

TEST_CASE("deep penetration is clamped to the cap") {
  OneTet t = make_tet();
  SurfaceSnapshot snap = snapshot_of(t);
  TriangleHash hash;
  hash.build(t.topo, t.pos);
  std::vector<Vec3> pts = {{0.2, 0.2, 0.2}};  // 0.2 deep w.r.t. bottom face
  std::vector<int> idx = {0};
  auto pairs = detect_pairs(t.topo, t.pos, snap, hash, pts, idx, 0.05);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].d == doctest::Approx(-0.05));
}

TEST_CASE("normal force law and direction") {
  ContactPair pair;
  pair.d = -0.02;
  pair.n = {0, 0, -1};
  ContactParams params;
  // counterpart approaching the face from outside: moving +z against -z normal
  compute_pair_force(pair, params, Vec3{}, Vec3{0, 0, 0.5});
  CHECK(pair.vn == doctest::Approx(0.5));  // closing
  Vec3 expect = -(params.k_n + params.k_d * 0.5) * pair.d * pair.n;
  CHECK(norm(pair.f_n - expect) < 1e-12);
  // pushes the penetrating counterpart back out along the outward normal
  CHECK(dot(pair.f_n, pair.n) > 0);
  CHECK(pair.f_n.z < 0);
}

TEST_CASE("friction never exceeds the Coulomb cone (property)") {
  std::mt19937 rng(61);
  std::uniform_real_distribution<real> u(-1, 1);
  std::uniform_real_distribution<real> ukn(10, 100), ukd(100, 400), ukt(50, 150),
      umu(0.1, 20);
  for (int trial = 0; trial < 500; trial++) {
    ContactPair pair;
    pair.d = -std::abs(u(rng)) * 0.05;
    Vec3 n{u(rng), u(rng), u(rng)};
    if (norm(n) < 1e-3) continue;
    pair.n = normalized(n);
    ContactParams params;
    params.k_n = ukn(rng);
    params.k_d = ukd(rng);
    params.k_t = ukt(rng);
    params.mu = umu(rng);
    Vec3 v_tri{u(rng), u(rng), u(rng)}, v_cp{u(rng), u(rng), u(rng)};
    compute_pair_force(pair, params, v_tri, v_cp);
    CHECK(norm(pair.f_t) <= params.mu * norm(pair.f_n) + 1e-9);
    // tangential force opposes tangential motion and is orthogonal to n
    if (norm(pair.f_t) > 0) {
      CHECK(dot(pair.f_t, pair.vt) < 0);
      CHECK(std::abs(dot(pair.f_t, pair.n)) < 1e-9 * norm(pair.f_t));
    }
    // static-ish case uses the elastic branch
    if (!pair.saturated)
      CHECK(norm(pair.f_t) == doctest::Approx(params.k_t * norm(pair.vt)).epsilon(1e-9));
  }
}

TEST_CASE("scatter conserves total force") {
  OneTet t = make_tet();
  ContactPair pair;
  pair.triangle = 0;
  pair.counterpart = 0;
  pair.d = -0.01;
  pair.n = {0, 0, -1};
  pair.bary = {0.3, 0.5, 0.2};
  ContactParams params;
  compute_pair_force(pair, params, Vec3{0.1, 0, 0}, Vec3{0, 0.2, 0.3});
  std::vector<Vec3> fem_forces(4, Vec3{});
  Vec3 cp_force{};
  scatter_pair_force(pair, t.topo, fem_forces, cp_force);
  Vec3 total = cp_force;
  for (const auto& f : fem_forces) total += f;
  CHECK(norm(total) < 1e-14);
  CHECK(norm(cp_force - (pair.f_n + pair.f_t)) < 1e-14);
}

TEST_CASE("plane contact pushes surface nodes out") {
  OneTet t = make_tet();
  std::vector<Vec3> pos = t.pos;
  for (auto& p : pos) p.z -= 0.05;  // dip below the z=0 plane
  std::vector<Vec3> vel(4, Vec3{0.2, 0, -0.1});
  std::vector<int> nodes = {0, 1, 2, 3};
  PlaneSpec plane;  // z = 0
  ContactParams params;
  auto pairs = plane_contact(pos, vel, nodes, plane, params);
  // nodes 0,1,2 sit at z=-0.05; node 3 is above at 0.95
  CHECK(pairs.size() == 3);
  for (const auto& p : pairs) {
    CHECK(p.d == doctest::Approx(-0.05));
    CHECK(p.f_n.z > 0);
    CHECK(norm(p.f_t) <= params.mu * norm(p.f_n) + 1e-12);
    CHECK(p.f_t.x < 0);  // opposes +x sliding
  }
}

TEST_CASE("surface_node_list is unique and ascending") {
  OneTet t = make_tet();
  auto nodes = surface_node_list(t.topo);
  CHECK(nodes == std::vector<int>{0, 1, 2, 3});
}
