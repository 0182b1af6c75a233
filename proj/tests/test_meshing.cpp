#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "dt/meshing.hpp"

using namespace dt;

TEST_CASE("box mesh is watertight and contains its center") {
  TriMesh box = make_box_mesh({0.5, 0.4, 0.3});
  check_watertight(box);
  CHECK(point_inside_mesh(box, {0, 0, 0}));
  CHECK(point_inside_mesh(box, {0.49, 0.39, 0.29}));
  CHECK(!point_inside_mesh(box, {0.6, 0, 0}));
  CHECK(!point_inside_mesh(box, {0, 0, 0.31}));
}

TEST_CASE("sphere mesh approximates a sphere") {
  TriMesh s = make_sphere_mesh(1.0, 3);
  check_watertight(s);
  for (const auto& v : s.vertices) CHECK(norm(v) == doctest::Approx(1.0));
  CHECK(point_inside_mesh(s, {0, 0, 0}));
  CHECK(!point_inside_mesh(s, {1.05, 0, 0}));
}

TEST_CASE("voxelize covers roughly the right volume") {
  TriMesh box = make_box_mesh({0.5, 0.5, 0.5});
  VoxelLattice lat = voxelize(box, 10);
  // unit cube, 10 cells across: ~1000 inside cells
  CHECK(lat.inside_count() > 700);
  CHECK(lat.inside_count() <= 1100);
  real vol = lat.inside_count() * lat.cell * lat.cell * lat.cell;
  CHECK(vol == doctest::Approx(1.0).epsilon(0.3));
}

TEST_CASE("obj loader reads vertices and fan-triangulates") {
  const char* path = "test_tmp_mesh.obj";
  {
    std::ofstream f(path);
    f << "# comment\n"
         "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
         "f 1 2 3 4\n";
  }
  TriMesh m = load_surface_mesh(path);
  std::remove(path);
  CHECK(m.vertices.size() == 4);
  CHECK(m.triangles.size() == 2);  // quad split into two
}

TEST_CASE("ascii and binary stl round-trip through the loader") {
  const char* apath = "test_tmp_mesh_ascii.stl";
  {
    std::ofstream f(apath);
    f << "solid t\n"
         " facet normal 0 0 1\n  outer loop\n"
         "   vertex 0 0 0\n   vertex 1 0 0\n   vertex 0 1 0\n"
         "  endloop\n endfacet\nendsolid t\n";
  }
  TriMesh a = load_surface_mesh(apath);
  std::remove(apath);
  CHECK(a.triangles.size() == 1);
  CHECK(a.vertices.size() == 3);

  const char* bpath = "test_tmp_mesh_bin.stl";
  {
    std::ofstream f(bpath, std::ios::binary);
    char header[80] = {0};
    f.write(header, 80);
    uint32_t count = 1;
    f.write(reinterpret_cast<char*>(&count), 4);
    float tri[12] = {0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0};
    f.write(reinterpret_cast<char*>(tri), 48);
    uint16_t attr = 0;
    f.write(reinterpret_cast<char*>(&attr), 2);
  }
  TriMesh b = load_surface_mesh(bpath);
  std::remove(bpath);
  CHECK(b.triangles.size() == 1);

  // truncated binary file errors out
  const char* tpath = "test_tmp_mesh_trunc.stl";
  {
    std::ofstream f(tpath, std::ios::binary);
    char header[80] = {0};
    f.write(header, 80);
    uint32_t count = 5;
    f.write(reinterpret_cast<char*>(&count), 4);
  }
  CHECK_THROWS_AS((void)load_surface_mesh(tpath), MeshError);
  std::remove(tpath);
}

TEST_CASE("open mesh fails the watertight check") {
  TriMesh open;
  open.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  open.triangles = {{0, 1, 2}};
  CHECK_THROWS_AS(check_watertight(open), MeshError);
}

TEST_CASE("lattice tetrahedralization produces positive tets") {
  TriMesh box = make_box_mesh({0.5, 0.5, 0.5});
  VoxelLattice lat = voxelize(box, 4);
  SensorMesh mesh = tetrahedralize_lattice(lat);
  CHECK(mesh.topology.element_count() > 0);
  real vol = 0;
  for (const auto& t : mesh.topology.elements) {
    Mat3 ds;
    for (int k = 0; k < 3; k++)
      ds.set_col(k, mesh.rest_positions[t[k + 1]] - mesh.rest_positions[t[0]]);
    real d = det(ds);
    CHECK(d > 0);
    vol += d / 6;
  }
  // tets tile the voxelized volume exactly
  real lat_vol = lat.inside_count() * lat.cell * lat.cell * lat.cell;
  CHECK(vol == doctest::Approx(lat_vol).epsilon(1e-9));
}
