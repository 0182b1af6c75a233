// Surface mesh ingestion (OBJ / STL), voxelization, and lattice tet meshing.
#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "dt/fem.hpp"
#include "dt/math.hpp"

namespace dt {

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
};

struct MeshError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// OBJ (positions/faces only, fan triangulation) or STL (ASCII and binary)
// selected by extension, with content sniffing for STL.
TriMesh load_surface_mesh(const std::string& path);

// Ray-parity inside test. Ties at the surface count as inside.
bool point_inside_mesh(const TriMesh& mesh, const Vec3& p);

struct VoxelLattice {
  Vec3 origin;
  real cell = 0;
  int nx = 0, ny = 0, nz = 0;
  std::vector<uint8_t> inside;  // nx*ny*nz cells, x fastest

  int idx(int i, int j, int k) const { return (k * ny + j) * nx + i; }
  Vec3 cell_center(int i, int j, int k) const {
    return origin + Vec3{(i + 0.5) * cell, (j + 0.5) * cell, (k + 0.5) * cell};
  }
  int inside_count() const;
};

// Classifies cell centers of a regular lattice spanning the mesh bounds.
// `resolution` is the cell count along the longest axis.
VoxelLattice voxelize(const TriMesh& mesh, int resolution);

// Requires a watertight mesh; throws MeshError when front/back parity disagrees
// on a sample of probe rays.
void check_watertight(const TriMesh& mesh);

// Each occupied cell splits into 5 tets with alternating parity.
SensorMesh tetrahedralize_lattice(const VoxelLattice& lattice);

// Axis-aligned unit-ish primitives for scene building.
TriMesh make_box_mesh(const Vec3& half_extent);
TriMesh make_sphere_mesh(real radius, int subdiv = 2);

}  // namespace dt
