// Explicit FEM simulation of the sensor's hyperelastic gel, boundary-driven
// at its base, with marker and force observations.
#pragma once

#include <stdexcept>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dt/math.hpp"

namespace dt {

struct TetMeshTopology {
  int node_count = 0;
  std::vector<std::array<int, 4>> elements;
  struct SurfaceTri {
    std::array<int, 3> nodes;  // wound so that the cross product points outward
    int element;
  };
  std::vector<SurfaceTri> surface_triangles;
  std::vector<uint8_t> base_node_mask;  // boundary-condition node set

  int element_count() const { return static_cast<int>(elements.size()); }
};

struct ElastomerMaterial {
  real mu = 1.294e3;      // Pa
  real lambda = 9.201e3;  // Pa
};

struct SensorPose {
  Mat3 rotation = Mat3::identity();
  Vec3 translation;
};

// Rigid velocity command for one frame: angular (rad/s) and linear (units/s).
struct Twist {
  Vec3 angular;
  Vec3 linear;
};

struct FemState {
  std::vector<Vec3> positions;
  std::vector<Vec3> velocities;
  std::vector<Vec3> external_forces;  // contact scatter target, cleared per substep
  std::vector<Mat3> dm_inv;           // per-element rest shape-matrix inverse
  std::vector<real> rest_volumes;
  std::vector<real> node_masses;
};

struct FemError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Populates Dm_inv, rest volumes and lumped node masses from rest positions.
FemState precompute_rest(const TetMeshTopology& topo, const std::vector<Vec3>& positions,
                         real density = 1.0e3);

real neo_hookean_energy(const Mat3& f, const ElastomerMaterial& mat);
Mat3 first_piola_stress(const Mat3& f, const ElastomerMaterial& mat);

// Overwrites `forces` with the per-node internal elastic forces.
// Throws FemError naming the element on inversion (J <= 0).
void accumulate_elastic_forces(const TetMeshTopology& topo, const FemState& state,
                               const ElastomerMaterial& mat, std::vector<Vec3>& forces);

// Sets base-node velocities to the rigid field of `action` about the pose center.
void apply_base_control(const TetMeshTopology& topo, FemState& state,
                        const SensorPose& pose, const Twist& action);

// Symplectic Euler over non-base nodes; base nodes advect with prescribed velocity.
void integrate_nodes(const TetMeshTopology& topo, FemState& state,
                     const std::vector<Vec3>& elastic_forces, real dt,
                     const Vec3& gravity, real damping = 0);

struct SurfaceSnapshot {
  std::vector<Vec3> tri_normals;  // outward unit normals
  // Vertex positions/velocities live in FemState; triangle list in topology.
};

SurfaceSnapshot extract_surface(const TetMeshTopology& topo, const FemState& state);

// Orthographic top-down camera over the gel; a pinhole option sits behind config.
struct CameraModel {
  enum class Kind { Orthographic, Pinhole };
  Kind kind = Kind::Orthographic;
  real pixels_per_unit = 2000;
  real center_u = 160, center_v = 120;
  real focal_px = 2000;     // pinhole only
  real camera_height = 0.3;  // pinhole only, above gel center
};

struct MarkerSet {
  struct Attachment {
    int triangle;    // surface triangle index
    Vec3 weights;    // barycentric
  };
  std::vector<Attachment> attachments;
  std::vector<std::array<real, 2>> initial_px;
};

// 3D marker = barycentric combination of its triangle's vertices, expressed in
// the sensor frame, then projected by the camera.
std::vector<std::array<real, 2>> observe_markers(const TetMeshTopology& topo,
                                                 const FemState& state,
                                                 const SensorPose& pose,
                                                 const MarkerSet& markers,
                                                 const CameraModel& camera);

Vec3 project_to_sensor_frame(const SensorPose& pose, const Vec3& world);
std::array<real, 2> camera_project(const CameraModel& camera, const Vec3& local);

// Default sensor geometry: gel dome (hemispherical shell, apex pointing -z,
// base ring in the z=0 plane) voxelized and 5-split into tets.
struct DomeSpec {
  real inner_radius = 0.075;
  real outer_radius = 0.15;
  int resolution = 10;  // lattice cells across the diameter
  bool solid = false;   // fill the inner cavity too
};

struct SensorMesh {
  TetMeshTopology topology;
  std::vector<Vec3> rest_positions;  // local frame, base plane at z = 0
};

SensorMesh build_dome_sensor(const DomeSpec& spec);

// Orients elements positively and extracts the outward-wound surface.
// base_node_mask is left all-zero for the caller to fill.
TetMeshTopology finalize_topology(std::vector<std::array<int, 4>>& elements,
                                  const std::vector<Vec3>& positions);

// Uniform marker grid (rows x cols, default 8x17 = 136) over the sensor
// footprint, attached to the closest downward-facing surface triangle at rest.
MarkerSet build_marker_grid(const SensorMesh& mesh, const CameraModel& camera,
                            int rows = 8, int cols = 17, real footprint_scale = 0.62);

// Marker calibration CSV: one "u,v" pixel pair per line.
std::vector<std::array<real, 2>> load_marker_calibration(const std::string& path);

// Text mesh format: "nodes N" then N lines "x y z", "elements M" then M lines
// of 4 zero-based node indices.
SensorMesh load_tet_mesh(const std::string& path);

}  // namespace dt
