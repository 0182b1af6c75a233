// MLS-MPM objects: elastic (corotated / Neo-Hookean), elastoplastic
// (von Mises), rigid (shape-matching projection), articulated (per-part
// materials). Quadratic B-splines, APIC transfer, unit-cube domain.
#pragma once

#include <stdexcept>
#include <vector>

#include "dt/math.hpp"
#include "dt/meshing.hpp"

namespace dt {

enum class MaterialKind { ElasticCorotated, ElasticNeoHookean, Elastoplastic, Rigid };

struct ObjectMaterial {
  MaterialKind kind = MaterialKind::ElasticCorotated;
  real mu = 1.428e3;      // Pa
  real lambda = 5.714e3;  // Pa
  real yield_stress = 5e3;  // elastoplastic only
  real density = 1.2e3;     // kg/m^3
};

struct MpmParticles {
  int count = 0;
  std::vector<Vec3> x, v;
  std::vector<Mat3> F, C;
  std::vector<real> mass, volume0;
  std::vector<int> material_id;
  std::vector<int> body_id;
  std::vector<Vec3> rest_x;  // rigid shape matching reference
  std::vector<ObjectMaterial> materials;

  void append(const Vec3& pos, real m, real vol0, int material, int body);
};

struct MpmGrid {
  int n = 64;
  real dx = 1.0 / 64, inv_dx = 64;
  std::vector<real> mass;
  std::vector<Vec3> momentum;       // velocity after grid_update
  std::vector<Vec3> contact_force;  // scatter target from the contact module
  std::vector<int> touched;         // nodes written by p2g, sorted ascending
  std::vector<uint8_t> touched_mark;

  explicit MpmGrid(int resolution = 64);
  int idx(int i, int j, int k) const { return (k * (n + 1) + j) * (n + 1) + i; }
  int node_count() const { return (n + 1) * (n + 1) * (n + 1); }
  Vec3 node_pos(int i, int j, int k) const { return {i * dx, j * dx, k * dx}; }
  Vec3 node_pos(int gi) const {
    int i = gi % (n + 1), j = (gi / (n + 1)) % (n + 1), k = gi / ((n + 1) * (n + 1));
    return node_pos(i, j, k);
  }
  void touch(int gi) {
    if (!touched_mark[gi]) {
      touched_mark[gi] = 1;
      touched.push_back(gi);
    }
  }
  void clear();  // resets only previously touched nodes
};

struct GridBoundary {
  int padding = 3;       // cells at every domain face
  bool sticky = false;   // zero all velocity instead of the normal component
  real friction = 0.4;   // Coulomb coefficient on slip faces
  real floor_z = -1;     // extra floor height in domain units; < 0 disables
  real wall_x = -1;      // extra wall at x = wall_x (nodes beyond are constrained); < 0 disables
};

struct MpmError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Kirchhoff-style stress tau = P(F) F^T for the particle's constitutive model.
// The P2G affine term scales this by -dt * 4/dx^2 * volume0.
Mat3 particle_stress(const Mat3& f, const ObjectMaterial& material);

void p2g(const MpmParticles& particles, MpmGrid& grid, real dt, const Vec3& gravity);
void grid_update(MpmGrid& grid, real dt, const GridBoundary& boundary);

// Gathers velocity and affine field, updates F, advects. Snapshots of the
// pre-advection positions go to x_prev for rigid velocity re-derivation.
void g2p_advect(MpmParticles& particles, const MpmGrid& grid, real dt,
                std::vector<Vec3>* x_prev = nullptr);

// Hencky-space radial return. Unchanged inside the yield surface.
Mat3 von_mises_return_map(const Mat3& f, real sigma_y, real mu);

// Applies the plastic/rigid post-pass for one substep.
void apply_material_projections(MpmParticles& particles, real dt,
                                const std::vector<Vec3>& x_prev);

// Best-fit rigid transform of one body via shape matching; velocities become
// (x_new - x_prev)/dt and F resets to I.
void rigid_projection(MpmParticles& particles, int body, real dt,
                      const std::vector<Vec3>& x_prev);

// Lattice-samples the mesh interior; particles_per_axis counts lattice points
// across the scaled mesh's longest axis.
MpmParticles init_from_mesh(const TriMesh& mesh, real scale, const Vec3& translate,
                            const ObjectMaterial& material, int particles_per_axis,
                            int body = 0);

struct ArticulatedPart {
  // Particles with rest z in [z_lo, z_hi) of the combined mesh get this material.
  real z_lo, z_hi;
  ObjectMaterial material;
  bool rigid_body = false;  // full rigid projection instead of stiff elasticity
};

// One particle set, per-part materials; parts listed top to bottom must tile
// the mesh without overlap.
MpmParticles build_articulated(const TriMesh& mesh, real scale, const Vec3& translate,
                               const std::vector<ArticulatedPart>& parts,
                               int particles_per_axis);

}  // namespace dt
