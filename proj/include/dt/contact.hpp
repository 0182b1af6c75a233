// Penalty contact between the FEM sensor surface and MPM grid nodes, PBD
// particles, or static environment planes. Normal spring-damper with
// Coulomb-capped tangential friction.
#pragma once

#include <map>
#include <vector>

#include "dt/fem.hpp"
#include "dt/math.hpp"

namespace dt {

struct ContactParams {
  real k_n = 55.33;  // contact stiffness
  real k_d = 239.97; // contact damping
  real k_t = 94.35;  // friction stiffness
  real mu = 4.90;    // friction coefficient
};

struct ContactPair {
  int triangle = -1;
  int counterpart = -1;  // index into the counterpart point array
  real d = 0;            // signed distance, negative = penetrating
  Vec3 n;                // triangle outward unit normal
  Vec3 bary;             // closest-point barycentric weights
  int region = 0;
  real vn = 0;           // approach speed (positive = closing)
  Vec3 vt;               // tangential relative velocity of the counterpart
  Vec3 f_n, f_t;         // forces on the counterpart
  real c_t = 0;          // effective viscous friction coefficient (see below)
  bool saturated = false;  // Coulomb branch of the friction min()
};

// Uniform spatial hash over surface triangles, cell = 2 * max edge length.
class TriangleHash {
 public:
  void build(const TetMeshTopology& topo, const std::vector<Vec3>& positions);
  // Triangles in the 27-cell neighborhood of p, ascending index.
  void query(const Vec3& p, std::vector<int>& out) const;
  real mean_edge() const { return mean_edge_; }

 private:
  real cell_ = 0;
  real mean_edge_ = 0;
  std::map<std::array<int, 3>, std::vector<int>> cells_;
};

// One pair per penetrating counterpart: closest triangle by |d|, ties broken
// by lower triangle index. Penetration beyond `cap` is clamped to -cap.
std::vector<ContactPair> detect_pairs(const TetMeshTopology& topo,
                                      const std::vector<Vec3>& positions,
                                      const SurfaceSnapshot& snapshot,
                                      const TriangleHash& hash,
                                      const std::vector<Vec3>& counterpart_positions,
                                      const std::vector<int>& counterpart_indices,
                                      real cap);

// Fills vn/vt/f_n/f_t from the relative velocity of the pair.
//   f_n = -(k_n + k_d vn) d n,  f_t = -(vt/|vt|) min(c_t |vt|, mu |f_n|)
// where c_t = min(k_t, c_cap). `c_cap` bounds the tangential force by the
// impulse a light counterpart can absorb in one step without its velocity
// reversing (callers pass ~0.5 * mass / dt); infinite by default, which
// reproduces the plain Coulomb law.
void compute_pair_force(ContactPair& pair, const ContactParams& params,
                        const Vec3& v_triangle, const Vec3& v_counterpart,
                        real c_cap = 1e30);

// f_n + f_t goes to the counterpart; the opposite force spreads to the
// triangle's nodes by the closest-point barycentric weights.
void scatter_pair_force(const ContactPair& pair, const TetMeshTopology& topo,
                        std::vector<Vec3>& fem_forces, Vec3& counterpart_force);

// Static environment plane x . normal = offset; the half space below is solid.
struct PlaneSpec {
  Vec3 normal{0, 0, 1};
  real offset = 0;
};

struct PlanePair {
  int node = -1;
  real d = 0;
  real vn = 0;
  Vec3 vt;
  Vec3 f_n, f_t;  // forces on the FEM node
  bool saturated = false;
};

// FEM surface nodes against a static plane, same force law with a resting
// counterpart. Forces land directly on the nodes.
std::vector<PlanePair> plane_contact(const std::vector<Vec3>& positions,
                                     const std::vector<Vec3>& velocities,
                                     const std::vector<int>& surface_nodes,
                                     const PlaneSpec& plane, const ContactParams& params);

// Unique node indices referenced by surface triangles, ascending.
std::vector<int> surface_node_list(const TetMeshTopology& topo);

}  // namespace dt
