#include "dt/contact.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace dt {

void TriangleHash::build(const TetMeshTopology& topo, const std::vector<Vec3>& positions) {
  cells_.clear();
  real max_edge = 0, edge_sum = 0;
  int edge_count = 0;
  for (const auto& tri : topo.surface_triangles) {
    for (int k = 0; k < 3; k++) {
      real e = norm(positions[tri.nodes[k]] - positions[tri.nodes[(k + 1) % 3]]);
      max_edge = std::max(max_edge, e);
      edge_sum += e;
      edge_count++;
    }
  }
  mean_edge_ = edge_sum / std::max(1, edge_count);
  cell_ = 2 * max_edge;
  for (size_t t = 0; t < topo.surface_triangles.size(); t++) {
    const auto& tri = topo.surface_triangles[t];
    Vec3 lo{1e30, 1e30, 1e30}, hi{-1e30, -1e30, -1e30};
    for (int k = 0; k < 3; k++) {
      const Vec3& p = positions[tri.nodes[k]];
      for (int a = 0; a < 3; a++) {
        lo[a] = std::min(lo[a], p[a]);
        hi[a] = std::max(hi[a], p[a]);
      }
    }
    int ilo[3], ihi[3];
    for (int a = 0; a < 3; a++) {
      ilo[a] = static_cast<int>(std::floor(lo[a] / cell_));
      ihi[a] = static_cast<int>(std::floor(hi[a] / cell_));
    }
    for (int i = ilo[0]; i <= ihi[0]; i++)
      for (int j = ilo[1]; j <= ihi[1]; j++)
        for (int k = ilo[2]; k <= ihi[2]; k++)
          cells_[{i, j, k}].push_back(static_cast<int>(t));
  }
}

void TriangleHash::query(const Vec3& p, std::vector<int>& out) const {
  out.clear();
  int ci = static_cast<int>(std::floor(p.x / cell_));
  int cj = static_cast<int>(std::floor(p.y / cell_));
  int ck = static_cast<int>(std::floor(p.z / cell_));
  for (int di = -1; di <= 1; di++)
    for (int dj = -1; dj <= 1; dj++)
      for (int dk = -1; dk <= 1; dk++) {
        auto it = cells_.find({ci + di, cj + dj, ck + dk});
        if (it == cells_.end()) continue;
        out.insert(out.end(), it->second.begin(), it->second.end());
      }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
}

std::vector<ContactPair> detect_pairs(const TetMeshTopology& topo,
                                      const std::vector<Vec3>& positions,
                                      const SurfaceSnapshot& snapshot,
                                      const TriangleHash& hash,
                                      const std::vector<Vec3>& counterpart_positions,
                                      const std::vector<int>& counterpart_indices,
                                      real cap) {
  std::vector<ContactPair> pairs;
  std::vector<int> candidates;

  // per-triangle bounds give an exact lower bound on the point distance, so
  // most candidates can be rejected without the full closest-point test
  std::vector<std::array<Vec3, 2>> tri_bounds(topo.surface_triangles.size());
  for (size_t t = 0; t < topo.surface_triangles.size(); t++) {
    const auto& tri = topo.surface_triangles[t];
    Vec3 lo = positions[tri.nodes[0]], hi = lo;
    for (int k = 1; k < 3; k++) {
      const Vec3& v = positions[tri.nodes[k]];
      for (int a = 0; a < 3; a++) {
        lo[a] = std::min(lo[a], v[a]);
        hi[a] = std::max(hi[a], v[a]);
      }
    }
    tri_bounds[t] = {lo, hi};
  }

  for (int cp : counterpart_indices) {
    const Vec3& p = counterpart_positions[cp];
    hash.query(p, candidates);
    // Closest triangle by unsigned distance decides inside/outside; a point
    // behind some farther face but in front of its nearest one is not a hit.
    ContactPair best;
    for (int t : candidates) {
      if (best.triangle >= 0) {
        real bound_sq = 0;
        for (int a = 0; a < 3; a++) {
          real d = std::max({tri_bounds[t][0][a] - p[a], p[a] - tri_bounds[t][1][a], 0.0});
          bound_sq += d * d;
        }
        if (bound_sq > best.d * best.d) continue;  // cannot beat or tie the best
      }
      const auto& tri = topo.surface_triangles[t];
      TriangleClosest tc = point_triangle_signed_distance(
          p, positions[tri.nodes[0]], positions[tri.nodes[1]], positions[tri.nodes[2]],
          snapshot.tri_normals[t]);
      if (best.triangle >= 0) {
        // ties at a shared edge/vertex: the non-penetrating verdict wins
        bool closer = std::abs(tc.d) < std::abs(best.d);
        bool tie_outside = std::abs(tc.d) == std::abs(best.d) && tc.d > 0 && best.d < 0;
        if (!closer && !tie_outside) continue;
      }
      best.triangle = t;
      best.counterpart = cp;
      best.d = tc.d;
      best.n = snapshot.tri_normals[t];
      best.bary = tc.bary;
      best.region = tc.region;
    }
    if (best.triangle < 0 || best.d >= 0) continue;
    if (-best.d > cap) best.d = -cap;  // deep penetration clamp
    pairs.push_back(best);
  }
  return pairs;
}

void compute_pair_force(ContactPair& pair, const ContactParams& params,
                        const Vec3& v_triangle, const Vec3& v_counterpart, real c_cap) {
  Vec3 v_rel = v_counterpart - v_triangle;
  pair.vn = -dot(v_rel, pair.n);  // positive while closing
  pair.f_n = -(params.k_n + params.k_d * pair.vn) * pair.d * pair.n;
  pair.vt = v_rel + pair.vn * pair.n;
  pair.c_t = std::min(params.k_t, c_cap);
  real vt_norm = norm(pair.vt);
  if (vt_norm < 1e-8) {
    pair.f_t = Vec3{};
    pair.saturated = false;
    return;
  }
  real fn_norm = norm(pair.f_n);
  real elastic = pair.c_t * vt_norm;
  real coulomb = params.mu * fn_norm;
  pair.saturated = coulomb < elastic;
  pair.f_t = (-(pair.saturated ? coulomb : elastic) / vt_norm) * pair.vt;
}

void scatter_pair_force(const ContactPair& pair, const TetMeshTopology& topo,
                        std::vector<Vec3>& fem_forces, Vec3& counterpart_force) {
  Vec3 f = pair.f_n + pair.f_t;
  counterpart_force += f;
  const auto& tri = topo.surface_triangles[pair.triangle];
  for (int k = 0; k < 3; k++) fem_forces[tri.nodes[k]] -= pair.bary[k] * f;
}

std::vector<PlanePair> plane_contact(const std::vector<Vec3>& positions,
                                     const std::vector<Vec3>& velocities,
                                     const std::vector<int>& surface_nodes,
                                     const PlaneSpec& plane, const ContactParams& params) {
  std::vector<PlanePair> pairs;
  for (int i : surface_nodes) {
    real d = dot(positions[i], plane.normal) - plane.offset;
    if (d >= 0) continue;
    PlanePair pp;
    pp.node = i;
    pp.d = d;
    const Vec3& v = velocities[i];
    pp.vn = -dot(v, plane.normal);
    pp.f_n = -(params.k_n + params.k_d * pp.vn) * d * plane.normal;
    pp.vt = v + pp.vn * plane.normal;
    real vt_norm = norm(pp.vt);
    if (vt_norm >= 1e-8) {
      real elastic = params.k_t * vt_norm;
      real coulomb = params.mu * norm(pp.f_n);
      pp.saturated = coulomb < elastic;
      pp.f_t = (-(pp.saturated ? coulomb : elastic) / vt_norm) * pp.vt;
    }
    pairs.push_back(pp);
  }
  return pairs;
}

std::vector<int> surface_node_list(const TetMeshTopology& topo) {
  std::set<int> nodes;
  for (const auto& tri : topo.surface_triangles)
    for (int k = 0; k < 3; k++) nodes.insert(tri.nodes[k]);
  return {nodes.begin(), nodes.end()};
}

}  // namespace dt
