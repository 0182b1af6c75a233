#include "dt/mpm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace dt {

void MpmParticles::append(const Vec3& pos, real m, real vol0, int material, int body) {
  x.push_back(pos);
  v.push_back({});
  F.push_back(Mat3::identity());
  C.push_back(Mat3::zero());
  mass.push_back(m);
  volume0.push_back(vol0);
  material_id.push_back(material);
  body_id.push_back(body);
  rest_x.push_back(pos);
  count++;
}

MpmGrid::MpmGrid(int resolution) : n(resolution), dx(1.0 / resolution), inv_dx(resolution) {
  mass.assign(node_count(), 0);
  momentum.assign(node_count(), Vec3{});
  contact_force.assign(node_count(), Vec3{});
  touched_mark.assign(node_count(), 0);
}

void MpmGrid::clear() {
  for (int gi : touched) {
    mass[gi] = 0;
    momentum[gi] = Vec3{};
    contact_force[gi] = Vec3{};
    touched_mark[gi] = 0;
  }
  touched.clear();
}

Mat3 particle_stress(const Mat3& f, const ObjectMaterial& material) {
  real j = det(f);
  if (j <= 0) throw MpmError("particle inversion (J <= 0)");
  switch (material.kind) {
    case MaterialKind::ElasticNeoHookean: {
      // P F^T with P = mu (F - F^-T) + lambda log(J) F^-T
      Mat3 fft = f * transpose(f);
      return material.mu * (fft - Mat3::identity()) +
             (material.lambda * std::log(j)) * Mat3::identity();
    }
    case MaterialKind::ElasticCorotated:
    case MaterialKind::Elastoplastic:
    case MaterialKind::Rigid: {
      Mat3 r = polar_rotation(f);
      return 2 * material.mu * ((f - r) * transpose(f)) +
             (material.lambda * (j - 1) * j) * Mat3::identity();
    }
  }
  return Mat3::zero();
}

namespace {

struct Spline {
  int base[3];
  real w[3][3];  // per-axis quadratic B-spline weights
  real fx[3];
};

inline Spline spline_at(const Vec3& x, real inv_dx) {
  Spline s;
  for (int a = 0; a < 3; a++) {
    real xs = x[a] * inv_dx;
    s.base[a] = static_cast<int>(std::floor(xs - 0.5));
    real f = xs - s.base[a];
    s.fx[a] = f;
    s.w[a][0] = 0.5 * (1.5 - f) * (1.5 - f);
    s.w[a][1] = 0.75 - (f - 1) * (f - 1);
    s.w[a][2] = 0.5 * (f - 0.5) * (f - 0.5);
  }
  return s;
}

}  // namespace

void p2g(const MpmParticles& particles, MpmGrid& grid, real dt, const Vec3& gravity) {
  for (int p = 0; p < particles.count; p++) {
    const Vec3& xp = particles.x[p];
    if (xp.x <= grid.dx || xp.x >= 1 - grid.dx || xp.y <= grid.dx || xp.y >= 1 - grid.dx ||
        xp.z <= grid.dx || xp.z >= 1 - grid.dx)
      throw MpmError("particle " + std::to_string(p) + " out of domain");
    Spline s = spline_at(xp, grid.inv_dx);
    const ObjectMaterial& mat = particles.materials[particles.material_id[p]];
    Mat3 tau = particle_stress(particles.F[p], mat);
    Mat3 affine = (-dt * 4 * grid.inv_dx * grid.inv_dx * particles.volume0[p]) * tau +
                  particles.mass[p] * particles.C[p];
    real m = particles.mass[p];
    Vec3 mv = m * (particles.v[p] + dt * gravity);
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++)
        for (int k = 0; k < 3; k++) {
          real w = s.w[0][i] * s.w[1][j] * s.w[2][k];
          int gi = grid.idx(s.base[0] + i, s.base[1] + j, s.base[2] + k);
          Vec3 dpos = grid.node_pos(s.base[0] + i, s.base[1] + j, s.base[2] + k) - xp;
          grid.touch(gi);
          grid.mass[gi] += w * m;
          grid.momentum[gi] += w * (mv + affine * dpos);
        }
  }
  std::sort(grid.touched.begin(), grid.touched.end());
}

void grid_update(MpmGrid& grid, real dt, const GridBoundary& bc) {
  const int n = grid.n;
  for (int gi : grid.touched) {
    if (grid.mass[gi] <= 0) continue;
    int i = gi % (n + 1), j = (gi / (n + 1)) % (n + 1), k = gi / ((n + 1) * (n + 1));
    Vec3 v = grid.momentum[gi] / grid.mass[gi] +
             (dt / grid.mass[gi]) * grid.contact_force[gi];

    auto constrain = [&](int axis, real into) {
      // `into` > 0 means the inward normal is +axis
      real vn = v[axis] * into;
      if (vn < 0) {
        if (bc.sticky) {
          v = Vec3{};
          return;
        }
        v[axis] = 0;
        Vec3 vt = v;
        real tnorm = norm(vt);
        if (tnorm > 1e-12) {
          real scale = std::max(0.0, 1.0 - bc.friction * (-vn) / tnorm);
          v = scale * vt;
        }
      }
    };

    if (i < bc.padding) constrain(0, 1);
    if (i > n - bc.padding) constrain(0, -1);
    if (j < bc.padding) constrain(1, 1);
    if (j > n - bc.padding) constrain(1, -1);
    if (k < bc.padding || (bc.floor_z >= 0 && k * grid.dx < bc.floor_z)) constrain(2, 1);
    if (k > n - bc.padding) constrain(2, -1);
    if (bc.wall_x >= 0 && i * grid.dx > bc.wall_x) constrain(0, -1);

    grid.momentum[gi] = v;  // stores velocity from here on
  }
}

void g2p_advect(MpmParticles& particles, const MpmGrid& grid, real dt,
                std::vector<Vec3>* x_prev) {
  static bool warned = false;
  if (x_prev) *x_prev = particles.x;
  const real lo = 2 * grid.dx, hi = 1 - 2 * grid.dx;
  for (int p = 0; p < particles.count; p++) {
    Spline s = spline_at(particles.x[p], grid.inv_dx);
    Vec3 v{};
    Mat3 b = Mat3::zero();
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++)
        for (int k = 0; k < 3; k++) {
          real w = s.w[0][i] * s.w[1][j] * s.w[2][k];
          int gi = grid.idx(s.base[0] + i, s.base[1] + j, s.base[2] + k);
          if (grid.mass[gi] <= 0) continue;
          Vec3 gv = grid.momentum[gi];
          Vec3 dpos = grid.node_pos(s.base[0] + i, s.base[1] + j, s.base[2] + k) -
                      particles.x[p];
          v += w * gv;
          b += w * Mat3::outer(gv, dpos);
        }
    Mat3 c = 4 * grid.inv_dx * grid.inv_dx * b;
    particles.v[p] = v;
    particles.C[p] = c;
    particles.F[p] = (Mat3::identity() + dt * c) * particles.F[p];
    Vec3 x = particles.x[p] + dt * v;
    for (int a = 0; a < 3; a++) {
      if (x[a] < lo || x[a] > hi) {
        if (!warned) {
          std::fprintf(stderr, "mpm: particle advected out of domain, clamping\n");
          warned = true;
        }
        x[a] = std::clamp(x[a], lo, hi);
      }
    }
    particles.x[p] = x;
  }
}

Mat3 von_mises_return_map(const Mat3& f, real sigma_y, real mu) {
  Svd3 s = svd3(f);
  Vec3 eps{std::log(s.sigma.x), std::log(s.sigma.y), std::log(s.sigma.z)};
  real mean = (eps.x + eps.y + eps.z) / 3;
  Vec3 dev = eps - Vec3{mean, mean, mean};
  real snorm = 2 * mu * norm(dev);
  if (snorm <= sigma_y) return f;
  dev *= sigma_y / snorm;
  Vec3 e = dev + Vec3{mean, mean, mean};
  return s.U * Mat3::diag(std::exp(e.x), std::exp(e.y), std::exp(e.z)) * transpose(s.V);
}

void rigid_projection(MpmParticles& particles, int body, real dt,
                      const std::vector<Vec3>& x_prev) {
  real total_mass = 0;
  Vec3 c{}, c0{};
  for (int p = 0; p < particles.count; p++) {
    if (particles.body_id[p] != body) continue;
    total_mass += particles.mass[p];
    c += particles.mass[p] * particles.x[p];
    c0 += particles.mass[p] * particles.rest_x[p];
  }
  if (total_mass <= 0) return;
  c = c / total_mass;
  c0 = c0 / total_mass;
  Mat3 a = Mat3::zero();
  for (int p = 0; p < particles.count; p++) {
    if (particles.body_id[p] != body) continue;
    a += particles.mass[p] * Mat3::outer(particles.x[p] - c, particles.rest_x[p] - c0);
  }
  if (det(a) <= 1e-30)
    throw MpmError("rigid body " + std::to_string(body) + ": degenerate covariance");
  Mat3 r = polar_rotation(a);
  for (int p = 0; p < particles.count; p++) {
    if (particles.body_id[p] != body) continue;
    Vec3 xn = r * (particles.rest_x[p] - c0) + c;
    particles.v[p] = (xn - x_prev[p]) / dt;
    particles.x[p] = xn;
    particles.F[p] = Mat3::identity();
  }
}

void apply_material_projections(MpmParticles& particles, real dt,
                                const std::vector<Vec3>& x_prev) {
  std::vector<int> rigid_bodies;
  for (int p = 0; p < particles.count; p++) {
    const ObjectMaterial& mat = particles.materials[particles.material_id[p]];
    if (mat.kind == MaterialKind::Elastoplastic)
      particles.F[p] = von_mises_return_map(particles.F[p], mat.yield_stress, mat.mu);
    else if (mat.kind == MaterialKind::Rigid) {
      int b = particles.body_id[p];
      if (std::find(rigid_bodies.begin(), rigid_bodies.end(), b) == rigid_bodies.end())
        rigid_bodies.push_back(b);
    }
  }
  for (int b : rigid_bodies) rigid_projection(particles, b, dt, x_prev);
}

MpmParticles init_from_mesh(const TriMesh& mesh, real scale, const Vec3& translate,
                            const ObjectMaterial& material, int particles_per_axis,
                            int body) {
  Vec3 lo{1e30, 1e30, 1e30}, hi{-1e30, -1e30, -1e30};
  for (const auto& v : mesh.vertices)
    for (int k = 0; k < 3; k++) {
      lo[k] = std::min(lo[k], v[k]);
      hi[k] = std::max(hi[k], v[k]);
    }
  real longest = std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z});
  real factor = scale / longest;
  TriMesh scaled = mesh;
  for (auto& v : scaled.vertices) v *= factor;

  VoxelLattice lat = voxelize(scaled, particles_per_axis);
  real cell_vol = lat.cell * lat.cell * lat.cell;
  MpmParticles parts;
  parts.materials.push_back(material);
  for (int k = 0; k < lat.nz; k++)
    for (int j = 0; j < lat.ny; j++)
      for (int i = 0; i < lat.nx; i++)
        if (lat.inside[lat.idx(i, j, k)])
          parts.append(lat.cell_center(i, j, k) + translate, material.density * cell_vol,
                       cell_vol, 0, body);
  if (parts.count == 0) throw MpmError("empty voxelization");
  return parts;
}

MpmParticles build_articulated(const TriMesh& mesh, real scale, const Vec3& translate,
                               const std::vector<ArticulatedPart>& parts,
                               int particles_per_axis) {
  for (size_t a = 0; a < parts.size(); a++)
    for (size_t b = a + 1; b < parts.size(); b++)
      if (parts[a].z_lo < parts[b].z_hi && parts[b].z_lo < parts[a].z_hi)
        throw MpmError("articulated parts " + std::to_string(a) + " and " +
                       std::to_string(b) + " overlap in z");

  ObjectMaterial probe;  // assignment fixed up below
  MpmParticles all = init_from_mesh(mesh, scale, translate, probe, particles_per_axis);
  all.materials.clear();
  for (const auto& part : parts) {
    ObjectMaterial m = part.material;
    m.kind = part.rigid_body ? MaterialKind::Rigid : m.kind;
    all.materials.push_back(m);
  }
  for (int p = 0; p < all.count; p++) {
    real z = all.rest_x[p].z;
    int assigned = -1;
    for (size_t a = 0; a < parts.size(); a++)
      if (z >= parts[a].z_lo && z < parts[a].z_hi) assigned = static_cast<int>(a);
    if (assigned < 0)  // outside all bands: nearest part
      for (size_t a = 0; a < parts.size(); a++)
        if (assigned < 0 || std::min(std::abs(z - parts[a].z_lo), std::abs(z - parts[a].z_hi)) <
                                std::min(std::abs(z - parts[assigned].z_lo),
                                         std::abs(z - parts[assigned].z_hi)))
          assigned = static_cast<int>(a);
    all.material_id[p] = assigned;
    all.body_id[p] = assigned;
    all.mass[p] = parts[assigned].material.density * all.volume0[p];
  }
  return all;
}

}  // namespace dt
