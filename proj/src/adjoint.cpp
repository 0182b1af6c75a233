#include "dt/adjoint.hpp"

#include <algorithm>
#include <numeric>

namespace dt {

real fd_step(real theta) { return std::max(1e-4, 1e-3 * std::abs(theta)); }

namespace {

Mat3 hadamard(const Mat3& a, const Mat3& b) {
  Mat3 r;
  for (int i = 0; i < 9; i++) r.m[i] = a.m[i] * b.m[i];
  return r;
}

Mat3 skew(const Vec3& v) {
  return {0, -v.z, v.y, v.z, 0, -v.x, -v.y, v.x, 0};
}

}  // namespace

// ---- low-level kernel adjoints ----

Mat3 svd_adjoint(const Svd3& s, const Mat3& u_bar, const Vec3& sigma_bar,
                 const Mat3& v_bar) {
  const Vec3& sg = s.sigma;
  real smax = std::max({std::abs(sg.x), std::abs(sg.y), std::abs(sg.z), 1e-30});
  real eps = 1e-8 * smax * smax;
  Mat3 f = Mat3::zero();
  for (int i = 0; i < 3; i++)
    for (int j = 0; j < 3; j++) {
      if (i == j) continue;
      real den = sg[j] * sg[j] - sg[i] * sg[i];
      if (std::abs(den) < eps) den = den < 0 ? -eps : eps;
      f(i, j) = 1 / den;
    }
  Mat3 sig = Mat3::diag(sg);
  Mat3 gu = transpose(s.U) * u_bar;
  Mat3 gv = transpose(s.V) * v_bar;
  Mat3 inner = Mat3::diag(sigma_bar) + hadamard(f, gu - transpose(gu)) * sig +
               sig * hadamard(f, gv - transpose(gv));
  return s.U * inner * transpose(s.V);
}

Mat3 polar_adjoint(const Mat3& a, const Mat3& r_bar) {
  Svd3 s = svd3(a);
  Mat3 g = transpose(s.U) * r_bar * s.V;
  Mat3 sk = g - transpose(g);
  real smax = std::max({std::abs(s.sigma.x), std::abs(s.sigma.y), std::abs(s.sigma.z),
                        1e-30});
  Mat3 inner = Mat3::zero();
  for (int i = 0; i < 3; i++)
    for (int j = 0; j < 3; j++) {
      if (i == j) continue;
      real den = s.sigma[i] + s.sigma[j];
      if (std::abs(den) < 1e-12 * smax) den = den < 0 ? -1e-12 * smax : 1e-12 * smax;
      inner(i, j) = sk(i, j) / den;
    }
  return s.U * inner * transpose(s.V);
}

Mat3 first_piola_adjoint(const Mat3& f, const ElastomerMaterial& mat, const Mat3& p_bar,
                         real* mu_bar, real* lambda_bar) {
  real j = det(f);
  real lj = std::log(j);
  Mat3 g = transpose(inverse(f));  // F^{-T}
  Mat3 f_bar = mat.mu * p_bar + (mat.mu - mat.lambda * lj) * (g * transpose(p_bar) * g) +
               (mat.lambda * ddot(g, p_bar)) * g;
  if (mu_bar) *mu_bar += ddot(p_bar, f - g);
  if (lambda_bar) *lambda_bar += lj * ddot(p_bar, g);
  return f_bar;
}

Mat3 particle_stress_adjoint(const Mat3& f, const ObjectMaterial& mat, const Mat3& tau_bar) {
  real j = det(f);
  if (mat.kind == MaterialKind::ElasticNeoHookean) {
    return mat.mu * ((tau_bar + transpose(tau_bar)) * f) +
           (mat.lambda * trace(tau_bar)) * transpose(inverse(f));
  }
  Mat3 r = polar_rotation(f);
  Mat3 f_bar = 2 * mat.mu * (tau_bar * f + transpose(tau_bar) * (f - r));
  f_bar += polar_adjoint(f, (-2 * mat.mu) * (tau_bar * f));
  f_bar += (mat.lambda * (2 * j - 1) * trace(tau_bar) * j) * transpose(inverse(f));
  return f_bar;
}

Mat3 von_mises_adjoint(const Mat3& f_trial, real sigma_y, real mu, const Mat3& f_bar) {
  Svd3 s = svd3(f_trial);
  Vec3 eps{std::log(s.sigma.x), std::log(s.sigma.y), std::log(s.sigma.z)};
  real mean = (eps.x + eps.y + eps.z) / 3;
  Vec3 dev = eps - Vec3{mean, mean, mean};
  real dn = norm(dev);
  if (2 * mu * dn <= sigma_y) return f_bar;  // elastic: identity map

  real kappa = sigma_y / (2 * mu);
  Vec3 dhat = dev / dn;
  Vec3 e = kappa * dhat + Vec3{mean, mean, mean};
  Vec3 d{std::exp(e.x), std::exp(e.y), std::exp(e.z)};
  Mat3 dm = Mat3::diag(d);

  Mat3 u_bar = f_bar * s.V * dm;
  Mat3 v_bar = transpose(f_bar) * s.U * dm;
  Vec3 d_bar;
  for (int k = 0; k < 3; k++) d_bar[k] = dot(s.U.col(k), f_bar * s.V.col(k));
  Vec3 e_bar{d_bar.x * d.x, d_bar.y * d.y, d_bar.z * d.z};

  // reverse of eps -> mean*1 + kappa * dev/|dev|
  real esum = (e_bar.x + e_bar.y + e_bar.z) / 3;
  Vec3 t = (kappa / dn) * (e_bar - dot(dhat, e_bar) * dhat);
  real tsum = (t.x + t.y + t.z) / 3;
  Vec3 eps_bar = Vec3{esum, esum, esum} + (t - Vec3{tsum, tsum, tsum});
  Vec3 sigma_bar{eps_bar.x / s.sigma.x, eps_bar.y / s.sigma.y, eps_bar.z / s.sigma.z};
  return svd_adjoint(s, u_bar, sigma_bar, v_bar);
}

TriangleGeomGrads point_triangle_adjoint(const Vec3& p, const Vec3& a, const Vec3& b,
                                         const Vec3& c, int region, real d_bar,
                                         const Vec3& n_bar_in, const Vec3& bary_bar) {
  TriangleGeomGrads g;
  Vec3 u = b - a, w = c - a;
  Vec3 nn = cross(u, w);
  real nlen = norm(nn);
  Vec3 n = nn / nlen;
  Vec3 n_bar = n_bar_in;
  Vec3 nn_bar{};

  if (region == 0) {
    // d = (p - a) . n; the closest point lies in the face plane.
    g.p += d_bar * n;
    g.a -= d_bar * n;
    n_bar += d_bar * (p - a);

    // bary = (Sa, Sb, Sc) / (N.N), signed sub-areas against the face normal
    Vec3 ea = a - p, eb = b - p, ec = c - p;
    real s = dot(nn, nn);
    real sa = dot(cross(eb, ec), nn);
    real sb = dot(cross(ec, ea), nn);
    real sc = dot(cross(ea, eb), nn);
    real ga = bary_bar.x / s, gb = bary_bar.y / s, gc = bary_bar.z / s;
    real gs = -(bary_bar.x * sa + bary_bar.y * sb + bary_bar.z * sc) / (s * s);
    nn_bar += 2 * gs * nn;
    nn_bar += ga * cross(eb, ec) + gb * cross(ec, ea) + gc * cross(ea, eb);
    // S_x = cross(e1, e2) . N  =>  e1_bar += gx (e2 x N), e2_bar += gx (N x e1)
    Vec3 t1, t2;
    t1 = ga * cross(ec, nn); t2 = ga * cross(nn, eb);
    g.b += t1; g.c += t2; g.p -= t1 + t2;
    t1 = gb * cross(ea, nn); t2 = gb * cross(nn, ec);
    g.c += t1; g.a += t2; g.p -= t1 + t2;
    t1 = gc * cross(eb, nn); t2 = gc * cross(nn, ea);
    g.a += t1; g.b += t2; g.p -= t1 + t2;
  } else {
    // closest point on an edge or vertex: q = sum bary_k x_k,
    // d = sign * |p - q| with the sign frozen at the forward decision
    real side = dot(p - a, n) >= 0 ? 1.0 : -1.0;
    Vec3 bary{}, q{};
    real t = 0;
    const Vec3* e0 = nullptr;  // edge endpoints for the t parameterization
    const Vec3* e1 = nullptr;
    switch (region) {
      case 1: e0 = &a; e1 = &b; break;
      case 2: e0 = &b; e1 = &c; break;
      case 3: e0 = &a; e1 = &c; break;
      case 4: bary = {1, 0, 0}; q = a; break;
      case 5: bary = {0, 1, 0}; q = b; break;
      case 6: bary = {0, 0, 1}; q = c; break;
    }
    if (e0) {
      Vec3 eu = *e1 - *e0, ew = p - *e0;
      t = dot(eu, ew) / dot(eu, eu);
      q = *e0 + t * eu;
      if (region == 1) bary = {1 - t, t, 0};
      if (region == 2) bary = {0, 1 - t, t};
      if (region == 3) bary = {1 - t, 0, t};
    }

    Vec3 r = p - q;
    real rn = norm(r);
    if (rn > 1e-300) {
      // r is orthogonal to the active edge, so dq's t-term drops out:
      // d|r| = rhat . (dp - sum bary_k dx_k)
      Vec3 rhat = (side * d_bar / rn) * r;
      g.p += rhat;
      g.a -= bary.x * rhat;
      g.b -= bary.y * rhat;
      g.c -= bary.z * rhat;
    }

    if (e0) {
      real t_bar = region == 1 ? bary_bar.y - bary_bar.x
                 : region == 2 ? bary_bar.z - bary_bar.y
                                : bary_bar.z - bary_bar.x;
      Vec3 eu = *e1 - *e0, ew = p - *e0;
      real beta = t_bar / dot(eu, eu);
      Vec3 gp = beta * eu;
      Vec3 g0 = beta * (-ew - eu + 2 * t * eu);
      Vec3 g1 = beta * (ew - 2 * t * eu);
      g.p += gp;
      if (region == 1) { g.a += g0; g.b += g1; }
      if (region == 2) { g.b += g0; g.c += g1; }
      if (region == 3) { g.a += g0; g.c += g1; }
    }
  }

  // unit normal n = N/|N| back to the vertices
  nn_bar += (n_bar - dot(n_bar, n) * n) / nlen;
  Vec3 u_bar = cross(w, nn_bar);
  Vec3 w_bar = cross(nn_bar, u);
  g.b += u_bar;
  g.c += w_bar;
  g.a -= u_bar + w_bar;
  return g;
}

PairForceGrads pair_force_adjoint(const ContactPair& pair, const ContactParams& params,
                                  const Vec3& f_bar) {
  PairForceGrads g;
  const Vec3& n = pair.n;
  real cc = params.k_n + params.k_d * pair.vn;
  Vec3 fn_bar = f_bar;  // adjoint of f_n; the friction norm path adds to it
  Vec3 vt_bar{}, n_bar{};
  real vn_bar = 0;

  real tau = norm(pair.vt);
  if (tau >= 1e-8) {
    if (!pair.saturated) {
      // f_t = -c_t vt with c_t = min(k_t, c_cap)
      vt_bar += -pair.c_t * f_bar;
      if (pair.c_t == params.k_t)
        g.k_t += -dot(pair.vt, f_bar);
      else
        g.c_cap_bar += -dot(pair.vt, f_bar);
    } else {
      // f_t = -mu |f_n| vt / |vt|
      real fn_norm = norm(pair.f_n);
      Vec3 vhat = pair.vt / tau;
      real s = params.mu * fn_norm;
      real s_bar = -dot(vhat, f_bar);
      vt_bar += (-s / tau) * (f_bar - dot(vhat, f_bar) * vhat);
      g.mu += fn_norm * s_bar;
      if (fn_norm > 0) fn_bar += (params.mu * s_bar / fn_norm) * pair.f_n;
    }
  }

  // f_n = -(k_n + k_d vn) d n
  real c_bar = -pair.d * dot(n, fn_bar);
  g.d_bar += -cc * dot(n, fn_bar);
  n_bar += (-cc * pair.d) * fn_bar;
  g.k_n += c_bar;
  g.k_d += pair.vn * c_bar;
  vn_bar += params.k_d * c_bar;

  // vt = v_rel + vn n
  Vec3 vrel_bar = vt_bar;
  vn_bar += dot(n, vt_bar);
  n_bar += pair.vn * vt_bar;

  // vn = -v_rel . n
  Vec3 v_rel = pair.vt - pair.vn * n;
  vrel_bar += -vn_bar * n;
  n_bar += -vn_bar * v_rel;

  g.v_cp_bar = vrel_bar;
  g.v_tri_bar = -vrel_bar;
  g.n_bar = n_bar;
  return g;
}

// ---- state-level machinery ----

AdjointState AdjointState::zeros_like(const Scene& scene) {
  AdjointState adj;
  adj.sensors.resize(scene.sensors.size());
  for (size_t s = 0; s < scene.sensors.size(); s++) {
    adj.sensors[s].x.assign(scene.sensors[s].fem.positions.size(), Vec3{});
    adj.sensors[s].v.assign(scene.sensors[s].fem.velocities.size(), Vec3{});
  }
  adj.mpm_x.assign(scene.mpm.count, Vec3{});
  adj.mpm_v.assign(scene.mpm.count, Vec3{});
  adj.mpm_f.assign(scene.mpm.count, Mat3::zero());
  adj.mpm_c.assign(scene.mpm.count, Mat3::zero());
  adj.cable_x.assign(scene.cable.particle_count, Vec3{});
  adj.cable_v.assign(scene.cable.particle_count, Vec3{});
  return adj;
}

void AdjointState::clear() {
  for (auto& s : sensors) {
    std::fill(s.x.begin(), s.x.end(), Vec3{});
    std::fill(s.v.begin(), s.v.end(), Vec3{});
    s.pose_t = Vec3{};
    s.pose_r = Mat3::zero();
  }
  std::fill(mpm_x.begin(), mpm_x.end(), Vec3{});
  std::fill(mpm_v.begin(), mpm_v.end(), Vec3{});
  std::fill(mpm_f.begin(), mpm_f.end(), Mat3::zero());
  std::fill(mpm_c.begin(), mpm_c.end(), Mat3::zero());
  std::fill(cable_x.begin(), cable_x.end(), Vec3{});
  std::fill(cable_v.begin(), cable_v.end(), Vec3{});
}

namespace {

// Quadratic B-spline stencil with weight gradients; mirrors p2g/g2p exactly.
struct SplineW {
  int base[3];
  real w[3][3];
  real dw[3][3];  // d w / d x, inv_dx folded in
};

SplineW spline_with_grads(const Vec3& x, real inv_dx) {
  SplineW s;
  for (int a = 0; a < 3; a++) {
    real xs = x[a] * inv_dx;
    s.base[a] = static_cast<int>(std::floor(xs - 0.5));
    real f = xs - s.base[a];
    s.w[a][0] = 0.5 * (1.5 - f) * (1.5 - f);
    s.w[a][1] = 0.75 - (f - 1) * (f - 1);
    s.w[a][2] = 0.5 * (f - 0.5) * (f - 0.5);
    s.dw[a][0] = -(1.5 - f) * inv_dx;
    s.dw[a][1] = -2 * (f - 1) * inv_dx;
    s.dw[a][2] = (f - 0.5) * inv_dx;
  }
  return s;
}

int active_slot(const std::vector<int>& nodes, int gi) {
  auto it = std::lower_bound(nodes.begin(), nodes.end(), gi);
  if (it == nodes.end() || *it != gi) return -1;
  return static_cast<int>(it - nodes.begin());
}

// Reverse of p2g given adjoints of the raw node mass/momentum sums.
// Pre-transfer particle state comes in through x/v/f/c_pre.
void p2g_backward(const MpmParticles& mpm, const std::vector<Vec3>& x_pre,
                  const std::vector<Vec3>& v_pre, const std::vector<Mat3>& f_pre,
                  const std::vector<Mat3>& c_pre, int n, real inv_dx, real dt,
                  const Vec3& gravity, const std::vector<int>& nodes,
                  const std::vector<Vec3>& mom_bar, const std::vector<real>& mass_bar,
                  std::vector<Vec3>& x_bar, std::vector<Vec3>& v_bar,
                  std::vector<Mat3>& f_bar, std::vector<Mat3>& c_bar) {
  const real dx = 1.0 / inv_dx;
  for (int p = 0; p < mpm.count; p++) {
    SplineW s = spline_with_grads(x_pre[p], inv_dx);
    const ObjectMaterial& mat = mpm.materials[mpm.material_id[p]];
    Mat3 tau = particle_stress(f_pre[p], mat);
    real kappa = -dt * 4 * inv_dx * inv_dx * mpm.volume0[p];
    Mat3 affine = kappa * tau + mpm.mass[p] * c_pre[p];
    real m = mpm.mass[p];
    Vec3 mv = m * (v_pre[p] + dt * gravity);

    Mat3 a_bar = Mat3::zero();
    Vec3 xb{}, vb{};
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++)
        for (int k = 0; k < 3; k++) {
          int gi = ((s.base[2] + k) * (n + 1) + (s.base[1] + j)) * (n + 1) + (s.base[0] + i);
          int slot = active_slot(nodes, gi);
          if (slot < 0) continue;
          const Vec3& mb = mom_bar[slot];
          real massb = mass_bar[slot];
          real w = s.w[0][i] * s.w[1][j] * s.w[2][k];
          Vec3 dpos = Vec3{(s.base[0] + i) * dx, (s.base[1] + j) * dx,
                           (s.base[2] + k) * dx} - x_pre[p];
          vb += (w * m) * mb;
          a_bar += w * Mat3::outer(mb, dpos);
          real coeff = m * massb + dot(mb, mv + affine * dpos);
          xb.x += s.dw[0][i] * s.w[1][j] * s.w[2][k] * coeff;
          xb.y += s.w[0][i] * s.dw[1][j] * s.w[2][k] * coeff;
          xb.z += s.w[0][i] * s.w[1][j] * s.dw[2][k] * coeff;
          xb -= w * (transpose(affine) * mb);
        }
    v_bar[p] += vb;
    x_bar[p] += xb;
    c_bar[p] += m * a_bar;
    if (dt != 0) f_bar[p] += particle_stress_adjoint(f_pre[p], mat, kappa * a_bar);
  }
}

// Reverse of one executed boundary constraint with the forward branch frozen.
struct ConstrainOp {
  int axis;
  real into;
  Vec3 v_in;
};

Vec3 constrain_reverse(const ConstrainOp& op, const GridBoundary& bc, const Vec3& out_bar) {
  real vn = op.v_in[op.axis] * op.into;
  if (vn >= 0) return out_bar;  // was a no-op
  if (bc.sticky) return Vec3{};
  Vec3 vt = op.v_in;
  vt[op.axis] = 0;
  real tau = norm(vt);
  if (tau <= 1e-12) {
    Vec3 in_bar = out_bar;
    in_bar[op.axis] = 0;
    return in_bar;
  }
  real u = -vn;
  real scale = 1.0 - bc.friction * u / tau;
  if (scale <= 0) return Vec3{};  // frozen at the full-stop kink
  real s_bar = dot(vt, out_bar);
  Vec3 in_bar = scale * out_bar + (s_bar * bc.friction * u / (tau * tau * tau)) * vt;
  in_bar[op.axis] = s_bar * bc.friction * op.into / tau;
  return in_bar;
}

// Replays the forward constraint sequence for one node and records each call.
template <typename Record>
Vec3 run_constraints(Vec3 v, int i, int j, int k, int n, real dx, const GridBoundary& bc,
                     Record&& record) {
  auto constrain = [&](int axis, real into) {
    record(ConstrainOp{axis, into, v});
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
  if (k < bc.padding || (bc.floor_z >= 0 && k * dx < bc.floor_z)) constrain(2, 1);
  if (k > n - bc.padding) constrain(2, -1);
  if (bc.wall_x >= 0 && i * dx > bc.wall_x) constrain(0, -1);
  return v;
}

// Reverse of the force law + closest-point geometry of one triangle pair.
// bary_bar0 carries adjoint terms from outside the force law (scatter,
// observation); clamped penetration freezes d_bar.
void pair_backward(const ContactPair& pair, const ContactParams& params,
                   const TetMeshTopology& topo, const std::vector<Vec3>& x,
                   const std::vector<Vec3>& v, const Vec3& p_cp, real cap,
                   const Vec3& f_bar, const Vec3& bary_bar0, std::vector<Vec3>& x_bar,
                   std::vector<Vec3>& v_bar, Vec3& pcp_bar, Vec3& vcp_bar,
                   ParamGrads& grads, real* c_cap_bar = nullptr) {
  const auto& tri = topo.surface_triangles[pair.triangle];
  PairForceGrads pf = pair_force_adjoint(pair, params, f_bar);
  if (c_cap_bar) *c_cap_bar += pf.c_cap_bar;
  grads.k_n += pf.k_n;
  grads.k_d += pf.k_d;
  grads.k_t += pf.k_t;
  grads.mu += pf.mu;
  vcp_bar += pf.v_cp_bar;

  Vec3 bary_bar = bary_bar0;
  for (int k = 0; k < 3; k++) {
    v_bar[tri.nodes[k]] += pair.bary[k] * pf.v_tri_bar;
    bary_bar[k] += dot(v[tri.nodes[k]], pf.v_tri_bar);
  }
  real d_bar = pair.d == -cap ? 0.0 : pf.d_bar;
  TriangleGeomGrads geom =
      point_triangle_adjoint(p_cp, x[tri.nodes[0]], x[tri.nodes[1]], x[tri.nodes[2]],
                             pair.region, d_bar, pf.n_bar, bary_bar);
  x_bar[tri.nodes[0]] += geom.a;
  x_bar[tri.nodes[1]] += geom.b;
  x_bar[tri.nodes[2]] += geom.c;
  pcp_bar += geom.p;
}

// Reverse of one node-vs-plane pair; the node plays the counterpart role.
void plane_pair_backward(const PlanePair& pp, const PlaneSpec& plane,
                         const ContactParams& params, const Vec3& f_bar,
                         std::vector<Vec3>& x_bar, std::vector<Vec3>& v_bar,
                         ParamGrads& grads) {
  ContactPair tmp;
  tmp.d = pp.d;
  tmp.n = plane.normal;
  tmp.vn = pp.vn;
  tmp.vt = pp.vt;
  tmp.f_n = pp.f_n;
  tmp.f_t = pp.f_t;
  tmp.c_t = params.k_t;  // plane pairs are never impulse-capped
  tmp.saturated = pp.saturated;
  PairForceGrads pf = pair_force_adjoint(tmp, params, f_bar);
  grads.k_n += pf.k_n;
  grads.k_d += pf.k_d;
  grads.k_t += pf.k_t;
  grads.mu += pf.mu;
  v_bar[pp.node] += pf.v_cp_bar;
  x_bar[pp.node] += pf.d_bar * plane.normal;  // d = x.n - offset, n constant
}

}  // namespace

void substep_backward(Scene& scene, AdjointState& adj, ParamGrads& grads) {
  SceneState pre = scene.save();
  SubstepCache cache;
  scene.substep(&cache);  // regenerates every intermediate bitwise

  const real dt = scene.dt;
  const size_t active = cache.grid_nodes.size();

  // R8: PBD cable (predict / solve / finalize)
  std::vector<Vec3> cable_fext_bar;
  if (scene.has_cable()) {
    const CableState& cab = scene.cable;
    int nc = cab.particle_count;
    cable_fext_bar.assign(nc, Vec3{});
    std::vector<Vec3> xpred_bar(nc), new_x_bar(nc);
    for (int i = 0; i < nc; i++) {
      // finalize: v = (x_pred - x_old)/dt; x = x_pred
      xpred_bar[i] = adj.cable_x[i] + adj.cable_v[i] / dt;
      new_x_bar[i] = (-1.0 / dt) * adj.cable_v[i];
    }
    for (auto it = cache.pbd_log.rbegin(); it != cache.pbd_log.rend(); ++it) {
      const PbdProjection& pr = *it;
      real wi = cab.inv_mass[pr.i], wj = cab.inv_mass[pr.j];
      real wsum = wi + wj;
      Vec3 d = pr.pi - pr.pj;
      real len = norm(d);
      Vec3 corr_bar = pr.stiffness * (wj * xpred_bar[pr.j] - wi * xpred_bar[pr.i]);
      // corr = ((len - target)/(len wsum)) d
      real phi = (len - pr.target) / (len * wsum);
      Vec3 d_bar = phi * corr_bar +
                   (pr.target / (wsum * len * len * len) * dot(d, corr_bar)) * d;
      xpred_bar[pr.i] += d_bar;
      xpred_bar[pr.j] -= d_bar;
    }
    for (int i = 0; i < nc; i++) {
      if (cab.fixed_mask[i]) {
        adj.cable_v[i] = Vec3{};  // forward discards the incoming velocity
        new_x_bar[i] += xpred_bar[i];
      } else {
        Vec3 vmid_bar = dt * xpred_bar[i];
        adj.cable_v[i] = vmid_bar;
        cable_fext_bar[i] = (dt * cab.inv_mass[i]) * vmid_bar;
        new_x_bar[i] += xpred_bar[i];
      }
      adj.cable_x[i] = new_x_bar[i];
    }
  }

  // R7: FEM integration; also produces the adjoint of the force inputs.
  std::vector<std::vector<Vec3>> fext_bar(scene.sensors.size());
  for (size_t si = 0; si < scene.sensors.size(); si++) {
    const Sensor& s = scene.sensors[si];
    const TetMeshTopology& topo = s.mesh->topology;
    auto& sa = adj.sensors[si];
    fext_bar[si].assign(topo.node_count, Vec3{});
    for (int i = 0; i < topo.node_count; i++) {
      if (topo.base_node_mask[i]) {
        sa.v[i] += dt * sa.x[i];
      } else {
        Vec3 v1_bar = (1.0 - dt * scene.fem_damping) * (sa.v[i] + dt * sa.x[i]);
        sa.v[i] = v1_bar;
        fext_bar[si][i] = (dt / s.fem.node_masses[i]) * v1_bar;
      }
    }
  }

  // R6: material projections (von Mises return map, rigid shape matching)
  std::vector<Vec3> xprev_direct_bar;
  if (scene.has_mpm()) {
    xprev_direct_bar.assign(scene.mpm.count, Vec3{});
    std::vector<int> rigid_bodies;
    for (int p = 0; p < scene.mpm.count; p++) {
      const ObjectMaterial& mat = scene.mpm.materials[scene.mpm.material_id[p]];
      if (mat.kind == MaterialKind::Elastoplastic)
        adj.mpm_f[p] = von_mises_adjoint(cache.f_trial[p], mat.yield_stress, mat.mu,
                                         adj.mpm_f[p]);
      else if (mat.kind == MaterialKind::Rigid) {
        int b = scene.mpm.body_id[p];
        if (std::find(rigid_bodies.begin(), rigid_bodies.end(), b) == rigid_bodies.end())
          rigid_bodies.push_back(b);
      }
    }
    for (int b : rigid_bodies) {
      const MpmParticles& mp = scene.mpm;
      real total_mass = 0;
      Vec3 cc{}, c0{};
      for (int p = 0; p < mp.count; p++) {
        if (mp.body_id[p] != b) continue;
        total_mass += mp.mass[p];
        cc += mp.mass[p] * cache.x_adv[p];
        c0 += mp.mass[p] * mp.rest_x[p];
      }
      cc = cc / total_mass;
      c0 = c0 / total_mass;
      Mat3 am = Mat3::zero();
      for (int p = 0; p < mp.count; p++) {
        if (mp.body_id[p] != b) continue;
        am += mp.mass[p] * Mat3::outer(cache.x_adv[p] - cc, mp.rest_x[p] - c0);
      }
      Vec3 c_bar{};
      Mat3 r_bar = Mat3::zero();
      for (int p = 0; p < mp.count; p++) {
        if (mp.body_id[p] != b) continue;
        Vec3 xn_bar = adj.mpm_x[p] + adj.mpm_v[p] / dt;
        xprev_direct_bar[p] -= adj.mpm_v[p] / dt;
        c_bar += xn_bar;
        r_bar += Mat3::outer(xn_bar, mp.rest_x[p] - c0);
        adj.mpm_v[p] = Vec3{};
        adj.mpm_f[p] = Mat3::zero();  // F reset to identity
        adj.mpm_x[p] = Vec3{};        // refilled with the x_adv adjoint below
      }
      Mat3 a_bar = polar_adjoint(am, r_bar);
      for (int p = 0; p < mp.count; p++) {
        if (mp.body_id[p] != b) continue;
        adj.mpm_x[p] = mp.mass[p] * (a_bar * (mp.rest_x[p] - c0)) +
                       (mp.mass[p] / total_mass) * c_bar;
      }
    }
  }

  // R5: g2p + advection; produces the post-update grid velocity adjoint.
  std::vector<Vec3> gvel_bar(active, Vec3{});
  std::vector<Vec3> mom_bar(active, Vec3{});
  std::vector<real> mass_bar(active, 0.0);
  std::vector<Vec3> fc_bar(active, Vec3{});
  if (scene.has_mpm()) {
    const MpmParticles& mp = scene.mpm;
    const MpmGrid& grid = scene.grid;
    const real lo = 2 * grid.dx, hi = 1 - 2 * grid.dx;
    for (int p = 0; p < mp.count; p++) {
      Vec3 x_new_bar = adj.mpm_x[p];
      for (int a = 0; a < 3; a++)
        if (cache.x_adv[p][a] == lo || cache.x_adv[p][a] == hi) x_new_bar[a] = 0;

      Mat3 f_new_bar = adj.mpm_f[p];
      Mat3 c_bar = adj.mpm_c[p];
      const Mat3& c_new = mp.C[p];  // projections leave C untouched
      Mat3 f_pre_bar = transpose(Mat3::identity() + dt * c_new) * f_new_bar;
      c_bar += dt * (f_new_bar * transpose(pre.mpm_f[p]));
      Mat3 b_bar = (4 * grid.inv_dx * grid.inv_dx) * c_bar;
      Vec3 v_tot_bar = adj.mpm_v[p] + dt * x_new_bar;
      Vec3 x_pre_bar = x_new_bar;

      SplineW s = spline_with_grads(pre.mpm_x[p], grid.inv_dx);
      for (int i = 0; i < 3; i++)
        for (int j = 0; j < 3; j++)
          for (int k = 0; k < 3; k++) {
            int gi = grid.idx(s.base[0] + i, s.base[1] + j, s.base[2] + k);
            if (grid.mass[gi] <= 0) continue;
            int slot = active_slot(cache.grid_nodes, gi);
            if (slot < 0) continue;
            real w = s.w[0][i] * s.w[1][j] * s.w[2][k];
            Vec3 gv = grid.momentum[gi];  // velocity after grid_update
            Vec3 dpos = grid.node_pos(s.base[0] + i, s.base[1] + j, s.base[2] + k) -
                        pre.mpm_x[p];
            gvel_bar[slot] += w * v_tot_bar + w * (b_bar * dpos);
            real coeff = dot(gv, v_tot_bar) + dot(gv, b_bar * dpos);
            x_pre_bar.x += s.dw[0][i] * s.w[1][j] * s.w[2][k] * coeff;
            x_pre_bar.y += s.w[0][i] * s.dw[1][j] * s.w[2][k] * coeff;
            x_pre_bar.z += s.w[0][i] * s.w[1][j] * s.dw[2][k] * coeff;
            x_pre_bar -= w * (transpose(b_bar) * gv);
          }
      adj.mpm_x[p] = x_pre_bar;
      adj.mpm_v[p] = Vec3{};
      adj.mpm_f[p] = f_pre_bar;
      adj.mpm_c[p] = Mat3::zero();
    }

    // R4: grid update (momentum -> velocity, boundary constraints)
    const int n = grid.n;
    for (size_t a = 0; a < active; a++) {
      int gi = cache.grid_nodes[a];
      real m = grid.mass[gi];
      int i = gi % (n + 1), j = (gi / (n + 1)) % (n + 1), k = gi / ((n + 1) * (n + 1));
      Vec3 v0 = cache.grid_mom_p2g[a] / m + (dt / m) * grid.contact_force[gi];
      std::vector<ConstrainOp> ops;
      run_constraints(v0, i, j, k, n, grid.dx, scene.boundary,
                      [&](const ConstrainOp& op) { ops.push_back(op); });
      Vec3 vbar = gvel_bar[a];
      for (auto it = ops.rbegin(); it != ops.rend(); ++it)
        vbar = constrain_reverse(*it, scene.boundary, vbar);
      mom_bar[a] += vbar / m;
      fc_bar[a] = (dt / m) * vbar;
      mass_bar[a] += -dot(vbar, v0) / m;
    }
  }

  // R3: contact detection + forces + scatter, per sensor
  for (size_t si = 0; si < scene.sensors.size(); si++) {
    const Sensor& s = scene.sensors[si];
    const TetMeshTopology& topo = s.mesh->topology;
    const SensorContacts& sc = cache.sensors[si];
    auto& sa = adj.sensors[si];
    const std::vector<Vec3>& x0 = pre.sensors[si].x;
    const std::vector<Vec3>& v0 = pre.sensors[si].v;

    for (const auto& pair : sc.grid_pairs) {
      const auto& tri = topo.surface_triangles[pair.triangle];
      Vec3 f = pair.f_n + pair.f_t;
      Vec3 f_bar = fc_bar[pair.counterpart];
      Vec3 bary_bar0{};
      for (int k = 0; k < 3; k++) {
        f_bar -= pair.bary[k] * fext_bar[si][tri.nodes[k]];
        bary_bar0[k] -= dot(f, fext_bar[si][tri.nodes[k]]);
      }
      Vec3 pcp_bar{}, vcp_bar{};
      real ccap_bar = 0;
      pair_backward(pair, scene.contact, topo, x0, v0,
                    cache.grid_node_positions[pair.counterpart], sc.cap, f_bar, bary_bar0,
                    sa.x, sa.v, pcp_bar, vcp_bar, grads, &ccap_bar);
      // node position is a lattice constant; velocity is momentum/mass pre-update
      real m = scene.grid.mass[cache.grid_nodes[pair.counterpart]];
      mom_bar[pair.counterpart] += vcp_bar / m;
      mass_bar[pair.counterpart] -= dot(vcp_bar, cache.grid_vel_pre[pair.counterpart]) / m;
      mass_bar[pair.counterpart] += 0.5 / dt * ccap_bar;  // c_cap = 0.5 m / dt
    }

    for (const auto& pair : sc.cable_pairs) {
      const auto& tri = topo.surface_triangles[pair.triangle];
      Vec3 f = pair.f_n + pair.f_t;
      Vec3 f_bar = cable_fext_bar[pair.counterpart];
      Vec3 bary_bar0{};
      for (int k = 0; k < 3; k++) {
        f_bar -= pair.bary[k] * fext_bar[si][tri.nodes[k]];
        bary_bar0[k] -= dot(f, fext_bar[si][tri.nodes[k]]);
      }
      Vec3 pcp_bar{}, vcp_bar{};
      pair_backward(pair, scene.contact, topo, x0, v0, pre.cable_x[pair.counterpart],
                    sc.cap, f_bar, bary_bar0, sa.x, sa.v, pcp_bar, vcp_bar, grads);
      adj.cable_x[pair.counterpart] += pcp_bar;
      adj.cable_v[pair.counterpart] += vcp_bar;
    }

    for (size_t pl = 0; pl < scene.planes.size(); pl++)
      for (const auto& pp : sc.plane_pairs[pl])
        plane_pair_backward(pp, scene.planes[pl], scene.contact, fext_bar[si][pp.node],
                            sa.x, sa.v, grads);
  }

  // R2: p2g
  if (scene.has_mpm())
    p2g_backward(scene.mpm, pre.mpm_x, pre.mpm_v, pre.mpm_f, pre.mpm_c, scene.grid.n,
                 scene.grid.inv_dx, dt, scene.gravity, cache.grid_nodes, mom_bar, mass_bar,
                 adj.mpm_x, adj.mpm_v, adj.mpm_f, adj.mpm_c);
  if (scene.has_mpm())
    for (int p = 0; p < scene.mpm.count; p++) adj.mpm_x[p] += xprev_direct_bar[p];

  // R1: elastic forces (force adjoint equals the external-force adjoint)
  for (size_t si = 0; si < scene.sensors.size(); si++) {
    const Sensor& s = scene.sensors[si];
    const TetMeshTopology& topo = s.mesh->topology;
    auto& sa = adj.sensors[si];
    const std::vector<Vec3>& x0 = pre.sensors[si].x;
    for (int e = 0; e < topo.element_count(); e++) {
      const auto& el = topo.elements[e];
      Mat3 ds;
      ds.set_col(0, x0[el[1]] - x0[el[0]]);
      ds.set_col(1, x0[el[2]] - x0[el[0]]);
      ds.set_col(2, x0[el[3]] - x0[el[0]]);
      Mat3 f = ds * s.fem.dm_inv[e];
      Mat3 h_bar;
      h_bar.set_col(0, fext_bar[si][el[1]] - fext_bar[si][el[0]]);
      h_bar.set_col(1, fext_bar[si][el[2]] - fext_bar[si][el[0]]);
      h_bar.set_col(2, fext_bar[si][el[3]] - fext_bar[si][el[0]]);
      Mat3 p_bar = (-s.fem.rest_volumes[e]) * (h_bar * s.fem.dm_inv[e]);
      Mat3 f_bar = first_piola_adjoint(f, scene.elastomer, p_bar, &grads.lame_mu,
                                       &grads.lame_lambda);
      Mat3 ds_bar = f_bar * transpose(s.fem.dm_inv[e]);
      Vec3 g1 = ds_bar.col(0), g2 = ds_bar.col(1), g3 = ds_bar.col(2);
      sa.x[el[1]] += g1;
      sa.x[el[2]] += g2;
      sa.x[el[3]] += g3;
      sa.x[el[0]] -= g1 + g2 + g3;
    }
  }

  scene.restore(pre);
}

void begin_frame_backward(Scene& scene, const FrameAction& action, AdjointState& adj,
                          ActionGrad& action_grad) {
  const real h = scene.frame_dt();
  action_grad.twists.assign(scene.sensors.size(), Twist{});
  for (size_t s = 0; s < scene.sensors.size(); s++) {
    const Sensor& sen = scene.sensors[s];
    const TetMeshTopology& topo = sen.mesh->topology;
    auto& sa = adj.sensors[s];
    Twist tw;
    if (s < action.twists.size()) tw = action.twists[s];
    tw.linear += (0.5 * action.width_rate) * sen.width_dir;

    Vec3 l_bar{}, w_bar{};

    // pose update reverse: t' = t + h l;  R' = axis_angle(w^, |w| h) R
    l_bar += h * sa.pose_t;
    real ang = norm(tw.angular) * h;
    Mat3 rot_bar = sa.pose_r;
    if (ang > 0) {
      Vec3 phi = h * tw.angular;
      Mat3 dr = axis_angle(normalized(tw.angular), ang);
      Mat3 dr_bar = rot_bar * transpose(sen.pose.rotation);
      sa.pose_r = transpose(dr) * rot_bar;
      real phi2 = dot(phi, phi);
      for (int k = 0; k < 3; k++) {
        Vec3 ek{};
        ek[k] = 1;
        Mat3 dk = (1 / phi2) *
                  ((phi[k] * skew(phi) + skew(cross(phi, (Mat3::identity() - dr) * ek))) * dr);
        w_bar[k] += h * ddot(dr_bar, dk);
      }
    } else {
      Mat3 dr_bar = rot_bar * transpose(sen.pose.rotation);
      for (int k = 0; k < 3; k++) {
        Vec3 ek{};
        ek[k] = 1;
        w_bar[k] += h * ddot(dr_bar, skew(ek));
      }
    }

    // base control reverse: v_i = l + w x (x_i - t)
    for (int i = 0; i < topo.node_count; i++) {
      if (!topo.base_node_mask[i]) continue;
      Vec3 v_bar = sa.v[i];
      l_bar += v_bar;
      Vec3 r = sen.fem.positions[i] - sen.pose.translation;
      w_bar += cross(r, v_bar);
      Vec3 r_bar = cross(v_bar, tw.angular);
      sa.x[i] += r_bar;
      sa.pose_t -= r_bar;
      sa.v[i] = Vec3{};  // forward overwrote the incoming velocity
    }

    action_grad.twists[s].linear = l_bar;
    action_grad.twists[s].angular = w_bar;
    action_grad.width_rate += 0.5 * dot(sen.width_dir, l_bar);
  }
}

void observe_sensor_adjoint(const Scene& scene, int sensor_index,
                            const TactileObsBar& obs_bar, AdjointState& adj,
                            ParamGrads& grads) {
  const Sensor& s = scene.sensors[sensor_index];
  const TetMeshTopology& topo = s.mesh->topology;
  auto& sa = adj.sensors[sensor_index];
  const Mat3& rot = s.pose.rotation;

  // markers: px = camera(R^T (sum w_k x_k - t))
  if (!obs_bar.marker_px.empty()) {
    for (size_t m = 0; m < s.markers.attachments.size(); m++) {
      const auto& at = s.markers.attachments[m];
      const auto& tri = topo.surface_triangles[at.triangle];
      Vec3 world = at.weights.x * s.fem.positions[tri.nodes[0]] +
                   at.weights.y * s.fem.positions[tri.nodes[1]] +
                   at.weights.z * s.fem.positions[tri.nodes[2]];
      Vec3 local = project_to_sensor_frame(s.pose, world);
      const auto& pb = obs_bar.marker_px[m];
      Vec3 local_bar{};
      if (s.camera.kind == CameraModel::Kind::Orthographic) {
        local_bar.x = s.camera.pixels_per_unit * pb[0];
        local_bar.y = s.camera.pixels_per_unit * pb[1];
      } else {
        real depth = s.camera.camera_height - local.z;
        local_bar.x = s.camera.focal_px * pb[0] / depth;
        local_bar.y = s.camera.focal_px * pb[1] / depth;
        local_bar.z = s.camera.focal_px * (local.x * pb[0] + local.y * pb[1]) /
                      (depth * depth);
      }
      Vec3 world_bar = rot * local_bar;
      sa.pose_t -= world_bar;
      sa.pose_r += Mat3::outer(world - s.pose.translation, local_bar);
      sa.x[tri.nodes[0]] += at.weights.x * world_bar;
      sa.x[tri.nodes[1]] += at.weights.y * world_bar;
      sa.x[tri.nodes[2]] += at.weights.z * world_bar;
    }
  }

  // replay the observation's contact pass exactly
  SurfaceSnapshot snapshot = extract_surface(topo, s.fem);
  TriangleHash hash;
  hash.build(topo, s.fem.positions);
  real cap = scene.contact_cap_scale * hash.mean_edge();

  Vec3 force{}, center{};
  int touches = 0;
  struct ObsPair {
    ContactPair pair;
    Vec3 p_cp, v_cp;
    int kind;  // 0 grid, 1 cable
  };
  std::vector<ObsPair> obs_pairs;
  std::vector<int> scratch_nodes;  // mpm scratch grid active nodes

  auto add_point_pairs = [&](const std::vector<Vec3>& pts, const std::vector<Vec3>& vels,
                             const std::vector<real>& masses, int kind) {
    std::vector<int> idx(pts.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto pairs = detect_pairs(topo, s.fem.positions, snapshot, hash, pts, idx, cap);
    for (auto& pair : pairs) {
      const auto& tri = topo.surface_triangles[pair.triangle];
      Vec3 v_tri{}, p_tri{};
      for (int k = 0; k < 3; k++) {
        v_tri += pair.bary[k] * s.fem.velocities[tri.nodes[k]];
        p_tri += pair.bary[k] * s.fem.positions[tri.nodes[k]];
      }
      compute_pair_force(pair, scene.contact, v_tri, vels[pair.counterpart],
                         0.5 * masses[pair.counterpart] / scene.dt);
      force -= pair.f_n + pair.f_t;
      center += p_tri;
      touches++;
      obs_pairs.push_back({pair, pts[pair.counterpart], vels[pair.counterpart], kind});
    }
  };

  MpmGrid scratch(scene.grid.n);
  std::vector<Vec3> grid_pts, grid_vels;
  if (scene.has_mpm()) {
    p2g(scene.mpm, scratch, 0, Vec3{});
    Vec3 blo = s.fem.positions[s.surface_nodes[0]], bhi = blo;
    for (int node : s.surface_nodes)
      for (int a = 0; a < 3; a++) {
        blo[a] = std::min(blo[a], s.fem.positions[node][a]);
        bhi[a] = std::max(bhi[a], s.fem.positions[node][a]);
      }
    real mass_floor = 0;
    if (scene.contact_mass_frac > 0) {
      for (int gi : scratch.touched) mass_floor = std::max(mass_floor, scratch.mass[gi]);
      mass_floor *= scene.contact_mass_frac;
    }
    std::vector<real> grid_masses;
    for (int gi : scratch.touched) {
      if (scratch.mass[gi] <= 0 || scratch.mass[gi] < mass_floor) continue;
      Vec3 p = scratch.node_pos(gi);
      if (p.x < blo.x || p.x > bhi.x || p.y < blo.y || p.y > bhi.y || p.z < blo.z ||
          p.z > bhi.z)
        continue;
      scratch_nodes.push_back(gi);
      grid_pts.push_back(p);
      grid_vels.push_back(scratch.momentum[gi] / scratch.mass[gi]);
      grid_masses.push_back(scratch.mass[gi]);
    }
    add_point_pairs(grid_pts, grid_vels, grid_masses, 0);
  }
  if (scene.has_cable()) {
    std::vector<real> cab_masses(scene.cable.particle_count);
    for (int i = 0; i < scene.cable.particle_count; i++) {
      real w = scene.cable.inv_mass[i];
      cab_masses[i] = w > 0 ? 1.0 / w : 1e30;
    }
    add_point_pairs(scene.cable.x, scene.cable.v, cab_masses, 1);
  }

  std::vector<std::vector<PlanePair>> plane_pairs;
  for (const auto& plane : scene.planes) {
    auto pp = plane_contact(s.fem.positions, s.fem.velocities, s.surface_nodes, plane,
                            scene.contact);
    for (const auto& p : pp) {
      force += p.f_n + p.f_t;
      center += s.fem.positions[p.node];
      touches++;
    }
    plane_pairs.push_back(std::move(pp));
  }

  // obs.force = R^T force
  Vec3 force_w_bar = rot * obs_bar.force;
  sa.pose_r += Mat3::outer(force, obs_bar.force);

  // obs.contact_center = R^T (center/touches - t)
  Vec3 pt_bar{};
  if (touches > 0) {
    Vec3 cw = center / touches;
    Vec3 cw_bar = rot * obs_bar.contact_center;
    sa.pose_t -= cw_bar;
    sa.pose_r += Mat3::outer(cw - s.pose.translation, obs_bar.contact_center);
    pt_bar = cw_bar / touches;  // each contact point's share
  }

  std::vector<Vec3> scratch_mom_bar(scratch_nodes.size(), Vec3{});
  std::vector<real> scratch_mass_bar(scratch_nodes.size(), 0.0);

  for (const auto& op : obs_pairs) {
    const auto& tri = topo.surface_triangles[op.pair.triangle];
    Vec3 f_bar = -force_w_bar;  // force -= f_n + f_t
    Vec3 bary_bar0{};
    for (int k = 0; k < 3; k++) {  // center: p_tri = sum bary_k x_k
      sa.x[tri.nodes[k]] += op.pair.bary[k] * pt_bar;
      bary_bar0[k] += dot(s.fem.positions[tri.nodes[k]], pt_bar);
    }
    Vec3 pcp_bar{}, vcp_bar{};
    real ccap_bar = 0;
    pair_backward(op.pair, scene.contact, topo, s.fem.positions, s.fem.velocities,
                  op.p_cp, cap, f_bar, bary_bar0, sa.x, sa.v, pcp_bar, vcp_bar, grads,
                  &ccap_bar);
    if (op.kind == 0) {
      real m = scratch.mass[scratch_nodes[op.pair.counterpart]];
      scratch_mom_bar[op.pair.counterpart] += vcp_bar / m;
      scratch_mass_bar[op.pair.counterpart] -= dot(vcp_bar, op.v_cp) / m;
      scratch_mass_bar[op.pair.counterpart] += 0.5 / scene.dt * ccap_bar;
    } else {
      adj.cable_x[op.pair.counterpart] += pcp_bar;
      adj.cable_v[op.pair.counterpart] += vcp_bar;
    }
  }

  for (size_t pl = 0; pl < scene.planes.size(); pl++)
    for (const auto& pp : plane_pairs[pl]) {
      plane_pair_backward(pp, scene.planes[pl], scene.contact, force_w_bar, sa.x, sa.v,
                          grads);
      sa.x[pp.node] += pt_bar;  // center contribution
    }

  if (scene.has_mpm() && !scratch_nodes.empty())
    p2g_backward(scene.mpm, scene.mpm.x, scene.mpm.v, scene.mpm.F, scene.mpm.C,
                 scene.grid.n, scene.grid.inv_dx, 0, Vec3{}, scratch_nodes,
                 scratch_mom_bar, scratch_mass_bar, adj.mpm_x, adj.mpm_v, adj.mpm_f,
                 adj.mpm_c);
}

Rollout record_rollout(Scene& scene, const std::vector<FrameAction>& actions,
                       const std::vector<LossTermPtr>& losses) {
  Rollout out;
  out.actions = actions;
  out.checkpoints.reserve(actions.size());
  out.frame_losses.reserve(actions.size());
  for (size_t f = 0; f < actions.size(); f++) {
    out.checkpoints.push_back(scene.save());
    scene.step_frame(actions[f]);
    real lf = 0;
    for (const auto& term : losses) lf += term->evaluate(scene, static_cast<int>(f));
    out.frame_losses.push_back(lf);
    out.loss += lf;
  }
  out.final_state = scene.save();
  return out;
}

FdCheckResult fd_check(Scene& scene, std::vector<FrameAction>& actions,
                       const std::vector<LossTermPtr>& losses,
                       const std::function<real&(Scene&, std::vector<FrameAction>&)>& param,
                       const std::function<real(const ParamGrads&)>& pick, real h) {
  SceneState st0 = scene.save();
  Rollout ro = record_rollout(scene, actions, losses);
  ParamGrads grads = backward(scene, ro, losses);
  scene.restore(st0);

  FdCheckResult res;
  res.adjoint_grad = pick(grads);
  real& theta = param(scene, actions);
  real t0 = theta;
  if (h <= 0) h = fd_step(t0);
  theta = t0 + h;
  real lp = record_rollout(scene, actions, losses).loss;
  scene.restore(st0);
  theta = t0 - h;
  real lm = record_rollout(scene, actions, losses).loss;
  scene.restore(st0);
  theta = t0;
  res.fd_grad = (lp - lm) / (2 * h);
  res.rel_err = std::abs(res.adjoint_grad - res.fd_grad) /
                (std::max(std::abs(res.adjoint_grad), std::abs(res.fd_grad)) + 1e-12);
  return res;
}

ParamGrads backward(Scene& scene, const Rollout& rollout,
                    const std::vector<LossTermPtr>& losses) {
  ParamGrads grads;
  grads.actions.resize(rollout.actions.size());
  AdjointState adj = AdjointState::zeros_like(scene);

  std::vector<SceneState> sub_states(scene.substeps);
  for (int f = static_cast<int>(rollout.actions.size()) - 1; f >= 0; f--) {
    scene.restore(rollout.checkpoints[f]);
    scene.begin_frame(rollout.actions[f]);
    for (int k = 0; k < scene.substeps; k++) {
      sub_states[k] = scene.save();
      scene.substep();
    }
    for (const auto& term : losses) term->accumulate(scene, f, adj, grads);
    for (int k = scene.substeps - 1; k >= 0; k--) {
      scene.restore(sub_states[k]);
      substep_backward(scene, adj, grads);
    }
    scene.restore(rollout.checkpoints[f]);
    begin_frame_backward(scene, rollout.actions[f], adj, grads.actions[f]);
  }
  scene.restore(rollout.final_state);
  return grads;
}

}  // namespace dt
