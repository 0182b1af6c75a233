#include "dt/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "dt/meshing.hpp"
#include "dt/sysid.hpp"

namespace dt {

namespace {

constexpr real kPi = std::numbers::pi_v<real>;

}  // namespace

const char* task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::GraspElastic: return "grasp-elastic";
    case TaskKind::GraspPlastic: return "grasp-plastic";
    case TaskKind::SurfaceFollow: return "surface-follow";
    case TaskKind::CableStraighten: return "cable-straighten";
    case TaskKind::CaseOpen: return "case-open";
    default: return "object-repose";
  }
}

TaskWeights task_weights(TaskKind kind) {
  switch (kind) {
    case TaskKind::GraspElastic: return {1e2, 5e0};
    case TaskKind::GraspPlastic: return {5e-2, 1e1};
    case TaskKind::SurfaceFollow: return {1e2, 1e0};
    case TaskKind::CableStraighten: return {1e-2, 1e-5};
    case TaskKind::CaseOpen: return {1e1, 5e-12};
    default: return {1e1, 5e-12};  // ObjectRepose
  }
}

TaskLearningRates task_learning_rates(TaskKind kind) {
  switch (kind) {
    case TaskKind::GraspElastic:
    case TaskKind::GraspPlastic: return {5e-2, 1e-5, 5e-2};
    case TaskKind::SurfaceFollow: return {5e-7, 5e-5, 0};
    case TaskKind::CableStraighten: return {1e-2, 1e-2, 1e-2};
    case TaskKind::CaseOpen: return {1e3, 1e1, 0};
    default: return {5e0, 1e3, 0};  // ObjectRepose
  }
}

// ---- scalar losses ----

real loss_pos(const Vec3& p, const Vec3& target) { return norm_sq(p - target); }

real loss_force(const Vec3& f, const Vec3& target) { return norm_sq(f - target); }

real loss_loc(const Vec3& l, const Vec3& target) { return norm_sq(l - target); }

real loss_angle(real theta_deg, real target_deg) {
  real d = theta_deg - target_deg;
  return d * d;
}

real loss_cable(const std::vector<Vec3>& p, const std::vector<Vec3>& target) {
  if (p.size() != target.size()) throw SimError("loss_cable: node count mismatch");
  real loss = 0;
  for (size_t i = 0; i < p.size(); i++) loss += norm_sq(p[i] - target[i]);
  return loss;
}

real loss_slip(const Vec3& f_t, const Vec3& f_n, real mu) {
  real fn = norm(f_n);
  if (fn < 1e-9) return 1.0;  // no normal load: declared cone-boundary value
  return norm(f_t) / (mu * fn);
}

real combined_loss(real state_loss, real tactile_loss, const TaskWeights& w) {
  return w.alpha * state_loss + w.beta * tactile_loss;
}

// ---- deformation grids ----

namespace {

// Alignment and per-cell provenance of one rasterization, kept so the adjoint
// can run with the alignment and nearest-particle choices frozen.
struct RasterAux {
  Mat3 rotation = Mat3::identity();
  Vec3 centroid;
  std::vector<int> particles;  // body particle indices
  std::vector<Vec3> q;         // aligned particle positions
  std::vector<int> nearest;    // per cell: index into `particles`
};

void rasterize_core(const MpmParticles& mpm, int body, int n, DeformGrids& out,
                    RasterAux* aux) {
  std::vector<int> idx;
  for (int p = 0; p < mpm.count; p++)
    if (body < 0 || mpm.body_id[p] == body) idx.push_back(p);
  if (idx.empty()) throw SimError("rasterize_body: no particles in body");

  Vec3 c{}, c0{};
  real m = 0;
  for (int p : idx) {
    c += mpm.mass[p] * mpm.x[p];
    c0 += mpm.mass[p] * mpm.rest_x[p];
    m += mpm.mass[p];
  }
  c = c / m;
  c0 = c0 / m;
  Mat3 a = Mat3::zero();
  for (int p : idx) a += mpm.mass[p] * Mat3::outer(mpm.x[p] - c, mpm.rest_x[p] - c0);
  Mat3 r = std::abs(det(a)) > 1e-12 ? polar_rotation(a) : Mat3::identity();

  // the lattice lives in the rest frame so every rasterization of the same
  // body shares origin and spacing
  Vec3 lo{1e30, 1e30, 1e30}, hi{-1e30, -1e30, -1e30};
  for (int p : idx)
    for (int k = 0; k < 3; k++) {
      real v = mpm.rest_x[p][k] - c0[k];
      lo[k] = std::min(lo[k], v);
      hi[k] = std::max(hi[k], v);
    }
  real side = 0;
  for (int k = 0; k < 3; k++) side = std::max(side, hi[k] - lo[k]);
  side = std::max(side * 1.4, 1e-6);
  out.n = n;
  out.dx = side / n;
  for (int k = 0; k < 3; k++) out.origin[k] = 0.5 * (lo[k] + hi[k]) - 0.5 * side;

  Mat3 rt = transpose(r);
  std::vector<Vec3> q(idx.size());
  for (size_t i = 0; i < idx.size(); i++) q[i] = rt * (mpm.x[idx[i]] - c);

  size_t cells = (size_t)n * n * n;
  out.mass.assign(cells, 0);
  out.sdf.assign(cells, 0);
  std::vector<int> nearest(cells, 0);

  for (size_t i = 0; i < idx.size(); i++) {
    Vec3 g = (q[i] - out.origin) / out.dx;
    g -= Vec3{0.5, 0.5, 0.5};  // cell centers
    int b[3];
    real f[3];
    bool in = true;
    for (int k = 0; k < 3; k++) {
      b[k] = (int)std::floor(g[k]);
      f[k] = g[k] - b[k];
      if (b[k] < 0 || b[k] + 1 >= n) in = false;
    }
    if (!in) continue;
    for (int dk = 0; dk < 2; dk++)
      for (int dj = 0; dj < 2; dj++)
        for (int di = 0; di < 2; di++) {
          real w = (di ? f[0] : 1 - f[0]) * (dj ? f[1] : 1 - f[1]) * (dk ? f[2] : 1 - f[2]);
          size_t cell = ((size_t)(b[2] + dk) * n + (b[1] + dj)) * n + (b[0] + di);
          out.mass[cell] += w * mpm.mass[idx[i]];
        }
  }

  for (int kz = 0; kz < n; kz++)
    for (int ky = 0; ky < n; ky++)
      for (int kx = 0; kx < n; kx++) {
        Vec3 y = out.origin + Vec3{(kx + 0.5) * out.dx, (ky + 0.5) * out.dx,
                                   (kz + 0.5) * out.dx};
        size_t cell = ((size_t)kz * n + ky) * n + kx;
        real best = 1e30;
        int arg = 0;
        for (size_t i = 0; i < idx.size(); i++) {
          real d = norm_sq(y - q[i]);
          if (d < best) {
            best = d;
            arg = (int)i;
          }
        }
        real radius = 0.5 * std::cbrt(mpm.volume0[idx[arg]]);
        out.sdf[cell] = std::sqrt(best) - radius;
        nearest[cell] = arg;
      }

  if (aux) {
    aux->rotation = r;
    aux->centroid = c;
    aux->particles = std::move(idx);
    aux->q = std::move(q);
    aux->nearest = std::move(nearest);
  }
}

}  // namespace

DeformGrids rasterize_body(const MpmParticles& mpm, int body, int n) {
  DeformGrids out;
  rasterize_core(mpm, body, n, out, nullptr);
  return out;
}

real loss_deform(const DeformGrids& current, const DeformGrids& target, real gamma,
                 real eta) {
  if (current.n != target.n || current.mass.size() != target.mass.size())
    throw SimError("loss_deform: lattice mismatch");
  real dist = 0, mass = 0;
  for (size_t i = 0; i < current.sdf.size(); i++) dist += current.sdf[i] * target.sdf[i];
  for (size_t i = 0; i < current.mass.size(); i++)
    mass += std::abs(current.mass[i] - target.mass[i]);
  return gamma * dist + eta * mass;
}

// ---- loss terms ----

namespace {

// sensor base tracks a straight waypoint path, one lerp step per frame
class SensorPathLoss : public LossTerm {
 public:
  SensorPathLoss(const Vec3& a, const Vec3& b, int frames, real w)
      : a_(a), b_(b), frames_(frames), w_(w) {}

  Vec3 target(int frame) const {
    real s = (real)(frame + 1) / (real)frames_;
    return a_ + s * (b_ - a_);
  }

  real evaluate(const Scene& scene, int frame) override {
    return w_ * norm_sq(scene.sensors[0].pose.translation - target(frame));
  }

  void accumulate(const Scene& scene, int frame, AdjointState& adj, ParamGrads&) override {
    adj.sensors[0].pose_t += w_ * 2.0 * (scene.sensors[0].pose.translation - target(frame));
  }

 private:
  Vec3 a_, b_;
  int frames_;
  real w_;
};

class ForceLoss : public LossTerm {
 public:
  ForceLoss(int sensor, const Vec3& target, real w) : sensor_(sensor), target_(target), w_(w) {}

  real evaluate(const Scene& scene, int) override {
    return w_ * norm_sq(observe_sensor(scene, sensor_).force - target_);
  }

  void accumulate(const Scene& scene, int, AdjointState& adj, ParamGrads& grads) override {
    TactileObsBar bar;
    bar.force = w_ * 2.0 * (observe_sensor(scene, sensor_).force - target_);
    observe_sensor_adjoint(scene, sensor_, bar, adj, grads);
  }

 private:
  int sensor_;
  Vec3 target_;
  real w_;
};

class LocLoss : public LossTerm {
 public:
  LocLoss(int sensor, const Vec3& target, real w) : sensor_(sensor), target_(target), w_(w) {}

  real evaluate(const Scene& scene, int) override {
    TactileObservation obs = observe_sensor(scene, sensor_);
    if (!obs.contact_valid) return 0;
    return w_ * norm_sq(obs.contact_center - target_);
  }

  void accumulate(const Scene& scene, int, AdjointState& adj, ParamGrads& grads) override {
    TactileObservation obs = observe_sensor(scene, sensor_);
    if (!obs.contact_valid) return;
    TactileObsBar bar;
    bar.contact_center = w_ * 2.0 * (obs.contact_center - target_);
    observe_sensor_adjoint(scene, sensor_, bar, adj, grads);
  }

 private:
  int sensor_;
  Vec3 target_;
  real w_;
};

real body_angle_deg(const MpmParticles& mpm, int body) {
  Mat3 r = object_rotation(mpm, body);
  real u = std::clamp(0.5 * (trace(r) - 1.0), -1.0, 1.0);
  return std::acos(u) * 180.0 / kPi;
}

// squared angle error of one body's best-fit rotation, final frame only
class AngleLoss : public LossTerm {
 public:
  AngleLoss(int body, real target_deg, int last_frame, real w)
      : body_(body), target_(target_deg), last_(last_frame), w_(w) {}

  real evaluate(const Scene& scene, int frame) override {
    if (frame != last_) return 0;
    real d = body_angle_deg(scene.mpm, body_) - target_;
    return w_ * d * d;
  }

  void accumulate(const Scene& scene, int frame, AdjointState& adj, ParamGrads&) override {
    if (frame != last_) return;
    const MpmParticles& mpm = scene.mpm;
    Vec3 c{}, c0{};
    real m = 0;
    for (int p = 0; p < mpm.count; p++) {
      if (body_ >= 0 && mpm.body_id[p] != body_) continue;
      c += mpm.mass[p] * mpm.x[p];
      c0 += mpm.mass[p] * mpm.rest_x[p];
      m += mpm.mass[p];
    }
    if (m <= 0) return;
    c = c / m;
    c0 = c0 / m;
    Mat3 a = Mat3::zero();
    for (int p = 0; p < mpm.count; p++) {
      if (body_ >= 0 && mpm.body_id[p] != body_) continue;
      a += mpm.mass[p] * Mat3::outer(mpm.x[p] - c, mpm.rest_x[p] - c0);
    }
    if (std::abs(det(a)) <= 1e-12) return;
    Mat3 r = polar_rotation(a);
    real u = std::clamp(0.5 * (trace(r) - 1.0), -1.0, 1.0);
    real theta = std::acos(u) * 180.0 / kPi;
    real dl_dtheta = w_ * 2.0 * (theta - target_);
    real dtheta_du = -(180.0 / kPi) / std::sqrt(std::max(1.0 - u * u, 1e-12));
    // u = (tr R - 1)/2, so R_bar is a multiple of the identity
    Mat3 r_bar = (0.5 * dl_dtheta * dtheta_du) * Mat3::identity();
    Mat3 a_bar = polar_adjoint(a, r_bar);
    // the centroid coupling vanishes: sum of m (rest - c0) is zero
    for (int p = 0; p < mpm.count; p++) {
      if (body_ >= 0 && mpm.body_id[p] != body_) continue;
      adj.mpm_x[p] += mpm.mass[p] * (a_bar * (mpm.rest_x[p] - c0));
    }
  }

 private:
  int body_;
  real target_;
  int last_;
  real w_;
};

class CableLoss : public LossTerm {
 public:
  CableLoss(std::vector<Vec3> target, real w) : target_(std::move(target)), w_(w) {}

  real evaluate(const Scene& scene, int) override {
    return w_ * loss_cable(scene.cable.x, target_);
  }

  void accumulate(const Scene& scene, int, AdjointState& adj, ParamGrads&) override {
    for (size_t i = 0; i < target_.size(); i++)
      adj.cable_x[i] += w_ * 2.0 * (scene.cable.x[i] - target_[i]);
  }

 private:
  std::vector<Vec3> target_;
  real w_;
};

// squared distance of one body's centroid to a target point, final frame only
class ObjectPosLoss : public LossTerm {
 public:
  ObjectPosLoss(int body, const Vec3& target, int last_frame, real w)
      : body_(body), target_(target), last_(last_frame), w_(w) {}

  real evaluate(const Scene& scene, int frame) override {
    if (frame != last_) return 0;
    return w_ * norm_sq(object_centroid(scene.mpm, body_) - target_);
  }

  void accumulate(const Scene& scene, int frame, AdjointState& adj, ParamGrads&) override {
    if (frame != last_) return;
    const MpmParticles& mpm = scene.mpm;
    real m = 0;
    for (int p = 0; p < mpm.count; p++)
      if (body_ < 0 || mpm.body_id[p] == body_) m += mpm.mass[p];
    if (m <= 0) return;
    Vec3 bar = w_ * 2.0 * (object_centroid(mpm, body_) - target_);
    for (int p = 0; p < mpm.count; p++)
      if (body_ < 0 || mpm.body_id[p] == body_) adj.mpm_x[p] += (mpm.mass[p] / m) * bar;
  }

 private:
  int body_;
  Vec3 target_;
  int last_;
  real w_;
};

// tangential-to-Coulomb-capacity ratio of the sensor-frame net force;
// 1 with no gradient when the normal load vanishes
class SlipLoss : public LossTerm {
 public:
  SlipLoss(int sensor, real w) : sensor_(sensor), w_(w) {}

  real evaluate(const Scene& scene, int) override {
    Vec3 f = observe_sensor(scene, sensor_).force;
    return w_ * loss_slip({f.x, f.y, 0}, {0, 0, f.z}, scene.contact.mu);
  }

  void accumulate(const Scene& scene, int, AdjointState& adj, ParamGrads& grads) override {
    Vec3 f = observe_sensor(scene, sensor_).force;
    real fn = std::abs(f.z);
    if (fn < 1e-9) return;
    real ft = std::sqrt(f.x * f.x + f.y * f.y);
    real mu = scene.contact.mu;
    real denom = mu * fn;
    TactileObsBar bar;
    if (ft > 1e-15) {
      bar.force.x = w_ * f.x / (ft * denom);
      bar.force.y = w_ * f.y / (ft * denom);
    }
    bar.force.z = -w_ * (f.z >= 0 ? 1.0 : -1.0) * ft * mu / (denom * denom);
    grads.mu += -w_ * ft / (mu * denom);
    observe_sensor_adjoint(scene, sensor_, bar, adj, grads);
  }

 private:
  int sensor_;
  real w_;
};

// SDF inner product + mass L1 against the episode-start rasterization, final
// frame only. Alignment and nearest-particle picks are frozen in the adjoint.
class DeformLoss : public LossTerm {
 public:
  DeformLoss(int body, DeformGrids target, int last_frame, real gamma, real eta, real w)
      : body_(body), target_(std::move(target)), last_(last_frame), gamma_(gamma),
        eta_(eta), w_(w) {}

  real evaluate(const Scene& scene, int frame) override {
    if (frame != last_) return 0;
    return w_ * loss_deform(rasterize_body(scene.mpm, body_, target_.n), target_, gamma_, eta_);
  }

  void accumulate(const Scene& scene, int frame, AdjointState& adj, ParamGrads&) override {
    if (frame != last_) return;
    DeformGrids cur;
    RasterAux aux;
    rasterize_core(scene.mpm, body_, target_.n, cur, &aux);
    int n = cur.n;
    std::vector<Vec3> q_bar(aux.particles.size());

    for (int kz = 0; kz < n; kz++)
      for (int ky = 0; ky < n; ky++)
        for (int kx = 0; kx < n; kx++) {
          size_t cell = ((size_t)kz * n + ky) * n + kx;
          int i = aux.nearest[cell];
          Vec3 y = cur.origin +
                   Vec3{(kx + 0.5) * cur.dx, (ky + 0.5) * cur.dx, (kz + 0.5) * cur.dx};
          Vec3 u = y - aux.q[i];
          real len = norm(u);
          if (len > 1e-12)
            q_bar[i] += (w_ * gamma_ * target_.sdf[cell] / len) * (-1.0 * u);
        }

    for (size_t i = 0; i < aux.particles.size(); i++) {
      Vec3 g = (aux.q[i] - cur.origin) / cur.dx;
      g -= Vec3{0.5, 0.5, 0.5};
      int b[3];
      real f[3];
      bool in = true;
      for (int k = 0; k < 3; k++) {
        b[k] = (int)std::floor(g[k]);
        f[k] = g[k] - b[k];
        if (b[k] < 0 || b[k] + 1 >= n) in = false;
      }
      if (!in) continue;
      real mass = scene.mpm.mass[aux.particles[i]];
      for (int dk = 0; dk < 2; dk++)
        for (int dj = 0; dj < 2; dj++)
          for (int di = 0; di < 2; di++) {
            size_t cell = ((size_t)(b[2] + dk) * n + (b[1] + dj)) * n + (b[0] + di);
            real diff = cur.mass[cell] - target_.mass[cell];
            if (diff == 0) continue;
            real s = w_ * eta_ * (diff > 0 ? 1.0 : -1.0) * mass / cur.dx;
            real wx = di ? f[0] : 1 - f[0], wy = dj ? f[1] : 1 - f[1];
            real wz = dk ? f[2] : 1 - f[2];
            q_bar[i].x += s * (di ? 1.0 : -1.0) * wy * wz;
            q_bar[i].y += s * (dj ? 1.0 : -1.0) * wx * wz;
            q_bar[i].z += s * (dk ? 1.0 : -1.0) * wx * wy;
          }
    }

    // q = R^T (x - c) with R, c frozen
    for (size_t i = 0; i < aux.particles.size(); i++)
      adj.mpm_x[aux.particles[i]] += aux.rotation * q_bar[i];
  }

 private:
  int body_;
  DeformGrids target_;
  int last_;
  real gamma_, eta_, w_;
};

}  // namespace

// ---- scene builders ----

namespace {

real dome_apex_z(const SensorMesh& mesh) {
  real z = 0;
  for (const auto& p : mesh.rest_positions) z = std::min(z, p.z);
  return z;
}

void common_scene(Scene& scene, const ContactParams& contact) {
  scene.dt = 1e-4;
  scene.substeps = 10;
  scene.gravity = Vec3{};
  // heavily damped gel, dense enough that the explicit friction kick
  // dt*mu*fn/m stays below the Coulomb stick threshold mu*fn/k_t, otherwise
  // contact nodes chatter forever instead of settling
  scene.fem_damping = 1000;
  scene.fem_density = 2000;
  // grid-node counterparts carry mass up to 1.5 cells beyond the particle
  // surface; near-massless fringe nodes blow up under the damping term, so
  // drop them and clamp the remaining (still deep) phantom penetrations
  scene.contact_mass_frac = 0.3;
  scene.contact_cap_scale = 0.1;
  scene.contact = contact;
}

real particle_top(const MpmParticles& mpm) {
  real z = -1e30;
  for (const auto& p : mpm.x) z = std::max(z, p.z);
  return z;
}

real particle_max_x(const MpmParticles& mpm) {
  real x = -1e30;
  for (const auto& p : mpm.x) x = std::max(x, p.x);
  return x;
}

std::shared_ptr<const SensorMesh> task_dome() {
  DomeSpec spec;
  spec.resolution = 6;
  return std::make_shared<SensorMesh>(build_dome_sensor(spec));
}

// Advances the sensor along `dir` from its (contact-free) build pose until the
// static contact force reaches `target`, then bisects. Calibrating the seat
// against the observation sidesteps the mismatch between the particle surface
// and the smeared grid-mass surface the contact actually couples through.
void seat_sensor(Scene& scene, int si, const Vec3& dir, real target) {
  Sensor& s = scene.sensors[si];
  const std::vector<Vec3> base = s.fem.positions;
  const Vec3 base_t = s.pose.translation;
  auto place = [&](real t) {
    for (size_t i = 0; i < base.size(); i++) s.fem.positions[i] = base[i] + t * dir;
    s.pose.translation = base_t + t * dir;
  };
  auto force_at = [&](real t) {
    place(t);
    return norm(observe_sensor(scene, si).force);
  };
  const real step = 0.25 / scene.grid.n;
  real lo = 0, hi = 0;
  while (force_at(hi) < target && hi < 0.2) {
    lo = hi;
    hi += step;
  }
  for (int it = 0; it < 30; it++) {
    real mid = 0.5 * (lo + hi);
    (force_at(mid) < target ? lo : hi) = mid;
  }
  place(0.5 * (lo + hi));
}

}  // namespace

TrajectoryPlan TrajectoryPlan::constant(int frames, int sensors, const Twist& twist,
                                        real width_rate) {
  TrajectoryPlan plan;
  FrameAction a;
  a.twists.assign(sensors, twist);
  a.width_rate = width_rate;
  plan.actions.assign(frames, a);
  return plan;
}

TrajectoryPlan TaskScene::initial_plan() const {
  int sensors = (int)scene.sensors.size();
  TrajectoryPlan plan = TrajectoryPlan::constant(frames, sensors, Twist{});
  switch (kind) {
    case TaskKind::GraspElastic:
    case TaskKind::GraspPlastic: {
      // close, then lift; speeds keep the documented 5:1 close-to-lift ratio
      int close = frames / 2;
      for (int f = 0; f < frames; f++) {
        if (f < close) {
          plan.actions[f].width_rate = -1.0;
        } else {
          for (auto& tw : plan.actions[f].twists) tw.linear = {0, 0, 0.2};
        }
      }
      break;
    }
    case TaskKind::CableStraighten: {
      for (int f = 0; f < frames; f++) {
        if (f < frames / 4) {
          plan.actions[f].width_rate = -0.4;
        } else {
          plan.actions[f].width_rate = -0.05;
          for (auto& tw : plan.actions[f].twists) tw.linear = {0.3, -0.3, 0};
        }
      }
      break;
    }
    default: break;  // zero plan; the optimizer discovers the motion
  }
  return plan;
}

TaskScene build_task_scene(TaskKind kind, uint64_t seed) {
  (void)seed;  // geometry is deterministic; the seed feeds optimizer baselines
  TaskScene task;
  task.kind = kind;
  task.weights = task_weights(kind);
  Scene& s = task.scene;
  auto dome = task_dome();
  real apex = dome_apex_z(*dome);

  switch (kind) {
    case TaskKind::SurfaceFollow: {
      common_scene(s, {34.53, 269.44, 154.78, 43.85});
      ObjectMaterial slab;
      slab.kind = MaterialKind::Rigid;
      slab.mu = 1.428e6;
      slab.lambda = 5.714e6;
      slab.density = 32e3;
      s.mpm = init_from_mesh(make_box_mesh({0.3, 0.15, 0.04}), 0.6, {0.5, 0.5, 0.12}, slab,
                             12, 0);
      s.boundary.floor_z = 0.075;  // slab rests just above its bottom face
      SensorPose pose;
      pose.translation = {0.35, 0.5, particle_top(s.mpm) + 0.03 - apex};
      s.add_sensor(dome, pose);
      seat_sensor(s, 0, {0, 0, -1}, 0.5);
      task.path_start = s.sensors[0].pose.translation;
      task.path_end = task.path_start + Vec3{0.08, 0, 0};
      // hold the calibrated pressing force while sliding
      task.force_target = observe_sensor(s, 0).force;
      task.frames = 40;
      task.rates = {0.5, 0.2, 0};
      break;
    }
    case TaskKind::ObjectRepose: {
      common_scene(s, {55.0, 269.44, 108.72, 14.16});
      ObjectMaterial block;
      block.kind = MaterialKind::Rigid;
      // light enough that friction through the gel can tip it within the
      // short control horizon
      block.density = 50;
      s.mpm = init_from_mesh(make_box_mesh({0.12, 0.06, 0.06}), 0.24, {0.58, 0.5, 0.135},
                             block, 10, 0);
      s.boundary.floor_z = 0.07;
      s.boundary.wall_x = 0.71;  // the block reposes against this wall
      SensorPose pose;
      pose.translation = {0.50, 0.5, particle_top(s.mpm) + 0.03 - apex};
      s.add_sensor(dome, pose);
      seat_sensor(s, 0, {0, 0, -1}, 2.0);
      task.angle_target_deg = 45;
      task.force_target = observe_sensor(s, 0).force;
      task.frames = 40;
      task.rates = {0.5, 0.2, 0};
      break;
    }
    case TaskKind::CaseOpen: {
      common_scene(s, {34.53, 269.44, 108.72, 14.16});
      std::vector<ArticulatedPart> parts(3);
      parts[0].z_lo = 0.185;  // lid
      parts[0].z_hi = 0.30;
      parts[0].material.mu = 1.428e3;
      parts[0].material.lambda = 5.714e3;
      parts[0].material.density = 50;
      parts[0].rigid_body = true;
      parts[1].z_lo = 0.155;  // hinge band
      parts[1].z_hi = 0.185;
      parts[1].material.mu = 1.428e1;
      parts[1].material.lambda = 5.714e1;
      parts[1].material.density = 50;
      parts[2].z_lo = 0.0;  // base
      parts[2].z_hi = 0.155;
      parts[2].material.mu = 1.428e5;
      parts[2].material.lambda = 5.714e5;
      parts[2].material.density = 5e3;
      parts[2].rigid_body = true;
      s.mpm = build_articulated(make_box_mesh({0.09, 0.06, 0.075}), 0.18, {0.5, 0.5, 0.15},
                                parts, 9);
      s.boundary.floor_z = 0.07;
      SensorPose pose;
      pose.translation = {0.42, 0.5, particle_top(s.mpm) + 0.03 - apex};
      s.add_sensor(dome, pose);
      seat_sensor(s, 0, {0, 0, -1}, 1.0);
      task.object_body = 0;  // the lid
      task.angle_target_deg = 90;
      task.force_target = observe_sensor(s, 0).force;
      task.frames = 40;
      task.rates = {0.5, 0.2, 0};
      break;
    }
    case TaskKind::CableStraighten: {
      common_scene(s, {55.33, 239.97, 94.35, 4.90});
      CableSpawn spawn;
      spawn.start = {0.30, 0.5, 0.30};
      spawn.end = {0.60, 0.5, 0.30};
      spawn.particle_count = 30;
      spawn.radius = 0.01;
      spawn.bend_stiffness = 0;  // a stiff cable would straighten by itself
      s.cable = spawn_cable(spawn);
      real seg = s.cable.rest_segment_length;
      task.cable_target.resize(spawn.particle_count);
      for (int i = 0; i < spawn.particle_count; i++)
        task.cable_target[i] = spawn.start + Vec3{i * seg, 0, 0};
      // bend the free half of the cable toward +y
      const int kBendAt = 15;
      for (int i = kBendAt; i < spawn.particle_count; i++)
        s.cable.x[i] = spawn.start + Vec3{(kBendAt - 1) * seg, (i - kBendAt + 1) * seg, 0};

      const int kGrip = 22;
      Vec3 gp = s.cable.x[kGrip];
      SensorPose below, above;
      below.rotation = axis_angle({1, 0, 0}, kPi / 2);  // apex toward +y
      below.translation = {gp.x, gp.y - 0.03 + apex, gp.z};
      above.rotation = axis_angle({1, 0, 0}, -kPi / 2);  // apex toward -y
      above.translation = {gp.x, gp.y + 0.03 - apex, gp.z};
      s.add_sensor(dome, below);
      s.add_sensor(dome, above);
      seat_sensor(s, 0, {0, 1, 0}, 0.05);
      seat_sensor(s, 1, {0, -1, 0}, 0.05);
      s.sensors[0].width_dir = {0, -1, 0};  // positive width rate opens the jaw
      s.sensors[1].width_dir = {0, 1, 0};
      task.force_target = {};
      task.frames = 40;
      task.rates = {0.2, 0.1, 0.2};
      break;
    }
    case TaskKind::GraspElastic:
    case TaskKind::GraspPlastic: {
      common_scene(s, {55.33, 239.97, 94.35, 4.90});
      s.gravity = {0, 0, -2.0};  // the object drops when the grip slips
      ObjectMaterial ball;
      ball.kind = kind == TaskKind::GraspPlastic ? MaterialKind::Elastoplastic
                                                 : MaterialKind::ElasticCorotated;
      ball.mu = 1.428e3;
      ball.lambda = 5.714e3;
      ball.yield_stress = 5e3;
      ball.density = 1.2e3;
      s.mpm = init_from_mesh(make_sphere_mesh(0.08), 0.16, {0.5, 0.5, 0.16}, ball, 8, 0);
      s.boundary.floor_z = 0.075;
      real half = particle_max_x(s.mpm) - 0.5;  // particle radius of the ball
      SensorPose left, right;
      left.rotation = axis_angle({0, 1, 0}, -kPi / 2);  // apex toward +x
      left.translation = {0.5 - half - 0.03 + apex, 0.5, 0.16};
      right.rotation = axis_angle({0, 1, 0}, kPi / 2);  // apex toward -x
      right.translation = {0.5 + half + 0.03 - apex, 0.5, 0.16};
      s.add_sensor(dome, left);
      s.add_sensor(dome, right);
      seat_sensor(s, 0, {1, 0, 0}, 0.5);
      seat_sensor(s, 1, {-1, 0, 0}, 0.5);
      s.sensors[0].width_dir = {-1, 0, 0};
      s.sensors[1].width_dir = {1, 0, 0};
      task.pos_target = {0.5, 0.5, 0.21};
      task.frames = 50;
      task.rates = {0.3, 0.1, 0.3};
      if (kind == TaskKind::GraspPlastic) task.deform_target = rasterize_body(s.mpm, 0);
      break;
    }
  }
  task.initial_state = task.scene.save();
  return task;
}

std::vector<LossTermPtr> task_losses(const TaskScene& task, bool use_tactile) {
  std::vector<LossTermPtr> losses;
  real a = task.weights.alpha, b = task.weights.beta;
  int last = task.frames - 1;
  real apex = 0;
  if (!task.scene.sensors.empty()) apex = dome_apex_z(*task.scene.sensors[0].mesh);

  switch (task.kind) {
    case TaskKind::SurfaceFollow:
      losses.push_back(
          std::make_shared<SensorPathLoss>(task.path_start, task.path_end, task.frames, a));
      if (use_tactile) losses.push_back(std::make_shared<ForceLoss>(0, task.force_target, b));
      break;
    case TaskKind::CableStraighten:
      losses.push_back(std::make_shared<CableLoss>(task.cable_target, a));
      if (use_tactile) {
        for (int s = 0; s < 2; s++) {
          losses.push_back(std::make_shared<ForceLoss>(s, task.force_target, b));
          losses.push_back(std::make_shared<LocLoss>(s, Vec3{0, 0, apex}, b));
        }
      }
      break;
    case TaskKind::CaseOpen:
    case TaskKind::ObjectRepose:
      losses.push_back(
          std::make_shared<AngleLoss>(task.object_body, task.angle_target_deg, last, a));
      if (use_tactile) losses.push_back(std::make_shared<ForceLoss>(0, task.force_target, b));
      break;
    case TaskKind::GraspElastic:
    case TaskKind::GraspPlastic:
      losses.push_back(
          std::make_shared<ObjectPosLoss>(task.object_body, task.pos_target, last, a));
      if (task.kind == TaskKind::GraspPlastic)
        losses.push_back(
            std::make_shared<DeformLoss>(task.object_body, task.deform_target, last, 0.1, 0.1, a));
      if (use_tactile)
        for (int s = 0; s < 2; s++) losses.push_back(std::make_shared<SlipLoss>(s, b));
      break;
  }
  return losses;
}

// ---- rollout evaluation ----

TaskReport evaluate_plan(TaskScene& task, const TrajectoryPlan& plan, bool use_tactile) {
  if (plan.frames() != task.frames) throw SimError("evaluate_plan: plan length mismatch");
  std::vector<LossTermPtr> losses = task_losses(task, use_tactile);
  Scene& scene = task.scene;
  scene.restore(task.initial_state);

  TaskReport report;
  real travel = 0, slip = 0;
  Vec3 prev_pose = scene.sensors.empty() ? Vec3{} : scene.sensors[0].pose.translation;
  Vec3 prev_offset{};
  bool have_offset = false;

  for (int f = 0; f < task.frames; f++) {
    scene.step_frame(plan.actions[f]);
    real frame_loss = 0;
    for (auto& term : losses) frame_loss += term->evaluate(scene, f);
    report.frame_losses.push_back(frame_loss);
    report.loss += frame_loss;

    if (!scene.sensors.empty()) {
      TactileObservation obs = observe_sensor(scene, 0);
      Vec3 pose = scene.sensors[0].pose.translation;
      if (obs.contact_valid) {
        travel += norm(pose - prev_pose);
        if (scene.has_mpm()) {
          Vec3 offset = object_centroid(scene.mpm, task.object_body) - pose;
          if (have_offset) slip += norm(offset - prev_offset);
          prev_offset = offset;
          have_offset = true;
        }
      } else {
        have_offset = false;
      }
      prev_pose = pose;
    }
  }

  switch (task.kind) {
    case TaskKind::SurfaceFollow: report.metric = travel; break;
    case TaskKind::GraspElastic:
    case TaskKind::GraspPlastic: report.metric = slip; break;
    case TaskKind::CableStraighten:
      report.metric = loss_cable(scene.cable.x, task.cable_target) /
                      (real)task.cable_target.size();
      break;
    case TaskKind::CaseOpen:
    case TaskKind::ObjectRepose:
      report.metric = body_angle_deg(scene.mpm, task.object_body);
      break;
  }
  return report;
}

real task_metric(TaskScene& task, const TrajectoryPlan& plan) {
  return evaluate_plan(task, plan).metric;
}

// ---- optimizers ----

namespace {

constexpr real kActionClamp = 10.0;

int plan_dims(const TrajectoryPlan& plan, int sensors) {
  return plan.frames() * (sensors * 6 + 1);
}

void flatten_plan(const TrajectoryPlan& plan, int sensors, std::vector<real>& out) {
  out.clear();
  for (const auto& act : plan.actions) {
    for (int s = 0; s < sensors; s++) {
      const Twist& tw = act.twists[s];
      for (int k = 0; k < 3; k++) out.push_back(tw.angular[k]);
      for (int k = 0; k < 3; k++) out.push_back(tw.linear[k]);
    }
    out.push_back(act.width_rate);
  }
}

TrajectoryPlan unflatten_plan(const std::vector<real>& v, int frames, int sensors) {
  TrajectoryPlan plan = TrajectoryPlan::constant(frames, sensors, Twist{});
  size_t i = 0;
  for (auto& act : plan.actions) {
    for (int s = 0; s < sensors; s++) {
      for (int k = 0; k < 3; k++) act.twists[s].angular[k] = v[i++];
      for (int k = 0; k < 3; k++) act.twists[s].linear[k] = v[i++];
    }
    act.width_rate = v[i++];
  }
  return plan;
}

// learning rate per flattened component: angular lr_o, linear lr_p, width lr_w
real component_lr(int dim_in_frame, int sensors, const TaskLearningRates& rates) {
  if (dim_in_frame == sensors * 6) return rates.lr_w;
  return dim_in_frame % 6 < 3 ? rates.lr_o : rates.lr_p;
}

real rollout_loss(TaskScene& task, const TrajectoryPlan& plan,
                  const std::vector<LossTermPtr>& losses) {
  Scene& scene = task.scene;
  scene.restore(task.initial_state);
  real loss = 0;
  for (int f = 0; f < task.frames; f++) {
    scene.step_frame(plan.actions[f]);
    for (auto& term : losses) loss += term->evaluate(scene, f);
  }
  return loss;
}

}  // namespace

TaskOptResult optimize_trajectory_gradient(TaskScene& task, const TrajectoryPlan& init,
                                           int iterations, bool use_tactile) {
  if (init.frames() != task.frames)
    throw SimError("optimize_trajectory_gradient: plan length mismatch");
  const real beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int sensors = (int)task.scene.sensors.size();
  int per_frame = sensors * 6 + 1;

  std::vector<LossTermPtr> losses = task_losses(task, use_tactile);
  TrajectoryPlan plan = init;
  std::vector<real> flat, m(plan_dims(init, sensors), 0), v(plan_dims(init, sensors), 0);

  TaskOptResult result;
  result.best_plan = init;
  real best_loss = std::numeric_limits<real>::infinity();
  int adam_t = 0;

  for (int it = 0; it < iterations; it++) {
    real loss;
    ParamGrads grads;
    try {
      task.scene.restore(task.initial_state);
      Rollout ro = record_rollout(task.scene, plan.actions, losses);
      loss = ro.loss;
      if (std::isfinite(loss)) grads = backward(task.scene, ro, losses);
    } catch (const std::exception&) {
      loss = std::numeric_limits<real>::quiet_NaN();
    }
    if (!std::isfinite(loss)) {  // failed rollout: log a penalty and back off
      result.failures++;
      result.loss_curve.push_back(std::isfinite(best_loss) ? 10 * best_loss : 1e30);
      plan = result.best_plan;
      continue;
    }
    result.loss_curve.push_back(loss);
    if (loss < best_loss) {
      best_loss = loss;
      result.best_plan = plan;
    }

    flatten_plan(plan, sensors, flat);
    real t = (real)++adam_t;
    for (int f = 0; f < task.frames; f++) {
      for (int d = 0; d < per_frame; d++) {
        int i = f * per_frame + d;
        real lr = component_lr(d, sensors, task.rates);
        if (lr == 0) continue;
        real g = 0;
        if (d == sensors * 6) {
          g = grads.actions[f].width_rate;
        } else {
          const Twist& tg = grads.actions[f].twists[d / 6];
          g = d % 6 < 3 ? tg.angular[d % 3] : tg.linear[d % 3];
        }
        m[i] = beta1 * m[i] + (1 - beta1) * g;
        v[i] = beta2 * v[i] + (1 - beta2) * g * g;
        real mhat = m[i] / (1 - std::pow(beta1, t));
        real vhat = v[i] / (1 - std::pow(beta2, t));
        flat[i] = std::clamp(flat[i] - lr * mhat / (std::sqrt(vhat) + eps), -kActionClamp,
                             kActionClamp);
      }
    }
    plan = unflatten_plan(flat, task.frames, sensors);
  }
  return result;
}

TaskOptResult optimize_trajectory_cmaes(TaskScene& task, const TrajectoryPlan& init,
                                        int iterations, bool use_tactile, uint64_t seed) {
  if (init.frames() != task.frames)
    throw SimError("optimize_trajectory_cmaes: plan length mismatch");
  int sensors = (int)task.scene.sensors.size();
  std::vector<LossTermPtr> losses = task_losses(task, use_tactile);

  std::vector<real> a0;
  flatten_plan(init, sensors, a0);
  int dims = (int)a0.size();
  // unit-box coordinates around the initial plan; the half range matches the
  // Adam action clamp so both optimizers search the same set
  const real range = 2 * kActionClamp;

  TaskOptResult result;
  result.best_plan = init;
  real best_loss = std::numeric_limits<real>::infinity();

  auto to_plan = [&](const std::vector<real>& u) {
    std::vector<real> a(dims);
    for (int i = 0; i < dims; i++)
      a[i] = std::clamp(a0[i] + (u[i] - 0.5) * range, -kActionClamp, kActionClamp);
    return unflatten_plan(a, task.frames, sensors);
  };
  auto objective = [&](const std::vector<real>& u) {
    TrajectoryPlan plan = to_plan(u);
    real loss;
    try {
      loss = rollout_loss(task, plan, losses);
    } catch (const std::exception&) {
      loss = std::numeric_limits<real>::quiet_NaN();
    }
    if (!std::isfinite(loss)) {
      result.failures++;
      loss = 1e30;
    }
    result.loss_curve.push_back(loss);
    if (loss < best_loss) {
      best_loss = loss;
      result.best_plan = plan;
    }
    return loss;
  };

  // sigma 0.15 in action units
  std::vector<real> u0(dims, 0.5);
  cmaes_minimize(dims, objective, u0, 0.15 / range, 20, iterations, seed);
  return result;
}

// ---- observation export ----

std::vector<real> export_observation(const Scene& scene, bool with_tactile) {
  std::vector<real> obs;
  for (const auto& sensor : scene.sensors) {
    for (int k = 0; k < 9; k++) obs.push_back(sensor.pose.rotation.m[k]);
    for (int k = 0; k < 3; k++) obs.push_back(sensor.pose.translation[k]);
  }
  obs.push_back(scene.sensors.size() >= 2
                    ? norm(scene.sensors[0].pose.translation - scene.sensors[1].pose.translation)
                    : 0.0);
  Vec3 center = scene.has_mpm() ? object_centroid(scene.mpm) : Vec3{};
  for (int k = 0; k < 3; k++) obs.push_back(center[k]);

  if (with_tactile) {
    for (size_t s = 0; s < scene.sensors.size(); s++) {
      TactileObservation t = observe_sensor(scene, (int)s);
      for (int k = 0; k < 3; k++) obs.push_back(t.force[k]);
      for (int k = 0; k < 3; k++) obs.push_back(t.contact_center[k]);
      obs.push_back(t.contact_valid ? 1.0 : 0.0);
      // markers subsampled so the image signal stays a quarter of its raw size
      for (size_t k = 0; k < t.marker_px.size(); k += 4) {
        obs.push_back(t.marker_px[k][0]);
        obs.push_back(t.marker_px[k][1]);
      }
    }
  }
  return obs;
}

}  // namespace dt
