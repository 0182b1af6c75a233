#include "dt/sysid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <random>
#include <sstream>

namespace dt {

std::array<real, 6> SysIdParams::as_array() const {
  return {k_n, k_d, k_t, mu_f, lame_mu, lame_lambda};
}

SysIdParams SysIdParams::from_array(const std::array<real, 6>& a) {
  SysIdParams p;
  p.k_n = a[0];
  p.k_d = a[1];
  p.k_t = a[2];
  p.mu_f = a[3];
  p.lame_mu = a[4];
  p.lame_lambda = a[5];
  return p;
}

void SysIdParams::apply(Scene& scene) const {
  scene.contact.k_n = k_n;
  scene.contact.k_d = k_d;
  scene.contact.k_t = k_t;
  scene.contact.mu = mu_f;
  scene.elastomer.mu = lame_mu;
  scene.elastomer.lambda = lame_lambda;
}

SysIdParams SysIdBounds::project(const SysIdParams& p) const {
  std::array<real, 6> a = p.as_array();
  for (int i = 0; i < 6; i++) a[i] = std::clamp(a[i], lo[i], hi[i]);
  return SysIdParams::from_array(a);
}

std::array<real, 6> SysIdBounds::normalize(const SysIdParams& p) const {
  std::array<real, 6> a = p.as_array(), u{};
  for (int i = 0; i < 6; i++) u[i] = (a[i] - lo[i]) / (hi[i] - lo[i]);
  return u;
}

SysIdParams SysIdBounds::denormalize(const std::array<real, 6>& u) const {
  std::array<real, 6> a{};
  for (int i = 0; i < 6; i++) a[i] = lo[i] + std::clamp(u[i], 0.0, 1.0) * (hi[i] - lo[i]);
  return SysIdParams::from_array(a);
}

const char* trajectory_kind_name(TrajectoryKind kind) {
  switch (kind) {
    case TrajectoryKind::PressSlide: return "press-slide";
    case TrajectoryKind::PressTwistZ: return "press-twist-z";
    default: return "press-twist-x";
  }
}

namespace {

real dome_apex_z(const SensorMesh& mesh) {
  real z = 0;
  for (const auto& p : mesh.rest_positions) z = std::min(z, p.z);
  return z;
}

}  // namespace

Scene make_sysid_scene(const SysIdParams& params, const TrajectoryScript& script) {
  Scene scene;
  scene.dt = 1e-4;
  scene.substeps = 10;
  scene.gravity = Vec3{};
  scene.fem_damping = script.sensor_damping;
  scene.fem_density = script.sensor_density;
  params.apply(scene);

  DomeSpec spec;
  spec.resolution = script.sensor_resolution;
  auto dome = std::make_shared<SensorMesh>(build_dome_sensor(spec));
  SensorPose pose;
  pose.translation = {0.5, 0.5, script.start_gap - dome_apex_z(*dome)};
  scene.add_sensor(dome, pose);
  scene.planes.push_back(PlaneSpec{{0, 0, 1}, 0});
  return scene;
}

std::vector<FrameAction> script_actions(TrajectoryKind kind, const TrajectoryScript& script) {
  std::vector<FrameAction> actions;
  FrameAction press;
  press.twists.resize(1);
  press.twists[0].linear = {0, 0, -script.press_speed};
  actions.insert(actions.end(), script.press_frames, press);

  FrameAction motion;
  motion.twists.resize(1);
  switch (kind) {
    case TrajectoryKind::PressSlide:
      motion.twists[0].linear = {script.slide_speed, 0, 0};
      break;
    case TrajectoryKind::PressTwistZ:
      motion.twists[0].angular = {0, 0, script.twist_speed};
      break;
    case TrajectoryKind::PressTwistX:
      motion.twists[0].angular = {script.tilt_speed, 0, 0};
      break;
  }
  actions.insert(actions.end(), script.motion_frames, motion);
  return actions;
}

ContactTrajectory simulate_trajectory(const SysIdParams& params, TrajectoryKind kind,
                                      const TrajectoryScript& script) {
  Scene scene = make_sysid_scene(params, script);
  std::vector<FrameAction> actions = script_actions(kind, script);

  ContactTrajectory traj;
  traj.kind = kind;
  traj.frame_dt = scene.frame_dt();
  for (size_t f = 0; f < actions.size(); f++) {
    scene.step_frame(actions[f]);
    TactileObservation obs = observe_sensor(scene, 0);
    traj.t.push_back((real)(f + 1) * traj.frame_dt);
    traj.poses.push_back(scene.sensors[0].pose);
    traj.markers.push_back(obs.marker_px);
    traj.forces.push_back(obs.force);
  }
  return traj;
}

real sysid_loss(const ContactTrajectory& simulated, const ContactTrajectory& reference) {
  if (simulated.frame_count() != reference.frame_count())
    throw SimError("sysid_loss: frame count mismatch");
  real loss = 0;
  for (int f = 0; f < simulated.frame_count(); f++) {
    const auto& ms = simulated.markers[f];
    const auto& mr = reference.markers[f];
    if (ms.size() != mr.size()) throw SimError("sysid_loss: marker count mismatch");
    real px = 0;
    for (size_t k = 0; k < ms.size(); k++) {
      real du = ms[k][0] - mr[k][0], dv = ms[k][1] - mr[k][1];
      px += du * du + dv * dv;
    }
    loss += 10.0 * px / (real)ms.size();
    loss += norm_sq(simulated.forces[f] - reference.forces[f]);
  }
  return loss;
}

real marker_mse(const ContactTrajectory& a, const ContactTrajectory& b) {
  if (a.frame_count() != b.frame_count()) throw SimError("marker_mse: frame count mismatch");
  real total = 0;
  for (int f = 0; f < a.frame_count(); f++) {
    real px = 0;
    for (size_t k = 0; k < a.markers[f].size(); k++) {
      real du = a.markers[f][k][0] - b.markers[f][k][0];
      real dv = a.markers[f][k][1] - b.markers[f][k][1];
      px += du * du + dv * dv;
    }
    total += px / (real)a.markers[f].size();
  }
  return total / (real)a.frame_count();
}

EvalStats eval_stats(const std::vector<real>& values) {
  EvalStats s;
  if (values.empty()) return s;
  for (real v : values) s.mean += v;
  s.mean /= (real)values.size();
  for (real v : values) s.stddev += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(s.stddev / (real)values.size());
  return s;
}

namespace {

// per-frame marker + force match against a reference trajectory
class TrajectoryLoss : public LossTerm {
 public:
  explicit TrajectoryLoss(const ContactTrajectory& ref) : ref_(ref) {}

  real evaluate(const Scene& scene, int frame) override {
    TactileObservation obs = observe_sensor(scene, 0);
    const auto& mr = ref_.markers[frame];
    real px = 0;
    for (size_t k = 0; k < mr.size(); k++) {
      real du = obs.marker_px[k][0] - mr[k][0], dv = obs.marker_px[k][1] - mr[k][1];
      px += du * du + dv * dv;
    }
    return 10.0 * px / (real)mr.size() + norm_sq(obs.force - ref_.forces[frame]);
  }

  void accumulate(const Scene& scene, int frame, AdjointState& adj,
                  ParamGrads& grads) override {
    TactileObservation obs = observe_sensor(scene, 0);
    const auto& mr = ref_.markers[frame];
    TactileObsBar bar;
    bar.marker_px.resize(mr.size());
    real w = 10.0 * 2.0 / (real)mr.size();
    for (size_t k = 0; k < mr.size(); k++) {
      bar.marker_px[k] = {w * (obs.marker_px[k][0] - mr[k][0]),
                          w * (obs.marker_px[k][1] - mr[k][1])};
    }
    bar.force = 2.0 * (obs.force - ref_.forces[frame]);
    observe_sensor_adjoint(scene, 0, bar, adj, grads);
  }

 private:
  const ContactTrajectory& ref_;
};

std::array<real, 6> param_grads_array(const ParamGrads& g) {
  return {g.k_n, g.k_d, g.k_t, g.mu, g.lame_mu, g.lame_lambda};
}

}  // namespace

SysIdResult optimize_gradient(const ContactTrajectory& reference, const SysIdParams& init,
                              const SysIdOptions& options) {
  // Appendix learning rates: lr_kn, lr_kd = 20; lr_kt, lr_fc = 5; Lame = 50
  const std::array<real, 6> lr{20, 20, 5, 5, 50, 50};
  const real beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  std::vector<FrameAction> actions = script_actions(reference.kind, options.script);
  SysIdParams params = options.bounds.project(init);
  std::array<real, 6> m{}, v{};

  SysIdResult result;
  result.params = params;
  real best_loss = std::numeric_limits<real>::infinity();
  SysIdParams last_finite = params;

  for (int step = 0; step < options.steps; step++) {
    Scene scene = make_sysid_scene(params, options.script);
    std::vector<LossTermPtr> losses = {std::make_shared<TrajectoryLoss>(reference)};
    Rollout ro = record_rollout(scene, actions, losses);
    if (!std::isfinite(ro.loss)) {  // diverged: roll back and halt
      params = last_finite;
      break;
    }
    last_finite = params;
    result.loss_curve.push_back(ro.loss);
    if (ro.loss < best_loss) {
      best_loss = ro.loss;
      result.params = params;
    }

    ParamGrads grads = backward(scene, ro, losses);
    std::array<real, 6> g = param_grads_array(grads);
    std::array<real, 6> p = params.as_array();
    real t = (real)(step + 1);
    for (int i = 0; i < 6; i++) {
      if (!options.free_mask[i]) continue;
      m[i] = beta1 * m[i] + (1 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1 - beta2) * g[i] * g[i];
      real mhat = m[i] / (1 - std::pow(beta1, t));
      real vhat = v[i] / (1 - std::pow(beta2, t));
      p[i] -= lr[i] * mhat / (std::sqrt(vhat) + eps);
    }
    params = options.bounds.project(SysIdParams::from_array(p));
  }
  return result;
}

// ---- CMA-ES ----

namespace {

// Jacobi eigendecomposition of a symmetric matrix (row-major n x n).
void sym_eigen(int n, std::vector<real> a, std::vector<real>& eigvals,
               std::vector<real>& eigvecs) {
  eigvecs.assign((size_t)n * n, 0);
  for (int i = 0; i < n; i++) eigvecs[(size_t)i * n + i] = 1;
  for (int sweep = 0; sweep < 64; sweep++) {
    real off = 0;
    for (int i = 0; i < n; i++)
      for (int j = i + 1; j < n; j++) off += a[(size_t)i * n + j] * a[(size_t)i * n + j];
    if (off < 1e-24) break;
    for (int p = 0; p < n; p++)
      for (int q = p + 1; q < n; q++) {
        real apq = a[(size_t)p * n + q];
        if (std::abs(apq) < 1e-18) continue;
        real app = a[(size_t)p * n + p], aqq = a[(size_t)q * n + q];
        real theta = 0.5 * (aqq - app) / apq;
        real t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        real c = 1.0 / std::sqrt(t * t + 1), s = t * c;
        for (int k = 0; k < n; k++) {
          real akp = a[(size_t)k * n + p], akq = a[(size_t)k * n + q];
          a[(size_t)k * n + p] = c * akp - s * akq;
          a[(size_t)k * n + q] = s * akp + c * akq;
        }
        for (int k = 0; k < n; k++) {
          real apk = a[(size_t)p * n + k], aqk = a[(size_t)q * n + k];
          a[(size_t)p * n + k] = c * apk - s * aqk;
          a[(size_t)q * n + k] = s * apk + c * aqk;
        }
        for (int k = 0; k < n; k++) {
          real vkp = eigvecs[(size_t)k * n + p], vkq = eigvecs[(size_t)k * n + q];
          eigvecs[(size_t)k * n + p] = c * vkp - s * vkq;
          eigvecs[(size_t)k * n + q] = s * vkp + c * vkq;
        }
      }
  }
  eigvals.resize(n);
  for (int i = 0; i < n; i++) eigvals[i] = std::max(a[(size_t)i * n + i], 1e-20);
}

}  // namespace

std::vector<real> cmaes_minimize(int dim, const std::function<real(const std::vector<real>&)>& f,
                                 const std::vector<real>& x0, real sigma0, int population,
                                 int steps, uint64_t seed) {
  const int n = dim, lambda = population, mu = lambda / 2;
  std::vector<real> weights(mu);
  real wsum = 0;
  for (int i = 0; i < mu; i++) {
    weights[i] = std::log(mu + 0.5) - std::log(i + 1.0);
    wsum += weights[i];
  }
  real mu_eff = 0;
  for (int i = 0; i < mu; i++) {
    weights[i] /= wsum;
    mu_eff += weights[i] * weights[i];
  }
  mu_eff = 1.0 / mu_eff;

  const real c_sigma = (mu_eff + 2) / (n + mu_eff + 5);
  const real d_sigma =
      1 + 2 * std::max(0.0, std::sqrt((mu_eff - 1) / (n + 1.0)) - 1) + c_sigma;
  const real c_c = (4 + mu_eff / n) / (n + 4 + 2 * mu_eff / n);
  const real c_1 = 2.0 / ((n + 1.3) * (n + 1.3) + mu_eff);
  const real c_mu =
      std::min(1 - c_1, 2 * (mu_eff - 2 + 1 / mu_eff) / ((n + 2.0) * (n + 2.0) + mu_eff));
  const real chi_n = std::sqrt((real)n) * (1 - 1.0 / (4 * n) + 1.0 / (21.0 * n * n));

  std::vector<real> mean = x0, p_sigma(n, 0), p_c(n, 0);
  std::vector<real> C((size_t)n * n, 0);
  for (int i = 0; i < n; i++) C[(size_t)i * n + i] = 1;
  real sigma = sigma0;

  std::mt19937_64 rng(seed);
  std::normal_distribution<real> gauss(0, 1);

  std::vector<real> best = x0;
  for (real& v : best) v = std::clamp(v, 0.0, 1.0);
  real best_f = f(best);

  std::vector<real> eigvals, B, D(n);
  // lazy eigendecomposition for large n; every step when n is small
  const int eig_every = std::max(1, n / 10);
  for (int step = 0; step < steps; step++) {
    if (step % eig_every == 0) {
      sym_eigen(n, C, eigvals, B);
      for (int i = 0; i < n; i++) D[i] = std::sqrt(eigvals[i]);
    }

    struct Sample {
      std::vector<real> x, z;
      real value;
    };
    std::vector<Sample> samples(lambda);
    for (int k = 0; k < lambda; k++) {
      std::vector<real> z(n), y(n, 0), x(n);
      for (int i = 0; i < n; i++) z[i] = gauss(rng);
      for (int i = 0; i < n; i++)
        for (int j = 0; j < n; j++) y[i] += B[(size_t)i * n + j] * D[j] * z[j];
      for (int i = 0; i < n; i++) x[i] = std::clamp(mean[i] + sigma * y[i], 0.0, 1.0);
      samples[k].x = x;
      samples[k].z = z;
      samples[k].value = f(x);
      if (samples[k].value < best_f) {
        best_f = samples[k].value;
        best = x;
      }
    }
    std::stable_sort(samples.begin(), samples.end(),
                     [](const Sample& a, const Sample& b) { return a.value < b.value; });

    std::vector<real> old_mean = mean, zw(n, 0);
    for (int i = 0; i < n; i++) {
      mean[i] = 0;
      for (int k = 0; k < mu; k++) mean[i] += weights[k] * samples[k].x[i];
    }
    // y_w in the C^{-1/2}-whitened frame via the recorded z draws
    for (int i = 0; i < n; i++)
      for (int k = 0; k < mu; k++) zw[i] += weights[k] * samples[k].z[i];
    std::vector<real> bz(n, 0);  // B z_w: whitened step direction
    for (int i = 0; i < n; i++)
      for (int j = 0; j < n; j++) bz[i] += B[(size_t)i * n + j] * zw[j];

    real ps_norm = 0;
    for (int i = 0; i < n; i++) {
      p_sigma[i] = (1 - c_sigma) * p_sigma[i] +
                   std::sqrt(c_sigma * (2 - c_sigma) * mu_eff) * bz[i];
      ps_norm += p_sigma[i] * p_sigma[i];
    }
    ps_norm = std::sqrt(ps_norm);

    real h_sigma = ps_norm / std::sqrt(1 - std::pow(1 - c_sigma, 2.0 * (step + 1))) <
                           (1.4 + 2.0 / (n + 1)) * chi_n
                       ? 1.0
                       : 0.0;
    std::vector<real> y_w(n);
    for (int i = 0; i < n; i++) y_w[i] = (mean[i] - old_mean[i]) / sigma;
    for (int i = 0; i < n; i++)
      p_c[i] = (1 - c_c) * p_c[i] + h_sigma * std::sqrt(c_c * (2 - c_c) * mu_eff) * y_w[i];

    for (int i = 0; i < n; i++)
      for (int j = 0; j < n; j++) {
        real rank1 = p_c[i] * p_c[j];
        real rankmu = 0;
        for (int k = 0; k < mu; k++) {
          real yi = (samples[k].x[i] - old_mean[i]) / sigma;
          real yj = (samples[k].x[j] - old_mean[j]) / sigma;
          rankmu += weights[k] * yi * yj;
        }
        C[(size_t)i * n + j] =
            (1 - c_1 - c_mu) * C[(size_t)i * n + j] + c_1 * rank1 + c_mu * rankmu;
      }

    sigma *= std::exp((c_sigma / d_sigma) * (ps_norm / chi_n - 1));
    sigma = std::clamp(sigma, 1e-8, 1.0);
  }
  return best;
}

SysIdResult optimize_cmaes(const ContactTrajectory& reference, const SysIdParams& init,
                           const SysIdOptions& options) {
  std::array<real, 6> init_u = options.bounds.normalize(options.bounds.project(init));
  SysIdResult result;

  auto objective = [&](const std::vector<real>& u) {
    std::array<real, 6> ua{};
    for (int i = 0; i < 6; i++) ua[i] = options.free_mask[i] ? u[i] : init_u[i];
    SysIdParams p = options.bounds.denormalize(ua);
    real loss = sysid_loss(simulate_trajectory(p, reference.kind, options.script), reference);
    result.loss_curve.push_back(loss);
    return loss;
  };

  std::vector<real> x0(init_u.begin(), init_u.end());
  std::vector<real> best = cmaes_minimize(6, objective, x0, 0.15, 20, options.steps,
                                          options.seed);
  std::array<real, 6> ba{};
  for (int i = 0; i < 6; i++) ba[i] = options.free_mask[i] ? best[i] : init_u[i];
  result.params = options.bounds.denormalize(ba);
  return result;
}

SysIdResult baseline_random(const ContactTrajectory& reference, int draws,
                            const SysIdOptions& options) {
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<real> unit(0, 1);
  SysIdResult result;
  real best = std::numeric_limits<real>::infinity();
  for (int d = 0; d < draws; d++) {
    std::array<real, 6> u{};
    for (int i = 0; i < 6; i++) u[i] = unit(rng);
    SysIdParams p = options.bounds.denormalize(u);
    real loss = sysid_loss(simulate_trajectory(p, reference.kind, options.script), reference);
    result.loss_curve.push_back(loss);
    if (loss < best) {
      best = loss;
      result.params = p;
    }
  }
  return result;
}

// ---- trajectory CSV ----

namespace {

std::array<real, 4> quat_from_mat(const Mat3& r) {
  std::array<real, 4> q{};  // w, x, y, z
  real tr = trace(r);
  if (tr > 0) {
    real s = std::sqrt(tr + 1.0) * 2;
    q[0] = 0.25 * s;
    q[1] = (r(2, 1) - r(1, 2)) / s;
    q[2] = (r(0, 2) - r(2, 0)) / s;
    q[3] = (r(1, 0) - r(0, 1)) / s;
  } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
    real s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2;
    q[0] = (r(2, 1) - r(1, 2)) / s;
    q[1] = 0.25 * s;
    q[2] = (r(0, 1) + r(1, 0)) / s;
    q[3] = (r(0, 2) + r(2, 0)) / s;
  } else if (r(1, 1) > r(2, 2)) {
    real s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2;
    q[0] = (r(0, 2) - r(2, 0)) / s;
    q[1] = (r(0, 1) + r(1, 0)) / s;
    q[2] = 0.25 * s;
    q[3] = (r(1, 2) + r(2, 1)) / s;
  } else {
    real s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2;
    q[0] = (r(1, 0) - r(0, 1)) / s;
    q[1] = (r(0, 2) + r(2, 0)) / s;
    q[2] = (r(1, 2) + r(2, 1)) / s;
    q[3] = 0.25 * s;
  }
  return q;
}

Mat3 mat_from_quat(const std::array<real, 4>& q) {
  real w = q[0], x = q[1], y = q[2], z = q[3];
  return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
          2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)};
}

}  // namespace

void save_trajectory_csv(const ContactTrajectory& traj, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw SimError("save_trajectory_csv: cannot open " + path);
  size_t markers = traj.markers.empty() ? 0 : traj.markers[0].size();
  out << "t,px,py,pz,qw,qx,qy,qz";
  for (size_t k = 0; k < markers; k++) out << ",m" << k << "u,m" << k << "v";
  out << ",Fx,Fy,Fz\n";

  char buf[32];
  auto put = [&](real v, bool lead_comma = true) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    if (lead_comma) out << ',';
    out << buf;
  };
  for (int f = 0; f < traj.frame_count(); f++) {
    put(traj.t[f], false);
    const SensorPose& pose = traj.poses[f];
    put(pose.translation.x);
    put(pose.translation.y);
    put(pose.translation.z);
    std::array<real, 4> q = quat_from_mat(pose.rotation);
    for (real v : q) put(v);
    for (const auto& m : traj.markers[f]) {
      put(m[0]);
      put(m[1]);
    }
    put(traj.forces[f].x);
    put(traj.forces[f].y);
    put(traj.forces[f].z);
    out << '\n';
  }
}

ContactTrajectory load_trajectory_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SimError("load_trajectory_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw SimError("load_trajectory_csv: empty file " + path);
  size_t cols = 1 + (size_t)std::count(line.begin(), line.end(), ',');
  if (cols < 11 || (cols - 11) % 2 != 0)
    throw SimError("load_trajectory_csv: unexpected column count in " + path);
  size_t markers = (cols - 11) / 2;

  ContactTrajectory traj;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<real> vals;
    vals.reserve(cols);
    std::string cell;
    while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
    if (vals.size() != cols) throw SimError("load_trajectory_csv: ragged row in " + path);

    traj.t.push_back(vals[0]);
    SensorPose pose;
    pose.translation = {vals[1], vals[2], vals[3]};
    pose.rotation = mat_from_quat({vals[4], vals[5], vals[6], vals[7]});
    traj.poses.push_back(pose);
    std::vector<std::array<real, 2>> m(markers);
    for (size_t k = 0; k < markers; k++) m[k] = {vals[8 + 2 * k], vals[9 + 2 * k]};
    traj.markers.push_back(std::move(m));
    traj.forces.push_back({vals[cols - 3], vals[cols - 2], vals[cols - 1]});
  }
  if (traj.frame_count() >= 2) traj.frame_dt = traj.t[1] - traj.t[0];
  return traj;
}

}  // namespace dt
