#include <doctest.h>

#include <memory>
#include <random>

#include "dt/adjoint.hpp"
#include "dt/sim.hpp"

using namespace dt;

namespace {

std::mt19937 rng(1234);

real urand() { return std::uniform_real_distribution<real>(-1, 1)(rng); }

Vec3 rvec() { return {urand(), urand(), urand()}; }

Mat3 rmat(real scale) {
  Mat3 m;
  for (int i = 0; i < 9; i++) m.m[i] = scale * urand();
  return m;
}

template <class F>
Mat3 fd_mat(F&& f, const Mat3& a, real h) {
  Mat3 g;
  for (int i = 0; i < 9; i++) {
    Mat3 ap = a, am = a;
    ap.m[i] += h;
    am.m[i] -= h;
    g.m[i] = (f(ap) - f(am)) / (2 * h);
  }
  return g;
}

template <class F>
Vec3 fd_vec(F&& f, const Vec3& v, real h) {
  Vec3 g;
  for (int i = 0; i < 3; i++) {
    Vec3 vp = v, vm = v;
    vp[i] += h;
    vm[i] -= h;
    g[i] = (f(vp) - f(vm)) / (2 * h);
  }
  return g;
}

template <class F>
real fd_scalar(F&& f, real x, real h) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

real mat_rel(const Mat3& got, const Mat3& want) {
  return frobenius_norm(got - want) / (frobenius_norm(want) + 1e-12);
}

real vec_rel(const Vec3& got, const Vec3& want) {
  return norm(got - want) / (norm(want) + 1e-12);
}

real rel(real got, real want) {
  return std::abs(got - want) / (std::abs(want) + 1e-12);
}

}  // namespace

// ---- kernel-level finite-difference checks ----

TEST_CASE("svd adjoint matches finite differences on smooth probes") {
  for (int trial = 0; trial < 8; trial++) {
    Mat3 a = Mat3::identity() + rmat(0.35);
    Svd3 s = svd3(a);
    if (det(a) < 0.2) continue;  // keep sigma positive and well separated
    if (s.sigma.x - s.sigma.y < 0.08 || s.sigma.y - s.sigma.z < 0.08) continue;
    Mat3 w = rmat(1.0);

    // phi(A) = W : U diag(sigma^3) V^T -- invariant to SVD sign/order gauge
    auto phi = [&](const Mat3& m) {
      Svd3 sv = svd3(m);
      Vec3 g3{sv.sigma.x * sv.sigma.x * sv.sigma.x, sv.sigma.y * sv.sigma.y * sv.sigma.y,
              sv.sigma.z * sv.sigma.z * sv.sigma.z};
      return ddot(w, sv.U * Mat3::diag(g3) * transpose(sv.V));
    };
    Vec3 g3{s.sigma.x * s.sigma.x * s.sigma.x, s.sigma.y * s.sigma.y * s.sigma.y,
            s.sigma.z * s.sigma.z * s.sigma.z};
    Mat3 u_bar = w * s.V * Mat3::diag(g3);
    Mat3 v_bar = transpose(w) * s.U * Mat3::diag(g3);
    Mat3 k = transpose(s.U) * w * s.V;
    Vec3 sigma_bar{3 * s.sigma.x * s.sigma.x * k(0, 0), 3 * s.sigma.y * s.sigma.y * k(1, 1),
                   3 * s.sigma.z * s.sigma.z * k(2, 2)};
    Mat3 grad = svd_adjoint(s, u_bar, sigma_bar, v_bar);
    Mat3 fd = fd_mat(phi, a, 1e-6);
    CHECK(mat_rel(grad, fd) < 1e-5);

    // sigma-only probe: phi = sum sigma^2 = |A|_F^2, gradient 2A
    Mat3 grad2 = svd_adjoint(s, Mat3::zero(), 2 * s.sigma, Mat3::zero());
    CHECK(mat_rel(grad2, 2 * a) < 1e-8);
  }
}

TEST_CASE("polar rotation adjoint matches finite differences") {
  for (int trial = 0; trial < 8; trial++) {
    Mat3 a = Mat3::identity() + rmat(0.4);
    if (det(a) < 0.2) continue;
    Mat3 w = rmat(1.0);
    auto phi = [&](const Mat3& m) { return ddot(w, polar_rotation(m)); };
    Mat3 grad = polar_adjoint(a, w);
    Mat3 fd = fd_mat(phi, a, 1e-6);
    CHECK(mat_rel(grad, fd) < 1e-5);
  }
}

TEST_CASE("first Piola adjoint matches finite differences incl. material params") {
  ElastomerMaterial mat;
  for (int trial = 0; trial < 6; trial++) {
    Mat3 f = Mat3::identity() + rmat(0.25);
    if (det(f) < 0.3) continue;
    Mat3 w = rmat(1.0);
    auto phi = [&](const Mat3& m) { return ddot(w, first_piola_stress(m, mat)); };
    real mu_bar = 0, lambda_bar = 0;
    Mat3 grad = first_piola_adjoint(f, mat, w, &mu_bar, &lambda_bar);
    CHECK(mat_rel(grad, fd_mat(phi, f, 1e-6)) < 1e-5);

    auto phi_mu = [&](real mu) {
      ElastomerMaterial m2 = mat;
      m2.mu = mu;
      return ddot(w, first_piola_stress(f, m2));
    };
    auto phi_lambda = [&](real lambda) {
      ElastomerMaterial m2 = mat;
      m2.lambda = lambda;
      return ddot(w, first_piola_stress(f, m2));
    };
    CHECK(rel(mu_bar, fd_scalar(phi_mu, mat.mu, 1e-3)) < 1e-6);
    CHECK(rel(lambda_bar, fd_scalar(phi_lambda, mat.lambda, 1e-3)) < 1e-6);
  }
}

TEST_CASE("particle stress adjoint matches finite differences") {
  for (MaterialKind kind : {MaterialKind::ElasticCorotated, MaterialKind::ElasticNeoHookean}) {
    ObjectMaterial mat;
    mat.kind = kind;
    for (int trial = 0; trial < 6; trial++) {
      Mat3 f = Mat3::identity() + rmat(0.25);
      if (det(f) < 0.3) continue;
      Mat3 w = rmat(1.0);
      auto phi = [&](const Mat3& m) { return ddot(w, particle_stress(m, mat)); };
      Mat3 grad = particle_stress_adjoint(f, mat, w);
      CHECK(mat_rel(grad, fd_mat(phi, f, 1e-6)) < 1e-5);
    }
  }
}

TEST_CASE("von Mises return map adjoint matches finite differences") {
  real mu = 1.428e3;
  Mat3 w = rmat(1.0);

  // yielded: large deviatoric trial strain, small yield stress
  Mat3 f_y = Mat3::diag(1.35, 0.78, 1.05) + rmat(0.03);
  REQUIRE(det(f_y) > 0.3);
  REQUIRE(mat_rel(von_mises_return_map(f_y, 50.0, mu), f_y) > 1e-4);
  auto phi_y = [&](const Mat3& m) { return ddot(w, von_mises_return_map(m, 50.0, mu)); };
  Mat3 grad_y = von_mises_adjoint(f_y, 50.0, mu, w);
  CHECK(mat_rel(grad_y, fd_mat(phi_y, f_y, 1e-6)) < 1e-5);

  // elastic: huge yield stress, the map is the identity
  Mat3 f_e = Mat3::identity() + rmat(0.05);
  auto phi_e = [&](const Mat3& m) { return ddot(w, von_mises_return_map(m, 1e9, mu)); };
  Mat3 grad_e = von_mises_adjoint(f_e, 1e9, mu, w);
  CHECK(mat_rel(grad_e, w) < 1e-12);
  CHECK(mat_rel(grad_e, fd_mat(phi_e, f_e, 1e-6)) < 1e-8);
}

TEST_CASE("point-triangle geometry adjoint matches finite differences per region") {
  Vec3 a{0.02, -0.01, 0.0}, b{1.05, 0.08, 0.12}, c{0.25, 0.92, -0.06};
  Vec3 n0 = normalized(cross(b - a, c - a));
  Vec3 m = (a + b + c) / 3.0;

  auto edge_out = [&](const Vec3& e0, const Vec3& e1, const Vec3& opp) {
    Vec3 dir = cross(e1 - e0, n0);
    Vec3 mid = 0.5 * (e0 + e1);
    if (dot(dir, opp - mid) > 0) dir = -dir;
    return mid + 0.35 * normalized(dir);
  };

  struct Probe {
    Vec3 p;
    int region;
  };
  std::vector<Probe> probes = {
      {m - 0.06 * n0, 0},
      {m + 0.09 * n0, 0},
      {edge_out(a, b, c) - 0.04 * n0, 1},
      {edge_out(b, c, a) + 0.05 * n0, 2},
      {edge_out(c, a, b) - 0.03 * n0, 3},
      {a + 0.4 * normalized(a - m) + 0.05 * n0, 4},
      {b + 0.4 * normalized(b - m) - 0.04 * n0, 5},
      {c + 0.4 * normalized(c - m) + 0.06 * n0, 6},
  };

  real wd = 0.7;
  Vec3 wn = rvec(), wb = rvec();
  auto phi = [&](const Vec3& p, const Vec3& aa, const Vec3& bb, const Vec3& cc) {
    Vec3 nn = normalized(cross(bb - aa, cc - aa));
    TriangleClosest tc = point_triangle_signed_distance(p, aa, bb, cc, nn);
    return wd * tc.d + dot(wn, nn) + dot(wb, tc.bary);
  };

  for (const Probe& pr : probes) {
    TriangleClosest tc = point_triangle_signed_distance(pr.p, a, b, c, n0);
    REQUIRE(tc.region == pr.region);
    TriangleGeomGrads g = point_triangle_adjoint(pr.p, a, b, c, tc.region, wd, wn, wb);

    real h = 1e-7;
    Vec3 fd_p = fd_vec([&](const Vec3& p) { return phi(p, a, b, c); }, pr.p, h);
    Vec3 fd_a = fd_vec([&](const Vec3& v) { return phi(pr.p, v, b, c); }, a, h);
    Vec3 fd_b = fd_vec([&](const Vec3& v) { return phi(pr.p, a, v, c); }, b, h);
    Vec3 fd_c = fd_vec([&](const Vec3& v) { return phi(pr.p, a, b, v); }, c, h);
    INFO("region " << pr.region);
    CHECK(vec_rel(g.p, fd_p) < 1e-5);
    CHECK(vec_rel(g.a, fd_a) < 1e-5);
    CHECK(vec_rel(g.b, fd_b) < 1e-5);
    CHECK(vec_rel(g.c, fd_c) < 1e-5);
  }
}

TEST_CASE("pair force adjoint matches finite differences on both friction branches") {
  ContactParams prm;
  Vec3 w = rvec();

  struct Config {
    Vec3 v_tri, v_cp;
    bool want_saturated;
  };
  std::vector<Config> configs = {
      {{0.002, 0.001, -0.01}, {0.009, -0.004, 0.02}, false},  // elastic friction
      {{0.9, 0.1, -0.02}, {-0.2, 0.05, 0.01}, true},          // Coulomb-capped
  };

  for (const Config& cfg : configs) {
    real d0 = -0.004;
    Vec3 n0 = normalized(Vec3{0.12, -0.2, 1.0});
    auto phi = [&](real d, const Vec3& n, const Vec3& vt, const Vec3& vc,
                   const ContactParams& p) {
      ContactPair pair;
      pair.d = d;
      pair.n = n;
      compute_pair_force(pair, p, vt, vc);
      return dot(w, pair.f_n + pair.f_t);
    };

    ContactPair pair;
    pair.d = d0;
    pair.n = n0;
    compute_pair_force(pair, prm, cfg.v_tri, cfg.v_cp);
    REQUIRE(pair.saturated == cfg.want_saturated);
    PairForceGrads g = pair_force_adjoint(pair, prm, w);

    real h = 1e-7;
    CHECK(rel(g.d_bar, fd_scalar([&](real d) { return phi(d, n0, cfg.v_tri, cfg.v_cp, prm); },
                                 d0, h)) < 1e-5);
    CHECK(vec_rel(g.n_bar,
                  fd_vec([&](const Vec3& n) { return phi(d0, n, cfg.v_tri, cfg.v_cp, prm); },
                         n0, h)) < 1e-5);
    CHECK(vec_rel(g.v_tri_bar,
                  fd_vec([&](const Vec3& v) { return phi(d0, n0, v, cfg.v_cp, prm); },
                         cfg.v_tri, h)) < 1e-5);
    CHECK(vec_rel(g.v_cp_bar,
                  fd_vec([&](const Vec3& v) { return phi(d0, n0, cfg.v_tri, v, prm); },
                         cfg.v_cp, h)) < 1e-5);

    auto with = [&](real ContactParams::*field, real value) {
      ContactParams p2 = prm;
      p2.*field = value;
      return phi(d0, n0, cfg.v_tri, cfg.v_cp, p2);
    };
    real hp = 1e-5;
    CHECK(rel(g.k_n, fd_scalar([&](real v) { return with(&ContactParams::k_n, v); }, prm.k_n,
                               hp)) < 1e-5);
    CHECK(rel(g.k_d, fd_scalar([&](real v) { return with(&ContactParams::k_d, v); }, prm.k_d,
                               hp)) < 1e-5);
    real gkt = fd_scalar([&](real v) { return with(&ContactParams::k_t, v); }, prm.k_t, hp);
    real gmu = fd_scalar([&](real v) { return with(&ContactParams::mu, v); }, prm.mu, hp);
    if (cfg.want_saturated) {
      CHECK(std::abs(g.k_t) < 1e-12);
      CHECK(std::abs(gkt) < 1e-10);
      CHECK(rel(g.mu, gmu) < 1e-5);
    } else {
      CHECK(rel(g.k_t, gkt) < 1e-5);
      CHECK(std::abs(g.mu) < 1e-12);
      CHECK(std::abs(gmu) < 1e-10);
    }
  }
}

// ---- rollout-level finite-difference checks ----

namespace {

std::shared_ptr<SensorMesh> small_dome() {
  DomeSpec spec;
  spec.resolution = 6;
  return std::make_shared<SensorMesh>(build_dome_sensor(spec));
}

real apex_z(const SensorMesh& mesh) {
  real z = 0;
  for (const auto& p : mesh.rest_positions) z = std::min(z, p.z);
  return z;
}

// quadratic marker / force / contact-center loss against a reference frame
struct ObsLoss : LossTerm {
  int sensor;
  real w_px, w_force, w_center;
  std::vector<std::array<real, 2>> ref;

  ObsLoss(const Scene& scene, int idx, real wp, real wf, real wc)
      : sensor(idx), w_px(wp), w_force(wf), w_center(wc) {
    ref = observe_sensor(scene, idx).marker_px;
  }

  real evaluate(const Scene& scene, int) override {
    TactileObservation obs = observe_sensor(scene, sensor);
    real loss = 0;
    for (size_t k = 0; k < obs.marker_px.size(); k++) {
      real du = obs.marker_px[k][0] - ref[k][0];
      real dv = obs.marker_px[k][1] - ref[k][1];
      loss += w_px * (du * du + dv * dv);
    }
    return loss + w_force * norm_sq(obs.force) + w_center * norm_sq(obs.contact_center);
  }

  void accumulate(const Scene& scene, int, AdjointState& adj, ParamGrads& grads) override {
    TactileObservation obs = observe_sensor(scene, sensor);
    TactileObsBar bar;
    bar.marker_px.resize(obs.marker_px.size());
    for (size_t k = 0; k < obs.marker_px.size(); k++) {
      bar.marker_px[k] = {2 * w_px * (obs.marker_px[k][0] - ref[k][0]),
                          2 * w_px * (obs.marker_px[k][1] - ref[k][1])};
    }
    bar.force = 2 * w_force * obs.force;
    bar.contact_center = 2 * w_center * obs.contact_center;
    observe_sensor_adjoint(scene, sensor, bar, adj, grads);
  }
};

struct CentroidLoss : LossTerm {
  Vec3 target;
  real w = 1;

  CentroidLoss(const Vec3& t, real weight) : target(t), w(weight) {}

  real evaluate(const Scene& scene, int) override {
    return w * norm_sq(object_centroid(scene.mpm) - target);
  }
  void accumulate(const Scene& scene, int, AdjointState& adj, ParamGrads&) override {
    Vec3 c_bar = 2 * w * (object_centroid(scene.mpm) - target);
    real total = 0;
    for (int i = 0; i < scene.mpm.count; i++) total += scene.mpm.mass[i];
    for (int i = 0; i < scene.mpm.count; i++)
      adj.mpm_x[i] += (scene.mpm.mass[i] / total) * c_bar;
  }
};

struct CableHeightLoss : LossTerm {
  real w = 1e2;

  real evaluate(const Scene& scene, int) override {
    real loss = 0;
    for (const Vec3& p : scene.cable.x) loss += w * p.z * p.z;
    return loss;
  }
  void accumulate(const Scene& scene, int, AdjointState& adj, ParamGrads&) override {
    for (int i = 0; i < scene.cable.particle_count; i++)
      adj.cable_x[i].z += 2 * w * scene.cable.x[i].z;
  }
};

struct PoseLoss : LossTerm {
  Vec3 target;

  explicit PoseLoss(const Vec3& t) : target(t) {}

  real evaluate(const Scene& scene, int) override {
    return norm_sq(scene.sensors[0].pose.translation - target);
  }
  void accumulate(const Scene& scene, int, AdjointState& adj, ParamGrads&) override {
    adj.sensors[0].pose_t += 2 * (scene.sensors[0].pose.translation - target);
  }
};

// loss directly linear in k_n, bypassing the dynamics
struct StiffnessLinearLoss : LossTerm {
  real c = 2.5;

  real evaluate(const Scene& scene, int) override { return c * scene.contact.k_n; }
  void accumulate(const Scene&, int, AdjointState&, ParamGrads& grads) override {
    grads.k_n += c;
  }
};

Scene plane_press_scene() {
  Scene scene;
  scene.dt = 1e-4;
  scene.substeps = 8;
  scene.gravity = Vec3{};
  scene.fem_damping = 10;
  auto dome = small_dome();
  SensorPose pose;
  pose.translation = {0.5, 0.5, -0.003 - apex_z(*dome)};
  scene.add_sensor(dome, pose);
  scene.planes.push_back(PlaneSpec{{0, 0, 1}, 0});
  return scene;
}

Scene free_space_scene() {
  Scene scene;
  scene.dt = 1e-4;
  scene.substeps = 8;
  scene.gravity = Vec3{};
  scene.fem_damping = 10;
  auto dome = small_dome();
  SensorPose pose;
  pose.translation = {0.5, 0.5, 0.3};
  scene.add_sensor(dome, pose);
  return scene;
}

Scene mpm_press_scene(MaterialKind kind) {
  Scene scene;
  scene.dt = 1e-4;
  scene.substeps = 10;
  scene.gravity = Vec3{};
  scene.fem_damping = 10;
  scene.grid = MpmGrid(32);
  ObjectMaterial mat;
  mat.kind = kind;
  TriMesh sphere = make_sphere_mesh(1.0, 2);
  scene.mpm = init_from_mesh(sphere, 0.1, {0.5, 0.5, 0.5}, mat, 6);
  auto dome = small_dome();
  SensorPose pose;
  pose.translation = {0.5, 0.5, 0.547 - apex_z(*dome)};
  scene.add_sensor(dome, pose);
  return scene;
}

Scene cable_press_scene() {
  Scene scene;
  scene.dt = 1e-4;
  scene.substeps = 8;
  scene.gravity = Vec3{};
  scene.fem_damping = 10;
  CableSpawn spawn;
  spawn.start = {0.35, 0.5, 0.548};
  spawn.end = {0.65, 0.5, 0.548};
  spawn.particle_count = 31;
  spawn.fix_start = true;
  spawn.fix_end = true;
  scene.cable = spawn_cable(spawn);
  auto dome = small_dome();
  SensorPose pose;
  pose.translation = {0.5, 0.5, 0.545 - apex_z(*dome)};
  scene.add_sensor(dome, pose);
  return scene;
}

// The gel's elastic wave needs tens of milliseconds to cross it, so over a
// couple of frames the contact region only responds to the *initial* velocity
// field, not to base control. Seeding node velocities keeps short scenes
// sensitive to the quantities under test.
void set_rigid_velocity(Scene& scene, const Vec3& lin) {
  for (Vec3& v : scene.sensors[0].fem.velocities) v = lin;
}

void add_shear_velocity(Scene& scene, real rate) {
  auto& fem = scene.sensors[0].fem;
  real z_mean = 0;
  for (const Vec3& p : fem.positions) z_mean += p.z;
  z_mean /= (real)fem.positions.size();
  for (size_t i = 0; i < fem.positions.size(); i++)
    fem.velocities[i].x += rate * (fem.positions[i].z - z_mean);
}

std::vector<FrameAction> constant_action(int frames, const Vec3& linear, const Vec3& angular) {
  FrameAction a;
  a.twists.resize(1);
  a.twists[0].linear = linear;
  a.twists[0].angular = angular;
  return std::vector<FrameAction>(frames, a);
}

void check_grad(Scene& scene, std::vector<FrameAction>& actions,
                const std::vector<LossTermPtr>& losses,
                const std::function<real&(Scene&, std::vector<FrameAction>&)>& param,
                const std::function<real(const ParamGrads&)>& pick, const std::string& label,
                real tol = 1e-3, real h = 0) {
  FdCheckResult r = fd_check(scene, actions, losses, param, pick, h);
  INFO(label << ": adjoint " << r.adjoint_grad << " fd " << r.fd_grad << " rel "
             << r.rel_err);
  CHECK(r.rel_err < tol);
}

auto pk_n = [](Scene& s, std::vector<FrameAction>&) -> real& { return s.contact.k_n; };
auto pk_d = [](Scene& s, std::vector<FrameAction>&) -> real& { return s.contact.k_d; };
auto pk_t = [](Scene& s, std::vector<FrameAction>&) -> real& { return s.contact.k_t; };
auto pmu = [](Scene& s, std::vector<FrameAction>&) -> real& { return s.contact.mu; };
auto plame_mu = [](Scene& s, std::vector<FrameAction>&) -> real& { return s.elastomer.mu; };
auto plame_la = [](Scene& s, std::vector<FrameAction>&) -> real& { return s.elastomer.lambda; };

auto gk_n = [](const ParamGrads& g) { return g.k_n; };
auto gk_d = [](const ParamGrads& g) { return g.k_d; };
auto gk_t = [](const ParamGrads& g) { return g.k_t; };
auto gmu = [](const ParamGrads& g) { return g.mu; };
auto glame_mu = [](const ParamGrads& g) { return g.lame_mu; };
auto glame_la = [](const ParamGrads& g) { return g.lame_lambda; };

}  // namespace

TEST_CASE("rollout gradients: FEM-only free motion") {
  Scene scene = free_space_scene();
  add_shear_velocity(scene, 2.0);  // immediate strain everywhere
  std::vector<FrameAction> actions = constant_action(4, {0.1, 0, -0.5}, {0, 0.3, 0});
  std::vector<LossTermPtr> losses = {std::make_shared<ObsLoss>(scene, 0, 1.0, 0.0, 0.0)};

  check_grad(scene, actions, losses, plame_mu, glame_mu, "lame mu");
  check_grad(scene, actions, losses, plame_la,
             [](const ParamGrads& g) { return g.lame_lambda; }, "lame lambda");
  check_grad(scene, actions, losses,
             [](Scene&, std::vector<FrameAction>& a) -> real& { return a[0].twists[0].linear.z; },
             [](const ParamGrads& g) { return g.actions[0].twists[0].linear.z; }, "lin z f0");
  check_grad(scene, actions, losses,
             [](Scene&, std::vector<FrameAction>& a) -> real& { return a[1].twists[0].linear.x; },
             [](const ParamGrads& g) { return g.actions[1].twists[0].linear.x; }, "lin x f1");
  check_grad(scene, actions, losses,
             [](Scene&, std::vector<FrameAction>& a) -> real& { return a[0].twists[0].angular.y; },
             [](const ParamGrads& g) { return g.actions[0].twists[0].angular.y; }, "ang y f0");

  // contact parameters have no influence without contact: both gradients vanish
  using ParamFn = real& (*)(Scene&, std::vector<FrameAction>&);
  using PickFn = real (*)(const ParamGrads&);
  std::vector<std::pair<ParamFn, PickFn>> zero_params = {
      {+pk_n, +gk_n}, {+pk_d, +gk_d}, {+pk_t, +gk_t}, {+pmu, +gmu}};
  for (auto [param, pick] : zero_params) {
    FdCheckResult r = fd_check(scene, actions, losses, param, pick);
    CHECK(std::abs(r.adjoint_grad) < 1e-10);
    CHECK(std::abs(r.fd_grad) < 1e-10);
  }
}

TEST_CASE("rollout gradients: friction-saturated slide on a plane") {
  Scene scene = plane_press_scene();
  set_rigid_velocity(scene, {1.0, 0, -0.3});  // whole gel already sliding
  std::vector<FrameAction> actions = constant_action(2, {1.0, 0, -0.3}, {0, 0, 1.0});
  std::vector<LossTermPtr> losses = {std::make_shared<ObsLoss>(scene, 0, 1e-2, 1.0, 10.0)};

  // sliding at 1 unit/s: k_t |vt| far exceeds mu |f_n|, so friction saturates
  // and the friction coefficient picks up a nonzero gradient
  FdCheckResult rmu = fd_check(scene, actions, losses, pmu, gmu);
  CHECK(std::abs(rmu.adjoint_grad) > 1e-8);
  CHECK(rmu.rel_err < 1e-3);

  check_grad(scene, actions, losses, pk_n, gk_n, "k_n");
  check_grad(scene, actions, losses, pk_d, gk_d, "k_d");
  check_grad(scene, actions, losses, plame_mu, glame_mu, "lame mu");
  check_grad(scene, actions, losses,
             [](Scene&, std::vector<FrameAction>& a) -> real& { return a[0].twists[0].linear.x; },
             [](const ParamGrads& g) { return g.actions[0].twists[0].linear.x; }, "lin x f0");
  check_grad(scene, actions, losses,
             [](Scene&, std::vector<FrameAction>& a) -> real& { return a[1].twists[0].linear.z; },
             [](const ParamGrads& g) { return g.actions[1].twists[0].linear.z; }, "lin z f1");
  check_grad(scene, actions, losses,
             [](Scene&, std::vector<FrameAction>& a) -> real& { return a[0].twists[0].angular.z; },
             [](const ParamGrads& g) { return g.actions[0].twists[0].angular.z; }, "ang z f0");
}

TEST_CASE("rollout gradients: contact stiffness on a five-frame press") {
  Scene scene = plane_press_scene();
  scene.substeps = 10;
  std::vector<FrameAction> actions = constant_action(5, {0, 0, -0.5}, {});
  std::vector<LossTermPtr> losses = {std::make_shared<ObsLoss>(scene, 0, 1e-2, 1.0, 10.0)};
  FdCheckResult r = fd_check(scene, actions, losses, pk_n, gk_n);  // h = 1e-3 |k_n|
  CHECK(std::abs(r.adjoint_grad) > 1e-8);
  CHECK(r.rel_err < 1e-3);
}

TEST_CASE("rollout gradients: pressing an elastic MPM object") {
  Scene scene = mpm_press_scene(MaterialKind::ElasticCorotated);
  std::vector<FrameAction> actions = constant_action(2, {0, 0, -0.5}, {});
  // contact_center is a mean over a discrete contact set, so its FD would hit
  // set-change discontinuities here; the marker and force terms are smooth
  std::vector<LossTermPtr> losses = {
      std::make_shared<ObsLoss>(scene, 0, 1e-2, 1.0, 0.0),
      std::make_shared<CentroidLoss>(Vec3{0.5, 0.5, 0.45}, 1e2)};

  check_grad(scene, actions, losses, pk_n, gk_n, "k_n");
  check_grad(scene, actions, losses, pk_d, gk_d, "k_d");
  // the default relative step (~1.3 on mu, ~9 on lambda) straddles friction
  // branch flips of impulse-capped pairs; smaller steps agree with the adjoint
  check_grad(scene, actions, losses, plame_mu, glame_mu, "lame mu", 1e-3, 1.3e-3);
  check_grad(scene, actions, losses, plame_la,
             [](const ParamGrads& g) { return g.lame_lambda; }, "lame lambda", 1e-3, 1e-1);
  // the default step h = 5e-4 straddles an isolated contact-set flip in this
  // scene (verified by scanning h: all other steps agree with the adjoint)
  check_grad(scene, actions, losses,
             [](Scene&, std::vector<FrameAction>& a) -> real& { return a[0].twists[0].linear.z; },
             [](const ParamGrads& g) { return g.actions[0].twists[0].linear.z; }, "lin z f0",
             1e-3, 4e-4);
  check_grad(scene, actions, losses,
             [](Scene&, std::vector<FrameAction>& a) -> real& { return a[0].twists[0].linear.x; },
             [](const ParamGrads& g) { return g.actions[0].twists[0].linear.x; }, "lin x f0");
}

TEST_CASE("rollout gradients: pressing a rigid MPM object") {
  Scene scene = mpm_press_scene(MaterialKind::Rigid);
  std::vector<FrameAction> actions = constant_action(2, {0, 0, -0.5}, {});
  std::vector<LossTermPtr> losses = {
      std::make_shared<CentroidLoss>(Vec3{0.5, 0.5, 0.45}, 1e2)};

  check_grad(scene, actions, losses, pk_n, gk_n, "k_n");

  // over two frames the base motion cannot reach the contact region through
  // the gel, so the action influence on the centroid is genuinely negligible
  FdCheckResult r = fd_check(
      scene, actions, losses,
      [](Scene&, std::vector<FrameAction>& a) -> real& { return a[0].twists[0].linear.z; },
      [](const ParamGrads& g) { return g.actions[0].twists[0].linear.z; });
  CHECK(std::abs(r.adjoint_grad) < 1e-6);
  CHECK(std::abs(r.fd_grad) < 1e-6);
}

TEST_CASE("rollout gradients: action reaches the contact through the gel") {
  Scene scene = plane_press_scene();
  std::vector<FrameAction> actions = constant_action(40, {0, 0, -0.5}, {});
  std::vector<LossTermPtr> losses = {std::make_shared<ObsLoss>(scene, 0, 0.0, 1.0, 0.0)};
  FdCheckResult r = fd_check(
      scene, actions, losses,
      [](Scene&, std::vector<FrameAction>& a) -> real& { return a[0].twists[0].linear.z; },
      [](const ParamGrads& g) { return g.actions[0].twists[0].linear.z; });
  CHECK(std::abs(r.adjoint_grad) > 1e-6);
  CHECK(r.rel_err < 1e-3);
}

TEST_CASE("rollout gradients: pressing a cable") {
  Scene scene = cable_press_scene();
  std::vector<FrameAction> actions = constant_action(2, {0, 0.2, -0.5}, {});
  std::vector<LossTermPtr> losses = {std::make_shared<ObsLoss>(scene, 0, 1e-2, 1.0, 10.0),
                                     std::make_shared<CableHeightLoss>()};

  check_grad(scene, actions, losses, pk_n, gk_n, "k_n");
  check_grad(scene, actions, losses, pmu, gmu, "mu");
  check_grad(scene, actions, losses,
             [](Scene&, std::vector<FrameAction>& a) -> real& { return a[0].twists[0].linear.z; },
             [](const ParamGrads& g) { return g.actions[0].twists[0].linear.z; }, "lin z f0");
  check_grad(scene, actions, losses,
             [](Scene&, std::vector<FrameAction>& a) -> real& { return a[1].twists[0].linear.y; },
             [](const ParamGrads& g) { return g.actions[1].twists[0].linear.y; }, "lin y f1");
}

TEST_CASE("rollout gradients: MPM-only scene has no parameter influence") {
  Scene scene;
  scene.dt = 1e-4;
  scene.substeps = 10;
  scene.fem_damping = 0;
  scene.grid = MpmGrid(32);
  ObjectMaterial mat;
  TriMesh sphere = make_sphere_mesh(1.0, 2);
  scene.mpm = init_from_mesh(sphere, 0.1, {0.5, 0.5, 0.5}, mat, 6);

  std::vector<FrameAction> actions(2);  // no sensors, empty twists
  std::vector<LossTermPtr> losses = {
      std::make_shared<CentroidLoss>(Vec3{0.5, 0.5, 0.4}, 1.0)};

  Rollout ro = record_rollout(scene, actions, losses);
  CHECK(ro.loss > 0);  // falling under gravity, away from the target

  FdCheckResult r = fd_check(scene, actions, losses, pk_n, gk_n);
  CHECK(std::abs(r.adjoint_grad) < 1e-10);
  CHECK(std::abs(r.fd_grad) < 1e-10);
}

TEST_CASE("rollout gradients: zero-influence action has zero gradient") {
  Scene scene = free_space_scene();  // hovers far above everything
  scene.planes.push_back(PlaneSpec{{0, 0, 1}, 0});
  std::vector<FrameAction> actions = constant_action(1, {0, 0, -0.5}, {});
  // force/center loss only: identically zero without contact
  std::vector<LossTermPtr> losses = {std::make_shared<ObsLoss>(scene, 0, 0.0, 1.0, 1.0)};

  FdCheckResult r = fd_check(
      scene, actions, losses,
      [](Scene&, std::vector<FrameAction>& a) -> real& { return a[0].twists[0].linear.z; },
      [](const ParamGrads& g) { return g.actions[0].twists[0].linear.z; });
  CHECK(std::abs(r.adjoint_grad) < 1e-10);
  CHECK(std::abs(r.fd_grad) < 1e-10);
}

TEST_CASE("rollout gradients are bitwise deterministic") {
  Scene scene = plane_press_scene();
  set_rigid_velocity(scene, {1.0, 0, -0.3});
  std::vector<FrameAction> actions = constant_action(2, {1.0, 0, -0.3}, {0, 0, 1.0});
  std::vector<LossTermPtr> losses = {std::make_shared<ObsLoss>(scene, 0, 1e-2, 1.0, 10.0)};

  SceneState st0 = scene.save();
  auto run = [&] {
    Rollout ro = record_rollout(scene, actions, losses);
    ParamGrads g = backward(scene, ro, losses);
    scene.restore(st0);
    return g;
  };
  ParamGrads g1 = run(), g2 = run();
  CHECK(g1.k_n == g2.k_n);
  CHECK(g1.k_d == g2.k_d);
  CHECK(g1.k_t == g2.k_t);
  CHECK(g1.mu == g2.mu);
  CHECK(g1.lame_mu == g2.lame_mu);
  CHECK(g1.lame_lambda == g2.lame_lambda);
  for (int f = 0; f < 2; f++)
    for (int c = 0; c < 3; c++) {
      CHECK(g1.actions[f].twists[0].linear[c] == g2.actions[f].twists[0].linear[c]);
      CHECK(g1.actions[f].twists[0].angular[c] == g2.actions[f].twists[0].angular[c]);
    }
}

TEST_CASE("rollout gradients: loss linear in a parameter is exact") {
  Scene scene = free_space_scene();
  std::vector<FrameAction> actions = constant_action(2, {0, 0, -0.1}, {});
  std::vector<LossTermPtr> losses = {std::make_shared<StiffnessLinearLoss>()};
  FdCheckResult r = fd_check(scene, actions, losses, pk_n, gk_n);
  CHECK(r.adjoint_grad == doctest::Approx(5.0).epsilon(1e-12));  // c per frame
  CHECK(r.rel_err < 1e-9);
}

TEST_CASE("rollout gradients: free flight matches the analytic pose gradient") {
  Scene scene = free_space_scene();
  Vec3 v{0.2, -0.1, 0.15};
  std::vector<FrameAction> actions = constant_action(2, v, {});
  Vec3 target{0.55, 0.5, 0.1};
  std::vector<LossTermPtr> losses = {std::make_shared<PoseLoss>(target)};

  Vec3 t0 = scene.sensors[0].pose.translation;
  real h = scene.frame_dt();
  SceneState st0 = scene.save();
  Rollout ro = record_rollout(scene, actions, losses);
  ParamGrads grads = backward(scene, ro, losses);
  scene.restore(st0);

  // t_f = t0 + f h v; dL/dv_k = 2 h sum_{f > k} (t_f - target)
  for (int k = 0; k < 2; k++) {
    Vec3 want{};
    for (int f = k + 1; f <= 2; f++) want += 2 * h * (t0 + (real)f * h * v - target);
    Vec3 got = grads.actions[k].twists[0].linear;
    INFO("frame " << k);
    CHECK(vec_rel(got, want) < 1e-10);
  }

  FdCheckResult r = fd_check(
      scene, actions, losses,
      [](Scene&, std::vector<FrameAction>& a) -> real& { return a[0].twists[0].linear.x; },
      [](const ParamGrads& g) { return g.actions[0].twists[0].linear.x; });
  CHECK(r.rel_err < 1e-9);
}
