#include <doctest.h>

#include <algorithm>
#include <cstdio>

#include "dt/sysid.hpp"

using namespace dt;

namespace {

TrajectoryScript quick_script() {
  TrajectoryScript s;
  s.press_frames = 8;
  s.motion_frames = 15;
  return s;
}

real tangential(const Vec3& f) { return std::sqrt(f.x * f.x + f.y * f.y); }

}  // namespace

TEST_CASE("symmetric press produces a nearly pure normal force") {
  TrajectoryScript script = quick_script();
  script.motion_frames = 0;
  ContactTrajectory traj = simulate_trajectory({}, TrajectoryKind::PressSlide, script);
  bool touched = false;
  for (const Vec3& f : traj.forces) {
    if (f.z > 1e-9) {
      touched = true;
      CHECK(std::abs(f.x) < 0.05 * f.z);
      CHECK(std::abs(f.y) < 0.05 * f.z);
    } else {
      CHECK(norm(f) < 1e-12);  // not yet in contact
    }
  }
  CHECK(touched);
}

TEST_CASE("higher friction coefficient raises the sliding tangential force") {
  TrajectoryScript script = quick_script();
  SysIdParams low, high;
  low.mu_f = 5;
  high.mu_f = 20;
  ContactTrajectory a = simulate_trajectory(low, TrajectoryKind::PressSlide, script);
  ContactTrajectory b = simulate_trajectory(high, TrajectoryKind::PressSlide, script);
  // plateau = mean over the sliding phase
  real ta = 0, tb = 0;
  for (int f = script.press_frames; f < a.frame_count(); f++) {
    ta += tangential(a.forces[f]);
    tb += tangential(b.forces[f]);
  }
  CHECK(tb > ta);
  CHECK(ta > 0);
}

TEST_CASE("zero-speed script leaves the markers static") {
  TrajectoryScript script = quick_script();
  script.press_speed = 0;
  script.slide_speed = 0;
  script.start_gap = 0.001;  // hovering: seated contact would deform the gel
  ContactTrajectory traj = simulate_trajectory({}, TrajectoryKind::PressSlide, script);
  for (int f = 1; f < traj.frame_count(); f++)
    for (size_t k = 0; k < traj.markers[f].size(); k++) {
      CHECK(traj.markers[f][k][0] == traj.markers[0][k][0]);
      CHECK(traj.markers[f][k][1] == traj.markers[0][k][1]);
    }
}

TEST_CASE("sysid loss identities") {
  TrajectoryScript script = quick_script();
  ContactTrajectory traj = simulate_trajectory({}, TrajectoryKind::PressSlide, script);
  CHECK(sysid_loss(traj, traj) == 0.0);

  // uniform 1 px marker offset -> 10 per frame
  ContactTrajectory shifted = traj;
  for (auto& frame : shifted.markers)
    for (auto& m : frame) m[0] += 1.0;
  CHECK(sysid_loss(shifted, traj) ==
        doctest::Approx(10.0 * traj.frame_count()).epsilon(1e-12));
  CHECK(sysid_loss(shifted, traj) == doctest::Approx(sysid_loss(traj, shifted)));

  // 2 N error on one axis -> 4 per frame at weight 1
  ContactTrajectory pushed = traj;
  for (auto& f : pushed.forces) f.y += 2.0;
  CHECK(sysid_loss(pushed, traj) == doctest::Approx(4.0 * traj.frame_count()).epsilon(1e-12));

  ContactTrajectory truncated = traj;
  truncated.t.pop_back();
  truncated.poses.pop_back();
  truncated.markers.pop_back();
  truncated.forces.pop_back();
  CHECK_THROWS_AS((void)sysid_loss(truncated, traj), SimError);
}

TEST_CASE("gradient optimization is stable at the ground truth") {
  SysIdOptions opt;
  opt.script = quick_script();
  opt.steps = 3;
  SysIdParams truth;
  truth.mu_f = 6;  // the default 4.90 sits below the identification box
  ContactTrajectory ref = simulate_trajectory(truth, TrajectoryKind::PressSlide, opt.script);
  SysIdResult res = optimize_gradient(ref, truth, opt);
  REQUIRE(res.loss_curve.size() == 3);
  CHECK(res.loss_curve[0] < 1e-18);
  for (real l : res.loss_curve) CHECK(l < 1e-10);
  CHECK(res.params.k_n == doctest::Approx(truth.k_n).epsilon(1e-6));
}

TEST_CASE("single-parameter sweep recovers the contact stiffness") {
  SysIdOptions opt;
  opt.script = quick_script();
  opt.steps = 50;
  opt.free_mask = {true, false, false, false, false, false};
  SysIdParams truth;
  truth.k_n = 70;
  ContactTrajectory ref = simulate_trajectory(truth, TrajectoryKind::PressSlide, opt.script);
  SysIdParams init = truth;
  init.k_n = 40;
  SysIdResult res = optimize_gradient(ref, init, opt);
  CHECK(std::abs(res.params.k_n - 70.0) < 7.0);  // within 10 %
  CHECK(res.loss_curve.back() < res.loss_curve.front());
}

TEST_CASE("recovery from a perturbed start beats its own starting point") {
  SysIdOptions opt;
  opt.script = quick_script();
  opt.steps = 25;
  SysIdParams truth;
  ContactTrajectory ref = simulate_trajectory(truth, TrajectoryKind::PressSlide, opt.script);
  SysIdParams init = SysIdParams::from_array([&] {
    auto a = truth.as_array();
    for (real& v : a) v *= 1.2;
    return a;
  }());
  SysIdResult res = optimize_gradient(ref, init, opt);
  real best = *std::min_element(res.loss_curve.begin(), res.loss_curve.end());
  CHECK(best < 0.2 * res.loss_curve.front());
}

TEST_CASE("CMA-ES finds the sphere optimum") {
  auto sphere = [](const std::vector<real>& x) {
    real s = 0;
    for (real v : x) s += (v - 0.7) * (v - 0.7);
    return s;
  };
  std::vector<real> x0(6, 0.3);
  std::vector<real> best = cmaes_minimize(6, sphere, x0, 0.15, 20, 100, 42);
  CHECK(sphere(best) < 1e-3);
}

TEST_CASE("CMA-ES is reproducible for a fixed seed") {
  SysIdOptions opt;
  opt.script = quick_script();
  opt.steps = 2;
  opt.seed = 7;
  SysIdParams truth;
  ContactTrajectory ref = simulate_trajectory(truth, TrajectoryKind::PressSlide, opt.script);
  SysIdParams init = truth;
  init.k_n = 40;
  SysIdResult r1 = optimize_cmaes(ref, init, opt);
  SysIdResult r2 = optimize_cmaes(ref, init, opt);
  REQUIRE(r1.loss_curve.size() == r2.loss_curve.size());
  for (size_t i = 0; i < r1.loss_curve.size(); i++) CHECK(r1.loss_curve[i] == r2.loss_curve[i]);
  CHECK(r1.params.k_n == r2.params.k_n);
}

TEST_CASE("random baseline draws behave") {
  SysIdOptions opt;
  opt.script = quick_script();
  opt.seed = 3;
  SysIdParams truth;
  ContactTrajectory ref = simulate_trajectory(truth, TrajectoryKind::PressSlide, opt.script);

  SysIdResult one = baseline_random(ref, 1, opt);
  CHECK(one.loss_curve.size() == 1);
  auto a = one.params.as_array();
  for (int i = 0; i < 6; i++) {
    CHECK(a[i] >= opt.bounds.lo[i]);
    CHECK(a[i] <= opt.bounds.hi[i]);
  }

  // degenerate box pins every draw to one point
  SysIdOptions degen = opt;
  degen.bounds.lo = degen.bounds.hi = truth.as_array();
  SysIdResult pinned = baseline_random(ref, 3, degen);
  CHECK(pinned.params.k_n == truth.k_n);
  CHECK(pinned.loss_curve[0] < 1e-18);
}

TEST_CASE("marker MSE of identical parameters is zero") {
  TrajectoryScript script = quick_script();
  SysIdParams p;
  ContactTrajectory a = simulate_trajectory(p, TrajectoryKind::PressTwistZ, script);
  ContactTrajectory b = simulate_trajectory(p, TrajectoryKind::PressTwistZ, script);
  CHECK(marker_mse(a, b) == 0.0);
}

TEST_CASE("trajectory CSV round-trips bit-exactly") {
  TrajectoryScript script = quick_script();
  ContactTrajectory traj = simulate_trajectory({}, TrajectoryKind::PressTwistX, script);
  std::string path = "sysid_roundtrip.csv";
  save_trajectory_csv(traj, path);
  ContactTrajectory back = load_trajectory_csv(path);
  std::remove(path.c_str());

  REQUIRE(back.frame_count() == traj.frame_count());
  for (int f = 0; f < traj.frame_count(); f++) {
    CHECK(back.t[f] == traj.t[f]);
    CHECK(back.poses[f].translation.z == traj.poses[f].translation.z);
    CHECK(back.forces[f].x == traj.forces[f].x);
    CHECK(back.forces[f].z == traj.forces[f].z);
    for (size_t k = 0; k < traj.markers[f].size(); k++) {
      CHECK(back.markers[f][k][0] == traj.markers[f][k][0]);
      CHECK(back.markers[f][k][1] == traj.markers[f][k][1]);
    }
  }
}
