#include <doctest.h>

#include <memory>

#include "dt/sim.hpp"

using namespace dt;

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

Scene plane_press_scene() {
  Scene scene;
  scene.dt = 1e-4;
  scene.substeps = 10;
  scene.gravity = Vec3{};
  scene.fem_damping = 10;
  auto dome = small_dome();
  SensorPose pose;
  pose.translation = {0.5, 0.5, -0.003 - apex_z(*dome)};  // apex 3 mm into the plane
  scene.add_sensor(dome, pose);
  scene.planes.push_back(PlaneSpec{{0, 0, 1}, 0});
  return scene;
}

FrameAction press_action(real vz) {
  FrameAction a;
  a.twists.resize(1);
  a.twists[0].linear = {0, 0, vz};
  return a;
}

}  // namespace

TEST_CASE("pressing on a plane produces an upward sensor force") {
  Scene scene = plane_press_scene();
  TactileObservation before = observe_sensor(scene, 0);
  CHECK(before.contact_valid);  // spawned with a slight overlap
  CHECK(before.force.z > 0);

  FrameAction down = press_action(-0.5);
  for (int f = 0; f < 40; f++) scene.step_frame(down);
  TactileObservation obs = observe_sensor(scene, 0);
  CHECK(obs.contact_valid);
  CHECK(obs.force.z > before.force.z);  // deeper press, larger load
  // contact centered under the apex
  CHECK(std::abs(obs.contact_center.x) < 0.05);
  CHECK(std::abs(obs.contact_center.y) < 0.05);
  // pose integrated: 40 frames * 1e-3 s * -0.5 below its start
  real z0 = -0.003 - apex_z(*scene.sensors[0].mesh);
  CHECK(scene.sensors[0].pose.translation.z == doctest::Approx(z0 - 0.02));
  // markers spread outward under pressing
  TactileObservation first = observe_sensor(scene, 0);
  CHECK(first.marker_px.size() == 136);
}

TEST_CASE("save/restore replays bitwise identically") {
  Scene scene = plane_press_scene();
  FrameAction down = press_action(-0.5);
  for (int f = 0; f < 6; f++) scene.step_frame(down);
  SceneState snap = scene.save();

  for (int f = 0; f < 4; f++) scene.step_frame(down);
  SceneState end1 = scene.save();

  scene.restore(snap);
  for (int f = 0; f < 4; f++) scene.step_frame(down);
  SceneState end2 = scene.save();

  REQUIRE(end1.sensors.size() == end2.sensors.size());
  for (size_t i = 0; i < end1.sensors[0].x.size(); i++) {
    CHECK(end1.sensors[0].x[i].x == end2.sensors[0].x[i].x);
    CHECK(end1.sensors[0].x[i].y == end2.sensors[0].x[i].y);
    CHECK(end1.sensors[0].x[i].z == end2.sensors[0].x[i].z);
    CHECK(end1.sensors[0].v[i].z == end2.sensors[0].v[i].z);
  }
}

TEST_CASE("pressing an MPM sphere pushes it and loads the sensor") {
  Scene scene;
  scene.dt = 1e-4;
  scene.substeps = 20;
  scene.gravity = Vec3{};
  scene.fem_damping = 10;
  scene.grid = MpmGrid(32);

  ObjectMaterial mat;
  TriMesh sphere = make_sphere_mesh(1.0, 2);
  scene.mpm = init_from_mesh(sphere, 0.1, {0.5, 0.5, 0.5}, mat, 8);

  auto dome = small_dome();
  SensorPose pose;
  pose.translation = {0.5, 0.5, 0.547 - apex_z(*dome)};  // apex 3 mm into the sphere
  scene.add_sensor(dome, pose);

  FrameAction down = press_action(-0.5);
  for (int f = 0; f < 6; f++) scene.step_frame(down);

  TactileObservation obs = observe_sensor(scene, 0);
  CHECK(obs.contact_valid);
  CHECK(obs.force.z > 0);  // reaction pushes the sensor up

  Vec3 mom{};
  for (int i = 0; i < scene.mpm.count; i++) mom += scene.mpm.mass[i] * scene.mpm.v[i];
  CHECK(mom.z < 0);  // object driven downward
}

TEST_CASE("cable contact moves the cable") {
  Scene scene;
  scene.dt = 1e-4;
  scene.substeps = 10;
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
  pose.translation = {0.5, 0.5, 0.545 - apex_z(*dome)};  // cable centers 3 mm inside
  scene.add_sensor(dome, pose);

  FrameAction down = press_action(-0.5);
  for (int f = 0; f < 8; f++) scene.step_frame(down);

  // middle of the cable deflected downward by the press
  real mid_z = scene.cable.x[15].z;
  CHECK(mid_z < 0.548 - 1e-5);
  TactileObservation obs = observe_sensor(scene, 0);
  CHECK(obs.contact_valid);
}
