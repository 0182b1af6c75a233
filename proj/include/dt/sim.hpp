// Scene orchestration: couples FEM sensors, MPM objects, a PBD cable and
// static planes through the penalty contact model, with frame-level rigid
// base control of each sensor.
#pragma once

#include <memory>
#include <vector>

#include "dt/contact.hpp"
#include "dt/fem.hpp"
#include "dt/mpm.hpp"
#include "dt/pbd.hpp"

namespace dt {

struct Sensor {
  std::shared_ptr<const SensorMesh> mesh;
  FemState fem;
  SensorPose pose;
  MarkerSet markers;
  CameraModel camera;
  Vec3 width_dir;  // finger velocity gains 0.5 * width_rate * width_dir
  std::vector<int> surface_nodes;

  // scratch, rebuilt every substep
  std::vector<Vec3> elastic_forces;
  TriangleHash hash;
};

// Control for one frame, held constant across its substeps.
struct FrameAction {
  std::vector<Twist> twists;  // one per sensor
  real width_rate = 0;
};

// Snapshot of everything the substep reads or writes persistently.
struct SceneState {
  struct SensorState {
    std::vector<Vec3> x, v;
    SensorPose pose;
  };
  std::vector<SensorState> sensors;
  std::vector<Vec3> mpm_x, mpm_v;
  std::vector<Mat3> mpm_f, mpm_c;
  std::vector<Vec3> cable_x, cable_v;
};

// Intermediates of one substep, recorded for the reverse pass.
struct SensorContacts {
  SurfaceSnapshot snapshot;
  std::vector<ContactPair> grid_pairs;   // counterpart indexes cache.grid_nodes
  std::vector<ContactPair> cable_pairs;  // counterpart indexes cable particles
  std::vector<std::vector<PlanePair>> plane_pairs;  // one list per scene plane
  real cap = 0;
};

struct SubstepCache {
  std::vector<SensorContacts> sensors;
  std::vector<int> grid_nodes;           // active grid nodes (sorted indices)
  std::vector<Vec3> grid_node_positions;
  std::vector<Vec3> grid_vel_pre;        // momentum/mass after p2g, before update
  std::vector<Vec3> grid_mom_p2g;        // raw momentum after p2g
  std::vector<Vec3> x_prev;              // MPM positions before advection
  std::vector<Vec3> x_adv;               // after advection, before projections
  std::vector<Mat3> f_trial;             // after advection, before projections
  std::vector<PbdProjection> pbd_log;
};

struct SimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Scene {
 public:
  real dt = 1e-4;
  int substeps = 25;
  Vec3 gravity{0, 0, -9.8};
  real fem_damping = 0;
  real fem_density = 1e3;
  real contact_cap_scale = 2.0;  // penetration clamp in mean surface edges
  // grid nodes lighter than this fraction of the heaviest node are not contact
  // counterparts: the B-spline mass fringe would explode under the damping term
  real contact_mass_frac = 0;
  int pbd_iterations = 20;
  ElastomerMaterial elastomer;
  ContactParams contact;
  GridBoundary boundary;

  std::vector<Sensor> sensors;
  MpmParticles mpm;  // empty means no object
  MpmGrid grid{64};
  CableState cable;  // empty means no cable
  std::vector<PlaneSpec> planes;

  bool has_mpm() const { return mpm.count > 0; }
  bool has_cable() const { return cable.particle_count > 0; }
  real frame_dt() const { return dt * substeps; }

  // Adds a sensor and precomputes its FEM state at `pose`.
  int add_sensor(std::shared_ptr<const SensorMesh> mesh, const SensorPose& pose);

  // Sets base velocities from the action and integrates each pose by frame_dt.
  void begin_frame(const FrameAction& action);
  void substep(SubstepCache* cache = nullptr);
  void step_frame(const FrameAction& action);

  SceneState save() const;
  void restore(const SceneState& state);
};

struct TactileObservation {
  std::vector<std::array<real, 2>> marker_px;
  Vec3 force;           // net contact force on the sensor, sensor frame
  Vec3 contact_center;  // sensor-frame mean of contact points
  bool contact_valid = false;
};

// Pure function of the current state; contact terms are recomputed against the
// MPM particles / cable particles / planes directly.
TactileObservation observe_sensor(const Scene& scene, int sensor_index);

// Mass-weighted particle centroid; body < 0 averages everything.
Vec3 object_centroid(const MpmParticles& mpm, int body = -1);

// Best-fit rotation of current positions against rest positions.
Mat3 object_rotation(const MpmParticles& mpm, int body = -1);

}  // namespace dt
