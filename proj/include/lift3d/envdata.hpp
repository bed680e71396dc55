#pragma once

#include "lift3d/geometry.hpp"
#include "lift3d/records.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

namespace lift3d::envdata {

inline constexpr double kWorkspaceHalf = 0.5;
inline constexpr double kSuccessRadius = 0.02;
inline constexpr int kMaxSteps = 4;
inline constexpr int kJoints = 4;
inline const Eigen::Vector3d kHome{0.0, 0.0, 0.45};
inline constexpr const char* kReachTask = "reach";
inline constexpr const char* kReachText = "reach the red sphere";

struct Cluster {
  Eigen::Vector3d centroid;
  double radius = 0.05;
  Eigen::Vector3d color;
  int points = 384;
};

/// Spheres resting on a table at z = 0; `target` indexes the task object.
struct SyntheticScene {
  std::vector<Cluster> clusters;
  int target = 0;
  double table_extent = 0.4;
  std::uint64_t seed = 0;

  const Cluster& target_cluster() const { return clusters[static_cast<std::size_t>(target)]; }
};

struct EnvOptions {
  int cloud_points = 1024;
  int render_size = 112;
};

SyntheticScene make_scene(std::uint64_t seed);

/// Points sampled on each sphere's camera-facing (upper) hemisphere, reduced
/// or padded to `cloud_points`, at storage precision.
geometry::PointCloud observe_cloud(const SyntheticScene& scene, int cloud_points);

/// Top-down orthographic camera over the table.
struct OrthoCamera {
  int size = 112;
  double half_extent = 0.45;
  double height = 1.0;

  double pixel() const { return 2.0 * half_extent / size; }
  Eigen::Vector2d pixel_center(int row, int col) const;
  Eigen::Vector3d backproject(int row, int col, double depth) const;
};

/// Orthographic RGB + depth + blurred target-mask attention.
PretrainRecord render_scene(const SyntheticScene& scene, int size);

/// Builds the robot state for an end-effector pose; velocities are the
/// joint deltas from `previous` (zero when absent).
RobotState make_state(const Pose7DoF& ee, const RobotState* previous);

/// Scripted expert: go to the target centroid, close once within reach.
Pose7DoF demo_action(const SyntheticScene& scene, const RobotState& state);

struct Observation {
  geometry::PointCloud cloud;
  RobotState state;
};

struct StepResult {
  Observation observation;
  bool done = false;
  bool success = false;
  bool clipped = false;
};

/// Teleporting reach environment. Success: end-effector within 2 cm of the
/// target centroid with the gripper closed; episodes end after 4 steps.
class ReachEnv {
 public:
  explicit ReachEnv(std::uint64_t seed, EnvOptions options = {});

  Observation reset();
  StepResult step(const Pose7DoF& action);
  Pose7DoF expert_action() const { return demo_action(scene_, state_); }

  const SyntheticScene& scene() const { return scene_; }
  const RobotState& state() const { return state_; }
  int steps_taken() const { return steps_; }

 private:
  SyntheticScene scene_;
  EnvOptions options_;
  geometry::PointCloud cloud_;
  RobotState state_;
  int steps_ = 0;
};

bool is_success(const SyntheticScene& scene, const Pose7DoF& ee);

struct ReachTask {
  SyntheticScene scene;
  EpisodeRecord demo;
  PretrainRecord render;
};

ReachTask gen_reach_task(std::uint64_t seed, EnvOptions options = {});

/// Seeds `base, base+1, ...` -> demonstrations / renders.
std::vector<EpisodeRecord> gen_episodes(std::uint64_t base_seed, int count, EnvOptions options = {});
std::vector<PretrainRecord> gen_pretrain_records(std::uint64_t base_seed, int count, EnvOptions options = {});

}  // namespace lift3d::envdata
