#pragma once

#include "lift3d/geometry.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

namespace lift3d {

/// End-effector pose or action: translation (m, world frame), axis-angle
/// rotation (rad, |R| <= pi), gripper (label in {0,1}, prediction in [0,1]).
struct Pose7DoF {
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Eigen::Vector3d rotation = Eigen::Vector3d::Zero();
  double gripper = 0.0;

  Eigen::Matrix<double, 7, 1> vector() const {
    Eigen::Matrix<double, 7, 1> v;
    v << translation, rotation, gripper;
    return v;
  }
  static Pose7DoF from_vector(const Eigen::Ref<const Eigen::VectorXd>& v) {
    return {v.segment<3>(0), v.segment<3>(3), v(6)};
  }
  bool operator==(const Pose7DoF&) const = default;
};

/// Rescales an axis-angle vector so its norm lies in [0, pi], flipping the
/// axis for angles beyond pi.
Eigen::Vector3d canonicalize_axis_angle(const Eigen::Vector3d& r);

struct RobotState {
  Pose7DoF end_effector;
  std::vector<double> joint_positions;
  std::vector<double> joint_velocities;

  /// Flat vector: pose (7) then joint positions then velocities.
  Eigen::VectorXd vector() const;
  int dimension() const { return 7 + static_cast<int>(joint_positions.size() + joint_velocities.size()); }
  bool operator==(const RobotState&) const = default;
};

struct EpisodeStep {
  geometry::PointCloud cloud;
  RobotState state;
  Pose7DoF action;
};

struct EpisodeRecord {
  std::string task;
  std::uint64_t scene_seed = 0;
  std::vector<EpisodeStep> steps;
};

/// Image-depth-attention-text sample for masked depth pretraining. Depth is
/// in meters with 0 marking invalid pixels.
struct PretrainRecord {
  int height = 0;
  int width = 0;
  std::vector<double> image;  // H x W x 3
  std::vector<double> depth;  // H x W
  std::vector<double> attention;
  std::string text;
  std::uint64_t seed = 0;
};

/// Rounds to the nearest 32-bit float, the storage precision of every
/// dataset and checkpoint blob.
inline double storage_round(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace lift3d
